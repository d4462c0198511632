#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;
pub mod oracles;
pub mod pipeline;
