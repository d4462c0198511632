use fseg::faultsim::{inject, sample_fault, ChannelScope, Geometry, Magnitude, SlotShape};
use fseg::hardening::{rectify, ActivationKind};
use fseg::metrics::{classify_sdc, entropy_map, miou, prr};
use fseg::rng::SimRng;
use fseg::{ClassMap, FaultDescriptor, InjectionPolicy, SdcClass, Shape, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..3, 1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-10.0f32..10.0, n * c * h * w)
            .prop_map(move |data| Tensor::new(Shape::new(n, c, h, w), data).unwrap())
    })
}

fn geometry_strategy(h: usize, w: usize) -> impl Strategy<Value = Geometry> {
    prop_oneof![
        (0..h).prop_map(|y| Geometry::Row { y }),
        (0..w).prop_map(|x| Geometry::Col { x }),
        (0..h, 0..w)
            .prop_flat_map(move |(y, x)| (Just(y), Just(x), 1..=h - y, 1..=w - x))
            .prop_map(|(y, x, bh, bw)| Geometry::Block { y, x, h: bh, w: bw }),
    ]
}

fn covered(g: &Geometry, y: usize, x: usize) -> bool {
    match *g {
        Geometry::Row { y: r } => y == r,
        Geometry::Col { x: c } => x == c,
        Geometry::Block { y: by, x: bx, h, w } => (by..by + h).contains(&y) && (bx..bx + w).contains(&x),
    }
}

fn class_map(h: usize, w: usize, classes: u8) -> impl Strategy<Value = ClassMap> {
    prop::collection::vec(0..classes, h * w).prop_map(move |d| ClassMap::new(h, w, d).unwrap())
}

proptest! {
    #[test]
    fn injection_touches_only_the_fault_region(
        (x, g, ch, m) in tensor_strategy().prop_flat_map(|x| {
            let s = x.shape();
            (Just(x), geometry_strategy(s.h, s.w), prop::option::of(0..s.c), -4.0f32..4.0)
        })
    ) {
        let fault = FaultDescriptor {
            layer_slot: 0,
            geometry: g,
            channels: ch.map_or(ChannelScope::All, ChannelScope::Single),
            magnitude: Magnitude::Scale(m),
        };
        let y = inject(&x, &fault).unwrap();
        let s = x.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for yy in 0..s.h {
                    for xx in 0..s.w {
                        let inside = covered(&g, yy, xx) && ch.is_none_or(|k| k == c);
                        let want = if inside { x.get(n, c, yy, xx) * m } else { x.get(n, c, yy, xx) };
                        prop_assert_eq!(y.get(n, c, yy, xx).to_bits(), want.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn identity_scale_is_a_bit_copy(x in tensor_strategy(), seed in any::<u64>()) {
        let s = x.shape();
        let policy = InjectionPolicy::fixed_magnitude(1.0);
        let fault = sample_fault(&policy, &[SlotShape { c: s.c, h: s.h, w: s.w }], &mut SimRng::new(seed)).unwrap();
        prop_assert!(inject(&x, &fault).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn sampled_faults_fit_their_slot(seed in any::<u64>(), c in 1usize..5, h in 1usize..20, w in 1usize..20) {
        let slots = [SlotShape { c, h, w }];
        let mut rng = SimRng::new(seed);
        let fault = sample_fault(&InjectionPolicy::default(), &slots, &mut rng).unwrap();
        prop_assert!(fault.geometry.fits(h, w));
        if let ChannelScope::Single(k) = fault.channels {
            prop_assert!(k < c);
        }
    }

    #[test]
    fn self_comparison_is_masked(x in tensor_strategy()) {
        let single = x.sample_tensor(0);
        prop_assert_eq!(classify_sdc(&single, &single).unwrap().class, SdcClass::Masked);
    }

    #[test]
    fn miou_is_invariant_to_consistent_relabeling(
        pred in class_map(6, 6, 4),
        gt in class_map(6, 6, 4),
        perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let relabel = |m: &ClassMap| ClassMap::new(6, 6, m.data().iter().map(|&c| perm[c as usize]).collect()).unwrap();
        let a = miou(&pred, &gt, 4).unwrap().miou;
        let b = miou(&relabel(&pred), &relabel(&gt), 4).unwrap().miou;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn prr_never_exceeds_one(
        items in prop::collection::vec((any::<bool>(), 0.0f64..1.0), 2..200)
    ) {
        let (correct, unc): (Vec<bool>, Vec<f64>) = items.into_iter().unzip();
        if let Some(p) = prr(&correct, &unc).unwrap() {
            prop_assert!(p <= 1.0 + 1e-12, "prr {}", p);
        }
    }

    #[test]
    fn entropy_is_bounded_by_ln_c(x in tensor_strategy()) {
        let s = x.shape();
        let bound = (s.c as f64).ln() + 1e-9;
        for h in entropy_map(&x.sample_tensor(0)) {
            prop_assert!((-1e-12..=bound).contains(&h));
        }
    }

    #[test]
    fn relu6_output_stays_in_range(x in tensor_strategy()) {
        let y = rectify(&x, ActivationKind::Relu6);
        prop_assert!(y.data().iter().all(|v| (0.0..=6.0).contains(v)));
    }
}

#[test]
fn default_policy_geometry_shares_are_balanced() {
    let slots = [SlotShape { c: 8, h: 16, w: 16 }];
    let mut rng = SimRng::new(11);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let f = sample_fault(&InjectionPolicy::default(), &slots, &mut rng).unwrap();
        counts[match f.geometry {
            Geometry::Row { .. } => 0,
            Geometry::Col { .. } => 1,
            Geometry::Block { .. } => 2,
        }] += 1;
    }
    for c in counts {
        let share = c as f64 / n as f64;
        assert!((0.32..=0.35).contains(&share), "{counts:?}");
    }
}
