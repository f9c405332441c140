use proptest::prelude::*;
use ticketlab_core::connectivity::curve_from_errors;
use ticketlab_core::engine::{backward, build, finite_difference_grad, probe_batch, relative_error};
use ticketlab_core::masking::{prune_values, remaining_ratio, sign0, transfer};
use ticketlab_core::{BinaryMask, ForwardMode, ModelSpec, NormKind, Role, TransferMode};

/// Stable full sort of surviving magnitudes; equal magnitudes keep index
/// order, so the first `k` are exactly the ones to drop.
fn oracle_prune(values: &[f64], bits: &[bool], prunable: &[bool], rate: f64) -> Vec<bool> {
    let mut surviving: Vec<(f64, usize)> = (0..values.len())
        .filter(|&i| bits[i] && prunable[i])
        .map(|i| (values[i].abs(), i))
        .collect();
    let k = (rate * surviving.len() as f64).round() as usize;
    surviving.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out = bits.to_vec();
    for &(_, i) in &surviving[..k] {
        out[i] = false;
    }
    out
}

fn mask_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<bool>, f64)> {
    (1usize..400).prop_flat_map(|d| {
        (
            prop::collection::vec(prop_oneof![(-4i32..5).prop_map(|v| v as f64 * 0.25), -10.0f64..10.0], d),
            prop::collection::vec(prop::bool::weighted(0.8), d),
            prop::collection::vec(prop::bool::weighted(0.8), d),
            0.0f64..0.99,
        )
    })
    .prop_map(|(v, bits, prunable, rate)| {
        let bits = bits.iter().zip(&prunable).map(|(&b, &p)| b || !p).collect();
        (v, bits, prunable, rate)
    })
}

proptest! {
    #[test]
    fn prune_matches_full_sort((values, bits, prunable, rate) in mask_inputs()) {
        let mask = BinaryMask::from_parts(bits.clone(), prunable.clone()).unwrap();
        let got = prune_values(&values, &mask, rate).unwrap();
        prop_assert_eq!(got.bits(), &oracle_prune(&values, &bits, &prunable, rate)[..]);
        prop_assert!(got.is_subset_of(&mask));
        prop_assert_eq!(prune_values(&values, &got, 0.0).unwrap(), got);
    }

    #[test]
    fn signed_transfer_reproduces_signs(init in prop::collection::vec(-3.0f64..3.0, 1..60), seed in 0u64..1000) {
        let d = init.len();
        // signs drawn independently of the init
        let trained: Vec<f64> = (0..d).map(|i| (((i as u64 * 2654435761 + seed) % 7) as f64) - 3.0).collect();
        let signs = sign0(&trained).unwrap();
        let out: Vec<f64> = init.iter().zip(signs.signs()).map(|(&v, &s)| v.abs() * f64::from(s)).collect();
        let back = sign0(&out).unwrap();
        for (i, &v) in init.iter().enumerate() {
            if v != 0.0 {
                prop_assert_eq!(back.signs()[i], signs.signs()[i]);
            }
        }
    }

    #[test]
    fn barrier_identities(errors in prop::collection::vec(0.0f64..1.0, 3..40)) {
        let c = curve_from_errors(errors.clone());
        let last = errors.len() - 1;
        prop_assert_eq!(c.barriers[0] + c.barriers[last], 0.0);
        let mut rev = errors.clone();
        rev.reverse();
        let r = curve_from_errors(rev);
        prop_assert_eq!(c.sup_barrier, r.sup_barrier);
        for i in 0..=last {
            prop_assert_eq!(c.barriers[i], r.barriers[last - i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_match_finite_differences(
        hidden in prop::collection::vec(3usize..7, 1..3),
        input in 1usize..4,
        classes in 2usize..4,
        norm in prop_oneof![Just(NormKind::BatchNorm), Just(NormKind::LayerNorm), Just(NormKind::None)],
        alpha in prop::option::of(0.0f64..=1.0),
        batch in 3usize..9,
        seed in 0u64..10_000,
    ) {
        let spec = ModelSpec::new(input, &hidden, classes, norm);
        let (mut p, b) = build(&spec, seed).unwrap();
        let psi0 = p.psi();
        let moved: Vec<f64> = psi0.iter().enumerate().map(|(k, v)| v + 0.05 * (k % 5) as f64 - 0.12).collect();
        p.set_psi(&moved).unwrap();
        // keep pre-activations off the ReLU kink at exactly 0
        for (k, i) in p.layout().indices_with_role(Role::Bias).into_iter().enumerate() {
            p.values_mut()[i] = 0.07 * ((k * 7 + seed as usize) % 5) as f64 - 0.13;
        }
        let mode = match alpha {
            Some(a) => ForwardMode::interpolated(a),
            None => ForwardMode::train(),
        };
        let data = probe_batch(input, classes, batch, seed + 1);
        let analytic = backward(&p, &b, &psi0, &data, mode).unwrap().grad;
        let numeric = finite_difference_grad(&p, &b, &psi0, &data, mode, 1e-6).unwrap();
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            prop_assert!(relative_error(a, n) <= 1e-5, "param {}: analytic {} numeric {}", i, a, n);
        }
    }

    #[test]
    fn signed_transfer_on_real_layouts(seed in 0u64..1000, fresh in 0u64..1000) {
        let spec = ModelSpec::new(3, &[5, 4], 2, NormKind::BatchNorm);
        let (trained, _) = build(&spec, seed).unwrap();
        let (init, _) = build(&spec, fresh).unwrap();
        let signs = sign0(trained.values()).unwrap();
        let mask = BinaryMask::dense(trained.layout());
        let out = transfer(&init, &trained, &mask, &signs, TransferMode::SignedInit).unwrap();
        let back = sign0(out.values()).unwrap();
        for i in 0..out.len() {
            if init.values()[i] != 0.0 {
                prop_assert_eq!(back.signs()[i], signs.signs()[i]);
            }
        }
    }
}

#[test]
fn remaining_ratio_follows_geometric_decay() {
    let p = 10_000;
    let values: Vec<f64> = (0..p).map(|i| ((i * 7_919) % p) as f64 / p as f64 + 1e-3).collect();
    let mut mask = BinaryMask::from_parts(vec![true; p], vec![true; p]).unwrap();
    for t in 1..=11 {
        let next = prune_values(&values, &mask, 0.2).unwrap();
        assert!(next.is_subset_of(&mask));
        mask = next;
        let r = remaining_ratio(&mask).unwrap();
        let exact = 0.8f64.powi(t);
        assert!((r - exact).abs() <= t as f64 / p as f64, "t={t}: {r} vs {exact}");
    }
    // per-step rounding oracle
    let mut survivors = p;
    for _ in 0..11 {
        survivors -= (0.2 * survivors as f64).round() as usize;
    }
    assert_eq!(mask.surviving_prunable(), survivors);
}
