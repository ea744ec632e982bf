use pogo_core::quant::{apply, diff, quantize, QuantDiff, QuantModel, MAX_CODE};
use proptest::prelude::*;

fn values() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop_oneof![-1e3f32..1e3, -1e-3f32..1e-3, Just(0.0f32)], 1..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip_error_is_at_most_half_a_scale(v in values(), chunk in 1usize..17) {
        let q = quantize(&v, chunk).unwrap();
        let back = q.dequantize_values();
        prop_assert_eq!(back.len(), v.len());
        for (i, (&w, &d)) in v.iter().zip(&back).enumerate() {
            let c = i / chunk;
            let scale = q.scales()[c] as f64;
            let max = v[c * chunk..((c + 1) * chunk).min(v.len())].iter().fold(0f64, |m, x| m.max(x.abs() as f64));
            // The scale covers the chunk's largest magnitude with 7 codes.
            prop_assert!(scale * MAX_CODE as f64 >= max);
            prop_assert!(scale <= max / MAX_CODE as f64 * (1.0 + 1e-5));
            prop_assert!((w as f64 - d as f64).abs() <= scale / 2.0, "index {}: {} vs {}", i, w, d);
            prop_assert!(q.code(i).abs() <= MAX_CODE);
        }
    }

    #[test]
    fn serialization_and_requantization_are_identities(v in values(), chunk in 1usize..17) {
        let q = quantize(&v, chunk).unwrap();
        let bytes = q.to_bytes();
        let decoded = QuantModel::from_bytes(&bytes).unwrap();
        prop_assert_eq!(decoded.to_bytes(), bytes.clone());
        let again = quantize(&q.dequantize_values(), chunk).unwrap();
        prop_assert_eq!(again.to_bytes(), bytes);
    }

    #[test]
    fn diff_then_apply_is_bit_exact(
        v in values(),
        chunk in 1usize..17,
        edits in prop::collection::vec((any::<prop::sample::Index>(), -50f32..50f32), 0..10),
    ) {
        let base = quantize(&v, chunk).unwrap();
        let mut w = v.clone();
        for (i, x) in &edits {
            w[i.index(v.len())] = *x;
        }
        let next = quantize(&w, chunk).unwrap();
        let d = diff(&base, &next).unwrap();
        let wire = QuantDiff::from_bytes(&d.to_bytes()).unwrap();
        prop_assert_eq!(&wire, &d);
        prop_assert_eq!(apply(&base, &wire).unwrap().to_bytes(), next.to_bytes());
        prop_assert!(d.changed.len() <= edits.len());
    }
}

#[test]
fn hand_computed_chunk() {
    // max |w| = 3.5 gives scale 0.5; 1.25 / 0.5 = 2.5 rounds to even.
    let q = quantize(&[3.5, 1.25, -0.75, 0.0], 4).unwrap();
    assert_eq!(q.scales(), &[0.5]);
    assert_eq!(q.codes(), vec![7, 2, -2, 0]);
    assert_eq!(q.dequantize_values(), vec![3.5, 1.0, -1.0, 0.0]);
}

#[test]
fn diff_against_wrong_base_is_refused() {
    let a = quantize(&[1.0, 2.0, 3.0], 2).unwrap();
    let b = quantize(&[1.0, 2.0, 4.0], 2).unwrap();
    let d = diff(&a, &b).unwrap();
    assert_eq!(d.changed.len(), 1);
    assert!(apply(&b, &d).is_err());
}
