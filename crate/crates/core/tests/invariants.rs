use absorbkit::gating::{decode_mask_file, encode_mask_file, random_mask, topk_mask};
use absorbkit::metrics::{entropy_ratio, gate_f1, topk_mass};
use absorbkit::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `(n, values)` for a square `n × n` score block.
fn square() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| (Just(n), prop::collection::vec(-5.0f64..5.0, n * n)))
}

fn causal_softmax(n: usize, raw: &[f64]) -> Tensor {
    let mut out = vec![0.0; n * n];
    for q in 0..n {
        let row = &raw[q * n..q * n + q + 1];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        for j in 0..=q {
            out[q * n + j] = (row[j] - max).exp() / z;
        }
    }
    Tensor::new(vec![n, n], out).unwrap()
}

proptest! {
    #[test]
    fn topk_keeps_min_k_q1_causal_keys((n, raw) in square(), k in 1usize..10) {
        let mask = topk_mask(&Tensor::new(vec![n, n], raw).unwrap(), k).unwrap();
        for (q, count) in mask.row_counts().into_iter().enumerate() {
            prop_assert_eq!(count, k.min(q + 1));
        }
        for q in 0..n {
            for j in q + 1..n {
                prop_assert!(!mask.keep()[q * n + j]);
            }
        }
    }

    #[test]
    fn random_masks_are_causal_with_exact_counts(n in 1usize..12, k in 1usize..14, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&[2], n, k, &mut rng).unwrap();
        mask.validate().unwrap();
        for (r, count) in mask.row_counts().into_iter().enumerate() {
            prop_assert_eq!(count, k.min(r % n + 1));
        }
    }

    #[test]
    fn masked_softmax_rows_are_distributions((n, raw) in square(), k in 1usize..8) {
        let scores = Tensor::new(vec![n, n], raw).unwrap();
        let mask = topk_mask(&scores, k).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(scores, false);
        let m = tape.mask_fill(s, mask.keep()).unwrap();
        let p = tape.softmax_rows(m).unwrap();
        let p = tape.value(p).data();
        for (q, row) in p.chunks(n).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &x) in row.iter().enumerate() {
                if !mask.keep()[q * n + j] {
                    prop_assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn concentration_metrics_are_fractions((n, raw) in square(), k in 1usize..8) {
        let p = causal_softmax(n, &raw);
        let mass = topk_mass(&p, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&mass));
        prop_assert!(topk_mass(&p, k + 1).unwrap() >= mass - 1e-15);
        prop_assert!((topk_mass(&p, n).unwrap() - 1.0).abs() < 1e-12);
        if n > 1 {
            let e = entropy_ratio(&p).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&e));
        }
    }

    #[test]
    fn f1_is_a_fraction_and_one_on_self((n, raw) in square(), (_, other) in square(), k in 1usize..8) {
        let g = Tensor::new(vec![n, n], raw).unwrap();
        prop_assert_eq!(gate_f1(&g, &g, k).unwrap(), 1.0);
        if other.len() == n * n {
            let t = Tensor::new(vec![n, n], other).unwrap();
            let f = gate_f1(&g, &t, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn mask_files_survive_encoding((n, raw) in square(), k in 1usize..8, seed in any::<u64>()) {
        let mask = topk_mask(&Tensor::new(vec![n, n], raw).unwrap(), k).unwrap();
        let (header, back) = decode_mask_file(&encode_mask_file(&mask, seed)).unwrap();
        prop_assert_eq!(header.seed, seed);
        prop_assert_eq!(header.k, k);
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn mask_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_mask_file(&bytes);
    }
}
