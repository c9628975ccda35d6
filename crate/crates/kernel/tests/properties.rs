use hynt_kernel::{Array2, CosineRestarts, Graph, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Softmax computed from the definition, one column at a time.
fn softmax_oracle(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = col.iter().map(|v| (v - m).exp()).sum();
        col.mapv_inplace(|v| (v - m).exp() / z);
    }
    out
}

proptest! {
    #[test]
    fn softmax_columns_are_distributions(x in matrix(6, 4)) {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let v = g.constant(x.clone()).unwrap();
        let s = g.softmax_cols(v).unwrap();
        let y = g.value(s).to_owned();
        for col in y.columns() {
            prop_assert!((col.sum() - 1.0).abs() < 1e-9);
            prop_assert!(col.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let oracle = softmax_oracle(&x);
        prop_assert!((&y - &oracle).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_standardizes_columns(x in matrix(8, 5)) {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let v = g.constant(x.clone()).unwrap();
        let gain = g.constant(Array2::ones((8, 1))).unwrap();
        let bias = g.constant(Array2::zeros((8, 1))).unwrap();
        let y = g.layer_norm(v, gain, bias).unwrap();
        let y = g.value(y).to_owned();
        for (col, src) in y.columns().into_iter().zip(x.columns()) {
            let spread = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - src.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-2);
            let mean = col.sum() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded(x in matrix(5, 5), seed in 0u64..1000) {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let v = g.constant(x.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = g.dropout(v, 0.5, false, &mut rng).unwrap();
        prop_assert_eq!(e, v);

        let run = |seed: u64| {
            let mut g = Graph::new(&ps);
            let v = g.constant(x.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = g.dropout(v, 0.5, true, &mut rng).unwrap();
            g.value(y).to_owned()
        };
        let (a, b) = (run(seed), run(seed));
        prop_assert_eq!(&a, &b);
        for (&o, &i) in a.iter().zip(x.iter()) {
            prop_assert!(o == 0.0 || (o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_stays_in_range_and_restarts_at_base(
        base in 1e-4f64..1e-2,
        frac in 0.0f64..0.9,
        t0 in 1.0f64..100.0,
        mult in 1.0f64..3.0,
        t in 0.0f64..1000.0,
    ) {
        let min = base * frac;
        let s = CosineRestarts::new(base, min, t0, mult).unwrap();
        let lr = s.lr_at(t);
        prop_assert!(lr >= min - 1e-15 && lr <= base + 1e-15);
        let (start, len) = s.cycle(t);
        prop_assert!(start <= t && t < start + len);
        prop_assert!((s.lr_at(start) - base).abs() < 1e-15);
        // continuous inside the cycle
        let inner = start + 0.5 * len;
        prop_assert!((s.lr_at(inner) - s.lr_at(inner + 1e-9)).abs() < 1e-9);
    }
}

/// The fused attention op against the same computation built from the
/// primitive ops (head slicing, transpose, matmul, column softmax).
#[test]
fn fused_attention_matches_composition() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, heads, s) = (6, 3, 4);
    let dh = d / heads;
    let rand_m = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((d, 2 * s), |_| rng.random_range(-1.0..1.0));
    let (q, k, v) = (rand_m(&mut rng), rand_m(&mut rng), rand_m(&mut rng));
    let valid = [true, true, true, true, true, false, true, false];

    let ps = ParamStore::new();
    let mut g = Graph::new(&ps);
    let (qv, kv, vv) = (
        g.constant(q).unwrap(),
        g.constant(k).unwrap(),
        g.constant(v).unwrap(),
    );
    let fused = g.attention(qv, kv, vv, heads, s, &valid).unwrap();
    let fused = g.value(fused).to_owned();

    for b in 0..2 {
        let cols: Vec<usize> = (b * s..(b + 1) * s).collect();
        let keys: Vec<usize> = cols.iter().copied().filter(|&c| valid[c]).collect();
        for h in 0..heads {
            let rows: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let qh = g.row_select(qv, &rows).unwrap();
            let qh = g.select_cols(qh, &cols).unwrap();
            let kh = g.row_select(kv, &rows).unwrap();
            let kh = g.select_cols(kh, &keys).unwrap();
            let vh = g.row_select(vv, &rows).unwrap();
            let vh = g.select_cols(vh, &keys).unwrap();
            let kt = g.transpose(kh).unwrap();
            let scores = g.matmul(kt, qh).unwrap();
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt()).unwrap();
            let p = g.softmax_cols(scores).unwrap();
            let out = g.matmul(vh, p).unwrap();
            let out = g.value(out);
            for (ci, &c) in cols.iter().enumerate() {
                for (ri, &r) in rows.iter().enumerate() {
                    assert!((out[[ri, ci]] - fused[[r, c]]).abs() < 1e-12);
                }
            }
        }
    }
}
