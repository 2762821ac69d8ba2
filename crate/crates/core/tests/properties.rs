use std::collections::BTreeMap;

use caformer_core::backbone::{backbone_forward, check_structure, Ablation, CaformerConfig, CaformerParams};
use caformer_core::data::{Scaler, SeriesDataset, Split};
use caformer_core::heads::{classification_head, forecast_head, reconstruction_head, HeadConfig};
use caformer_core::metrics::{accuracy, detection_metrics, regression_metrics, smape};
use caformer_core::numerics::grad_check;
use caformer_core::patching::{in_patch_normalize, make_patches, patch_count};
use caformer_core::{NdArray, Result, Tape, Var};
use proptest::prelude::*;

fn array(shape: &[usize], lo: f64, hi: f64) -> impl Strategy<Value = NdArray> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| NdArray::new(shape.clone(), v).unwrap())
}

/// Same as [`array`] but keeps every entry at least `gap` away from zero.
fn off_zero(shape: &[usize], gap: f64) -> impl Strategy<Value = NdArray> {
    array(shape, -2.0, 2.0).prop_map(move |a| a.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v }))
}

/// Weighted sum of `op`'s output so every output entry reaches the loss with
/// a distinct coefficient.
fn weighted<F>(op: F) -> impl Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + Sync
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + Sync,
{
    move |tape, vars| {
        let y = op(tape, vars)?;
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let w = NdArray::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect())?;
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    }
}

fn max_error<F>(params: Vec<(&str, NdArray)>, op: F) -> f64
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + Sync,
{
    let params: BTreeMap<String, NdArray> = params.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    grad_check(weighted(op), &params, 1e-5).unwrap().max_rel_error
}

const PRIMITIVE_TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_primitives_match_finite_differences(
        a in array(&[2, 3], -2.0, 2.0),
        b in off_zero(&[2, 3], 0.5),
    ) {
        let ps = || vec![("a", a.clone()), ("b", b.clone())];
        prop_assert!(max_error(ps(), |t, v| t.add(v["a"], v["b"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(ps(), |t, v| t.sub(v["a"], v["b"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(ps(), |t, v| t.mul(v["a"], v["b"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(ps(), |t, v| t.div(v["a"], v["b"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(ps(), |t, v| t.scale(v["a"], -1.7)) < PRIMITIVE_TOL, "gradient mismatch");
    }

    #[test]
    fn kinked_primitives_match_away_from_zero(a in off_zero(&[3, 4], 1e-2)) {
        prop_assert!(max_error(vec![("a", a.clone())], |t, v| t.relu(v["a"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("a", a)], |t, v| t.abs(v["a"])) < PRIMITIVE_TOL, "gradient mismatch");
    }

    #[test]
    fn linear_algebra_primitives_match_finite_differences(
        a in array(&[2, 3], -1.0, 1.0),
        w in array(&[3, 4], -1.0, 1.0),
        bias in array(&[4], -1.0, 1.0),
        batch in array(&[2, 3, 4], -1.0, 1.0),
    ) {
        prop_assert!(max_error(vec![("a", a.clone()), ("w", w.clone())], |t, v| t.matmul(v["a"], v["w"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("a", a.clone()), ("w", w.clone()), ("b", bias)], |t, v| {
            t.linear(v["a"], v["w"], Some(v["b"]))
        }) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("x", batch.clone())], |t, v| t.permute(v["x"], &[2, 0, 1])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("x", batch.clone())], |t, v| t.transpose(v["x"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("x", batch.clone())], |t, v| t.reshape(v["x"], &[6, 4])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("a", a.clone())], |t, v| t.broadcast_to(v["a"], &[4, 2, 3])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("a", a.clone()), ("b", a.map(|x| x * 0.5 + 0.1))], |t, v| {
            t.concat(&[v["a"], v["b"]])
        }) < PRIMITIVE_TOL, "gradient mismatch");
    }

    #[test]
    fn reductions_and_normalizers_match_finite_differences(
        x in array(&[3, 5], -2.0, 2.0),
        pos in array(&[3, 5], 0.2, 2.0),
    ) {
        let px = || vec![("x", x.clone())];
        prop_assert!(max_error(px(), |t, v| t.softmax(v["x"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(vec![("x", pos)], |t, v| t.row_normalize(v["x"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(px(), |t, v| t.mean_last(v["x"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(px(), |t, v| t.sum_all(v["x"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(px(), |t, v| t.mean_all(v["x"])) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(px(), |t, v| t.standardize(v["x"], 1e-5)) < PRIMITIVE_TOL, "gradient mismatch");
        let mask: Vec<bool> = (0..15).map(|i| i % 4 == 1).collect();
        prop_assert!(max_error(px(), |t, v| t.masked_fill(v["x"], &mask, 0.0)) < PRIMITIVE_TOL, "gradient mismatch");
        prop_assert!(max_error(px(), |t, v| t.cross_entropy(v["x"], &[4, 0, 2])) < PRIMITIVE_TOL, "gradient mismatch");
    }

    #[test]
    fn softmax_then_dot_composite(x in array(&[4, 6], -3.0, 3.0), y in array(&[6, 2], -1.0, 1.0)) {
        let err = max_error(vec![("x", x), ("y", y)], |t, v| {
            let s = t.softmax(v["x"])?;
            t.matmul(s, v["y"])
        });
        prop_assert!(err < PRIMITIVE_TOL, "gradient mismatch");
    }

    #[test]
    fn softmax_rows_are_distributions(x in array(&[5, 7], -30.0, 30.0)) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn tiny_cfg(ablation: Ablation, k: usize) -> CaformerConfig {
    let mut cfg = CaformerConfig::new(3, 32).with_embed_dim(8);
    cfg.patch_len = 8;
    cfg.stride = 4;
    cfg.blocks = 2;
    cfg.align_size = k;
    cfg.ablation = ablation;
    cfg
}

fn ablation() -> impl Strategy<Value = Ablation> {
    prop_oneof![
        Just(Ablation::Full),
        Just(Ablation::NoDep),
        Just(Ablation::NoDyn),
        Just(Ablation::NoEnv)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_passes_keep_structure(
        x in array(&[3, 32], -5.0, 5.0),
        seed in 0u64..1000,
        ab in ablation(),
        k in prop_oneof![Just(8usize), Just(3usize)],
    ) {
        let cfg = tiny_cfg(ab, k);
        let params = CaformerParams::init(&cfg, &HeadConfig::forecast(4), seed).unwrap();
        let out = backbone_forward(&x, &cfg, &params).unwrap();
        prop_assert!(out.s_temporal.is_finite());
        let check = check_structure(&cfg, &x, &out).unwrap();
        prop_assert!(check.holds(1e-12, 1e-9, 1e-6), "{check:?}");
        let again = backbone_forward(&x, &cfg, &params).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn unpatch_inverts_patch(
        l in 8usize..80,
        p in 1usize..8,
        s_frac in 0.0f64..1.0,
        seed in array(&[2, 80], -10.0, 10.0),
    ) {
        let s = 1 + ((p - 1) as f64 * s_frac) as usize;
        let x = NdArray::new(vec![2, l], [&seed.row(0)[..l], &seed.row(1)[..l]].concat()).unwrap();
        let ps = make_patches(&x, p, s).unwrap();
        prop_assert_eq!(ps.unpatch(), x.clone());
        prop_assert_eq!(in_patch_normalize(&ps).unpatch().max_abs_diff(&x) < 1e-9, true);
        let (_, _, n) = ps.dims();
        prop_assert_eq!(n, patch_count(l, p, s).unwrap());
    }

    #[test]
    fn patch_count_is_monotone(l in 16usize..200, p in 1usize..16, s in 1usize..16) {
        prop_assume!(s <= p);
        let n = patch_count(l, p, s).unwrap();
        if s < p {
            prop_assert!(patch_count(l, p, s + 1).unwrap() <= n);
        }
        prop_assert!(patch_count(l, p + 1, s).unwrap() <= n);
    }

    #[test]
    fn heads_are_affine_in_features(
        s1 in array(&[3, 2, 4], -2.0, 2.0),
        s2 in array(&[3, 2, 4], -2.0, 2.0),
        a in -1.5f64..1.5,
        w in array(&[12, 5], -1.0, 1.0),
        wc in array(&[24, 3], -1.0, 1.0),
        b in array(&[5], -1.0, 1.0),
    ) {
        let mut params = BTreeMap::new();
        for name in ["forecast", "recon"] {
            params.insert(format!("head.{name}.weight"), w.clone());
            params.insert(format!("head.{name}.bias"), b.clone());
        }
        params.insert("head.cls.weight".to_string(), wc);
        params.insert("head.cls.bias".to_string(), NdArray::new(vec![3], b.data()[..3].to_vec()).unwrap());
        let mix = NdArray::new(
            s1.shape().to_vec(),
            s1.data().iter().zip(s2.data()).map(|(x, y)| a * x + (1.0 - a) * y).collect(),
        ).unwrap();
        type HeadFn = fn(&mut Tape, &BTreeMap<String, Var>, Var) -> Result<Var>;
        let heads: [HeadFn; 3] = [forecast_head, reconstruction_head, classification_head];
        for head in heads {
            let run = |s: &NdArray| {
                let mut tape = Tape::new();
                let vars = tape.bind_frozen(&params);
                let sv = tape.constant(s.clone());
                let y = head(&mut tape, &vars, sv).unwrap();
                tape.value(y).clone()
            };
            let (y1, y2, ym) = (run(&s1), run(&s2), run(&mix));
            for ((p, q), r) in y1.data().iter().zip(y2.data()).zip(ym.data()) {
                let lin = a * p + (1.0 - a) * q;
                prop_assert!((lin - r).abs() < 1e-9 * (1.0 + lin.abs()));
            }
        }
    }

    #[test]
    fn scaler_roundtrip(values in array(&[3, 40], -100.0, 100.0)) {
        let ds = SeriesDataset::new(values.clone(), vec!["a".into(), "b".into(), "c".into()], Split::default_for(40).unwrap()).unwrap();
        let scaler = Scaler::fit(&ds);
        let back = scaler.inverse(&scaler.transform(&values));
        prop_assert!(back.max_abs_diff(&values) < 1e-9);
    }

    #[test]
    fn smape_ignores_point_order(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50),
    ) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let (tr, pr): (Vec<f64>, Vec<f64>) = pairs.iter().rev().copied().unzip();
        prop_assert_eq!(smape(&t, &p).unwrap(), smape(&tr, &pr).unwrap());
    }

    #[test]
    fn metric_ranges_and_f1_identity(
        truth in prop::collection::vec(-5.0f64..5.0, 1..60),
        noise in prop::collection::vec(-5.0f64..5.0, 60),
        flags in prop::collection::vec((any::<bool>(), any::<bool>()), 1..80),
        adjusted in any::<bool>(),
    ) {
        let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, e)| t + e).collect();
        let r = regression_metrics(&truth, &pred).unwrap();
        prop_assert!(r.mse >= 0.0 && r.mae >= 0.0);
        let s = smape(&truth, &pred).unwrap();
        prop_assert!((0.0..=200.0).contains(&s));

        let (t, p): (Vec<bool>, Vec<bool>) = flags.into_iter().unzip();
        let d = detection_metrics(&t, &p, adjusted).unwrap();
        for v in [d.precision, d.recall, d.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((d.f1 * (d.precision + d.recall) - 2.0 * d.precision * d.recall).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_point_order(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0usize..4, 0usize..4), 1..50),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let split = |v: &[(f64, f64, usize, usize)]| {
            let t: Vec<f64> = v.iter().map(|x| x.0).collect();
            let p: Vec<f64> = v.iter().map(|x| x.1).collect();
            let ct: Vec<usize> = v.iter().map(|x| x.2).collect();
            let cp: Vec<usize> = v.iter().map(|x| x.3).collect();
            (t, p, ct, cp)
        };
        let (t1, p1, c1, d1) = split(&pairs);
        let (t2, p2, c2, d2) = split(&shuffled);
        let (a, b) = (regression_metrics(&t1, &p1).unwrap(), regression_metrics(&t2, &p2).unwrap());
        prop_assert_eq!(a, b);
        prop_assert_eq!(accuracy(&c1, &d1).unwrap(), accuracy(&c2, &d2).unwrap());
    }
}
