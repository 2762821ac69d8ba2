//! Acceptance run: one `[PASS]` or `[FAIL]` line per criterion, exit status 1
//! when any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use caformer_cli::{gradient_report, run_command, RunConfig};
use caformer_core::backbone::{backbone_forward, check_structure, Ablation, CaformerConfig, CaformerParams};
use caformer_core::heads::HeadConfig;
use caformer_core::metrics::{accuracy, detection_metrics, m4_metrics, naive2_forecast, regression_metrics, smape};
use caformer_core::patching::{make_patches, patch_count};
use caformer_core::scm::{backdoor_suite, random_cpts, verify_docalculus_rules};
use caformer_core::NdArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn report(id: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
    let secs = started.elapsed().as_secs_f64();
    println!(
        "[{}] {id:>2} {name}: {detail} ({secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn cli(args: &[&str]) -> Result<(), String> {
    match run_command(std::iter::once("caformer").chain(args.iter().copied())) {
        0 => Ok(()),
        code => Err(format!("caformer {} exited with {code}", args.join(" "))),
    }
}

fn metric(dir: &Path, name: &str) -> Result<f64, String> {
    let text = std::fs::read_to_string(dir.join("metrics.json")).map_err(err)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
    v["metrics"][name].as_f64().ok_or_else(|| format!("metrics.json has no {name}"))
}

fn gradient_fidelity() -> Check {
    let started = Instant::now();
    let cfg = RunConfig::gradcheck_preset().resolve().map_err(err)?;
    let r = gradient_report(&cfg, 1e-5).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        r.max_rel_error < 1e-4 && secs < 60.0,
        format!(
            "max rel error {:.2e} < 1e-4 over {} entries (worst {}[{}]), {secs:.1} s < 60 s",
            r.max_rel_error, r.entries_checked, r.worst_param, r.worst_index
        ),
    ))
}

fn backdoor_equivalence() -> Check {
    let started = Instant::now();
    let r = backdoor_suite(100, 1).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    let fixtures: [(&str, Vec<Vec<usize>>); 3] = [
        ("chain", vec![vec![], vec![0], vec![1]]),
        ("fork", vec![vec![], vec![0], vec![0]]),
        ("disconnected", vec![vec![], vec![], vec![]]),
    ];
    let mut rules_ok = true;
    let mut applied = Vec::new();
    for (seed, (name, parents)) in fixtures.iter().enumerate() {
        let scm = random_cpts(&["X", "Z", "Y"], parents, &[2, 3, 2], seed as u64 + 3).map_err(err)?;
        let rep = verify_docalculus_rules(&scm, "X", "Z", "Y").map_err(err)?;
        let used = rep.rules.iter().filter(|o| o.premise && o.equality == Some(true)).count();
        rules_ok &= rep.all_verified() && used > 0;
        applied.push(format!("{name} {used}/3"));
    }
    Ok((
        r.max_abs_diff < 1e-12 && secs < 10.0 && rules_ok,
        format!(
            "max |adjusted - surgery| {:.2e} < 1e-12 over {} comparisons, {secs:.2} s < 10 s; rules with premise and equality: {}",
            r.max_abs_diff,
            r.comparisons,
            applied.join(", ")
        ),
    ))
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn structural_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for pass in 0..1000 {
        let mut cfg = CaformerConfig::new(3, 32).with_embed_dim(8);
        cfg.patch_len = 8;
        cfg.stride = 4;
        cfg.blocks = 2;
        cfg.align_size = if pass % 2 == 0 { 8 } else { 3 };
        cfg.ablation = Ablation::ALL[pass % 4];
        let params = CaformerParams::init(&cfg, &HeadConfig::forecast(4), pass as u64).map_err(err)?;
        let x = random_array(&mut rng, &[3, 32], 5.0);
        let out = backbone_forward(&x, &cfg, &params).map_err(err)?;
        let c = check_structure(&cfg, &x, &out).map_err(err)?;
        worst = (
            worst.0.max(c.row_sum_error),
            worst.1.max(c.patch_mean),
            worst.2.max(c.patch_std_error),
        );
        if !c.holds(1e-12, 1e-9, 1e-6) {
            return Ok((false, format!("pass {pass} broke a contract: {c:?}")));
        }
    }
    Ok((
        true,
        format!(
            "1000 passes: row sums within {:.1e}, H_ce upper triangle 0, S - T == I_de bitwise, patch mean {:.1e}, std error {:.1e}",
            worst.0, worst.1, worst.2
        ),
    ))
}

fn patching() -> Check {
    let n = patch_count(96, 16, 8).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let m = rng.random_range(1..6);
        let l = rng.random_range(16..240);
        let x = random_array(&mut rng, &[m, l], 100.0);
        let ps = make_patches(&x, 16, 8).map_err(err)?;
        if ps.unpatch() != x {
            return Ok((false, format!("unpatch(patch(x)) differs for a {m} x {l} series")));
        }
    }
    Ok((n == 12, format!("patch_count(96, 16, 8) = {n}; unpatch(patch(x)) == x on 100 random series")))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn metrics() -> Check {
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let r = regression_metrics(&[1.5, -2.0], &[1.5, -2.0]).map_err(err)?;
    expect("perfect regression", r.mse == 0.0 && r.mae == 0.0);
    let r = regression_metrics(&[0.0, 0.0], &[1.0, -1.0]).map_err(err)?;
    expect("regression [0,0]", close(r.mse, 1.0) && close(r.mae, 1.0));
    let r = regression_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).map_err(err)?;
    expect("regression [1,2,3]", close(r.mse, 2.0 / 3.0) && close(r.mae, 2.0 / 3.0));

    let insample: Vec<f64> = (0..24).map(|t| 10.0 + (t % 4) as f64).collect();
    let m = m4_metrics(&[11.0, 12.0], &[11.0, 12.0], &insample, 1, 5.0, 0.8).map_err(err)?;
    expect("perfect m4", m.smape == 0.0 && m.mase == 0.0 && m.owa == 0.0);
    let single = m4_metrics(&[100.0], &[110.0], &insample, 1, 5.0, 0.8).map_err(err)?;
    expect("smape 100 vs 110", close(single.smape, 2000.0 / 210.0) && close(single.mape, 10.0));
    let equal = m4_metrics(&[100.0], &[110.0], &insample, 1, single.smape, single.mase).map_err(err)?;
    expect("owa of equals", close(equal.owa, 1.0));

    let truth = [false, true, true, false, true];
    let d = detection_metrics(&truth, &truth, false).map_err(err)?;
    expect("perfect detection", d.precision == 1.0 && d.recall == 1.0 && d.f1 == 1.0);
    let d = detection_metrics(&[true, true], &[false, false], false).map_err(err)?;
    expect("no detection", d.f1 == 0.0);
    let t = [true, true, true, true, false];
    let p = [true, true, false, false, true];
    let d = detection_metrics(&t, &p, false).map_err(err)?;
    expect("tp2 fp1 fn2", close(d.precision, 2.0 / 3.0) && close(d.recall, 0.5) && close(d.f1, 4.0 / 7.0));

    expect("accuracy identical", accuracy(&[0, 1, 2], &[0, 1, 2]).map_err(err)? == 1.0);
    expect("accuracy disjoint", accuracy(&[0, 1], &[1, 0]).map_err(err)? == 0.0);
    expect("accuracy 3 of 4", accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).map_err(err)? == 0.75);

    let f = naive2_forecast(&[3.0, 1.0, 4.0, 1.0, 5.0], 1, 3).map_err(err)?;
    expect("naive2 m=1", f.iter().all(|&v| v == 5.0));
    let periodic: Vec<f64> = (0..48).map(|t| [10.0, 20.0, 15.0, 5.0][t % 4]).collect();
    let f = naive2_forecast(&periodic, 4, 4).map_err(err)?;
    expect("naive2 periodic", f.iter().zip(&periodic[44..]).all(|(a, b)| close(*a, *b)));
    let f = naive2_forecast(&[7.0; 12], 4, 3).map_err(err)?;
    expect("naive2 constant", f.iter().all(|&v| close(v, 7.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut smape_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut f1_gap = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let s = smape(&a, &b).map_err(err)?;
        smape_range = (smape_range.0.min(s), smape_range.1.max(s));
        let t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let p: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let d = detection_metrics(&t, &p, rng.random_bool(0.5)).map_err(err)?;
        f1_gap = f1_gap.max((d.f1 * (d.precision + d.recall) - 2.0 * d.precision * d.recall).abs());
    }
    let fuzz_ok = smape_range.0 >= 0.0 && smape_range.1 <= 200.0 && f1_gap <= 1e-12;
    expect("fuzzed ranges", fuzz_ok);
    Ok((
        failures.is_empty(),
        format!(
            "15 examples within 1e-9{}; fuzzed SMAPE in [{:.2}, {:.2}], |F1(P+R) - 2PR| <= {f1_gap:.1e}",
            if failures.is_empty() { String::new() } else { format!(", failed: {}", failures.join(", ")) },
            smape_range.0,
            smape_range.1
        ),
    ))
}

fn forecasting(root: &Path) -> Check {
    let started = Instant::now();
    let out = root.join("forecast");
    cli(&["forecast", "--out", out.to_str().unwrap(), "--epochs", "30", "--seed", "7"])?;
    let secs = started.elapsed().as_secs_f64();
    let (mse, base) = (metric(&out, "mse")?, metric(&out, "persistence_mse")?);
    Ok((
        mse < 0.5 * base && secs <= 300.0,
        format!("M4 L512 L_in 96 H48: test MSE {mse:.4} < 0.5 x persistence {base:.4} (ratio {:.3}), {secs:.0} s <= 300 s", mse / base),
    ))
}

fn imputation(root: &Path) -> Check {
    let out = root.join("impute");
    cli(&["impute", "--out", out.to_str().unwrap(), "--epochs", "15", "--seed", "7"])?;
    let (mse, base) = (metric(&out, "mse")?, metric(&out, "mean_fill_mse")?);
    Ok((mse < base, format!("25% mask, masked-point MSE {mse:.4} < per-dimension mean fill {base:.4}")))
}

fn classification(root: &Path) -> Check {
    let out = root.join("classify");
    cli(&["classify", "--out", out.to_str().unwrap(), "--epochs", "15", "--seed", "7"])?;
    let acc = metric(&out, "accuracy")?;
    Ok((acc >= 0.95, format!("200 two-class series, test accuracy {acc:.3} >= 0.95")))
}

fn anomaly(root: &Path) -> Check {
    let out = root.join("detect");
    cli(&["detect", "--out", out.to_str().unwrap(), "--epochs", "10", "--seed", "7"])?;
    let f1 = metric(&out, "f1")?;
    Ok((
        f1 >= 0.8,
        format!("spiked series, 0.99 quantile, point-adjusted F1 {f1:.3} >= 0.8"),
    ))
}

fn ablation(root: &Path) -> Check {
    let out = root.join("ablate");
    cli(&["ablate", "--out", out.to_str().unwrap(), "--epochs", "10"])?;
    if !out.join("ablation.md").is_file() {
        return Err("ablation.md was not written".into());
    }
    let full = metric(&out, "full_median_mse")?;
    let mut worst = f64::INFINITY;
    for v in ["no_dep", "no_dyn", "no_env"] {
        worst = worst.min(metric(&out, &format!("{v}_median_mse"))?);
    }
    Ok((
        full <= 1.10 * worst,
        format!("median full MSE {full:.4} <= 1.10 x smallest ablated median {worst:.4} over seeds 1-5"),
    ))
}

fn determinism(root: &Path) -> Check {
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(format!("determinism_{run}"));
        cli(&[
            "detect",
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "3",
            "--set",
            "blocks=1",
            "--set",
            "train_stride=4",
        ])?;
        texts.push(std::fs::read(out.join("metrics.json")).map_err(err)?);
    }
    Ok((
        texts[0] == texts[1],
        format!("two identical runs wrote metrics.json of {} and {} bytes, identical: {}", texts[0].len(), texts[1].len(), texts[0] == texts[1]),
    ))
}

fn main() {
    let started = Instant::now();
    let root = tempfile::tempdir().expect("temporary directory");
    let dir = root.path();
    let results = [
        report(1, "gradient fidelity", gradient_fidelity),
        report(2, "back-door equivalence", backdoor_equivalence),
        report(3, "structural invariants", structural_invariants),
        report(4, "patching", patching),
        report(5, "metrics", metrics),
        report(6, "synthetic forecasting", || forecasting(dir)),
        report(7, "synthetic imputation", || imputation(dir)),
        report(8, "synthetic classification", || classification(dir)),
        report(9, "synthetic anomaly detection", || anomaly(dir)),
        report(10, "ablation direction", || ablation(dir)),
        report(11, "determinism", || determinism(dir)),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "{passed}/{} criteria passed in {:.0} s",
        results.len(),
        Duration::as_secs_f64(&started.elapsed())
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
