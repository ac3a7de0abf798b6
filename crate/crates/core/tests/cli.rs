use std::path::{Path, PathBuf};

use fairkms::checkpoint;
use fairkms::cli::cli_main;
use fairkms::model::{Activation, DenseLayer, ModelParams};
use ndarray::{array, Array1, Array2};
use serde_json::Value;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["fairkms".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cli_main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let n = n.to_string();
    let seed = seed.to_string();
    assert_eq!(run(&["gen", "--preset", "celeba-skew", "--n", &n, "--seed", &seed, "--out", s(&out)]), 0);
    out
}

#[test]
fn mmd_of_a_file_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    std::fs::write(&x, "a,b\n0,1\n0.5,2\n-1,0.25\n3,3\n").unwrap();
    for flags in [vec![], vec!["--kernel", "linear"], vec!["--kernel", "poly", "--degree", "3"], vec!["--bandwidth", "0.7"]] {
        let out = dir.path().join("m.json");
        let mut args = vec!["mmd", "--x", s(&x), "--y", s(&x), "--out", s(&out)];
        args.extend(flags);
        assert_eq!(run(&args), 0);
        let r = json(&out);
        assert_eq!(r["plain"].as_f64().unwrap(), 0.0, "{r}");
        assert_eq!(r["shrunk"].as_f64().unwrap(), 0.0, "{r}");
        assert_eq!(r["rho_x"], r["rho_y"]);
    }
}

#[test]
fn mmd_matches_hand_value() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.csv");
    let y = dir.path().join("y.csv");
    std::fs::write(&x, "v\n0\n0\n").unwrap();
    std::fs::write(&y, "v\n1\n1\n").unwrap();
    let out = dir.path().join("m.json");
    assert_eq!(run(&["mmd", "--x", s(&x), "--y", s(&y), "--bandwidth", "1", "--out", s(&out)]), 0);
    let r = json(&out);
    let want = 2.0 - 2.0 * (-0.5f64).exp();
    assert!((r["shrunk"].as_f64().unwrap() - want).abs() < 1e-12);
    assert_eq!(r["rho_x"].as_f64().unwrap(), 0.0);
}

#[test]
fn eval_on_perfect_predictions_reports_full_fairness() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("p.csv");
    std::fs::write(
        &data,
        "feature_0,label,group\n-2,0,0\n-1,0,1\n1,1,0\n2,1,1\n-3,0,0\n3,1,1\n-0.5,0,1\n0.5,1,0\n",
    )
    .unwrap();
    let linear = |w: Array2<f64>| DenseLayer {
        bias: Array1::zeros(w.ncols()),
        weights: w,
        activation: Activation::Linear,
    };
    let params = ModelParams::from_layers(
        vec![linear(array![[1.0]])],
        linear(array![[-10.0, 10.0]]),
        linear(array![[0.0, 0.0]]),
    )
    .unwrap();
    let ck = dir.path().join("perfect.bin");
    checkpoint::save(&params, &ck).unwrap();
    let out = dir.path().join("eval");
    assert_eq!(run(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out-dir", s(&out)]), 0);
    let r = json(&out.join("report.json"));
    assert_eq!(r["fairness"].as_f64().unwrap(), 1.0);
    assert_eq!(r["parity_gap"].as_f64().unwrap(), 0.0);
    for g in r["per_group"].as_array().unwrap() {
        for k in ["accuracy", "precision", "recall", "f1", "auc"] {
            assert_eq!(g[k].as_f64().unwrap(), 1.0, "{k}: {g}");
        }
    }
    let roc = std::fs::read_to_string(out.join("roc_points.csv")).unwrap();
    assert!(roc.starts_with("class,fpr,tpr\n"));
}

#[test]
fn train_is_deterministic_and_gen_output_loads() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csv", 400, 7);
    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "epochs = 3\nseed = 5\n").unwrap();
    let mut outputs = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        assert_eq!(run(&["train", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&out)]), 0);
        outputs.push(out);
    }
    for f in ["checkpoint.bin", "runlog.jsonl", "summary.json"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let log = std::fs::read_to_string(outputs[0].join("runlog.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // the remaining subcommands accept the trained checkpoint
    let ck = outputs[0].join("checkpoint.bin");
    let probe = dir.path().join("probe.json");
    assert_eq!(run(&["probe", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&probe)]), 0);
    let p = json(&probe);
    assert_eq!(p["checksum_before"], p["checksum_after"]);
    let qq = dir.path().join("qq.csv");
    let rep = dir.path().join("qq.json");
    assert_eq!(
        run(&["diagnose", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&qq), "--report", s(&rep)]),
        0
    );
    assert_eq!(json(&rep)["samples"].as_u64().unwrap(), 400);
    let text = std::fs::read_to_string(&qq).unwrap();
    assert!(text.starts_with("chi2_q,md2_q\n"));
    assert_eq!(text.lines().count(), 401);
}

#[test]
fn ttest_reads_columns() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "acc,f1\n0.5,1\n0.6,2\n0.7,3\n").unwrap();
    std::fs::write(&b, "acc,f1\n0.5,1\n0.6,2\n0.7,3\n").unwrap();
    let out = dir.path().join("t.json");
    assert_eq!(run(&["ttest", "--a", s(&a), "--b", s(&b), "--column", "f1", "--out", s(&out)]), 0);
    let r = json(&out);
    assert_eq!(r["t"].as_f64().unwrap(), 0.0);
    assert_eq!(r["p"].as_f64().unwrap(), 1.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // usage
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["gen", "--out", "x.csv"]), 1);
    assert_eq!(run(&["mmd", "--x", "a", "--y", "b", "--bandwidth=-1"]), 1);
    assert_eq!(run(&["mmd", "--x", "a", "--y", "b", "--bandwidth", "0"]), 1);
    assert_eq!(run(&["mmd", "--x", "a", "--y", "b", "--kernel", "linear", "--bandwidth", "1"]), 1);
    assert_eq!(run(&["--help"]), 0);
    // config typo
    let data = gen(dir.path(), "d.csv", 100, 1);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = 1\ngama = 0.2\n").unwrap();
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--data", s(&data), "--config", s(&cfg), "--out-dir", s(&out)]), 1);
    // data errors
    let missing = dir.path().join("missing.csv");
    assert_eq!(run(&["train", "--data", s(&missing), "--out-dir", s(&out)]), 2);
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "feature_0,label,group\nabc,0,0\n").unwrap();
    assert_eq!(run(&["train", "--data", s(&bad), "--out-dir", s(&out)]), 2);
    let x = dir.path().join("x.csv");
    std::fs::write(&x, "a,b\n1,2\n").unwrap();
    let y = dir.path().join("y.csv");
    std::fs::write(&y, "a\n1\n").unwrap();
    assert_eq!(run(&["mmd", "--x", s(&x), "--y", s(&y)]), 2);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn baseline_encoder_leaks_more_than_debiased_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let (mut base, mut full) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let sd = seed.to_string();
        let data = gen(dir.path(), &format!("d{seed}.csv"), 4000, seed);
        for (baseline, acc) in [(true, &mut base), (false, &mut full)] {
            let out = dir.path().join(format!("run{seed}{baseline}"));
            let mut args = vec!["train", "--data", s(&data), "--seed", &sd, "--out-dir", s(&out)];
            if baseline {
                args.push("--baseline");
            }
            assert_eq!(run(&args), 0);
            let probe = out.join("probe.json");
            let ck = out.join("checkpoint.bin");
            assert_eq!(run(&["probe", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&probe)]), 0);
            acc.push(json(&probe)["accuracy"].as_f64().unwrap());
        }
    }
    assert!(median(base.clone()) > median(full.clone()), "baseline {base:?} full {full:?}");
}
