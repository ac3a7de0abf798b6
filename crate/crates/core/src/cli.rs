//! Command-line workbench.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! data and numerical errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde::Serialize;

use crate::analytics::{
    classification_report, leakage_probe, mahalanobis_qq, roc_auc, two_sample_t_test, ProbeConfig,
};
use crate::checkpoint;
use crate::dataset::{load_csv, load_numeric_csv, load_schema, save_csv, save_schema, schema_path_for, Dataset};
use crate::error::{Error, Result};
use crate::kernels::{gram, median_heuristic_bandwidth, KernelSpec};
use crate::shrinkage::{mmd2_kms, MmdMode};
use crate::synth::{gen_synthetic, SynthConfig};
use crate::training::{argmax, train, KernelChoice, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "fairkms", version, about = "KMS-MMD debiasing workbench")]
struct Cli {
    /// Overrides the seed of any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Kernel family for `train` and `mmd`.
    #[arg(long, global = true, value_enum)]
    kernel: Option<KernelFamily>,
    /// RBF bandwidth: a positive number or `median`.
    #[arg(long, global = true)]
    bandwidth: Option<Bandwidth>,
    /// Polynomial kernel degree.
    #[arg(long, global = true, default_value_t = 2)]
    degree: u32,
    /// Polynomial kernel offset.
    #[arg(long, global = true, default_value_t = 1.0)]
    offset: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KernelFamily {
    Rbf,
    Linear,
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bandwidth {
    Fixed(f64),
    Median,
}

impl std::str::FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "median" {
            return Ok(Bandwidth::Median);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(Bandwidth::Fixed(v)),
            _ => Err(format!("expected a positive number or 'median', got '{s}'")),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train an encoder with the debiasing losses (or a plain baseline).
    Train(TrainArgs),
    /// Per-group metrics and fairness for a checkpoint.
    Eval(EvalArgs),
    /// Leakage probe on a frozen encoder.
    Probe(ProbeArgs),
    /// Plain and shrunk MMD² between two sample files.
    Mmd(MmdArgs),
    /// Mahalanobis Q-Q diagnostic of the embeddings.
    Diagnose(DiagnoseArgs),
    /// Welch t-test between two metric samples.
    Ttest(TtestArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    CelebaSkew,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// TOML synthetic-data config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Sample count for `--preset`.
    #[arg(long, default_value_t = 4000)]
    n: usize,
    /// Group shift for `--preset`.
    #[arg(long, default_value_t = 2.0)]
    group_shift: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset CSV; a `<file>.schema.toml` sidecar is used when present.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Expression classifier only: gamma = beta = 0, no adversary.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// TOML probe config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MmdArgs {
    /// First sample file (numeric CSV with header).
    #[arg(long)]
    x: PathBuf,
    /// Second sample file.
    #[arg(long)]
    y: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Q-Q points CSV.
    #[arg(long)]
    out: PathBuf,
    /// Write the fit summary here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TtestArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Column to read from both files; defaults to the first.
    #[arg(long)]
    column: Option<String>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the workbench with `argv` (program name first) and returns the
/// process exit code.
pub fn cli_main(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.bandwidth.is_some() && cli.kernel.is_some_and(|f| f != KernelFamily::Rbf) {
        return Err(Error::Usage("--bandwidth only applies to the rbf kernel".into()));
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(&cli, a),
        Command::Mmd(a) => cmd_mmd(&cli, a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Ttest(a) => cmd_ttest(a),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let sidecar = schema_path_for(path);
    let schema = if sidecar.exists() {
        Some(load_schema(&sidecar)?)
    } else {
        None
    };
    load_csv(path, schema.as_ref())
}

/// Kernel from the global flags, or `None` when no kernel flag was given.
/// `median` bandwidth is resolved against `median_of` when present.
fn kernel_from_flags(cli: &Cli, median_of: Option<ndarray::ArrayView2<f64>>) -> Result<Option<KernelChoice>> {
    let family = match (cli.kernel, cli.bandwidth) {
        (None, None) => return Ok(None),
        (None, Some(_)) => KernelFamily::Rbf,
        (Some(f), _) => f,
    };
    let spec = match family {
        KernelFamily::Linear => KernelSpec::Linear,
        KernelFamily::Poly => KernelSpec::Polynomial {
            degree: cli.degree,
            offset: cli.offset,
        },
        KernelFamily::Rbf => match (cli.bandwidth.unwrap_or(Bandwidth::Median), median_of) {
            (Bandwidth::Fixed(bw), _) => KernelSpec::rbf(bw),
            (Bandwidth::Median, Some(x)) => KernelSpec::rbf(median_heuristic_bandwidth(x)?),
            (Bandwidth::Median, None) => return Ok(Some(KernelChoice::default())),
        },
    };
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(Some(KernelChoice::Fixed(spec)))
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let mut config = match (&a.config, a.preset) {
        (Some(p), _) => read_toml::<SynthConfig>(p)?,
        (None, Some(Preset::CelebaSkew)) => SynthConfig::celeba_skew(a.n, a.group_shift, 0),
        (None, None) => return Err(Error::Usage("gen needs --config or --preset".into())),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let data = gen_synthetic(&config)?;
    save_csv(&data, &a.out)?;
    save_schema(&data.schema, &schema_path_for(&a.out))?;
    eprintln!("wrote {} samples to {}", data.samples.len(), a.out.display());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data.data)?;
    let mut config = match &a.config {
        Some(p) => read_toml::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(k) = kernel_from_flags(cli, None)? {
        config.kernel = k;
    }
    if a.baseline {
        config = config.baseline();
    }
    let (params, log) = train(&data, &config)?;
    create_dir(&a.out_dir)?;
    checkpoint::save(&params, &a.out_dir.join("checkpoint.bin"))?;
    log.write(&a.out_dir.join("runlog.jsonl"), &a.out_dir.join("summary.json"))?;
    eprintln!(
        "trained {} epochs, train accuracy {:.4}",
        log.summary.epochs_completed, log.summary.train_accuracy
    );
    Ok(())
}

fn load_model(path: &Path, data: &Dataset) -> Result<crate::model::ModelParams> {
    let params = checkpoint::load(path)?;
    let s = &data.schema;
    if params.input_dim() != s.feature_dim || params.num_classes() != s.num_classes || params.num_groups() != s.num_groups {
        return Err(Error::Argument(format!(
            "checkpoint shape ({} features, {} classes, {} groups) does not match the dataset ({}, {}, {})",
            params.input_dim(),
            params.num_classes(),
            params.num_groups(),
            s.feature_dim,
            s.num_classes,
            s.num_groups
        )));
    }
    Ok(params)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data.data)?;
    let params = load_model(&a.checkpoint, &data)?;
    let fwd = params.forward(data.samples.features.view())?;
    let probs = fwd.expr_probs;
    let preds: Vec<usize> = probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    let report = classification_report(
        &preds,
        probs.view(),
        &data.samples.class_labels,
        &data.samples.group_labels,
        &data.schema.group_names,
    )?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    create_dir(&a.out_dir)?;
    write_json(&report, Some(&a.out_dir.join("report.json")))?;

    let roc_path = a.out_dir.join("roc_points.csv");
    let wrap = |e: csv::Error| Error::Argument(format!("{}: {e}", roc_path.display()));
    let mut w = csv::Writer::from_path(&roc_path).map_err(wrap)?;
    w.write_record(["class", "fpr", "tpr"]).map_err(wrap)?;
    let k = probs.ncols();
    let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    for c in classes {
        let truth: Vec<bool> = data.samples.class_labels.iter().map(|&y| y == c).collect();
        if truth.iter().all(|&t| t) || truth.iter().all(|&t| !t) {
            continue;
        }
        let roc = roc_auc(&probs.index_axis(Axis(1), c).to_vec(), &truth)?;
        for (fpr, tpr) in roc.points {
            w.write_record([c.to_string(), format!("{fpr:.17e}"), format!("{tpr:.17e}")])
                .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(&roc_path, e))?;
    eprintln!("fairness {:.4}, parity gap {:.4}", report.fairness, report.parity_gap);
    Ok(())
}

fn cmd_probe(cli: &Cli, a: &ProbeArgs) -> Result<()> {
    let data = load_dataset(&a.data.data)?;
    let params = load_model(&a.checkpoint, &data)?;
    let mut config = match &a.config {
        Some(p) => read_toml::<ProbeConfig>(p)?,
        None => ProbeConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let report = leakage_probe(&params, &data, &config)?;
    if report.checksum_before != report.checksum_after {
        return Err(Error::Numerical("encoder changed during probing".into()));
    }
    write_json(&report, a.out.as_deref())
}

#[derive(Debug, Serialize)]
struct MmdReport {
    kernel: KernelSpec,
    plain: f64,
    shrunk: f64,
    rho_x: f64,
    rho_y: f64,
}

fn cmd_mmd(cli: &Cli, a: &MmdArgs) -> Result<()> {
    let x = load_numeric_csv(&a.x, &[])?;
    let y = load_numeric_csv(&a.y, &[])?;
    if x.ncols() != y.ncols() {
        return Err(Error::Argument(format!("{} vs {} columns", x.ncols(), y.ncols())));
    }
    let pooled = ndarray::concatenate(Axis(0), &[x.view(), y.view()]).expect("same width");
    let kernel = match kernel_from_flags(cli, Some(pooled.view()))? {
        Some(KernelChoice::Fixed(k)) => k,
        _ => KernelSpec::rbf(median_heuristic_bandwidth(pooled.view())?),
    };
    let kxx = gram(&kernel, x.view(), x.view())?;
    let kyy = gram(&kernel, y.view(), y.view())?;
    let kxy = gram(&kernel, x.view(), y.view())?;
    let plain = mmd2_kms(&kxx, &kyy, &kxy, MmdMode::Plain)?;
    let shrunk = mmd2_kms(&kxx, &kyy, &kxy, MmdMode::Shrunk)?;
    write_json(
        &MmdReport {
            kernel,
            plain: plain.value,
            shrunk: shrunk.value,
            rho_x: shrunk.rho_p,
            rho_y: shrunk.rho_q,
        },
        a.out.as_deref(),
    )
}

#[derive(Debug, Serialize)]
struct QqReport {
    slope: f64,
    intercept: f64,
    r_squared: f64,
    dim: usize,
    samples: usize,
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let data = load_dataset(&a.data.data)?;
    let params = load_model(&a.checkpoint, &data)?;
    let emb = params.encode(data.samples.features.view())?;
    let qq = mahalanobis_qq(emb.view())?;
    qq.write_csv(&a.out)?;
    write_json(
        &QqReport {
            slope: qq.slope,
            intercept: qq.intercept,
            r_squared: qq.r_squared,
            dim: qq.dim,
            samples: qq.points.len(),
        },
        a.report.as_deref(),
    )
}

fn cmd_ttest(a: &TtestArgs) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<f64>> {
        let cols: Vec<String> = a.column.iter().cloned().collect();
        let m = load_numeric_csv(p, &cols)?;
        Ok(m.column(0).to_vec())
    };
    let r = two_sample_t_test(&read(&a.a)?, &read(&a.b)?)?;
    write_json(&r, a.out.as_deref())
}
