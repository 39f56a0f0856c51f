//! The `hcrl` command line: synthetic data, training runs, evaluation,
//! tree export and gradient checks. Every command returns a manifest of
//! the files it wrote; the binary prints it and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_dense_csv, load_idx, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, export_tree, TreeFormat};
use crate::model::{desk_fixture, gradcheck, GradcheckOptions, Model, ModelConfig, Variant};

/// Exit status for each error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::UnknownPath(_) => 1,
        Error::Numeric(_) | Error::Divergence { .. } => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Serde(_) => 3,
    }
}

#[derive(Debug, Parser)]
#[command(name = "hcrl", version, about = "Hierarchically clustered representation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic hierarchical dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history and tree.
    Train(TrainArgs),
    /// Evaluate a checkpoint: NLL, reconstruction error, F-score.
    Eval(EvalArgs),
    /// Write a checkpoint's tree as JSON or DOT.
    Export(ExportArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Children per inner node.
    #[arg(long, default_value_t = 3)]
    pub branching: usize,
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    #[arg(long, default_value_t = 8.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0.5)]
    pub variance_decay: f64,
    /// Comma-separated probability of each level generating an instance.
    #[arg(long, value_delimiter = ',')]
    pub level_weights: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; flags and `--set` override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dense CSV, or IDX images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// IDX labels matching IDX images.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value` override of a run or model field, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub nll_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotate nodes with their posterior mass over this dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TreeFormat::Json)]
    pub format: TreeFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_variant, default_value = "hcrl2")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Test hook: perturb the analytic gradient of one parameter group.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    toml::Value::String(s.to_ascii_lowercase())
        .try_into()
        .map_err(|_| format!("unknown variant `{s}` (hcrl1, hcrl2, vade, vae)"))
}

/// Dataset paths, output directory and model settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            labels: None,
            out: None,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: e.span().map_or("unknown".into(), |s| format!("byte {}", s.start)),
            message: e.message().to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// `data`, `labels` and `out` address the run; every other key a model
    /// field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || PathBuf::from(value.trim_matches('"'));
        match key {
            "data" => self.data = Some(path()),
            "labels" => self.labels = Some(path()),
            "out" => self.out = Some(path()),
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }
}

/// Written files, in order, as `(role, path)`.
pub type Manifest = Vec<(String, PathBuf)>;

pub fn run(cli: Cli) -> Result<Manifest> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Export(a) => cmd_export(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

/// Load a dense CSV (by extension) or IDX images with optional labels.
pub fn load_dataset(data: &Path, labels: Option<&Path>) -> Result<Dataset> {
    if !data.exists() {
        return Err(Error::invalid(format!("dataset {} does not exist", data.display())));
    }
    let is_csv = data.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    match (is_csv, labels) {
        (true, Some(_)) => Err(Error::invalid("CSV datasets carry their labels as columns; drop --labels")),
        (true, None) => load_dense_csv(data),
        (false, labels) => load_idx(data, labels),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, text: &str, role: &str, manifest: &mut Manifest) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    manifest.push((role.to_string(), path));
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Manifest> {
    let spec = SyntheticSpec {
        depth: a.depth,
        branching: vec![a.branching; a.depth.saturating_sub(1)],
        variance_decay: a.variance_decay,
        separation: a.separation,
        n: a.n,
        dim: a.dim,
        level_weights: a.level_weights.clone(),
        seed: a.seed,
    };
    if a.branching == 0 {
        return Err(Error::invalid("branching must be at least 1"));
    }
    let (data, truth) = gen_synthetic(&spec)?;
    create_dir(&a.out)?;
    let mut m = Manifest::new();
    let csv = a.out.join("data.csv");
    data.write_csv(&csv)?;
    m.push(("data".into(), csv.clone()));
    m.push(("header".into(), crate::data::sidecar_path(&csv)));
    let labels = a.out.join("labels.csv");
    data.write_labels_csv(&labels)?;
    m.push(("labels".into(), labels));
    write(a.out.join("truth.json"), &serde_json::to_string_pretty(&truth)?, "truth", &mut m)?;
    Ok(m)
}

/// Merge config file, flags and overrides, in that order of precedence
/// from lowest to highest.
pub fn resolve_run(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_toml(p)?,
        None => RunConfig::default(),
    };
    if a.data.is_some() {
        rc.data = a.data.clone();
    }
    if a.labels.is_some() {
        rc.labels = a.labels.clone();
    }
    if a.out.is_some() {
        rc.out = a.out.clone();
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
        rc.set(k.trim(), v.trim())?;
    }
    Ok(rc)
}

pub fn cmd_train(a: &TrainArgs) -> Result<Manifest> {
    let mut rc = resolve_run(a)?;
    let data_path = rc.data.clone().ok_or_else(|| Error::invalid("no dataset given (--data or data=)"))?;
    let out = rc.out.clone().ok_or_else(|| Error::invalid("no output directory given (--out or out=)"))?;
    let data = load_dataset(&data_path, rc.labels.as_deref())?;
    if rc.model.data_dim == 0 {
        rc.model.data_dim = data.dim();
    } else if rc.model.data_dim != data.dim() {
        return Err(Error::DimensionMismatch {
            context: "config data_dim vs dataset columns",
            expected: rc.model.data_dim,
            actual: data.dim(),
        });
    }
    rc.model = rc.model.resolved()?;
    create_dir(&out)?;
    let mut m = Manifest::new();
    write(out.join("config.toml"), &rc.to_toml()?, "config", &mut m)?;

    let mut model = Model::new(&rc.model)?;
    let trained = if rc.model.variant.is_hierarchical() {
        model.train(data.x.view())
    } else {
        model.train_vade(data.x.view())
    };
    let history = match trained {
        Ok(h) => h,
        Err(err) => {
            let dump = out.join("divergence.json");
            let doc = serde_json::json!({
                "error": err.to_string(),
                "checkpoint": model.to_checkpoint(),
            });
            fs::write(&dump, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&dump, e))?;
            eprintln!("diagnostic dump written to {}", dump.display());
            return Err(err);
        }
    };
    let ckpt = out.join("checkpoint.json");
    model.save(&ckpt)?;
    m.push(("checkpoint".into(), ckpt));
    write(out.join("history.csv"), &history.to_csv(), "history", &mut m)?;
    if model.tree().is_some() {
        let x = Some(data.x.view());
        write(out.join("tree.json"), &export_tree(&model, x, TreeFormat::Json)?, "tree", &mut m)?;
        write(out.join("tree.dot"), &export_tree(&model, x, TreeFormat::Dot)?, "tree_dot", &mut m)?;
    }
    Ok(m)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Manifest> {
    if a.nll_samples == 0 {
        return Err(Error::invalid("nll_samples must be at least 1"));
    }
    let model = Model::load(&a.checkpoint)?;
    let data = load_dataset(&a.data, a.labels.as_deref())?;
    let report = evaluate(&model, &data, a.nll_samples, a.seed)?;
    create_dir(&a.out)?;
    let mut m = Manifest::new();
    write(a.out.join("metrics.json"), &serde_json::to_string_pretty(&report)?, "metrics", &mut m)?;
    write(a.out.join("metrics.csv"), &report.csv(), "metrics_csv", &mut m)?;
    Ok(m)
}

pub fn cmd_export(a: &ExportArgs) -> Result<Manifest> {
    let model = Model::load(&a.checkpoint)?;
    let data = a.data.as_deref().map(|p| load_dataset(p, a.labels.as_deref())).transpose()?;
    let text = export_tree(&model, data.as_ref().map(|d| d.x.view()), a.format)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut m = Manifest::new();
    write(a.out.clone(), &text, "tree", &mut m)?;
    Ok(m)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Manifest> {
    let (model, x) = desk_fixture(a.variant, a.seed)?;
    let opts = GradcheckOptions {
        eps: a.eps,
        tolerance: a.tolerance,
        corrupt: a.corrupt.clone(),
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&model, &x, a.seed, &opts)?;
    print!("{}", report.to_text());
    let mut m = Manifest::new();
    if let Some(p) = &a.out {
        write(p.clone(), &report.to_text(), "report", &mut m)?;
    }
    if !report.passed() {
        return Err(Error::numeric(format!(
            "gradient check failed: worst relative error {:.3e} above {:.1e}",
            report.worst(),
            a.tolerance
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_route_to_run_or_model() {
        let mut rc = RunConfig::default();
        rc.set("data", "\"x.csv\"").unwrap();
        rc.set("epochs", "3").unwrap();
        assert_eq!(rc.data, Some(PathBuf::from("x.csv")));
        assert_eq!(rc.model.epochs, 3);
        assert!(rc.set("colour", "blue").is_err());
        let back: RunConfig = toml::from_str(&rc.to_toml().unwrap()).unwrap();
        assert_eq!(back, rc);
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("data = \"a\"\nbogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nbogus = 1\n").is_err());
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::invalid("x")), 1);
        assert_eq!(exit_code(&Error::Divergence { epoch: 1, message: "nan".into() }), 2);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 3);
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!(parse_variant("VaDE").unwrap(), Variant::Vade);
        assert!(parse_variant("gmm").is_err());
    }
}
