//! `nfcsi` command line: gen-data, train, eval, audit and plot.
//!
//! Every subcommand resolves an [`ExperimentConfig`] (defaults < `--config`
//! file < flags < trailing `key=value` overrides), echoes it to
//! `<out>/<subcommand>.config.toml` and writes into the run layout:
//!
//! ```text
//! <out>/data/dataset.nfcs            bundle (+ dataset.manifest.json)
//! <out>/checkpoints/<arch>-cr<cr>/   best.ck, final.ck, history.csv
//! <out>/reports/<arch>-cr<cr>.json   evaluation reports, audit.json, comparison.txt
//! <out>/plots/<arch>-cr<cr>-<metric>.csv
//! ```

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::config::{ConfigLayers, ExperimentConfig};
use crate::dataset::{self, DatasetBundle};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalInput, EvalReport, PlotSeries, SeriesPoint};
use crate::model::{closed_form_fc, count_parameters, reference_non_fc, Architecture, Autoencoder, Checkpoint, ModelConfig};
use crate::training::{checkpoint_history, TrainHistory, Trainer};

#[derive(Debug, Parser)]
#[command(name = "nfcsi", version, about = "Near-field XL-MIMO CSI feedback pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file with [data], [model], [train] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for dataset generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run root (default: runs/run-<unix time>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Compression ratio; `audit` accepts a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub cr: Vec<usize>,
    /// extendnlnet or csinet.
    #[arg(long, global = true)]
    pub architecture: Option<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, normalize and split a synthetic near-field dataset.
    GenData {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Dotted `section.key=value` overrides.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train an autoencoder on a generated bundle.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset bundle (default: <out>/data/dataset.nfcs).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from <checkpoint dir>/final.ck up to the configured epoch count.
        #[arg(long)]
        resume: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint, or merge reports with --compare.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Reports to merge into a comparison table instead of evaluating.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print trainable-parameter counts and check the CR difference law.
    Audit {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Export per-epoch curves from a training history as CSV.
    Plot {
        /// History CSV (default: the checkpoint directory's history.csv).
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Audit { .. } => "audit",
            Command::Plot { .. } => "plot",
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData { overrides, .. }
            | Command::Train { overrides, .. }
            | Command::Eval { overrides, .. }
            | Command::Audit { overrides }
            | Command::Plot { overrides, .. } => overrides,
        }
    }
}

/// Resolved output directories of one run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: PathBuf) -> Self {
        RunLayout { root }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data").join("dataset.nfcs")
    }

    pub fn tag(model: &ModelConfig) -> String {
        format!("{}-cr{}", model.architecture.name(), model.compression_ratio)
    }

    pub fn checkpoint_dir(&self, model: &ModelConfig) -> PathBuf {
        self.root.join("checkpoints").join(Self::tag(model))
    }

    pub fn report(&self, model: &ModelConfig) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", Self::tag(model)))
    }

    pub fn plot(&self, model: &ModelConfig, metric: &str) -> PathBuf {
        self.root.join("plots").join(format!("{}-{metric}.csv", Self::tag(model)))
    }
}

fn default_root() -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    PathBuf::from("runs").join(format!("run-{secs}"))
}

/// Builds the effective configuration for a parsed command line.
pub fn resolve_config(common: &CommonArgs, command: &Command) -> Result<ExperimentConfig> {
    let mut layers = match &common.config {
        Some(path) => ConfigLayers::from_file(path)?,
        None => ConfigLayers::default(),
    };
    if let Some(seed) = common.seed {
        layers.set(&["data", "seed"], Value::Integer(seed as i64))?;
        layers.set(&["train", "seed"], Value::Integer(seed as i64))?;
    }
    if let Some(arch) = &common.architecture {
        layers.set(&["model", "architecture"], Value::String(Architecture::parse(arch)?.name().into()))?;
    }
    match (command, common.cr.as_slice()) {
        (Command::Audit { .. }, _) | (_, []) => {}
        (_, [cr]) => layers.set(&["model", "compression_ratio"], Value::Integer(*cr as i64))?,
        (_, many) => return Err(Error::Config(format!("--cr takes one value for {}, got {many:?}", command.name()))),
    }
    let count = |n: &Option<usize>| n.map(|v| Value::Integer(v as i64));
    match command {
        Command::GenData { n_train, n_val, n_test, .. } => {
            for (key, v) in [("n_train", count(n_train)), ("n_val", count(n_val)), ("n_test", count(n_test))] {
                if let Some(v) = v {
                    layers.set(&["data", key], v)?;
                }
            }
        }
        Command::Train { epochs: Some(e), .. } => layers.set(&["train", "epochs"], Value::Integer(*e as i64))?,
        _ => {}
    }
    for o in command.overrides() {
        layers.apply_override(o)?;
    }
    layers.resolve()
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists { path: path.to_path_buf() });
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Parses `args` and runs the subcommand, writing human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(&cli, out)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let config = resolve_config(&cli.common, &cli.command)?;
    let layout = RunLayout::new(cli.common.out.clone().unwrap_or_else(default_root));
    std::fs::create_dir_all(&layout.root)?;
    write_file(
        &layout.root.join(format!("{}.config.toml", cli.command.name())),
        config.to_toml()?.as_bytes(),
    )?;
    let force = cli.common.force;
    match &cli.command {
        Command::GenData { .. } => cmd_gen_data(&config, &layout, force, out),
        Command::Train { data, resume, .. } => cmd_train(&config, &layout, data.as_deref(), *resume, force, out),
        Command::Eval { checkpoint, data, compare, .. } => {
            if compare.is_empty() {
                cmd_eval(&config, &layout, checkpoint.as_deref(), data.as_deref(), force, out)
            } else {
                cmd_compare(compare, &layout, out)
            }
        }
        Command::Audit { .. } => cmd_audit(&config, &cli.common, &layout, out),
        Command::Plot { history, .. } => cmd_plot(&config, &layout, history.as_deref(), force, out),
    }
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

pub fn cmd_gen_data(config: &ExperimentConfig, layout: &RunLayout, force: bool, out: &mut dyn Write) -> Result<()> {
    let path = layout.dataset();
    guard(&path, force)?;
    let bundle = dataset::build_dataset(&config.data)?;
    dataset::save_bundle(&bundle, &path)?;
    let m = &bundle.manifest;
    writeln!(out, "dataset: {}", path.display()).map_err(io)?;
    writeln!(out, "  seed {}  train/val/test {}/{}/{}  layout {}", m.seed, m.n_train, m.n_val, m.n_test, m.layout)
        .map_err(io)?;
    writeln!(
        out,
        "  normalization min {:.6e} max {:.6e} (zero level {:.6})",
        m.normalization.min,
        m.normalization.max,
        m.normalization.zero_level()
    )
    .map_err(io)?;
    let inside = m.r_range.hi < m.rayleigh_distance;
    writeln!(
        out,
        "  Rayleigh distance {:.3} m; range [{}, {}] m {} the near field",
        m.rayleigh_distance,
        m.r_range.lo,
        m.r_range.hi,
        if inside { "lies inside" } else { "is NOT entirely inside" }
    )
    .map_err(io)?;
    Ok(())
}

fn load_dataset(layout: &RunLayout, data: Option<&Path>) -> Result<DatasetBundle> {
    let path = data.map_or_else(|| layout.dataset(), Path::to_path_buf);
    if !path.exists() {
        return Err(Error::Config(format!(
            "dataset {} not found (run gen-data with the same --out, or pass --data)",
            path.display()
        )));
    }
    dataset::load_bundle(&path)
}

pub fn cmd_train(
    config: &ExperimentConfig,
    layout: &RunLayout,
    data: Option<&Path>,
    resume: bool,
    force: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let bundle = load_dataset(layout, data)?;
    check_bundle(&config.model, &bundle)?;
    let dir = layout.checkpoint_dir(&config.model);
    let mut trainer = if resume {
        let ck = Checkpoint::load(&dir.join("final.ck"))?;
        if ck.config != config.model {
            return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
        }
        Trainer::resume(&ck, config.train.clone())?
    } else {
        guard(&dir.join("final.ck"), force)?;
        let model = Autoencoder::<f32>::new(config.model.clone(), config.train.seed)?;
        Trainer::new(model, config.train.clone())?
    };
    writeln!(
        out,
        "training {} for {} epochs ({} done), {} trainable parameters",
        RunLayout::tag(&config.model),
        config.train.epochs,
        trainer.epochs_done(),
        count_parameters(&trainer.model).total
    )
    .map_err(io)?;
    trainer.fit(&bundle, |t, r| {
        writeln!(
            out,
            "epoch {:>3}  train_loss {:.6e}  val_nmse {:>8.3} dB  val_rho {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_nmse_db, r.val_rho, r.seconds
        )
        .map_err(io)?;
        t.save_artifacts(&dir)
    })?;
    trainer.save_artifacts(&dir)?;
    if let (Some(first), Some(last)) = (trainer.history.initial_train_loss, trainer.history.records.last()) {
        writeln!(out, "initial loss {:.6e} -> final epoch loss {:.6e}", first, last.train_loss).map_err(io)?;
    }
    if let Some(best) = trainer.history.best() {
        writeln!(out, "best epoch {} (val nmse {:.3} dB) -> {}", best.epoch, best.val_nmse_db, dir.join("best.ck").display())
            .map_err(io)?;
    }
    Ok(())
}

fn check_bundle(model: &ModelConfig, bundle: &DatasetBundle) -> Result<()> {
    let (p, h, w) = bundle.image_shape();
    if (p, h, w) != (2, model.height, model.width) {
        return Err(Error::Config(format!(
            "model expects 2×{}×{} images, dataset holds {p}×{h}×{w}",
            model.height, model.width
        )));
    }
    Ok(())
}

/// Plot series from a training history: one per recorded metric.
pub fn history_series(history: &TrainHistory) -> Vec<PlotSeries> {
    let series = |metric: &str, pick: fn(&crate::training::EpochRecord) -> f64| PlotSeries {
        metric: metric.to_string(),
        points: history.records.iter().map(|r| SeriesPoint { epoch: r.epoch, value: pick(r) }).collect(),
    };
    vec![
        series("train_loss", |r| r.train_loss),
        series("val_nmse_db", |r| r.val_nmse_db),
        series("val_rho", |r| r.val_rho),
    ]
}

pub fn series_csv(series: &PlotSeries) -> String {
    let mut s = format!("epoch,{}\n", series.metric);
    for p in &series.points {
        s.push_str(&format!("{},{}\n", p.epoch, p.value));
    }
    s
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    layout: &RunLayout,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    force: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let ck_path = checkpoint.map_or_else(|| layout.checkpoint_dir(&config.model).join("best.ck"), Path::to_path_buf);
    let ck_bytes = std::fs::read(&ck_path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", ck_path.display())))?;
    let ck = Checkpoint::decode(&ck_bytes, &ck_path)?;
    let bundle = load_dataset(layout, data)?;
    check_bundle(&ck.config, &bundle)?;
    let report_path = layout.report(&ck.config);
    guard(&report_path, force)?;
    let model: Autoencoder<f32> = ck.to_model()?;
    let images = if config.eval.split == "val" { &bundle.val } else { &bundle.test };
    let mut report = evaluation::evaluate(
        &model,
        EvalInput {
            bundle: &bundle,
            images,
            split: &config.eval.split,
            checkpoint: Some(format!("{} crc32={:08x}", ck_path.display(), body_crc(&ck_bytes))),
        },
    )?;
    if let Some(history) = checkpoint_history(&ck) {
        report.series = history_series(&history);
        for s in &report.series {
            write_file(&layout.plot(&ck.config, &s.metric), series_csv(s).as_bytes())?;
        }
    }
    evaluation::write_report(&report, &report_path)?;
    writeln!(
        out,
        "{} on {} ({} samples): NMSE {:.3} dB  rho {:.4} | centered NMSE {:.3} dB  rho {:.4} | zero-level predictor {:.3} dB",
        RunLayout::tag(&ck.config),
        report.split,
        report.samples,
        report.nmse_db,
        report.rho,
        report.centered.nmse_db,
        report.centered.rho,
        report.reference_constant_nmse_db
    )
    .map_err(io)?;
    writeln!(out, "report: {}", report_path.display()).map_err(io)?;
    Ok(())
}

/// CRC32 of a checkpoint without its trailing CRC; the whole-file CRC is a constant residue.
fn body_crc(bytes: &[u8]) -> u32 {
    crc32fast::hash(&bytes[..bytes.len().saturating_sub(4)])
}

pub fn cmd_compare(paths: &[PathBuf], layout: &RunLayout, out: &mut dyn Write) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| EvalReport::from_json(&std::fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    let table = evaluation::comparison_table(&reports);
    write_file(&layout.root.join("reports").join("comparison.txt"), table.as_bytes())?;
    out.write_all(table.as_bytes()).map_err(io)?;
    Ok(())
}

pub fn cmd_audit(config: &ExperimentConfig, common: &CommonArgs, layout: &RunLayout, out: &mut dyn Write) -> Result<()> {
    let crs = if common.cr.is_empty() { vec![16, 32, 64] } else { common.cr.clone() };
    let archs = match &common.architecture {
        Some(a) => vec![Architecture::parse(a)?],
        None => vec![Architecture::ExtendNlNet, Architecture::CsiNet],
    };
    let mut rows = Vec::new();
    writeln!(out, "{:<14}{:>6}{:>12}{:>12}{:>12}", "architecture", "cr", "total", "fc", "non-fc").map_err(io)?;
    for &arch in &archs {
        let mut audits = Vec::new();
        for &cr in &crs {
            let mc = ModelConfig { height: config.model.height, width: config.model.width, ..ModelConfig::new(arch, cr) };
            let model = Autoencoder::<f32>::new(mc.clone(), 0)?;
            let audit = count_parameters(&model);
            if audit.fc_params != closed_form_fc(&mc) {
                return Err(Error::Config(format!(
                    "fc count {} disagrees with closed form {}",
                    audit.fc_params,
                    closed_form_fc(&mc)
                )));
            }
            writeln!(out, "{:<14}{:>6}{:>12}{:>12}{:>12}", arch.name(), cr, audit.total, audit.fc_params, audit.non_fc_params)
                .map_err(io)?;
            let (l, k) = (mc.flattened_length(), mc.codeword_length());
            writeln!(out, "  closed-form fc 2LK+K+L = 2·{l}·{k}+{k}+{l} = {}", closed_form_fc(&mc)).map_err(io)?;
            if let Some(target) = reference_non_fc(&mc) {
                let gap = 100.0 * (audit.non_fc_params as f64 - target as f64) / target as f64;
                writeln!(out, "  reference non-fc {target} (total {}), achieved {} ({gap:+.1}%)", target + audit.fc_params, audit.non_fc_params)
                    .map_err(io)?;
            }
            audits.push((mc, audit));
        }
        for pair in audits.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let expected = closed_form_fc(&a.0) as i64 - closed_form_fc(&b.0) as i64;
            let actual = a.1.total as i64 - b.1.total as i64;
            if actual != expected {
                return Err(Error::Config(format!(
                    "difference law broken for {}: total(cr{}) - total(cr{}) = {actual}, expected {expected}",
                    arch.name(),
                    a.0.compression_ratio,
                    b.0.compression_ratio
                )));
            }
            writeln!(
                out,
                "  {} total(cr{}) - total(cr{}) = {actual} (closed form {expected})",
                arch.name(),
                a.0.compression_ratio,
                b.0.compression_ratio
            )
            .map_err(io)?;
        }
        if let Some((_, audit)) = audits.first() {
            writeln!(out, "per-layer breakdown ({}):\n{}", arch.name(), audit.table()).map_err(io)?;
        }
        rows.extend(audits.into_iter().map(|(mc, audit)| {
            serde_json::json!({"architecture": mc.architecture.name(), "cr": mc.compression_ratio, "audit": audit})
        }));
    }
    write_file(
        &layout.root.join("reports").join("audit.json"),
        serde_json::to_string_pretty(&rows)?.as_bytes(),
    )?;
    Ok(())
}

pub fn cmd_plot(
    config: &ExperimentConfig,
    layout: &RunLayout,
    history: Option<&Path>,
    force: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let path = history.map_or_else(|| layout.checkpoint_dir(&config.model).join("history.csv"), Path::to_path_buf);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read history {}: {e}", path.display())))?;
    let history = TrainHistory::from_csv(&text)?;
    for s in history_series(&history) {
        let target = layout.plot(&config.model, &s.metric);
        guard(&target, force)?;
        write_file(&target, series_csv(&s).as_bytes())?;
        writeln!(out, "{} ({} rows)", target.display(), s.points.len()).map_err(io)?;
    }
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_and_overrides_layer_in_order() {
        let cli = parse(&["nfcsi", "train", "--seed", "7", "--cr", "32", "--epochs", "3", "train.epochs=4"]);
        let c = resolve_config(&cli.common, &cli.command).unwrap();
        assert_eq!((c.data.seed, c.train.seed), (7, 7));
        assert_eq!(c.model.compression_ratio, 32);
        assert_eq!(c.train.epochs, 4);
    }

    #[test]
    fn architecture_flag_selects_baseline() {
        let cli = parse(&["nfcsi", "eval", "--architecture", "csinet"]);
        let c = resolve_config(&cli.common, &cli.command).unwrap();
        assert_eq!(c.model, ModelConfig::csinet(16));
    }

    #[test]
    fn multiple_crs_only_for_audit() {
        let cli = parse(&["nfcsi", "train", "--cr", "16,32"]);
        assert!(resolve_config(&cli.common, &cli.command).is_err());
        let cli = parse(&["nfcsi", "audit", "--cr", "16,32"]);
        assert!(resolve_config(&cli.common, &cli.command).is_ok());
    }

    #[test]
    fn unknown_subcommand_and_keys_fail() {
        assert!(Cli::try_parse_from(["nfcsi", "fly"]).is_err());
        let cli = parse(&["nfcsi", "gen-data", "data.bogus=1"]);
        assert!(resolve_config(&cli.common, &cli.command).is_err());
    }
}
