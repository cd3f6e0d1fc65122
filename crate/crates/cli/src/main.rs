//! `secci`: simulate surveys, parse captures, train, locate and sweep.
//!
//! Every subcommand reads one experiment config (`--config`, defaults
//! otherwise) and writes into `--output-dir` unless given explicit paths.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use secci::bfee::{self, BfeeError};
use secci::csi::{extract_features, CsiError};
use secci::harness::{
    error_cdf, locate_dataset, mean_error, run_experiment_with_progress, run_sweep, simulate_survey, DataSource,
    ExperimentConfig, HarnessError, PositionRecord, SweepCell,
};
use secci::imaging::{read_features_csv, write_features_csv, Dataset, ImagingError, NormalizationSpec, Provenance, Site};
use secci::net::{train_with_progress, EpochStats, ModelCheckpoint, NetError};

const DEFAULT_OUTPUT_DIR: &str = "out";

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Bfee { path: PathBuf, source: BfeeError },
    #[error("{path}: {source}")]
    Csi { path: PathBuf, source: CsiError },
}

#[derive(Debug, Parser)]
#[command(name = "secci", version, about = "CSI fingerprint localization: simulate, train, locate, evaluate")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment config (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs; overrides the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the configured layout into dataset files.
    Simulate {
        /// Also write the per-packet features as CSV.
        #[arg(long)]
        features: bool,
    },
    /// Turn Intel 5300 `.dat` captures into a dataset.
    ParseBfee {
        /// `ID:X:Y=PATH`, one per measurement site.
        #[arg(long = "site", required = true)]
        sites: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the extracted features as CSV here.
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Build images from a features CSV.
    BuildDataset {
        #[arg(long)]
        features: PathBuf,
        /// Reuse this dataset's normalization instead of fitting one.
        #[arg(long)]
        normalization_from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Validation dataset; otherwise part of the training set is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the position of every site in a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score estimates against ground truth.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        /// JSON list of `{site_id, coords}`; defaults to the truths inside the estimates.
        #[arg(long)]
        truths: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config's parameter sweep.
    Sweep,
    /// Run one full experiment: simulate or load, train, locate, report.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    if cli.global.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("configs serialize"));
        return Ok(());
    }
    if let Some(n) = cli.global.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given (see --help)".into()));
    };
    let out_dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let out = |explicit: Option<PathBuf>, name: &str| explicit.unwrap_or_else(|| out_dir.join(name));
    match command {
        Command::Simulate { features } => simulate(&cfg, &out_dir, features),
        Command::ParseBfee {
            sites,
            out: o,
            features_out,
        } => parse_bfee(&cfg, &sites, &out(o, "capture.secci"), features_out.as_deref()),
        Command::BuildDataset {
            features,
            normalization_from,
            out: o,
        } => build_dataset(&cfg, &features, normalization_from.as_deref(), &out(o, "dataset.secci")),
        Command::Train { dataset, val, out: o } => train(&cfg, &dataset, val.as_deref(), &out(o, "model.ckpt")),
        Command::Predict { model, dataset, out: o } => predict(&cfg, &model, &dataset, &out(o, "estimates.json")),
        Command::Evaluate {
            estimates,
            truths,
            out: o,
        } => evaluate(&estimates, truths.as_deref(), &out(o, "evaluation.json")),
        Command::Sweep => sweep(&cfg, &out_dir),
        Command::Run => run(&cfg, &out_dir),
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|source| CliError::Json {
                path: path.clone(),
                source,
            })?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.output_dir {
        cfg.output_dir = Some(d.clone());
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        }),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    create_parent(path)?;
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn save_dataset(path: &Path, d: &Dataset) -> Result<(), CliError> {
    write_file(path, &d.to_bytes())
}

fn simulate(cfg: &ExperimentConfig, out_dir: &Path, with_features: bool) -> Result<(), CliError> {
    let DataSource::Simulate { layout } = &cfg.data else {
        return Err(CliError::Usage("simulate needs a `simulate` data source".into()));
    };
    let survey = simulate_survey(layout, &cfg.sim, cfg.packets_per_image, cfg.seed)?;
    save_dataset(&out_dir.join("survey.secci"), &survey.grid)?;
    if let Some(off) = &survey.offgrid {
        save_dataset(&out_dir.join("offgrid.secci"), off)?;
    }
    if with_features {
        let mut sites = survey.grid.sites.clone();
        let mut features = survey.grid_features;
        if let Some(off) = &survey.offgrid {
            sites.extend_from_slice(&off.sites);
            features.extend(survey.offgrid_features);
        }
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &sites, &features)?;
        write_file(&out_dir.join("features.csv"), &buf)?;
    }
    Ok(())
}

/// Parses `ID:X:Y=PATH`.
fn parse_site_arg(arg: &str) -> Result<(Site, PathBuf), CliError> {
    let bad = || CliError::Usage(format!("--site {arg:?}: expected ID:X:Y=PATH"));
    let (spec, path) = arg.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = spec.split(':').collect();
    let [id, x, y] = parts[..] else { return Err(bad()) };
    let site = Site {
        site_id: id.trim().parse().map_err(|_| bad())?,
        coords: [x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?],
    };
    Ok((site, PathBuf::from(path)))
}

fn parse_bfee(cfg: &ExperimentConfig, site_args: &[String], out: &Path, features_out: Option<&Path>) -> Result<(), CliError> {
    let mut sites = Vec::new();
    let mut features = Vec::new();
    for arg in site_args {
        let (site, path) = parse_site_arg(arg)?;
        let bytes = fs::read(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let capture = bfee::parse_stream(&bytes).map_err(|source| CliError::Bfee {
            path: path.clone(),
            source,
        })?;
        if capture.skipped_frames > 0 {
            eprintln!("{}: skipped {} non-CSI frames", path.display(), capture.skipped_frames);
        }
        if let Some(t) = capture.truncated {
            eprintln!("{}: stream truncated at byte {}, kept {} entries", path.display(), t.offset, t.parsed_entries);
        }
        let mut site_features = Vec::with_capacity(capture.entries.len());
        for e in &capture.entries {
            let pkt = bfee::to_csi_packet(e).map_err(|source| CliError::Bfee {
                path: path.clone(),
                source,
            })?;
            site_features.push(extract_features(&pkt, &cfg.sim.geometry).map_err(|source| CliError::Csi {
                path: path.clone(),
                source,
            })?);
        }
        eprintln!("{}: {} packets for site {}", path.display(), site_features.len(), site.site_id);
        sites.push(site);
        features.push(site_features);
    }
    if let Some(p) = features_out {
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &sites, &features)?;
        write_file(p, &buf)?;
    }
    let norm = NormalizationSpec::from_features(features.iter().flatten());
    let provenance = Provenance {
        source: "capture".into(),
        seed: None,
    };
    let d = Dataset::from_site_features(sites, &features, cfg.packets_per_image, norm, cfg.sim.geometry, provenance)?;
    save_dataset(out, &d)
}

fn build_dataset(cfg: &ExperimentConfig, features: &Path, normalization_from: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let file = File::open(features).map_err(|source| CliError::Io {
        path: features.to_path_buf(),
        source,
    })?;
    let (sites, features) = read_features_csv(file)?;
    let norm = match normalization_from {
        Some(p) => Dataset::load(p)?.normalization,
        None => NormalizationSpec::from_features(features.iter().flatten()),
    };
    let provenance = Provenance {
        source: "features".into(),
        seed: None,
    };
    let d = Dataset::from_site_features(sites, &features, cfg.packets_per_image, norm, cfg.sim.geometry, provenance)?;
    save_dataset(out, &d)
}

fn print_epoch(e: &EpochStats) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  train acc {:.3}  val acc {:.3}",
        e.epoch, e.loss, e.train_accuracy, e.val_accuracy
    );
}

fn train(cfg: &ExperimentConfig, dataset: &Path, val: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut d = Dataset::load(dataset)?;
    if let Some(n) = cfg.split.images_per_site {
        d = d.limit_per_site(n);
    }
    let v = val.map(Dataset::load).transpose()?;
    let model = train_with_progress(&d, v.as_ref(), &cfg.net, &cfg.train, print_epoch)?;
    eprintln!(
        "kept epoch {} (val acc {:.3})",
        model.metadata.epoch, model.metadata.val_accuracy
    );
    write_file(out, &model.to_bytes()?)
}

fn predict(cfg: &ExperimentConfig, model: &Path, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let m = ModelCheckpoint::load(model)?;
    let d = Dataset::load(dataset)?;
    let records = locate_dataset(&m, &d, &cfg.greedy)?;
    for r in &records {
        println!(
            "site {:>3}  truth ({:.2}, {:.2})  estimate ({:.2}, {:.2})  error {:.3} m",
            r.site_id, r.truth[0], r.truth[1], r.estimate[0], r.estimate[1], r.error
        );
    }
    write_json(out, &records)
}

#[derive(Debug, Serialize)]
struct Evaluation {
    mean_error: f64,
    std_error: f64,
    cdf: Vec<(f64, f64)>,
    per_position_errors: Vec<f64>,
}

fn evaluate(estimates: &Path, truths: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let records: Vec<PositionRecord> = read_json(estimates)?;
    let truth_of: Vec<[f64; 2]> = match truths {
        Some(p) => {
            let sites: Vec<Site> = read_json(p)?;
            records
                .iter()
                .map(|r| {
                    sites
                        .iter()
                        .find(|s| s.site_id == r.site_id)
                        .map(|s| s.coords)
                        .ok_or_else(|| CliError::Usage(format!("no truth for site {}", r.site_id)))
                })
                .collect::<Result<_, _>>()?
        }
        None => records.iter().map(|r| r.truth).collect(),
    };
    let est: Vec<[f64; 2]> = records.iter().map(|r| r.estimate).collect();
    let errors: Vec<f64> = est
        .iter()
        .zip(&truth_of)
        .map(|(e, t)| (e[0] - t[0]).hypot(e[1] - t[1]))
        .collect();
    let mean = mean_error(&est, &truth_of)?;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errors.len() as f64).sqrt();
    println!("mean error {mean:.4} m  std {std:.4} m over {} positions", errors.len());
    write_json(
        out,
        &Evaluation {
            mean_error: mean,
            std_error: std,
            cdf: error_cdf(&errors),
            per_position_errors: errors,
        },
    )
}

fn summarize(report: &secci::harness::MetricsReport) {
    for (name, g) in &report.groups {
        eprintln!(
            "{name:>14}: mean error {:.3} m  std {:.3} m  random baseline {:.3} m  ({} positions)",
            g.mean_error,
            g.std_error,
            g.random_baseline_error,
            g.positions.len()
        );
    }
    eprintln!(
        "{:>14}: mean error {:.3} m  std {:.3} m",
        "overall", report.mean_error, report.std_error
    );
    eprintln!(
        "mean execution time {:.4} s per position ({} timed)",
        report.timing.mean_execution_time, report.timing.timed_positions
    );
}

fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    let (report, model) = run_experiment_with_progress(cfg, print_epoch)?;
    summarize(&report);
    write_file(&out_dir.join("report.json"), format!("{}\n", report.to_json()).as_bytes())?;
    write_json(&out_dir.join("timing.json"), &report.timing)?;
    write_file(&out_dir.join("model.ckpt"), &model.to_bytes()?)
}

fn sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    if cfg.sweep.is_none() {
        return Err(CliError::Usage("config has no `sweep` section".into()));
    }
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|source| CliError::Io {
        path: cells_dir.clone(),
        source,
    })?;
    let csv_path = out_dir.join("sweep.csv");
    let csv = File::create(&csv_path).map_err(|source| CliError::Io {
        path: csv_path.clone(),
        source,
    })?;
    let mut csv = BufWriter::new(csv);
    writeln!(csv, "{}", SweepCell::CSV_HEADER).and_then(|_| csv.flush()).map_err(|source| CliError::Io {
        path: csv_path.clone(),
        source,
    })?;
    // Cells finish on worker threads; rows are appended one at a time as they arrive.
    let csv = Mutex::new(csv);
    let cells = run_sweep(cfg, |cell| {
        let mut w = csv.lock().expect("csv writer lock");
        let row = writeln!(w, "{}", cell.csv_row()).and_then(|_| w.flush());
        if let Err(e) = row {
            eprintln!("{}: {e}", csv_path.display());
        }
        match (&cell.report, &cell.error) {
            (Some(r), _) => eprintln!(
                "{} = {} (rep {}): mean error {:.3} m",
                cell.variable.name(),
                cell.value,
                cell.repetition,
                r.mean_error
            ),
            (None, Some(e)) => eprintln!("{} = {} (rep {}): failed: {e}", cell.variable.name(), cell.value, cell.repetition),
            (None, None) => {}
        }
    })?;
    for c in &cells {
        let name = format!("{}_{}_r{}.json", c.variable.name(), c.value, c.repetition);
        write_json(&cells_dir.join(name), c)?;
    }
    write_json(&out_dir.join("sweep.json"), &cells)?;
    eprintln!("wrote {}", csv_path.display());
    Ok(())
}
