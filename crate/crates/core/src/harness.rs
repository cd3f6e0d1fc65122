//! Experiments, metrics and parameter sweeps.
//!
//! An experiment simulates (or loads) a site survey, trains on the training
//! sites and locates every test position with the greedy estimator. Test
//! positions come in two groups: `grid` (held-out images of training sites)
//! and `offgrid` (positions absent from training).
//!
//! Reports are deterministic for a fixed config; wall-clock timing is kept
//! outside the serialized report.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{simulate_features, Environment, Position, SimConfig, SimError, SiteLayout};
use crate::csi::FeatureVector;
use crate::imaging::{
    build_images, split_indices, CsiImage, Dataset, ImagingError, NormalizationSpec, Provenance, Site, SplitMode,
    DEFAULT_WINDOW,
};
use crate::locator::{estimate_position, GreedyConfig, LocatorError, PositionEstimate, PredictionMatrix};
use crate::net::{train_with_progress, EpochStats, ModelCheckpoint, NetError, NetworkConfig, TrainConfig};
use crate::rng::{child_rng, child_seed, domain};

/// Minimum number of timed position predictions.
pub const MIN_TIMED_POSITIONS: usize = 30;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("simulate: {0}")]
    Simulate(#[from] SimError),
    #[error("data: {0}")]
    Data(#[from] ImagingError),
    #[error("train: {0}")]
    Train(#[from] NetError),
    #[error("locate: {0}")]
    Locate(#[from] LocatorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean Euclidean distance between estimates and ground truth.
pub fn mean_error(estimates: &[[f64; 2]], truths: &[[f64; 2]]) -> Result<f64, HarnessError> {
    if estimates.len() != truths.len() {
        return Err(HarnessError::Config(format!(
            "{} estimates for {} ground-truth positions",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(HarnessError::Config("no positions to evaluate".into()));
    }
    let total: f64 = estimates.iter().zip(truths).map(|(e, t)| distance(*e, *t)).sum();
    Ok(total / estimates.len() as f64)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Empirical CDF at the sorted unique error values.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match cdf.last_mut() {
            Some(last) if last.0 == e => last.1 = frac,
            _ => cdf.push((e, frac)),
        }
    }
    cdf
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rectangular site grid plus off-grid test positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub origin: Position,
    pub tx_position: Position,
    /// Number of random off-grid test positions inside the grid.
    pub offgrid_count: usize,
    /// Explicit off-grid positions; replaces the random draw when non-empty.
    pub offgrid_positions: Vec<Position>,
    /// Off-grid positions keep at least this fraction of `spacing` from every site.
    pub offgrid_min_separation: f64,
}

impl Default for GridLayout {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            spacing: 1.5,
            origin: [0.0, 0.0],
            tx_position: [-1.0, -2.5],
            offgrid_count: 8,
            offgrid_positions: Vec::new(),
            offgrid_min_separation: 0.25,
        }
    }
}

impl GridLayout {
    pub fn site_layout(&self) -> SiteLayout {
        SiteLayout::grid(self.rows, self.cols, self.spacing, self.origin, self.tx_position)
    }

    /// Off-grid positions: explicit ones, or a seeded uniform draw over the
    /// grid's bounding box rejecting points too close to a site.
    pub fn offgrid(&self, seed: u64) -> Vec<Position> {
        if !self.offgrid_positions.is_empty() {
            return self.offgrid_positions.clone();
        }
        let sites = self.site_layout().site_positions;
        let hi = [
            self.origin[0] + (self.cols.max(1) - 1) as f64 * self.spacing,
            self.origin[1] + (self.rows.max(1) - 1) as f64 * self.spacing,
        ];
        let min_sep = self.offgrid_min_separation * self.spacing;
        let mut rng = child_rng(seed, domain::LAYOUT, 0);
        let mut out = Vec::with_capacity(self.offgrid_count);
        let mut attempts = 0;
        while out.len() < self.offgrid_count && attempts < 100_000 {
            attempts += 1;
            let p = [
                rng.random_range(self.origin[0]..=hi[0]),
                rng.random_range(self.origin[1]..=hi[1]),
            ];
            if sites.iter().all(|s| distance(*s, p) >= min_sep) {
                out.push(p);
            }
        }
        out
    }
}

/// Where the survey comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulate {
        #[serde(default)]
        layout: GridLayout,
    },
    Load {
        /// Dataset of the training sites; held-out images form the grid group.
        dataset: PathBuf,
        /// Optional dataset of positions absent from training.
        #[serde(default)]
        offgrid_dataset: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulate {
            layout: GridLayout::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of each training site's images used for training.
    pub train_fraction: f64,
    pub mode: SplitMode,
    /// Keep at most this many training images per site.
    pub images_per_site: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            mode: SplitMode::Image,
            images_per_site: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    NumImages,
    BatchSize,
    LearningRate,
    H,
    PacketsPerImage,
    SiteSpacing,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::NumImages => "num_images",
            SweepVariable::BatchSize => "batch_size",
            SweepVariable::LearningRate => "learning_rate",
            SweepVariable::H => "h",
            SweepVariable::PacketsPerImage => "packets_per_image",
            SweepVariable::SiteSpacing => "site_spacing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Give repetition `r` the seed `seed + r`; otherwise every repetition reuses `seed`.
    #[serde(default = "yes")]
    pub reseed_repetitions: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub sim: SimConfig,
    /// Packets per image (image height).
    pub packets_per_image: usize,
    pub split: SplitConfig,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub greedy: GreedyConfig,
    /// Monte Carlo trials of the random-site baseline per position.
    pub baseline_trials: usize,
    pub sweep: Option<SweepSpec>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSource::default(),
            sim: SimConfig::default(),
            packets_per_image: DEFAULT_WINDOW,
            split: SplitConfig::default(),
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            greedy: GreedyConfig::default(),
            baseline_trials: 200,
            sweep: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Propagates the top-level seed into the simulator and trainer.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.sim.seed = self.seed;
        c.train.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.packets_per_image == 0 {
            return Err(HarnessError::Config("packets_per_image must be at least 1".into()));
        }
        if self.greedy.h == 0 || self.greedy.k == 0 {
            return Err(HarnessError::Config("greedy h and k must be at least 1".into()));
        }
        if let DataSource::Simulate { layout } = &self.data {
            if layout.rows == 0 || layout.cols == 0 || !(layout.spacing > 0.0) {
                return Err(HarnessError::Config("grid needs rows, cols ≥ 1 and positive spacing".into()));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(HarnessError::Config("sweep needs at least one value".into()));
            }
            if s.repetitions == 0 {
                return Err(HarnessError::Config("sweep repetitions must be at least 1".into()));
            }
        }
        self.sim.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRecord {
    pub site_id: u32,
    pub truth: [f64; 2],
    pub estimate: [f64; 2],
    pub error: f64,
    pub images: usize,
    pub support: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub mean_error: f64,
    pub std_error: f64,
    pub cdf: Vec<(f64, f64)>,
    /// Mean error of estimating each position by K random training sites.
    pub random_baseline_error: f64,
    pub positions: Vec<PositionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub classes: usize,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub train_accuracy: f64,
    /// Top-1 accuracy on held-out images of training sites.
    pub grid_image_accuracy: Option<f64>,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds per position for image assembly, inference and the greedy estimate.
    pub mean_execution_time: f64,
    pub timed_positions: usize,
    /// Whether image assembly from features is inside the timed span.
    pub includes_image_build: bool,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Over every test position of every group.
    pub mean_error: f64,
    pub std_error: f64,
    pub cdf: Vec<(f64, f64)>,
    pub per_position_errors: Vec<f64>,
    pub groups: BTreeMap<String, GroupMetrics>,
    pub model: ModelSummary,
    pub config: ExperimentConfig,
    /// Wall-clock figures; not serialized with the report.
    #[serde(skip)]
    pub timing: Timing,
}

impl MetricsReport {
    pub fn mean_execution_time(&self) -> f64 {
        self.timing.mean_execution_time
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// A test position's input to the online stage.
enum TestInput {
    /// Raw feature windows, turned into images inside the timed span.
    Features(Vec<FeatureVector>),
    Images(Vec<CsiImage>),
}

struct TestPosition {
    site: Site,
    input: TestInput,
}

struct Prepared {
    train: Dataset,
    groups: Vec<(String, Vec<TestPosition>)>,
    normalization: NormalizationSpec,
    window: usize,
}

/// Simulated features and images of the grid sites and the off-grid positions.
#[derive(Debug, Clone)]
pub struct Survey {
    pub grid: Dataset,
    pub grid_features: Vec<Vec<FeatureVector>>,
    /// Empty when the layout has no off-grid positions.
    pub offgrid: Option<Dataset>,
    pub offgrid_features: Vec<Vec<FeatureVector>>,
}

/// Simulates every grid site (training streams) and off-grid position (test
/// streams) in one shared environment. Off-grid site ids follow the grid's.
/// Both datasets use the normalization fitted on the grid features.
pub fn simulate_survey(layout: &GridLayout, sim: &SimConfig, window: usize, seed: u64) -> Result<Survey, HarnessError> {
    let site_layout = layout.site_layout();
    site_layout.validate()?;
    let env = Environment::new(&site_layout, sim);
    let grid_features = simulate_features(&env, &site_layout.site_positions, sim, domain::TRAIN_SITE)?;
    let normalization = NormalizationSpec::from_features(grid_features.iter().flatten());
    let provenance = Provenance {
        source: "simulator".into(),
        seed: Some(sim.seed),
    };
    let sites = |positions: &[Position], base: u32| -> Vec<Site> {
        positions
            .iter()
            .enumerate()
            .map(|(i, p)| Site {
                site_id: base + i as u32,
                coords: *p,
            })
            .collect()
    };
    let grid = Dataset::from_site_features(
        sites(&site_layout.site_positions, 0),
        &grid_features,
        window,
        normalization,
        sim.geometry,
        provenance.clone(),
    )?;
    let offgrid_positions = layout.offgrid(seed);
    let (offgrid, offgrid_features) = if offgrid_positions.is_empty() {
        (None, Vec::new())
    } else {
        let f = simulate_features(&env, &offgrid_positions, sim, domain::TEST_SITE)?;
        let d = Dataset::from_site_features(
            sites(&offgrid_positions, grid.sites.len() as u32),
            &f,
            window,
            normalization,
            sim.geometry,
            provenance,
        )?;
        (Some(d), f)
    };
    Ok(Survey {
        grid,
        grid_features,
        offgrid,
        offgrid_features,
    })
}

fn prepare_simulated(cfg: &ExperimentConfig, layout: &GridLayout) -> Result<Prepared, HarnessError> {
    let window = cfg.packets_per_image;
    let survey = simulate_survey(layout, &cfg.sim, window, cfg.seed)?;
    let (train_idx, test_idx) = split_indices(&survey.grid, cfg.split.train_fraction, cfg.seed, cfg.split.mode)?;
    let first_index: BTreeMap<u32, usize> = survey.grid.indices_by_site().into_iter().map(|(s, v)| (s, v[0])).collect();

    // Held-out images go back to their raw feature windows so the timed
    // online stage includes image assembly.
    let mut held_out: BTreeMap<u32, Vec<FeatureVector>> = BTreeMap::new();
    for &i in &test_idx {
        let site = survey.grid.images[i].site_id;
        let local = i - first_index[&site];
        held_out
            .entry(site)
            .or_default()
            .extend_from_slice(&survey.grid_features[site as usize][local * window..(local + 1) * window]);
    }
    let held_out_sites: Vec<TestPosition> = held_out
        .into_iter()
        .map(|(id, f)| TestPosition {
            site: survey.grid.sites[id as usize],
            input: TestInput::Features(f),
        })
        .collect();

    let train = trim_sites(survey.grid.with_images(&train_idx));
    let mut groups = vec![(group_name(cfg.split.mode).to_string(), held_out_sites)];
    if let Some(off) = &survey.offgrid {
        let positions = off
            .sites
            .iter()
            .zip(survey.offgrid_features)
            .map(|(s, f)| TestPosition {
                site: *s,
                input: TestInput::Features(f),
            })
            .collect();
        groups.push(("offgrid".to_string(), positions));
    }
    Ok(Prepared {
        train,
        groups,
        normalization: survey.grid.normalization,
        window,
    })
}

fn group_name(mode: SplitMode) -> &'static str {
    match mode {
        SplitMode::Image => "grid",
        SplitMode::Site => "heldout_sites",
    }
}

/// Drops sites without images, so classes are only sites seen in training.
fn trim_sites(mut d: Dataset) -> Dataset {
    let used: Vec<u32> = d.images.iter().map(|i| i.site_id).collect();
    d.sites.retain(|s| used.contains(&s.site_id));
    d
}

fn positions_from_images(d: &Dataset, indices: Option<&[usize]>) -> Vec<TestPosition> {
    let all: Vec<usize> = (0..d.images.len()).collect();
    let mut by_site: BTreeMap<u32, Vec<CsiImage>> = BTreeMap::new();
    for &i in indices.unwrap_or(&all) {
        by_site.entry(d.images[i].site_id).or_default().push(d.images[i].image.clone());
    }
    by_site
        .into_iter()
        .map(|(id, images)| TestPosition {
            site: *d.sites.iter().find(|s| s.site_id == id).expect("validated dataset"),
            input: TestInput::Images(images),
        })
        .collect()
}

fn prepare_loaded(cfg: &ExperimentConfig, dataset: &PathBuf, offgrid: Option<&PathBuf>) -> Result<Prepared, HarnessError> {
    let survey = Dataset::load(dataset)?;
    let (train_idx, test_idx) = split_indices(&survey, cfg.split.train_fraction, cfg.seed, cfg.split.mode)?;
    let train = trim_sites(survey.with_images(&train_idx));
    let mut groups = vec![(group_name(cfg.split.mode).to_string(), positions_from_images(&survey, Some(&test_idx)))];
    if let Some(path) = offgrid {
        groups.push(("offgrid".to_string(), positions_from_images(&Dataset::load(path)?, None)));
    }
    let window = survey.image_dims().map_or(cfg.packets_per_image, |d| d.0);
    Ok(Prepared {
        normalization: survey.normalization,
        train,
        groups,
        window,
    })
}

fn online_estimate(
    model: &ModelCheckpoint,
    input: &TestInput,
    norm: &NormalizationSpec,
    window: usize,
    greedy: &GreedyConfig,
) -> Result<(PositionEstimate, PredictionMatrix), HarnessError> {
    let built;
    let images: Vec<&CsiImage> = match input {
        TestInput::Features(f) => {
            built = build_images(f, window, norm);
            built.iter().collect()
        }
        TestInput::Images(v) => v.iter().collect(),
    };
    if images.is_empty() {
        return Err(HarnessError::Config("test position without a complete image".into()));
    }
    let p = PredictionMatrix::from_columns(model.predict_batch(&images)?)?;
    let coords: Vec<[f64; 2]> = model.sites.iter().map(|s| s.coords).collect();
    Ok((estimate_position(&p, &coords, greedy)?, p))
}

/// Locates every site of `d` from all of its images.
pub fn locate_dataset(model: &ModelCheckpoint, d: &Dataset, greedy: &GreedyConfig) -> Result<Vec<PositionRecord>, HarnessError> {
    positions_from_images(d, None)
        .iter()
        .map(|pos| {
            let (est, p) = online_estimate(model, &pos.input, &d.normalization, 0, greedy)?;
            Ok(PositionRecord {
                site_id: pos.site.site_id,
                truth: pos.site.coords,
                estimate: est.coords,
                error: distance(est.coords, pos.site.coords),
                images: p.cols(),
                support: est.support.iter().map(|s| s.index).collect(),
            })
        })
        .collect()
}

/// Mean error of estimating `truth` by the mean of `k` distinct uniformly
/// drawn training sites.
fn random_baseline(truth: [f64; 2], sites: &[[f64; 2]], k: usize, trials: usize, seed: u64) -> f64 {
    let k = k.min(sites.len());
    let mut rng = child_rng(seed, domain::VALIDATION, 0xba5e);
    let total: f64 = (0..trials.max(1))
        .map(|_| {
            let pick = sample(&mut rng, sites.len(), k);
            let (x, y) = pick.iter().fold((0.0, 0.0), |(x, y), i| (x + sites[i][0], y + sites[i][1]));
            distance([x / k as f64, y / k as f64], truth)
        })
        .sum();
    total / trials.max(1) as f64
}

/// Runs one experiment; `on_epoch` sees training progress.
pub fn run_experiment_with_progress(cfg: &ExperimentConfig, on_epoch: impl FnMut(&EpochStats)) -> Result<(MetricsReport, ModelCheckpoint), HarnessError> {
    let started = Instant::now();
    let cfg = cfg.resolved();
    cfg.validate()?;
    let prepared = match &cfg.data {
        DataSource::Simulate { layout } => prepare_simulated(&cfg, layout)?,
        DataSource::Load { dataset, offgrid_dataset } => prepare_loaded(&cfg, dataset, offgrid_dataset.as_ref())?,
    };
    let train_set = match cfg.split.images_per_site {
        Some(n) => prepared.train.limit_per_site(n),
        None => prepared.train.clone(),
    };
    if train_set.images.is_empty() {
        return Err(HarnessError::Config("no training images".into()));
    }

    let t_train = Instant::now();
    let model = train_with_progress(&train_set, None, &cfg.net, &cfg.train, on_epoch)?;
    let train_seconds = t_train.elapsed().as_secs_f64();

    let site_coords: Vec<[f64; 2]> = model.sites.iter().map(|s| s.coords).collect();
    let mut groups = BTreeMap::new();
    let mut all_errors = Vec::new();
    let mut grid_correct = (0usize, 0usize);
    let mut timings = Vec::new();
    for (name, positions) in &prepared.groups {
        let mut records = Vec::with_capacity(positions.len());
        let mut baseline = Vec::with_capacity(positions.len());
        for pos in positions {
            let t = Instant::now();
            let (est, p) = online_estimate(&model, &pos.input, &prepared.normalization, prepared.window, &cfg.greedy)?;
            timings.push(t.elapsed().as_secs_f64());
            if let Some(class) = model.sites.iter().position(|s| s.site_id == pos.site.site_id) {
                for col in p.columns() {
                    grid_correct.1 += 1;
                    if argmax(col) == class {
                        grid_correct.0 += 1;
                    }
                }
            }
            let error = distance(est.coords, pos.site.coords);
            baseline.push(random_baseline(
                pos.site.coords,
                &site_coords,
                cfg.greedy.k,
                cfg.baseline_trials,
                child_seed(cfg.seed, pos.site.site_id as u64, 0),
            ));
            records.push(PositionRecord {
                site_id: pos.site.site_id,
                truth: pos.site.coords,
                estimate: est.coords,
                error,
                images: p.cols(),
                support: est.support.iter().map(|s| s.index).collect(),
            });
        }
        let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
        all_errors.extend_from_slice(&errors);
        let (mean, std) = mean_std(&errors);
        groups.insert(
            name.clone(),
            GroupMetrics {
                mean_error: mean,
                std_error: std,
                cdf: error_cdf(&errors),
                random_baseline_error: mean_std(&baseline).0,
                positions: records,
            },
        );
    }

    // Top up timing to the minimum sample count by re-running positions in order.
    let flat: Vec<&TestPosition> = prepared.groups.iter().flat_map(|(_, p)| p.iter()).collect();
    let mut k = 0;
    while timings.len() < MIN_TIMED_POSITIONS && !flat.is_empty() {
        let t = Instant::now();
        online_estimate(&model, &flat[k % flat.len()].input, &prepared.normalization, prepared.window, &cfg.greedy)?;
        timings.push(t.elapsed().as_secs_f64());
        k += 1;
    }

    let (mean, std) = mean_std(&all_errors);
    let report = MetricsReport {
        mean_error: mean,
        std_error: std,
        cdf: error_cdf(&all_errors),
        per_position_errors: all_errors,
        groups,
        model: ModelSummary {
            classes: model.class_count(),
            best_epoch: model.metadata.epoch,
            val_accuracy: model.metadata.val_accuracy,
            train_accuracy: model.metadata.train_accuracy,
            grid_image_accuracy: (grid_correct.1 > 0).then(|| grid_correct.0 as f64 / grid_correct.1 as f64),
            history: model.metadata.history.clone(),
        },
        config: cfg,
        timing: Timing {
            mean_execution_time: mean_std(&timings).0,
            timed_positions: timings.len(),
            includes_image_build: prepared
                .groups
                .iter()
                .flat_map(|(_, p)| p.iter())
                .all(|p| matches!(p.input, TestInput::Features(_))),
            train_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
    };
    Ok((report, model))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    run_experiment_with_progress(cfg, |_| {}).map(|(r, _)| r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variable: SweepVariable,
    pub value: f64,
    pub repetition: usize,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl SweepCell {
    pub const CSV_HEADER: &'static str = "variable,value,repetition,seed,status,mean_error,std_error,grid_mean_error,offgrid_mean_error,mean_execution_time";

    pub fn csv_row(&self) -> String {
        let group = |name: &str| {
            self.report
                .as_ref()
                .and_then(|r| r.groups.get(name))
                .map_or(String::new(), |g| g.mean_error.to_string())
        };
        match &self.report {
            Some(r) => format!(
                "{},{},{},{},ok,{},{},{},{},{}",
                self.variable.name(),
                self.value,
                self.repetition,
                self.seed,
                r.mean_error,
                r.std_error,
                group("grid"),
                group("offgrid"),
                r.timing.mean_execution_time
            ),
            None => format!(
                "{},{},{},{},error,,,,,",
                self.variable.name(),
                self.value,
                self.repetition,
                self.seed
            ),
        }
    }
}

/// The experiment config of one sweep cell.
pub fn sweep_cell_config(base: &ExperimentConfig, variable: SweepVariable, value: f64, seed: u64) -> Result<ExperimentConfig, HarnessError> {
    let mut c = base.clone();
    c.sweep = None;
    c.seed = seed;
    let count = || -> Result<usize, HarnessError> {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(HarnessError::Config(format!("{} needs a positive integer, got {value}", variable.name())))
        }
    };
    match variable {
        SweepVariable::NumImages => c.split.images_per_site = Some(count()?),
        SweepVariable::BatchSize => c.train.batch_size = count()?,
        SweepVariable::LearningRate => c.train.learning_rate = value,
        SweepVariable::H => c.greedy.h = count()?,
        SweepVariable::PacketsPerImage => c.packets_per_image = count()?,
        SweepVariable::SiteSpacing => match &mut c.data {
            DataSource::Simulate { layout } => layout.spacing = value,
            DataSource::Load { .. } => {
                return Err(HarnessError::Config("site_spacing sweeps need a simulated layout".into()));
            }
        },
    }
    Ok(c)
}

/// One report per value × repetition. Failing cells carry their error and
/// do not stop the sweep. `on_cell` is called as each cell finishes.
pub fn run_sweep(cfg: &ExperimentConfig, on_cell: impl Fn(&SweepCell) + Sync + Send) -> Result<Vec<SweepCell>, HarnessError> {
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| HarnessError::Config("config has no sweep section".into()))?;
    cfg.validate()?;
    let cells: Vec<(f64, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.repetitions).map(move |r| (v, r)))
        .collect();
    let run = |&(value, repetition): &(f64, usize)| {
        let seed = if spec.reseed_repetitions {
            cfg.seed + repetition as u64
        } else {
            cfg.seed
        };
        let outcome = sweep_cell_config(cfg, spec.variable, value, seed).and_then(|c| run_experiment(&c));
        let cell = SweepCell {
            variable: spec.variable,
            value,
            repetition,
            seed,
            error: outcome.as_ref().err().map(ToString::to_string),
            report: outcome.ok(),
        };
        on_cell(&cell);
        cell
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok(cells.par_iter().map(run).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(cells.iter().map(run).collect())
    }
}
