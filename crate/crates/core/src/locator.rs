//! Greedy top-H position estimation.
//!
//! The network's class probabilities for N test images form an L×N matrix.
//! Each column contributes its H most probable training locations; the K
//! locations that occur most often across all columns are averaged into the
//! estimate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::CsiImage;
use crate::net::{ModelCheckpoint, NetError};

/// Tolerance on column sums.
pub const COLUMN_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LocatorError {
    #[error("invalid locator configuration: {0}")]
    Config(String),
    #[error("invalid prediction matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain mean of the selected sites.
    #[default]
    Uniform,
    /// Centroid weighted by each selected site's accumulated probability.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreedyConfig {
    pub h: usize,
    pub k: usize,
    pub weighting: Weighting,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            h: 5,
            k: 5,
            weighting: Weighting::Uniform,
        }
    }
}

/// `p[i][j]`: probability of training location `i` for test image `j`.
/// Stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    locations: usize,
    data: Vec<f64>,
}

impl PredictionMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self, LocatorError> {
        let locations = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| LocatorError::Config("prediction matrix needs at least one column".into()))?;
        if locations == 0 {
            return Err(LocatorError::Matrix("zero locations".into()));
        }
        for (j, c) in columns.iter().enumerate() {
            if c.len() != locations {
                return Err(LocatorError::Matrix(format!("column {j} has {} rows, expected {locations}", c.len())));
            }
            if c.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(LocatorError::Matrix(format!("column {j} has a negative or non-finite entry")));
            }
            let sum: f64 = c.iter().sum();
            if (sum - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(LocatorError::Matrix(format!("column {j} sums to {sum}")));
            }
        }
        Ok(Self {
            locations,
            data: columns.concat(),
        })
    }

    /// L, the number of training locations.
    pub fn rows(&self) -> usize {
        self.locations
    }

    /// N, the number of test images.
    pub fn cols(&self) -> usize {
        self.data.len() / self.locations
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.locations..(j + 1) * self.locations]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.locations + i]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.locations)
    }
}

/// Column `j` holds the indices of the H largest entries of column `j`,
/// descending, ties to the lower index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateMatrix {
    pub h: usize,
    pub indices: Vec<usize>,
}

impl CandidateMatrix {
    pub fn column(&self, j: usize) -> &[usize] {
        &self.indices[j * self.h..(j + 1) * self.h]
    }

    pub fn cols(&self) -> usize {
        self.indices.len() / self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub index: usize,
    /// Occurrences in the candidate matrix.
    pub frequency: usize,
    /// Probability summed over those occurrences.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub coords: [f64; 2],
    /// Selected locations in selection order.
    pub support: Vec<SupportEntry>,
    /// How many of the requested K locations were missing because fewer
    /// distinct candidates occurred.
    pub shortfall: usize,
}

/// Column `j` = class probabilities of `images[j]`.
pub fn build_prediction_matrix(model: &ModelCheckpoint, images: &[&CsiImage]) -> Result<PredictionMatrix, LocatorError> {
    if images.is_empty() {
        return Err(LocatorError::Config("no test images".into()));
    }
    PredictionMatrix::from_columns(model.predict_batch(images)?)
}

pub fn top_h(p: &PredictionMatrix, h: usize) -> Result<CandidateMatrix, LocatorError> {
    if h == 0 || h > p.rows() {
        return Err(LocatorError::Config(format!("h = {h} outside [1, {}]", p.rows())));
    }
    let mut indices = Vec::with_capacity(h * p.cols());
    let mut taken = vec![false; p.rows()];
    for col in p.columns() {
        taken.iter_mut().for_each(|t| *t = false);
        for _ in 0..h {
            // strict comparison keeps the lowest index among equal values
            let best = (0..col.len())
                .filter(|&i| !taken[i])
                .reduce(|b, i| if col[i] > col[b] { i } else { b })
                .expect("h ≤ L leaves a candidate");
            taken[best] = true;
            indices.push(best);
        }
    }
    Ok(CandidateMatrix { h, indices })
}

/// Frequency and probability mass of every location over the candidate
/// matrix, accumulated column by column.
pub fn candidate_support(p: &PredictionMatrix, r: &CandidateMatrix) -> Vec<SupportEntry> {
    let mut support: Vec<SupportEntry> = (0..p.rows())
        .map(|index| SupportEntry {
            index,
            frequency: 0,
            mass: 0.0,
        })
        .collect();
    for j in 0..r.cols() {
        for &i in r.column(j) {
            support[i].frequency += 1;
            support[i].mass += p.get(i, j);
        }
    }
    support
}

/// Greedy estimate: the K most frequent candidates (ties to larger mass,
/// then lower index) averaged uniformly or by probability mass.
pub fn estimate_position(p: &PredictionMatrix, sites: &[[f64; 2]], cfg: &GreedyConfig) -> Result<PositionEstimate, LocatorError> {
    if cfg.k == 0 {
        return Err(LocatorError::Config("k must be at least 1".into()));
    }
    if sites.len() != p.rows() {
        return Err(LocatorError::Config(format!(
            "{} site coordinates for {} locations",
            sites.len(),
            p.rows()
        )));
    }
    let r = top_h(p, cfg.h)?;
    let mut support: Vec<SupportEntry> = candidate_support(p, &r).into_iter().filter(|s| s.frequency > 0).collect();
    support.sort_by(|a, b| {
        b.frequency
            .cmp(&a.frequency)
            .then(b.mass.total_cmp(&a.mass))
            .then(a.index.cmp(&b.index))
    });
    let shortfall = cfg.k.saturating_sub(support.len());
    support.truncate(cfg.k);
    let coords = match cfg.weighting {
        Weighting::Uniform => {
            let n = support.len() as f64;
            let (x, y) = support.iter().fold((0.0, 0.0), |(x, y), s| (x + sites[s.index][0], y + sites[s.index][1]));
            [x / n, y / n]
        }
        Weighting::Probability => {
            let total: f64 = support.iter().map(|s| s.mass).sum();
            let (x, y) = support.iter().fold((0.0, 0.0), |(x, y), s| {
                let w = s.mass / total;
                (x + w * sites[s.index][0], y + w * sites[s.index][1])
            });
            [x, y]
        }
    };
    Ok(PositionEstimate {
        coords,
        support,
        shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normalize(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn top_h_examples() {
        let p = PredictionMatrix::from_columns(vec![vec![0.1, 0.5, 0.2, 0.15, 0.05]]).unwrap();
        assert_eq!(top_h(&p, 2).unwrap().indices, vec![1, 2]);
        assert_eq!(top_h(&p, 1).unwrap().indices, vec![1]);
        let u = PredictionMatrix::from_columns(vec![vec![0.25; 4]]).unwrap();
        assert_eq!(top_h(&u, 3).unwrap().indices, vec![0, 1, 2]);
        assert!(matches!(top_h(&p, 0), Err(LocatorError::Config(_))));
        assert!(matches!(top_h(&p, 6), Err(LocatorError::Config(_))));
    }

    #[test]
    fn matrix_validation() {
        assert!(matches!(PredictionMatrix::from_columns(vec![]), Err(LocatorError::Config(_))));
        assert!(PredictionMatrix::from_columns(vec![vec![0.5, 0.6]]).is_err());
        assert!(PredictionMatrix::from_columns(vec![vec![1.2, -0.2]]).is_err());
        assert!(PredictionMatrix::from_columns(vec![vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn hand_evaluated_example() {
        let sites = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        let p = PredictionMatrix::from_columns(vec![vec![0.6, 0.3, 0.1]; 4]).unwrap();
        let cfg = GreedyConfig {
            h: 2,
            k: 2,
            weighting: Weighting::Uniform,
        };
        let est = estimate_position(&p, &sites, &cfg).unwrap();
        assert_eq!(est.coords, [1.0, 0.0]);
        assert_eq!(est.support.iter().map(|s| (s.index, s.frequency)).collect::<Vec<_>>(), vec![(0, 4), (1, 4)]);
        assert_eq!(est.shortfall, 0);

        let weighted = estimate_position(
            &p,
            &sites,
            &GreedyConfig {
                weighting: Weighting::Probability,
                ..cfg
            },
        )
        .unwrap();
        // masses 2.4 and 1.2 → weights 2/3, 1/3
        assert!((weighted.coords[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_case_is_argmax() {
        let sites = [[0.0, 0.0], [1.0, 5.0], [3.0, 2.0]];
        let p = PredictionMatrix::from_columns(vec![vec![0.2, 0.3, 0.5]]).unwrap();
        let cfg = GreedyConfig {
            h: 1,
            k: 1,
            weighting: Weighting::Uniform,
        };
        assert_eq!(estimate_position(&p, &sites, &cfg).unwrap().coords, [3.0, 2.0]);
    }

    #[test]
    fn shortfall_is_recorded() {
        let sites = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
        let p = PredictionMatrix::from_columns(vec![vec![0.6, 0.3, 0.1]]).unwrap();
        let est = estimate_position(&p, &sites, &GreedyConfig::default().with_hk(2, 5)).unwrap();
        assert_eq!(est.support.len(), 2);
        assert_eq!(est.shortfall, 3);
        assert_eq!(est.coords, [1.0, 0.0]);
    }

    impl GreedyConfig {
        fn with_hk(self, h: usize, k: usize) -> Self {
            Self { h, k, ..self }
        }
    }

    fn matrix_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (2usize..10, 1usize..8).prop_flat_map(|(l, n)| {
            (
                prop::collection::vec(prop::collection::vec(0u8..6, l), n)
                    .prop_map(|cols| cols.into_iter().map(|c| normalize(c.into_iter().map(|v| v as f64 + 0.5).collect())).collect()),
                Just(l),
            )
        })
    }

    proptest! {
        #[test]
        fn estimate_is_order_invariant_and_in_hull((cols, l) in matrix_strategy(), h in 1usize..10, k in 1usize..6, seed: u64) {
            use rand::{seq::SliceRandom, SeedableRng};
            let h = h.min(l);
            let sites: Vec<[f64; 2]> = (0..l).map(|i| [i as f64, (i * i) as f64 * 0.5]).collect();
            let cfg = GreedyConfig { h, k, weighting: Weighting::Uniform };
            let p = PredictionMatrix::from_columns(cols.clone()).unwrap();
            let est = estimate_position(&p, &sites, &cfg).unwrap();
            let mut shuffled = cols;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let q = PredictionMatrix::from_columns(shuffled).unwrap();
            let est2 = estimate_position(&q, &sites, &cfg).unwrap();
            prop_assert_eq!(est.support.iter().map(|s| s.index).collect::<Vec<_>>(), est2.support.iter().map(|s| s.index).collect::<Vec<_>>());
            prop_assert!((est.coords[0] - est2.coords[0]).abs() < 1e-12);
            prop_assert!(est.coords[0] >= 0.0 && est.coords[0] <= (l - 1) as f64);
            prop_assert!(est.coords[1] >= 0.0 && est.coords[1] <= ((l - 1) * (l - 1)) as f64 * 0.5);
        }

        #[test]
        fn full_h_reduces_to_mass_ranking((cols, l) in matrix_strategy(), k in 1usize..6) {
            let p = PredictionMatrix::from_columns(cols).unwrap();
            let sites: Vec<[f64; 2]> = (0..l).map(|i| [i as f64, 0.0]).collect();
            let est = estimate_position(&p, &sites, &GreedyConfig { h: l, k, weighting: Weighting::Uniform }).unwrap();
            prop_assert!(est.support.iter().all(|s| s.frequency == p.cols()));
            let mut by_mass: Vec<(f64, usize)> = (0..l).map(|i| ((0..p.cols()).map(|j| p.get(i, j)).sum(), i)).collect();
            by_mass.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = by_mass.iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(est.support.iter().map(|s| s.index).collect::<Vec<_>>(), want);
        }

        #[test]
        fn top_h_invariant_under_common_scaling((cols, _l) in matrix_strategy(), factor in 0.1f64..10.0) {
            let p = PredictionMatrix::from_columns(cols.clone()).unwrap();
            let scaled = PredictionMatrix::from_columns(cols.into_iter().map(|c| normalize(c.into_iter().map(|v| v * factor).collect())).collect()).unwrap();
            for h in 1..=p.rows() {
                prop_assert_eq!(top_h(&p, h).unwrap(), top_h(&scaled, h).unwrap());
            }
        }
    }
}
