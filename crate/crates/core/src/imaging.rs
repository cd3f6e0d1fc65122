//! Fingerprint images and datasets.
//!
//! Each image stacks `window` consecutive packets as rows and the 90
//! per-channel features as columns; R is average amplitude, G the estimated
//! angle of arrival, B the phase difference. Channels are mapped affinely to
//! [0, 1]: AoA from [0, π], phase from (−π, π], amplitude from a dataset-wide
//! range kept in [`NormalizationSpec`] so absolute level differences between
//! locations survive.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi::{AntennaGeometry, FeatureVector, FEATURES_PER_CHANNEL};
use crate::rng::{child_rng, domain};

pub const DEFAULT_WINDOW: usize = 90;
pub const CHANNELS: usize = 3;
pub const IMAGE_WIDTH: usize = FEATURES_PER_CHANNEL;

pub const DATASET_MAGIC: &[u8; 5] = b"SECCI";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset format version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("dataset file truncated: {0}")]
    Truncated(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad dataset header: {0}")]
    Header(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Config(String),
    #[error("features file line {line}: {message}")]
    Features { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl PartialEq for ImagingError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

/// Amplitude range for the R channel; AoA and phase ranges are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub amp_range: (f64, f64),
}

impl NormalizationSpec {
    pub const AOA_RANGE: (f64, f64) = (0.0, PI);
    pub const PHASE_RANGE: (f64, f64) = (-PI, PI);

    pub fn new(lo: f64, hi: f64) -> Result<Self, ImagingError> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(ImagingError::Invalid(format!("amplitude range ({lo}, {hi}) must satisfy lo < hi")));
        }
        Ok(Self { amp_range: (lo, hi) })
    }

    /// `[min, max]` of all average amplitudes; a degenerate range widens to `[v, v + 1]`.
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a FeatureVector>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for f in features {
            for &a in &f.amp_avg {
                lo = lo.min(a);
                hi = hi.max(a);
            }
        }
        if !lo.is_finite() {
            return Self { amp_range: (0.0, 1.0) };
        }
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        Self { amp_range: (lo, hi) }
    }

    fn range(&self, channel: usize) -> (f64, f64) {
        match channel {
            0 => self.amp_range,
            1 => Self::AOA_RANGE,
            _ => Self::PHASE_RANGE,
        }
    }

    /// Affine map of `value` from the channel's range onto [0, 1], clipped.
    pub fn normalize(&self, channel: usize, value: f64) -> f32 {
        let (lo, hi) = self.range(channel);
        (((value - lo) / (hi - lo)).clamp(0.0, 1.0)) as f32
    }
}

/// A `3 × height × 90` image, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl CsiImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; CHANNELS * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, self.height, self.width]
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.pixels[(c * self.height + row) * self.width + col]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.pixels.len() != CHANNELS * self.height * self.width {
            return Err(ImagingError::ShapeMismatch(format!(
                "{} pixels for shape 3×{}×{}",
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(v) = self.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Stacks consecutive non-overlapping windows of `window` packets into
/// images. Trailing packets that do not fill a window are dropped.
pub fn build_images(features: &[FeatureVector], window: usize, norm: &NormalizationSpec) -> Vec<CsiImage> {
    assert!(window >= 1, "window must be at least 1");
    features
        .chunks_exact(window)
        .map(|rows| {
            let mut img = CsiImage::zeros(window, IMAGE_WIDTH);
            for c in 0..CHANNELS {
                for (r, f) in rows.iter().enumerate() {
                    let dst = &mut img.pixels[(c * window + r) * IMAGE_WIDTH..][..IMAGE_WIDTH];
                    for (d, &v) in dst.iter_mut().zip(f.channel(c)) {
                        *d = norm.normalize(c, v);
                    }
                }
            }
            img
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: CsiImage,
    pub site_id: u32,
    pub coords: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub site_id: u32,
    pub coords: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `"simulator"` or `"capture"`.
    pub source: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub sites: Vec<Site>,
    pub normalization: NormalizationSpec,
    pub geometry: AntennaGeometry,
    pub provenance: Provenance,
}

/// How [`split_train_test`] partitions a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Per-site stratified split of images.
    Image,
    /// Whole sites go to one side.
    Site,
}

impl Dataset {
    /// Images of every site from its feature sequence; `sites[i]` owns `features[i]`.
    pub fn from_site_features(
        sites: Vec<Site>,
        features: &[Vec<FeatureVector>],
        window: usize,
        normalization: NormalizationSpec,
        geometry: AntennaGeometry,
        provenance: Provenance,
    ) -> Result<Self, ImagingError> {
        if sites.len() != features.len() {
            return Err(ImagingError::Invalid(format!(
                "{} sites but {} feature sequences",
                sites.len(),
                features.len()
            )));
        }
        if window == 0 {
            return Err(ImagingError::Invalid("window must be at least 1".into()));
        }
        let images = sites
            .iter()
            .zip(features)
            .flat_map(|(site, f)| {
                build_images(f, window, &normalization).into_iter().map(|image| LabeledImage {
                    image,
                    site_id: site.site_id,
                    coords: site.coords,
                })
            })
            .collect();
        let d = Self {
            images,
            sites,
            normalization,
            geometry,
            provenance,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        for (i, s) in self.sites.iter().enumerate() {
            if self.sites[..i].iter().any(|o| o.coords == s.coords) {
                return Err(ImagingError::Invalid(format!("site {} duplicates coordinates", s.site_id)));
            }
            if self.sites[..i].iter().any(|o| o.site_id == s.site_id) {
                return Err(ImagingError::Invalid(format!("site id {} repeated", s.site_id)));
            }
        }
        for img in &self.images {
            if !self.sites.iter().any(|s| s.site_id == img.site_id) {
                return Err(ImagingError::Invalid(format!("image labeled with unknown site {}", img.site_id)));
            }
            img.image.validate()?;
        }
        if let Some(first) = self.images.first() {
            let shape = first.image.shape();
            if let Some(odd) = self.images.iter().find(|i| i.image.shape() != shape) {
                return Err(ImagingError::ShapeMismatch(format!(
                    "image shapes differ: {:?} vs {:?}",
                    shape,
                    odd.image.shape()
                )));
            }
        }
        Ok(())
    }

    /// `(height, width)` shared by all images.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.image.height, i.image.width))
    }

    /// Image indices per site id, in dataset order.
    pub fn indices_by_site(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = self.sites.iter().map(|s| (s.site_id, Vec::new())).collect();
        for (i, img) in self.images.iter().enumerate() {
            map.entry(img.site_id).or_default().push(i);
        }
        map
    }

    pub fn with_images(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            ..self.without_images()
        }
    }

    fn without_images(&self) -> Self {
        Self {
            images: Vec::new(),
            sites: self.sites.clone(),
            normalization: self.normalization,
            geometry: self.geometry,
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps the first `n` images of every site.
    pub fn limit_per_site(&self, n: usize) -> Self {
        let keep: Vec<usize> = self
            .indices_by_site()
            .values()
            .flat_map(|v| v.iter().take(n).copied())
            .collect();
        let mut keep = keep;
        keep.sort_unstable();
        self.with_images(&keep)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ImagingError> {
        let (height, width) = self.image_dims().unwrap_or((DEFAULT_WINDOW, IMAGE_WIDTH));
        let header = DatasetHeader {
            sites: self.sites.clone(),
            normalization: self.normalization,
            geometry: self.geometry,
            provenance: self.provenance.clone(),
            image_count: self.images.len() as u64,
            image_height: height,
            image_width: width,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ImagingError::Header(e.to_string()))?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for img in &self.images {
            w.write_all(&img.site_id.to_le_bytes())?;
            w.write_all(&img.coords[0].to_le_bytes())?;
            w.write_all(&img.coords[1].to_le_bytes())?;
            let mut buf = Vec::with_capacity(img.image.pixels.len() * 4);
            for p in &img.image.pixels {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != DATASET_MAGIC {
            return Err(ImagingError::BadMagic);
        }
        let version = u16::from_le_bytes(read_array(&mut r, "version")?);
        if version != DATASET_VERSION {
            return Err(ImagingError::UnsupportedVersion {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let json_len = u32::from_le_bytes(read_array(&mut r, "header length")?) as usize;
        if r.len() < json_len {
            return Err(ImagingError::Truncated("header"));
        }
        let (json, mut rest) = r.split_at(json_len);
        let header: DatasetHeader = serde_json::from_slice(json).map_err(|e| ImagingError::Header(e.to_string()))?;

        let pixel_count = CHANNELS * header.image_height * header.image_width;
        let record_len = 4 + 16 + 4 * pixel_count;
        let expected = (header.image_count as usize)
            .checked_mul(record_len)
            .ok_or_else(|| ImagingError::Header("image count overflows".into()))?;
        if rest.len() < expected {
            return Err(ImagingError::Truncated("image records"));
        }
        if rest.len() > expected {
            return Err(ImagingError::ShapeMismatch(format!(
                "{} trailing bytes after {} image records of shape 3×{}×{}",
                rest.len() - expected,
                header.image_count,
                header.image_height,
                header.image_width
            )));
        }
        let mut images = Vec::with_capacity(header.image_count as usize);
        for _ in 0..header.image_count {
            let site_id = u32::from_le_bytes(read_array(&mut rest, "site id")?);
            let x = f64::from_le_bytes(read_array(&mut rest, "coords")?);
            let y = f64::from_le_bytes(read_array(&mut rest, "coords")?);
            let (px, tail) = rest.split_at(4 * pixel_count);
            rest = tail;
            let pixels = px
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            images.push(LabeledImage {
                image: CsiImage {
                    height: header.image_height,
                    width: header.image_width,
                    pixels,
                },
                site_id,
                coords: [x, y],
            });
        }
        let d = Self {
            images,
            sites: header.sites,
            normalization: header.normalization,
            geometry: header.geometry,
            provenance: header.provenance,
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    sites: Vec<Site>,
    normalization: NormalizationSpec,
    geometry: AntennaGeometry,
    provenance: Provenance,
    image_count: u64,
    image_height: usize,
    image_width: usize,
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &'static str) -> Result<(), ImagingError> {
    if r.len() < buf.len() {
        return Err(ImagingError::Truncated(what));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_array<const N: usize>(r: &mut &[u8], what: &'static str) -> Result<[u8; N], ImagingError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

/// Seeded split; `fraction` is the share that goes to the first (training) side.
///
/// Image mode shuffles each site's images with its own child stream and puts
/// `round(fraction · n)` of them on the training side. Site mode does the same
/// over the list of sites and keeps every image of a site together.
pub fn split_train_test(d: &Dataset, fraction: f64, seed: u64, mode: SplitMode) -> Result<(Dataset, Dataset), ImagingError> {
    let (train, test) = split_indices(d, fraction, seed, mode)?;
    let pick = |idx: &[usize]| {
        let mut out = d.with_images(idx);
        if mode == SplitMode::Site {
            let used: Vec<u32> = out.images.iter().map(|i| i.site_id).collect();
            out.sites.retain(|s| used.contains(&s.site_id));
        }
        out
    };
    Ok((pick(&train), pick(&test)))
}

/// Image indices of the two sides of [`split_train_test`], ascending.
pub fn split_indices(d: &Dataset, fraction: f64, seed: u64, mode: SplitMode) -> Result<(Vec<usize>, Vec<usize>), ImagingError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ImagingError::Config(format!("fraction {fraction} must lie in (0, 1)")));
    }
    let by_site = d.indices_by_site();
    let mut train = Vec::new();
    let mut test = Vec::new();
    match mode {
        SplitMode::Image => {
            for (&site, idx) in &by_site {
                let mut idx = idx.clone();
                idx.shuffle(&mut child_rng(seed, domain::SPLIT, site as u64));
                let n_train = (fraction * idx.len() as f64).round() as usize;
                train.extend_from_slice(&idx[..n_train]);
                test.extend_from_slice(&idx[n_train..]);
            }
        }
        SplitMode::Site => {
            let mut ids: Vec<u32> = d.sites.iter().map(|s| s.site_id).collect();
            ids.shuffle(&mut child_rng(seed, domain::SPLIT, u64::MAX));
            let n_train = (fraction * ids.len() as f64).round() as usize;
            for (k, id) in ids.iter().enumerate() {
                let side = if k < n_train { &mut train } else { &mut test };
                side.extend_from_slice(&by_site[id]);
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(ImagingError::Config(format!(
            "fraction {fraction} leaves one side empty ({} / {} images)",
            train.len(),
            test.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Writes per-packet features as CSV: `site_id,x,y` then 270 feature columns.
pub fn write_features_csv<W: Write>(w: &mut W, sites: &[Site], features: &[Vec<FeatureVector>]) -> Result<(), ImagingError> {
    let mut header = String::from("site_id,x,y");
    for name in ["amp", "aoa", "phase"] {
        for k in 0..FEATURES_PER_CHANNEL {
            header.push_str(&format!(",{name}_{k}"));
        }
    }
    writeln!(w, "{header}")?;
    for (site, f) in sites.iter().zip(features) {
        for fv in f {
            let mut line = format!("{},{},{}", site.site_id, site.coords[0], site.coords[1]);
            for v in fv.to_flat() {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

/// Reads the CSV written by [`write_features_csv`], grouping rows by site in
/// order of first appearance.
pub fn read_features_csv<R: Read>(r: R) -> Result<(Vec<Site>, Vec<Vec<FeatureVector>>), ImagingError> {
    let mut text = String::new();
    io::BufReader::new(r).read_to_string(&mut text)?;
    let mut sites: Vec<Site> = Vec::new();
    let mut features: Vec<Vec<FeatureVector>> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ImagingError::Features { line: n + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + FeatureVector::LEN {
            return Err(err(format!("expected {} fields, got {}", 3 + FeatureVector::LEN, fields.len())));
        }
        let site_id: u32 = fields[0].trim().parse().map_err(|e| err(format!("site_id: {e}")))?;
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        let coords = [nums[0], nums[1]];
        let fv = FeatureVector::from_flat(&nums[2..]).expect("length checked");
        match sites.iter().position(|s| s.site_id == site_id) {
            Some(i) => {
                if sites[i].coords != coords {
                    return Err(err(format!("site {site_id} appears with two coordinates")));
                }
                features[i].push(fv);
            }
            None => {
                sites.push(Site { site_id, coords });
                features.push(vec![fv]);
            }
        }
    }
    Ok((sites, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(amp: f64, aoa: f64, phase: f64) -> FeatureVector {
        FeatureVector {
            amp_avg: vec![amp; FEATURES_PER_CHANNEL],
            aoa: vec![aoa; FEATURES_PER_CHANNEL],
            phase_diff: vec![phase; FEATURES_PER_CHANNEL],
        }
    }

    fn small_dataset(sites: usize, per_site: usize, height: usize) -> Dataset {
        let sites_v: Vec<Site> = (0..sites)
            .map(|i| Site {
                site_id: i as u32,
                coords: [i as f64 * 1.5, 0.5],
            })
            .collect();
        let features: Vec<Vec<FeatureVector>> = (0..sites)
            .map(|s| (0..per_site * height).map(|p| fv(s as f64 + p as f64 * 0.01, 1.0, 0.2)).collect())
            .collect();
        let norm = NormalizationSpec::from_features(features.iter().flatten());
        Dataset::from_site_features(
            sites_v,
            &features,
            height,
            norm,
            AntennaGeometry::default(),
            Provenance {
                source: "simulator".into(),
                seed: Some(3),
            },
        )
        .unwrap()
    }

    #[test]
    fn image_counts() {
        let norm = NormalizationSpec::new(0.0, 1.0).unwrap();
        let f = vec![fv(0.5, 1.0, 0.0); 2970];
        assert_eq!(build_images(&f, 90, &norm).len(), 33);
        assert_eq!(build_images(&f[..100], 90, &norm).len(), 1);
        assert!(build_images(&[], 90, &norm).is_empty());
        let img = &build_images(&f, 90, &norm)[0];
        assert_eq!(img.shape(), [3, 90, 90]);
    }

    #[test]
    fn affine_endpoints() {
        let norm = NormalizationSpec::new(0.2, 0.6).unwrap();
        let f = vec![fv(0.6, PI, -PI + 1e-9)];
        let img = &build_images(&f, 1, &norm)[0];
        assert_eq!(img.at(0, 0, 0), 1.0);
        assert_eq!(img.at(1, 0, 5), 1.0);
        assert!(img.at(2, 0, 7) < 1e-6);
        let f = vec![fv(0.2, 0.0, PI)];
        let img = &build_images(&f, 1, &norm)[0];
        assert_eq!(img.at(0, 0, 0), 0.0);
        assert_eq!(img.at(1, 0, 0), 0.0);
        assert_eq!(img.at(2, 0, 0), 1.0);
        // clipping
        assert_eq!(norm.normalize(0, 5.0), 1.0);
        assert_eq!(norm.normalize(0, -5.0), 0.0);
    }

    #[test]
    fn rows_are_packets_columns_are_features() {
        let norm = NormalizationSpec::new(0.0, 10.0).unwrap();
        let mut f: Vec<FeatureVector> = (0..3).map(|r| fv(r as f64, 0.0, 0.0)).collect();
        f[1].amp_avg[4] = 9.0;
        let img = &build_images(&f, 3, &norm)[0];
        assert_eq!(img.at(0, 2, 0), 0.2);
        assert_eq!(img.at(0, 1, 4), 0.9);
    }

    #[test]
    fn persistence_round_trip_and_errors() {
        let d = small_dataset(2, 2, 4);
        assert_eq!(d.images.len(), 4);
        let bytes = d.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(ImagingError::BadMagic)));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(ImagingError::UnsupportedVersion { found: 9, .. })
        ));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ImagingError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 7]);
        assert!(matches!(Dataset::from_bytes(&long), Err(ImagingError::ShapeMismatch(_))));

        let empty = d.with_images(&[]);
        assert_eq!(Dataset::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn split_image_level() {
        let d = small_dataset(3, 33, 1);
        let (a, b) = split_train_test(&d, 0.5, 11, SplitMode::Image).unwrap();
        for ids in [a.indices_by_site(), b.indices_by_site()] {
            for v in ids.values() {
                assert!(v.len() == 16 || v.len() == 17);
            }
        }
        assert_eq!(a.images.len() + b.images.len(), 99);
        let (a2, b2) = split_train_test(&d, 0.5, 11, SplitMode::Image).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn split_site_level() {
        let d = small_dataset(26, 1, 1);
        let (a, b) = split_train_test(&d, 0.5, 4, SplitMode::Site).unwrap();
        assert_eq!(a.sites.len(), 13);
        assert_eq!(b.sites.len(), 13);
        assert!(a.sites.iter().all(|s| !b.sites.contains(s)));
    }

    #[test]
    fn split_rejects_empty_side() {
        let d = small_dataset(2, 1, 1);
        assert!(matches!(
            split_train_test(&d, 0.2, 1, SplitMode::Image),
            Err(ImagingError::Config(_))
        ));
        assert!(matches!(split_train_test(&d, 1.0, 1, SplitMode::Image), Err(ImagingError::Config(_))));
    }

    #[test]
    fn features_csv_round_trip() {
        let sites = vec![
            Site { site_id: 0, coords: [0.0, 0.0] },
            Site { site_id: 5, coords: [1.5, -0.25] },
        ];
        let features = vec![vec![fv(0.1, 0.2, 0.3)], vec![fv(1.0 / 3.0, 2.0, -1.0), fv(0.5, 0.5, 0.5)]];
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &sites, &features).unwrap();
        let (s2, f2) = read_features_csv(&buf[..]).unwrap();
        assert_eq!(s2, sites);
        assert_eq!(f2, features);
    }

    proptest! {
        #[test]
        fn image_count_is_floor_division(n in 0usize..400, window in 1usize..100) {
            let norm = NormalizationSpec::new(0.0, 1.0).unwrap();
            let f = vec![fv(0.5, 1.0, 0.0); n];
            prop_assert_eq!(build_images(&f, window, &norm).len(), n / window);
        }

        #[test]
        fn normalization_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, c in 0usize..3) {
            let norm = NormalizationSpec::new(-2.0, 3.0).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(norm.normalize(c, lo) <= norm.normalize(c, hi));
        }

        #[test]
        fn random_datasets_round_trip(seed in any::<u64>(), sites in 1usize..4, per in 0usize..3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut d = small_dataset(sites, per, 2);
            for img in d.images.iter_mut() {
                img.image.pixels.iter_mut().for_each(|p| *p = rng.random::<f32>());
            }
            d.normalization = NormalizationSpec::new(rng.random::<f64>(), 1.0 + rng.random::<f64>()).unwrap();
            prop_assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
        }
    }
}
