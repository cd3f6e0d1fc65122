//! Synthetic CSI generator.
//!
//! The received CSI of subcarrier `k` on antenna `a` is a sum of rays,
//! each contributing `g · e^{−j2π f_k τ} · e^{−j a·2πd·cosθ/λ}`, followed by
//! the per-packet phase errors of an unsynchronized receiver and additive
//! complex Gaussian noise. Amplitudes of `|LOS + noise|` are Rician by
//! construction.
//!
//! Multipath comes from a frozen field of point scatterers drawn once per run
//! ([`Environment`]). The rays at a position follow from geometry, so a site's
//! ray set is fixed across its packets and varies continuously between
//! neighbouring positions.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi::{
    extract_features, AntennaGeometry, CsiMatrix, CsiPacket, FeatureVector, NUM_ANTENNAS, NUM_SUBCARRIERS,
    SPEED_OF_LIGHT, SUBCARRIER_INDICES_20MHZ,
};
use crate::imaging::{self, Dataset, ImagingError, NormalizationSpec, Provenance, Site};
use crate::rng::{child_rng, domain};

/// OFDM subcarrier spacing for 20 MHz 802.11n.
pub const SUBCARRIER_SPACING_HZ: f64 = 312_500.0;
/// Packet interval at 1000 packets/s, microseconds.
pub const PACKET_INTERVAL_US: u64 = 1000;

pub type Position = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub gain: Complex64,
    /// Angle to the array axis, radians in [0, π].
    pub aoa: f64,
    /// Seconds.
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteLayout {
    pub site_positions: Vec<Position>,
    pub tx_position: Position,
    /// Nominal distance between adjacent sites, meters.
    pub spacing: f64,
}

impl SiteLayout {
    /// `rows × cols` grid starting at `origin`, row-major site order.
    pub fn grid(rows: usize, cols: usize, spacing: f64, origin: Position, tx_position: Position) -> Self {
        let site_positions = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| [origin[0] + c as f64 * spacing, origin[1] + r as f64 * spacing]))
            .collect();
        Self {
            site_positions,
            tx_position,
            spacing,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.site_positions.is_empty() {
            return Err(SimError::Layout("at least one site is required".into()));
        }
        for (i, a) in self.site_positions.iter().enumerate() {
            if !a[0].is_finite() || !a[1].is_finite() {
                return Err(SimError::Layout(format!("site {i} has non-finite coordinates")));
            }
            if self.site_positions[..i].contains(a) {
                return Err(SimError::Layout(format!("site {i} duplicates an earlier position")));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds of all sites and the transmitter.
    pub fn bounds(&self) -> (Position, Position) {
        let mut lo = self.tx_position;
        let mut hi = self.tx_position;
        for p in &self.site_positions {
            lo = [lo[0].min(p[0]), lo[1].min(p[1])];
            hi = [hi[0].max(p[0]), hi[1].max(p[1])];
        }
        (lo, hi)
    }
}

/// Per-packet receiver phase errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseErrorParams {
    /// Packet boundary detection delay Δt, samples.
    pub pbd_delay: f64,
    /// Carrier frequency offset Δf, Hz.
    pub cfo: f64,
    /// Sampling time offset n, samples.
    pub sample_offset: f64,
    /// Transmitter sampling period T, seconds.
    pub tx_period: f64,
    /// Receiver sampling period T′, seconds.
    pub rx_period: f64,
    /// Data symbol length T_u, seconds.
    pub symbol_len: f64,
    /// Symbol plus guard interval T_s, seconds.
    pub symbol_guard_len: f64,
    pub fft_size: f64,
    /// PLL initial phase β per antenna, radians.
    pub pll_offset: [f64; NUM_ANTENNAS],
    /// Standard deviation of the measurement noise Z, radians.
    pub noise_std: f64,
}

impl PhaseErrorParams {
    /// No offsets with 802.11n 20 MHz timing constants.
    pub fn zero() -> Self {
        Self {
            pbd_delay: 0.0,
            cfo: 0.0,
            sample_offset: 0.0,
            tx_period: 50e-9,
            rx_period: 50e-9,
            symbol_len: 3.2e-6,
            symbol_guard_len: 4.0e-6,
            fft_size: 64.0,
            pll_offset: [0.0; NUM_ANTENNAS],
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            self.tx_period,
            self.rx_period,
            self.symbol_len,
            self.symbol_guard_len,
            self.fft_size,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(SimError::Config("T, T′, T_u, T_s and N must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(SimError::Config("phase noise std must be non-negative".into()));
        }
        Ok(())
    }

    /// Packet-boundary phase slope λ_p.
    pub fn lambda_p(&self) -> f64 {
        TAU * self.pbd_delay / self.fft_size
    }

    /// Sampling-frequency-offset phase slope λ_s.
    pub fn lambda_s(&self) -> f64 {
        TAU * self.sample_offset * self.symbol_guard_len / self.symbol_len
            * ((self.rx_period - self.tx_period) / self.tx_period)
    }

    /// Carrier-frequency-offset phase λ_c.
    pub fn lambda_c(&self) -> f64 {
        TAU * self.sample_offset * self.cfo * self.symbol_guard_len
    }
}

/// Sampling ranges for the per-packet phase errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseErrorDist {
    /// Δt ~ U[0, max), samples.
    pub pbd_delay_max: f64,
    /// Δf ~ U[−max, max], Hz.
    pub cfo_max: f64,
    /// n ~ U[0, max), samples.
    pub sample_offset_max: f64,
    /// Receiver clock error ~ U[−max, max], parts per million.
    pub sfo_ppm_max: f64,
    pub tx_period: f64,
    pub symbol_len: f64,
    pub symbol_guard_len: f64,
    pub fft_size: f64,
    pub noise_std: f64,
}

impl Default for PhaseErrorDist {
    fn default() -> Self {
        Self {
            pbd_delay_max: 20.0,
            cfo_max: 20e3,
            sample_offset_max: 2000.0,
            sfo_ppm_max: 20.0,
            tx_period: 50e-9,
            symbol_len: 3.2e-6,
            symbol_guard_len: 4.0e-6,
            fft_size: 64.0,
            noise_std: 0.02,
        }
    }
}

impl PhaseErrorDist {
    /// All offsets disabled.
    pub fn none() -> Self {
        Self {
            pbd_delay_max: 0.0,
            cfo_max: 0.0,
            sample_offset_max: 0.0,
            sfo_ppm_max: 0.0,
            noise_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ranges = [self.pbd_delay_max, self.cfo_max, self.sample_offset_max, self.sfo_ppm_max];
        if ranges.iter().any(|v| !(*v >= 0.0)) {
            return Err(SimError::Config("phase error ranges must be non-negative".into()));
        }
        PhaseErrorParams {
            tx_period: self.tx_period,
            rx_period: self.tx_period,
            symbol_len: self.symbol_len,
            symbol_guard_len: self.symbol_guard_len,
            fft_size: self.fft_size,
            noise_std: self.noise_std,
            ..PhaseErrorParams::zero()
        }
        .validate()
    }

    pub fn sample<R: Rng + ?Sized>(&self, pll_offset: [f64; NUM_ANTENNAS], rng: &mut R) -> PhaseErrorParams {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let pbd_delay = uniform(0.0, self.pbd_delay_max);
        let cfo = uniform(-self.cfo_max, self.cfo_max);
        let sample_offset = uniform(0.0, self.sample_offset_max);
        let ppm = uniform(-self.sfo_ppm_max, self.sfo_ppm_max);
        PhaseErrorParams {
            pbd_delay,
            cfo,
            sample_offset,
            tx_period: self.tx_period,
            rx_period: self.tx_period * (1.0 + ppm * 1e-6),
            symbol_len: self.symbol_len,
            symbol_guard_len: self.symbol_guard_len,
            fft_size: self.fft_size,
            pll_offset,
            noise_std: self.noise_std,
        }
    }
}

/// Simulator configuration.
///
/// SNR convention: `|CSI₀|² / (2σ²)`, i.e. LOS power over total complex
/// noise power, where `σ` is the per-component noise standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// LOS amplitude |CSI₀| at `reference_distance`.
    pub los_amplitude: f64,
    /// Per-component complex noise standard deviation σ.
    pub noise_std: f64,
    /// LOS to total-NLOS power ratio, dB.
    pub k_factor_db: f64,
    pub n_nlos_rays: usize,
    /// Amplitude falls as `(reference_distance / d)^(exponent / 2)`.
    pub path_loss_exponent: f64,
    pub reference_distance: f64,
    /// Scatterers are drawn this far beyond the site/transmitter bounds, meters.
    pub scatter_margin: f64,
    pub phase_errors: PhaseErrorDist,
    /// Fixed PLL offset β per antenna for the whole run.
    pub pll_offset: [f64; NUM_ANTENNAS],
    pub packets_per_site: usize,
    /// Per-packet Gaussian displacement of the receiver, meters per axis.
    /// Models small body and hand movement during a survey; 0 keeps the
    /// receiver fixed.
    pub rx_jitter_std: f64,
    pub seed: u64,
    pub geometry: AntennaGeometry,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            los_amplitude: 1.0,
            noise_std: Self::noise_std_for_snr(1.0, 25.0),
            k_factor_db: 6.0,
            n_nlos_rays: 8,
            path_loss_exponent: 2.0,
            reference_distance: 3.0,
            scatter_margin: 3.0,
            phase_errors: PhaseErrorDist::default(),
            pll_offset: [0.0, 1.3, -0.8],
            packets_per_site: 2970,
            rx_jitter_std: 0.05,
            seed: 1,
            geometry: AntennaGeometry::default(),
        }
    }
}

impl SimConfig {
    pub fn noise_std_for_snr(los_amplitude: f64, snr_db: f64) -> f64 {
        los_amplitude / (2.0 * 10f64.powf(snr_db / 10.0)).sqrt()
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * (self.los_amplitude.powi(2) / (2.0 * self.noise_std.powi(2))).log10()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.noise_std >= 0.0) {
            return Err(SimError::Config("noise_std must be non-negative".into()));
        }
        if !(self.los_amplitude >= 0.0) {
            return Err(SimError::Config("los_amplitude must be non-negative".into()));
        }
        if self.packets_per_site == 0 {
            return Err(SimError::Config("packets_per_site must be at least 1".into()));
        }
        if !(self.reference_distance > 0.0) {
            return Err(SimError::Config("reference_distance must be positive".into()));
        }
        if !(self.rx_jitter_std >= 0.0) || !self.rx_jitter_std.is_finite() {
            return Err(SimError::Config("rx_jitter_std must be non-negative".into()));
        }
        self.geometry
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.phase_errors.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scatterer {
    position: Position,
    coef: Complex64,
}

/// Frozen propagation environment: transmitter plus point scatterers.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    tx: Position,
    scatterers: Vec<Scatterer>,
    los_amplitude: f64,
    k_factor_db: f64,
    path_loss_exponent: f64,
    reference_distance: f64,
    carrier_freq: f64,
}

fn distance(a: Position, b: Position) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Angle between the array axis (+x) and the direction from `rx` towards `src`.
fn arrival_angle(rx: Position, src: Position) -> f64 {
    let d = distance(rx, src);
    if d == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    ((src[0] - rx[0]) / d).clamp(-1.0, 1.0).acos()
}

impl Environment {
    pub fn new(layout: &SiteLayout, cfg: &SimConfig) -> Self {
        let mut rng = child_rng(cfg.seed, domain::ENVIRONMENT, 0);
        let (lo, hi) = layout.bounds();
        let m = cfg.scatter_margin;
        let scatterers = (0..cfg.n_nlos_rays)
            .map(|_| {
                let x = rng.random_range(lo[0] - m..=hi[0] + m);
                let y = rng.random_range(lo[1] - m..=hi[1] + m);
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Scatterer {
                    position: [x, y],
                    coef: Complex64::new(re, im),
                }
            })
            .collect();
        Self {
            tx: layout.tx_position,
            scatterers,
            los_amplitude: cfg.los_amplitude,
            k_factor_db: cfg.k_factor_db,
            path_loss_exponent: cfg.path_loss_exponent,
            reference_distance: cfg.reference_distance,
            carrier_freq: cfg.geometry.carrier_freq,
        }
    }

    fn path_gain(&self, length: f64) -> f64 {
        (self.reference_distance / length.max(0.1)).powf(self.path_loss_exponent / 2.0)
    }

    fn carrier_phase(&self, delay: f64) -> Complex64 {
        Complex64::from_polar(1.0, -TAU * (self.carrier_freq * delay).fract())
    }

    /// LOS ray followed by one single-bounce ray per scatterer. NLOS gains are
    /// normalized so their total power is the LOS power divided by the K-factor.
    pub fn rays_at(&self, position: Position) -> Vec<Ray> {
        let d = distance(position, self.tx);
        let los_delay = d / SPEED_OF_LIGHT;
        let los_amp = self.los_amplitude * self.path_gain(d);
        let mut rays = vec![Ray {
            gain: los_amp * self.carrier_phase(los_delay),
            aoa: arrival_angle(position, self.tx),
            delay: los_delay,
        }];

        let nlos: Vec<Ray> = self
            .scatterers
            .iter()
            .map(|s| {
                let d1 = distance(self.tx, s.position);
                let d2 = distance(s.position, position);
                let delay = (d1 + d2) / SPEED_OF_LIGHT;
                Ray {
                    gain: s.coef * self.path_gain(d1 * d2) * self.carrier_phase(delay),
                    aoa: arrival_angle(position, s.position),
                    delay,
                }
            })
            .collect();
        let nlos_power: f64 = nlos.iter().map(|r| r.gain.norm_sqr()).sum();
        if nlos_power > 0.0 {
            let target = los_amp * los_amp / 10f64.powf(self.k_factor_db / 10.0);
            let scale = (target / nlos_power).sqrt();
            rays.extend(nlos.into_iter().map(|r| Ray {
                gain: r.gain * scale,
                ..r
            }));
        }
        rays
    }
}

/// Noiseless channel matrix from a ray set.
pub fn synthesize_channel(
    rays: &[Ray],
    geom: &AntennaGeometry,
    subcarrier_indices: &[i32; NUM_SUBCARRIERS],
) -> CsiMatrix {
    let mut ch = [[Complex64::new(0.0, 0.0); NUM_SUBCARRIERS]; NUM_ANTENNAS];
    for ray in rays {
        let steer = -TAU * geom.spacing * ray.aoa.cos() / geom.wavelength;
        for (a, row) in ch.iter_mut().enumerate() {
            for (k, h) in row.iter_mut().enumerate() {
                let f = subcarrier_indices[k] as f64 * SUBCARRIER_SPACING_HZ;
                let phase = a as f64 * steer - TAU * f * ray.delay;
                *h += ray.gain * Complex64::from_polar(1.0, phase);
            }
        }
    }
    ch
}

/// Rotates subcarrier `i` of every antenna by `(λ_p + λ_s)·mᵢ + λ_c + β_a + Z`.
pub fn apply_phase_errors<R: Rng + ?Sized>(
    ch: &CsiMatrix,
    p: &PhaseErrorParams,
    subcarrier_indices: &[i32; NUM_SUBCARRIERS],
    rng: &mut R,
) -> CsiMatrix {
    let slope = p.lambda_p() + p.lambda_s();
    let common = p.lambda_c();
    let noise = (p.noise_std > 0.0).then(|| Normal::new(0.0, p.noise_std).expect("finite std"));
    let mut out = *ch;
    for (a, row) in out.iter_mut().enumerate() {
        for (k, h) in row.iter_mut().enumerate() {
            let z = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            let phase = slope * subcarrier_indices[k] as f64 + common + p.pll_offset[a] + z;
            *h *= Complex64::from_polar(1.0, phase);
        }
    }
    out
}

const NOISE_FLOOR_DBM: i32 = -92;
const AGC_DB: u32 = 60;

/// One packet at a position with a fixed ray set.
pub fn simulate_packet<R: Rng + ?Sized>(rays: &[Ray], cfg: &SimConfig, timestamp: u64, rng: &mut R) -> CsiPacket {
    let indices = SUBCARRIER_INDICES_20MHZ;
    let clean = synthesize_channel(rays, &cfg.geometry, &indices);
    let params = cfg.phase_errors.sample(cfg.pll_offset, rng);
    let mut csi = apply_phase_errors(&clean, &params, &indices, rng);
    if cfg.noise_std > 0.0 {
        for h in csi.iter_mut().flatten() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *h += Complex64::new(re, im) * cfg.noise_std;
        }
    }

    // RSSI such that RSS − 44 − AGC lands at noise floor + per-antenna SNR.
    let noise_pwr = (2.0 * cfg.noise_std * cfg.noise_std).max(1e-30);
    let mut rssi = [0i32; NUM_ANTENNAS];
    for (r, row) in rssi.iter_mut().zip(csi.iter()) {
        let p = row.iter().map(|h| h.norm_sqr()).sum::<f64>() / NUM_SUBCARRIERS as f64;
        let snr = 10.0 * (p.max(1e-30) / noise_pwr).log10();
        *r = (NOISE_FLOOR_DBM as f64 + snr + 44.0 + AGC_DB as f64).round().clamp(0.0, 255.0) as i32;
    }
    CsiPacket {
        csi,
        subcarrier_indices: indices,
        rssi,
        noise_floor: NOISE_FLOOR_DBM,
        agc: AGC_DB,
        timestamp,
        rate: 0x4101,
    }
}

/// `count` consecutive packets at one position. With receiver jitter each
/// packet sees the rays of its own displaced position.
pub fn simulate_site<R: Rng + ?Sized>(env: &Environment, position: Position, cfg: &SimConfig, count: usize, rng: &mut R) -> Vec<CsiPacket> {
    let fixed = env.rays_at(position);
    (0..count as u64)
        .map(|i| {
            let jittered;
            let rays = if cfg.rx_jitter_std > 0.0 {
                let dx: f64 = StandardNormal.sample(rng);
                let dy: f64 = StandardNormal.sample(rng);
                jittered = env.rays_at([position[0] + cfg.rx_jitter_std * dx, position[1] + cfg.rx_jitter_std * dy]);
                &jittered
            } else {
                &fixed
            };
            simulate_packet(rays, cfg, i * PACKET_INTERVAL_US, rng)
        })
        .collect()
}

/// Feature vectors for every position, each from its own child stream
/// `(cfg.seed, stream_domain, position index)`.
pub fn simulate_features(
    env: &Environment,
    positions: &[Position],
    cfg: &SimConfig,
    stream_domain: u64,
) -> Result<Vec<Vec<FeatureVector>>, SimError> {
    cfg.validate()?;
    let one = |i: usize| -> Vec<FeatureVector> {
        let mut rng = child_rng(cfg.seed, stream_domain, i as u64);
        simulate_site(env, positions[i], cfg, cfg.packets_per_site, &mut rng)
            .iter()
            .map(|pkt| extract_features(pkt, &cfg.geometry).expect("simulated packets are well-formed"))
            .collect()
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..positions.len()).into_par_iter().map(one).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..positions.len()).map(one).collect())
    }
}

/// Simulates every site of `layout` and assembles 90-row images with a
/// dataset-wide amplitude range.
pub fn simulate_dataset(layout: &SiteLayout, cfg: &SimConfig) -> Result<Dataset, SimError> {
    simulate_dataset_with(layout, cfg, imaging::DEFAULT_WINDOW, None)
}

/// As [`simulate_dataset`] with an explicit image height and optionally a
/// fixed normalization (for test positions that must match training data).
pub fn simulate_dataset_with(
    layout: &SiteLayout,
    cfg: &SimConfig,
    window: usize,
    norm: Option<NormalizationSpec>,
) -> Result<Dataset, SimError> {
    layout.validate()?;
    let env = Environment::new(layout, cfg);
    let features = simulate_features(&env, &layout.site_positions, cfg, domain::TRAIN_SITE)?;
    let norm = match norm {
        Some(n) => n,
        None => NormalizationSpec::from_features(features.iter().flatten()),
    };
    let sites = layout
        .site_positions
        .iter()
        .enumerate()
        .map(|(i, p)| Site {
            site_id: i as u32,
            coords: *p,
        })
        .collect();
    let provenance = Provenance {
        source: "simulator".into(),
        seed: Some(cfg.seed),
    };
    Ok(Dataset::from_site_features(sites, &features, window, norm, cfg.geometry, provenance)?)
}
