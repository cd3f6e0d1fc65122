//! CSI feature mathematics.
//!
//! A packet carries one complex channel estimate per (antenna, subcarrier).
//! From every antenna pair (1,2), (1,3), (2,3) we derive, per subcarrier,
//! the average amplitude, the wrapped phase difference and the angle of
//! arrival implied by that phase difference. Per-packet timing and frequency
//! offsets are common to all antennas of one NIC, so they cancel in the
//! difference while the raw per-antenna phase stays unusable.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_ANTENNAS: usize = 3;
pub const NUM_SUBCARRIERS: usize = 30;
/// Antenna pairs in feature order.
pub const ANTENNA_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
/// Features per channel per packet: 3 pairs × 30 subcarriers.
pub const FEATURES_PER_CHANNEL: usize = ANTENNA_PAIRS.len() * NUM_SUBCARRIERS;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Grouped subcarrier indices reported by the Intel 5300 on a 20 MHz channel.
pub const SUBCARRIER_INDICES_20MHZ: [i32; NUM_SUBCARRIERS] = [
    -28, -26, -24, -22, -20, -18, -16, -14, -12, -10, -8, -6, -4, -2, -1, 1, 3, 5, 7, 9, 11, 13,
    15, 17, 19, 21, 23, 25, 27, 28,
];

pub type ComplexSample = Complex64;
pub type CsiMatrix = [[Complex64; NUM_SUBCARRIERS]; NUM_ANTENNAS];

#[derive(Debug, Error, PartialEq)]
pub enum CsiError {
    #[error("expected {expected} antenna rows, got {got}")]
    AntennaCount { expected: usize, got: usize },
    #[error("antenna row {row} has {got} subcarriers, expected {expected}")]
    SubcarrierCount { row: usize, expected: usize, got: usize },
    #[error("subcarrier indices must be strictly increasing")]
    UnorderedSubcarriers,
    #[error("non-finite CSI value at antenna {antenna}, subcarrier {subcarrier}")]
    NonFinite { antenna: usize, subcarrier: usize },
    #[error("invalid antenna geometry: {0}")]
    Geometry(&'static str),
}

/// Receive-array geometry for a uniform linear array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntennaGeometry {
    /// Adjacent-antenna spacing in meters.
    pub spacing: f64,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    /// Carrier frequency in Hz.
    pub carrier_freq: f64,
}

impl AntennaGeometry {
    pub const DEFAULT_CARRIER_HZ: f64 = 5.58e9;

    pub fn new(spacing: f64, carrier_freq: f64) -> Result<Self, CsiError> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(CsiError::Geometry("spacing must be positive"));
        }
        if !(carrier_freq > 0.0) || !carrier_freq.is_finite() {
            return Err(CsiError::Geometry("carrier frequency must be positive"));
        }
        Ok(Self {
            spacing,
            wavelength: SPEED_OF_LIGHT / carrier_freq,
            carrier_freq,
        })
    }

    /// Half-wavelength array at the given carrier.
    pub fn half_wavelength(carrier_freq: f64) -> Self {
        let wavelength = SPEED_OF_LIGHT / carrier_freq;
        Self {
            spacing: wavelength / 2.0,
            wavelength,
            carrier_freq,
        }
    }

    pub fn validate(&self) -> Result<(), CsiError> {
        if !(self.spacing > 0.0) || !(self.wavelength > 0.0) || !(self.carrier_freq > 0.0) {
            return Err(CsiError::Geometry("spacing, wavelength and carrier must be positive"));
        }
        Ok(())
    }
}

impl Default for AntennaGeometry {
    /// 5.58 GHz carrier with half-wavelength spacing (≈2.69 cm).
    fn default() -> Self {
        Self::half_wavelength(Self::DEFAULT_CARRIER_HZ)
    }
}

/// One received frame: 3 × 30 complex channel matrix plus radio metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiPacket {
    /// Antenna-major, subcarrier-minor.
    pub csi: CsiMatrix,
    pub subcarrier_indices: [i32; NUM_SUBCARRIERS],
    /// Per-antenna RSSI, dB.
    pub rssi: [i32; NUM_ANTENNAS],
    /// dBm.
    pub noise_floor: i32,
    pub agc: u32,
    /// Microseconds.
    pub timestamp: u64,
    pub rate: u16,
}

impl CsiPacket {
    /// Packet with default metadata and the 20 MHz subcarrier grid.
    pub fn from_matrix(csi: CsiMatrix) -> Self {
        Self {
            csi,
            subcarrier_indices: SUBCARRIER_INDICES_20MHZ,
            rssi: [0; NUM_ANTENNAS],
            noise_floor: -92,
            agc: 0,
            timestamp: 0,
            rate: 0,
        }
    }

    /// Builds a packet from dynamically sized rows, checking the 3 × 30 shape.
    pub fn from_rows(rows: &[Vec<Complex64>], subcarrier_indices: &[i32]) -> Result<Self, CsiError> {
        if rows.len() != NUM_ANTENNAS {
            return Err(CsiError::AntennaCount {
                expected: NUM_ANTENNAS,
                got: rows.len(),
            });
        }
        let mut csi = [[Complex64::new(0.0, 0.0); NUM_SUBCARRIERS]; NUM_ANTENNAS];
        for (row, values) in rows.iter().enumerate() {
            if values.len() != NUM_SUBCARRIERS {
                return Err(CsiError::SubcarrierCount {
                    row,
                    expected: NUM_SUBCARRIERS,
                    got: values.len(),
                });
            }
            csi[row].copy_from_slice(values);
        }
        if subcarrier_indices.len() != NUM_SUBCARRIERS {
            return Err(CsiError::SubcarrierCount {
                row: NUM_ANTENNAS,
                expected: NUM_SUBCARRIERS,
                got: subcarrier_indices.len(),
            });
        }
        let mut indices = [0i32; NUM_SUBCARRIERS];
        indices.copy_from_slice(subcarrier_indices);
        let packet = Self {
            subcarrier_indices: indices,
            ..Self::from_matrix(csi)
        };
        packet.validate()?;
        Ok(packet)
    }

    pub fn validate(&self) -> Result<(), CsiError> {
        if self.subcarrier_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CsiError::UnorderedSubcarriers);
        }
        for (antenna, row) in self.csi.iter().enumerate() {
            for (subcarrier, s) in row.iter().enumerate() {
                if !s.re.is_finite() || !s.im.is_finite() {
                    return Err(CsiError::NonFinite { antenna, subcarrier });
                }
            }
        }
        Ok(())
    }
}

/// 270 diversified features of one packet, each channel in pair-major,
/// subcarrier-minor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub amp_avg: Vec<f64>,
    pub aoa: Vec<f64>,
    pub phase_diff: Vec<f64>,
}

impl FeatureVector {
    pub const LEN: usize = 3 * FEATURES_PER_CHANNEL;

    /// Concatenation `amp_avg ++ aoa ++ phase_diff`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.amp_avg);
        out.extend_from_slice(&self.aoa);
        out.extend_from_slice(&self.phase_diff);
        out
    }

    pub fn from_flat(values: &[f64]) -> Option<Self> {
        if values.len() != Self::LEN {
            return None;
        }
        let (amp, rest) = values.split_at(FEATURES_PER_CHANNEL);
        let (aoa, phase) = rest.split_at(FEATURES_PER_CHANNEL);
        Some(Self {
            amp_avg: amp.to_vec(),
            aoa: aoa.to_vec(),
            phase_diff: phase.to_vec(),
        })
    }

    /// Channel `c` (0 = amplitude, 1 = AoA, 2 = phase difference).
    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.amp_avg,
            1 => &self.aoa,
            2 => &self.phase_diff,
            _ => panic!("feature channel {c} out of range"),
        }
    }
}

/// Amplitude and principal-value phase in (−π, π]. A zero sample has phase 0.
pub fn amplitude_phase(s: ComplexSample) -> (f64, f64) {
    let amplitude = s.re.hypot(s.im);
    if amplitude == 0.0 {
        return (0.0, 0.0);
    }
    let phase = s.im.atan2(s.re);
    // atan2 returns −π for a negative real part with im = −0.0
    (amplitude, if phase <= -PI { PI } else { phase })
}

/// `phi_a − phi_b` reduced into (−π, π].
pub fn wrap_phase_difference(phi_a: f64, phi_b: f64) -> f64 {
    wrap_phase(phi_a - phi_b)
}

/// Reduces an angle into (−π, π]; values already in range are returned unchanged.
pub fn wrap_phase(d: f64) -> f64 {
    if d > -PI && d <= PI {
        return d;
    }
    let r = d.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Angle of arrival from an inter-antenna phase difference, in [0, π].
///
/// The arccos argument is clamped to [−1, 1]; noise can push
/// `|Δφ·λ / (2πd)|` past 1 and the angle must stay defined.
pub fn estimate_aoa(delta_phi: f64, geom: &AntennaGeometry) -> f64 {
    let arg = delta_phi * geom.wavelength / (TAU * geom.spacing);
    arg.clamp(-1.0, 1.0).acos()
}

pub fn average_amplitude(amp_a: f64, amp_b: f64) -> f64 {
    0.5 * (amp_a + amp_b)
}

/// Builds the 270-value feature vector of one packet.
pub fn extract_features(pkt: &CsiPacket, geom: &AntennaGeometry) -> Result<FeatureVector, CsiError> {
    pkt.validate()?;
    geom.validate()?;

    let mut polar = [[(0.0, 0.0); NUM_SUBCARRIERS]; NUM_ANTENNAS];
    for (row, out) in pkt.csi.iter().zip(polar.iter_mut()) {
        for (s, p) in row.iter().zip(out.iter_mut()) {
            *p = amplitude_phase(*s);
        }
    }

    let mut amp_avg = Vec::with_capacity(FEATURES_PER_CHANNEL);
    let mut aoa = Vec::with_capacity(FEATURES_PER_CHANNEL);
    let mut phase_diff = Vec::with_capacity(FEATURES_PER_CHANNEL);
    for &(a, b) in &ANTENNA_PAIRS {
        for k in 0..NUM_SUBCARRIERS {
            let (amp_a, phi_a) = polar[a][k];
            let (amp_b, phi_b) = polar[b][k];
            let dphi = wrap_phase_difference(phi_a, phi_b);
            amp_avg.push(average_amplitude(amp_a, amp_b));
            phase_diff.push(dphi);
            aoa.push(estimate_aoa(dphi, geom));
        }
    }
    Ok(FeatureVector {
        amp_avg,
        aoa,
        phase_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn amplitude_phase_examples() {
        assert_eq!(amplitude_phase(Complex64::new(1.0, 0.0)), (1.0, 0.0));
        let (a, p) = amplitude_phase(Complex64::new(0.0, 1.0));
        assert_eq!(a, 1.0);
        assert!((p - FRAC_PI_2).abs() < 1e-15);
        // atan2(4, 3) from a 30-digit evaluation
        let (a, p) = amplitude_phase(Complex64::new(3.0, 4.0));
        assert_eq!(a, 5.0);
        assert!((p - 0.927_295_218_001_612_2).abs() < 1e-15);
        assert_eq!(amplitude_phase(Complex64::new(0.0, 0.0)), (0.0, 0.0));
        assert_eq!(amplitude_phase(Complex64::new(-1.0, -0.0)).1, PI);
    }

    #[test]
    fn wrap_examples() {
        assert!((wrap_phase_difference(0.5, 0.2) - 0.3).abs() < 1e-15);
        assert!((wrap_phase_difference(0.1, 6.2) - 0.183_185_307_179_586_48).abs() < 1e-12);
        assert_eq!(wrap_phase_difference(PI, -PI), 0.0);
        assert_eq!(wrap_phase(-PI), PI);
    }

    #[test]
    fn aoa_examples() {
        let g = AntennaGeometry::default();
        assert!((estimate_aoa(0.0, &g) - FRAC_PI_2).abs() < 1e-15);
        assert!(estimate_aoa(PI, &g).abs() < 1e-7);
        let g = AntennaGeometry {
            spacing: 0.0268,
            wavelength: 0.053726,
            carrier_freq: 5.58e9,
        };
        // arccos(0.501175373134328...) from a 30-digit evaluation
        assert!((estimate_aoa(FRAC_PI_2, &g) - 1.045_839_814_630_753_6).abs() < 1e-12);
        // out-of-range arguments clamp instead of producing NaN
        let narrow = AntennaGeometry {
            spacing: 0.01,
            ..g
        };
        assert_eq!(estimate_aoa(PI, &narrow), 0.0);
        assert_eq!(estimate_aoa(-PI, &narrow), PI);
    }

    #[test]
    fn average_amplitude_examples() {
        assert_eq!(average_amplitude(2.0, 4.0), 3.0);
        assert_eq!(average_amplitude(0.0, 0.0), 0.0);
        assert_eq!(average_amplitude(1.5, 2.5), 2.0);
    }

    #[test]
    fn identical_rows_give_broadside() {
        let mut csi = [[Complex64::new(0.0, 0.0); NUM_SUBCARRIERS]; NUM_ANTENNAS];
        for row in csi.iter_mut() {
            for (k, s) in row.iter_mut().enumerate() {
                *s = Complex64::from_polar(1.0 + k as f64 * 0.1, 0.2 * k as f64 - 2.0);
            }
        }
        let f = extract_features(&CsiPacket::from_matrix(csi), &AntennaGeometry::default()).unwrap();
        assert_eq!(f.to_flat().len(), 270);
        assert!(f.phase_diff.iter().all(|&d| d == 0.0));
        assert!(f.aoa.iter().all(|&a| (a - FRAC_PI_2).abs() < 1e-15));
        assert!((f.amp_avg[3] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn single_path_packet_recovers_angle() {
        // Inverse of the AoA relation: adjacent antennas differ by 2πd·cosθ/λ.
        let g = AntennaGeometry::default();
        let theta: f64 = 1.1;
        let step = TAU * g.spacing * theta.cos() / g.wavelength;
        let mut csi = [[Complex64::new(0.0, 0.0); NUM_SUBCARRIERS]; NUM_ANTENNAS];
        for (a, row) in csi.iter_mut().enumerate() {
            for (k, s) in row.iter_mut().enumerate() {
                *s = Complex64::from_polar(1.0, 0.3 * k as f64 - a as f64 * step);
            }
        }
        let f = extract_features(&CsiPacket::from_matrix(csi), &g).unwrap();
        for k in 0..NUM_SUBCARRIERS {
            assert!((f.aoa[k] - theta).abs() < 1e-6, "pair (1,2)");
            assert!((f.aoa[2 * NUM_SUBCARRIERS + k] - theta).abs() < 1e-6, "pair (2,3)");
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let rows = vec![vec![Complex64::new(1.0, 0.0); NUM_SUBCARRIERS]; 2];
        assert_eq!(
            CsiPacket::from_rows(&rows, &SUBCARRIER_INDICES_20MHZ).unwrap_err(),
            CsiError::AntennaCount { expected: 3, got: 2 }
        );
        let mut rows = vec![vec![Complex64::new(1.0, 0.0); NUM_SUBCARRIERS]; 3];
        rows[1].pop();
        assert!(matches!(
            CsiPacket::from_rows(&rows, &SUBCARRIER_INDICES_20MHZ),
            Err(CsiError::SubcarrierCount { row: 1, .. })
        ));
        let rows = vec![vec![Complex64::new(1.0, 0.0); NUM_SUBCARRIERS]; 3];
        let mut idx = SUBCARRIER_INDICES_20MHZ;
        idx.swap(0, 1);
        assert_eq!(CsiPacket::from_rows(&rows, &idx).unwrap_err(), CsiError::UnorderedSubcarriers);

        let mut pkt = CsiPacket::from_rows(&rows, &SUBCARRIER_INDICES_20MHZ).unwrap();
        pkt.csi[2][7].re = f64::NAN;
        assert_eq!(
            extract_features(&pkt, &AntennaGeometry::default()).unwrap_err(),
            CsiError::NonFinite { antenna: 2, subcarrier: 7 }
        );
    }

    proptest! {
        #[test]
        fn wrap_lands_in_half_open_interval(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let d = wrap_phase_difference(a, b);
            prop_assert!(d > -PI && d <= PI);
            prop_assert_eq!(wrap_phase_difference(d, 0.0), d);
            // congruent to a − b modulo 2π
            let k = ((a - b - d) / TAU).round();
            prop_assert!((a - b - d - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn aoa_is_non_increasing(x in -PI..PI, dx in 0.0f64..1.0) {
            let g = AntennaGeometry::default();
            let y = (x + dx).min(PI);
            prop_assert!(estimate_aoa(y, &g) <= estimate_aoa(x, &g));
            let t = estimate_aoa(x, &g);
            prop_assert!((0.0..=PI).contains(&t));
        }

        #[test]
        fn polar_round_trip(re in -1e3f64..1e3, im in -1e3f64..1e3) {
            let (a, p) = amplitude_phase(Complex64::new(re, im));
            let back = Complex64::from_polar(a, p);
            let scale = a.max(1e-300);
            prop_assert!((back.re - re).abs() / scale < 1e-9);
            prop_assert!((back.im - im).abs() / scale < 1e-9);
        }

        #[test]
        fn features_are_pure_and_bounded(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut csi = [[Complex64::new(0.0, 0.0); NUM_SUBCARRIERS]; NUM_ANTENNAS];
            for row in csi.iter_mut() {
                for s in row.iter_mut() {
                    *s = Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                }
            }
            let pkt = CsiPacket::from_matrix(csi);
            let g = AntennaGeometry::default();
            let f1 = extract_features(&pkt, &g).unwrap();
            let f2 = extract_features(&pkt, &g).unwrap();
            prop_assert_eq!(
                f1.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                f2.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert!(f1.aoa.iter().all(|&v| (0.0..=PI).contains(&v)));
            prop_assert!(f1.phase_diff.iter().all(|&v| v > -PI && v <= PI));
            prop_assert!(f1.amp_avg.iter().all(|&v| v >= 0.0));
        }
    }
}
