//! Intel 5300 CSI Tool capture files (`.dat`).
//!
//! A capture is a sequence of frames: a big-endian `u16` length, a one-byte
//! code, then `length − 1` body bytes. Code `0xBB` is a beamforming entry
//! carrying the CSI matrix; every other code is skipped. The entry body is a
//! 20-byte little-endian header followed by a bit-packed payload: for each
//! of 30 subcarriers, 3 padding bits, then `n_rx · n_tx` complex values as
//! consecutive 8-bit two's-complement real and imaginary parts.
//!
//! See `docs/bfee-format.md` for offsets.

use num_complex::Complex64;
use thiserror::Error;

use crate::csi::{CsiPacket, NUM_ANTENNAS, NUM_SUBCARRIERS, SUBCARRIER_INDICES_20MHZ};

pub const BFEE_CODE: u8 = 0xBB;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum BfeeError {
    #[error("entry body is {got} bytes, shorter than the {HEADER_LEN}-byte header")]
    ShortHeader { got: usize },
    #[error("payload length field is {len} but the matrix needs {expected} bytes")]
    LengthMismatch { len: u16, expected: u16 },
    #[error("entry body holds {got} payload bytes, header declares {len}")]
    ShortPayload { len: u16, got: usize },
    #[error("antenna count out of range: n_rx={n_rx}, n_tx={n_tx}")]
    AntennaRange { n_rx: u8, n_tx: u8 },
    #[error("antenna selection {antenna_sel:#04x} is not a permutation for n_rx={n_rx}")]
    InvalidPermutation { antenna_sel: u8, n_rx: u8 },
    #[error("csi_raw holds {got} values, expected {expected}")]
    PayloadShape { expected: usize, got: usize },
    #[error("unsupported shape for packet conversion: n_rx={n_rx} (need 3)")]
    UnsupportedShape { n_rx: u8 },
    #[error("frame at byte {offset}: {source}")]
    Frame {
        offset: usize,
        #[source]
        source: Box<BfeeError>,
    },
}

/// One decoded beamforming entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BfeeEntry {
    /// Low 32 bits of the NIC clock, microseconds.
    pub timestamp_low: u32,
    pub bfee_count: u16,
    pub n_rx: u8,
    pub n_tx: u8,
    pub rssi_a: u8,
    pub rssi_b: u8,
    pub rssi_c: u8,
    /// Noise floor, dBm.
    pub noise: i8,
    pub agc: u8,
    /// Three 2-bit receive-chain selectors in bits 0-1, 2-3, 4-5.
    pub antenna_sel: u8,
    /// Payload length field as stored.
    pub len: u16,
    pub rate: u16,
    /// `30 × (n_rx · n_tx)` values, subcarrier-major. Within a subcarrier
    /// value `j` belongs to receive chain `j / n_tx`, transmit stream `j % n_tx`.
    pub csi_raw: Vec<(i8, i8)>,
}

impl BfeeEntry {
    /// Payload bytes needed for the given antenna counts.
    pub fn computed_len(n_rx: u8, n_tx: u8) -> u16 {
        let bits = 30 * (n_rx as usize * n_tx as usize * 16 + 3);
        bits.div_ceil(8) as u16
    }

    /// Entry with consistent `len` and a zero payload.
    pub fn zeroed(n_rx: u8, n_tx: u8) -> Self {
        Self {
            timestamp_low: 0,
            bfee_count: 0,
            n_rx,
            n_tx,
            rssi_a: 0,
            rssi_b: 0,
            rssi_c: 0,
            noise: -92,
            agc: 0,
            antenna_sel: 0b10_01_00,
            len: Self::computed_len(n_rx, n_tx),
            rate: 0,
            csi_raw: vec![(0, 0); NUM_SUBCARRIERS * n_rx as usize * n_tx as usize],
        }
    }

    /// Receive-chain selectors, one per chain (values 0..=3 as stored).
    pub fn perm(&self) -> [u8; 3] {
        [
            self.antenna_sel & 0x3,
            (self.antenna_sel >> 2) & 0x3,
            (self.antenna_sel >> 4) & 0x3,
        ]
    }

    pub fn set_perm(&mut self, perm: [u8; 3]) {
        self.antenna_sel = (self.antenna_sel & 0xc0) | (perm[0] & 3) | ((perm[1] & 3) << 2) | ((perm[2] & 3) << 4);
    }

    pub fn raw(&self, subcarrier: usize, rx: usize, tx: usize) -> (i8, i8) {
        let per = self.n_rx as usize * self.n_tx as usize;
        self.csi_raw[subcarrier * per + rx * self.n_tx as usize + tx]
    }

    pub fn validate(&self) -> Result<(), BfeeError> {
        if !(1..=3).contains(&self.n_rx) || !(1..=3).contains(&self.n_tx) {
            return Err(BfeeError::AntennaRange {
                n_rx: self.n_rx,
                n_tx: self.n_tx,
            });
        }
        let expected = Self::computed_len(self.n_rx, self.n_tx);
        if self.len != expected {
            return Err(BfeeError::LengthMismatch { len: self.len, expected });
        }
        let perm = self.perm();
        let used = &perm[..self.n_rx as usize];
        let distinct = used.iter().enumerate().all(|(i, p)| *p < 3 && !used[..i].contains(p));
        if !distinct {
            return Err(BfeeError::InvalidPermutation {
                antenna_sel: self.antenna_sel,
                n_rx: self.n_rx,
            });
        }
        let values = NUM_SUBCARRIERS * self.n_rx as usize * self.n_tx as usize;
        if self.csi_raw.len() != values {
            return Err(BfeeError::PayloadShape {
                expected: values,
                got: self.csi_raw.len(),
            });
        }
        Ok(())
    }
}

/// Result of scanning a capture stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Capture {
    pub entries: Vec<BfeeEntry>,
    /// Frames whose code was not `0xBB`.
    pub skipped_frames: usize,
    /// Set when the stream ends inside a frame.
    pub truncated: Option<TruncatedTail>,
}

/// End-of-stream inside a frame; everything before `offset` was parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncatedTail {
    pub offset: usize,
    pub parsed_entries: usize,
}

fn read_u16_le(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

/// Decodes a code-0xBB frame body.
pub fn parse_entry(body: &[u8]) -> Result<BfeeEntry, BfeeError> {
    if body.len() < HEADER_LEN {
        return Err(BfeeError::ShortHeader { got: body.len() });
    }
    let n_rx = body[8];
    let n_tx = body[9];
    if !(1..=3).contains(&n_rx) || !(1..=3).contains(&n_tx) {
        return Err(BfeeError::AntennaRange { n_rx, n_tx });
    }
    let len = read_u16_le(body, 16);
    let expected = BfeeEntry::computed_len(n_rx, n_tx);
    if len != expected {
        return Err(BfeeError::LengthMismatch { len, expected });
    }
    let payload = &body[HEADER_LEN..];
    if payload.len() < len as usize {
        return Err(BfeeError::ShortPayload { len, got: payload.len() });
    }
    let payload = &payload[..len as usize];

    // Bytes past the payload read as zero, matching the reference reader's
    // behaviour at the final subcarrier.
    let byte = |i: usize| -> u16 { payload.get(i).copied().unwrap_or(0) as u16 };
    let read_i8 = |bit: usize| -> i8 {
        let (i, r) = (bit / 8, bit % 8);
        (((byte(i) >> r) | (byte(i + 1) << (8 - r))) & 0xff) as u8 as i8
    };

    let per = n_rx as usize * n_tx as usize;
    let mut csi_raw = Vec::with_capacity(NUM_SUBCARRIERS * per);
    let mut index = 0usize;
    for _ in 0..NUM_SUBCARRIERS {
        index += 3;
        for _ in 0..per {
            csi_raw.push((read_i8(index), read_i8(index + 8)));
            index += 16;
        }
    }

    let entry = BfeeEntry {
        timestamp_low: u32::from_le_bytes([body[0], body[1], body[2], body[3]]),
        bfee_count: read_u16_le(body, 4),
        n_rx,
        n_tx,
        rssi_a: body[10],
        rssi_b: body[11],
        rssi_c: body[12],
        noise: body[13] as i8,
        agc: body[14],
        antenna_sel: body[15],
        len,
        rate: read_u16_le(body, 18),
        csi_raw,
    };
    entry.validate()?;
    Ok(entry)
}

/// Encodes an entry body (without the frame prefix).
pub fn encode_entry(e: &BfeeEntry) -> Result<Vec<u8>, BfeeError> {
    e.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + e.len as usize);
    out.extend_from_slice(&e.timestamp_low.to_le_bytes());
    out.extend_from_slice(&e.bfee_count.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&[e.n_rx, e.n_tx, e.rssi_a, e.rssi_b, e.rssi_c, e.noise as u8, e.agc, e.antenna_sel]);
    out.extend_from_slice(&e.len.to_le_bytes());
    out.extend_from_slice(&e.rate.to_le_bytes());

    let mut payload = vec![0u8; e.len as usize];
    let mut write_u8 = |bit: usize, v: u8| {
        let (i, r) = (bit / 8, bit % 8);
        let wide = (v as u16) << r;
        payload[i] |= (wide & 0xff) as u8;
        if r != 0 {
            payload[i + 1] |= (wide >> 8) as u8;
        }
    };
    let mut index = 0usize;
    let per = e.n_rx as usize * e.n_tx as usize;
    for k in 0..NUM_SUBCARRIERS {
        index += 3;
        for j in 0..per {
            let (re, im) = e.csi_raw[k * per + j];
            write_u8(index, re as u8);
            write_u8(index + 8, im as u8);
            index += 16;
        }
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Wraps a body into a frame: big-endian length, code, body.
pub fn encode_frame(code: u8, body: &[u8]) -> Vec<u8> {
    let field_len = (body.len() + 1) as u16;
    let mut out = Vec::with_capacity(body.len() + 3);
    out.extend_from_slice(&field_len.to_be_bytes());
    out.push(code);
    out.extend_from_slice(body);
    out
}

/// Encodes a sequence of entries as a capture stream.
pub fn encode_stream<'a>(entries: impl IntoIterator<Item = &'a BfeeEntry>) -> Result<Vec<u8>, BfeeError> {
    let mut out = Vec::new();
    for e in entries {
        out.extend(encode_frame(BFEE_CODE, &encode_entry(e)?));
    }
    Ok(out)
}

/// Scans a whole capture. Non-0xBB frames are counted and skipped; a frame
/// cut off by end-of-input ends the scan and is reported in `truncated`.
/// A malformed 0xBB body is an error tagged with its frame offset.
pub fn parse_stream(bytes: &[u8]) -> Result<Capture, BfeeError> {
    let mut capture = Capture::default();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let truncated = TruncatedTail {
            offset,
            parsed_entries: capture.entries.len(),
        };
        if bytes.len() - offset < 3 {
            capture.truncated = Some(truncated);
            break;
        }
        let field_len = u16::from_be_bytes([bytes[offset], bytes[offset + 1]]) as usize;
        let code = bytes[offset + 2];
        let body_start = offset + 3;
        let body_end = offset + 2 + field_len;
        if field_len == 0 || body_end > bytes.len() {
            capture.truncated = Some(truncated);
            break;
        }
        if code == BFEE_CODE {
            let entry = parse_entry(&bytes[body_start..body_end]).map_err(|e| BfeeError::Frame {
                offset,
                source: Box::new(e),
            })?;
            capture.entries.push(entry);
        } else {
            capture.skipped_frames += 1;
        }
        offset = body_end;
    }
    Ok(capture)
}

fn dbinv(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

/// Total received power in dBm: RSSI combined across chains, minus the
/// fixed 44 dB offset and the AGC gain.
pub fn total_rss_dbm(e: &BfeeEntry) -> f64 {
    let mag: f64 = [e.rssi_a, e.rssi_b, e.rssi_c]
        .iter()
        .filter(|&&r| r != 0)
        .map(|&r| dbinv(r as f64))
        .sum();
    if mag == 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * mag.log10() - 44.0 - e.agc as f64
}

/// Converts an entry to a packet, using the first transmit stream.
///
/// Output row `i` is raw receive chain `perm[i]`. All values are multiplied
/// by one positive factor: the CSI is rescaled so its mean per-subcarrier
/// power equals the reported RSS, then normalized by the thermal noise floor
/// (−92 dBm when the NIC reports −127) plus quantization noise.
pub fn to_csi_packet(e: &BfeeEntry) -> Result<CsiPacket, BfeeError> {
    e.validate()?;
    if e.n_rx as usize != NUM_ANTENNAS {
        return Err(BfeeError::UnsupportedShape { n_rx: e.n_rx });
    }
    let perm = e.perm();
    let mut csi = [[Complex64::new(0.0, 0.0); NUM_SUBCARRIERS]; NUM_ANTENNAS];
    for (i, row) in csi.iter_mut().enumerate() {
        for (k, s) in row.iter_mut().enumerate() {
            let (re, im) = e.raw(k, perm[i] as usize, 0);
            *s = Complex64::new(re as f64, im as f64);
        }
    }

    let csi_pwr: f64 = csi.iter().flatten().map(|s| s.norm_sqr()).sum();
    if csi_pwr > 0.0 {
        let rssi_pwr = dbinv(total_rss_dbm(e));
        let scale = rssi_pwr / (csi_pwr / NUM_SUBCARRIERS as f64);
        let noise_db = if e.noise == -127 { -92.0 } else { e.noise as f64 };
        let quant_error_pwr = scale * (e.n_rx as f64 * e.n_tx as f64);
        let total_noise_pwr = dbinv(noise_db) + quant_error_pwr;
        let factor = (scale / total_noise_pwr).sqrt();
        if factor.is_finite() && factor > 0.0 {
            for s in csi.iter_mut().flatten() {
                *s *= factor;
            }
        }
    }

    Ok(CsiPacket {
        csi,
        subcarrier_indices: SUBCARRIER_INDICES_20MHZ,
        rssi: [e.rssi_a as i32, e.rssi_b as i32, e.rssi_c as i32],
        noise_floor: e.noise as i32,
        agc: e.agc as u32,
        timestamp: e.timestamp_low as u64,
        rate: e.rate,
    })
}

/// Quantizes a packet into a 3 × 1 entry (identity permutation). The largest
/// component maps to ±127; metadata is copied with saturation.
pub fn entry_from_packet(pkt: &CsiPacket, bfee_count: u16) -> BfeeEntry {
    let peak = pkt
        .csi
        .iter()
        .flatten()
        .map(|s| s.re.abs().max(s.im.abs()))
        .fold(0.0f64, f64::max);
    let q = |v: f64| -> i8 {
        if peak == 0.0 {
            0
        } else {
            (v / peak * 127.0).round().clamp(-128.0, 127.0) as i8
        }
    };
    let mut e = BfeeEntry::zeroed(3, 1);
    for k in 0..NUM_SUBCARRIERS {
        for rx in 0..NUM_ANTENNAS {
            let s = pkt.csi[rx][k];
            e.csi_raw[k * NUM_ANTENNAS + rx] = (q(s.re), q(s.im));
        }
    }
    let sat_u8 = |v: i32| v.clamp(0, 255) as u8;
    e.timestamp_low = pkt.timestamp as u32;
    e.bfee_count = bfee_count;
    e.rssi_a = sat_u8(pkt.rssi[0]);
    e.rssi_b = sat_u8(pkt.rssi[1]);
    e.rssi_c = sat_u8(pkt.rssi[2]);
    e.noise = pkt.noise_floor.clamp(-128, 127) as i8;
    e.agc = pkt.agc.min(255) as u8;
    e.rate = pkt.rate;
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patterned(n_rx: u8, n_tx: u8) -> BfeeEntry {
        let mut e = BfeeEntry::zeroed(n_rx, n_tx);
        for (i, v) in e.csi_raw.iter_mut().enumerate() {
            *v = ((i as i32 * 37 % 256 - 128) as i8, (i as i32 * 91 % 256 - 128) as i8);
        }
        e.timestamp_low = 0xdead_beef;
        e.bfee_count = 513;
        e.rssi_a = 40;
        e.rssi_b = 38;
        e.rssi_c = 35;
        e.noise = -90;
        e.agc = 31;
        e.rate = 0x4101;
        e
    }

    #[test]
    fn computed_len_matches_reference_formula() {
        assert_eq!(BfeeEntry::computed_len(3, 1), 192);
        assert_eq!(BfeeEntry::computed_len(1, 1), 72);
        assert_eq!(BfeeEntry::computed_len(3, 3), 552);
    }

    #[test]
    fn round_trips() {
        for (r, t) in [(1, 1), (3, 1), (2, 3), (3, 3)] {
            let e = patterned(r, t);
            assert_eq!(parse_entry(&encode_entry(&e).unwrap()).unwrap(), e);
        }
        let mut e = patterned(3, 1);
        e.set_perm([2, 0, 1]);
        assert_eq!(parse_entry(&encode_entry(&e).unwrap()).unwrap(), e);
    }

    #[test]
    fn len_off_by_one_is_rejected() {
        let e = patterned(3, 1);
        let mut body = encode_entry(&e).unwrap();
        body[16] = body[16].wrapping_add(1);
        assert_eq!(
            parse_entry(&body).unwrap_err(),
            BfeeError::LengthMismatch { len: 193, expected: 192 }
        );
    }

    #[test]
    fn bad_antenna_counts_are_rejected() {
        let mut body = encode_entry(&patterned(3, 1)).unwrap();
        body[8] = 4;
        assert!(matches!(parse_entry(&body), Err(BfeeError::AntennaRange { n_rx: 4, .. })));
        body[8] = 0;
        assert!(matches!(parse_entry(&body), Err(BfeeError::AntennaRange { n_rx: 0, .. })));
        assert_eq!(parse_entry(&[0u8; 5]).unwrap_err(), BfeeError::ShortHeader { got: 5 });
    }

    #[test]
    fn duplicate_perm_is_rejected() {
        let mut e = patterned(3, 1);
        e.set_perm([1, 1, 0]);
        assert!(matches!(encode_entry(&e), Err(BfeeError::InvalidPermutation { .. })));
    }

    #[test]
    fn all_zero_payload() {
        let e = BfeeEntry::zeroed(3, 1);
        let parsed = parse_entry(&encode_entry(&e).unwrap()).unwrap();
        assert!(parsed.csi_raw.iter().all(|&v| v == (0, 0)));
        let pkt = to_csi_packet(&parsed).unwrap();
        assert!(pkt.csi.iter().flatten().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn first_value_bit_layout() {
        // first complex value starts 3 bits into the payload
        let mut e = BfeeEntry::zeroed(1, 1);
        e.csi_raw[0] = (-1, 1);
        let body = encode_entry(&e).unwrap();
        let p = &body[HEADER_LEN..];
        assert_eq!(p[0], 0b1111_1000);
        assert_eq!(p[1], 0b0000_1111);
        assert_eq!(p[2], 0b0000_0000);
    }

    #[test]
    fn stream_skips_foreign_frames_and_stops_at_partial() {
        let e = patterned(3, 1);
        let mut bytes = encode_frame(BFEE_CODE, &encode_entry(&e).unwrap());
        bytes.extend(encode_frame(0xC1, &[1, 2, 3, 4]));
        let cap = parse_stream(&bytes).unwrap();
        assert_eq!(cap.entries, vec![e.clone()]);
        assert_eq!(cap.skipped_frames, 1);
        assert_eq!(cap.truncated, None);

        let full = bytes.len();
        bytes.extend(encode_frame(BFEE_CODE, &encode_entry(&e).unwrap()));
        bytes.truncate(bytes.len() - 10);
        let cap = parse_stream(&bytes).unwrap();
        assert_eq!(cap.entries.len(), 1);
        assert_eq!(
            cap.truncated,
            Some(TruncatedTail {
                offset: full,
                parsed_entries: 1
            })
        );
        assert_eq!(parse_stream(&[]).unwrap(), Capture::default());
    }

    #[test]
    fn permutation_reorders_rows() {
        let mut e = patterned(3, 1);
        e.set_perm([2, 0, 1]);
        let pkt = to_csi_packet(&e).unwrap();
        let ident = {
            let mut i = e.clone();
            i.set_perm([0, 1, 2]);
            to_csi_packet(&i).unwrap()
        };
        for (i, &p) in [2usize, 0, 1].iter().enumerate() {
            assert_eq!(pkt.csi[i], ident.csi[p]);
        }
    }

    #[test]
    fn unit_values_give_equal_antenna_amplitudes() {
        let mut e = patterned(3, 1);
        e.set_perm([0, 1, 2]);
        e.csi_raw.iter_mut().for_each(|v| *v = (1, 0));
        let pkt = to_csi_packet(&e).unwrap();
        let a0 = pkt.csi[0][0].norm();
        assert!(a0 > 0.0);
        assert!(pkt.csi.iter().flatten().all(|s| (s.norm() - a0).abs() < 1e-12));
    }

    #[test]
    fn scaling_preserves_ratios() {
        let e = patterned(3, 1);
        let pkt = to_csi_packet(&e).unwrap();
        let perm = e.perm();
        let factor = pkt.csi[0][0].re / e.raw(0, perm[0] as usize, 0).0 as f64;
        assert!(factor > 0.0);
        for i in 0..3 {
            for k in 0..NUM_SUBCARRIERS {
                let (re, im) = e.raw(k, perm[i] as usize, 0);
                assert!((pkt.csi[i][k].re - re as f64 * factor).abs() < 1e-9);
                assert!((pkt.csi[i][k].im - im as f64 * factor).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_chain_cannot_become_a_packet() {
        assert_eq!(
            to_csi_packet(&BfeeEntry::zeroed(1, 1)).unwrap_err(),
            BfeeError::UnsupportedShape { n_rx: 1 }
        );
    }
}
