//! Golden `.dat` captures: documented field values and byte-exact encoding.
//!
//! Set `SECCI_REGEN_FIXTURES=1` to rewrite the files from the builders below.

use std::path::PathBuf;

use secci::bfee::{encode_entry, encode_frame, encode_stream, parse_stream, to_csi_packet, BfeeEntry, BFEE_CODE};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn single_3x1_entry() -> BfeeEntry {
    let mut e = BfeeEntry::zeroed(3, 1);
    e.timestamp_low = 0x0102_0304;
    e.bfee_count = 7;
    e.rssi_a = 40;
    e.rssi_b = 38;
    e.rssi_c = 35;
    e.noise = -92;
    e.agc = 30;
    e.antenna_sel = 0b10_01_00;
    e.rate = 0x4101;
    for k in 0..30 {
        for r in 0..3 {
            e.csi_raw[k * 3 + r] = (k as i8 - 15 + r as i8, 2 * r as i8 - k as i8);
        }
    }
    e
}

fn mixed_2x2_entry() -> BfeeEntry {
    let mut e = BfeeEntry::zeroed(2, 2);
    e.timestamp_low = 1_000_000;
    e.bfee_count = 65535;
    e.noise = -127;
    e.agc = 0;
    e.antenna_sel = 0b00_00_01;
    e.rate = 0xc113;
    for k in 0..30 {
        for j in 0..4 {
            let v = 4 * k as i32 + j - 60;
            e.csi_raw[k * 4 + j as usize] = (v as i8, (-v) as i8);
        }
    }
    e
}

fn single_3x1_bytes() -> Vec<u8> {
    encode_stream([&single_3x1_entry()]).unwrap()
}

fn mixed_2x2_bytes() -> Vec<u8> {
    let mut b = encode_frame(0xC1, &[1, 2, 3, 4]);
    b.extend(encode_frame(BFEE_CODE, &encode_entry(&mixed_2x2_entry()).unwrap()));
    b
}

fn truncated_bytes() -> Vec<u8> {
    let mut b = single_3x1_bytes();
    let second = single_3x1_bytes();
    b.extend_from_slice(&second[..40]);
    b
}

fn golden() -> [(&'static str, Vec<u8>); 3] {
    [
        ("single_3x1.dat", single_3x1_bytes()),
        ("mixed_2x2.dat", mixed_2x2_bytes()),
        ("truncated.dat", truncated_bytes()),
    ]
}

#[test]
fn fixtures_match_their_builders() {
    if std::env::var_os("SECCI_REGEN_FIXTURES").is_some() {
        for (name, bytes) in golden() {
            std::fs::write(fixture(name), bytes).unwrap();
        }
    }
    for (name, bytes) in golden() {
        let on_disk = std::fs::read(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(on_disk, bytes, "{name} differs from its builder");
    }
}

#[test]
fn single_3x1_fields() {
    let cap = parse_stream(&std::fs::read(fixture("single_3x1.dat")).unwrap()).unwrap();
    assert_eq!(cap.entries.len(), 1);
    assert_eq!(cap.skipped_frames, 0);
    assert!(cap.truncated.is_none());
    let e = &cap.entries[0];
    assert_eq!(e.timestamp_low, 0x0102_0304);
    assert_eq!(e.bfee_count, 7);
    assert_eq!((e.n_rx, e.n_tx), (3, 1));
    assert_eq!((e.rssi_a, e.rssi_b, e.rssi_c), (40, 38, 35));
    assert_eq!(e.noise, -92);
    assert_eq!(e.agc, 30);
    assert_eq!(e.perm(), [0, 1, 2]);
    assert_eq!(e.len, 192);
    assert_eq!(e.rate, 0x4101);
    assert_eq!(e.raw(0, 0, 0), (-15, 0));
    assert_eq!(e.raw(29, 2, 0), (16, -25));
    assert_eq!(e.raw(10, 1, 0), (-4, -8));
    let pkt = to_csi_packet(e).unwrap();
    // one positive scale factor: phases of the raw values survive
    let h = pkt.csi[1][10];
    assert!((h.arg() - (-8f64).atan2(-4.0)).abs() < 1e-12);
}

#[test]
fn mixed_2x2_fields() {
    let cap = parse_stream(&std::fs::read(fixture("mixed_2x2.dat")).unwrap()).unwrap();
    assert_eq!(cap.skipped_frames, 1);
    assert_eq!(cap.entries.len(), 1);
    let e = &cap.entries[0];
    assert_eq!(e.timestamp_low, 1_000_000);
    assert_eq!(e.bfee_count, 65535);
    assert_eq!((e.n_rx, e.n_tx), (2, 2));
    assert_eq!(e.noise, -127);
    assert_eq!(e.perm()[..2], [1, 0]);
    assert_eq!(e.len, 252);
    assert_eq!(e.rate, 0xc113);
    assert_eq!(e.raw(0, 0, 0), (-60, 60));
    assert_eq!(e.raw(0, 1, 1), (-57, 57));
    assert_eq!(e.raw(29, 1, 1), (59, -59));
    assert_eq!(e, &mixed_2x2_entry());
}

#[test]
fn truncated_fields() {
    let cap = parse_stream(&std::fs::read(fixture("truncated.dat")).unwrap()).unwrap();
    assert_eq!(cap.entries, vec![single_3x1_entry()]);
    let t = cap.truncated.expect("tail is cut");
    assert_eq!(t.offset, 215);
    assert_eq!(t.parsed_entries, 1);
}
