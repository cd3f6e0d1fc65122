//! Browser demo over the core crate.
//!
//! Three operations back the page in `www/`: rendering a site's CSI
//! fingerprint image, a phase scatter that contrasts raw per-antenna phase
//! with inter-antenna phase differences, and the greedy top-H locator on a
//! synthetic prediction matrix.

use rand::Rng;
use wasm_bindgen::prelude::*;

use secci::channel::{simulate_packet, Environment, SimConfig, SiteLayout};
use secci::csi::{amplitude_phase, extract_features, wrap_phase_difference};
use secci::imaging::{build_images, NormalizationSpec, DEFAULT_WINDOW};
use secci::locator::{estimate_position, GreedyConfig, PredictionMatrix, Weighting};
use secci::rng::{child_rng, domain};

const GRID: usize = 4;
const SPACING: f64 = 1.5;
const TX: [f64; 2] = [-1.0, -2.5];

fn layout() -> SiteLayout {
    SiteLayout::grid(GRID, GRID, SPACING, [0.0, 0.0], TX)
}

fn sim_config(seed: u64, k_factor_db: f64, snr_db: f64) -> SimConfig {
    let mut cfg = SimConfig {
        seed,
        k_factor_db,
        ..SimConfig::default()
    };
    cfg.noise_std = SimConfig::noise_std_for_snr(cfg.los_amplitude, snr_db);
    cfg
}

/// Site coordinates of the demo grid as `[x0, y0, x1, y1, …]`.
#[wasm_bindgen]
pub fn grid_sites() -> Vec<f64> {
    layout().site_positions.iter().flat_map(|p| [p[0], p[1]]).collect()
}

/// RGBA pixels (90 × 90) of the first fingerprint image at `site`; red is
/// average amplitude, green AoA, blue phase difference.
#[wasm_bindgen]
pub fn render_site_image(site: usize, seed: u32, k_factor_db: f64, snr_db: f64) -> Result<Vec<u8>, JsError> {
    let layout = layout();
    let position = *layout
        .site_positions
        .get(site)
        .ok_or_else(|| JsError::new(&format!("site {site} outside the {GRID}×{GRID} grid")))?;
    let cfg = sim_config(seed as u64, k_factor_db, snr_db);
    cfg.validate().map_err(|e| JsError::new(&e.to_string()))?;
    let env = Environment::new(&layout, &cfg);
    let rays = env.rays_at(position);
    let mut rng = child_rng(cfg.seed, domain::TRAIN_SITE, site as u64);
    let features = (0..DEFAULT_WINDOW as u64)
        .map(|t| extract_features(&simulate_packet(&rays, &cfg, t * 1000, &mut rng), &cfg.geometry))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| JsError::new(&e.to_string()))?;
    let norm = NormalizationSpec::from_features(features.iter());
    let image = build_images(&features, DEFAULT_WINDOW, &norm)
        .into_iter()
        .next()
        .ok_or_else(|| JsError::new("not enough packets for an image"))?;
    let mut rgba = Vec::with_capacity(image.height * image.width * 4);
    for r in 0..image.height {
        for c in 0..image.width {
            for ch in 0..3 {
                rgba.push((image.at(ch, r, c) * 255.0).round() as u8);
            }
            rgba.push(255);
        }
    }
    Ok(rgba)
}

/// `packets` pairs of (raw antenna-0 phase, antenna 0−1 phase difference) on
/// one subcarrier, flattened. The raw phase wanders with the per-packet
/// timing and frequency errors; the difference stays put.
#[wasm_bindgen]
pub fn phase_scatter(site: usize, packets: usize, subcarrier: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    let layout = layout();
    let position = *layout
        .site_positions
        .get(site)
        .ok_or_else(|| JsError::new(&format!("site {site} outside the grid")))?;
    if subcarrier >= 30 {
        return Err(JsError::new("subcarrier must be below 30"));
    }
    let cfg = sim_config(seed as u64, 6.0, 25.0);
    let env = Environment::new(&layout, &cfg);
    let rays = env.rays_at(position);
    let mut rng = child_rng(cfg.seed, domain::TEST_SITE, site as u64);
    let mut out = Vec::with_capacity(packets.min(5000) * 2);
    for t in 0..packets.min(5000) as u64 {
        let pkt = simulate_packet(&rays, &cfg, t * 1000, &mut rng);
        let (_, p0) = amplitude_phase(pkt.csi[0][subcarrier]);
        let (_, p1) = amplitude_phase(pkt.csi[1][subcarrier]);
        out.push(p0);
        out.push(wrap_phase_difference(p0, p1));
    }
    Ok(out)
}

/// Greedy estimate for a synthetic prediction matrix: `images` softmax
/// columns peaked around `true_site` with the given `sharpness`.
/// Returns JSON `{estimate, support, shortfall, matrix}`.
#[wasm_bindgen]
pub fn greedy_explore(true_site: usize, images: usize, sharpness: f64, h: usize, k: usize, weighted: bool, seed: u32) -> Result<String, JsError> {
    let sites = layout().site_positions;
    let truth = *sites.get(true_site).ok_or_else(|| JsError::new("site outside the grid"))?;
    let mut rng = child_rng(seed as u64, domain::VALIDATION, 0);
    let columns: Vec<Vec<f64>> = (0..images.clamp(1, 64))
        .map(|_| {
            let logits: Vec<f64> = sites
                .iter()
                .map(|s| -sharpness * (s[0] - truth[0]).hypot(s[1] - truth[1]) + rng.random::<f64>() * 1.5)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect();
    let p = PredictionMatrix::from_columns(columns.clone()).map_err(|e| JsError::new(&e.to_string()))?;
    let cfg = GreedyConfig {
        h,
        k,
        weighting: if weighted { Weighting::Probability } else { Weighting::Uniform },
    };
    let est = estimate_position(&p, &sites, &cfg).map_err(|e| JsError::new(&e.to_string()))?;
    let support: Vec<serde_json::Value> = est
        .support
        .iter()
        .map(|s| serde_json::json!({"index": s.index, "frequency": s.frequency, "mass": s.mass}))
        .collect();
    Ok(serde_json::json!({
        "estimate": est.coords,
        "truth": truth,
        "error": (est.coords[0] - truth[0]).hypot(est.coords[1] - truth[1]),
        "support": support,
        "shortfall": est.shortfall,
        "matrix": columns,
    })
    .to_string())
}
