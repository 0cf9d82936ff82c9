//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each exported function takes plain numbers and strings and returns JSON
//! (or raw pixels), so the page needs no glue beyond `wasm-bindgen`. The
//! `*_json` functions are ordinary Rust and are what the tests call.

use inflens_core::attribution::{attribution_map, quantize, Centering};
use inflens_core::eval::{evaluate, sweep, CellOutcome};
use inflens_core::head::decompose;
use inflens_core::influence::{class_histograms, influence_map_from_histograms};
use inflens_core::planted::{generate_planted, PlantedData, PlantedSpec};
use inflens_core::rng::stream_rng;
use rand::Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Stream for the demo's synthetic spatial maps, clear of the core streams.
const DEMO_MAPS: u64 = 16 << 40;

fn planted_data(
    classes: usize,
    width: usize,
    planted: usize,
    n_per_class: usize,
    signal_mean: f64,
    seed: u64,
) -> Result<PlantedData, String> {
    let spec = PlantedSpec {
        classes,
        width,
        planted_per_class: planted,
        n_per_class,
        signal_mean,
        seed,
        ..PlantedSpec::default()
    };
    generate_planted(&spec).map_err(|e| e.to_string())
}

/// Generates planted data, extracts the influence map with `(k1, k2)` and
/// evaluates the decomposed head on a fresh held-out split.
#[allow(clippy::too_many_arguments)]
pub fn planted_recovery_json(
    classes: usize,
    width: usize,
    planted: usize,
    n_per_class: usize,
    signal_mean: f64,
    k1: usize,
    k2: usize,
    seed: u64,
) -> Result<Value, String> {
    let data = planted_data(classes, width, planted, n_per_class, signal_mean, seed)?;
    let importance = data.train.importance_by_class();
    let hists = class_histograms(&importance, k1).map_err(|e| e.to_string())?;
    let imap = influence_map_from_histograms(&hists, k1, k2).map_err(|e| e.to_string())?;
    let dhead = decompose(&data.head, &imap).map_err(|e| e.to_string())?;
    let holdout = data.sample(n_per_class, 1).labeled();
    let report = evaluate(&holdout, &data.head, &dhead).map_err(|e| e.to_string())?;

    let per_class: Vec<Value> = hists
        .iter()
        .zip(&data.planted)
        .map(|((label, h), truth)| {
            let mut found = imap.get(*label).unwrap_or_default().to_vec();
            found.sort_unstable();
            json!({
                "label": label,
                "planted": truth,
                "recovered": found,
                "counts": h.counts,
                "instances": h.num_instances,
            })
        })
        .collect();
    Ok(json!({
        "width": width,
        "classes": per_class,
        "A_f": report.full_accuracy,
        "A_d": report.decomposed_accuracy,
        "r_A": report.relative_accuracy,
    }))
}

fn parse_grid(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad grid entry {t:?}")))
        .collect()
}

/// r_A over a `k1 × k2` grid, row-major; skipped cells are `null`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_json(
    classes: usize,
    width: usize,
    planted: usize,
    n_per_class: usize,
    signal_mean: f64,
    k1_grid: &str,
    k2_grid: &str,
    seed: u64,
) -> Result<Value, String> {
    let data = planted_data(classes, width, planted, n_per_class, signal_mean, seed)?;
    let (k1_grid, k2_grid) = (parse_grid(k1_grid)?, parse_grid(k2_grid)?);
    let holdout = data.sample(n_per_class, 1).labeled();
    let grid = sweep(
        &data.train.importance_by_class(),
        &holdout,
        &data.head,
        &k1_grid,
        &k2_grid,
    )
    .map_err(|e| e.to_string())?;
    let r_a: Vec<Option<f64>> = grid
        .cells
        .iter()
        .map(|c| match &c.outcome {
            CellOutcome::Evaluated { report } => report.relative_accuracy,
            CellOutcome::Skipped { .. } => None,
        })
        .collect();
    Ok(json!({"k1": grid.k1_grid, "k2": grid.k2_grid, "r_A": r_a}))
}

/// An `m × h × w` map where channel `j` is a Gaussian bump at a random spot
/// plus a little uniform noise.
pub fn demo_feature_map(m: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, DEMO_MAPS);
    let mut map = Vec::with_capacity(m * h * w);
    for _ in 0..m {
        let (cy, cx) = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
        let amp = 0.5 + rng.random::<f64>();
        let s2 = 2.0 * (0.15 * h.max(w) as f64).powi(2);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                map.push(amp * (-d2 / s2).exp() + 0.05 * rng.random::<f64>());
            }
        }
    }
    map
}

/// Grayscale attribution of the demo map over `channels`, one byte per
/// pixel.
pub fn attribution_pixels(
    m: usize,
    size: usize,
    channels: &str,
    target: usize,
    cross_channel: bool,
    seed: u64,
) -> Result<Vec<u8>, String> {
    let indices = parse_grid(channels)?;
    let map = demo_feature_map(m, size, size, seed);
    let centering = if cross_channel {
        Centering::CrossChannelMean
    } else {
        Centering::SpatialMean
    };
    let a = attribution_map(&map, m, (size, size), &indices, (target, target), centering)
        .map_err(|e| e.to_string())?;
    Ok(a.values.iter().map(|&v| quantize(v)).collect())
}

fn js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = plantedRecovery)]
#[allow(clippy::too_many_arguments)]
pub fn planted_recovery(
    classes: usize,
    width: usize,
    planted: usize,
    n_per_class: usize,
    signal_mean: f64,
    k1: usize,
    k2: usize,
    seed: u32,
) -> Result<String, JsError> {
    js(planted_recovery_json(
        classes,
        width,
        planted,
        n_per_class,
        signal_mean,
        k1,
        k2,
        seed.into(),
    ))
}

#[wasm_bindgen(js_name = sweepGrid)]
#[allow(clippy::too_many_arguments)]
pub fn sweep_grid(
    classes: usize,
    width: usize,
    planted: usize,
    n_per_class: usize,
    signal_mean: f64,
    k1_grid: &str,
    k2_grid: &str,
    seed: u32,
) -> Result<String, JsError> {
    js(sweep_json(
        classes,
        width,
        planted,
        n_per_class,
        signal_mean,
        k1_grid,
        k2_grid,
        seed.into(),
    ))
}

#[wasm_bindgen(js_name = attributionImage)]
pub fn attribution_image(
    m: usize,
    size: usize,
    channels: &str,
    target: usize,
    cross_channel: bool,
    seed: u32,
) -> Result<Vec<u8>, JsError> {
    attribution_pixels(m, size, channels, target, cross_channel, seed.into())
        .map_err(|e| JsError::new(&e))
}

/// Per-channel thumbnails of the demo map, each normalized on its own.
#[wasm_bindgen(js_name = channelThumbnails)]
pub fn channel_thumbnails(m: usize, size: usize, seed: u32) -> Vec<u8> {
    let map = demo_feature_map(m, size, size, seed.into());
    map.chunks(size * size)
        .flat_map(|ch| {
            let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = (hi - lo).max(f64::MIN_POSITIVE);
            ch.iter().map(move |&v| quantize((v - lo) / range)).collect::<Vec<_>>()
        })
        .collect()
}
