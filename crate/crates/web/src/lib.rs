//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function has a plain Rust twin returning `Result<_, String>`
//! so it can be exercised natively.

use cbt_core::augment::{make_view_pair, AugmentConfig};
use cbt_core::model::{embed, init_params, EncoderConfig};
use cbt_core::numerics::Tensor;
use cbt_core::ssl_bt::{bt_loss, cross_correlation, BtLossConfig};
use cbt_core::taskgen::{render_tile as core_render_tile, DomainSpec};
use wasm_bindgen::prelude::*;

const MASK_COLOURS: [[u8; 3]; 4] = [[40, 40, 40], [230, 80, 60], [70, 170, 90], [70, 110, 220]];
const EPS: f64 = 1e-5;

fn domain(name: &str, seed: u64) -> Result<DomainSpec, String> {
    DomainSpec::preset(name, seed).map_err(|e| e.to_string())
}

/// Writes one `3×H×W` image into an RGBA buffer of row width `stride` at column `x0`.
fn blit_image(rgba: &mut [u8], stride: usize, x0: usize, image: &[f64], size: usize) {
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let o = 4 * (y * stride + x0 + x);
            for ch in 0..3 {
                rgba[o + ch] = (image[ch * plane + y * size + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            rgba[o + 3] = 255;
        }
    }
}

/// RGBA pixels of a tile (left) and its class mask (right), `2·size` wide.
pub fn tile_rgba(name: &str, seed: u64, index: u64, size: usize) -> Result<Vec<u8>, String> {
    let tile = core_render_tile(&domain(name, seed)?, index, size).map_err(|e| e.to_string())?;
    let stride = 2 * size;
    let mut rgba = vec![0u8; 4 * stride * size];
    blit_image(&mut rgba, stride, 0, tile.image.data(), size);
    for (i, &l) in tile.mask.labels().iter().enumerate() {
        let o = 4 * ((i / size) * stride + size + i % size);
        rgba[o..o + 3].copy_from_slice(&MASK_COLOURS[l as usize]);
        rgba[o + 3] = 255;
    }
    Ok(rgba)
}

/// RGBA pixels of the original tile and two augmented views side by side, `3·size` wide.
pub fn views_rgba(name: &str, seed: u64, index: u64, size: usize, draw: u64) -> Result<Vec<u8>, String> {
    let tile = core_render_tile(&domain(name, seed)?, index, size).map_err(|e| e.to_string())?;
    let batch = Tensor::new(vec![1, 3, size, size], tile.image.data().to_vec()).map_err(|e| e.to_string())?;
    let cfg = AugmentConfig {
        seed,
        ..AugmentConfig::default()
    };
    let pair = make_view_pair(&batch, &cfg, draw).map_err(|e| e.to_string())?;
    let stride = 3 * size;
    let mut rgba = vec![0u8; 4 * stride * size];
    blit_image(&mut rgba, stride, 0, tile.image.data(), size);
    blit_image(&mut rgba, stride, size, pair.view_a.data(), size);
    blit_image(&mut rgba, stride, 2 * size, pair.view_b.data(), size);
    Ok(rgba)
}

/// Cross-correlation of two view batches under a freshly initialised encoder.
#[wasm_bindgen]
pub struct Correlation {
    dim: usize,
    matrix: Vec<f64>,
    total: f64,
    invariance: f64,
    redundancy: f64,
}

#[wasm_bindgen]
impl Correlation {
    #[wasm_bindgen(getter)]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `dim×dim` entries.
    #[wasm_bindgen(getter)]
    pub fn matrix(&self) -> Vec<f64> {
        self.matrix.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn total(&self) -> f64 {
        self.total
    }

    #[wasm_bindgen(getter)]
    pub fn invariance(&self) -> f64 {
        self.invariance
    }

    #[wasm_bindgen(getter)]
    pub fn redundancy(&self) -> f64 {
        self.redundancy
    }
}

pub fn correlation(name: &str, seed: u64, tiles: usize, size: usize, draw: u64) -> Result<Correlation, String> {
    if tiles < 2 {
        return Err(format!("need at least 2 tiles, got {tiles}"));
    }
    let spec = domain(name, seed)?;
    let mut data = Vec::with_capacity(tiles * 3 * size * size);
    for i in 0..tiles as u64 {
        data.extend_from_slice(
            core_render_tile(&spec, i, size)
                .map_err(|e| e.to_string())?
                .image
                .data(),
        );
    }
    let batch = Tensor::new(vec![tiles, 3, size, size], data).map_err(|e| e.to_string())?;
    let aug = AugmentConfig {
        seed,
        ..AugmentConfig::default()
    };
    let pair = make_view_pair(&batch, &aug, draw).map_err(|e| e.to_string())?;
    let model = EncoderConfig {
        input_shape: (3, size, size),
        embed_dim: 8,
        projector_widths: vec![16],
        init_seed: seed,
        ..EncoderConfig::default()
    };
    let params = init_params(&model).map_err(|e| e.to_string())?;
    let za = embed(&params, &model, &pair.view_a).map_err(|e| e.to_string())?;
    let zb = embed(&params, &model, &pair.view_b).map_err(|e| e.to_string())?;
    let c = cross_correlation(&za, &zb, EPS).map_err(|e| e.to_string())?;
    let terms = bt_loss(&c, &BtLossConfig::default()).map_err(|e| e.to_string())?;
    Ok(Correlation {
        dim: model.embed_dim,
        matrix: c.matrix.data().to_vec(),
        total: terms.total,
        invariance: terms.invariance,
        redundancy: terms.redundancy,
    })
}

fn js(r: Result<Vec<u8>, String>) -> Result<Vec<u8>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn render_tile(domain: &str, seed: u64, index: u64, size: usize) -> Result<Vec<u8>, JsError> {
    js(tile_rgba(domain, seed, index, size))
}

#[wasm_bindgen]
pub fn augment_views(domain: &str, seed: u64, index: u64, size: usize, draw: u64) -> Result<Vec<u8>, JsError> {
    js(views_rgba(domain, seed, index, size, draw))
}

#[wasm_bindgen]
pub fn correlation_heatmap(
    domain: &str,
    seed: u64,
    tiles: usize,
    size: usize,
    draw: u64,
) -> Result<Correlation, JsError> {
    correlation(domain, seed, tiles, size, draw).map_err(|e| JsError::new(&e))
}
