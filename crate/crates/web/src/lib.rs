//! WebAssembly bindings for the browser demo. Each export is a thin wrapper over a plain
//! function so the logic can be tested natively.

use nats::decoder::{channel_permutation, decode_indices, decoded_channels, intensity};
use nats::erf::{erf_map, erf_radius, ConvStack};
use nats::genotype::Genotype;
use nats::mixed::{softmax_row, AlphaTable};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Input offsets `(dy, dx)` read by the nine taps of a dilated 3×3 kernel.
pub fn taps(dh: u32, dw: u32) -> Result<Vec<(i32, i32)>, String> {
    let g = Genotype::new(dh, dw).map_err(|e| e.to_string())?;
    let (dh, dw) = (g.dh() as i32, g.dw() as i32);
    Ok((-1..=1).flat_map(|ky| (-1..=1).map(move |kx| (ky * dh, kx * dw))).collect())
}

/// Parses `"1,2,3"` or `"1x2, 3"` into one genotype per layer.
pub fn parse_dilations(text: &str) -> Result<Vec<Genotype>, String> {
    let layers: Vec<Genotype> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (h, w) = s.split_once('x').unwrap_or((s, s));
            let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| format!("bad dilation `{s}`"));
            Genotype::new(parse(h)?, parse(w)?).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    if layers.is_empty() {
        return Err("at least one layer is needed".into());
    }
    Ok(layers)
}

pub struct Erf {
    pub size: usize,
    pub grid: Vec<f64>,
    pub radius: usize,
}

/// ERF of a stack of unit-weight single-channel dilated convolutions, normalized to a
/// peak of 1.
pub fn stack_erf(dilations: &str, size: usize, mass: f64) -> Result<Erf, String> {
    let layers = parse_dilations(dilations)?;
    if !(3..=129).contains(&size) {
        return Err(format!("grid size {size} is outside 3..=129"));
    }
    let mut stack = ConvStack::constant(&layers, 1, 1.0).map_err(|e| e.to_string())?;
    let map = erf_map(&mut stack, (size, size)).map_err(|e| e.to_string())?;
    let radius = erf_radius(&map, mass).map_err(|e| e.to_string())?;
    let peak = map.grid.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Ok(Erf {
        size,
        grid: map.grid.iter().map(|v| v / peak).collect(),
        radius,
    })
}

/// Decodes an `N × G` alpha table (JSON rows) for a layer with `c_out` channels.
pub fn decode(alphas_json: &str, genotypes: &str, c_out: usize) -> Result<serde_json::Value, String> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(alphas_json).map_err(|e| format!("alphas: {e}"))?;
    let alpha = AlphaTable::from_rows(rows.clone()).map_err(|e| e.to_string())?;
    let genos = parse_dilations(genotypes)?;
    if genos.len() != alpha.genotypes() {
        return Err(format!("{} genotypes for {} alpha columns", genos.len(), alpha.genotypes()));
    }
    let ind = decode_indices(&alpha);
    let inten = intensity(&ind);
    let channels = decoded_channels(c_out, &inten).map_err(|e| e.to_string())?;
    let perm = channel_permutation(&ind, c_out).map_err(|e| e.to_string())?;
    let probs: Vec<Vec<f64>> = rows.iter().map(|r| softmax_row(r)).collect();
    Ok(json!({
        "genotypes": genos.iter().map(|g| g.to_string()).collect::<Vec<_>>(),
        "probabilities": probs,
        "indices": ind.as_slice(),
        "intensity": inten.values(),
        "channels": channels,
        "permutation": perm,
    }))
}

#[wasm_bindgen(js_name = taps)]
pub fn taps_js(dh: u32, dw: u32) -> Result<Vec<i32>, JsError> {
    Ok(taps(dh, dw).map_err(|e| JsError::new(&e))?.into_iter().flat_map(|(y, x)| [y, x]).collect())
}

#[wasm_bindgen(js_name = ErfView)]
pub struct ErfView(Erf);

#[wasm_bindgen(js_class = ErfView)]
impl ErfView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.size
    }

    #[wasm_bindgen(getter)]
    pub fn radius(&self) -> usize {
        self.0.radius
    }

    #[wasm_bindgen(getter)]
    pub fn grid(&self) -> Vec<f64> {
        self.0.grid.clone()
    }
}

#[wasm_bindgen(js_name = stackErf)]
pub fn stack_erf_js(dilations: &str, size: usize, mass: f64) -> Result<ErfView, JsError> {
    stack_erf(dilations, size, mass).map(ErfView).map_err(|e| JsError::new(&e))
}

/// Returns the decode result as a JSON string.
#[wasm_bindgen(js_name = decodeAlphas)]
pub fn decode_js(alphas_json: &str, genotypes: &str, c_out: usize) -> Result<String, JsError> {
    decode(alphas_json, genotypes, c_out)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}
