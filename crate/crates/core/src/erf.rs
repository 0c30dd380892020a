//! Effective receptive fields: input-gradient maps of the centre output neuron with
//! rectifiers removed, a square-mass radius, and heat-map rendering.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::nn::{Conv2d, GradTarget, Mode};
use crate::tensor::Tensor;

/// Something that can be evaluated as a linear map and differentiated back to its input.
pub trait LinearProbe {
    fn input_channels(&self) -> usize;
    /// Forward with every nonlinearity that the probe removes replaced by identity.
    fn forward_linear(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn backward_input(&mut self, dy: Tensor<f64>) -> Result<Tensor<f64>>;
    /// Input pixels per output pixel.
    fn total_stride(&self) -> usize;
}

impl LinearProbe for Network<f64> {
    fn input_channels(&self) -> usize {
        self.spec().input_channels
    }

    fn forward_linear(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.features(x, Mode::Linearized)
    }

    fn backward_input(&mut self, dy: Tensor<f64>) -> Result<Tensor<f64>> {
        self.backward_features(dy, GradTarget::NONE, true)?
            .ok_or_else(|| Error::Consistency("network returned no input gradient".into()))
    }

    fn total_stride(&self) -> usize {
        self.spec().total_stride()
    }
}

/// A plain stack of bias-free 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct ConvStack {
    layers: Vec<Conv2d<f64>>,
}

impl ConvStack {
    pub fn new(layers: Vec<Conv2d<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a conv stack needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].shape()[0] != w[1].shape()[1] {
                return Err(Error::Shape("conv stack channel counts do not chain".into()));
            }
        }
        Ok(ConvStack { layers })
    }

    /// Stride-1 layers with the given dilations, every weight equal to `value`.
    pub fn constant(dilations: &[Genotype], channels: usize, value: f64) -> Result<Self> {
        dilations
            .iter()
            .map(|&d| {
                let shape = [channels, channels, 3, 3];
                Conv2d::new(vec![value; shape.iter().product()], shape, ConvGeom::same(3, 1, d))
            })
            .collect::<Result<Vec<_>>>()
            .and_then(Self::new)
    }

    /// Stride-1 layers with the given dilations and uniform random weights in `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(dilations: &[Genotype], channels: usize, rng: &mut R) -> Result<Self> {
        dilations
            .iter()
            .map(|&d| {
                let shape = [channels, channels, 3, 3];
                let w = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
                Conv2d::new(w, shape, ConvGeom::same(3, 1, d))
            })
            .collect::<Result<Vec<_>>>()
            .and_then(Self::new)
    }

    pub fn layers(&self) -> &[Conv2d<f64>] {
        &self.layers
    }
}

impl LinearProbe for ConvStack {
    fn input_channels(&self) -> usize {
        self.layers[0].shape()[1]
    }

    fn forward_linear(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut out = x.clone();
        for l in &mut self.layers {
            out = l.forward(&out)?;
        }
        Ok(out)
    }

    fn backward_input(&mut self, dy: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut d = dy;
        for l in self.layers.iter_mut().rev() {
            d = l.backward(&d, true, false)?.expect("dx requested");
        }
        Ok(d)
    }

    fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.geom().stride).product()
    }
}

/// Per-pixel input-gradient magnitudes for one probed output neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height × width`, all entries ≥ 0.
    pub grid: Vec<f64>,
    /// Probed neuron in output-map coordinates.
    pub feature_center: (usize, usize),
    /// The same neuron projected onto the input grid.
    pub center: (usize, usize),
    pub network: String,
    pub layer: String,
}

impl ErfMap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.grid[r * self.width + c]
    }

    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// Positions with nonzero mass.
    pub fn support(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.at(r, c) != 0.0)
            .collect()
    }
}

/// ERF of the centre neuron of the probe's output with an all-ones input.
pub fn erf_map<P: LinearProbe>(probe: &mut P, input: (usize, usize)) -> Result<ErfMap> {
    let x = Tensor::filled([1, probe.input_channels(), input.0, input.1], 1.0);
    erf_map_with_input(probe, &x)
}

/// ERF with an arbitrary probe input; for a linear probe the result does not depend on it.
pub fn erf_map_with_input<P: LinearProbe>(probe: &mut P, x: &Tensor<f64>) -> Result<ErfMap> {
    let (h, w) = (x.height(), x.width());
    let stride = probe.total_stride();
    if h < stride || w < stride || x.batch() != 1 {
        return Err(Error::Shape(format!(
            "probe input must be a single image of at least {stride}×{stride}, got {:?}",
            x.shape()
        )));
    }
    let f = probe.forward_linear(x)?;
    let [_, c, fh, fw] = f.shape();
    let fc = (fh / 2, fw / 2);
    let mut seed = Tensor::zeros(f.shape());
    for ch in 0..c {
        seed.set(0, ch, fc.0, fc.1, 1.0);
    }
    let dx = probe.backward_input(seed)?;
    let mut grid = vec![0.0; h * w];
    for ch in 0..dx.channels() {
        for (g, &v) in grid.iter_mut().zip(dx.channel(0, ch)) {
            *g += v * v;
        }
    }
    grid.iter_mut().for_each(|g| *g = g.sqrt());
    Ok(ErfMap {
        height: h,
        width: w,
        grid,
        feature_center: fc,
        center: ((fc.0 * stride).min(h - 1), (fc.1 * stride).min(w - 1)),
        network: String::new(),
        layer: "features".into(),
    })
}

/// Smallest half-width `r` of the square around the centre holding at least `mass` of the total.
pub fn erf_radius(map: &ErfMap, mass: f64) -> Result<usize> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Config(format!("mass fraction {mass} is outside (0, 1]")));
    }
    let (cr, cc) = map.center;
    let max_r = cr.max(map.height - 1 - cr).max(cc).max(map.width - 1 - cc);
    let mut buckets = vec![0.0; max_r + 1];
    for r in 0..map.height {
        for c in 0..map.width {
            let d = r.abs_diff(cr).max(c.abs_diff(cc));
            buckets[d] += map.at(r, c);
        }
    }
    let total: f64 = buckets.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateMap("ERF map has no mass".into()));
    }
    let target = mass * total;
    let mut acc = 0.0;
    for (r, b) in buckets.iter().enumerate() {
        acc += b;
        if acc >= target {
            return Ok(r);
        }
    }
    Ok(max_r)
}

fn heat(t: f64) -> [u8; 3] {
    // black → red → yellow → white
    let t = t.clamp(0.0, 1.0) * 3.0;
    let (r, g, b) = if t < 1.0 {
        (t, 0.0, 0.0)
    } else if t < 2.0 {
        (1.0, t - 1.0, 0.0)
    } else {
        (1.0, 1.0, t - 2.0)
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

const MARKER: [u8; 3] = [0, 200, 255];

/// RGB heat map, `scale`× upscaled; values are max-normalized then square-root tone mapped.
///
/// The centre is marked by coloured ticks on the image border in the centre row and column,
/// so the map itself is left untouched.
pub fn render_rgb(map: &ErfMap, scale: usize) -> (usize, usize, Vec<u8>) {
    let scale = scale.max(1);
    let (h, w) = (map.height * scale, map.width * scale);
    let peak = map.grid.iter().copied().fold(0.0, f64::max);
    let mut px = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let v = map.at(y / scale, x / scale);
            let t = if peak > 0.0 { (v / peak).sqrt() } else { 0.0 };
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&heat(t));
        }
    }
    let tick = scale.max(2).min(h.min(w) / 4);
    let (cy, cx) = (map.center.0 * scale + scale / 2, map.center.1 * scale + scale / 2);
    for k in 0..tick {
        for (y, x) in [(cy, k), (cy, w - 1 - k), (k, cx), (h - 1 - k, cx)] {
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&MARKER);
        }
    }
    (h, w, px)
}

pub fn render_erf(map: &ErfMap, path: &Path, scale: usize) -> Result<()> {
    let (h, w, px) = render_rgb(map, scale);
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&px)?;
    writer.finish()?;
    Ok(())
}

pub(crate) fn write_gray_png(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

/// Decodes an 8-bit PNG, returning raw samples and `(height, width, channels)`.
pub fn read_png(path: &Path) -> Result<(Vec<u8>, (usize, usize, usize))> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(std::io::Error::other)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(std::io::Error::other)?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((buf, (info.height as usize, info.width as usize, channels)))
}

pub(crate) fn read_gray_png(path: &Path) -> Result<Vec<u8>> {
    let (data, (_, _, ch)) = read_png(path)?;
    if ch != 1 {
        return Err(Error::Shape(format!("{} is not grayscale", path.display())));
    }
    Ok(data)
}

/// One line of the radius table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErfRow {
    pub network: String,
    pub layer: String,
    pub mass: f64,
    pub radius: usize,
}

pub fn write_erf_csv(rows: &[ErfRow], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "network,layer,mass,radius")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.network, r.layer, r.mass, r.radius)?;
    }
    f.flush()?;
    Ok(())
}
