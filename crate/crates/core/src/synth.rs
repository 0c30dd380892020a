//! Synthetic scale-band classification: one filled square or disc per image, labelled by
//! which band of object sizes it was drawn from.
//!
//! Background level and contrast sign are random per image, so a single pixel carries no
//! class information; deciding the band needs spatial context proportional to the object.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    /// Object sides 4–12 px.
    Small,
    /// Object sides 24–56 px.
    Large,
}

impl ScalePreset {
    pub fn size_range(self) -> (usize, usize) {
        match self {
            ScalePreset::Small => (4, 12),
            ScalePreset::Large => (24, 56),
        }
    }
}

impl std::str::FromStr for ScalePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ScalePreset::Small),
            "large" => Ok(ScalePreset::Large),
            o => Err(Error::Config(format!("unknown scale preset `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValWeight,
    ValAlpha,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValWeight, Split::ValAlpha];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValWeight => "val_weight",
            Split::ValAlpha => "val_alpha",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::ValWeight => 2,
            Split::ValAlpha => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub scale_preset: ScalePreset,
    pub noise_std: f64,
    pub train_size: usize,
    pub val_weight_size: usize,
    pub val_alpha_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_classes: 4,
            scale_preset: ScalePreset::Large,
            noise_std: 0.1,
            train_size: 1024,
            val_weight_size: 512,
            val_alpha_size: 512,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_preset.size_range();
        if self.num_classes == 0 {
            return Err(Error::schema("synth.num_classes", "must be positive"));
        }
        if hi > self.image_size {
            return Err(Error::Config(format!(
                "objects up to {hi} px do not fit a {0}×{0} image",
                self.image_size
            )));
        }
        if hi - lo + 1 < self.num_classes {
            return Err(Error::Config(format!(
                "{} size bands cannot be cut from sizes {lo}..={hi}",
                self.num_classes
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::schema("synth.noise_std", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Inclusive side-length range of one class.
    pub fn band(&self, class: usize) -> (usize, usize) {
        let (lo, hi) = self.scale_preset.size_range();
        let n = hi - lo + 1;
        let k = self.num_classes;
        (lo + class * n / k, lo + (class + 1) * n / k - 1)
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::ValWeight => self.val_weight_size,
            Split::ValAlpha => self.val_alpha_size,
        }
    }

    /// Short content hash identifying the generated data.
    pub fn dataset_id(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = hex::encode(Sha256::digest(text.as_bytes()));
        format!("synth-{}", &digest[..16])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disc,
}

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub label: usize,
    pub shape: Shape,
    /// Side length (square) or diameter (disc), equal to the bounding-box side.
    pub size: usize,
    /// Top-left corner of the bounding box, `(row, col)`.
    pub origin: (usize, usize),
    pub background: f64,
    pub foreground: f64,
    pub seed: u64,
}

/// Grayscale images with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.image_size * self.image_size;
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// `[B, 1, S, S]` batch scaled to `[0, 1]`, with its labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64_lossy(v as f64 / 255.0)));
        }
        let labels = indices.iter().map(|&i| self.records[i].label).collect();
        (Tensor::from_vec([indices.len(), 1, s, s], data).expect("batch shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_size * self.image_size);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            image_size: self.image_size,
            num_classes: self.num_classes,
            pixels,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// The three generated splits.
#[derive(Clone, Debug)]
pub struct SynthSplits {
    pub train: Dataset,
    pub val_weight: Dataset,
    pub val_alpha: Dataset,
}

impl SynthSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::ValWeight => &self.val_weight,
            Split::ValAlpha => &self.val_alpha,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed derived from a base seed and a path of stream identifiers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Renders one sample; a pure function of `(config, split, index)`.
pub fn generate_sample(cfg: &SynthConfig, split: Split, index: usize) -> (Vec<u8>, SampleRecord) {
    let seed = derive_seed(cfg.seed, &[split.stream(), index as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let label = rng.random_range(0..cfg.num_classes);
    let (lo, hi) = cfg.band(label);
    let size = rng.random_range(lo..=hi);
    let shape = if rng.random_bool(0.5) { Shape::Square } else { Shape::Disc };
    let r0 = rng.random_range(0..=s - size);
    let c0 = rng.random_range(0..=s - size);
    let background = rng.random_range(0.25..0.75);
    let contrast = rng.random_range(0.15..0.25) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let foreground = background + contrast;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let half = size as f64 / 2.0;
    let mid = (size as f64 - 1.0) / 2.0;
    let mut img = Vec::with_capacity(s * s);
    for r in 0..s {
        for c in 0..s {
            let inside = r >= r0 && r < r0 + size && c >= c0 && c < c0 + size && {
                match shape {
                    Shape::Square => true,
                    Shape::Disc => {
                        let (dr, dc) = ((r - r0) as f64 - mid, (c - c0) as f64 - mid);
                        dr * dr + dc * dc <= half * half
                    }
                }
            };
            let base = if inside { foreground } else { background };
            let v = if cfg.noise_std > 0.0 { base + noise.sample(&mut rng) } else { base };
            img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let rec = SampleRecord {
        label,
        shape,
        size,
        origin: (r0, c0),
        background,
        foreground,
        seed,
    };
    (img, rec)
}

pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.split_size(split);
    let mut pixels = Vec::with_capacity(n * cfg.image_size * cfg.image_size);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (img, rec) = generate_sample(cfg, split, i);
        pixels.extend(img);
        records.push(rec);
    }
    Ok(Dataset {
        image_size: cfg.image_size,
        num_classes: cfg.num_classes,
        pixels,
        records,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthSplits> {
    Ok(SynthSplits {
        train: generate_split(cfg, Split::Train)?,
        val_weight: generate_split(cfg, Split::ValWeight)?,
        val_alpha: generate_split(cfg, Split::ValAlpha)?,
    })
}

/// Disjoint partition of `0..len` into `(first, second)`, `first` holding `round(ratio·len)`.
pub fn split_indices(len: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5911])));
    let k = ((len as f64 * ratio.clamp(0.0, 1.0)).round() as usize).min(len);
    let mut second = idx.split_off(k);
    idx.sort_unstable();
    second.sort_unstable();
    (idx, second)
}

/// Weight and alpha halves of one dataset.
pub fn split_for_search(data: &Dataset, ratio: f64, seed: u64) -> (Dataset, Dataset) {
    let (a, b) = split_indices(data.len(), ratio, seed);
    (data.subset(&a), data.subset(&b))
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    #[serde(flatten)]
    record: SampleRecord,
}

#[derive(Serialize, Deserialize)]
struct SplitIndex {
    image_size: usize,
    num_classes: usize,
    samples: Vec<IndexEntry>,
}

/// Writes one PNG per image plus `index.json`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let file = format!("{i:06}.png");
        crate::erf::write_gray_png(&dir.join(&file), data.image_size, data.image_size, data.image(i))?;
        samples.push(IndexEntry {
            file,
            record: data.records[i].clone(),
        });
    }
    let index = SplitIndex {
        image_size: data.image_size,
        num_classes: data.num_classes,
        samples,
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    if !index_path.exists() {
        return Err(Error::MissingArtifact(index_path));
    }
    let index: SplitIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    let mut pixels = Vec::new();
    let mut records = Vec::new();
    for e in index.samples {
        let img = crate::erf::read_gray_png(&dir.join(&e.file))?;
        if img.len() != index.image_size * index.image_size {
            return Err(Error::Shape(format!("{} is not {1}×{1}", e.file, index.image_size)));
        }
        pixels.extend(img);
        records.push(e.record);
    }
    Ok(Dataset {
        image_size: index.image_size,
        num_classes: index.num_classes,
        pixels,
        records,
    })
}

/// Accuracy of a softmax-regression classifier that sees one pixel per image.
///
/// Fitted on `train` by full-batch gradient descent and scored on `test`.
pub fn single_pixel_probe(train: &Dataset, test: &Dataset, pixel: (usize, usize)) -> f64 {
    let k = train.num_classes;
    let at = |d: &Dataset, i: usize| d.image(i)[pixel.0 * d.image_size + pixel.1] as f64 / 255.0 - 0.5;
    let mut w = vec![0.0; k];
    let mut b = vec![0.0; k];
    let n = train.len() as f64;
    for _ in 0..500 {
        let mut gw = vec![0.0; k];
        let mut gb = vec![0.0; k];
        for i in 0..train.len() {
            let x = at(train, i);
            let logits: Vec<f64> = (0..k).map(|c| w[c] * x + b[c]).collect();
            let p = crate::mixed::softmax_row(&logits);
            for c in 0..k {
                let d = p[c] - (c == train.records[i].label) as u8 as f64;
                gw[c] += d * x / n;
                gb[c] += d / n;
            }
        }
        for c in 0..k {
            w[c] -= 2.0 * gw[c];
            b[c] -= 2.0 * gb[c];
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = at(test, i);
            let logits: Vec<f64> = (0..k).map(|c| w[c] * x + b[c]).collect();
            crate::decoder::row_argmax(&logits) == test.records[i].label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(preset: ScalePreset, noise: f64) -> SynthConfig {
        SynthConfig {
            scale_preset: preset,
            noise_std: noise,
            train_size: 64,
            val_weight_size: 16,
            val_alpha_size: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn bands_partition_the_range() {
        for preset in [ScalePreset::Small, ScalePreset::Large] {
            let c = cfg(preset, 0.0);
            let (lo, hi) = preset.size_range();
            assert_eq!(c.band(0).0, lo);
            assert_eq!(c.band(3).1, hi);
            for k in 1..4 {
                assert_eq!(c.band(k).0, c.band(k - 1).1 + 1);
            }
        }
        assert_eq!(cfg(ScalePreset::Small, 0.0).band(0), (4, 5));
        assert_eq!(cfg(ScalePreset::Large, 0.0).band(3), (48, 56));
    }

    #[test]
    fn deterministic_per_index() {
        let c = cfg(ScalePreset::Large, 0.1);
        assert_eq!(generate_sample(&c, Split::Train, 0), generate_sample(&c, Split::Train, 0));
        assert_ne!(generate_sample(&c, Split::Train, 0).0, generate_sample(&c, Split::ValAlpha, 0).0);
    }

    #[test]
    fn noiseless_boxes_match_records() {
        let c = cfg(ScalePreset::Small, 0.0);
        let d = generate_split(&c, Split::Train).unwrap();
        for i in 0..d.len() {
            let r = &d.records[i];
            let bg = (r.background * 255.0).round() as u8;
            let img = d.image(i);
            let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
            for y in 0..64 {
                for x in 0..64 {
                    if img[y * 64 + x] != bg {
                        rmin = rmin.min(y);
                        rmax = rmax.max(y);
                        cmin = cmin.min(x);
                        cmax = cmax.max(x);
                    }
                }
            }
            assert_eq!(rmax - rmin + 1, r.size);
            assert_eq!(cmax - cmin + 1, r.size);
            assert!((4..=12).contains(&r.size));
            let (lo, hi) = c.band(r.label);
            assert!((lo..=hi).contains(&r.size));
        }
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let c = SynthConfig {
            image_size: 32,
            ..cfg(ScalePreset::Large, 0.0)
        };
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let c = SynthConfig {
            num_classes: 20,
            ..cfg(ScalePreset::Small, 0.0)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn search_split_is_a_partition() {
        let (a, b) = split_indices(1000, 0.5, 3);
        assert_eq!((a.len(), b.len()), (500, 500));
        let mut all = [a.clone(), b.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 0.5, 3), (a, b));
    }

    #[test]
    fn png_cache_round_trip() {
        let d = generate_split(&cfg(ScalePreset::Small, 0.1), Split::ValAlpha).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }
}
