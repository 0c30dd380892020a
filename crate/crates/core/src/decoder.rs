//! Turning a trained alpha table into a discrete multi-dilation convolution.
//!
//! Every channel group keeps its argmax genotype. The share of groups choosing each
//! genotype (its intensity) sets how many output channels that genotype receives, and
//! the baseline weight is sliced row-wise to match. The decoded block emits genotype
//! 0's channels first, then genotype 1's, and so on; the recorded permutation says
//! which original channel sits at each decoded position.

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::mixed::{AlphaTable, MixedConvSpec, KERNEL};
use crate::tensor::{Scalar, Tensor};

/// Argmax with ties resolved toward the lowest index.
pub fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (g, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = g;
        }
    }
    best
}

/// Per-group chosen genotype index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexVector {
    ind: Vec<usize>,
    genotypes: usize,
}

impl IndexVector {
    pub fn new(ind: Vec<usize>, genotypes: usize) -> Result<Self> {
        if ind.is_empty() {
            return Err(Error::Shape("index vector needs at least one group".into()));
        }
        if let Some(&bad) = ind.iter().find(|&&g| g >= genotypes) {
            return Err(Error::Shape(format!(
                "genotype index {bad} out of range for {genotypes} genotypes"
            )));
        }
        Ok(IndexVector { ind, genotypes })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.ind
    }

    pub fn groups(&self) -> usize {
        self.ind.len()
    }

    pub fn genotypes(&self) -> usize {
        self.genotypes
    }
}

pub fn decode_indices(alpha: &AlphaTable) -> IndexVector {
    let ind = (0..alpha.groups()).map(|i| row_argmax(alpha.row(i))).collect();
    IndexVector {
        ind,
        genotypes: alpha.genotypes(),
    }
}

/// Genotype intensities held as exact counts over `N` groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntensityVector {
    counts: Vec<usize>,
    groups: usize,
}

impl IntensityVector {
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// `I^g` materialized as floats.
    pub fn values(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&k| k as f64 / self.groups as f64)
            .collect()
    }

    /// Rational check that the intensities sum to one.
    pub fn sums_to_one(&self) -> bool {
        self.counts.iter().sum::<usize>() == self.groups
    }
}

pub fn intensity(ind: &IndexVector) -> IntensityVector {
    let mut counts = vec![0; ind.genotypes];
    for &g in &ind.ind {
        counts[g] += 1;
    }
    IntensityVector {
        counts,
        groups: ind.groups(),
    }
}

/// `C_out^g = C_out · I^g`, exact under equal grouping.
pub fn decoded_channels(c_out: usize, intensity: &IntensityVector) -> Result<Vec<usize>> {
    let n = intensity.groups;
    if n == 0 || !c_out.is_multiple_of(n) {
        return Err(Error::Consistency(format!(
            "{c_out} channels are not an integer multiple of {n} groups"
        )));
    }
    let channels: Vec<usize> = intensity.counts.iter().map(|&k| k * c_out / n).collect();
    if channels.iter().sum::<usize>() != c_out {
        return Err(Error::Consistency("decoded channels do not sum to C_out".into()));
    }
    Ok(channels)
}

/// Gather order of the decoded block: position `p` holds original channel `perm[p]`.
///
/// Groups are stably sorted by chosen genotype; each contributes its contiguous
/// `C_out / N` channels.
pub fn channel_permutation(ind: &IndexVector, c_out: usize) -> Result<Vec<usize>> {
    let n = ind.groups();
    if !c_out.is_multiple_of(n) {
        return Err(Error::Shape(format!(
            "{c_out} channels cannot be split into {n} equal groups"
        )));
    }
    let width = c_out / n;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| ind.ind[i]);
    Ok(order
        .into_iter()
        .flat_map(|i| i * width..(i + 1) * width)
        .collect())
}

/// Inverse of a gather order: original channel → decoded position.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (p, &c) in perm.iter().enumerate() {
        inv[c] = p;
    }
    inv
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &c in perm {
        if c >= perm.len() || seen[c] {
            return false;
        }
        seen[c] = true;
    }
    true
}

/// Splits `W_baseline` (`C_out × C_in × 3 × 3`) row-wise by chosen genotype.
///
/// Returns one slice per genotype index (empty for unchosen genotypes), rows in
/// ascending original order.
pub fn decompose_weights<T: Scalar>(
    baseline: &[T],
    shape: [usize; 4],
    ind: &IndexVector,
) -> Result<Vec<Vec<T>>> {
    let [c_out, c_in, kh, kw] = shape;
    if baseline.len() != c_out * c_in * kh * kw {
        return Err(Error::Shape(format!(
            "baseline weight has {} values, shape {shape:?} needs {}",
            baseline.len(),
            c_out * c_in * kh * kw
        )));
    }
    let n = ind.groups();
    if c_out % n != 0 {
        return Err(Error::Shape(format!(
            "{c_out} output rows cannot be split into {n} equal groups"
        )));
    }
    let width = c_out / n;
    let row = c_in * kh * kw;
    let mut slices = vec![Vec::new(); ind.genotypes];
    for (i, &g) in ind.ind.iter().enumerate() {
        slices[g].extend_from_slice(&baseline[i * width * row..(i + 1) * width * row]);
    }
    Ok(slices)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedEntry {
    pub dilation: Genotype,
    pub channels: usize,
}

/// Discrete outcome for one searchable layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodedBlockSpec {
    pub layer: String,
    pub entries: Vec<DecodedEntry>,
    pub permutation: Vec<usize>,
}

impl DecodedBlockSpec {
    /// Single-genotype spec keeping all channels in place.
    pub fn identity(layer: impl Into<String>, c_out: usize) -> Self {
        DecodedBlockSpec {
            layer: layer.into(),
            entries: vec![DecodedEntry {
                dilation: Genotype::IDENTITY,
                channels: c_out,
            }],
            permutation: (0..c_out).collect(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.entries.iter().map(|e| e.channels).sum()
    }

    pub fn is_identity(&self) -> bool {
        self.entries.iter().all(|e| e.dilation.is_identity())
            && self.permutation.iter().enumerate().all(|(p, &c)| p == c)
    }

    /// Structural checks that hold for any well-formed spec.
    pub fn validate(&self, c_out: usize) -> Result<()> {
        let field = |f: &str| format!("layers.{}.{f}", self.layer);
        if self.entries.is_empty() {
            return Err(Error::schema(field("entries"), "must not be empty"));
        }
        if self.entries.iter().any(|e| e.channels == 0) {
            return Err(Error::schema(field("entries"), "zero-channel entries are not allowed"));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|o| o.dilation == e.dilation) {
                return Err(Error::schema(field("entries"), format!("dilation {} repeated", e.dilation)));
            }
        }
        if self.out_channels() != c_out {
            return Err(Error::schema(
                field("entries"),
                format!("channels sum to {} but the layer has {c_out}", self.out_channels()),
            ));
        }
        if self.permutation.len() != c_out || !is_permutation(&self.permutation) {
            return Err(Error::schema(
                field("permutation"),
                format!("must be a permutation of 0..{c_out}"),
            ));
        }
        Ok(())
    }

    /// Mean dilation weighted by channel share, per axis.
    pub fn mean_dilation(&self) -> (f64, f64) {
        let total = self.out_channels() as f64;
        self.entries.iter().fold((0.0, 0.0), |(h, w), e| {
            let s = e.channels as f64 / total;
            (h + s * e.dilation.dh() as f64, w + s * e.dilation.dw() as f64)
        })
    }
}

/// A decoded convolution: one dilated sub-conv per surviving genotype, outputs concatenated.
#[derive(Clone, Debug)]
pub struct DecodedConv<T> {
    in_channels: usize,
    stride: usize,
    entries: Vec<DecodedEntry>,
    weights: Vec<Vec<T>>,
    grads: Vec<Vec<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> DecodedConv<T> {
    pub fn new(in_channels: usize, stride: usize, entries: Vec<DecodedEntry>, weights: Vec<Vec<T>>) -> Result<Self> {
        if entries.len() != weights.len() || entries.is_empty() {
            return Err(Error::Shape("one weight slice per decoded entry is required".into()));
        }
        for (e, w) in entries.iter().zip(&weights) {
            if w.len() != e.channels * in_channels * KERNEL * KERNEL {
                return Err(Error::Shape(format!(
                    "sub-conv {} expects {} values, got {}",
                    e.dilation,
                    e.channels * in_channels * KERNEL * KERNEL,
                    w.len()
                )));
            }
        }
        let grads = weights.iter().map(|w| vec![T::zero(); w.len()]).collect();
        Ok(DecodedConv {
            in_channels,
            stride,
            entries,
            weights,
            grads,
            cache: None,
        })
    }

    pub fn entries(&self) -> &[DecodedEntry] {
        &self.entries
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.entries.iter().map(|e| e.channels).sum()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn weights(&self) -> &[Vec<T>] {
        &self.weights
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Vec<Vec<T>>, &mut Vec<Vec<T>>) {
        (&mut self.weights, &mut self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v = T::zero()));
    }

    fn geom(&self, e: &DecodedEntry) -> ConvGeom {
        ConvGeom::same(KERNEL, self.stride, e.dilation)
    }

    /// Stateless evaluation.
    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let parts = self
            .entries
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| conv2d_forward(x, w, e.channels, &self.geom(e)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_channels(&parts)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.eval(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, want_dx: bool, weight_grads: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Consistency("decoded conv backward called before forward".into()))?;
        let mut dx: Option<Tensor<T>> = None;
        let mut start = 0;
        for k in 0..self.entries.len() {
            let e = self.entries[k];
            let order: Vec<usize> = (start..start + e.channels).collect();
            start += e.channels;
            let dyk = dy.gather_channels(&order);
            let geom = self.geom(&e);
            let dw = if weight_grads {
                Some(self.grads[k].as_mut_slice())
            } else {
                None
            };
            let part = conv2d_backward(x.shape(), Some(x), &self.weights[k], e.channels, &geom, &dyk, want_dx, dw)?;
            if let Some(part) = part {
                match dx.as_mut() {
                    Some(acc) => acc.add_assign(&part),
                    None => dx = Some(part),
                }
            }
        }
        Ok(dx)
    }
}

/// Full decode of one layer: indices → intensities → channels → permutation → weights.
pub fn decode_block<T: Scalar>(
    layer: &str,
    alpha: &AlphaTable,
    spec: &MixedConvSpec,
    baseline: &[T],
) -> Result<(DecodedBlockSpec, DecodedConv<T>)> {
    spec.validate()?;
    if alpha.groups() != spec.group_count || alpha.genotypes() != spec.genotypes.len() {
        return Err(Error::Shape(format!(
            "alpha table {}×{} does not match layer {layer} ({}×{})",
            alpha.groups(),
            alpha.genotypes(),
            spec.group_count,
            spec.genotypes.len()
        )));
    }
    let ind = decode_indices(alpha);
    let block = block_spec_from_indices(layer, &ind, spec)?;
    let slices = decompose_weights(baseline, spec.weight_shape(), &ind)?;
    let weights: Vec<Vec<T>> = slices.into_iter().filter(|s| !s.is_empty()).collect();
    let conv = DecodedConv::new(spec.in_channels, spec.stride, block.entries.clone(), weights)?;
    Ok((block, conv))
}

/// The [`DecodedBlockSpec`] implied by an index vector.
pub fn block_spec_from_indices(layer: &str, ind: &IndexVector, spec: &MixedConvSpec) -> Result<DecodedBlockSpec> {
    let inten = intensity(ind);
    let channels = decoded_channels(spec.out_channels, &inten)?;
    let entries = spec
        .genotypes
        .iter()
        .zip(&channels)
        .filter(|(_, &c)| c > 0)
        .map(|(&dilation, &channels)| DecodedEntry { dilation, channels })
        .collect();
    Ok(DecodedBlockSpec {
        layer: layer.to_string(),
        entries,
        permutation: channel_permutation(ind, spec.out_channels)?,
    })
}

/// Rebuilds a decoded conv from a stored spec and the baseline weight.
///
/// The baseline rows are gathered in the spec's permutation order and cut into
/// consecutive runs matching each entry's channel count.
pub fn decoded_conv_from_spec<T: Scalar>(
    block: &DecodedBlockSpec,
    baseline: &[T],
    shape: [usize; 4],
    stride: usize,
) -> Result<DecodedConv<T>> {
    let [c_out, c_in, kh, kw] = shape;
    if kh != KERNEL || kw != KERNEL {
        return Err(Error::Shape("only 3×3 layers can be decoded".into()));
    }
    block.validate(c_out)?;
    let row = c_in * kh * kw;
    if baseline.len() != c_out * row {
        return Err(Error::Shape("baseline weight length mismatch".into()));
    }
    let mut weights = Vec::with_capacity(block.entries.len());
    let mut pos = 0;
    for e in &block.entries {
        let mut w = Vec::with_capacity(e.channels * row);
        for &c in &block.permutation[pos..pos + e.channels] {
            w.extend_from_slice(&baseline[c * row..(c + 1) * row]);
        }
        pos += e.channels;
        weights.push(w);
    }
    DecodedConv::new(c_in, stride, block.entries.clone(), weights)
}
