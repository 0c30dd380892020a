//! Channel-level mixture of dilated convolutions.
//!
//! Each of the `G` candidate genotypes owns a full `C_out × C_in × 3 × 3` replica of the
//! weights. Candidate outputs are cut into `N` contiguous channel groups, and group `i`
//! of the block output is the softmax(`α_i`)-weighted sum of the candidates' group-`i`
//! slices. With `N = 1` this is the ordinary path-level relaxation.

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub genotypes: Vec<Genotype>,
    pub group_count: usize,
}

impl MixedConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        genotypes: Vec<Genotype>,
        group_count: usize,
    ) -> Result<Self> {
        let spec = MixedConvSpec {
            in_channels,
            out_channels,
            stride,
            genotypes,
            group_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape("channel counts must be positive".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Shape(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.genotypes.is_empty() {
            return Err(Error::Shape("a mixed conv needs at least one genotype".into()));
        }
        if self.group_count == 0 || !self.out_channels.is_multiple_of(self.group_count) {
            return Err(Error::Shape(format!(
                "{} output channels cannot be split into {} equal groups",
                self.out_channels, self.group_count
            )));
        }
        Ok(())
    }

    /// Channels per group, `C_out / N`.
    pub fn group_width(&self) -> usize {
        self.out_channels / self.group_count
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * KERNEL * KERNEL
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, KERNEL, KERNEL]
    }

    pub fn geom(&self, g: usize) -> ConvGeom {
        ConvGeom::same(KERNEL, self.stride, self.genotypes[g])
    }
}

/// `N × G` architecture parameters of one searchable layer, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct AlphaTable {
    groups: usize,
    genotypes: usize,
    values: Vec<f64>,
}

impl AlphaTable {
    pub fn zeros(groups: usize, genotypes: usize) -> Self {
        AlphaTable {
            groups,
            genotypes,
            values: vec![0.0; groups * genotypes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let groups = rows.len();
        let genotypes = rows.first().map_or(0, Vec::len);
        if groups == 0 || genotypes == 0 {
            return Err(Error::Shape("alpha table must be at least 1×1".into()));
        }
        if rows.iter().any(|r| r.len() != genotypes) {
            return Err(Error::Shape("alpha table rows have unequal lengths".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("alpha table contains a non-finite entry".into()));
        }
        Ok(AlphaTable {
            groups,
            genotypes,
            values,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn genotypes(&self) -> usize {
        self.genotypes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.genotypes..(i + 1) * self.genotypes]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.genotypes..(i + 1) * self.genotypes]
    }

    pub fn get(&self, i: usize, g: usize) -> f64 {
        self.values[i * self.genotypes + g]
    }

    pub fn set(&mut self, i: usize, g: usize, v: f64) {
        self.values[i * self.genotypes + g] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.genotypes).map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Row-wise softmax, `N × G` row-major.
    pub fn probabilities(&self) -> Vec<f64> {
        self.values.chunks(self.genotypes).flat_map(softmax_row).collect()
    }

    /// Mixing table with each row one-hot at its argmax (ties to the lowest index).
    pub fn one_hot_argmax(&self) -> AlphaTable {
        let mut out = AlphaTable::zeros(self.groups, self.genotypes);
        for i in 0..self.groups {
            let best = crate::decoder::row_argmax(self.row(i));
            out.set(i, best, 1.0);
        }
        out
    }

    fn check_shape(&self, spec: &MixedConvSpec) -> Result<()> {
        if self.groups != spec.group_count || self.genotypes != spec.genotypes.len() {
            return Err(Error::Shape(format!(
                "alpha table is {}×{} but the layer needs {}×{}",
                self.groups,
                self.genotypes,
                spec.group_count,
                spec.genotypes.len()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for AlphaTable {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        AlphaTable::from_rows(rows)
    }
}

impl From<AlphaTable> for Vec<Vec<f64>> {
    fn from(t: AlphaTable) -> Self {
        t.rows()
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&a| (a - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-genotype weight replicas, all `C_out × C_in × 3 × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateWeights<T> {
    shape: [usize; 4],
    replicas: Vec<Vec<T>>,
}

impl<T: Scalar> CandidateWeights<T> {
    pub fn new(shape: [usize; 4], replicas: Vec<Vec<T>>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if replicas.is_empty() || replicas.iter().any(|r| r.len() != len) {
            return Err(Error::Shape(format!(
                "every replica must hold {len} values for shape {shape:?}"
            )));
        }
        Ok(CandidateWeights { shape, replicas })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn replica(&self, g: usize) -> &[T] {
        &self.replicas[g]
    }

    pub fn replica_mut(&mut self, g: usize) -> &mut [T] {
        &mut self.replicas[g]
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }
}

/// Copies a pretrained 3×3 weight into `genotypes` independent replicas.
pub fn init_from_baseline<T: Scalar>(
    baseline: &[T],
    shape: [usize; 4],
    genotypes: usize,
) -> Result<CandidateWeights<T>> {
    if shape[2] != KERNEL || shape[3] != KERNEL {
        return Err(Error::Shape(format!(
            "only 3×3 convolutions are searchable, got {}×{}",
            shape[2], shape[3]
        )));
    }
    if baseline.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "baseline weight has {} values, shape {shape:?} needs {}",
            baseline.len(),
            shape.iter().product::<usize>()
        )));
    }
    CandidateWeights::new(shape, vec![baseline.to_vec(); genotypes])
}

/// One candidate path: dilated 3×3 conv with "same" padding for its dilation.
pub fn candidate_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    out_channels: usize,
    genotype: Genotype,
    stride: usize,
) -> Result<Tensor<T>> {
    conv2d_forward(x, weight, out_channels, &ConvGeom::same(KERNEL, stride, genotype))
}

fn mix_outputs<T: Scalar>(outputs: &[Tensor<T>], probs: &[f64], spec: &MixedConvSpec) -> Tensor<T> {
    let g_count = spec.genotypes.len();
    let width = spec.group_width();
    let shape = outputs[0].shape();
    let mut y = Tensor::zeros(shape);
    let probs_t: Vec<T> = probs.iter().map(|&p| T::from_f64_lossy(p)).collect();
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            let row = &probs_t[(c / width) * g_count..(c / width + 1) * g_count];
            let dst = y.channel_mut(n, c);
            for (g, out) in outputs.iter().enumerate() {
                let p = row[g];
                for (d, &v) in dst.iter_mut().zip(out.channel(n, c)) {
                    *d += p * v;
                }
            }
        }
    }
    y
}

/// Stateless evaluation of the mixed block.
pub fn mixed_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &CandidateWeights<T>,
    alpha: &AlphaTable,
    spec: &MixedConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    alpha.check_shape(spec)?;
    check_weights(weights, spec)?;
    let outputs = (0..spec.genotypes.len())
        .map(|g| conv2d_forward(x, weights.replica(g), spec.out_channels, &spec.geom(g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mix_outputs(&outputs, &alpha.probabilities(), spec))
}

/// Mixed block with explicit `N × G` mixing weights in place of `softmax(α)`; a one-hot
/// table gives the hard-selected supernet.
pub fn mixed_forward_probs<T: Scalar>(
    x: &Tensor<T>,
    weights: &CandidateWeights<T>,
    probs: &[f64],
    spec: &MixedConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_weights(weights, spec)?;
    if probs.len() != spec.group_count * spec.genotypes.len() {
        return Err(Error::Shape("mixing table does not match the layer".into()));
    }
    let outputs = (0..spec.genotypes.len())
        .map(|g| conv2d_forward(x, weights.replica(g), spec.out_channels, &spec.geom(g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mix_outputs(&outputs, probs, spec))
}

fn check_weights<T: Scalar>(weights: &CandidateWeights<T>, spec: &MixedConvSpec) -> Result<()> {
    if weights.len() != spec.genotypes.len() || weights.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "{} replicas of shape {:?} do not fit a layer with {} genotypes and weight shape {:?}",
            weights.len(),
            weights.shape(),
            spec.genotypes.len(),
            spec.weight_shape()
        )));
    }
    Ok(())
}

struct MixedCache<T> {
    x: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    probs: Vec<f64>,
}

/// Trainable mixed block: weight replicas, alpha table, their gradients and a forward cache.
pub struct MixedConv<T> {
    spec: MixedConvSpec,
    weights: CandidateWeights<T>,
    weight_grads: Vec<Vec<T>>,
    alpha: AlphaTable,
    alpha_grad: Vec<f64>,
    cache: Option<MixedCache<T>>,
}

impl<T: Scalar> MixedConv<T> {
    pub fn new(spec: MixedConvSpec, weights: CandidateWeights<T>, alpha: AlphaTable) -> Result<Self> {
        spec.validate()?;
        check_weights(&weights, &spec)?;
        alpha.check_shape(&spec)?;
        let weight_grads = vec![vec![T::zero(); spec.weight_len()]; spec.genotypes.len()];
        let alpha_grad = vec![0.0; alpha.values().len()];
        Ok(MixedConv {
            spec,
            weights,
            weight_grads,
            alpha,
            alpha_grad,
            cache: None,
        })
    }

    pub fn spec(&self) -> &MixedConvSpec {
        &self.spec
    }

    pub fn weights(&self) -> &CandidateWeights<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut CandidateWeights<T> {
        &mut self.weights
    }

    pub fn alpha(&self) -> &AlphaTable {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut AlphaTable {
        &mut self.alpha
    }

    pub fn alpha_grad(&self) -> &[f64] {
        &self.alpha_grad
    }

    pub fn weight_grad(&self, g: usize) -> &[T] {
        &self.weight_grads[g]
    }

    pub(crate) fn params_mut(&mut self) -> (&mut CandidateWeights<T>, &mut Vec<Vec<T>>) {
        (&mut self.weights, &mut self.weight_grads)
    }

    pub(crate) fn alpha_and_grad_mut(&mut self) -> (&mut AlphaTable, &mut Vec<f64>) {
        (&mut self.alpha, &mut self.alpha_grad)
    }

    pub fn zero_grad(&mut self) {
        self.weight_grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v = T::zero()));
        self.alpha_grad.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let outputs = (0..self.spec.genotypes.len())
            .map(|g| conv2d_forward(x, self.weights.replica(g), self.spec.out_channels, &self.spec.geom(g)))
            .collect::<Result<Vec<_>>>()?;
        let probs = self.alpha.probabilities();
        let y = mix_outputs(&outputs, &probs, &self.spec);
        self.cache = Some(MixedCache {
            x: x.clone(),
            outputs,
            probs,
        });
        Ok(y)
    }

    /// Back-propagates `dy`; weight and alpha gradients are accumulated when requested.
    pub fn backward(&mut self, dy: &Tensor<T>, want_dx: bool, weight_grads: bool, alpha_grads: bool) -> Result<Option<Tensor<T>>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Consistency("mixed conv backward called before forward".into()))?;
        let spec = &self.spec;
        let g_count = spec.genotypes.len();
        let width = spec.group_width();
        let shape = dy.shape();

        if alpha_grads {
            // dL/dp[i][g] = Σ_{c∈i} <dy_c, y^g_c>
            let mut dp = vec![0.0f64; spec.group_count * g_count];
            for (g, out) in cache.outputs.iter().enumerate() {
                for n in 0..shape[0] {
                    for c in 0..shape[1] {
                        let s: T = dy
                            .channel(n, c)
                            .iter()
                            .zip(out.channel(n, c))
                            .map(|(&a, &b)| a * b)
                            .sum();
                        dp[(c / width) * g_count + g] += s.to_f64().unwrap();
                    }
                }
            }
            for i in 0..spec.group_count {
                let p = &cache.probs[i * g_count..(i + 1) * g_count];
                let d = &dp[i * g_count..(i + 1) * g_count];
                let dot: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
                for g in 0..g_count {
                    self.alpha_grad[i * g_count + g] += p[g] * (d[g] - dot);
                }
            }
        }

        if !want_dx && !weight_grads {
            return Ok(None);
        }
        let mut dx: Option<Tensor<T>> = None;
        for g in 0..g_count {
            let mut dyg = dy.clone();
            for n in 0..shape[0] {
                for c in 0..shape[1] {
                    let p = T::from_f64_lossy(cache.probs[(c / width) * g_count + g]);
                    dyg.channel_mut(n, c).iter_mut().for_each(|v| *v *= p);
                }
            }
            let dw = if weight_grads {
                Some(self.weight_grads[g].as_mut_slice())
            } else {
                None
            };
            let part = conv2d_backward(
                cache.x.shape(),
                Some(&cache.x),
                self.weights.replica(g),
                spec.out_channels,
                &spec.geom(g),
                &dyg,
                want_dx,
                dw,
            )?;
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

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: [usize; 4], s: &mut u64) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| lcg(s)).collect()).unwrap()
    }

    fn sym(ds: &[u32]) -> Vec<Genotype> {
        ds.iter().map(|&d| Genotype::symmetric(d).unwrap()).collect()
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_row(&[0.0, 0.0, 0.0]);
        u.iter().for_each(|&p| assert!((p - 1.0 / 3.0).abs() < 1e-15));
        let big = softmax_row(&[1000.0, 0.0]);
        assert_eq!(big[0], 1.0);
        assert!(big[1] >= 0.0 && big[1] < 1e-300);
        let p = softmax_row(&[1.0, 2.0, 3.0]);
        // reference values from arbitrary-precision evaluation
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impulse_through_dilated_conv() {
        let mut x = Tensor::<f64>::zeros([1, 1, 9, 9]);
        x.set(0, 0, 4, 4, 1.0);
        let y = candidate_forward(&x, &[1.0; 9], 1, Genotype::symmetric(2).unwrap(), 1).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let tap = [2, 4, 6].contains(&r) && [2, 4, 6].contains(&c);
                assert_eq!(y.at(0, 0, r, c) != 0.0, tap, "({r},{c})");
            }
        }
        let mut x = Tensor::<f64>::zeros([1, 1, 7, 7]);
        x.set(0, 0, 3, 3, 1.0);
        let y = candidate_forward(&x, &[1.0; 9], 1, Genotype::new(1, 3).unwrap(), 1).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let tap = [2, 3, 4].contains(&r) && [0, 3, 6].contains(&c);
                assert_eq!(y.at(0, 0, r, c) != 0.0, tap, "({r},{c})");
            }
        }
    }

    #[test]
    fn identity_genotype_is_plain_conv() {
        let mut s = 5;
        let x = rand_tensor([1, 2, 6, 6], &mut s);
        let w: Vec<f64> = (0..3 * 2 * 9).map(|_| lcg(&mut s)).collect();
        let a = candidate_forward(&x, &w, 3, Genotype::IDENTITY, 1).unwrap();
        let plain = ConvGeom {
            kernel: (3, 3),
            stride: 1,
            dilation: (1, 1),
            padding: (1, 1),
        };
        assert_eq!(a, conv2d_forward(&x, &w, 3, &plain).unwrap());
    }

    #[test]
    fn all_genotypes_share_output_shape() {
        let x = Tensor::<f64>::zeros([1, 1, 7, 6]);
        for stride in [1, 2] {
            let shapes: Vec<_> = [(1, 1), (2, 2), (5, 5), (1, 5), (3, 1)]
                .iter()
                .map(|&(a, b)| {
                    candidate_forward(&x, &[0.0; 9], 1, Genotype::new(a, b).unwrap(), stride)
                        .unwrap()
                        .shape()
                })
                .collect();
            assert!(shapes.windows(2).all(|w| w[0] == w[1]));
            assert_eq!(shapes[0], [1, 1, 7_usize.div_ceil(stride), 6_usize.div_ceil(stride)]);
        }
    }

    #[test]
    fn single_genotype_ignores_alpha() {
        let mut s = 9;
        let spec = MixedConvSpec::new(2, 4, 1, sym(&[3]), 2).unwrap();
        let x = rand_tensor([1, 2, 5, 5], &mut s);
        let w: Vec<f64> = (0..spec.weight_len()).map(|_| lcg(&mut s)).collect();
        let cw = init_from_baseline(&w, spec.weight_shape(), 1).unwrap();
        let mut alpha = AlphaTable::zeros(2, 1);
        alpha.set(0, 0, 7.5);
        let y = mixed_forward(&x, &cw, &alpha, &spec).unwrap();
        let c = candidate_forward(&x, &w, 4, Genotype::symmetric(3).unwrap(), 1).unwrap();
        assert_eq!(y, c);
    }

    #[test]
    fn replicas_are_independent_copies() {
        let w: Vec<f32> = (0..2 * 9).map(|i| i as f32).collect();
        let mut cw = init_from_baseline(&w, [2, 1, 3, 3], 3).unwrap();
        for g in 0..3 {
            assert_eq!(cw.replica(g), &w[..]);
        }
        cw.replica_mut(0)[0] = 99.0;
        assert_eq!(cw.replica(1), &w[..]);
        assert_eq!(cw.replica(2), &w[..]);
        assert!(init_from_baseline(&w, [2, 1, 1, 9], 2).is_err());
        assert_eq!(init_from_baseline(&w, [2, 1, 3, 3], 1).unwrap().len(), 1);
    }

    #[test]
    fn group_locality_and_convexity() {
        let mut s = 21;
        let spec = MixedConvSpec::new(3, 8, 2, sym(&[1, 2, 3]), 4).unwrap();
        let x = rand_tensor([2, 3, 8, 8], &mut s);
        let reps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..spec.weight_len()).map(|_| lcg(&mut s)).collect())
            .collect();
        let cw = CandidateWeights::new(spec.weight_shape(), reps).unwrap();
        let mut alpha = AlphaTable::zeros(4, 3);
        alpha.values_mut().iter_mut().for_each(|v| *v = lcg(&mut s));
        let base = mixed_forward(&x, &cw, &alpha, &spec).unwrap();

        let mut bumped = alpha.clone();
        bumped.set(1, 2, alpha.get(1, 2) + 0.7);
        let after = mixed_forward(&x, &cw, &bumped, &spec).unwrap();
        for n in 0..2 {
            for c in 0..8 {
                let same = base.channel(n, c) == after.channel(n, c);
                assert_eq!(same, c / 2 != 1, "channel {c}");
            }
        }

        let outs: Vec<_> = (0..3)
            .map(|g| conv2d_forward(&x, cw.replica(g), 8, &spec.geom(g)).unwrap())
            .collect();
        for (i, &v) in base.data().iter().enumerate() {
            let lo = outs.iter().map(|o| o.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = outs.iter().map(|o| o.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn alpha_shape_is_checked() {
        let spec = MixedConvSpec::new(1, 4, 1, sym(&[1, 2]), 2).unwrap();
        let cw = init_from_baseline(&[0.0f64; 36], spec.weight_shape(), 2).unwrap();
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(mixed_forward(&x, &cw, &AlphaTable::zeros(2, 3), &spec).is_err());
        assert!(MixedConvSpec::new(1, 6, 1, sym(&[1]), 4).is_err());
        assert!(MixedConvSpec::new(1, 4, 3, sym(&[1]), 4).is_err());
    }

    #[test]
    fn alpha_table_rejects_non_finite() {
        assert!(AlphaTable::from_rows(vec![vec![0.0, f64::NAN]]).is_err());
        assert!(AlphaTable::from_rows(vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        let t: AlphaTable = serde_json::from_str("[[0.5,1.5],[2.0,-1.0]]").unwrap();
        assert_eq!(t.get(1, 0), 2.0);
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut s = 33;
        let spec = MixedConvSpec::new(2, 4, 1, sym(&[1, 2, 3]), 2).unwrap();
        let x = rand_tensor([1, 2, 6, 6], &mut s);
        let reps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..spec.weight_len()).map(|_| lcg(&mut s)).collect())
            .collect();
        let cw = CandidateWeights::new(spec.weight_shape(), reps).unwrap();
        let mut alpha = AlphaTable::zeros(2, 3);
        alpha.values_mut().iter_mut().for_each(|v| *v = lcg(&mut s));
        let probe = rand_tensor([1, 4, 6, 6], &mut s);
        let loss = |a: &AlphaTable, xx: &Tensor<f64>| -> f64 {
            let y = mixed_forward(xx, &cw, a, &spec).unwrap();
            y.data().iter().zip(probe.data()).map(|(u, v)| u * v).sum()
        };
        let mut layer = MixedConv::new(spec.clone(), cw.clone(), alpha.clone()).unwrap();
        layer.forward(&x).unwrap();
        let dx = layer.backward(&probe, true, true, true).unwrap().unwrap();
        let h = 1e-5;
        for k in 0..6 {
            let mut p = alpha.clone();
            p.values_mut()[k] += h;
            let mut m = alpha.clone();
            m.values_mut()[k] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - layer.alpha_grad()[k]).abs() < 1e-7, "alpha {k}");
        }
        for k in [0, 17, 40, 71] {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (loss(&alpha, &xp) - loss(&alpha, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[k]).abs() < 1e-7, "x {k}");
        }
    }
}
