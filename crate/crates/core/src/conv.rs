//! 2-D cross-correlation with stride, per-axis dilation and zero padding.
//!
//! Weights are stored `C_out × C_in × K_h × K_w`, row-major. Evaluation lowers each
//! sample to an im2col matrix and hands the product to a GEMM kernel.

use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    /// Padding `d·(K−1)/2` per axis, so every dilation yields `⌈H/stride⌉ × ⌈W/stride⌉`.
    pub fn same(kernel: usize, stride: usize, dilation: Genotype) -> Self {
        let (dh, dw) = (dilation.dh() as usize, dilation.dw() as usize);
        ConvGeom {
            kernel: (kernel, kernel),
            stride,
            dilation: (dh, dw),
            padding: (dh * (kernel - 1) / 2, dw * (kernel - 1) / 2),
        }
    }

    pub fn pointwise(stride: usize) -> Self {
        ConvGeom {
            kernel: (1, 1),
            stride,
            dilation: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = self.dilation.0 * (self.kernel.0 - 1) + 1;
        let span_w = self.dilation.1 * (self.kernel.1 - 1) + 1;
        let (ph, pw) = (h + 2 * self.padding.0, w + 2 * self.padding.1);
        if ph < span_h || pw < span_w || self.stride == 0 {
            return Err(Error::Shape(format!(
                "input {h}×{w} too small for kernel {:?} with dilation {:?}",
                self.kernel, self.dilation
            )));
        }
        Ok(((ph - span_h) / self.stride + 1, (pw - span_w) / self.stride + 1))
    }

    fn is_trivial_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == (0, 0)
    }
}

/// Lowers one `C×H×W` sample into columns `off..off + H'·W'` of a `(C·K_h·K_w)`-row
/// matrix with row stride `ld`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T], ld: usize, off: usize) {
    let (kh, kw) = g.kernel;
    let (dh, dw) = g.dilation;
    let (ph, pw) = g.padding;
    let s = g.stride;
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ld + off..row * ld + off + plane];
                let (lo, hi, shift) = valid_span(kj * dw, pw, s, w, ow);
                for oy in 0..oh {
                    let iy = (oy * s + ki * dh) as isize - ph as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                    drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if s == 1 {
                        let a = (lo as isize + shift) as usize;
                        drow[lo..hi].copy_from_slice(&src[a..a + hi - lo]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[(ox as isize * s as isize + shift) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·s + shift` lies inside `0..w`.
fn valid_span(tap_offset: usize, pad: usize, s: usize, w: usize, ow: usize) -> (usize, usize, isize) {
    let shift = tap_offset as isize - pad as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(s) };
    let last = w as isize - 1 - shift;
    let hi = if last < 0 { 0 } else { (last as usize / s + 1).min(ow) };
    (lo.min(hi), hi, shift)
}

/// Scatter-adds columns `off..off + H'·W'` of an im2col-shaped gradient onto a sample.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [T], ld: usize, off: usize) {
    let (kh, kw) = g.kernel;
    let (dh, dw) = g.dilation;
    let (ph, pw) = g.padding;
    let s = g.stride;
    let plane = oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ld + off..row * ld + off + plane];
                let (lo, hi, shift) = valid_span(kj * dw, pw, s, w, ow);
                for oy in 0..oh {
                    let iy = (oy * s + ki * dh) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let a = (lo as isize + shift) as usize;
                        for (d, &v) in drow[a..a + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[(ox as isize * s as isize + shift) as usize] += srow[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_weight<T>(x_channels: usize, weight: &[T], c_out: usize, g: &ConvGeom) -> Result<()> {
    let want = c_out * x_channels * g.taps();
    if weight.len() != want {
        return Err(Error::Shape(format!(
            "weight has {} values but {c_out}×{x_channels}×{}×{} needs {want}",
            weight.len(),
            g.kernel.0,
            g.kernel.1
        )));
    }
    Ok(())
}

/// All samples lowered side by side: `(C·K_h·K_w) × (N·H'·W')`.
fn lower_batch<T: Scalar>(x: &Tensor<T>, g: &ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let plane = oh * ow;
    let ld = n * plane;
    let mut cols = vec![T::zero(); c * g.taps() * ld];
    for b in 0..n {
        if g.is_trivial_pointwise() {
            for ci in 0..c {
                cols[ci * ld + b * plane..ci * ld + (b + 1) * plane].copy_from_slice(x.channel(b, ci));
            }
        } else {
            im2col(x.sample(b), c, h, w, g, oh, ow, &mut cols, ld, b * plane);
        }
    }
    cols
}

/// Forward pass: `y[n] = W · im2col(x[n])`, as one product over the whole batch.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], c_out: usize, g: &ConvGeom) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    check_weight(c, weight, c_out, g)?;
    let (oh, ow) = g.out_size(h, w)?;
    let k = c * g.taps();
    let plane = oh * ow;
    let mut y = Tensor::zeros([n, c_out, oh, ow]);
    let wmat = MatRef::new(weight, c_out, k);
    if n == 1 && g.is_trivial_pointwise() {
        gemm(wmat, MatRef::new(x.sample(0), c, plane), y.sample_mut(0), false);
        return Ok(y);
    }
    let cols = lower_batch(x, g, oh, ow);
    let mut out = vec![T::zero(); c_out * n * plane];
    gemm(wmat, MatRef::new(&cols, k, n * plane), &mut out, false);
    for b in 0..n {
        for o in 0..c_out {
            y.channel_mut(b, o)
                .copy_from_slice(&out[o * n * plane + b * plane..o * n * plane + (b + 1) * plane]);
        }
    }
    Ok(y)
}

/// Backward pass. Accumulates `dW` into `dweight` when given (requires `x`) and
/// returns `dx` when `want_dx`. `dx` never reads `x`, so it is exactly input-independent.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x_shape: [usize; 4],
    x: Option<&Tensor<T>>,
    weight: &[T],
    c_out: usize,
    g: &ConvGeom,
    dy: &Tensor<T>,
    want_dx: bool,
    dweight: Option<&mut [T]>,
) -> Result<Option<Tensor<T>>> {
    let [n, c, h, w] = x_shape;
    check_weight(c, weight, c_out, g)?;
    let (oh, ow) = g.out_size(h, w)?;
    if dy.shape() != [n, c_out, oh, ow] {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match conv output [{n}, {c_out}, {oh}, {ow}]",
            dy.shape()
        )));
    }
    let k = c * g.taps();
    let plane = oh * ow;
    let ld = n * plane;
    // dy regrouped as `C_out × (N·H'·W')`
    let mut dyc = vec![T::zero(); c_out * ld];
    for b in 0..n {
        for o in 0..c_out {
            dyc[o * ld + b * plane..o * ld + (b + 1) * plane].copy_from_slice(dy.channel(b, o));
        }
    }
    let dymat = MatRef::new(&dyc, c_out, ld);

    if let Some(dw) = dweight {
        let x = x.ok_or_else(|| Error::Shape("weight gradient needs the forward input".into()))?;
        if dw.len() != weight.len() {
            return Err(Error::Shape("weight-gradient buffer has the wrong length".into()));
        }
        if x.shape() != x_shape {
            return Err(Error::Shape("forward input does not match the recorded shape".into()));
        }
        let cols = lower_batch(x, g, oh, ow);
        gemm(dymat, MatRef::new(&cols, k, ld).t(), dw, true);
    }

    if !want_dx {
        return Ok(None);
    }
    let mut dx = Tensor::zeros(x_shape);
    let mut dcols = vec![T::zero(); k * ld];
    gemm(MatRef::new(weight, c_out, k).t(), dymat, &mut dcols, false);
    for b in 0..n {
        if g.is_trivial_pointwise() {
            for ci in 0..c {
                dx.channel_mut(b, ci)
                    .copy_from_slice(&dcols[ci * ld + b * plane..ci * ld + (b + 1) * plane]);
            }
        } else {
            col2im(&dcols, c, h, w, g, oh, ow, dx.sample_mut(b), ld, b * plane);
        }
    }
    Ok(Some(dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive(x: &Tensor<f64>, wt: &[f64], c_out: usize, g: &ConvGeom) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = g.out_size(h, w).unwrap();
        let (kh, kw) = g.kernel;
        let mut y = Tensor::zeros([n, c_out, oh, ow]);
        for b in 0..n {
            for o in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * g.stride + ki * g.dilation.0) as isize - g.padding.0 as isize;
                                    let ix = (ox * g.stride + kj * g.dilation.1) as isize - g.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.at(b, ci, iy as usize, ix as usize)
                                            * wt[((o * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        y.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        y
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn matches_naive_for_many_geometries() {
        let mut s = 7u64;
        for &(dh, dw) in &[(1, 1), (2, 2), (1, 3), (3, 1), (5, 5)] {
            for stride in [1, 2] {
                let g = ConvGeom::same(3, stride, Genotype::new(dh, dw).unwrap());
                let x = Tensor::from_vec([2, 3, 9, 8], (0..432).map(|_| lcg(&mut s)).collect()).unwrap();
                let wt: Vec<f64> = (0..4 * 3 * 9).map(|_| lcg(&mut s)).collect();
                let y = conv2d_forward(&x, &wt, 4, &g).unwrap();
                let r = naive(&x, &wt, 4, &g);
                assert_eq!(y.shape(), [2, 4, 9_usize.div_ceil(stride), 8_usize.div_ceil(stride)]);
                assert!(y.max_abs_diff(&r) < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, dx> and = <W, dW>
        let mut s = 3u64;
        let g = ConvGeom::same(3, 2, Genotype::new(2, 1).unwrap());
        let x = Tensor::from_vec([2, 2, 7, 6], (0..168).map(|_| lcg(&mut s)).collect()).unwrap();
        let wt: Vec<f64> = (0..3 * 2 * 9).map(|_| lcg(&mut s)).collect();
        let y = conv2d_forward(&x, &wt, 3, &g).unwrap();
        let dy = Tensor::from_vec(y.shape(), (0..y.len()).map(|_| lcg(&mut s)).collect()).unwrap();
        let mut dw = vec![0.0; wt.len()];
        let dx = conv2d_backward(x.shape(), Some(&x), &wt, 3, &g, &dy, true, Some(&mut dw))
            .unwrap()
            .unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let rw: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10, "{lhs} vs {rx}");
        assert!((lhs - rw).abs() < 1e-10, "{lhs} vs {rw}");
    }

    #[test]
    fn pointwise_fast_path() {
        let mut s = 11u64;
        let g = ConvGeom::pointwise(1);
        let x = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|_| lcg(&mut s)).collect()).unwrap();
        let wt: Vec<f64> = (0..6).map(|_| lcg(&mut s)).collect();
        let y = conv2d_forward(&x, &wt, 2, &g).unwrap();
        assert!(y.max_abs_diff(&naive(&x, &wt, 2, &g)) < 1e-13);
        let strided = ConvGeom::pointwise(2);
        let y2 = conv2d_forward(&x, &wt, 2, &strided).unwrap();
        assert!(y2.max_abs_diff(&naive(&x, &wt, 2, &strided)) < 1e-13);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros([1, 2, 5, 5]);
        let g = ConvGeom::same(3, 1, Genotype::IDENTITY);
        assert!(matches!(
            conv2d_forward(&x, &[0.0; 27], 1, &g),
            Err(Error::Shape(_))
        ));
    }
}
