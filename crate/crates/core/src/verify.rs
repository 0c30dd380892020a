//! Fast self-check suite: decode oracle equivalence, path-level reduction, conservation,
//! alpha gradients, cost parity, function preservation, receptive-field geometry and the
//! search schedule. Each check reports a pass/fail line with its measured error.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    apply_plan, apply_plan_with, build_supernet, plan_costs, ApplyOptions, BackboneSpec, Network, Provenance,
    StageSpec, StemSpec, TransformPlan,
};
use crate::decoder::{decode_block, decode_indices, decoded_channels, intensity};
use crate::erf::{erf_map, erf_radius, ConvStack};
use crate::error::Result;
use crate::genotype::{default_space, Genotype, GroupingMode, SearchSpaceConfig, Setting};
use crate::mixed::{init_from_baseline, mixed_forward, mixed_forward_probs, softmax_row, AlphaTable, MixedConv, MixedConvSpec};
use crate::nn::Mode;
use crate::optim::cosine_lr;
use crate::search::decode_plan;
use crate::tensor::{Scalar, Tensor};

/// Deliberate defects for checking that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Leave the normalization and 1×1 conv after a decoded layer unpermuted.
    SkipPermutation,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub fault: Option<Fault>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub fault: Option<Fault>,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Check = fn(&VerifyOptions, &mut ChaCha8Rng) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 8] = [
    ("oracle_equivalence", oracle_equivalence),
    ("path_reduction", path_reduction),
    ("conservation", conservation),
    ("alpha_gradients", alpha_gradients),
    ("cost_parity", cost_parity),
    ("function_preservation", function_preservation),
    ("erf_geometry", erf_geometry),
    ("schedule", schedule),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; an internal error is reported as a failed check, not propagated.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            let t = Instant::now();
            let (passed, detail) = f(opts, &mut rng).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult {
                name: (*name).to_string(),
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect();
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        fault: opts.fault,
        checks,
    }
}

fn random_tensor<T: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..shape.iter().product()).map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn random_alpha(groups: usize, genotypes: usize, rng: &mut ChaCha8Rng) -> AlphaTable {
    let mut a = AlphaTable::zeros(groups, genotypes);
    a.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    a
}

/// `count` distinct dilation pairs drawn from `1..=4 × 1..=4`.
pub fn random_genotypes(count: usize, rng: &mut ChaCha8Rng) -> Vec<Genotype> {
    let mut all: Vec<Genotype> = (1..=4)
        .flat_map(|h| (1..=4).map(move |w| Genotype::new(h, w).expect("positive")))
        .collect();
    all.shuffle(rng);
    all.truncate(count);
    all
}

/// Random alpha tables for every searchable layer, decoded into a plan.
pub fn random_plan(spec: &BackboneSpec, space: &SearchSpaceConfig, rng: &mut ChaCha8Rng) -> Result<TransformPlan> {
    let alphas: BTreeMap<String, AlphaTable> = crate::backbone::supernet_layer_specs(spec, space)?
        .into_iter()
        .map(|(id, m)| (id, random_alpha(m.group_count, m.genotypes.len(), rng)))
        .collect();
    decode_plan(spec, space, &alphas, Provenance::default())
}

/// Direct dilated convolution by explicit loops, independent of the im2col path.
fn direct_conv(x: &Tensor<f64>, w: &[f64], c_out: usize, g: Genotype, stride: usize) -> Tensor<f64> {
    let [n, c_in, h, wd] = x.shape();
    let (dh, dw) = (g.dh() as isize, g.dw() as isize);
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut y = Tensor::zeros([n, c_out, oh, ow]);
    for b in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let iy = (oy * stride) as isize + (ky - 1) * dh;
                                let ix = (ox * stride) as isize + (kx - 1) * dw;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wi = ((co * c_in + ci) * 3 + ky as usize) * 3 + kx as usize;
                                acc += w[wi] * x.at(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    y
}

fn layer_equivalence<T: Scalar>(spec: &MixedConvSpec, alpha: &AlphaTable, rng: &mut ChaCha8Rng) -> Result<f64> {
    let w: Vec<T> = random_tensor::<T>([1, 1, 1, spec.weight_len()], rng).into_vec();
    let x = random_tensor::<T>([2, spec.in_channels, 9, 9], rng);
    let (block, conv) = decode_block("layer", alpha, spec, &w)?;
    let decoded = conv.eval(&x)?;
    let cw = init_from_baseline(&w, spec.weight_shape(), spec.genotypes.len())?;
    let hard = mixed_forward_probs(&x, &cw, alpha.one_hot_argmax().values(), spec)?;
    Ok(decoded.max_abs_diff(&hard.gather_channels(&block.permutation)).to_f64().unwrap_or(f64::INFINITY))
}

fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        name: "verify-tiny".into(),
        input_channels: 2,
        stem: StemSpec {
            channels: 8,
            kernel: 3,
            stride: 1,
            max_pool: false,
        },
        stages: [(8, 1), (16, 2), (16, 2), (32, 1)]
            .iter()
            .map(|&(mid_channels, stride)| StageSpec {
                blocks: 1,
                mid_channels,
                stride,
            })
            .collect(),
        expansion: 2,
        num_classes: 3,
        desk_scale: true,
    }
}

/// A baseline with randomized affine parameters and running statistics, so that any
/// channel misrouting changes the output.
fn scrambled_baseline(spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Result<Network<f64>> {
    let mut net = Network::<f64>::new(spec.clone(), rng)?;
    net.for_each_weight(&mut |w, _| w.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2)));
    let x = random_tensor::<f64>([4, spec.input_channels, 12, 12], rng);
    net.forward(&x, Mode::Train { update_stats: true })?;
    Ok(net)
}

/// Network-level check: the transformed network against the supernet with saturated
/// one-hot alphas (softmax of ±1000 is exactly 0/1 in double precision).
fn network_equivalence(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let spec = tiny_spec();
    let space = default_space(Setting::B)?.with_grouping(GroupingMode::FixedGroupCount, 4)?;
    let base = scrambled_baseline(&spec, rng)?;
    let mut sup = build_supernet(&spec, &space, Some(&base), rng)?;
    let mut alphas = sup.alphas();
    for (i, a) in alphas.values_mut().enumerate() {
        let g = a.genotypes();
        for r in 0..a.groups() {
            // the first two groups always disagree, so every permutation is non-trivial
            let pick = if r < 2 { (r + i) % g } else { rng.random_range(0..g) };
            for c in 0..g {
                a.set(r, c, if c == pick { 1000.0 } else { -1000.0 });
            }
        }
    }
    sup.set_alphas(&alphas)?;
    let plan = decode_plan(&spec, &space, &alphas, Provenance::default())?;
    let apply = ApplyOptions {
        propagate_permutation: opts.fault != Some(Fault::SkipPermutation),
    };
    let mut tr = apply_plan_with(&spec, &plan, &base, apply)?;
    let x = random_tensor::<f64>([2, spec.input_channels, 12, 12], rng);
    let a = sup.forward(&x, Mode::Eval)?;
    let b = tr.forward(&x, Mode::Eval)?;
    Ok(a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
}

fn oracle_equivalence(opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    let cases = 20;
    for _ in 0..cases {
        let n = *[1, 2, 4, 8, 16].choose(rng).expect("non-empty");
        let g = *[2, 3, 5, 9].choose(rng).expect("non-empty");
        let c_out = *[32, 64, 128].choose(rng).expect("non-empty");
        let spec = MixedConvSpec::new(rng.random_range(1..=4), c_out, rng.random_range(1..=2), random_genotypes(g, rng), n)?;
        let alpha = random_alpha(n, g, rng);
        e32 = e32.max(layer_equivalence::<f32>(&spec, &alpha, rng)?);
        e64 = e64.max(layer_equivalence::<f64>(&spec, &alpha, rng)?);
    }
    let net = network_equivalence(opts, rng)?;
    let ok = e32 < 1e-5 && e64 < 1e-10 && net < 1e-10;
    Ok((ok, format!("{cases} layers: max err f32 {e32:.2e}, f64 {e64:.2e}; network f64 {net:.2e}")))
}

fn path_reduction(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = rng.random_range(1..=4);
        let (c_in, c_out) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let spec = MixedConvSpec::new(c_in, c_out, rng.random_range(1..=2), random_genotypes(g, rng), 1)?;
        let reps: Vec<Vec<f64>> = (0..g)
            .map(|_| random_tensor::<f64>([1, 1, 1, spec.weight_len()], rng).into_vec())
            .collect();
        let cw = crate::mixed::CandidateWeights::new(spec.weight_shape(), reps)?;
        let alpha = random_alpha(1, g, rng);
        let x = random_tensor::<f64>([1, c_in, 7, 8], rng);
        let y = mixed_forward(&x, &cw, &alpha, &spec)?;
        let p = softmax_row(alpha.row(0));
        let mut want = Tensor::<f64>::zeros(y.shape());
        for (k, &pk) in p.iter().enumerate() {
            let o = direct_conv(&x, cw.replica(k), c_out, spec.genotypes[k], spec.stride);
            want.data_mut().iter_mut().zip(o.data()).for_each(|(d, v)| *d += pk * v);
        }
        let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        worst = worst.max(y.max_abs_diff(&want) / scale);
    }
    Ok((worst < 1e-6, format!("100 cases, max relative error {worst:.2e}")))
}

fn conservation(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut bad = 0;
    for _ in 0..1000 {
        let n = *[1, 2, 4, 8, 16, 32].choose(rng).expect("non-empty");
        let g = rng.random_range(1..=9);
        let c_out = n * rng.random_range(1..=16);
        let inten = intensity(&decode_indices(&random_alpha(n, g, rng)));
        let channels = decoded_channels(c_out, &inten)?;
        if inten.counts().iter().sum::<usize>() != n || !inten.sums_to_one() || channels.iter().sum::<usize>() != c_out
        {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("1000 tables, {bad} violations")))
}

fn alpha_gradients(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = *[1, 2, 4].choose(rng).expect("non-empty");
        let g = rng.random_range(2..=5);
        let spec = MixedConvSpec::new(2, 8, 1, random_genotypes(g, rng), n)?;
        let reps: Vec<Vec<f64>> = (0..g)
            .map(|_| random_tensor::<f64>([1, 1, 1, spec.weight_len()], rng).into_vec())
            .collect();
        let cw = crate::mixed::CandidateWeights::new(spec.weight_shape(), reps)?;
        let alpha = random_alpha(n, g, rng);
        let x = random_tensor::<f64>([1, 2, 6, 6], rng);
        let probe = random_tensor::<f64>([1, spec.out_channels, 6, 6], rng);
        let loss = |a: &AlphaTable| -> Result<f64> {
            let y = mixed_forward(&x, &cw, a, &spec)?;
            Ok(y.data().iter().zip(probe.data()).map(|(u, v)| u * v).sum())
        };
        let mut layer = MixedConv::new(spec.clone(), cw.clone(), alpha.clone())?;
        layer.forward(&x)?;
        layer.backward(&probe, false, false, true)?;
        let analytic = layer.alpha_grad().to_vec();
        let mut fd = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let (mut p, mut m) = (alpha.clone(), alpha.clone());
            p.values_mut()[k] += h;
            m.values_mut()[k] -= h;
            fd.push((loss(&p)? - loss(&m)?) / (2.0 * h));
        }
        let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    Ok((worst < 1e-4, format!("50 cases, max relative error {worst:.2e}")))
}

fn cost_parity(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut checked = 0;
    let mut bad = Vec::new();
    for (spec, input) in [
        (BackboneSpec::mini_resnet(1, 4), (64, 64)),
        (BackboneSpec::resnet50(3, 1000), (224, 224)),
    ] {
        let base = plan_costs(&spec, None, input)?;
        let space = default_space(Setting::C)?;
        for _ in 0..10 {
            let plan = random_plan(&spec, &space, rng)?;
            if plan_costs(&spec, Some(&plan), input)? != base {
                bad.push(spec.name.clone());
            }
            checked += 1;
        }
        // materialized weights agree with the closed form
        if spec.name == "mini-resnet" {
            let net = Network::<f32>::new(spec.clone(), rng)?;
            let tr = apply_plan(&spec, &random_plan(&spec, &space, rng)?, &net)?;
            if net.costs(input)? != base || tr.costs(input)? != base {
                bad.push("materialized".into());
            }
        }
    }
    Ok((bad.is_empty(), format!("{checked} random plans, mismatches: {bad:?}")))
}

fn function_preservation(_: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let spec = tiny_spec();
    let base = scrambled_baseline(&spec, rng)?;
    let plan = TransformPlan::identity(&spec, default_space(Setting::B)?);
    let mut tr = apply_plan(&spec, &plan, &base)?;
    let mut b = base.duplicate()?;
    let x = random_tensor::<f64>([3, spec.input_channels, 12, 12], rng);
    let mut worst = 0.0f64;
    for mode in [Mode::Eval, Mode::Train { update_stats: false }] {
        let (u, v) = (b.forward(&x, mode)?, tr.forward(&x, mode)?);
        worst = worst.max(u.iter().zip(&v).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
    }
    Ok((worst == 0.0, format!("identity plan, max abs error {worst:e}")))
}

fn erf_geometry(_: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut ok = true;
    for d in 1..=4u32 {
        let mut stack = ConvStack::constant(&[Genotype::symmetric(d)?], 1, 1.0)?;
        let map = erf_map(&mut stack, (15, 15))?;
        let mut support = map.support();
        support.sort_unstable();
        let c = 7i64;
        let mut want: Vec<(usize, usize)> = (-1..=1i64)
            .flat_map(|a| (-1..=1i64).map(move |b| ((c + a * d as i64) as usize, (c + b * d as i64) as usize)))
            .collect();
        want.sort_unstable();
        ok &= support == want;
    }
    let radii: Vec<usize> = (1..=4u32)
        .map(|d| {
            let mut s = ConvStack::constant(&[Genotype::IDENTITY, Genotype::symmetric(d)?], 2, 0.5)?;
            erf_radius(&erf_map(&mut s, (31, 31))?, 0.95)
        })
        .collect::<Result<_>>()?;
    let monotone = radii.windows(2).all(|w| w[0] <= w[1]) && radii[0] < radii[3];
    Ok((ok && monotone, format!("9-tap supports exact: {ok}; radius by dilation {radii:?}")))
}

fn schedule(_: &VerifyOptions, _: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (start, end) = (cosine_lr(0, 100, 1.25e-3, 5e-5)?, cosine_lr(100, 100, 1.25e-3, 5e-5)?);
    let mid = cosine_lr(50, 100, 1.25e-3, 5e-5)?;
    let ok = start == 1.25e-3 && end == 5e-5 && (mid - 6.5e-4).abs() < 1e-15 && cosine_lr(101, 100, 1.0, 0.0).is_err();
    Ok((ok, format!("endpoints {start} and {end}, midpoint {mid}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_conv_agrees_with_dilated_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor::<f64>([1, 2, 7, 5], &mut rng);
        let w = random_tensor::<f64>([1, 1, 1, 3 * 2 * 9], &mut rng).into_vec();
        for (g, s) in [(Genotype::new(2, 3).unwrap(), 1), (Genotype::symmetric(1).unwrap(), 2)] {
            let a = crate::mixed::candidate_forward(&x, &w, 3, g, s).unwrap();
            assert!(a.max_abs_diff(&direct_conv(&x, &w, 3, g, s)) < 1e-14);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let opts = VerifyOptions {
            fault: Some(Fault::SkipPermutation),
            seed: 0,
        };
        let err = network_equivalence(&opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(err > 1e-6, "{err}");
        let clean = network_equivalence(&VerifyOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(clean < 1e-10, "{clean}");
    }

    #[test]
    fn full_suite_passes_and_fault_fails_only_equivalence() {
        let report = run_verify(&VerifyOptions::default());
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        let faulty = run_verify(&VerifyOptions {
            fault: Some(Fault::SkipPermutation),
            seed: 0,
        });
        let failed: Vec<&str> = faulty.failures().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["oracle_equivalence"]);
    }
}
