//! Acceptance suite: one PASS/FAIL line per criterion, checked against oracles written
//! independently of the library (naive convolutions, explicit linear maps, hand-rolled
//! softmax and cost formulas).
//!
//! Runs as a plain binary (`harness = false`) so that lines print in order. The
//! behavioural experiment (criterion 9) is the slow part; `NATS_ACCEPTANCE_QUICK=1`
//! skips it and reports it as skipped.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use nats::backbone::{apply_plan, plan_costs, BackboneSpec, Network, TransformPlan};
use nats::decoder::{decode_block, decode_indices, decoded_channels, intensity};
use nats::erf::{erf_map, erf_radius, ConvStack, LinearProbe};
use nats::genotype::{default_space, Genotype, GroupingMode, Setting};
use nats::mixed::{mixed_forward, AlphaTable, CandidateWeights, MixedConv, MixedConvSpec};
use nats::nn::Mode;
use nats::optim::cosine_lr;
use nats::run::{erf_run, search_run, RunConfig};
use nats::synth::ScalePreset;
use nats::tensor::{Scalar, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- oracles

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Zero-padded dilated 3×3 convolution, "same" output size (ceil division by stride),
/// accumulated in f64 from explicit loops.
fn naive_conv(x: &[f64], shape: [usize; 4], w: &[f64], c_out: usize, (dh, dw): (usize, usize), stride: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c_in, h, wd] = shape;
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut y = vec![0.0; n * c_out * oh * ow];
    for b in 0..n {
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky * dh) as isize - dh as isize;
                                let ix = (ox * stride + kx * dw) as isize - dw as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                acc += w[((co * c_in + ci) * 3 + ky) * 3 + kx]
                                    * x[((b * c_in + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    y[((b * c_out + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, [n, c_out, oh, ow])
}

fn rand_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_genotypes(count: usize, rng: &mut ChaCha8Rng) -> Vec<Genotype> {
    let mut all: Vec<(u32, u32)> = (1..=4).flat_map(|h| (1..=4).map(move |w| (h, w))).collect();
    all.shuffle(rng);
    all[..count].iter().map(|&(h, w)| Genotype::new(h, w).unwrap()).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

// ---------------------------------------------------------------- criteria

/// Decoded block vs hard-selected supernet: for every group the argmax genotype's full
/// convolution is evaluated naively and its group slice kept; the decoded output is
/// compared after gathering by the recorded permutation.
fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    let cases = 24;
    for _ in 0..cases {
        let n = *[1, 2, 4, 8, 16].choose(&mut rng).unwrap();
        let g = *[2, 3, 5, 9].choose(&mut rng).unwrap();
        let c_out = *[32, 64, 128].choose(&mut rng).unwrap();
        let c_in = rng.random_range(1..=4);
        let stride = rng.random_range(1..=2);
        let genos = random_genotypes(g, &mut rng);
        let spec = MixedConvSpec::new(c_in, c_out, stride, genos.clone(), n).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(g, &mut rng)).collect();
        let alpha = AlphaTable::from_rows(rows.clone()).unwrap();
        let w = rand_vec(spec.weight_len(), &mut rng);
        let xs = [2, c_in, 9, 9];
        let x = rand_vec(xs.iter().product(), &mut rng);

        // oracle: per-genotype full outputs, group slices chosen by argmax
        let outs: Vec<(Vec<f64>, [usize; 4])> = genos
            .iter()
            .map(|d| naive_conv(&x, xs, &w, c_out, (d.dh() as usize, d.dw() as usize), stride))
            .collect();
        let shape = outs[0].1;
        let plane = shape[2] * shape[3];
        let width = c_out / n;
        let mut hard = vec![0.0; outs[0].0.len()];
        for b in 0..shape[0] {
            for c in 0..c_out {
                let k = first_argmax(&rows[c / width]);
                let o = (b * c_out + c) * plane;
                hard[o..o + plane].copy_from_slice(&outs[k].0[o..o + plane]);
            }
        }

        for double in [false, true] {
            let (block, decoded) = if double {
                let (blk, conv) = decode_block("l", &alpha, &spec, &w).unwrap();
                (blk, conv.eval(&Tensor::from_vec(xs, x.clone()).unwrap()).unwrap().into_vec())
            } else {
                let (blk, conv) = decode_block("l", &alpha, &spec, &to_f32(&w)).unwrap();
                let xt = Tensor::from_vec(xs, to_f32(&x)).unwrap();
                let y = conv.eval(&xt).unwrap().into_vec();
                (blk, y.into_iter().map(f64::from).collect())
            };
            let mut err = 0.0f64;
            for b in 0..shape[0] {
                for (p, &c) in block.permutation.iter().enumerate() {
                    let (d0, o0) = ((b * c_out + p) * plane, (b * c_out + c) * plane);
                    for i in 0..plane {
                        err = err.max((decoded[d0 + i] - hard[o0 + i]).abs());
                    }
                }
            }
            if double {
                e64 = e64.max(err);
            } else {
                e32 = e32.max(err);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        e32 < 1e-5 && e64 < 1e-10 && secs < 60.0,
        format!("{cases} layers: max abs err f32 {e32:.2e} (<1e-5), f64 {e64:.2e} (<1e-10), {secs:.1}s"),
    )
}

/// With one group the mixed block is the softmax-weighted sum of whole candidate paths.
fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = rng.random_range(1..=5);
        let (c_in, c_out, stride) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=2));
        let genos = random_genotypes(g, &mut rng);
        let spec = MixedConvSpec::new(c_in, c_out, stride, genos.clone(), 1).unwrap();
        let reps: Vec<Vec<f64>> = (0..g).map(|_| rand_vec(spec.weight_len(), &mut rng)).collect();
        let row = rand_vec(g, &mut rng).iter().map(|v| v * 3.0).collect::<Vec<_>>();
        let xs = [2, c_in, 8, 7];
        let x = rand_vec(xs.iter().product(), &mut rng);
        let y = mixed_forward(
            &Tensor::from_vec(xs, x.clone()).unwrap(),
            &CandidateWeights::new(spec.weight_shape(), reps.clone()).unwrap(),
            &AlphaTable::from_rows(vec![row.clone()]).unwrap(),
            &spec,
        )
        .unwrap();
        let p = softmax(&row);
        let mut want = vec![0.0; y.len()];
        for (k, d) in genos.iter().enumerate() {
            let (o, _) = naive_conv(&x, xs, &reps[k], c_out, (d.dh() as usize, d.dw() as usize), stride);
            want.iter_mut().zip(o).for_each(|(a, v)| *a += p[k] * v);
        }
        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = y.data().iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / scale);
    }
    outcome(worst < 1e-6, format!("100 cases: max relative err {worst:.2e} (<1e-6)"))
}

/// Intensities are held as integer counts over N, so conservation is checked exactly:
/// counts must equal a test-side argmax tally and sum to N, channels must sum to C_out.
fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut bad_i, mut bad_c) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let g = rng.random_range(1..=9);
        let c_out = n * rng.random_range(1..=8);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(g, &mut rng)).collect();
        let mut tally = vec![0usize; g];
        rows.iter().for_each(|r| tally[first_argmax(r)] += 1);
        let inten = intensity(&decode_indices(&AlphaTable::from_rows(rows).unwrap()));
        let float_sum: f64 = inten.values().iter().sum();
        if inten.counts() != tally || tally.iter().sum::<usize>() != n || (float_sum - 1.0).abs() > 1e-12 {
            bad_i += 1;
        }
        let channels = decoded_channels(c_out, &inten).unwrap();
        if channels.iter().sum::<usize>() != c_out {
            bad_c += 1;
        }
    }
    outcome(
        bad_i == 0 && bad_c == 0,
        format!("1000 tables: Σ I ≠ 1 in {bad_i}, Σ C_out^g ≠ C_out in {bad_c}"),
    )
}

/// Analytic alpha gradients against central differences of the block output contracted
/// with a fixed random probe.
fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = *[1, 2, 4, 8].choose(&mut rng).unwrap();
        let g = rng.random_range(2..=6);
        let spec = MixedConvSpec::new(2, 8, rng.random_range(1..=2), random_genotypes(g, &mut rng), n).unwrap();
        let reps: Vec<Vec<f64>> = (0..g).map(|_| rand_vec(spec.weight_len(), &mut rng)).collect();
        let cw = CandidateWeights::new(spec.weight_shape(), reps).unwrap();
        let alpha = AlphaTable::from_rows((0..n).map(|_| rand_vec(g, &mut rng)).collect()).unwrap();
        let x = Tensor::from_vec([2, 2, 6, 6], rand_vec(144, &mut rng)).unwrap();
        let y0 = mixed_forward(&x, &cw, &alpha, &spec).unwrap();
        let probe = Tensor::from_vec(y0.shape(), rand_vec(y0.len(), &mut rng)).unwrap();
        let loss = |a: &AlphaTable| -> f64 {
            let y = mixed_forward(&x, &cw, a, &spec).unwrap();
            y.data().iter().zip(probe.data()).map(|(u, v)| u * v).sum()
        };
        let mut layer = MixedConv::new(spec.clone(), cw.clone(), alpha.clone()).unwrap();
        layer.forward(&x).unwrap();
        layer.backward(&probe, false, false, true).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (k, &an) in layer.alpha_grad().iter().enumerate() {
            let (mut p, mut m) = (alpha.clone(), alpha.clone());
            p.values_mut()[k] += h;
            m.values_mut()[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            num += (an - fd).powi(2);
            den += fd * fd;
        }
        worst = worst.max(num.sqrt() / den.sqrt().max(1e-12));
    }
    outcome(worst < 1e-4, format!("50 (N,G) cases: max relative err {worst:.2e} (<1e-4)"))
}

/// Parameters counted from the materialized tensors; MACs re-derived from tensor shapes
/// and the stride layout, independently of the library's cost accounting.
fn oracle_costs<T: Scalar>(net: &Network<T>, spec: &BackboneSpec, input: (usize, usize)) -> (u64, u64) {
    let tensors = net.named_tensors();
    let params: u64 = tensors
        .iter()
        .filter(|(n, _, _)| !n.contains("running_"))
        .map(|(_, _, v)| v.len() as u64)
        .sum();
    let mut res: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut h = input.0.div_ceil(spec.stem.stride);
    let mut w = input.1.div_ceil(spec.stem.stride);
    res.insert("stem".into(), (h, w));
    if spec.stem.max_pool {
        (h, w) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    }
    for b in spec.blocks() {
        res.insert(format!("blocks.{}.conv1", b.id), (h, w));
        (h, w) = (h.div_ceil(b.stride), w.div_ceil(b.stride));
        for part in ["conv2", "conv3", "downsample"] {
            res.insert(format!("blocks.{}.{part}", b.id), (h, w));
        }
    }
    let mut macs = 0u64;
    for (name, _, v) in &tensors {
        if name.starts_with("fc.weight") {
            macs += v.len() as u64;
        } else if name.ends_with("weight") {
            let key = res
                .keys()
                .filter(|k| name.starts_with(k.as_str()))
                .max_by_key(|k| k.len())
                .unwrap_or_else(|| panic!("no resolution for {name}"));
            let (oh, ow) = res[key];
            macs += (v.len() * oh * ow) as u64;
        }
    }
    (params, macs)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut notes = Vec::new();
    let mut ok = true;
    for (spec, input) in [
        (BackboneSpec::mini_resnet(1, 4), (64, 64)),
        (BackboneSpec::resnet50(3, 1000), (224, 224)),
    ] {
        let base = Network::<f32>::new(spec.clone(), &mut rng).unwrap();
        let want = oracle_costs(&base, &spec, input);
        let closed = plan_costs(&spec, None, input).unwrap();
        ok &= (closed.params, closed.macs) == want;
        for _ in 0..10 {
            let space = default_space(*[Setting::A, Setting::B, Setting::C].choose(&mut rng).unwrap()).unwrap();
            let alphas: BTreeMap<String, AlphaTable> = nats::backbone::supernet_layer_specs(&spec, &space)
                .unwrap()
                .into_iter()
                .map(|(id, m)| {
                    let rows = (0..m.group_count).map(|_| rand_vec(m.genotypes.len(), &mut rng)).collect();
                    (id, AlphaTable::from_rows(rows).unwrap())
                })
                .collect();
            let plan = nats::search::decode_plan(&spec, &space, &alphas, Default::default()).unwrap();
            let tr = apply_plan(&spec, &plan, &base).unwrap();
            let got = oracle_costs(&tr, &spec, input);
            let lib = plan_costs(&spec, Some(&plan), input).unwrap();
            ok &= got == want && (lib.params, lib.macs) == want;
        }
        notes.push(format!("{} params {} MACs {}", spec.name, want.0, want.1));
    }
    outcome(ok, format!("10 random plans each, equal to baseline: {}", notes.join("; ")))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let spec = BackboneSpec::mini_resnet(1, 4);
    let mut base = Network::<f64>::new(spec.clone(), &mut rng).unwrap();
    base.for_each_weight(&mut |w, _| w.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1)));
    let x = Tensor::from_vec([2, 1, 32, 32], rand_vec(2048, &mut rng)).unwrap();
    base.forward(&x, Mode::Train { update_stats: true }).unwrap();
    let plan = TransformPlan::identity(&spec, default_space(Setting::B).unwrap());
    let mut tr = apply_plan(&spec, &plan, &base).unwrap();
    let mut worst = 0.0f64;
    for mode in [Mode::Eval, Mode::Train { update_stats: false }] {
        let (a, b) = (base.forward(&x, mode).unwrap(), tr.forward(&x, mode).unwrap());
        worst = a.iter().zip(&b).fold(worst, |m, (u, v)| m.max((u - v).abs()));
    }
    outcome(worst == 0.0, format!("identity plan on mini-resnet: max abs err {worst:e} (must be 0)"))
}

/// ERF oracle for a linear stack: push every input basis vector through the forward map
/// and read the summed centre response.
fn explicit_erf(stack: &mut ConvStack, size: usize) -> Vec<f64> {
    let c_in = stack.input_channels();
    let probe = stack.forward_linear(&Tensor::zeros([1, c_in, size, size])).unwrap();
    let [_, c_out, fh, fw] = probe.shape();
    let (cy, cx) = (fh / 2, fw / 2);
    let mut grid = vec![0.0; size * size];
    for (p, cell) in grid.iter_mut().enumerate() {
        let mut sq = 0.0;
        for ci in 0..c_in {
            let mut x = Tensor::zeros([1, c_in, size, size]);
            x.data_mut()[ci * size * size + p] = 1.0;
            let y = stack.forward_linear(&x).unwrap();
            let s: f64 = (0..c_out).map(|c| y.at(0, c, cy, cx)).sum();
            sq += s * s;
        }
        *cell = sq.sqrt();
    }
    grid
}

fn criterion_7() -> Outcome {
    let mut notes = Vec::new();
    // single dilated conv: nonzero exactly on the 9 taps around the centre
    let mut taps_ok = true;
    for (dh, dw) in [(1, 1), (2, 2), (3, 3), (1, 3), (3, 1), (2, 4)] {
        let mut s = ConvStack::constant(&[Genotype::new(dh, dw).unwrap()], 1, 1.0).unwrap();
        let map = erf_map(&mut s, (15, 15)).unwrap();
        for r in 0..15 {
            for c in 0..15 {
                let (a, b) = (r as i64 - 7, c as i64 - 7);
                let tap = a % dh as i64 == 0 && a.abs() <= dh as i64 && b % dw as i64 == 0 && b.abs() <= dw as i64;
                taps_ok &= (map.at(r, c) != 0.0) == tap;
            }
        }
    }
    notes.push(format!("9-tap supports {}", if taps_ok { "exact" } else { "WRONG" }));

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for dil in [[1, 2, 3], [2, 2, 1], [3, 1, 2]] {
        let g: Vec<Genotype> = dil.iter().map(|&d| Genotype::symmetric(d).unwrap()).collect();
        let mut stack = ConvStack::random(&g, 2, &mut rng).unwrap();
        let map = erf_map(&mut stack, (15, 15)).unwrap();
        let oracle = explicit_erf(&mut stack, 15);
        worst = map.grid.iter().zip(&oracle).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    notes.push(format!("stacked ERF vs explicit map {worst:.1e} (<1e-6)"));

    let radii: Vec<usize> = (1..=4)
        .map(|d| {
            let g = [Genotype::IDENTITY, Genotype::symmetric(d).unwrap(), Genotype::IDENTITY];
            let mut s = ConvStack::constant(&g, 2, 0.3).unwrap();
            erf_radius(&erf_map(&mut s, (41, 41)).unwrap(), 0.95).unwrap()
        })
        .collect();
    let monotone = radii.windows(2).all(|w| w[0] < w[1]);
    notes.push(format!("radius@0.95 by dilation 1..4: {radii:?}"));
    outcome(taps_ok && worst < 1e-6 && monotone, notes.join("; "))
}

fn tiny_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.synth.image_size = 16;
    cfg.synth.scale_preset = nats::synth::ScalePreset::Small;
    cfg.synth.train_size = 32;
    cfg.synth.val_weight_size = 24;
    cfg.synth.val_alpha_size = 24;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_size = 8;
    cfg.search.total_epochs = 5;
    cfg.search.batch_size = 8;
    cfg.search.alpha_lr = 0.05;
    cfg.search_space = default_space(Setting::B).unwrap().with_grouping(GroupingMode::FixedGroupCount, 8).unwrap();
    cfg
}

fn criterion_8() -> Outcome {
    let start = cosine_lr(0, 1000, 0.00125, 0.00005).unwrap();
    let end = cosine_lr(1000, 1000, 0.00125, 0.00005).unwrap();
    let ends_ok = start == 0.00125 && end == 0.00005;
    let tmp = tempfile::tempdir().unwrap();
    let out = search_run(&tiny_run_config(3), tmp.path(), false, &mut ()).unwrap();
    let freeze = out.state.config.freeze_epochs();
    let h = &out.state.history;
    let frozen_ok = h[..freeze].iter().all(|s| s.alphas == h[0].alphas)
        && h[0].alphas.values().all(|a| a.values().iter().all(|&v| v == 0.0));
    let moved = h[freeze].alphas != h[0].alphas;
    outcome(
        ends_ok && frozen_ok && moved,
        format!(
            "cosine endpoints {start} / {end}; alphas fixed through {freeze} frozen epochs: {frozen_ok}, updated after: {moved}"
        ),
    )
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    search_run(&tiny_run_config(17), &a, false, &mut ()).unwrap();
    search_run(&tiny_run_config(17), &b, false, &mut ()).unwrap();
    let same = |f: &str| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap();
    let (plan, hist) = (same("plan.json"), same("alpha_history.jsonl"));
    outcome(plan && hist, format!("byte-identical plan.json: {plan}, alpha_history.jsonl: {hist}"))
}

const SCALE_EPOCHS: usize = 10;

/// Small vs large objects, three paired seeds through the full pipeline (pretrain,
/// search, decode, ERF). Stage-5 dilation must be larger for large objects in every
/// pair, and every transformed large-object network must see further than its baseline.
fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let (mut wins, mut erf_ok) = (0, true);
    for seed in 0..3 {
        let mut d5 = [0.0; 2];
        for (i, preset) in [ScalePreset::Small, ScalePreset::Large].into_iter().enumerate() {
            let mut cfg = RunConfig {
                seed,
                ..RunConfig::default()
            };
            cfg.synth.scale_preset = preset;
            cfg.search.total_epochs = SCALE_EPOCHS;
            let t = Instant::now();
            let dir = tmp.path().join(format!("{preset:?}-{seed}"));
            let out = search_run(&cfg, &dir, false, &mut ()).unwrap();
            d5[i] = out.plan.mean_stage_dilation(5);
            eprintln!("  criterion 9: {preset:?} seed {seed}: d5 {:.3} ({:.0}s)", d5[i], t.elapsed().as_secs_f64());
            if preset == ScalePreset::Large {
                let rows = erf_run(&dir, 0.95, 1).unwrap();
                let radius = |net: &str| rows.iter().find(|r| r.network == net).unwrap().radius;
                let (b, t) = (radius("baseline"), radius("transformed"));
                erf_ok &= t > b;
                lines.push(format!("seed {seed}: d5 small {:.3} large {:.3}, large ERF {b}→{t}", d5[0], d5[1]));
            }
        }
        wins += usize::from(d5[1] > d5[0]);
    }
    outcome(wins == 3 && erf_ok, format!("large > small in {wins}/3; {}", lines.join("; ")))
}

fn main() -> ExitCode {
    let quick = std::env::var("NATS_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let criteria: [fn() -> Outcome; 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    let mut failed = 0;
    for (i, run) in criteria.into_iter().enumerate() {
        let id = i + 1;
        if quick && id == 9 {
            println!("criterion {id:>2}: SKIP  (NATS_ACCEPTANCE_QUICK=1)");
            continue;
        }
        let t = Instant::now();
        let o = run();
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2}: {tag}  {}  [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
        failed += usize::from(!o.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
