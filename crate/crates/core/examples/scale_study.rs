//! Runs the small-vs-large object study: pretrain, search, and compare the decoded
//! stage-5 dilations and receptive fields.
//!
//!     cargo run --release -p nats-core --example scale_study -- [seeds] [epochs]

use std::time::Instant;

use nats::backbone::{apply_plan, BackboneSpec, Network};
use nats::erf::{erf_map, erf_radius};
use nats::genotype::{default_space, GroupingMode, Setting};
use nats::run::PRETRAIN_LR_PER_IMAGE;
use nats::search::{run_search, SearchConfig};
use nats::synth::{generate, ScalePreset, SynthConfig};
use nats::train::{evaluate, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nats::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let space = default_space(Setting::B)?.with_grouping(GroupingMode::FixedGroupCount, 8)?;
    for seed in 0..seeds {
        for preset in [ScalePreset::Small, ScalePreset::Large] {
            let t0 = Instant::now();
            let synth = SynthConfig {
                scale_preset: preset,
                seed,
                ..SynthConfig::default()
            };
            let data = generate(&synth)?;
            let spec = BackboneSpec::mini_resnet(1, synth.num_classes);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut base = Network::<f32>::new(spec.clone(), &mut rng)?;
            let tc = TrainConfig {
                seed,
                lr_per_image: PRETRAIN_LR_PER_IMAGE,
                ..TrainConfig::default()
            };
            train(&mut base, &data.train, &tc, None)?;
            let acc = evaluate(&mut base, &data.val_alpha, 64)?;
            let t1 = t0.elapsed().as_secs_f64();
            let cfg = SearchConfig {
                total_epochs: epochs,
                seed,
                ..SearchConfig::default()
            };
            let out = run_search(&spec, &space, Some(&base), &data.val_weight, &data.val_alpha, &cfg, &synth.dataset_id())?;
            let d5 = out.plan.mean_stage_dilation(5);
            let d4 = out.plan.mean_stage_dilation(4);
            let d3 = out.plan.mean_stage_dilation(3);
            let mut b64 = base.cast::<f64>()?;
            let r_base = erf_radius(&erf_map(&mut b64, (64, 64))?, 0.95)?;
            let mut t64 = apply_plan(&spec, &out.plan, &base)?.cast::<f64>()?;
            let r_tr = erf_radius(&erf_map(&mut t64, (64, 64))?, 0.95)?;
            println!(
                "seed {seed} {preset:?}: base acc {acc:.3} d3 {d3:.3} d4 {d4:.3} d5 {d5:.3} erf {r_base}->{r_tr} (pretrain {t1:.0}s, total {:.0}s)",
                t0.elapsed().as_secs_f64()
            );
            for l in &out.plan.layers {
                let s: Vec<String> = l.entries.iter().map(|e| format!("{}:{}", e.dilation, e.channels)).collect();
                println!("    {} {}", l.layer, s.join(" "));
            }
        }
    }
    Ok(())
}
