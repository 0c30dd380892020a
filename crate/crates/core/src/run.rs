//! Run directories: one resolved config plus every artifact derived from it.
//!
//! ```text
//! run/
//!   resolved_config.json
//!   baseline/            pretrained checkpoint
//!   pretrain_metrics.csv
//!   search_state/        resumable search state, updated every epoch
//!   plan.json  alpha_history.jsonl  metrics.csv
//!   retrained/  retrain_metrics.csv  [baseline_retrained/  baseline_retrain_metrics.csv]
//!   erf/  baseline.png  transformed.png  erf.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{apply_plan, build_supernet, plan_costs, supernet_layer_specs, BackboneSpec, Costs, Network, TransformPlan};
use crate::checkpoint::{load_network, save_network};
use crate::erf::{erf_map, erf_radius, render_erf, write_erf_csv, ErfRow};
use crate::error::{Error, Result};
use crate::genotype::{default_space, GroupingMode, SearchSpaceConfig, Setting};
use crate::search::{alternate_epoch, decode_plan, finish_search, parse_history, provenance_for, EpochMetrics, SearchConfig, SearchOutcome, SearchState};
use crate::synth::{generate, generate_split, Split, SynthConfig, SynthSplits};
use crate::train::{evaluate, train, TrainConfig, TrainRecord};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const BASELINE_DIR: &str = "baseline";
pub const STATE_DIR: &str = "search_state";
pub const PLAN: &str = "plan.json";
pub const HISTORY: &str = "alpha_history.jsonl";

fn default_backbone() -> String {
    "mini-resnet".into()
}

fn default_run_space() -> SearchSpaceConfig {
    default_space(Setting::B)
        .and_then(|s| s.with_grouping(GroupingMode::FixedGroupCount, 8))
        .expect("built-in space")
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        lr_per_image: PRETRAIN_LR_PER_IMAGE,
        ..TrainConfig::default()
    }
}

/// Baseline pretraining step size per image; the retraining default is too small to
/// bring a randomly initialized network off chance within 13 epochs.
pub const PRETRAIN_LR_PER_IMAGE: f64 = 0.02 / 32.0;

/// Everything a run depends on. `seed` is the single source of randomness: resolving
/// the config copies it into every nested section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default = "default_run_space")]
    pub search_space: SearchSpaceConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub retrain: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: default_backbone(),
            search_space: default_run_space(),
            search: SearchConfig::default(),
            synth: SynthConfig::default(),
            pretrain: default_pretrain(),
            retrain: TrainConfig::default(),
            output_dir: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Copy with the seed propagated and defaults made explicit; validated.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.synth.seed = c.seed;
        c.search.seed = c.seed;
        c.pretrain.seed = c.seed;
        c.retrain.seed = c.seed;
        c.search = c.search.resolved();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.backbone_spec()?;
        self.synth.validate()?;
        self.search.validate()?;
        self.pretrain.validate().map_err(|e| prefix(e, "pretrain"))?;
        self.retrain.validate().map_err(|e| prefix(e, "retrain"))?;
        if self.synth.image_size < spec.total_stride() {
            return Err(Error::schema(
                "synth.image_size",
                format!("must be at least the backbone stride {}", spec.total_stride()),
            ));
        }
        supernet_layer_specs(&spec, &self.search_space).map_err(|e| match e {
            Error::Config(m) | Error::Shape(m) => Error::schema("search_space", m),
            other => other,
        })?;
        Ok(())
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        BackboneSpec::preset(&self.backbone, 1, self.synth.num_classes)
            .map_err(|e| Error::schema("backbone", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn prefix(e: Error, section: &str) -> Error {
    match e {
        Error::Schema { field, message } => Error::schema(field.replacen("train", section, 1), message),
        other => other,
    }
}

/// Loads the resolved config stored in a run directory.
pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join(RESOLVED_CONFIG))
}

fn write_train_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut s = String::from("epoch,loss,lr,accuracy\n");
    for r in records {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.lr, acc));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Trains the baseline from its seeded initialization on the training split.
pub fn pretrain_baseline(cfg: &RunConfig, data: &SynthSplits) -> Result<(Network<f32>, Vec<TrainRecord>)> {
    let spec = cfg.backbone_spec()?;
    let mut net = Network::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let records = train(&mut net, &data.train, &cfg.pretrain, Some(&data.val_alpha))?;
    Ok((net, records))
}

/// Progress callbacks for long-running commands.
pub trait Progress {
    fn message(&mut self, _text: &str) {}
    fn epoch(&mut self, _m: &EpochMetrics) {}
}

impl Progress for () {}

/// Pretrains (or reuses) the baseline, then searches, saving resumable state after every
/// epoch. With `resume`, an existing baseline and search state are picked up.
pub fn search_run(cfg: &RunConfig, dir: &Path, resume: bool, progress: &mut dyn Progress) -> Result<SearchOutcome<f32>> {
    let cfg = cfg.resolved()?;
    fs::create_dir_all(dir)?;
    let config_path = dir.join(RESOLVED_CONFIG);
    if resume && config_path.exists() && load_run_config(dir)? != cfg {
        return Err(Error::Config(format!(
            "{} holds a different configuration; refusing to resume",
            dir.display()
        )));
    }
    fs::write(&config_path, cfg.to_json())?;
    let spec = cfg.backbone_spec()?;
    let data = generate(&cfg.synth)?;

    let base_dir = dir.join(BASELINE_DIR);
    let baseline = if resume && base_dir.join(crate::checkpoint::MANIFEST).exists() {
        progress.message("reusing pretrained baseline");
        load_network::<f32>(&base_dir)?.0
    } else {
        progress.message("pretraining baseline");
        let (net, records) = pretrain_baseline(&cfg, &data)?;
        write_train_csv(&dir.join("pretrain_metrics.csv"), &records)?;
        if let Some(acc) = records.last().and_then(|r| r.accuracy) {
            progress.message(&format!("baseline accuracy {acc:.4}"));
        }
        save_network(&net, &base_dir)?;
        net
    };

    let (wdata, adata) = (data.get(cfg.search.weight_split), data.get(cfg.search.alpha_split));
    let state_dir = dir.join(STATE_DIR);
    let mut state = if resume && state_dir.join("state.json").exists() {
        let s = SearchState::<f32>::load(&state_dir)?;
        progress.message(&format!("resuming search at epoch {}", s.epoch));
        s
    } else {
        let net = build_supernet(&spec, &cfg.search_space, Some(&baseline), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        SearchState::new(net, cfg.search.clone(), wdata.len())?
    };
    while !state.is_finished() {
        alternate_epoch(&mut state, wdata, adata)?;
        progress.epoch(state.metrics.last().expect("epoch recorded"));
        state.save(&state_dir)?;
    }
    let outcome = finish_search(state, wdata, adata, &cfg.synth.dataset_id(), &mut |_| {})?;
    outcome.write_artifacts(dir)?;
    Ok(outcome)
}

/// Re-decodes the plan from the alphas recorded after `epoch` (the last epoch by default).
pub fn decode_run(dir: &Path, epoch: Option<usize>) -> Result<TransformPlan> {
    let cfg = load_run_config(dir)?;
    let path = dir.join(HISTORY);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let history = parse_history(&fs::read_to_string(&path)?)?;
    if history.is_empty() {
        return Err(Error::schema(HISTORY, "alpha history is empty"));
    }
    let e = epoch.unwrap_or(history.len() - 1);
    let snap = history
        .iter()
        .find(|s| s.epoch == e)
        .ok_or_else(|| Error::Config(format!("no alpha snapshot for epoch {e} (have 0..{})", history.len())))?;
    let spec = cfg.backbone_spec()?;
    decode_plan(&spec, &cfg.search_space, &snap.alphas, provenance_for(&history, e, &cfg.synth.dataset_id()))
}

pub fn load_plan(path: &Path) -> Result<TransformPlan> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    TransformPlan::from_json(&fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub baseline_costs: Costs,
    pub transformed_costs: Costs,
    pub transformed: Vec<TrainRecord>,
    pub baseline: Option<Vec<TrainRecord>>,
    pub transformed_accuracy: f64,
    pub baseline_accuracy: Option<f64>,
}

impl RetrainReport {
    pub fn parity(&self) -> bool {
        self.baseline_costs == self.transformed_costs
    }

    pub fn parity_line(&self) -> String {
        format!(
            "params {} vs baseline {}, MACs {} vs baseline {}: {}",
            self.transformed_costs.params,
            self.baseline_costs.params,
            self.transformed_costs.macs,
            self.baseline_costs.macs,
            if self.parity() { "parity" } else { "MISMATCH" }
        )
    }
}

/// Applies the run's plan to the pretrained baseline and trains it with the retraining
/// schedule. With `with_baseline`, the untransformed baseline is retrained identically
/// for comparison.
pub fn retrain_run(dir: &Path, with_baseline: bool, plan_path: Option<&Path>) -> Result<RetrainReport> {
    let cfg = load_run_config(dir)?;
    let spec = cfg.backbone_spec()?;
    let plan = load_plan(&plan_path.map_or_else(|| dir.join(PLAN), Path::to_path_buf))?;
    let (baseline, _) = load_network::<f32>(&dir.join(BASELINE_DIR))?;
    let train_data = generate_split(&cfg.synth, Split::Train)?;
    let eval_data = generate_split(&cfg.synth, Split::ValAlpha)?;
    let input = (cfg.synth.image_size, cfg.synth.image_size);

    let mut net = apply_plan(&spec, &plan, &baseline)?;
    let transformed_costs = net.costs(input)?;
    let records = train(&mut net, &train_data, &cfg.retrain, None)?;
    let transformed_accuracy = evaluate(&mut net, &eval_data, cfg.retrain.batch_size)?;
    save_network(&net, &dir.join("retrained"))?;
    write_train_csv(&dir.join("retrain_metrics.csv"), &records)?;

    let (mut baseline_records, mut baseline_accuracy) = (None, None);
    if with_baseline {
        let mut b = baseline.duplicate()?;
        let r = train(&mut b, &train_data, &cfg.retrain, None)?;
        baseline_accuracy = Some(evaluate(&mut b, &eval_data, cfg.retrain.batch_size)?);
        save_network(&b, &dir.join("baseline_retrained"))?;
        write_train_csv(&dir.join("baseline_retrain_metrics.csv"), &r)?;
        baseline_records = Some(r);
    }
    let report = RetrainReport {
        baseline_costs: plan_costs(&spec, None, input)?,
        transformed_costs,
        transformed: records,
        baseline: baseline_records,
        transformed_accuracy,
        baseline_accuracy,
    };
    fs::write(dir.join("retrain_report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Receptive fields of the baseline and the transformed network (the retrained one when
/// present, otherwise the plan applied to the baseline).
pub fn erf_run(dir: &Path, mass: f64, scale: usize) -> Result<Vec<ErfRow>> {
    let cfg = load_run_config(dir)?;
    let spec = cfg.backbone_spec()?;
    let (baseline, _) = load_network::<f64>(&dir.join(BASELINE_DIR))?;
    let retrained = dir.join("retrained");
    let transformed = if retrained.join(crate::checkpoint::MANIFEST).exists() {
        load_network::<f64>(&retrained)?.0
    } else {
        apply_plan(&spec, &load_plan(&dir.join(PLAN))?, &baseline)?
    };
    let out = dir.join("erf");
    fs::create_dir_all(&out)?;
    let input = (cfg.synth.image_size, cfg.synth.image_size);
    let mut rows = Vec::new();
    for (name, mut net) in [("baseline", baseline), ("transformed", transformed)] {
        let mut map = erf_map(&mut net, input)?;
        map.network = name.into();
        render_erf(&map, &out.join(format!("{name}.png")), scale)?;
        rows.push(ErfRow {
            network: name.into(),
            layer: map.layer.clone(),
            mass,
            radius: erf_radius(&map, mass)?,
        });
    }
    write_erf_csv(&rows, &out.join("erf.csv"))?;
    Ok(rows)
}
