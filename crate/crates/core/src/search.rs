//! Bilevel search: weight steps on one split alternate batch by batch with architecture
//! steps on the other, after an initial period in which the architecture is frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_supernet, supernet_layer_specs, BackboneSpec, Network, NetworkKind, Provenance, TransformPlan};
use crate::checkpoint::{self, read_tensors, write_tensors, TensorEntry};
use crate::decoder::{block_spec_from_indices, decode_indices, intensity};
use crate::error::{Error, Result};
use crate::genotype::SearchSpaceConfig;
use crate::mixed::AlphaTable;
use crate::nn::{GradTarget, Mode};
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::synth::{Dataset, Split};
use crate::tensor::Scalar;
use crate::train::{batches, epoch_order};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub total_epochs: usize,
    /// Epochs before the first architecture step; `None` means `round(0.4 · total_epochs)`.
    pub alpha_freeze_epochs: Option<usize>,
    pub weight_lr_max: f64,
    pub weight_lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_weight_decay: f64,
    pub alpha_betas: (f64, f64),
    pub weight_split: Split,
    pub alpha_split: Split,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            total_epochs: 25,
            alpha_freeze_epochs: None,
            weight_lr_max: 1.25e-3,
            weight_lr_min: 5e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha_lr: 1e-2,
            alpha_weight_decay: 1e-5,
            alpha_betas: (0.9, 0.999),
            weight_split: Split::ValWeight,
            alpha_split: Split::ValAlpha,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn freeze_epochs(&self) -> usize {
        self.alpha_freeze_epochs
            .unwrap_or_else(|| (0.4 * self.total_epochs as f64).round() as usize)
    }

    /// Copy with every defaulted value made explicit.
    pub fn resolved(&self) -> SearchConfig {
        SearchConfig {
            alpha_freeze_epochs: Some(self.freeze_epochs()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::schema("search.total_epochs", "must be positive"));
        }
        if self.freeze_epochs() >= self.total_epochs {
            return Err(Error::schema(
                "search.alpha_freeze_epochs",
                format!("must be below total_epochs ({})", self.total_epochs),
            ));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.weight_lr_max) || !positive(self.weight_lr_min) || self.weight_lr_min > self.weight_lr_max {
            return Err(Error::schema("search.weight_lr_max", "learning-rate bounds must be positive with min ≤ max"));
        }
        if !positive(self.alpha_lr) {
            return Err(Error::schema("search.alpha_lr", "must be positive"));
        }
        if self.weight_split == self.alpha_split {
            return Err(Error::schema("search.alpha_split", "weight and alpha splits must differ"));
        }
        if self.batch_size == 0 {
            return Err(Error::schema("search.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Architecture parameters at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub epoch: usize,
    pub alphas: BTreeMap<String, AlphaTable>,
    /// Decoded intensity per layer, in genotype order.
    pub intensities: BTreeMap<String, Vec<f64>>,
}

impl AlphaSnapshot {
    pub fn capture<T: Scalar>(epoch: usize, net: &Network<T>) -> Self {
        let alphas = net.alphas();
        let intensities = alphas
            .iter()
            .map(|(k, a)| (k.clone(), intensity(&decode_indices(a)).values()))
            .collect();
        AlphaSnapshot {
            epoch,
            alphas,
            intensities,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub weight_loss: f64,
    pub alpha_loss: Option<f64>,
    /// Weight learning rate at the last step of the epoch.
    pub lr: f64,
}

/// Everything needed to continue a search exactly where it stopped.
pub struct SearchState<T> {
    pub net: Network<T>,
    pub config: SearchConfig,
    pub epoch: usize,
    pub step: usize,
    pub steps_per_epoch: usize,
    pub history: Vec<AlphaSnapshot>,
    pub metrics: Vec<EpochMetrics>,
    sgd: Sgd<T>,
    adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    config: SearchConfig,
    epoch: usize,
    step: usize,
    steps_per_epoch: usize,
    history: Vec<AlphaSnapshot>,
    metrics: Vec<EpochMetrics>,
    adam_t: u64,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> SearchState<T> {
    pub fn new(net: Network<T>, config: SearchConfig, weight_len: usize) -> Result<Self> {
        config.validate()?;
        if net.kind() != NetworkKind::Supernet {
            return Err(Error::Config("search needs a supernet".into()));
        }
        if weight_len < 2 {
            return Err(Error::Config("the weight split needs at least two samples".into()));
        }
        let steps_per_epoch = batches(&(0..weight_len).collect::<Vec<_>>(), config.batch_size).len();
        Ok(SearchState {
            sgd: Sgd::new(config.momentum, config.weight_decay),
            adam: Adam::new(config.alpha_lr, config.alpha_weight_decay, config.alpha_betas),
            net,
            config,
            epoch: 0,
            step: 0,
            steps_per_epoch,
            history: Vec::new(),
            metrics: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.total_epochs
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save_network(&self.net, &dir.join("network"))?;
        let mut named: Vec<(String, Vec<usize>, Vec<T>)> = Vec::new();
        for (i, b) in self.sgd.buffers().iter().enumerate() {
            named.push((format!("sgd.{i}"), vec![b.len()], b.clone()));
        }
        // Adam moments are kept in f64 even when T is f32; store them separately.
        let mut moments: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            moments.push((format!("adam.m.{i}"), vec![m.len()], m.clone()));
            moments.push((format!("adam.v.{i}"), vec![v.len()], v.clone()));
        }
        let tensors = write_tensors(&dir.join("sgd.bin"), &named)?;
        let moment_entries = write_tensors(&dir.join("adam.bin"), &moments)?;
        let file = StateFile {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            steps_per_epoch: self.steps_per_epoch,
            history: self.history.clone(),
            metrics: self.metrics.clone(),
            adam_t: self.adam.t,
            dtype: T::DTYPE.into(),
            tensors: [tensors, moment_entries].concat(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let file: StateFile = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let (net, _) = checkpoint::load_network::<T>(&dir.join("network"))?;
        let (sgd_entries, adam_entries): (Vec<TensorEntry>, Vec<TensorEntry>) =
            file.tensors.iter().cloned().partition(|e| e.name.starts_with("sgd."));
        let sgd_map = read_tensors::<T>(&dir.join("sgd.bin"), &file.dtype, &sgd_entries)?;
        let adam_map = read_tensors::<f64>(&dir.join("adam.bin"), "f64", &adam_entries)?;
        let mut sgd = Sgd::new(file.config.momentum, file.config.weight_decay);
        sgd.set_buffers(
            (0..sgd_map.len())
                .map(|i| sgd_map.get(&format!("sgd.{i}")).map(|(_, v)| v.clone()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::schema("tensors", "momentum buffers are not numbered contiguously"))?,
        );
        let mut adam = Adam::new(file.config.alpha_lr, file.config.alpha_weight_decay, file.config.alpha_betas);
        adam.t = file.adam_t;
        for i in 0..adam_map.len() / 2 {
            let get = |k: &str| {
                adam_map
                    .get(&format!("adam.{k}.{i}"))
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| Error::schema("tensors", format!("missing adam.{k}.{i}")))
            };
            adam.m.push(get("m")?);
            adam.v.push(get("v")?);
        }
        Ok(SearchState {
            net,
            config: file.config,
            epoch: file.epoch,
            step: file.step,
            steps_per_epoch: file.steps_per_epoch,
            history: file.history,
            metrics: file.metrics,
            sgd,
            adam,
        })
    }
}

fn check_finite<T: Scalar>(loss: f64, net: &Network<T>, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Consistency(format!("non-finite loss at step {step}")));
    }
    if net.alphas().values().any(|a| !a.is_finite()) {
        return Err(Error::Consistency(format!("non-finite architecture parameters at step {step}")));
    }
    Ok(())
}

/// One epoch of alternating optimization.
pub fn alternate_epoch<T: Scalar>(state: &mut SearchState<T>, weight_data: &Dataset, alpha_data: &Dataset) -> Result<()> {
    if weight_data.len() < 2 || alpha_data.len() < 2 {
        return Err(Error::Config("both search splits need at least two samples".into()));
    }
    if state.is_finished() {
        return Err(Error::Config("search schedule already completed".into()));
    }
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let update_alphas = epoch >= cfg.freeze_epochs();
    let w_batches = batches(&epoch_order(weight_data.len(), cfg.seed, 0x3e16, epoch), cfg.batch_size);
    if w_batches.len() != state.steps_per_epoch {
        return Err(Error::Config("weight split size changed during search".into()));
    }
    let a_batches = batches(&epoch_order(alpha_data.len(), cfg.seed, 0xa1fa, epoch), cfg.batch_size);
    let total = state.total_steps();
    let (mut w_loss, mut w_seen, mut a_loss, mut a_seen) = (0.0, 0, 0.0, 0);
    let mut lr = cfg.weight_lr_max;
    for (b, wb) in w_batches.iter().enumerate() {
        lr = cosine_lr(state.step, total, cfg.weight_lr_max, cfg.weight_lr_min)?;
        let (x, y) = weight_data.batch::<T>(wb);
        state.net.zero_grad();
        let loss = state
            .net
            .loss_and_grad(&x, &y, Mode::Train { update_stats: true }, GradTarget::WEIGHTS)?;
        check_finite(loss, &state.net, state.step)?;
        state.sgd.step(&mut state.net, lr);
        w_loss += loss * wb.len() as f64;
        w_seen += wb.len();

        if update_alphas {
            let ab = &a_batches[b % a_batches.len()];
            let (x, y) = alpha_data.batch::<T>(ab);
            state.net.zero_grad();
            let loss = state
                .net
                .loss_and_grad(&x, &y, Mode::Train { update_stats: false }, GradTarget::ALPHAS)?;
            state.adam.step(&mut state.net);
            check_finite(loss, &state.net, state.step)?;
            a_loss += loss * ab.len() as f64;
            a_seen += ab.len();
        }
        state.step += 1;
    }
    state.metrics.push(EpochMetrics {
        epoch,
        weight_loss: w_loss / w_seen as f64,
        alpha_loss: update_alphas.then(|| a_loss / a_seen as f64),
        lr,
    });
    state.history.push(AlphaSnapshot::capture(epoch, &state.net));
    state.epoch += 1;
    Ok(())
}

/// Decodes a plan from alpha tables keyed by layer id.
pub fn decode_plan(
    spec: &BackboneSpec,
    space: &SearchSpaceConfig,
    alphas: &BTreeMap<String, AlphaTable>,
    provenance: Provenance,
) -> Result<TransformPlan> {
    let layers = supernet_layer_specs(spec, space)?
        .iter()
        .map(|(id, m)| {
            let a = alphas
                .get(id)
                .ok_or_else(|| Error::schema(format!("alphas.{id}"), "missing alpha table"))?;
            if a.groups() != m.group_count || a.genotypes() != m.genotypes.len() {
                return Err(Error::schema(
                    format!("alphas.{id}"),
                    format!("expected {}×{} table", m.group_count, m.genotypes.len()),
                ));
            }
            block_spec_from_indices(id, &decode_indices(a), m)
        })
        .collect::<Result<Vec<_>>>()?;
    let order = spec.searchable_layers();
    let mut layers = layers;
    layers.sort_by_key(|l| order.iter().position(|o| *o == l.layer));
    Ok(TransformPlan {
        backbone: spec.name.clone(),
        search_space: space.clone(),
        layers,
        provenance,
    })
}

/// Alpha history as JSON lines, one snapshot per line.
pub fn history_jsonl(history: &[AlphaSnapshot]) -> String {
    let mut out = String::new();
    for s in history {
        out.push_str(&serde_json::to_string(s).expect("snapshot serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_history(text: &str) -> Result<Vec<AlphaSnapshot>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,weight_loss,alpha_loss,lr\n");
    for m in metrics {
        let a = m.alpha_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", m.epoch, m.weight_loss, a, m.lr);
    }
    out
}

/// Provenance for a plan decoded from `history[epoch]`.
pub fn provenance_for(history: &[AlphaSnapshot], epoch: usize, dataset: &str) -> Provenance {
    let digest = hex::encode(Sha256::digest(history_jsonl(&history[..=epoch.min(history.len().saturating_sub(1))]).as_bytes()));
    Provenance {
        search_digest: digest,
        epoch: Some(epoch),
        dataset: dataset.to_string(),
    }
}

pub struct SearchOutcome<T> {
    pub plan: TransformPlan,
    pub state: SearchState<T>,
}

impl<T: Scalar> SearchOutcome<T> {
    /// Writes `plan.json`, `alpha_history.jsonl` and `metrics.csv`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("plan.json"), self.plan.to_json())?;
        fs::write(dir.join("alpha_history.jsonl"), history_jsonl(&self.state.history))?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&self.state.metrics))?;
        Ok(())
    }
}

/// Runs the remaining epochs of `state` and decodes the final architecture.
pub fn finish_search<T: Scalar>(
    mut state: SearchState<T>,
    weight_data: &Dataset,
    alpha_data: &Dataset,
    dataset_id: &str,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<SearchOutcome<T>> {
    while !state.is_finished() {
        alternate_epoch(&mut state, weight_data, alpha_data)?;
        on_epoch(state.metrics.last().expect("epoch recorded"));
    }
    let space = state
        .net
        .search_space()
        .cloned()
        .ok_or_else(|| Error::Consistency("supernet lost its search space".into()))?;
    let last = state.history.len() - 1;
    let prov = provenance_for(&state.history, last, dataset_id);
    let plan = decode_plan(state.net.spec(), &space, &state.history[last].alphas, prov)?;
    Ok(SearchOutcome { plan, state })
}

/// Full search from a baseline (or from scratch when `baseline` is `None`).
pub fn run_search<T: Scalar>(
    spec: &BackboneSpec,
    space: &SearchSpaceConfig,
    baseline: Option<&Network<T>>,
    weight_data: &Dataset,
    alpha_data: &Dataset,
    config: &SearchConfig,
    dataset_id: &str,
) -> Result<SearchOutcome<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = build_supernet(spec, space, baseline, &mut rng)?;
    let state = SearchState::new(net, config.clone(), weight_data.len())?;
    finish_search(state, weight_data, alpha_data, dataset_id, &mut |_| {})
}
