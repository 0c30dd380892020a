//! On-disk checkpoints: a directory holding `manifest.json` and a flat little-endian
//! `weights.bin`, plus standalone tensor files for optimizer state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{apply_plan, build_supernet, BackboneSpec, Network, NetworkKind, TensorMap, TransformPlan};
use crate::error::{Error, Result};
use crate::genotype::SearchSpaceConfig;
use crate::mixed::AlphaTable;
use crate::tensor::Scalar;

pub const FORMAT: &str = "nats-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the data file.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub kind: NetworkKind,
    pub backbone: BackboneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_space: Option<SearchSpaceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<TransformPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<BTreeMap<String, AlphaTable>>,
    pub tensors: Vec<TensorEntry>,
}

type Named<T> = Vec<(String, Vec<usize>, Vec<T>)>;

/// Writes tensors back to back; returns their index.
pub fn write_tensors<T: Scalar>(path: &Path, tensors: &Named<T>) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("tensor `{name}` length does not match its shape")));
        }
        bytes.extend(T::to_le_bytes_vec(data));
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
        offset += data.len();
    }
    fs::write(path, bytes)?;
    Ok(entries)
}

/// Reads tensors stored as `dtype`, converting to `T`.
pub fn read_tensors<T: Scalar>(
    path: &Path,
    dtype: &str,
    entries: &[TensorEntry],
) -> Result<TensorMap<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::schema("dtype", format!("unsupported dtype `{other}`"))),
    };
    let mut out = BTreeMap::new();
    for e in entries {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::schema(format!("tensors.{}.shape", e.name), "does not match len"));
        }
        let (a, b) = (e.offset * width, (e.offset + e.len) * width);
        if b > bytes.len() {
            return Err(Error::Shape(format!(
                "tensor `{}` extends past the end of {}",
                e.name,
                path.display()
            )));
        }
        let raw = &bytes[a..b];
        let values: Vec<T> = if dtype == T::DTYPE {
            T::from_le_bytes_slice(raw)
        } else if dtype == "f32" {
            f32::from_le_bytes_slice(raw).iter().map(|&v| T::from_f64_lossy(v as f64)).collect()
        } else {
            f64::from_le_bytes_slice(raw).iter().map(|&v| T::from_f64_lossy(v)).collect()
        };
        out.insert(e.name.clone(), (e.shape.clone(), values));
    }
    Ok(out)
}

pub fn save_network<T: Scalar>(net: &Network<T>, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let tensors = write_tensors(&dir.join(WEIGHTS), &net.named_tensors())?;
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: T::DTYPE.into(),
        kind: net.kind(),
        backbone: net.spec().clone(),
        search_space: net.search_space().cloned(),
        plan: net.plan().cloned(),
        plan_digest: net.plan().map(TransformPlan::digest),
        alphas: (net.kind() == NetworkKind::Supernet).then(|| net.alphas()),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if m.format != FORMAT {
        return Err(Error::schema("format", format!("expected `{FORMAT}`, found `{}`", m.format)));
    }
    Ok(m)
}

/// Rebuilds the network described by a checkpoint directory.
pub fn load_network<T: Scalar>(dir: &Path) -> Result<(Network<T>, Manifest)> {
    let m = read_manifest(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fresh = Network::<T>::new(m.backbone.clone(), &mut rng)?;
    let mut net = match m.kind {
        NetworkKind::Baseline => fresh,
        NetworkKind::Supernet => {
            let space = m
                .search_space
                .as_ref()
                .ok_or_else(|| Error::schema("search_space", "required for a supernet checkpoint"))?;
            build_supernet(&m.backbone, space, Some(&fresh), &mut rng)?
        }
        NetworkKind::Transformed => {
            let plan = m
                .plan
                .as_ref()
                .ok_or_else(|| Error::schema("plan", "required for a transformed checkpoint"))?;
            if m.plan_digest.as_deref().is_some_and(|d| d != plan.digest()) {
                return Err(Error::schema("plan_digest", "does not match the stored plan"));
            }
            apply_plan(&m.backbone, plan, &fresh)?
        }
    };
    let tensors = read_tensors::<T>(&dir.join(WEIGHTS), &m.dtype, &m.tensors)?;
    net.load_named_tensors(&tensors)?;
    if let Some(alphas) = &m.alphas {
        net.set_alphas(alphas)?;
    }
    Ok((net, m))
}
