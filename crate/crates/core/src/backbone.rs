//! Residual bottleneck backbones, their search-time supernets and decoded transforms.
//!
//! Stage numbering follows the usual ResNet convention: the stem is stage 1, the first
//! residual stage is stage 2. The middle 3×3 convolution of every bottleneck in stages
//! 3–5 is searchable, including the strided first block of each stage.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::ConvGeom;
use crate::decoder::{decoded_conv_from_spec, DecodedBlockSpec, DecodedConv};
use crate::error::{Error, Result};
use crate::genotype::{group_count_for_layer, Genotype, SearchSpaceConfig, SEARCHABLE_STAGES};
use crate::mixed::{init_from_baseline, AlphaTable, MixedConv, MixedConvSpec};
use crate::nn::{cross_entropy, BatchNorm2d, Conv2d, GradTarget, Linear, MaxPool, Mode, Relu};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub mid_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub input_channels: usize,
    pub stem: StemSpec,
    /// Stages 2, 3, 4, 5 in order.
    pub stages: Vec<StageSpec>,
    pub expansion: usize,
    pub num_classes: usize,
    pub desk_scale: bool,
}

impl BackboneSpec {
    /// Desk-scale bottleneck network: (2,2,2,2) blocks, mid-channels (16,32,64,128).
    /// Stage 5 keeps stage 4's resolution (total stride 8), so a 64 px input still leaves
    /// an 8×8 map on which dilations up to 5 read real pixels rather than padding.
    pub fn mini_resnet(input_channels: usize, num_classes: usize) -> Self {
        BackboneSpec {
            name: "mini-resnet".into(),
            input_channels,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 2,
                max_pool: false,
            },
            stages: [16, 32, 64, 128]
                .iter()
                .zip([1, 2, 2, 1])
                .map(|(&mid_channels, stride)| StageSpec {
                    blocks: 2,
                    mid_channels,
                    stride,
                })
                .collect(),
            expansion: 4,
            num_classes,
            desk_scale: true,
        }
    }

    /// ResNet-50 shapes: (3,4,6,3) blocks, mid-channels (64,128,256,512), 7×7 stem + max pool.
    pub fn resnet50(input_channels: usize, num_classes: usize) -> Self {
        BackboneSpec {
            name: "resnet50".into(),
            input_channels,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            stages: [(3, 64), (4, 128), (6, 256), (3, 512)]
                .iter()
                .zip([1, 2, 2, 2])
                .map(|(&(blocks, mid_channels), stride)| StageSpec {
                    blocks,
                    mid_channels,
                    stride,
                })
                .collect(),
            expansion: 4,
            num_classes,
            desk_scale: false,
        }
    }

    pub fn preset(name: &str, input_channels: usize, num_classes: usize) -> Result<Self> {
        match name {
            "mini-resnet" => Ok(Self::mini_resnet(input_channels, num_classes)),
            "resnet50" => Ok(Self::resnet50(input_channels, num_classes)),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::schema("backbone.stages", "exactly four residual stages (2–5) are required"));
        }
        if self.input_channels == 0 || self.num_classes == 0 || self.expansion == 0 {
            return Err(Error::schema("backbone", "channel and class counts must be positive"));
        }
        if self.stem.kernel.is_multiple_of(2) || self.stem.stride == 0 {
            return Err(Error::schema("backbone.stem", "kernel must be odd and stride positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.mid_channels == 0 || !matches!(s.stride, 1 | 2) {
                return Err(Error::schema(
                    format!("backbone.stages.{i}"),
                    "blocks and mid_channels must be positive, stride 1 or 2",
                ));
            }
        }
        Ok(())
    }

    /// Block descriptors in network order.
    pub fn blocks(&self) -> Vec<BlockLayout> {
        let mut out = Vec::new();
        let mut in_ch = self.stem.channels;
        for (si, stage) in self.stages.iter().enumerate() {
            let stage_id = (si + 2) as u8;
            for b in 0..stage.blocks {
                let out_ch = stage.mid_channels * self.expansion;
                let stride = if b == 0 { stage.stride } else { 1 };
                out.push(BlockLayout {
                    id: format!("{stage_id}.{b}"),
                    stage: stage_id,
                    in_channels: in_ch,
                    mid_channels: stage.mid_channels,
                    out_channels: out_ch,
                    stride,
                    downsample: stride != 1 || in_ch != out_ch,
                });
                in_ch = out_ch;
            }
        }
        out
    }

    /// Identifiers of the searchable 3×3 layers, in network order.
    pub fn searchable_layers(&self) -> Vec<String> {
        self.blocks()
            .into_iter()
            .filter(|b| b.searchable())
            .map(|b| b.id)
            .collect()
    }

    /// Product of all strides between input and final feature map.
    pub fn total_stride(&self) -> usize {
        let pool = if self.stem.max_pool { 2 } else { 1 };
        self.stem.stride * pool * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.mid_channels * self.expansion)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub id: String,
    pub stage: u8,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub downsample: bool,
}

impl BlockLayout {
    pub fn searchable(&self) -> bool {
        SEARCHABLE_STAGES.contains(&self.stage)
    }

    fn mid_shape(&self) -> [usize; 4] {
        [self.mid_channels, self.mid_channels, 3, 3]
    }
}

/// Search-time or decoded form of a bottleneck's middle convolution.
pub enum SearchConv<T> {
    Plain(Conv2d<T>),
    Mixed(MixedConv<T>),
    Decoded(DecodedConv<T>),
}

impl<T: Scalar> SearchConv<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            SearchConv::Plain(c) => c.forward(x),
            SearchConv::Mixed(m) => m.forward(x),
            SearchConv::Decoded(d) => d.forward(x),
        }
    }

    fn backward(&mut self, dy: &Tensor<T>, target: GradTarget) -> Result<Tensor<T>> {
        let dx = match self {
            SearchConv::Plain(c) => c.backward(dy, true, target.weights)?,
            SearchConv::Mixed(m) => m.backward(dy, true, target.weights, target.alphas)?,
            SearchConv::Decoded(d) => d.backward(dy, true, target.weights)?,
        };
        dx.ok_or_else(|| Error::Consistency("missing input gradient".into()))
    }

    fn zero_grad(&mut self) {
        match self {
            SearchConv::Plain(c) => c.zero_grad(),
            SearchConv::Mixed(m) => m.zero_grad(),
            SearchConv::Decoded(d) => d.zero_grad(),
        }
    }
}

pub struct Bottleneck<T> {
    layout: BlockLayout,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    conv2: SearchConv<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu,
}

impl<T: Scalar> Bottleneck<T> {
    fn init<R: Rng + ?Sized>(layout: BlockLayout, rng: &mut R) -> Self {
        let conv1 = Conv2d::init(layout.in_channels, layout.mid_channels, ConvGeom::pointwise(1), rng);
        let conv2 = Conv2d::init(
            layout.mid_channels,
            layout.mid_channels,
            ConvGeom::same(3, layout.stride, Genotype::IDENTITY),
            rng,
        );
        let conv3 = Conv2d::init(layout.mid_channels, layout.out_channels, ConvGeom::pointwise(1), rng);
        let downsample = layout.downsample.then(|| {
            (
                Conv2d::init(layout.in_channels, layout.out_channels, ConvGeom::pointwise(layout.stride), rng),
                BatchNorm2d::new(layout.out_channels),
            )
        });
        Bottleneck {
            bn1: BatchNorm2d::new(layout.mid_channels),
            bn2: BatchNorm2d::new(layout.mid_channels),
            bn3: BatchNorm2d::new(layout.out_channels),
            conv1,
            relu1: Relu::default(),
            conv2: SearchConv::Plain(conv2),
            relu2: Relu::default(),
            conv3,
            downsample,
            relu_out: Relu::default(),
            layout,
        }
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn mid_conv(&self) -> &SearchConv<T> {
        &self.conv2
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = self.conv1.forward(x)?;
        let out = self.bn1.forward(&out, mode)?;
        let out = self.relu1.forward(out, mode);
        let out = self.conv2.forward(&out)?;
        let out = self.bn2.forward(&out, mode)?;
        let out = self.relu2.forward(out, mode);
        let out = self.conv3.forward(&out)?;
        let mut out = self.bn3.forward(&out, mode)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let sc = conv.forward(x)?;
                out.add_assign(&bn.forward(&sc, mode)?);
            }
            None => out.add_assign(x),
        }
        Ok(self.relu_out.forward(out, mode))
    }

    fn backward(&mut self, dy: Tensor<T>, target: GradTarget) -> Result<Tensor<T>> {
        let w = target.weights;
        let d = self.relu_out.backward(dy);
        let d_sc = match &mut self.downsample {
            Some((conv, bn)) => {
                let g = bn.backward(&d, w)?;
                conv.backward(&g, true, w)?.expect("dx requested")
            }
            None => d.clone(),
        };
        let g = self.bn3.backward(&d, w)?;
        let g = self.conv3.backward(&g, true, w)?.expect("dx requested");
        let g = self.relu2.backward(g);
        let g = self.bn2.backward(&g, w)?;
        let g = self.conv2.backward(&g, target)?;
        let g = self.relu1.backward(g);
        let g = self.bn1.backward(&g, w)?;
        let mut dx = self.conv1.backward(&g, true, w)?.expect("dx requested");
        dx.add_assign(&d_sc);
        Ok(dx)
    }

    fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.bn1.zero_grad();
        self.conv2.zero_grad();
        self.bn2.zero_grad();
        self.conv3.zero_grad();
        self.bn3.zero_grad();
        if let Some((c, b)) = &mut self.downsample {
            c.zero_grad();
            b.zero_grad();
        }
    }
}

/// Named tensors with their shapes, as stored in checkpoints.
pub type TensorMap<T> = BTreeMap<String, (Vec<usize>, Vec<T>)>;

type Lookup<'a, T> = dyn FnMut(&str, &[usize]) -> Result<Vec<T>> + 'a;

/// A bottleneck backbone with a global-average-pool classifier head.
pub struct Network<T> {
    spec: BackboneSpec,
    stem: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu,
    pool: Option<MaxPool>,
    blocks: Vec<Bottleneck<T>>,
    fc: Linear<T>,
    feature_shape: [usize; 4],
    space: Option<SearchSpaceConfig>,
    plan: Option<TransformPlan>,
}

/// What a network's searchable layers currently are.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Baseline,
    Supernet,
    Transformed,
}

impl<T: Scalar> Network<T> {
    /// Baseline network with He-normal initialization.
    pub fn new<R: Rng + ?Sized>(spec: BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::init(
            spec.input_channels,
            spec.stem.channels,
            ConvGeom::same(spec.stem.kernel, spec.stem.stride, Genotype::IDENTITY),
            rng,
        );
        let blocks = spec.blocks().into_iter().map(|l| Bottleneck::init(l, rng)).collect();
        let fc = Linear::init(spec.feature_channels(), spec.num_classes, rng);
        Ok(Network {
            stem_bn: BatchNorm2d::new(spec.stem.channels),
            stem,
            stem_relu: Relu::default(),
            pool: spec.stem.max_pool.then(MaxPool::default),
            blocks,
            fc,
            feature_shape: [0; 4],
            space: None,
            plan: None,
            spec,
        })
    }

    pub fn kind(&self) -> NetworkKind {
        if self.plan.is_some() {
            NetworkKind::Transformed
        } else if self.space.is_some() {
            NetworkKind::Supernet
        } else {
            NetworkKind::Baseline
        }
    }

    /// Search space of a supernet.
    pub fn search_space(&self) -> Option<&SearchSpaceConfig> {
        self.space.as_ref()
    }

    /// Plan a transformed network was built from.
    pub fn plan(&self) -> Option<&TransformPlan> {
        self.plan.as_ref()
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Bottleneck<T>] {
        &self.blocks
    }

    pub fn is_baseline(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b.conv2, SearchConv::Plain(_)))
    }

    pub fn is_supernet(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.conv2, SearchConv::Mixed(_)))
    }

    /// Final feature map (input to global pooling).
    pub fn features(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.channels() != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.spec.input_channels,
                x.channels()
            )));
        }
        let stride = self.spec.total_stride();
        if x.height() < stride || x.width() < stride {
            return Err(Error::Shape(format!(
                "input {}×{} is smaller than the network's total stride {stride}",
                x.height(),
                x.width()
            )));
        }
        let out = self.stem.forward(x)?;
        let out = self.stem_bn.forward(&out, mode)?;
        let mut out = self.stem_relu.forward(out, mode);
        if let Some(pool) = &mut self.pool {
            out = pool.forward(&out);
        }
        for b in &mut self.blocks {
            out = b.forward(&out, mode)?;
        }
        self.feature_shape = out.shape();
        Ok(out)
    }

    /// Gradient of the features back to the input. `dx` is returned when `want_dx`.
    pub fn backward_features(&mut self, dfeat: Tensor<T>, target: GradTarget, want_dx: bool) -> Result<Option<Tensor<T>>> {
        let mut d = dfeat;
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(d, target)?;
        }
        if let Some(pool) = &self.pool {
            d = pool.backward(&d);
        }
        let d = self.stem_relu.backward(d);
        let d = self.stem_bn.backward(&d, target.weights)?;
        self.stem.backward(&d, want_dx, target.weights)
    }

    /// Logits `[N, classes]`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<T>> {
        let f = self.features(x, mode)?;
        let [n, c, _, _] = f.shape();
        let plane = T::from_usize(f.plane()).unwrap();
        let mut pooled = vec![T::zero(); n * c];
        for b in 0..n {
            for ch in 0..c {
                pooled[b * c + ch] = f.channel(b, ch).iter().copied().sum::<T>() / plane;
            }
        }
        Ok(self.fc.forward(&pooled, n))
    }

    pub fn backward(&mut self, dlogits: &[T], target: GradTarget) -> Result<()> {
        let [n, c, h, w] = self.feature_shape;
        let dpooled = self.fc.backward(dlogits, n, target.weights);
        let plane = T::from_usize(h * w).unwrap();
        let mut dfeat = Tensor::zeros(self.feature_shape);
        for b in 0..n {
            for ch in 0..c {
                let g = dpooled[b * c + ch] / plane;
                dfeat.channel_mut(b, ch).iter_mut().for_each(|v| *v = g);
            }
        }
        self.backward_features(dfeat, target, false)?;
        Ok(())
    }

    /// One forward/backward pass on a labelled batch; returns the mean loss.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, labels: &[usize], mode: Mode, target: GradTarget) -> Result<f64> {
        let logits = self.forward(x, mode)?;
        let (loss, dlogits) = cross_entropy(&logits, labels, self.spec.num_classes);
        self.backward(&dlogits, target)?;
        Ok(loss)
    }

    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward(x, Mode::Eval)?;
        let k = self.spec.num_classes;
        Ok(logits
            .chunks(k)
            .map(|row| {
                let r: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
                crate::decoder::row_argmax(&r)
            })
            .collect())
    }

    pub fn zero_grad(&mut self) {
        self.stem.zero_grad();
        self.stem_bn.zero_grad();
        self.blocks.iter_mut().for_each(Bottleneck::zero_grad);
        self.fc.zero_grad();
    }

    /// Visits every trainable weight tensor with its gradient, in a fixed order.
    pub fn for_each_weight(&mut self, f: &mut dyn FnMut(&mut [T], &[T])) {
        fn conv<T: Scalar>(c: &mut Conv2d<T>, f: &mut dyn FnMut(&mut [T], &[T])) {
            f(&mut c.weight, &c.grad);
        }
        fn bn<T: Scalar>(b: &mut BatchNorm2d<T>, f: &mut dyn FnMut(&mut [T], &[T])) {
            f(&mut b.gamma, &b.grad_gamma);
            f(&mut b.beta, &b.grad_beta);
        }
        conv(&mut self.stem, f);
        bn(&mut self.stem_bn, f);
        for b in &mut self.blocks {
            conv(&mut b.conv1, f);
            bn(&mut b.bn1, f);
            match &mut b.conv2 {
                SearchConv::Plain(c) => conv(c, f),
                SearchConv::Mixed(m) => {
                    let (w, g) = m.params_mut();
                    for (k, grad) in g.iter().enumerate() {
                        f(w.replica_mut(k), grad);
                    }
                }
                SearchConv::Decoded(d) => {
                    let (w, g) = d.params_mut();
                    for (wk, gk) in w.iter_mut().zip(g.iter()) {
                        f(wk, gk);
                    }
                }
            }
            bn(&mut b.bn2, f);
            conv(&mut b.conv3, f);
            bn(&mut b.bn3, f);
            if let Some((c, n)) = &mut b.downsample {
                conv(c, f);
                bn(n, f);
            }
        }
        f(&mut self.fc.weight, &self.fc.grad_weight);
        f(&mut self.fc.bias, &self.fc.grad_bias);
    }

    /// Visits every alpha table with its gradient, in network order.
    pub fn for_each_alpha(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        for b in &mut self.blocks {
            if let SearchConv::Mixed(m) = &mut b.conv2 {
                let (a, g) = m.alpha_and_grad_mut();
                f(a.values_mut(), g);
            }
        }
    }

    /// Alpha tables of all mixed layers, keyed by layer id.
    pub fn alphas(&self) -> BTreeMap<String, AlphaTable> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.conv2 {
                SearchConv::Mixed(m) => Some((b.layout.id.clone(), m.alpha().clone())),
                _ => None,
            })
            .collect()
    }

    pub fn set_alphas(&mut self, alphas: &BTreeMap<String, AlphaTable>) -> Result<()> {
        for b in &mut self.blocks {
            if let SearchConv::Mixed(m) = &mut b.conv2 {
                let a = alphas
                    .get(&b.layout.id)
                    .ok_or_else(|| Error::Config(format!("no alpha table for layer {}", b.layout.id)))?;
                if a.groups() != m.alpha().groups() || a.genotypes() != m.alpha().genotypes() {
                    return Err(Error::Shape(format!("alpha table for {} has the wrong shape", b.layout.id)));
                }
                *m.alpha_mut() = a.clone();
            }
        }
        Ok(())
    }

    /// Mixed-layer specs keyed by layer id.
    pub fn mixed_specs(&self) -> BTreeMap<String, MixedConvSpec> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.conv2 {
                SearchConv::Mixed(m) => Some((b.layout.id.clone(), m.spec().clone())),
                _ => None,
            })
            .collect()
    }

    /// Named tensors for checkpointing: `(name, shape, values)`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        let bn = |out: &mut Vec<(String, Vec<usize>, Vec<T>)>, p: &str, b: &BatchNorm2d<T>| {
            let c = vec![b.channels()];
            out.push((format!("{p}.gamma"), c.clone(), b.gamma.clone()));
            out.push((format!("{p}.beta"), c.clone(), b.beta.clone()));
            out.push((format!("{p}.running_mean"), c.clone(), b.running_mean.clone()));
            out.push((format!("{p}.running_var"), c, b.running_var.clone()));
        };
        out.push(("stem.conv.weight".into(), self.stem.shape().to_vec(), self.stem.weight.clone()));
        bn(&mut out, "stem.bn", &self.stem_bn);
        for b in &self.blocks {
            let p = format!("blocks.{}", b.layout.id);
            out.push((format!("{p}.conv1.weight"), b.conv1.shape().to_vec(), b.conv1.weight.clone()));
            bn(&mut out, &format!("{p}.bn1"), &b.bn1);
            match &b.conv2 {
                SearchConv::Plain(c) => out.push((format!("{p}.conv2.weight"), c.shape().to_vec(), c.weight.clone())),
                SearchConv::Mixed(m) => {
                    for g in 0..m.weights().len() {
                        out.push((
                            format!("{p}.conv2.replica{g}.weight"),
                            m.weights().shape().to_vec(),
                            m.weights().replica(g).to_vec(),
                        ));
                    }
                }
                SearchConv::Decoded(d) => {
                    for (k, (e, w)) in d.entries().iter().zip(d.weights()).enumerate() {
                        out.push((
                            format!("{p}.conv2.sub{k}.weight"),
                            vec![e.channels, d.in_channels(), 3, 3],
                            w.clone(),
                        ));
                    }
                }
            }
            bn(&mut out, &format!("{p}.bn2"), &b.bn2);
            out.push((format!("{p}.conv3.weight"), b.conv3.shape().to_vec(), b.conv3.weight.clone()));
            bn(&mut out, &format!("{p}.bn3"), &b.bn3);
            if let Some((c, n)) = &b.downsample {
                out.push((format!("{p}.downsample.conv.weight"), c.shape().to_vec(), c.weight.clone()));
                bn(&mut out, &format!("{p}.downsample.bn"), n);
            }
        }
        out.push(("fc.weight".into(), vec![self.fc.out_features(), self.fc.in_features()], self.fc.weight.clone()));
        out.push(("fc.bias".into(), vec![self.fc.out_features()], self.fc.bias.clone()));
        out
    }

    /// Overwrites parameters from named tensors; every name and shape must match.
    pub fn load_named_tensors(&mut self, tensors: &TensorMap<T>) -> Result<()> {
        let expected = self.named_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, network needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        let mut lookup = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let (s, v) = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint is missing tensor `{name}`")))?;
            if s != shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {s:?}, network needs {shape:?}"
                )));
            }
            Ok(v.clone())
        };
        let load_bn = |lookup: &mut Lookup<'_, T>, p: &str, b: &mut BatchNorm2d<T>| -> Result<()> {
            let c = [b.channels()];
            b.gamma = lookup(&format!("{p}.gamma"), &c)?;
            b.beta = lookup(&format!("{p}.beta"), &c)?;
            b.running_mean = lookup(&format!("{p}.running_mean"), &c)?;
            b.running_var = lookup(&format!("{p}.running_var"), &c)?;
            Ok(())
        };
        self.stem.weight = lookup("stem.conv.weight", &self.stem.shape())?;
        load_bn(&mut lookup, "stem.bn", &mut self.stem_bn)?;
        for b in &mut self.blocks {
            let p = format!("blocks.{}", b.layout.id);
            b.conv1.weight = lookup(&format!("{p}.conv1.weight"), &b.conv1.shape())?;
            load_bn(&mut lookup, &format!("{p}.bn1"), &mut b.bn1)?;
            match &mut b.conv2 {
                SearchConv::Plain(c) => c.weight = lookup(&format!("{p}.conv2.weight"), &c.shape())?,
                SearchConv::Mixed(m) => {
                    let shape = m.weights().shape();
                    for g in 0..m.weights().len() {
                        let v = lookup(&format!("{p}.conv2.replica{g}.weight"), &shape)?;
                        m.weights_mut().replica_mut(g).copy_from_slice(&v);
                    }
                }
                SearchConv::Decoded(d) => {
                    let in_ch = d.in_channels();
                    let shapes: Vec<[usize; 4]> = d.entries().iter().map(|e| [e.channels, in_ch, 3, 3]).collect();
                    let (w, _) = d.params_mut();
                    for (k, shape) in shapes.iter().enumerate() {
                        w[k] = lookup(&format!("{p}.conv2.sub{k}.weight"), shape)?;
                    }
                }
            }
            load_bn(&mut lookup, &format!("{p}.bn2"), &mut b.bn2)?;
            b.conv3.weight = lookup(&format!("{p}.conv3.weight"), &b.conv3.shape())?;
            load_bn(&mut lookup, &format!("{p}.bn3"), &mut b.bn3)?;
            if let Some((c, n)) = &mut b.downsample {
                c.weight = lookup(&format!("{p}.downsample.conv.weight"), &c.shape())?;
                load_bn(&mut lookup, &format!("{p}.downsample.bn"), n)?;
            }
        }
        self.fc.weight = lookup("fc.weight", &[self.fc.out_features(), self.fc.in_features()])?;
        self.fc.bias = lookup("fc.bias", &[self.fc.out_features()])?;
        Ok(())
    }

    /// Deep copy of parameters and buffers (caches are not copied).
    pub fn duplicate(&self) -> Result<Network<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new(self.spec.clone(), &mut rng)?;
        for (nb, b) in net.blocks.iter_mut().zip(&self.blocks) {
            nb.conv2 = match &b.conv2 {
                SearchConv::Plain(c) => SearchConv::Plain(c.clone()),
                SearchConv::Mixed(m) => SearchConv::Mixed(MixedConv::new(
                    m.spec().clone(),
                    m.weights().clone(),
                    m.alpha().clone(),
                )?),
                SearchConv::Decoded(d) => SearchConv::Decoded(d.clone()),
            };
        }
        let map = self
            .named_tensors()
            .into_iter()
            .map(|(n, s, v)| (n, (s, v)))
            .collect();
        net.load_named_tensors(&map)?;
        net.space = self.space.clone();
        net.plan = self.plan.clone();
        Ok(net)
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::<U>::new(self.spec.clone(), &mut rng)?;
        let conv_cast = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap())).collect::<Vec<U>>();
        for (nb, b) in net.blocks.iter_mut().zip(&self.blocks) {
            nb.conv2 = match &b.conv2 {
                SearchConv::Plain(c) => SearchConv::Plain(Conv2d::new(conv_cast(c.weight()), c.shape(), c.geom())?),
                SearchConv::Mixed(m) => {
                    let reps = (0..m.weights().len()).map(|g| conv_cast(m.weights().replica(g))).collect();
                    SearchConv::Mixed(MixedConv::new(
                        m.spec().clone(),
                        crate::mixed::CandidateWeights::new(m.weights().shape(), reps)?,
                        m.alpha().clone(),
                    )?)
                }
                SearchConv::Decoded(d) => SearchConv::Decoded(DecodedConv::new(
                    d.in_channels(),
                    d.stride(),
                    d.entries().to_vec(),
                    d.weights().iter().map(|w| conv_cast(w)).collect(),
                )?),
            };
        }
        let map = self
            .named_tensors()
            .into_iter()
            .map(|(n, s, v)| (n, (s, conv_cast(&v))))
            .collect();
        net.load_named_tensors(&map)?;
        net.space = self.space.clone();
        net.plan = self.plan.clone();
        Ok(net)
    }

    /// Parameter and multiply-accumulate counts at the given input size.
    pub fn costs(&self, input: (usize, usize)) -> Result<Costs> {
        let kinds: Vec<MidConvKind> = self
            .blocks
            .iter()
            .map(|b| match &b.conv2 {
                SearchConv::Plain(_) => MidConvKind::Plain,
                SearchConv::Mixed(m) => MidConvKind::Replicated(m.spec().genotypes.len()),
                SearchConv::Decoded(d) => MidConvKind::Split(d.entries().iter().map(|e| e.channels).collect()),
            })
            .collect();
        arch_costs(&self.spec, &kinds, input)
    }
}

/// Replaces every searchable 3×3 conv with a mixed conv over its stage's genotypes.
///
/// With a baseline, its weights seed the supernet and every replica is a copy of the
/// baseline 3×3 weight. All alpha tables start at zero.
pub fn build_supernet<T: Scalar, R: Rng + ?Sized>(
    spec: &BackboneSpec,
    space: &SearchSpaceConfig,
    baseline: Option<&Network<T>>,
    rng: &mut R,
) -> Result<Network<T>> {
    let mut net = match baseline {
        Some(b) => {
            if b.spec != *spec {
                return Err(Error::Shape(format!(
                    "baseline checkpoint is for backbone `{}`, not `{}`",
                    b.spec.name, spec.name
                )));
            }
            if !b.is_baseline() {
                return Err(Error::Shape("baseline checkpoint already contains transformed layers".into()));
            }
            b.duplicate()?
        }
        None => Network::new(spec.clone(), rng)?,
    };
    let specs = supernet_layer_specs(spec, space)?;
    for block in &mut net.blocks {
        let Some(mspec) = specs.get(&block.layout.id) else {
            continue;
        };
        let SearchConv::Plain(plain) = &block.conv2 else {
            return Err(Error::Consistency("searchable layer is not a plain conv".into()));
        };
        let g = mspec.genotypes.len();
        let weights = init_from_baseline(plain.weight(), block.layout.mid_shape(), g)?;
        let alpha = AlphaTable::zeros(mspec.group_count, g);
        block.conv2 = SearchConv::Mixed(MixedConv::new(mspec.clone(), weights, alpha)?);
    }
    net.space = Some(space.clone());
    Ok(net)
}

/// Mixed-conv layout of every searchable layer, keyed by layer id.
pub fn supernet_layer_specs(spec: &BackboneSpec, space: &SearchSpaceConfig) -> Result<BTreeMap<String, MixedConvSpec>> {
    spec.validate()?;
    let mut out = BTreeMap::new();
    for b in spec.blocks().into_iter().filter(BlockLayout::searchable) {
        let stage = space.stage(b.stage)?;
        let groups = group_count_for_layer(space, &b.id, b.mid_channels)?;
        let m = MixedConvSpec::new(b.mid_channels, b.mid_channels, b.stride, stage.genotypes().to_vec(), groups)?;
        out.insert(b.id, m);
    }
    Ok(out)
}

/// Where a plan came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub search_digest: String,
    pub epoch: Option<usize>,
    pub dataset: String,
}

/// Decoded architecture for every searchable layer of a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPlan {
    pub backbone: String,
    pub search_space: SearchSpaceConfig,
    pub layers: Vec<DecodedBlockSpec>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl TransformPlan {
    /// Plan keeping the baseline architecture everywhere.
    pub fn identity(spec: &BackboneSpec, space: SearchSpaceConfig) -> Self {
        let layers = spec
            .blocks()
            .into_iter()
            .filter(BlockLayout::searchable)
            .map(|b| DecodedBlockSpec::identity(b.id, b.mid_channels))
            .collect();
        TransformPlan {
            backbone: spec.name.clone(),
            search_space: space,
            layers,
            provenance: Provenance::default(),
        }
    }

    pub fn layer(&self, id: &str) -> Option<&DecodedBlockSpec> {
        self.layers.iter().find(|l| l.layer == id)
    }

    /// Checks that the plan covers exactly the searchable layers with consistent shapes.
    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if self.backbone != spec.name {
            return Err(Error::PlanMismatch(format!(
                "plan targets `{}` but the backbone is `{}`",
                self.backbone, spec.name
            )));
        }
        let layouts: Vec<BlockLayout> = spec.blocks().into_iter().filter(BlockLayout::searchable).collect();
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|o| o.layer == l.layer) {
                return Err(Error::PlanMismatch(format!("layer {} appears twice", l.layer)));
            }
        }
        if layouts.len() != self.layers.len() {
            return Err(Error::PlanMismatch(format!(
                "plan has {} layers, backbone has {} searchable layers",
                self.layers.len(),
                layouts.len()
            )));
        }
        for b in &layouts {
            let block = self
                .layer(&b.id)
                .ok_or_else(|| Error::PlanMismatch(format!("plan has no entry for layer {}", b.id)))?;
            block.validate(b.mid_channels)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("plan serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Channel-weighted mean of `(d_h + d_w)/2` over the layers of one stage.
    pub fn mean_stage_dilation(&self, stage: u8) -> f64 {
        let prefix = format!("{stage}.");
        let vals: Vec<f64> = self
            .layers
            .iter()
            .filter(|l| l.layer.starts_with(&prefix))
            .map(|l| {
                let (h, w) = l.mean_dilation();
                (h + w) / 2.0
            })
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Options for [`apply_plan_with`]; only verification fault injection turns propagation off.
#[derive(Clone, Copy, Debug)]
pub struct ApplyOptions {
    pub propagate_permutation: bool,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions {
            propagate_permutation: true,
        }
    }
}

/// Builds the transformed network: decoded sub-convs with weights sliced from the
/// baseline, and the following normalization and 1×1 conv rewired by the permutation.
pub fn apply_plan<T: Scalar>(spec: &BackboneSpec, plan: &TransformPlan, baseline: &Network<T>) -> Result<Network<T>> {
    apply_plan_with(spec, plan, baseline, ApplyOptions::default())
}

pub fn apply_plan_with<T: Scalar>(
    spec: &BackboneSpec,
    plan: &TransformPlan,
    baseline: &Network<T>,
    opts: ApplyOptions,
) -> Result<Network<T>> {
    plan.validate(spec)?;
    if baseline.spec != *spec || !baseline.is_baseline() {
        return Err(Error::PlanMismatch("baseline network does not match the backbone".into()));
    }
    let mut net = baseline.duplicate()?;
    for block in &mut net.blocks {
        if !block.layout.searchable() {
            continue;
        }
        let decoded = plan.layer(&block.layout.id).expect("validated plan");
        let SearchConv::Plain(plain) = &block.conv2 else {
            return Err(Error::Consistency("baseline layer is not plain".into()));
        };
        let conv = decoded_conv_from_spec(decoded, plain.weight(), block.layout.mid_shape(), block.layout.stride)?;
        block.conv2 = SearchConv::Decoded(conv);
        if opts.propagate_permutation {
            block.bn2.permute_channels(&decoded.permutation)?;
            block.conv3.permute_input_channels(&decoded.permutation)?;
        }
    }
    net.plan = Some(plan.clone());
    Ok(net)
}

/// Parameter count and multiply-accumulate count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Costs {
    pub params: u64,
    pub macs: u64,
}

/// How a bottleneck's middle conv is realized, for cost accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MidConvKind {
    Plain,
    /// `G` full replicas (supernet).
    Replicated(usize),
    /// Sub-convs with these output channel counts (decoded).
    Split(Vec<usize>),
}

/// Closed-form costs: conv MACs are `C_out·C_in·K²·H'·W'`; normalization contributes
/// two parameters per channel and no MACs; the classifier adds `in·out` MACs.
pub fn arch_costs(spec: &BackboneSpec, mid: &[MidConvKind], input: (usize, usize)) -> Result<Costs> {
    spec.validate()?;
    let blocks = spec.blocks();
    if mid.len() != blocks.len() {
        return Err(Error::Shape("one mid-conv description per block is required".into()));
    }
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut conv = |c_in: usize, c_out: usize, k: usize, oh: usize, ow: usize| {
        params += (c_out * c_in * k * k) as u64;
        macs += (c_out * c_in * k * k * oh * ow) as u64;
    };
    let ceil = |v: usize, s: usize| v.div_ceil(s);
    let (mut h, mut w) = (ceil(input.0, spec.stem.stride), ceil(input.1, spec.stem.stride));
    conv(spec.input_channels, spec.stem.channels, spec.stem.kernel, h, w);
    let mut bn_params = 2 * spec.stem.channels as u64;
    if spec.stem.max_pool {
        (h, w) = MaxPool::out_size(h, w);
    }
    for (b, kind) in blocks.iter().zip(mid) {
        let (oh, ow) = (ceil(h, b.stride), ceil(w, b.stride));
        conv(b.in_channels, b.mid_channels, 1, h, w);
        match kind {
            MidConvKind::Plain => conv(b.mid_channels, b.mid_channels, 3, oh, ow),
            MidConvKind::Replicated(g) => {
                for _ in 0..*g {
                    conv(b.mid_channels, b.mid_channels, 3, oh, ow);
                }
            }
            MidConvKind::Split(parts) => {
                for &c in parts {
                    conv(b.mid_channels, c, 3, oh, ow);
                }
            }
        }
        conv(b.mid_channels, b.out_channels, 1, oh, ow);
        bn_params += 2 * (2 * b.mid_channels + b.out_channels) as u64;
        if b.downsample {
            conv(b.in_channels, b.out_channels, 1, oh, ow);
            bn_params += 2 * b.out_channels as u64;
        }
        (h, w) = (oh, ow);
    }
    let fc = (spec.feature_channels() * spec.num_classes) as u64;
    Ok(Costs {
        params: params + bn_params + fc + spec.num_classes as u64,
        macs: macs + fc,
    })
}

/// Costs of a backbone with an optional plan applied, without materializing weights.
pub fn plan_costs(spec: &BackboneSpec, plan: Option<&TransformPlan>, input: (usize, usize)) -> Result<Costs> {
    if let Some(p) = plan {
        p.validate(spec)?;
    }
    let kinds: Vec<MidConvKind> = spec
        .blocks()
        .iter()
        .map(|b| match plan.and_then(|p| p.layer(&b.id)) {
            Some(d) => MidConvKind::Split(d.entries.iter().map(|e| e.channels).collect()),
            None => MidConvKind::Plain,
        })
        .collect();
    arch_costs(spec, &kinds, input)
}

/// Shorthand for [`Network::costs`].
pub fn count_params_flops<T: Scalar>(net: &Network<T>, input: (usize, usize)) -> Result<Costs> {
    net.costs(input)
}
