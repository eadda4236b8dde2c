use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{backward_sample, forward_sample, softmax_xent, ActShape, LayerKind};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// Samples per gradient-accumulation chunk. Chunks are reduced in order, so the
/// result does not depend on how many threads run them.
const GRAD_CHUNK: usize = 8;

pub const PART_A_PREFIX: &str = "a.";
pub const PART_B_PREFIX: &str = "b.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }
}

/// Widths of the reduced depthwise-separable network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub block_channels: [usize; 2],
    pub feature_dim: usize,
    pub n_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { input_size: 224, stem_channels: 16, block_channels: [32, 64], feature_dim: 64, n_classes: 9 }
    }
}

/// Validated layer stack split into Part A (through global average pooling)
/// and Part B (the add-on head).
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input of layer `i`; the last entry is the network output.
    shapes: Vec<ActShape>,
    split: usize,
    classifier: usize,
}

impl Architecture {
    pub fn new(input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self> {
        let (h, w, c) = input;
        let mut shapes = vec![ActShape::Spatial { h, w, c }];
        for layer in &layers {
            let next = layer.kind.output_shape(*shapes.last().expect("nonempty"))?;
            shapes.push(next);
        }
        let mut names = BTreeSet::new();
        for layer in &layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::shape(format!("duplicate layer name {}", layer.name)));
            }
        }
        let split = layers.iter().position(|l| l.name.starts_with(PART_B_PREFIX)).ok_or_else(|| {
            Error::shape("architecture has no Part B layers")
        })?;
        if layers[..split].iter().any(|l| !l.name.starts_with(PART_A_PREFIX))
            || layers[split..].iter().any(|l| !l.name.starts_with(PART_B_PREFIX))
        {
            return Err(Error::shape("Part A layers (a.*) must precede Part B layers (b.*)"));
        }
        if split == 0 || layers[split - 1].kind != LayerKind::GlobalAvgPool {
            return Err(Error::shape("Part A must end with global average pooling"));
        }
        if layers.last().map(|l| l.kind) != Some(LayerKind::SoftmaxXentHead) {
            return Err(Error::shape("network must end with a softmax cross-entropy head"));
        }
        let classifier = layers.len() - 2;
        if !matches!(layers[classifier].kind, LayerKind::Dense { .. }) {
            return Err(Error::shape("the head must follow a dense classifier"));
        }
        Ok(Self { layers, shapes, split, classifier })
    }

    /// Stem conv, two depthwise-separable blocks with a strided pointwise
    /// projection between them, global average pooling, then a wide dense +
    /// ReLU feature layer and a dense classifier.
    pub fn mini_xception(cfg: &NetConfig) -> Result<Self> {
        let [c1, c2] = cfg.block_channels;
        let s = cfg.stem_channels;
        let layers = vec![
            LayerSpec::new("a.stem", LayerKind::Conv2d { in_channels: 3, out_channels: s, kernel: 3, stride: 2, padding: 1 }),
            LayerSpec::new("a.stem_relu", LayerKind::Relu),
            LayerSpec::new("a.block1_dw", LayerKind::DepthwiseConv2d { channels: s, kernel: 3, stride: 1, padding: 1 }),
            LayerSpec::new("a.block1_pw", LayerKind::PointwiseConv2d { in_channels: s, out_channels: c1, stride: 1 }),
            LayerSpec::new("a.block1_relu", LayerKind::Relu),
            LayerSpec::new("a.down", LayerKind::PointwiseConv2d { in_channels: c1, out_channels: c1, stride: 2 }),
            LayerSpec::new("a.block2_dw", LayerKind::DepthwiseConv2d { channels: c1, kernel: 3, stride: 1, padding: 1 }),
            LayerSpec::new("a.block2_pw", LayerKind::PointwiseConv2d { in_channels: c1, out_channels: c2, stride: 1 }),
            LayerSpec::new("a.block2_relu", LayerKind::Relu),
            LayerSpec::new("a.gap", LayerKind::GlobalAvgPool),
            LayerSpec::new("b.fc", LayerKind::Dense { inputs: c2, units: cfg.feature_dim }),
            LayerSpec::new("b.fc_relu", LayerKind::Relu),
            LayerSpec::new("b.classifier", LayerKind::Dense { inputs: cfg.feature_dim, units: cfg.n_classes }),
            LayerSpec::new("b.head", LayerKind::SoftmaxXentHead),
        ];
        Self::new((cfg.input_size, cfg.input_size, 3), layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> ActShape {
        self.shapes[0]
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().expect("nonempty").len()
    }

    /// Width of the feature vector (the classifier's input).
    pub fn feature_dim(&self) -> usize {
        self.shapes[self.classifier].len()
    }

    /// `(name, shape)` of every parameter tensor in layer order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some((w, b)) = layer.kind.param_shapes() {
                out.push((layer.weight_name(), w));
                out.push((layer.bias_name(), b));
            }
        }
        out
    }

    pub fn part_a_names(&self) -> BTreeSet<String> {
        self.param_specs().into_iter().map(|(n, _)| n).filter(|n| n.starts_with(PART_A_PREFIX)).collect()
    }

    pub fn part_b_names(&self) -> BTreeSet<String> {
        self.param_specs().into_iter().map(|(n, _)| n).filter(|n| n.starts_with(PART_B_PREFIX)).collect()
    }

    fn check_batch<T: Scalar>(&self, batch: &Tensor<T>) -> Result<usize> {
        let expect = self.input_shape().dims();
        if batch.shape().len() != 4 || batch.shape()[1..] != expect[..] {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match input {:?}",
                batch.shape(),
                expect
            )));
        }
        Ok(batch.shape()[0])
    }

    /// All activations of one sample: `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    fn run_sample<T: Scalar>(&self, params: &NetworkParams<T>, input: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = params.layer_params(layer);
            let out = forward_sample(&layer.kind, &acts[i], self.shapes[i], self.shapes[i + 1], w, b);
            acts.push(out);
        }
        acts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// All trainable arrays, partitioned at the global-average-pooling boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub part_a: Vec<NamedTensor<T>>,
    pub part_b: Vec<NamedTensor<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    /// He-normal weights and zero biases, each tensor drawn from its own seeded stream.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut part_a = Vec::new();
        let mut part_b = Vec::new();
        for layer in &arch.layers {
            let Some((wshape, bshape)) = layer.kind.param_shapes() else { continue };
            let std = (2.0 / layer.kind.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = seed::rng_from(seed, &[seed::tag(&layer.weight_name())]);
            let n: usize = wshape.iter().product();
            let wdata: Vec<T> = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
            let weight = NamedTensor { name: layer.weight_name(), tensor: Tensor::new(wshape, wdata).expect("shape") };
            let bias = NamedTensor { name: layer.bias_name(), tensor: Tensor::zeros(bshape) };
            let part = if layer.name.starts_with(PART_A_PREFIX) { &mut part_a } else { &mut part_b };
            part.push(weight);
            part.push(bias);
        }
        Self { part_a, part_b }
    }

    /// Every tensor set to `value`.
    pub fn filled(arch: &Architecture, value: T) -> Self {
        let mut p = Self::init(arch, 0);
        for t in p.iter_mut() {
            t.tensor.data_mut().iter_mut().for_each(|v| *v = value);
        }
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor<T>> {
        self.part_a.iter().chain(&self.part_b)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.part_a.iter_mut().chain(self.part_b.iter_mut())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    fn layer_params(&self, layer: &LayerSpec) -> (&[T], &[T]) {
        if !layer.kind.has_params() {
            return (&[], &[]);
        }
        let w = self.get(&layer.weight_name()).expect("validated params");
        let b = self.get(&layer.bias_name()).expect("validated params");
        (w.data(), b.data())
    }

    /// Check names, order and shapes against an architecture.
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        let specs = arch.param_specs();
        let ours: Vec<(&str, &[usize])> = self.iter().map(|t| (t.name.as_str(), t.tensor.shape())).collect();
        if ours.len() != specs.len() {
            return Err(Error::shape(format!("expected {} parameter tensors, got {}", specs.len(), ours.len())));
        }
        for ((name, shape), (ename, eshape)) in ours.iter().zip(&specs) {
            if name != ename || shape != &eshape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {name} {shape:?} does not match {ename} {eshape:?}"
                )));
            }
        }
        if self.part_a.iter().any(|t| !t.name.starts_with(PART_A_PREFIX))
            || self.part_b.iter().any(|t| !t.name.starts_with(PART_B_PREFIX))
        {
            return Err(Error::shape("parameter partition does not follow a./b. prefixes"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let conv = |v: &Vec<NamedTensor<T>>| {
            v.iter().map(|t| NamedTensor { name: t.name.clone(), tensor: t.tensor.cast() }).collect()
        };
        NetworkParams { part_a: conv(&self.part_a), part_b: conv(&self.part_b) }
    }

    pub fn checksum_a(&self) -> u64 {
        checksum(&self.part_a)
    }

    pub fn checksum_b(&self) -> u64 {
        checksum(&self.part_b)
    }
}

/// FNV-1a over names, shapes and the exact bit patterns of every value.
fn checksum<T: Scalar>(tensors: &[NamedTensor<T>]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for t in tensors {
        eat(t.name.as_bytes());
        for &d in t.tensor.shape() {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in t.tensor.data() {
            eat(&v.to_f64_lossy().to_bits().to_le_bytes());
        }
    }
    h
}

/// Per-sample activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    activations: Vec<Vec<Vec<T>>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Inputs of the classifier (post-ReLU activations of the wide dense layer).
    pub features: Tensor<T>,
    /// Classifier outputs before softmax.
    pub logits: Tensor<T>,
    pub cache: ForwardCache<T>,
}

/// Run a batch `[N, H, W, C]` through the network.
///
/// `train_mode` is accepted for layers whose behavior differs between
/// training and inference; the current layer set has none.
pub fn forward<T: Scalar>(
    arch: &Architecture,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    train_mode: bool,
) -> Result<ForwardOutput<T>> {
    let _ = train_mode;
    let n = arch.check_batch(batch)?;
    let activations: Vec<Vec<Vec<T>>> =
        (0..n).into_par_iter().map(|i| arch.run_sample(params, batch.row(i))).collect();
    let d = arch.feature_dim();
    let c = arch.n_classes();
    let mut features = Vec::with_capacity(n * d);
    let mut logits = Vec::with_capacity(n * c);
    for acts in &activations {
        features.extend_from_slice(&acts[arch.classifier]);
        logits.extend_from_slice(&acts[arch.classifier + 1]);
    }
    Ok(ForwardOutput {
        features: Tensor::new(vec![n, d], features)?,
        logits: Tensor::new(vec![n, c], logits)?,
        cache: ForwardCache { activations },
    })
}

/// Features only, without retaining activations. Rows are computed
/// independently, so any batching yields the same values.
pub fn extract_features<T: Scalar>(
    arch: &Architecture,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = arch.check_batch(batch)?;
    let d = arch.feature_dim();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| arch.run_sample(params, batch.row(i)).swap_remove(arch.classifier))
        .collect();
    Tensor::new(vec![n, d], rows.concat())
}

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

struct ChunkAccum<T> {
    loss: T,
    grads: Vec<Option<(Vec<T>, Vec<T>)>>,
}

/// Mean softmax cross-entropy over the batch and its exact gradient for every
/// parameter not listed in `frozen`.
pub fn loss_and_grads<T: Scalar>(
    arch: &Architecture,
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    frozen: &BTreeSet<String>,
    cache: Option<&ForwardCache<T>>,
) -> Result<(T, Grads<T>)> {
    let n = arch.check_batch(batch)?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let classes = arch.n_classes();
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    if let Some(c) = cache {
        if c.activations.len() != n {
            return Err(Error::shape("forward cache does not match batch"));
        }
    }

    let layers = &arch.layers;
    let trainable: Vec<(bool, bool)> = layers
        .iter()
        .map(|l| {
            if l.kind.has_params() {
                (!frozen.contains(&l.weight_name()), !frozen.contains(&l.bias_name()))
            } else {
                (false, false)
            }
        })
        .collect();
    let first_trainable = trainable.iter().position(|&(w, b)| w || b);

    let sample = |i: usize, acc: &mut ChunkAccum<T>| {
        let owned;
        let acts: &Vec<Vec<T>> = match cache {
            Some(c) => &c.activations[i],
            None => {
                owned = arch.run_sample(params, batch.row(i));
                &owned
            }
        };
        let (loss, mut grad) = softmax_xent(&acts[arch.classifier + 1], labels[i]);
        acc.loss = acc.loss + loss;
        let Some(first) = first_trainable else { return };
        for li in (first..layers.len()).rev() {
            let layer = &layers[li];
            let (w, _) = params.layer_params(layer);
            let need_input = li > first;
            let slot = &mut acc.grads[li];
            let pg = slot.as_mut().map(|(gw, gb)| (gw.as_mut_slice(), gb.as_mut_slice()));
            let gin = backward_sample(&layer.kind, &acts[li], arch.shapes[li], arch.shapes[li + 1], w, &grad, pg, need_input);
            if let Some(g) = gin {
                grad = g;
            }
        }
    };

    let fresh = || ChunkAccum {
        loss: T::zero(),
        grads: layers
            .iter()
            .zip(&trainable)
            .map(|(l, &(tw, tb))| {
                (tw || tb).then(|| {
                    let (ws, bs) = l.kind.param_shapes().expect("parameterized");
                    (vec![T::zero(); ws.iter().product()], vec![T::zero(); bs.iter().product()])
                })
            })
            .collect(),
    };

    let chunks: Vec<ChunkAccum<T>> = (0..n.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = fresh();
            for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
                sample(i, &mut acc);
            }
            acc
        })
        .collect();

    let mut total = fresh();
    for chunk in chunks {
        total.loss = total.loss + chunk.loss;
        for (t, c) in total.grads.iter_mut().zip(chunk.grads) {
            if let (Some((tw, tb)), Some((cw, cb))) = (t.as_mut(), c) {
                tw.iter_mut().zip(cw).for_each(|(a, b)| *a = *a + b);
                tb.iter_mut().zip(cb).for_each(|(a, b)| *a = *a + b);
            }
        }
    }
    let scale = T::one() / T::from_usize(n).expect("batch size");
    let loss = total.loss * scale;
    if !loss.is_finite() {
        return Err(Error::NumericalError(format!("non-finite loss {loss:?}")));
    }
    let mut grads = Grads::new();
    for ((layer, slot), &(tw, tb)) in layers.iter().zip(total.grads).zip(&trainable) {
        let Some((gw, gb)) = slot else { continue };
        let (ws, bs) = layer.kind.param_shapes().expect("parameterized");
        let finish = |v: Vec<T>, shape: Vec<usize>| -> Result<Tensor<T>> {
            let t = Tensor::new(shape, v.into_iter().map(|x| x * scale).collect())?;
            if !t.is_finite() {
                return Err(Error::NumericalError(format!("non-finite gradient in {}", layer.name)));
            }
            Ok(t)
        };
        if tw {
            grads.insert(layer.weight_name(), finish(gw, ws)?);
        }
        if tb {
            grads.insert(layer.bias_name(), finish(gb, bs)?);
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture::mini_xception(&NetConfig {
            input_size: 8,
            stem_channels: 2,
            block_channels: [3, 4],
            feature_dim: 5,
            n_classes: 3,
        })
        .unwrap()
    }

    #[test]
    fn mini_xception_shapes_and_split() {
        let arch = Architecture::mini_xception(&NetConfig { input_size: 32, ..Default::default() }).unwrap();
        assert_eq!(arch.feature_dim(), 64);
        assert_eq!(arch.n_classes(), 9);
        let params = NetworkParams::<f32>::init(&arch, 1);
        params.validate(&arch).unwrap();
        assert!(params.part_a.iter().all(|t| t.name.starts_with("a.")));
        assert_eq!(params.part_b.len(), 4);
        assert_eq!(params.get("b.classifier.w").unwrap().shape(), &[64, 9]);
    }

    #[test]
    fn zero_network_gives_zero_outputs() {
        let arch = tiny();
        let params = NetworkParams::<f32>::filled(&arch, 0.0);
        let batch = Tensor::zeros(vec![2, 8, 8, 3]);
        let out = forward(&arch, &params, &batch, false).unwrap();
        assert!(out.features.data().iter().all(|&v| v == 0.0));
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = loss_and_grads(&arch, &params, &batch, &[0, 2], &BTreeSet::new(), Some(&out.cache)).unwrap();
        assert!((loss - 3f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn batch_shape_mismatch_is_rejected() {
        let arch = tiny();
        let params = NetworkParams::<f32>::init(&arch, 0);
        let bad = Tensor::zeros(vec![1, 9, 8, 3]);
        assert!(matches!(forward(&arch, &params, &bad, false), Err(Error::ShapeError(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let arch = tiny();
        let params = NetworkParams::<f64>::init(&arch, 4);
        let batch = Tensor::filled(vec![3, 8, 8, 3], 0.5);
        let frozen = arch.part_a_names();
        let (_, grads) = loss_and_grads(&arch, &params, &batch, &[0, 1, 2], &frozen, None).unwrap();
        let keys: BTreeSet<String> = grads.keys().cloned().collect();
        assert_eq!(keys, arch.part_b_names());
        let (_, all) = loss_and_grads(&arch, &params, &batch, &[0, 1, 2], &BTreeSet::new(), None).unwrap();
        assert_eq!(all.len(), arch.param_specs().len());
        assert_eq!(all["b.fc.w"], grads["b.fc.w"]);
    }

    #[test]
    fn cached_and_uncached_gradients_agree() {
        let arch = tiny();
        let params = NetworkParams::<f32>::init(&arch, 9);
        let data: Vec<f32> = (0..4 * 8 * 8 * 3).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let batch = Tensor::new(vec![4, 8, 8, 3], data).unwrap();
        let out = forward(&arch, &params, &batch, true).unwrap();
        let frozen = BTreeSet::new();
        let a = loss_and_grads(&arch, &params, &batch, &[0, 1, 2, 0], &frozen, Some(&out.cache)).unwrap();
        let b = loss_and_grads(&arch, &params, &batch, &[0, 1, 2, 0], &frozen, None).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn architecture_rejects_bad_splits() {
        let gap = LayerSpec::new("a.gap", LayerKind::GlobalAvgPool);
        let dense = LayerSpec::new("b.fc", LayerKind::Dense { inputs: 3, units: 2 });
        let head = LayerSpec::new("b.head", LayerKind::SoftmaxXentHead);
        assert!(Architecture::new((4, 4, 3), vec![gap.clone(), dense.clone(), head.clone()]).is_ok());
        let relu = LayerSpec::new("a.relu", LayerKind::Relu);
        assert!(Architecture::new((4, 4, 3), vec![gap.clone(), relu, dense.clone(), head.clone()]).is_err());
        assert!(Architecture::new((4, 4, 3), vec![gap, dense]).is_err());
    }
}
