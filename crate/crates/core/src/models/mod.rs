//! Network architectures: the 26-layer residual classifier and two baselines.

mod block;

pub use block::{BasicBlock, Shortcut};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    softmax_xent, BatchNorm1d, Conv1d, Flatten, GlobalAvgPool1d, Layer, LayerKind, Linear, MaxPool1d, Mode, Relu,
    Visit, VisitMut,
};
use crate::tensor::{Scalar, Tensor};

/// Number of readings per sample in the stock dataset.
pub const SIGNAL_LEN: usize = 178;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Resnet26,
    Lenet1d,
    Alexnet1d,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Resnet26, Arch::Lenet1d, Arch::Alexnet1d];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Resnet26 => "resnet26",
            Arch::Lenet1d => "lenet1d",
            Arch::Alexnet1d => "alexnet1d",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet26" => Ok(Arch::Resnet26),
            "lenet1d" => Ok(Arch::Lenet1d),
            "alexnet1d" => Ok(Arch::Alexnet1d),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected resnet26, lenet1d or alexnet1d)"
            ))),
        }
    }
}

/// Shape of a residual network: stem width plus `(channels, blocks)` per stage.
///
/// The first block of every stage after the first has stride 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualConfig {
    pub stem_channels: usize,
    pub stages: Vec<(usize, usize)>,
    pub num_classes: usize,
    pub input_len: usize,
}

impl ResidualConfig {
    pub fn resnet26(num_classes: usize, input_len: usize) -> Self {
        Self {
            stem_channels: 64,
            stages: vec![(64, 3), (128, 3), (256, 3), (512, 3)],
            num_classes,
            input_len,
        }
    }
}

struct Node<T: Scalar> {
    name: String,
    layer: Box<dyn Layer<T>>,
}

/// Ordered layer graph; residual skips live inside [`BasicBlock`] nodes.
pub struct ModelGraph<T: Scalar = f32> {
    arch: Option<Arch>,
    num_classes: usize,
    input_len: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> fmt::Debug for ModelGraph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelGraph")
            .field("arch", &self.arch)
            .field("num_classes", &self.num_classes)
            .field("input_len", &self.input_len)
            .field("nodes", &self.nodes.iter().map(|n| n.name.as_str()).collect::<Vec<_>>())
            .finish()
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if matches!(num_classes, 2 | 3 | 5) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "num_classes must be 2, 3 or 5 (one of the four tasks), got {num_classes}"
        )))
    }
}

/// Builds one of the named architectures for 178-sample inputs.
pub fn build_model<T: Scalar>(arch: Arch, num_classes: usize, seed: u64) -> Result<ModelGraph<T>> {
    build_model_for_length(arch, num_classes, seed, SIGNAL_LEN)
}

pub fn build_model_for_length<T: Scalar>(
    arch: Arch,
    num_classes: usize,
    seed: u64,
    input_len: usize,
) -> Result<ModelGraph<T>> {
    check_classes(num_classes)?;
    if input_len < 8 {
        return Err(Error::Config(format!(
            "input length {input_len} is below the minimum of 8"
        )));
    }
    let mut model = match arch {
        Arch::Resnet26 => build_residual(&ResidualConfig::resnet26(num_classes, input_len), seed)?,
        Arch::Lenet1d => build_lenet(num_classes, input_len, seed)?,
        Arch::Alexnet1d => build_alexnet(num_classes, input_len, seed)?,
    };
    model.arch = Some(arch);
    if arch == Arch::Resnet26 {
        // Zero classifier: the untrained network predicts uniformly, so the
        // first loss is ln(C) whatever the scale of the pooled features.
        let fc = model.linear_mut("head.fc")?;
        fc.weight_mut().data_mut().fill(T::zero());
        fc.bias_mut().data_mut().fill(T::zero());
        let layers = model.layer_count();
        if layers != 26 {
            return Err(Error::Config(format!("resnet26 layer audit found {layers} layers")));
        }
        if input_len == SIGNAL_LEN {
            let lens = model.stage_lengths()?;
            let expected = [89, 45, 45, 23, 12, 6, 1];
            if lens != expected {
                return Err(Error::Config(format!(
                    "resnet26 geometry audit: expected {expected:?}, got {lens:?}"
                )));
            }
        }
    }
    Ok(model)
}

/// Residual network of arbitrary width and depth; used for the stock model and
/// for reduced variants in gradient checks.
pub fn build_residual<T: Scalar>(config: &ResidualConfig, seed: u64) -> Result<ModelGraph<T>> {
    if config.stages.is_empty() || config.num_classes < 2 {
        return Err(Error::Config(
            "residual network needs at least one stage and two classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ModelGraph::empty(config.num_classes, config.input_len);
    let stem = config.stem_channels;
    g.push("stem.conv", Conv1d::new(1, stem, 7, 2, 3, &mut rng));
    g.push("stem.bn", BatchNorm1d::new(stem));
    g.push("stem.relu", Relu::new());
    g.push("stem.pool", MaxPool1d::new(3, 2, 1)?);
    let mut channels = stem;
    for (s, &(width, blocks)) in config.stages.iter().enumerate() {
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            g.push(
                &format!("stage{}.block{}", s + 1, b),
                BasicBlock::new(channels, width, stride, &mut rng),
            );
            channels = width;
        }
    }
    g.push("head.pool", GlobalAvgPool1d::new());
    g.push("head.flatten", Flatten::new());
    g.push("head.fc", Linear::new(channels, config.num_classes, &mut rng));
    g.validate()?;
    Ok(g)
}

fn build_lenet<T: Scalar>(num_classes: usize, input_len: usize, seed: u64) -> Result<ModelGraph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ModelGraph::empty(num_classes, input_len);
    g.push("conv1", Conv1d::new(1, 6, 5, 1, 2, &mut rng));
    g.push("relu1", Relu::new());
    g.push("pool1", MaxPool1d::new(2, 2, 0)?);
    g.push("conv2", Conv1d::new(6, 16, 5, 1, 0, &mut rng));
    g.push("relu2", Relu::new());
    g.push("pool2", MaxPool1d::new(2, 2, 0)?);
    g.push("flatten", Flatten::new());
    let flat = g.flat_features()?;
    g.push("fc1", Linear::new(flat, 120, &mut rng));
    g.push("relu3", Relu::new());
    g.push("fc2", Linear::new(120, 84, &mut rng));
    g.push("relu4", Relu::new());
    g.push("fc3", Linear::new(84, num_classes, &mut rng));
    g.validate()?;
    Ok(g)
}

fn build_alexnet<T: Scalar>(num_classes: usize, input_len: usize, seed: u64) -> Result<ModelGraph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ModelGraph::empty(num_classes, input_len);
    g.push("conv1", Conv1d::new(1, 64, 11, 4, 2, &mut rng));
    g.push("relu1", Relu::new());
    g.push("pool1", MaxPool1d::new(3, 2, 0)?);
    g.push("conv2", Conv1d::new(64, 192, 5, 1, 2, &mut rng));
    g.push("relu2", Relu::new());
    g.push("pool2", MaxPool1d::new(3, 2, 0)?);
    g.push("conv3", Conv1d::new(192, 384, 3, 1, 1, &mut rng));
    g.push("relu3", Relu::new());
    g.push("conv4", Conv1d::new(384, 256, 3, 1, 1, &mut rng));
    g.push("relu4", Relu::new());
    g.push("conv5", Conv1d::new(256, 256, 3, 1, 1, &mut rng));
    g.push("relu5", Relu::new());
    g.push("pool3", MaxPool1d::new(3, 2, 0)?);
    g.push("flatten", Flatten::new());
    let flat = g.flat_features()?;
    g.push("fc1", Linear::new(flat, 4096, &mut rng));
    g.push("relu6", Relu::new());
    g.push("fc2", Linear::new(4096, 4096, &mut rng));
    g.push("relu7", Relu::new());
    g.push("fc3", Linear::new(4096, num_classes, &mut rng));
    g.validate()?;
    Ok(g)
}

impl<T: Scalar> ModelGraph<T> {
    fn empty(num_classes: usize, input_len: usize) -> Self {
        Self {
            arch: None,
            num_classes,
            input_len,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, layer: impl Layer<T> + 'static) {
        self.nodes.push(Node {
            name: name.to_string(),
            layer: Box::new(layer),
        });
    }

    fn flat_features(&self) -> Result<usize> {
        let shapes = self.trace_shapes(self.input_len)?;
        Ok(shapes.last().map(|(_, s)| s[1]).unwrap_or(1))
    }

    fn validate(&self) -> Result<()> {
        let shapes = self.trace_shapes(self.input_len)?;
        match shapes.last() {
            Some((_, s)) if s == &[1, self.num_classes] => Ok(()),
            other => Err(Error::Config(format!(
                "model emits {:?}, expected [1, {}]",
                other.map(|(_, s)| s),
                self.num_classes
            ))),
        }
    }

    pub fn arch(&self) -> Option<Arch> {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn node_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.name.as_str())
    }

    /// Counted layers: every main-path convolution and every fully connected
    /// layer. Projection shortcuts, normalization and pooling are not counted.
    pub fn layer_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n.layer.kind() {
                LayerKind::Conv1d | LayerKind::Linear => 1,
                LayerKind::BasicBlock => 2,
                _ => 0,
            })
            .sum()
    }

    /// Output shape of every node for a single input of length `len`.
    pub fn trace_shapes(&self, len: usize) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shape = vec![1, 1, len];
        let mut out = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            shape = n.layer.output_shape(&shape).map_err(|e| Error::Geometry {
                op: "model",
                detail: format!("{}: {e}", n.name),
            })?;
            out.push((n.name.clone(), shape.clone()));
        }
        Ok(out)
    }

    /// Temporal lengths after the stem conv, the stem pool, each stage and the head pool.
    pub fn stage_lengths(&self) -> Result<Vec<usize>> {
        let shapes = self.trace_shapes(self.input_len)?;
        let mut lens = Vec::new();
        for (i, (name, shape)) in shapes.iter().enumerate() {
            let next_stage = shapes.get(i + 1).map(|(n, _)| n.split('.').next().unwrap_or(""));
            let this_stage = name.split('.').next().unwrap_or("");
            let stage_end = name.starts_with("stage") && next_stage != Some(this_stage);
            if name == "stem.conv" || name == "stem.pool" || name == "head.pool" || stage_end {
                lens.push(shape[2]);
            }
        }
        Ok(lens)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, l) = x.dims3("model input")?;
        if c != 1 || l != self.input_len {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: x.shape().to_vec(),
                right: vec![x.shape()[0], 1, self.input_len],
            });
        }
        Ok(())
    }

    /// `[N x 1 x L] -> [N x C]` logits. Any non-finite activation is reported
    /// with the name of the node that produced it.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            self.clear_cache();
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for n in &mut self.nodes {
            h = n.layer.forward_train(&h)?;
            h.ensure_finite(&n.name)?;
        }
        Ok(h)
    }

    /// Infer-mode forward; never mutates the model.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for n in &self.nodes {
            h = n.layer.infer(&h)?;
            h.ensure_finite(&n.name)?;
        }
        Ok(h)
    }

    /// Backpropagates `dloss/dlogits`, accumulating into every parameter
    /// gradient, and returns `dloss/dinput`.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_logits.clone();
        for n in self.nodes.iter_mut().rev() {
            g = n.layer.backward(&g).map_err(|e| match e {
                Error::MissingCache { .. } => Error::MissingCache { layer: n.name.clone() },
                other => other,
            })?;
            g.ensure_finite(&format!("{} (backward)", n.name))?;
        }
        Ok(g)
    }

    /// Class indices (argmax, ties to the lowest index) and softmax probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        let logits = self.infer(x)?;
        let n = logits.shape()[0];
        let probs = softmax_xent(&logits, &vec![0; n])?.probs;
        Ok((argmax_rows(&probs), probs))
    }

    pub fn clear_cache(&mut self) {
        for n in &mut self.nodes {
            n.layer.clear_cache();
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    pub fn visit_params(&self, f: &mut Visit<'_, T>) {
        for n in &self.nodes {
            n.layer.params(&n.name, f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut VisitMut<'_, T>) {
        for n in &mut self.nodes {
            n.layer.params_mut(&n.name, f);
        }
    }

    pub fn visit_buffers(&self, f: &mut Visit<'_, T>) {
        for n in &self.nodes {
            n.layer.buffers(&n.name, f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut VisitMut<'_, T>) {
        for n in &mut self.nodes {
            n.layer.buffers_mut(&n.name, f);
        }
    }

    /// Parameters followed by buffers, in graph order.
    pub fn visit_state(&self, f: &mut Visit<'_, T>) {
        self.visit_params(f);
        self.visit_buffers(f);
    }

    pub fn visit_state_mut(&mut self, f: &mut VisitMut<'_, T>) {
        self.visit_params_mut(f);
        self.visit_buffers_mut(f);
    }

    /// Copies of every parameter and buffer, in [`visit_state`](Self::visit_state) order.
    pub fn state(&self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.visit_state(&mut |_, t| out.push(t.data().to_vec()));
        out
    }

    pub fn set_state(&mut self, state: &[Vec<T>]) -> Result<()> {
        let mut lens = Vec::new();
        self.visit_state(&mut |_, t| lens.push(t.len()));
        let given: Vec<usize> = state.iter().map(Vec::len).collect();
        if lens != given {
            return Err(Error::Config(format!(
                "state has {} tensors, model has {}, or their sizes differ",
                given.len(),
                lens.len()
            )));
        }
        let mut it = state.iter();
        self.visit_state_mut(&mut |_, t| t.data_mut().copy_from_slice(it.next().expect("checked length")));
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, t| total += t.len());
        total
    }

    pub fn linear_mut(&mut self, node: &str) -> Result<&mut Linear<T>> {
        self.nodes
            .iter_mut()
            .find(|n| n.name == node)
            .and_then(|n| n.layer.as_any_mut().downcast_mut::<Linear<T>>())
            .ok_or_else(|| Error::Config(format!("no linear layer named {node}")))
    }

    /// Mutable access to a residual block by node name, for ablation experiments.
    pub fn block_mut(&mut self, node: &str) -> Result<&mut BasicBlock<T>> {
        self.nodes
            .iter_mut()
            .find(|n| n.name == node)
            .and_then(|n| n.layer.as_any_mut().downcast_mut::<BasicBlock<T>>())
            .ok_or_else(|| Error::Config(format!("no basic block named {node}")))
    }
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows<T: Scalar>(m: &Tensor<T>) -> Vec<usize> {
    let c = m.shape()[m.rank() - 1];
    m.data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
