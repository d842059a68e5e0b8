//! Named network weights and the forward session that binds them to a graph.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{BatchNormState, Mode, Padding};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Kind and geometry of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { out: usize, inp: usize, k: usize },
    Dense { out: usize, inp: usize },
    BatchNorm { channels: usize },
}

/// How a layer's weights are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    /// Glorot-normal weights, zero bias.
    Glorot,
    /// All zeros: the localization head starts at a fixed centred crop.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub init: Init,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, out: usize, inp: usize, k: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv { out, inp, k },
            init: Init::He,
        }
    }

    pub fn dense(name: impl Into<String>, out: usize, inp: usize, init: Init) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Dense { out, inp },
            init,
        }
    }

    pub fn batch_norm(name: impl Into<String>, channels: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::BatchNorm { channels },
            init: Init::He,
        }
    }

    /// Trainable tensors as (name, shape).
    pub fn trainable(&self) -> Vec<(String, Vec<usize>)> {
        let n = &self.name;
        match self.kind {
            LayerKind::Conv { out, inp, k } => vec![
                (format!("{n}.weight"), vec![out, inp, k, k]),
                (format!("{n}.bias"), vec![out]),
            ],
            LayerKind::Dense { out, inp } => vec![
                (format!("{n}.weight"), vec![out, inp]),
                (format!("{n}.bias"), vec![out]),
            ],
            LayerKind::BatchNorm { channels } => vec![
                (format!("{n}.gamma"), vec![channels]),
                (format!("{n}.beta"), vec![channels]),
            ],
        }
    }

    /// Non-trainable state tensors as (name, shape).
    pub fn buffers(&self) -> Vec<(String, Vec<usize>)> {
        match self.kind {
            LayerKind::BatchNorm { channels } => vec![
                (format!("{}.running_mean", self.name), vec![channels]),
                (format!("{}.running_var", self.name), vec![channels]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Whether a trainable tensor is exempt from weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// Every tensor of a network: trainable parameters and batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    params: BTreeMap<String, Tensor<T>>,
    norms: BTreeMap<String, BatchNormState<T>>,
}

impl<T: Scalar> Weights<T> {
    pub fn init(layers: &[LayerSpec], rng: &mut impl Rng) -> Self {
        let mut params = BTreeMap::new();
        let mut norms = BTreeMap::new();
        for layer in layers {
            match layer.kind {
                LayerKind::Conv { out, inp, k } => {
                    let fan_in = inp * k * k;
                    let w = init_weight(layer.init, vec![out, inp, k, k], fan_in, out * k * k, rng);
                    params.insert(format!("{}.weight", layer.name), w);
                    params.insert(format!("{}.bias", layer.name), Tensor::zeros(vec![out]));
                }
                LayerKind::Dense { out, inp } => {
                    let w = init_weight(layer.init, vec![out, inp], inp, out, rng);
                    params.insert(format!("{}.weight", layer.name), w);
                    params.insert(format!("{}.bias", layer.name), Tensor::zeros(vec![out]));
                }
                LayerKind::BatchNorm { channels } => {
                    params.insert(format!("{}.gamma", layer.name), Tensor::ones(vec![channels]));
                    params.insert(format!("{}.beta", layer.name), Tensor::zeros(vec![channels]));
                    norms.insert(layer.name.clone(), BatchNormState::new(channels));
                }
            }
        }
        Weights { params, norms }
    }

    /// Assembles weights from a flat name → tensor map, validated against
    /// `layers`: every expected tensor present with its exact shape and
    /// nothing else.
    pub fn from_tensors(layers: &[LayerSpec], mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut params = BTreeMap::new();
        let mut norms = BTreeMap::new();
        for layer in layers {
            for (name, shape) in layer.trainable() {
                params.insert(name.clone(), take_checked(&mut tensors, &name, &shape)?);
            }
            if let LayerKind::BatchNorm { channels } = layer.kind {
                let mut st = BatchNormState::new(channels);
                let [(mean, s1), (var, s2)]: [(String, Vec<usize>); 2] =
                    layer.buffers().try_into().expect("two buffers");
                st.running_mean = take_checked(&mut tensors, &mean, &s1)?;
                st.running_var = take_checked(&mut tensors, &var, &s2)?;
                if st.running_var.data().iter().any(|&v| v <= T::zero()) {
                    return Err(Error::contract("weights", format!("{var} must be positive")));
                }
                norms.insert(layer.name.clone(), st);
            }
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(Error::UnknownTensor(name));
        }
        Ok(Weights { params, norms })
    }

    /// Flat name → tensor view of everything, in name order.
    pub fn tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = self.params.clone();
        for (name, st) in &self.norms {
            out.insert(format!("{name}.running_mean"), st.running_mean.clone());
            out.insert(format!("{name}.running_var"), st.running_var.clone());
        }
        out
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn norm_state(&self, name: &str) -> Option<&BatchNormState<T>> {
        self.norms.get(name)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            norms: self
                .norms
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BatchNormState {
                            running_mean: s.running_mean.cast(),
                            running_var: s.running_var.cast(),
                            momentum: s.momentum,
                            eps: s.eps,
                        },
                    )
                })
                .collect(),
        }
    }
}

fn take_checked<T: Scalar>(
    tensors: &mut BTreeMap<String, Tensor<T>>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    if t.shape() != shape {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

fn init_weight<T: Scalar>(
    init: Init,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let std = match init {
        Init::Zero => return Tensor::zeros(shape),
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Glorot => (2.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

/// One forward pass: a fresh graph plus lazily bound weight leaves.
///
/// In train mode batch-norm layers use batch statistics and update their
/// running estimates in the borrowed [`Weights`].
pub struct Forward<'w, T: Scalar> {
    pub graph: Graph<T>,
    weights: &'w mut Weights<T>,
    bound: HashMap<String, Var>,
    mode: Mode,
    track_grads: bool,
}

impl<'w, T: Scalar> Forward<'w, T> {
    /// `track_grads` records weights as trainable leaves; otherwise they are
    /// constants and no backward state is kept.
    pub fn new(weights: &'w mut Weights<T>, mode: Mode, track_grads: bool) -> Self {
        Self::with_graph(Graph::new(), weights, mode, track_grads)
    }

    /// Continues recording on an existing graph.
    pub fn with_graph(graph: Graph<T>, weights: &'w mut Weights<T>, mode: Mode, track_grads: bool) -> Self {
        Forward {
            graph,
            weights,
            bound: HashMap::new(),
            mode,
            track_grads,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .weights
            .params
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?
            .clone();
        let v = if self.track_grads {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_layer(&self, layer: &str) -> bool {
        self.weights.params.contains_key(&format!("{layer}.weight"))
    }

    pub fn conv(&mut self, layer: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        let k = self.graph.shape(w)[2];
        let padding = if k % 2 == 1 { Padding::Same } else { Padding::Valid };
        self.graph.conv2d(x, w, Some(b), 1, padding)
    }

    pub fn batch_norm(&mut self, layer: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{layer}.gamma"))?;
        let beta = self.param(&format!("{layer}.beta"))?;
        let state = self
            .weights
            .norms
            .get_mut(layer)
            .ok_or_else(|| Error::MissingTensor(format!("{layer}.running_mean")))?;
        self.graph.batch_norm(x, gamma, beta, state, self.mode)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.graph.relu(x),
            Activation::Tanh => self.graph.tanh(x),
        }
    }

    /// conv → batch norm (layer `<name>.bn`) → optional activation.
    pub fn conv_block(&mut self, layer: &str, x: Var, act: Option<Activation>) -> Result<Var> {
        let y = self.conv(layer, x)?;
        let y = self.batch_norm(&format!("{layer}.bn"), y)?;
        Ok(match act {
            Some(a) => self.activate(y, a),
            None => y,
        })
    }

    pub fn dense(&mut self, layer: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        self.graph.dense(x, w, b)
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    /// Gradients of every bound weight after `graph.backward`.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.graph.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}
