//! Named parameter store, layer building blocks, and the graph builder that
//! ties parameters to tape nodes.
//!
//! Parameters live outside the tape in an insertion-ordered store; each
//! forward pass copies the needed tensors onto a fresh tape. BatchNorm
//! running statistics are non-trainable entries updated by the trainer from
//! the batch statistics recorded during graph construction.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MatteError, Result};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered named tensor store.
#[derive(Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Params {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[*self.by_name.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.by_name.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].value
    }

    pub fn lookup(&self, name: &str) -> Result<&Tensor> {
        self.by_name
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| MatteError::Checkpoint(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Pending running-statistics update recorded while building a training
/// graph; applied once per iteration by the trainer.
pub struct BnPending {
    pub mean_name: String,
    pub var_name: String,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// A tape plus the parameter store it draws from. Records which tape leaf
/// each parameter was bound to so gradients can be collected by name.
pub struct GraphBuilder<'p> {
    pub tape: Tape,
    params: &'p Params,
    train: bool,
    bound: Vec<(String, NodeId)>,
    bn_pending: Vec<BnPending>,
}

impl<'p> GraphBuilder<'p> {
    pub fn new(params: &'p Params, train: bool) -> GraphBuilder<'p> {
        GraphBuilder { tape: Tape::new(), params, train, bound: Vec::new(), bn_pending: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Binds a named parameter as a tape leaf (differentiable iff trainable).
    pub fn param(&mut self, name: &str) -> NodeId {
        let i = *self
            .params
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let e = &self.params.entries[i];
        let id = if e.trainable && self.train {
            self.tape.var(e.value.clone())
        } else {
            self.tape.constant(e.value.clone())
        };
        self.bound.push((e.name.clone(), id));
        id
    }

    /// Reads a non-trainable statistics tensor without creating a node.
    pub fn stat(&self, name: &str) -> &Tensor {
        self.params.get(name)
    }

    pub fn record_bn(&mut self, pending: BnPending) {
        self.bn_pending.push(pending);
    }

    pub fn take_bn_pending(&mut self) -> Vec<BnPending> {
        std::mem::take(&mut self.bn_pending)
    }

    /// Collects parameter gradients by name after a backward pass, folding
    /// duplicate bindings. Parameters the loss never touched are absent.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        let mut order: Vec<String> = Vec::new();
        let mut acc: HashMap<String, Tensor> = HashMap::new();
        for (name, id) in &self.bound {
            if let Some(g) = grads.get(*id) {
                match acc.get_mut(name) {
                    Some(t) => {
                        for (o, &v) in t.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    }
                    None => {
                        order.push(name.clone());
                        acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        order
            .into_iter()
            .map(|n| {
                let t = acc.remove(&n).expect("gradient present");
                (n, t)
            })
            .collect()
    }
}

fn key(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// He-style fan-in-scaled normal init for a conv weight tensor.
fn init_conv_weight(rng: &mut ChaCha8Rng, oc: usize, ic: usize, k: usize) -> Tensor {
    let std = (2.0 / (ic * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..oc * ic * k * k).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(oc, ic, k, k, data)
}

/// 2D convolution layer; `pad = k / 2` keeps spatial size at stride 1.
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn define(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Conv2d {
        let weight = key(prefix, "weight");
        params.insert(&weight, init_conv_weight(rng, oc, ic, k), true);
        let bias = if bias {
            let b = key(prefix, "bias");
            params.insert(&b, Tensor::zeros(1, oc, 1, 1), true);
            Some(b)
        } else {
            None
        };
        Conv2d { weight, bias, stride, pad: k / 2 }
    }

    pub fn apply(&self, gb: &mut GraphBuilder, x: NodeId) -> NodeId {
        let w = gb.param(&self.weight);
        let b = self.bias.as_ref().map(|b| gb.param(b));
        gb.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub const BN_EPS: f64 = 1e-5;
/// Running-average retention per iteration: new = 0.9 * old + 0.1 * batch.
pub const BN_MOMENTUM: f64 = 0.9;

pub struct BatchNorm {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
}

impl BatchNorm {
    pub fn define(params: &mut Params, prefix: &str, c: usize) -> BatchNorm {
        let (gamma, beta) = (key(prefix, "gamma"), key(prefix, "beta"));
        let (mean, var) = (key(prefix, "running_mean"), key(prefix, "running_var"));
        params.insert(&gamma, Tensor::full(1, c, 1, 1, 1.0), true);
        params.insert(&beta, Tensor::zeros(1, c, 1, 1), true);
        params.insert(&mean, Tensor::zeros(1, c, 1, 1), false);
        params.insert(&var, Tensor::full(1, c, 1, 1, 1.0), false);
        BatchNorm { gamma, beta, mean, var }
    }

    pub fn apply(&self, gb: &mut GraphBuilder, x: NodeId) -> NodeId {
        let gamma = gb.param(&self.gamma);
        let beta = gb.param(&self.beta);
        if gb.is_train() {
            let (y, batch_mean, batch_var) = gb.tape.batch_norm_train(x, gamma, beta, BN_EPS);
            gb.record_bn(BnPending {
                mean_name: self.mean.clone(),
                var_name: self.var.clone(),
                batch_mean,
                batch_var,
            });
            y
        } else {
            let mean = gb.stat(&self.mean).data().to_vec();
            let var = gb.stat(&self.var).data().to_vec();
            gb.tape.batch_norm_eval(x, gamma, beta, BN_EPS, &mean, &var)
        }
    }
}

/// conv -> batchnorm -> relu. The conv carries no bias; batchnorm's shift
/// replaces it.
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn define(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
    ) -> ConvBnRelu {
        let conv = Conv2d::define(params, rng, &key(prefix, "conv"), ic, oc, k, stride, false);
        let bn = BatchNorm::define(params, &key(prefix, "bn"), oc);
        ConvBnRelu { conv, bn }
    }

    pub fn apply(&self, gb: &mut GraphBuilder, x: NodeId) -> NodeId {
        let y = self.conv.apply(gb, x);
        let y = self.bn.apply(gb, y);
        gb.tape.relu(y)
    }
}

/// Two-conv residual block at constant width: relu(x + bn(conv(relu(bn(conv x))))).
pub struct ResBlock {
    c1: Conv2d,
    b1: BatchNorm,
    c2: Conv2d,
    b2: BatchNorm,
}

impl ResBlock {
    pub fn define(params: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, c: usize) -> ResBlock {
        ResBlock {
            c1: Conv2d::define(params, rng, &key(prefix, "conv1"), c, c, 3, 1, false),
            b1: BatchNorm::define(params, &key(prefix, "bn1"), c),
            c2: Conv2d::define(params, rng, &key(prefix, "conv2"), c, c, 3, 1, false),
            b2: BatchNorm::define(params, &key(prefix, "bn2"), c),
        }
    }

    pub fn apply(&self, gb: &mut GraphBuilder, x: NodeId) -> NodeId {
        let y = self.c1.apply(gb, x);
        let y = self.b1.apply(gb, y);
        let y = gb.tape.relu(y);
        let y = self.c2.apply(gb, y);
        let y = self.b2.apply(gb, y);
        let y = gb.tape.add(x, y);
        gb.tape.relu(y)
    }
}
