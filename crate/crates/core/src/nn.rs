//! Parameter storage and the handful of layers the backbones are built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `g`, as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            nodes: self
                .tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.variable(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Graph nodes of a bound [`ParamStore`], indexed like the store.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Per-parameter gradients, zero-filled where none arrived.
    pub fn collect_grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                grads
                    .get(self.node(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `weight: [in × out]`, normal init with variance `gain / in`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = (gain / inputs as f64).sqrt();
        Self {
            weight: store.add(format!("{prefix}.weight"), normal_tensor(rng, &[inputs, outputs], std)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, p.node(self.weight))?;
        g.add_row_bias(y, p.node(self.bias))
    }

    fn dims(&self, store: &ParamStore) -> (usize, usize) {
        let s = store.get(self.weight).shape();
        (s[0], s[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv {
    /// 3×3, padding 1, He-normal init.
    pub fn new3x3<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: store.add(format!("{prefix}.weight"), normal_tensor(rng, &[out_ch, fan_in], std)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_ch])),
            kernel: 3,
            pad: 1,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p.node(self.weight), p.node(self.bias), self.kernel, self.pad)
    }

    fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    /// `relu(x + conv2(relu(conv1(x))))`
    Residual(Conv, Conv),
}

impl Layer {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        match self {
            Layer::Linear(l) => l.forward(g, p, x),
            Layer::Conv(c) => c.forward(g, p, x),
            Layer::Relu => Ok(g.relu(x)),
            Layer::MaxPool2 => g.max_pool2(x),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::Residual(c1, c2) => {
                let h = c1.forward(g, p, x)?;
                let h = g.relu(h);
                let h = c2.forward(g, p, h)?;
                let s = g.add(x, h)?;
                Ok(g.relu(s))
            }
        }
    }

    /// Output shape (without batch) and multiply-accumulate count per sample.
    pub fn shape_and_macs(&self, store: &ParamStore, input: &[usize]) -> Result<(Vec<usize>, u64)> {
        let bad = || Error::Spec(format!("layer {self:?} cannot take input shape {input:?}"));
        match (self, input) {
            (Layer::Linear(l), [f]) => {
                let (i, o) = l.dims(store);
                if i != *f {
                    return Err(bad());
                }
                Ok((vec![o], (i * o) as u64))
            }
            (Layer::Conv(c), [ch, h, w]) => {
                let o = c.out_channels(store);
                if store.get(c.weight).shape()[1] != ch * c.kernel * c.kernel || h + 2 * c.pad < c.kernel || w + 2 * c.pad < c.kernel {
                    return Err(bad());
                }
                let (oh, ow) = (h + 2 * c.pad + 1 - c.kernel, w + 2 * c.pad + 1 - c.kernel);
                Ok((vec![o, oh, ow], (o * ch * c.kernel * c.kernel * oh * ow) as u64))
            }
            (Layer::Relu, s) => Ok((s.to_vec(), 0)),
            (Layer::MaxPool2, [c, h, w]) => Ok((vec![*c, h / 2, w / 2], 0)),
            (Layer::GlobalAvgPool, [c, _, _]) => Ok((vec![*c], 0)),
            (Layer::Residual(c1, c2), s @ [_, _, _]) => {
                let (s1, m1) = Layer::Conv(*c1).shape_and_macs(store, s)?;
                let (s2, m2) = Layer::Conv(*c2).shape_and_macs(store, &s1)?;
                if s2 != s {
                    return Err(bad());
                }
                Ok((s2, m1 + m2))
            }
            _ => Err(bad()),
        }
    }

    /// Parameters referenced by this layer.
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Layer::Linear(l) => vec![l.weight, l.bias],
            Layer::Conv(c) => vec![c.weight, c.bias],
            Layer::Residual(a, b) => vec![a.weight, a.bias, b.weight, b.bias],
            _ => vec![],
        }
    }

    /// Same layer pointing at parameters renumbered through `map`.
    pub fn remap(&self, map: &mut impl FnMut(ParamId) -> ParamId) -> Layer {
        let lin = |l: &Linear, map: &mut dyn FnMut(ParamId) -> ParamId| Linear {
            weight: map(l.weight),
            bias: map(l.bias),
        };
        let conv = |c: &Conv, map: &mut dyn FnMut(ParamId) -> ParamId| Conv {
            weight: map(c.weight),
            bias: map(c.bias),
            ..*c
        };
        match self {
            Layer::Linear(l) => Layer::Linear(lin(l, map)),
            Layer::Conv(c) => Layer::Conv(conv(c, map)),
            Layer::Residual(a, b) => {
                let a = conv(a, map);
                Layer::Residual(a, conv(b, map))
            }
            other => other.clone(),
        }
    }
}

/// A contiguous group of layers; trunk sharing splits backbones at stage
/// boundaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub layers: Vec<Layer>,
}

impl Stage {
    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
        }
        Ok(x)
    }

    pub fn shape_and_macs(&self, store: &ParamStore, input: &[usize]) -> Result<(Vec<usize>, u64)> {
        let mut shape = input.to_vec();
        let mut macs = 0;
        for layer in &self.layers {
            let (s, m) = layer.shape_and_macs(store, &shape)?;
            shape = s;
            macs += m;
        }
        Ok((shape, macs))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Layer::params).collect()
    }
}
