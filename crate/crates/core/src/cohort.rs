//! The cohort of `M` classification networks, each with a projection head,
//! optionally sharing their low-level stages, and the standalone network
//! extracted for deployment.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Layer, Linear, ParamId, ParamStore, Stage};
use crate::tensor::Tensor;

/// He gain for layers followed by a ReLU.
const RELU_GAIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected ReLU stages, one per hidden width.
    Mlp { hidden: Vec<usize> },
    /// Three 3×3 conv blocks; the first two end in 2×2 max pooling, the last
    /// in global average pooling.
    SmallCnn { channels: [usize; 3] },
    /// Stem conv, then three residual stages of widths `w, 2w, 4w`.
    SmallResNet { width: usize, blocks_per_stage: usize },
}

impl Architecture {
    pub fn num_stages(&self) -> usize {
        match self {
            Architecture::Mlp { hidden } => hidden.len(),
            Architecture::SmallCnn { .. } => 3,
            Architecture::SmallResNet { .. } => 4,
        }
    }

    /// Stem plus the first stage.
    pub fn default_trunk_stages(&self) -> usize {
        match self {
            Architecture::Mlp { .. } | Architecture::SmallCnn { .. } => 1,
            Architecture::SmallResNet { .. } => 2,
        }
    }

    fn check_input(&self, input_shape: &[usize]) -> Result<()> {
        let ok = match self {
            Architecture::Mlp { hidden } => input_shape.len() == 1 && !hidden.is_empty(),
            Architecture::SmallCnn { .. } => input_shape.len() == 3 && input_shape[1] >= 4 && input_shape[2] >= 4,
            Architecture::SmallResNet { .. } => input_shape.len() == 3 && input_shape[1] >= 4 && input_shape[2] >= 4,
        };
        if ok && input_shape.iter().all(|&d| d > 0) {
            Ok(())
        } else {
            Err(Error::Spec(format!("{self:?} cannot take inputs of shape {input_shape:?}")))
        }
    }

    fn build_stage(
        &self,
        index: usize,
        input: &[usize],
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Stage {
        let p = format!("{prefix}.s{index}");
        let layers = match self {
            Architecture::Mlp { hidden } => vec![
                Layer::Linear(Linear::new(store, &format!("{p}.fc"), input[0], hidden[index], RELU_GAIN, rng)),
                Layer::Relu,
            ],
            Architecture::SmallCnn { channels } => {
                let pool = if index < 2 { Layer::MaxPool2 } else { Layer::GlobalAvgPool };
                vec![
                    Layer::Conv(Conv::new3x3(store, &format!("{p}.conv"), input[0], channels[index], rng)),
                    Layer::Relu,
                    pool,
                ]
            }
            Architecture::SmallResNet {
                width,
                blocks_per_stage,
            } => {
                let residuals = |store: &mut ParamStore, rng: &mut ChaCha8Rng, ch: usize| -> Vec<Layer> {
                    (0..*blocks_per_stage)
                        .map(|b| {
                            let c1 = Conv::new3x3(store, &format!("{p}.b{b}.conv1"), ch, ch, rng);
                            let c2 = Conv::new3x3(store, &format!("{p}.b{b}.conv2"), ch, ch, rng);
                            Layer::Residual(c1, c2)
                        })
                        .collect()
                };
                match index {
                    0 => vec![
                        Layer::Conv(Conv::new3x3(store, &format!("{p}.conv"), input[0], *width, rng)),
                        Layer::Relu,
                    ],
                    1 => {
                        let mut l = residuals(store, rng, *width);
                        l.push(Layer::MaxPool2);
                        l
                    }
                    _ => {
                        let ch = width << (index - 1);
                        let mut l = vec![
                            Layer::Conv(Conv::new3x3(store, &format!("{p}.conv"), input[0], ch, rng)),
                            Layer::Relu,
                        ];
                        l.extend(residuals(store, rng, ch));
                        l.push(if index == 3 { Layer::GlobalAvgPool } else { Layer::MaxPool2 });
                        l
                    }
                }
            }
        };
        Stage { layers }
    }

    /// Builds stages `range` of the backbone starting from `input` shape;
    /// returns the stages and the output shape.
    fn build_stages(
        &self,
        range: std::ops::Range<usize>,
        input: &[usize],
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Stage>, Vec<usize>)> {
        let mut shape = input.to_vec();
        let mut stages = Vec::new();
        for i in range {
            let stage = self.build_stage(i, &shape, store, prefix, rng);
            shape = stage.shape_and_macs(store, &shape)?.0;
            stages.push(stage);
        }
        Ok((stages, shape))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub networks: usize,
    pub backbone: Architecture,
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub embed_dim: usize,
    pub share_trunk: bool,
    /// Number of leading backbone stages shared when `share_trunk`.
    pub trunk_stages: usize,
    pub init_seeds: Vec<u64>,
    pub num_classes: usize,
}

/// Distinct per-network seeds derived from one master seed.
pub fn derive_init_seeds(master: u64, count: usize) -> Vec<u64> {
    // splitmix64 increments are distinct for distinct indices
    (0..count as u64)
        .map(|i| {
            let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i + 1));
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        })
        .collect()
}

impl CohortSpec {
    /// Defaults: 128-d embeddings, trunk shared iff `networks > 2`, the
    /// architecture's default split, seeds derived from `seed`.
    pub fn new(networks: usize, backbone: Architecture, input_shape: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        let trunk_stages = backbone.default_trunk_stages();
        Self {
            networks,
            backbone,
            input_shape,
            embed_dim: 128,
            share_trunk: networks > 2,
            trunk_stages,
            init_seeds: derive_init_seeds(seed, networks),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.networks < 2 {
            return Err(Error::Spec(format!("a cohort needs at least 2 networks, got {}", self.networks)));
        }
        if self.init_seeds.len() != self.networks {
            return Err(Error::Spec(format!(
                "{} init seeds for {} networks",
                self.init_seeds.len(),
                self.networks
            )));
        }
        for (i, s) in self.init_seeds.iter().enumerate() {
            if self.init_seeds[..i].contains(s) {
                return Err(Error::Spec(format!("duplicate init seed {s}")));
            }
        }
        if self.networks > 2 && !self.share_trunk {
            return Err(Error::Spec("cohorts of more than 2 networks share their trunk".into()));
        }
        if self.share_trunk && (self.trunk_stages == 0 || self.trunk_stages >= self.backbone.num_stages()) {
            return Err(Error::Spec(format!(
                "trunk split {} must leave at least one of {} stages per branch",
                self.trunk_stages,
                self.backbone.num_stages()
            )));
        }
        if self.embed_dim == 0 || self.num_classes < 2 {
            return Err(Error::Spec("embed_dim must be > 0 and num_classes >= 2".into()));
        }
        self.backbone.check_input(&self.input_shape)
    }
}

/// Two linear layers with a ReLU between them; hidden width equals input width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionHead {
    fn new(store: &mut ParamStore, prefix: &str, features: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), features, features, RELU_GAIN, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), features, embed_dim, 1.0, rng),
        }
    }

    /// Unnormalized projection.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Backbone stages after the shared trunk (all stages without sharing).
    pub stages: Vec<Stage>,
    pub classifier: Linear,
    pub projection: ProjectionHead,
}

impl Branch {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.stages.iter().flat_map(Stage::params).collect();
        p.extend([self.classifier.weight, self.classifier.bias]);
        p.extend(self.projection.params());
        p
    }
}

/// Graph nodes produced by one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub features: NodeId,
    pub logits: NodeId,
    /// L2-normalized projection.
    pub embeddings: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    spec: CohortSpec,
    store: ParamStore,
    trunk: Vec<Stage>,
    branches: Vec<Branch>,
    feature_dim: usize,
}

fn branch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn trunk_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn feature_dim(shape: &[usize]) -> Result<usize> {
    match shape {
        [f] => Ok(*f),
        other => Err(Error::Spec(format!("backbone ends in shape {other:?}, expected a vector"))),
    }
}

impl Cohort {
    pub fn build(spec: CohortSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let n_stages = spec.backbone.num_stages();
        let split = if spec.share_trunk { spec.trunk_stages } else { 0 };
        let (trunk, trunk_out) = spec.backbone.build_stages(
            0..split,
            &spec.input_shape,
            &mut store,
            "trunk",
            &mut trunk_rng(spec.init_seeds[0]),
        )?;
        let mut branches = Vec::with_capacity(spec.networks);
        let mut feat = 0;
        for (m, &seed) in spec.init_seeds.iter().enumerate() {
            let mut rng = branch_rng(seed);
            let prefix = format!("net{m}");
            let (stages, out) =
                spec.backbone
                    .build_stages(split..n_stages, &trunk_out, &mut store, &prefix, &mut rng)?;
            feat = feature_dim(&out)?;
            let classifier = Linear::new(
                &mut store,
                &format!("{prefix}.classifier"),
                feat,
                spec.num_classes,
                1.0,
                &mut rng,
            );
            let projection = ProjectionHead::new(&mut store, &format!("{prefix}.proj"), feat, spec.embed_dim, &mut rng);
            branches.push(Branch {
                stages,
                classifier,
                projection,
            });
        }
        Ok(Self {
            spec,
            store,
            trunk,
            branches,
            feature_dim: feat,
        })
    }

    pub fn spec(&self) -> &CohortSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn networks(&self) -> usize {
        self.branches.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn branch(&self, m: usize) -> &Branch {
        &self.branches[m]
    }

    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.trunk.iter().flat_map(Stage::params).collect()
    }

    pub fn branch_params(&self, m: usize) -> Vec<ParamId> {
        self.branches[m].params()
    }

    /// Overwrites branch `to`'s parameters with branch `from`'s.
    pub fn copy_branch(&mut self, from: usize, to: usize) {
        let src = self.branches[from].params();
        let dst = self.branches[to].params();
        for (s, d) in src.into_iter().zip(dst) {
            let v = self.store.get(s).clone();
            *self.store.get_mut(d) = v;
        }
    }

    fn check_batch(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != self.spec.input_shape.len() + 1
            || input.shape()[1..] != self.spec.input_shape[..]
            || input.rows() == 0
        {
            return Err(Error::Data(format!(
                "batch of shape {:?} does not match input shape {:?}",
                input.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Runs every branch on `input` (trunk evaluated once when shared).
    pub fn forward_all(&self, g: &mut Graph, p: &Bound, input: &Tensor) -> Result<Vec<BranchOutput>> {
        self.check_batch(input)?;
        let x = g.constant(input.clone());
        let mut h = x;
        for stage in &self.trunk {
            h = stage.forward(g, p, h)?;
        }
        let mut out = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let mut f = h;
            for stage in &b.stages {
                f = stage.forward(g, p, f)?;
            }
            let logits = b.classifier.forward(g, p, f)?;
            let z = b.projection.forward(g, p, f)?;
            let embeddings = g.l2_normalize(z)?;
            out.push(BranchOutput {
                features: f,
                logits,
                embeddings,
            });
        }
        Ok(out)
    }

    /// Value-only forward: per-network `(logits [n × C], embeddings [n × d])`.
    pub fn evaluate(&self, input: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let outs = self.forward_all(&mut g, &p, input)?;
        Ok(outs
            .iter()
            .map(|o| (g.value(o.logits).clone(), g.value(o.embeddings).clone()))
            .collect())
    }

    /// Standalone copy of network `m`: trunk (if shared) + its stages +
    /// classifier. Projection heads are dropped.
    pub fn extract_deployment_network(&self, m: usize) -> Result<DeploymentNetwork> {
        let branch = self.branches.get(m).ok_or_else(|| {
            Error::Contract(format!("network index {m} outside cohort of {}", self.networks()))
        })?;
        let mut store = ParamStore::new();
        let mut remap = |id: ParamId| store.add(self.store.name(id).to_string(), self.store.get(id).clone());
        let stages: Vec<Stage> = self
            .trunk
            .iter()
            .chain(&branch.stages)
            .map(|s| Stage {
                layers: s.layers.iter().map(|l| l.remap(&mut remap)).collect(),
            })
            .collect();
        let classifier = Linear {
            weight: remap(branch.classifier.weight),
            bias: remap(branch.classifier.bias),
        };
        Ok(DeploymentNetwork {
            backbone: self.spec.backbone.clone(),
            input_shape: self.spec.input_shape.clone(),
            num_classes: self.spec.num_classes,
            stages,
            classifier,
            store,
        })
    }
}

/// A single classification network: backbone stages and a linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentNetwork {
    pub backbone: Architecture,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub stages: Vec<Stage>,
    pub classifier: Linear,
    pub store: ParamStore,
}

impl DeploymentNetwork {
    /// A freshly initialized single network of the given architecture.
    pub fn reference(backbone: Architecture, input_shape: Vec<usize>, num_classes: usize, seed: u64) -> Result<Self> {
        backbone.check_input(&input_shape)?;
        let mut store = ParamStore::new();
        let mut rng = branch_rng(seed);
        let (stages, out) =
            backbone.build_stages(0..backbone.num_stages(), &input_shape, &mut store, "net", &mut rng)?;
        let feat = feature_dim(&out)?;
        let classifier = Linear::new(&mut store, "net.classifier", feat, num_classes, 1.0, &mut rng);
        Ok(Self {
            backbone,
            input_shape,
            num_classes,
            stages,
            classifier,
            store,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Multiply-accumulates per sample for one forward pass.
    pub fn macs(&self) -> Result<u64> {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for s in &self.stages {
            let (next, m) = s.shape_and_macs(&self.store, &shape)?;
            shape = next;
            total += m;
        }
        let (_, m) = Layer::Linear(self.classifier).shape_and_macs(&self.store, &shape)?;
        Ok(total + m)
    }

    /// `(features, logits)` nodes.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        for s in &self.stages {
            h = s.forward(g, p, h)?;
        }
        let logits = self.classifier.forward(g, p, h)?;
        Ok((h, logits))
    }

    fn run(&self, input: &Tensor, want_logits: bool) -> Result<Tensor> {
        if input.shape().len() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            return Err(Error::Data(format!(
                "batch of shape {:?} does not match input shape {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(input.clone());
        let (f, z) = self.forward(&mut g, &p, x)?;
        Ok(g.value(if want_logits { z } else { f }).clone())
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, true)
    }

    /// Backbone output (the representation before the classifier).
    pub fn features(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, false)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
