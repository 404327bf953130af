//! Supervised and self-supervised training loops, configuration, metrics,
//! checkpoints and linear evaluation.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::cohort::{derive_init_seeds, Architecture, Cohort, CohortSpec, DeploymentNetwork};
use crate::data::{epoch_batches, load_cifar10, Augment, Dataset, SyntheticBlobs, SyntheticImages};
use crate::error::{Error, Result};
use crate::losses::{
    build_mcl, build_supervised, cross_entropy, report, ContrastSet, LossReport, MclGraph, MclWeights,
    NetworkEmbeddings, TermKind,
};
use crate::momentum::{selfsup_step, SelfSupState};
use crate::nn::{Linear, ParamStore};
use crate::optim::{LrSchedule, Sgd};
use crate::pairs::{tuples_from_class_batch, ClassAwareSampler, MemoryBank};
use crate::tensor::Tensor;

/// Environment variable naming the CIFAR-10 binary directory.
pub const DATA_DIR_ENV: &str = "MCL_DATA_DIR";

const STREAM_DATA: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_BANK: u64 = 4;
const INIT_SALT: u64 = 0x696e_6974;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Selfsup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(SyntheticBlobs),
    Images(SyntheticImages),
    Cifar10 {
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

impl DatasetConfig {
    pub fn default_blobs() -> Self {
        DatasetConfig::Blobs(SyntheticBlobs {
            classes: 10,
            dim: 32,
            train_per_class: 100,
            test_per_class: 50,
            separation: 1.0,
            noise: 0.5,
            seed: 0,
        })
    }

    /// Train and test splits. CIFAR-10 is read from `data_dir`, falling back
    /// to the `MCL_DATA_DIR` environment variable.
    pub fn load(&self, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Blobs(b) => b.generate(),
            DatasetConfig::Images(i) => i.generate(),
            DatasetConfig::Cifar10 {
                train_limit,
                test_limit,
            } => {
                let dir = match data_dir {
                    Some(d) => d.to_path_buf(),
                    None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                        Error::Config(format!("cifar10 needs data_dir or ${DATA_DIR_ENV}"))
                    })?,
                };
                load_cifar10(&dir, *train_limit, *test_limit)
            }
        }
    }
}

/// How supervised contrastive tuples are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContrastMode {
    /// Class-aware batches: every anchor's partner is its positive, the
    /// other `B − 2` samples are negatives.
    Batch,
    /// One memory bank per network; positives and `negatives` negatives are
    /// retrieved from past embeddings.
    Bank { size: usize, negatives: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub weights: MclWeights,
    pub networks: usize,
    pub arch: Architecture,
    pub embed_dim: usize,
    /// `None` shares the trunk exactly when more than two networks train.
    pub share_trunk: Option<bool>,
    pub trunk_stages: Option<usize>,
    pub dataset: DatasetConfig,
    pub data_dir: Option<PathBuf>,
    pub contrast: ContrastMode,
    pub augment: Augment,
    pub momentum_coefficient: f64,
    pub queue_size: usize,
    pub seed: u64,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn supervised() -> Self {
        Self {
            mode: Mode::Supervised,
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            weights: MclWeights::supervised(),
            networks: 2,
            arch: Architecture::SmallCnn { channels: [16, 32, 64] },
            embed_dim: 128,
            share_trunk: None,
            trunk_stages: None,
            dataset: DatasetConfig::Images(SyntheticImages::default()),
            data_dir: None,
            contrast: ContrastMode::Batch,
            augment: Augment {
                max_shift: 1,
                ..Augment::none()
            },
            momentum_coefficient: 0.999,
            queue_size: 1024,
            seed: 0,
            metrics_path: None,
            checkpoint_path: None,
        }
    }

    pub fn selfsup() -> Self {
        Self {
            mode: Mode::Selfsup,
            epochs: 10,
            lr: 0.05,
            weights: MclWeights::self_supervised(),
            arch: Architecture::Mlp { hidden: vec![64, 64] },
            embed_dim: 32,
            dataset: DatasetConfig::default_blobs(),
            augment: Augment {
                scale_jitter: 0.2,
                dropout: 0.2,
                noise: 0.3,
                ..Augment::none()
            },
            ..Self::supervised()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Supervised => Self::supervised(),
            Mode::Selfsup => Self::selfsup(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.mode == Mode::Supervised && self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "supervised batch_size must be even, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let ContrastMode::Bank { size, negatives } = self.contrast {
            if negatives == 0 || size <= negatives {
                return Err(Error::Config("bank needs size > negatives >= 1".into()));
            }
        }
        self.weights.validate()
    }

    /// Cohort layout for a dataset with the given sample shape and classes.
    pub fn cohort_spec(&self, input_shape: Vec<usize>, num_classes: usize) -> CohortSpec {
        let mut spec = CohortSpec::new(self.networks, self.arch.clone(), input_shape, num_classes, 0);
        spec.embed_dim = self.embed_dim;
        spec.init_seeds = derive_init_seeds(self.seed ^ INIT_SALT, self.networks);
        if let Some(s) = self.share_trunk {
            spec.share_trunk = s;
        }
        if let Some(t) = self.trunk_stages {
            spec.trunk_stages = t;
        }
        spec
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value `{value}` for `{key}`: {what}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| bad(&e.to_string()));
        let int = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(&e.to_string()));
        let list = |v: &str| -> Result<Vec<usize>> { v.split(',').map(int).collect() };
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        let boolean = |v: &str| v.parse::<bool>().map_err(|e| bad(&e.to_string()));
        match key {
            "mode" => {
                self.mode = match value {
                    "supervised" => Mode::Supervised,
                    "selfsup" => Mode::Selfsup,
                    _ => return Err(bad("expected supervised or selfsup")),
                }
            }
            "epochs" => self.epochs = int(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "lr" => self.lr = num(value)?,
            "sgd_momentum" => self.sgd_momentum = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "schedule" => {
                self.schedule = match value.split(':').collect::<Vec<_>>().as_slice() {
                    ["cosine"] => LrSchedule::Cosine,
                    ["constant"] => LrSchedule::Constant,
                    ["step", milestones, gamma] => LrSchedule::Step {
                        milestones: list(milestones)?,
                        gamma: num(gamma)?,
                    },
                    _ => return Err(bad("expected cosine, constant or step:M1,M2:GAMMA")),
                }
            }
            "alpha" => self.weights.alpha = num(value)?,
            "beta" => self.weights.beta = num(value)?,
            "gamma" => self.weights.gamma = num(value)?,
            "lambda" => self.weights.lambda = num(value)?,
            "tau" => {
                self.weights.tau_hard = num(value)?;
                self.weights.tau_soft = 3.0 * self.weights.tau_hard;
            }
            "tau_soft" => self.weights.tau_soft = num(value)?,
            "networks" => self.networks = int(value)?,
            "arch" => {
                self.arch = match value.split_once(':') {
                    Some(("mlp", h)) => Architecture::Mlp { hidden: list(h)? },
                    Some(("small_cnn", c)) => {
                        let c = list(c)?;
                        let channels: [usize; 3] = c.try_into().map_err(|_| bad("small_cnn takes 3 widths"))?;
                        Architecture::SmallCnn { channels }
                    }
                    Some(("small_resnet", p)) => match list(p)?.as_slice() {
                        [w, b] => Architecture::SmallResNet {
                            width: *w,
                            blocks_per_stage: *b,
                        },
                        _ => return Err(bad("small_resnet takes WIDTH,BLOCKS")),
                    },
                    _ => return Err(bad("expected mlp:H1,H2.., small_cnn:C1,C2,C3 or small_resnet:W,B")),
                }
            }
            "embed_dim" => self.embed_dim = int(value)?,
            "share_trunk" => self.share_trunk = if value == "auto" { None } else { Some(boolean(value)?) },
            "trunk_stages" => self.trunk_stages = if value == "auto" { None } else { Some(int(value)?) },
            "dataset" => {
                self.dataset = match value {
                    "blobs" => DatasetConfig::default_blobs(),
                    "images" => DatasetConfig::Images(SyntheticImages::default()),
                    "cifar10" => DatasetConfig::Cifar10 {
                        train_limit: None,
                        test_limit: None,
                    },
                    _ => return Err(bad("expected blobs, images or cifar10")),
                }
            }
            "data_dir" => self.data_dir = path(value),
            "contrast" => {
                self.contrast = match value {
                    "batch" => ContrastMode::Batch,
                    "bank" => ContrastMode::Bank {
                        size: 4096,
                        negatives: 255,
                    },
                    _ => return Err(bad("expected batch or bank")),
                }
            }
            "bank_size" | "bank_negatives" => match &mut self.contrast {
                ContrastMode::Bank { size, negatives } => {
                    if key == "bank_size" {
                        *size = int(value)?
                    } else {
                        *negatives = int(value)?
                    }
                }
                ContrastMode::Batch => return Err(Error::Config(format!("`{key}` requires contrast = bank"))),
            },
            "momentum_coefficient" => self.momentum_coefficient = num(value)?,
            "queue_size" => self.queue_size = int(value)?,
            "seed" => self.seed = value.trim().parse().map_err(|e: std::num::ParseIntError| bad(&e.to_string()))?,
            "metrics" => self.metrics_path = path(value),
            "checkpoint" => self.checkpoint_path = path(value),
            _ => {
                if let Some(k) = key.strip_prefix("augment.") {
                    let a = &mut self.augment;
                    match k {
                        "max_shift" => a.max_shift = int(value)?,
                        "flip" => a.flip = boolean(value)?,
                        "scale_jitter" => a.scale_jitter = num(value)?,
                        "dropout" => a.dropout = num(value)?,
                        "noise" => a.noise = num(value)?,
                        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                    }
                } else {
                    return self.set_dataset_field(key, value, &bad);
                }
            }
        }
        Ok(())
    }

    fn set_dataset_field(&mut self, key: &str, value: &str, bad: &dyn Fn(&str) -> Error) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}`"));
        let (prefix, field) = key.split_once('.').ok_or_else(unknown)?;
        let int = || value.trim().parse::<usize>().map_err(|e| bad(&e.to_string()));
        let num = || value.trim().parse::<f64>().map_err(|e| bad(&e.to_string()));
        match (prefix, &mut self.dataset) {
            ("blobs", DatasetConfig::Blobs(b)) => match field {
                "classes" => b.classes = int()?,
                "dim" => b.dim = int()?,
                "train_per_class" => b.train_per_class = int()?,
                "test_per_class" => b.test_per_class = int()?,
                "separation" => b.separation = num()?,
                "noise" => b.noise = num()?,
                "seed" => b.seed = int()? as u64,
                _ => return Err(unknown()),
            },
            ("images", DatasetConfig::Images(i)) => match field {
                "classes" => i.classes = int()?,
                "channels" => i.channels = int()?,
                "size" => i.size = int()?,
                "train_per_class" => i.train_per_class = int()?,
                "test_per_class" => i.test_per_class = int()?,
                "pool" => i.pool = int()?,
                "primitives_per_class" => i.primitives_per_class = int()?,
                "amplitude_jitter" => i.amplitude_jitter = num()?,
                "max_shift" => i.max_shift = int()?,
                "noise" => i.noise = num()?,
                "seed" => i.seed = int()? as u64,
                _ => return Err(unknown()),
            },
            (
                "cifar10",
                DatasetConfig::Cifar10 {
                    train_limit,
                    test_limit,
                },
            ) => match field {
                "train_limit" => *train_limit = Some(int()?),
                "test_limit" => *test_limit = Some(int()?),
                _ => return Err(unknown()),
            },
            ("blobs" | "images" | "cifar10", _) => {
                return Err(Error::Config(format!("`{key}` does not match the selected dataset")))
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Builds a config from `key = value` pairs on top of the defaults for
    /// `mode`. Selector keys (`mode`, `dataset`, `contrast`, `tau`) apply
    /// before the fields that refine them.
    pub fn from_pairs(mode: Mode, pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::for_mode(mode);
        let rank = |k: &str| match k {
            "mode" => 0,
            "dataset" | "contrast" => 1,
            "tau" => 2,
            _ => 3,
        };
        let mut ordered: Vec<&(String, String)> = pairs.iter().collect();
        ordered.sort_by_key(|(k, _)| rank(k));
        for (k, v) in ordered {
            cfg.set(k, v)?;
        }
        cfg.mode = mode;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Test top-1 accuracy in percent per network (empty when not measured).
    pub accuracy: Vec<f64>,
    pub mean_accuracy: Option<f64>,
    /// Epoch means of the per-step loss reports.
    pub loss: LossReport,
    /// `log K − mean ICL loss`, when ICL terms were computed.
    pub mi_lower_bound: Option<f64>,
    pub steps: usize,
    /// Steps without contrastive terms (queue warmup, memory-bank cold start).
    pub skipped_steps: usize,
    pub seconds: f64,
}

pub fn append_metric(path: &Path, record: &MetricRecord) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub cohort: Cohort,
    pub optimizer: Sgd,
    /// 0-based index of the next epoch to run. Per-epoch random streams are
    /// derived from `config.seed` and this index.
    pub next_epoch: usize,
    pub banks: Vec<MemoryBank>,
    pub selfsup: Option<SelfSupState>,
    pub metrics: Vec<MetricRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub cohort: Cohort,
    pub metrics: Vec<MetricRecord>,
    pub checkpoint: Checkpoint,
}

fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_init_seeds(seed, epoch + 1)[epoch]);
    rng.set_stream(stream);
    rng
}

/// Top-1 accuracy in percent.
pub fn top1(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == labels[i]
        })
        .count();
    100.0 * correct as f64 / labels.len().max(1) as f64
}

/// Per-network test accuracy of a cohort.
pub fn evaluate_cohort(cohort: &Cohort, data: &Dataset) -> Result<Vec<f64>> {
    let mut correct = vec![0.0; cohort.networks()];
    let index: Vec<usize> = (0..data.len()).collect();
    for chunk in index.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        for (m, (logits, _)) in cohort.evaluate(&x)?.into_iter().enumerate() {
            correct[m] += top1(&logits, &y) * chunk.len() as f64;
        }
    }
    Ok(correct.into_iter().map(|c| c / data.len() as f64).collect())
}

struct EpochStats {
    loss: LossReport,
    steps: usize,
    skipped: usize,
    icl_sum: f64,
    icl_steps: usize,
    negatives: usize,
}

impl EpochStats {
    fn new() -> Self {
        Self {
            loss: LossReport::default(),
            steps: 0,
            skipped: 0,
            icl_sum: 0.0,
            icl_steps: 0,
            negatives: 0,
        }
    }

    fn record(&mut self, rep: LossReport, mcl: Option<&MclGraph>) {
        if let Some(m) = mcl {
            let count = rep.term_counts.get(TermKind::Icl.name()).copied().unwrap_or(0);
            if count > 0 {
                self.icl_sum += rep.term(TermKind::Icl) / count as f64;
                self.icl_steps += 1;
                self.negatives = m.num_negatives;
            }
        }
        self.steps += 1;
        self.push(rep);
    }

    fn push(&mut self, rep: LossReport) {
        let mut sums = std::mem::take(&mut self.loss);
        sums.accumulate(&rep, 1);
        self.loss = sums;
    }

    fn finish(self, epoch: usize, lr: f64, accuracy: Vec<f64>, seconds: f64) -> MetricRecord {
        let mut loss = LossReport::default();
        if self.steps > 0 {
            loss.accumulate(&self.loss, self.steps);
        }
        let mean_accuracy = (!accuracy.is_empty()).then(|| accuracy.iter().sum::<f64>() / accuracy.len() as f64);
        MetricRecord {
            epoch,
            lr,
            accuracy,
            mean_accuracy,
            loss,
            mi_lower_bound: (self.icl_steps > 0)
                .then(|| (self.negatives as f64).ln() - self.icl_sum / self.icl_steps as f64),
            steps: self.steps,
            skipped_steps: self.skipped,
            seconds,
        }
    }
}

fn fresh_checkpoint(config: &TrainConfig, train: &Dataset) -> Result<Checkpoint> {
    let spec = config.cohort_spec(train.sample_shape().to_vec(), train.num_classes);
    let cohort = Cohort::build(spec)?;
    let optimizer = Sgd::new(cohort.store(), config.sgd_momentum, config.weight_decay)?;
    let banks = match (config.mode, config.contrast) {
        (Mode::Supervised, ContrastMode::Bank { size, .. }) => (0..config.networks)
            .map(|_| MemoryBank::new(size, config.embed_dim))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let selfsup = match config.mode {
        Mode::Selfsup => Some(SelfSupState::new(&cohort, config.queue_size, config.momentum_coefficient)?),
        Mode::Supervised => None,
    };
    Ok(Checkpoint {
        config: config.clone(),
        cohort,
        optimizer,
        next_epoch: 0,
        banks,
        selfsup,
        metrics: Vec::new(),
    })
}

/// Gradients of every cohort parameter for one supervised step, plus the
/// loss report. Exposed for gradient audits.
pub fn supervised_gradients(
    cohort: &Cohort,
    x: &Tensor,
    labels: &[usize],
    weights: &MclWeights,
) -> Result<(Vec<Tensor>, LossReport)> {
    let mut g = Graph::new();
    let p = cohort.store().bind(&mut g, true);
    let outs = cohort.forward_all(&mut g, &p, x)?;
    let tuples = tuples_from_class_batch(labels)?;
    let set = ContrastSet::from_tuples(&tuples)?;
    let nets: Vec<NetworkEmbeddings> = outs
        .iter()
        .map(|o| NetworkEmbeddings {
            anchors: o.embeddings,
            contrast: o.embeddings,
        })
        .collect();
    let mcl = build_mcl(&mut g, &nets, &set, weights, None)?;
    let logits: Vec<_> = outs.iter().map(|o| o.logits).collect();
    let sup = build_supervised(&mut g, &logits, labels, Some(&mcl))?;
    let rep = report(&g, Some(&mcl), &sup.ce, weights);
    let grads = g.backward(sup.total)?;
    Ok((p.collect_grads(cohort.store(), &grads), rep))
}

fn supervised_epoch(
    ck: &mut Checkpoint,
    train: &Dataset,
    sampler: &ClassAwareSampler,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats> {
    let cfg = ck.config.clone();
    let seed = cfg.seed;
    let mut data_rng = epoch_rng(seed, STREAM_DATA, epoch);
    let mut aug_rng = epoch_rng(seed, STREAM_AUGMENT, epoch);
    let mut bank_rng = epoch_rng(seed, STREAM_BANK, epoch);
    let steps = train.len() / cfg.batch_size;
    let batches: Vec<Vec<usize>> = match cfg.contrast {
        ContrastMode::Batch => (0..steps)
            .map(|_| sampler.sample(cfg.batch_size, &mut data_rng))
            .collect::<Result<_>>()?,
        ContrastMode::Bank { .. } => epoch_batches(train.len(), cfg.batch_size, &mut data_rng),
    };
    let mut stats = EpochStats::new();
    for (step, idx) in batches.iter().enumerate() {
        let (x, y) = train.batch(idx);
        let x = cfg.augment.apply(&x, &mut aug_rng)?;
        let mut g = Graph::new();
        let p = ck.cohort.store().bind(&mut g, true);
        let outs = ck.cohort.forward_all(&mut g, &p, &x)?;
        let mcl = match cfg.contrast {
            ContrastMode::Batch => {
                let set = ContrastSet::from_tuples(&tuples_from_class_batch(&y)?)?;
                let nets: Vec<NetworkEmbeddings> = outs
                    .iter()
                    .map(|o| NetworkEmbeddings {
                        anchors: o.embeddings,
                        contrast: o.embeddings,
                    })
                    .collect();
                Some(build_mcl(&mut g, &nets, &set, &cfg.weights, None)?)
            }
            ContrastMode::Bank { negatives, .. } => {
                let bank0 = &ck.banks[0];
                if y.iter().all(|&label| bank0.can_sample(label, negatives)) {
                    let mut candidates = Vec::with_capacity(y.len() * (negatives + 1));
                    for &label in &y {
                        let (pos, negs) = bank0.sample_indices(label, negatives, &mut bank_rng)?;
                        candidates.push(pos);
                        candidates.extend(negs);
                    }
                    let set = ContrastSet {
                        anchor_rows: (0..y.len()).collect(),
                        candidates,
                        group: negatives + 1,
                    };
                    let nets: Vec<NetworkEmbeddings> = outs
                        .iter()
                        .zip(&ck.banks)
                        .map(|(o, bank)| NetworkEmbeddings {
                            anchors: o.embeddings,
                            contrast: g.constant(bank.as_tensor()),
                        })
                        .collect();
                    Some(build_mcl(&mut g, &nets, &set, &cfg.weights, None)?)
                } else {
                    None
                }
            }
        };
        let logits: Vec<_> = outs.iter().map(|o| o.logits).collect();
        let sup = build_supervised(&mut g, &logits, &y, mcl.as_ref())?;
        let rep = report(&g, mcl.as_ref(), &sup.ce, &cfg.weights);
        if !rep.total.is_finite() || !g.value(sup.total).item().is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                step,
                batch: idx.clone(),
                terms: rep.per_term.clone(),
            });
        }
        let grads = g.backward(sup.total)?;
        let grads = p.collect_grads(ck.cohort.store(), &grads);
        ck.optimizer.step(ck.cohort.store_mut(), &grads, lr)?;
        for (bank, o) in ck.banks.iter_mut().zip(&outs) {
            bank.update(g.value(o.embeddings), &y)?;
        }
        if mcl.is_none() && !ck.banks.is_empty() {
            stats.skipped += 1;
        }
        stats.record(rep, mcl.as_ref());
    }
    Ok(stats)
}

fn selfsup_epoch(ck: &mut Checkpoint, train: &Dataset, epoch: usize, lr: f64) -> Result<EpochStats> {
    let cfg = ck.config.clone();
    let mut data_rng = epoch_rng(cfg.seed, STREAM_DATA, epoch);
    let mut aug_rng = epoch_rng(cfg.seed, STREAM_AUGMENT, epoch);
    let mut stats = EpochStats::new();
    let state = ck
        .selfsup
        .as_mut()
        .ok_or_else(|| Error::Contract("self-supervised checkpoint lacks queue state".into()))?;
    for (step, idx) in epoch_batches(train.len(), cfg.batch_size, &mut data_rng).iter().enumerate() {
        let (x, _) = train.batch(idx);
        let v1 = cfg.augment.apply(&x, &mut aug_rng)?;
        let v2 = cfg.augment.apply(&x, &mut aug_rng)?;
        match selfsup_step(&mut ck.cohort, state, &v1, &v2, &cfg.weights, &mut ck.optimizer, lr) {
            Ok(Some(out)) => {
                let k = state.queues[0].len();
                let count = out.report.term_counts.get(TermKind::Icl.name()).copied().unwrap_or(0);
                if count > 0 {
                    stats.icl_sum += out.report.term(TermKind::Icl) / count as f64;
                    stats.icl_steps += 1;
                    stats.negatives = k;
                }
                stats.steps += 1;
                stats.push(out.report);
            }
            Ok(None) => stats.skipped += 1,
            Err(Error::NonFiniteLoss { terms, .. }) => {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step,
                    batch: idx.clone(),
                    terms,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(stats)
}

/// Runs (or continues) training. With `resume`, the checkpoint's config is
/// used except for `epochs`, `metrics_path` and `checkpoint_path`, which come
/// from `config`.
pub fn train(config: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut ck = match resume {
        Some(mut ck) => {
            ck.config.epochs = config.epochs;
            ck.config.metrics_path = config.metrics_path.clone();
            ck.config.checkpoint_path = config.checkpoint_path.clone();
            if ck.config.mode != config.mode {
                return Err(Error::Config("checkpoint was written by a different training mode".into()));
            }
            ck
        }
        None => {
            let (train, _) = config.dataset.load(config.data_dir.as_deref())?;
            fresh_checkpoint(config, &train)?
        }
    };
    let cfg = ck.config.clone();
    let (train, test) = cfg.dataset.load(cfg.data_dir.as_deref())?;
    let sampler = ClassAwareSampler::new(&train.labels);
    if cfg.mode == Mode::Supervised && cfg.contrast == ContrastMode::Batch {
        let needed = cfg.batch_size / 2;
        if sampler.num_eligible_classes() < needed {
            return Err(Error::InsufficientClasses {
                needed,
                available: sampler.num_eligible_classes(),
            });
        }
    }
    while ck.next_epoch < cfg.epochs {
        let epoch = ck.next_epoch;
        let start = Instant::now();
        let lr = cfg.schedule.lr(cfg.lr, epoch, cfg.epochs);
        let (stats, accuracy) = match cfg.mode {
            Mode::Supervised => {
                let s = supervised_epoch(&mut ck, &train, &sampler, epoch, lr)?;
                (s, evaluate_cohort(&ck.cohort, &test)?)
            }
            Mode::Selfsup => (selfsup_epoch(&mut ck, &train, epoch, lr)?, Vec::new()),
        };
        let record = stats.finish(epoch + 1, lr, accuracy, start.elapsed().as_secs_f64());
        log::info!(
            "epoch {} lr {:.4} loss {:.4} acc {:?} mi {:?}",
            record.epoch,
            lr,
            record.loss.total,
            record.accuracy,
            record.mi_lower_bound
        );
        if let Some(path) = &cfg.metrics_path {
            append_metric(path, &record)?;
        }
        ck.metrics.push(record);
        ck.next_epoch += 1;
        if let Some(path) = &cfg.checkpoint_path {
            ck.save(path)?;
        }
    }
    Ok(TrainOutcome {
        cohort: ck.cohort.clone(),
        metrics: ck.metrics.clone(),
        checkpoint: ck,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEvalOptions {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LinearEvalOptions {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

fn standardize(train: &Tensor, test: &Tensor) -> (Tensor, Tensor) {
    let d = train.row_len();
    let n = train.rows() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..train.rows() {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n;
        }
    }
    for i in 0..train.rows() {
        for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for i in 0..t.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / (var[j].sqrt() + 1e-8);
            }
        }
        out
    };
    (apply(train), apply(test))
}

/// Trains a softmax regression on `train_x` (full-batch SGD with momentum)
/// and returns top-1 test accuracy in percent.
pub fn linear_eval_features(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    opts: &LinearEvalOptions,
) -> Result<f64> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.row_len() != test_x.row_len() {
        return Err(Error::Data("feature and label counts disagree".into()));
    }
    let (tr, te) = standardize(train_x, test_x);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let head = Linear::new(&mut store, "probe", tr.row_len(), num_classes, 1.0, &mut rng);
    let mut opt = Sgd::new(&store, 0.9, opts.weight_decay)?;
    for _ in 0..opts.iterations {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let x = g.constant(tr.clone());
        let z = head.forward(&mut g, &p, x)?;
        let loss = cross_entropy(&mut g, z, train_y)?;
        let grads = g.backward(loss)?;
        let grads = p.collect_grads(&store, &grads);
        opt.step(&mut store, &grads, opts.lr)?;
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(te);
    let z = head.forward(&mut g, &p, x)?;
    Ok(top1(g.value(z), test_y))
}

fn encode(encoder: &DeploymentNetwork, data: &Dataset) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(data.len());
    let index: Vec<usize> = (0..data.len()).collect();
    let mut dim = 0;
    for chunk in index.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        let f = encoder.features(&x)?;
        dim = f.row_len();
        rows.extend(f.into_data());
    }
    Tensor::new(&[data.len(), dim], rows)
}

/// Linear evaluation of a frozen encoder's backbone features.
pub fn linear_eval(encoder: &DeploymentNetwork, train: &Dataset, test: &Dataset, opts: &LinearEvalOptions) -> Result<f64> {
    let tr = encode(encoder, train)?;
    let te = encode(encoder, test)?;
    linear_eval_features(&tr, &train.labels, &te, &test.labels, train.num_classes, opts)
}

/// Linear evaluation on features that carry no information about the
/// inputs (i.i.d. standard normal), the chance-level control.
pub fn random_feature_control(train: &Dataset, test: &Dataset, dim: usize, opts: &LinearEvalOptions) -> Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut noise = |n: usize| {
        Tensor::new(&[n, dim], (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    };
    let tr = noise(train.len())?;
    let te = noise(test.len())?;
    linear_eval_features(&tr, &train.labels, &te, &test.labels, train.num_classes, opts)
}

/// Mean and best per-network accuracy of a finished supervised run.
pub fn final_accuracy(metrics: &[MetricRecord]) -> Option<(f64, f64)> {
    let last = metrics.last()?;
    let best = last.accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((last.mean_accuracy?, best))
}
