//! Independent oracles for the loss math: central finite differences, a
//! naive softmax, a correlated-Gaussian mutual-information experiment and
//! structural audits of the training graph.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::cohort::{Architecture, Cohort, CohortSpec};
use crate::embedding::{contrastive_distribution, l2_normalize, ContrastiveDistribution, EmbeddingBatch, RowRef};
use crate::error::{Error, Result};
use crate::losses::{
    build_mcl, build_supervised, cross_entropy, icl_cohort_loss, icl_loss, kl_divergence, mcl_loss,
    supervised_total_loss, vcl_cohort_loss, ContrastSet, LossReport, MclWeights, NetworkEmbeddings, TermKind,
};
use crate::momentum::{selfsup_step, SelfSupState};
use crate::optim::Sgd;
use crate::pairs::{tuples_from_class_batch, ContrastiveTuple};
use crate::tensor::Tensor;
use crate::train::supervised_gradients;

pub const FD_EPSILON: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-7;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences `(L(x + ε e_i) − L(x − ε e_i)) / 2ε` for every
/// coordinate of `x`.
pub fn finite_difference_gradient(
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", "must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let up = loss(&probe)?;
        probe[i] = x[i] - epsilon;
        let down = loss(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!("loss not finite around coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Softmax of `anchor · contrast_k / τ` by direct exponentiation and
/// summation, without any stabilizing shift.
pub fn brute_force_distribution(anchor: &[f64], contrast: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if contrast.row_len() != anchor.len() || contrast.rows() == 0 {
        return Err(Error::Shape {
            op: "brute_force_distribution",
            expected: vec![contrast.rows().max(1), anchor.len()],
            actual: contrast.shape().to_vec(),
        });
    }
    let mut exps = Vec::with_capacity(contrast.rows());
    for k in 0..contrast.rows() {
        let mut s = 0.0;
        for (a, c) in anchor.iter().zip(contrast.row(k)) {
            s += a * c;
        }
        exps.push((s / tau).exp());
    }
    let mut total = 0.0;
    for e in &exps {
        total += e;
    }
    if !total.is_finite() || total == 0.0 {
        return Err(Error::Oracle("naive softmax overflowed; use the stabilized path".into()));
    }
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckReport {
    pub op: String,
    pub max_relative_error: f64,
    pub params_checked: usize,
    pub trials: usize,
    pub threshold: f64,
    pub passed: bool,
}

/// A random cohort problem: raw (unnormalized) embeddings per network,
/// tuples over their rows, logits and labels.
struct Problem {
    networks: usize,
    n: usize,
    d: usize,
    tuples: Vec<ContrastiveTuple>,
    classes: usize,
    labels: Vec<usize>,
}

impl Problem {
    fn random(rng: &mut ChaCha8Rng, networks: usize) -> (Self, Vec<f64>) {
        let d = rng.random_range(4..=16);
        let k = rng.random_range(1..=8);
        let n = k + 2 + rng.random_range(0..3);
        let tuples = (0..n)
            .map(|i| {
                let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let picks = rand::seq::index::sample(rng, others.len(), k + 1);
                let mut picked = picks.iter().map(|p| others[p]);
                ContrastiveTuple {
                    anchor_id: i,
                    positive_id: picked.next().unwrap(),
                    negative_ids: picked.collect(),
                }
            })
            .collect();
        let classes = 5;
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let len = networks * n * d + networks * n * classes;
        let x = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        (
            Self {
                networks,
                n,
                d,
                tuples,
                classes,
                labels,
            },
            x,
        )
    }

    fn emb_len(&self) -> usize {
        self.networks * self.n * self.d
    }

    fn raw(&self, x: &[f64], m: usize) -> Tensor {
        let s = m * self.n * self.d;
        Tensor::new(&[self.n, self.d], x[s..s + self.n * self.d].to_vec()).unwrap()
    }

    fn logits(&self, x: &[f64], m: usize) -> Tensor {
        let per = self.n * self.classes;
        let s = self.emb_len() + m * per;
        Tensor::new(&[self.n, self.classes], x[s..s + per].to_vec()).unwrap()
    }

    fn batches(&self, x: &[f64]) -> Result<Vec<EmbeddingBatch>> {
        (0..self.networks)
            .map(|m| EmbeddingBatch::new(self.raw(x, m), m, (0..self.n).collect()))
            .collect()
    }
}

/// Contrastive distribution of network `a`'s anchor over network `b`'s
/// candidates for one tuple.
fn pair_distribution(
    batches: &[EmbeddingBatch],
    a: usize,
    b: usize,
    t: &ContrastiveTuple,
    tau: f64,
) -> Result<ContrastiveDistribution> {
    let rows: Vec<Vec<f64>> = std::iter::once(t.positive_id)
        .chain(t.negative_ids.iter().copied())
        .map(|i| batches[b].row(i).vector.to_vec())
        .collect();
    contrastive_distribution(batches[a].row(t.anchor_id).vector, &Tensor::from_rows(&rows)?, tau)
}

/// Target distributions for the soft terms, keyed by `(anchor network,
/// contrast network)`, one per tuple.
type FrozenScalar = BTreeMap<(usize, usize), Vec<ContrastiveDistribution>>;

fn freeze(batches: &[EmbeddingBatch], tuples: &[ContrastiveTuple], tau: f64) -> Result<FrozenScalar> {
    let mut out = BTreeMap::new();
    for a in 0..batches.len() {
        for b in 0..batches.len() {
            out.insert(
                (a, b),
                tuples
                    .iter()
                    .map(|t| pair_distribution(batches, a, b, t, tau))
                    .collect::<Result<_>>()?,
            );
        }
    }
    Ok(out)
}

/// Per-anchor-averaged soft losses with fixed targets, via the scalar path.
fn soft_scalar(
    batches: &[EmbeddingBatch],
    tuples: &[ContrastiveTuple],
    frozen: &FrozenScalar,
    kind: TermKind,
    tau: f64,
) -> Result<f64> {
    let m_count = batches.len();
    let mut total = 0.0;
    for a in 0..m_count {
        for b in (0..m_count).filter(|&b| b != a) {
            let mut sum = 0.0;
            for (i, t) in tuples.iter().enumerate() {
                sum += match kind {
                    // KL(p_b ‖ p_a): network a's own distribution mimics peer b's
                    TermKind::SoftVcl => kl_divergence(&frozen[&(b, b)][i], &pair_distribution(batches, a, a, t, tau)?)?,
                    _ => kl_divergence(&frozen[&(b, a)][i], &pair_distribution(batches, a, b, t, tau)?)?,
                };
            }
            total += sum / tuples.len() as f64;
        }
    }
    Ok(total)
}

fn scalar_mcl(
    batches: &[EmbeddingBatch],
    tuples: &[ContrastiveTuple],
    frozen: &FrozenScalar,
    w: &MclWeights,
) -> Result<f64> {
    let mut total = 0.0;
    if w.alpha != 0.0 {
        total += w.alpha * vcl_cohort_loss(batches, tuples, w.tau_hard)?;
    }
    if w.beta != 0.0 {
        total += w.beta * icl_cohort_loss(batches, tuples, w.tau_hard)?;
    }
    if w.gamma != 0.0 {
        total += w.gamma * soft_scalar(batches, tuples, frozen, TermKind::SoftVcl, w.tau_soft)?;
    }
    if w.lambda != 0.0 {
        total += w.lambda * soft_scalar(batches, tuples, frozen, TermKind::SoftIcl, w.tau_soft)?;
    }
    Ok(total)
}

/// Analytic gradient from the graph path: raw embeddings (and logits when
/// `with_ce`) are variables, embeddings are normalized on the graph.
fn graph_gradient(p: &Problem, x: &[f64], w: &MclWeights, with_ce: bool) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut raw = Vec::new();
    let mut nets = Vec::new();
    for m in 0..p.networks {
        let v = g.variable(p.raw(x, m));
        raw.push(v);
        let e = g.l2_normalize(v)?;
        nets.push(NetworkEmbeddings {
            anchors: e,
            contrast: e,
        });
    }
    let set = ContrastSet::from_tuples(&p.tuples)?;
    let mcl = build_mcl(&mut g, &nets, &set, w, None)?;
    let mut logit_nodes = Vec::new();
    let total = if with_ce {
        for m in 0..p.networks {
            logit_nodes.push(g.variable(p.logits(x, m)));
        }
        build_supervised(&mut g, &logit_nodes, &p.labels, Some(&mcl))?.total
    } else {
        mcl.total.ok_or_else(|| Error::Oracle("objective has no terms".into()))?
    };
    let grads = g.backward(total)?;
    let mut out = Vec::with_capacity(x.len());
    for node in raw.iter().chain(&logit_nodes) {
        match grads.get(*node) {
            Some(t) => out.extend_from_slice(t.data()),
            None => out.extend(std::iter::repeat(0.0).take(g.value(*node).len())),
        }
    }
    Ok(out)
}

/// Ops covered by [`gradient_check`].
pub const GRADIENT_OPS: [&str; 6] = [
    "vcl_loss",
    "icl_loss",
    "soft_vcl_loss",
    "soft_icl_loss",
    "mcl_loss",
    "supervised_total_loss",
];

/// Finite-difference check of one op over `trials` random problems
/// (`d ≤ 16`, `K ≤ 8`, alternating `M = 2` and `M = 3`). Soft targets are
/// held at their values for the unperturbed input.
pub fn gradient_check(op: &str, trials: usize, seed: u64) -> Result<GradientCheckReport> {
    let base = MclWeights::supervised();
    let only = |a: f64, b: f64, c: f64, l: f64| MclWeights {
        alpha: a,
        beta: b,
        gamma: c,
        lambda: l,
        ..base
    };
    let (weights, with_ce) = match op {
        "vcl_loss" => (only(1.0, 0.0, 0.0, 0.0), false),
        "icl_loss" => (only(0.0, 1.0, 0.0, 0.0), false),
        "soft_vcl_loss" => (only(0.0, 0.0, 1.0, 0.0), false),
        "soft_icl_loss" => (only(0.0, 0.0, 0.0, 1.0), false),
        "mcl_loss" => (base, false),
        "supervised_total_loss" => (base, true),
        _ => return Err(Error::Oracle(format!("unknown op `{op}`"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for trial in 0..trials {
        let (p, x) = Problem::random(&mut rng, 2 + trial % 2);
        let analytic = graph_gradient(&p, &x, &weights, with_ce)?;
        let frozen = freeze(&p.batches(&x)?, &p.tuples, weights.tau_soft)?;
        let objective = |y: &[f64]| -> Result<f64> {
            let batches = p.batches(y)?;
            let mcl = scalar_mcl(&batches, &p.tuples, &frozen, &weights)?;
            if with_ce {
                let logits: Vec<Tensor> = (0..p.networks).map(|m| p.logits(y, m)).collect();
                let report = LossReport {
                    total: mcl,
                    ..LossReport::default()
                };
                supervised_total_loss(&logits, &p.labels, &report)
            } else {
                Ok(mcl)
            }
        };
        let len = if with_ce { x.len() } else { p.emb_len() };
        let numeric = finite_difference_gradient(
            |y| {
                let mut full = x.clone();
                full[..len].copy_from_slice(y);
                objective(&full)
            },
            &x[..len],
            FD_EPSILON,
        )?;
        for (a, n) in analytic[..len].iter().zip(&numeric) {
            max_err = max_err.max(relative_error(*a, *n));
        }
        checked += len;
    }
    Ok(GradientCheckReport {
        op: op.to_string(),
        max_relative_error: max_err,
        params_checked: checked,
        trials,
        threshold: GRADIENT_TOLERANCE,
        passed: max_err < GRADIENT_TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub tuples: usize,
    pub max_abs_diff: f64,
    pub passed: bool,
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let raw = Tensor::new(&[n, d], (0..n * d).map(|_| StandardNormal.sample(rng)).collect()).unwrap();
    l2_normalize(&raw).expect("gaussian rows are nonzero")
}

/// Stabilized distribution vs the naive oracle on random unit tuples with
/// `τ ∈ [0.05, 1]`, `d ≤ 16`, `K ≤ 64`.
pub fn oracle_agreement(tuples: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff: f64 = 0.0;
    for _ in 0..tuples {
        let d = rng.random_range(2..=16);
        let k = rng.random_range(1..=64);
        let tau = rng.random_range(0.05..=1.0);
        let anchor = random_unit_rows(&mut rng, 1, d);
        let contrast = random_unit_rows(&mut rng, k + 1, d);
        let main = contrastive_distribution(anchor.row(0), &contrast, tau)?;
        let naive = brute_force_distribution(anchor.row(0), &contrast, tau)?;
        for (a, b) in main.probs.iter().zip(&naive) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    Ok(OracleReport {
        tuples,
        max_abs_diff: max_diff,
        passed: max_diff <= ORACLE_TOLERANCE,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiExperiment {
    pub dim: usize,
    pub rho: f64,
    pub k: usize,
    pub n_samples: usize,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub dim: usize,
    pub rho: f64,
    pub k: usize,
    pub true_mi: f64,
    /// `log K − mean ICL loss`.
    pub bound: f64,
    /// Standard error of `bound`.
    pub sigma: f64,
    pub log_k: f64,
    pub passed: bool,
}

impl MiExperiment {
    /// Pairs `x ~ N(0, I)`, `y = ρx + √(1−ρ²)ε` stand in for two networks'
    /// embeddings of one input; `K` negatives are fresh marginal draws of
    /// `y`. All vectors are projected to the unit sphere before scoring.
    pub fn run(&self) -> Result<MiEstimate> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::param("rho", format!("|rho| must be < 1, got {}", self.rho)));
        }
        if self.dim == 0 || self.k == 0 || self.n_samples < 2 {
            return Err(Error::param("mi_experiment", "dim, K >= 1 and at least 2 samples"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = (1.0 - self.rho * self.rho).sqrt();
        let mut losses = Vec::with_capacity(self.n_samples);
        for _ in 0..self.n_samples {
            let gx: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let gy: Vec<f64> = gx
                .iter()
                .map(|v| self.rho * v + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let pair = l2_normalize(&Tensor::from_rows(&[gx, gy])?)?;
            let negs = random_unit_rows(&mut rng, self.k, self.dim);
            let anchor = RowRef {
                network_id: 0,
                vector: pair.row(0),
            };
            let positive = RowRef {
                network_id: 1,
                vector: pair.row(1),
            };
            let negatives: Vec<RowRef<'_>> = (0..self.k)
                .map(|j| RowRef {
                    network_id: 1,
                    vector: negs.row(j),
                })
                .collect();
            losses.push(icl_loss(anchor, positive, &negatives, self.tau)?);
        }
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
        let sigma = (var / n).sqrt();
        let log_k = (self.k as f64).ln();
        let bound = log_k - mean;
        let true_mi = -0.5 * (1.0 - self.rho * self.rho).ln() * self.dim as f64;
        Ok(MiEstimate {
            dim: self.dim,
            rho: self.rho,
            k: self.k,
            true_mi,
            bound,
            sigma,
            log_k,
            passed: bound <= true_mi + 3.0 * sigma && bound <= log_k,
        })
    }
}

/// Gradient magnitudes that reached stopped paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopGradientReport {
    /// Largest gradient on any input used only by a soft term's target.
    pub soft_target_grad_max: f64,
    pub soft_terms_checked: usize,
    /// Largest gradient on any momentum-encoder parameter.
    pub momentum_grad_max: f64,
    pub momentum_steps_checked: usize,
    pub passed: bool,
}

fn max_abs(t: Option<&Tensor>) -> f64 {
    t.map_or(0.0, |t| t.data().iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Audits both stop-gradient paths: soft-loss targets (three networks with
/// separate anchor and contrast inputs, so target-only inputs are
/// identifiable) and the momentum encoders of a short self-supervised run.
pub fn stop_gradient_audit(seed: u64) -> Result<StopGradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, x) = Problem::random(&mut rng, 3);
    let mut g = Graph::new();
    let mut anchors = Vec::new();
    let mut contrasts = Vec::new();
    let mut nets = Vec::new();
    for m in 0..3 {
        let a = g.variable(p.raw(&x, m));
        let c = g.variable(p.raw(&x, m).map(|v| v * 1.1 + 0.05));
        anchors.push(a);
        contrasts.push(c);
        let (an, cn) = (g.l2_normalize(a)?, g.l2_normalize(c)?);
        nets.push(NetworkEmbeddings {
            anchors: an,
            contrast: cn,
        });
    }
    let set = ContrastSet::from_tuples(&p.tuples)?;
    let mcl = build_mcl(&mut g, &nets, &set, &MclWeights::new(1.0, 1.0, 1.0, 1.0, 0.1), None)?;
    let mut soft_max: f64 = 0.0;
    let mut checked = 0;
    for t in &mcl.terms {
        let grads = g.backward(t.node)?;
        let (target_only, pred) = match t.kind {
            // target p_l uses (anchors_l, contrast_l); prediction p_m
            TermKind::SoftVcl => (vec![anchors[t.pair.0], contrasts[t.pair.0]], vec![anchors[t.pair.1], contrasts[t.pair.1]]),
            // target q_{b→a} uses anchors_b and contrast_a
            TermKind::SoftIcl => (vec![anchors[t.pair.1], contrasts[t.pair.0]], vec![anchors[t.pair.0], contrasts[t.pair.1]]),
            _ => continue,
        };
        for node in target_only {
            soft_max = soft_max.max(max_abs(grads.get(node)));
        }
        if pred.iter().all(|&n| max_abs(grads.get(n)) == 0.0) {
            return Err(Error::Oracle(format!("soft term {:?} trains nothing", t.pair)));
        }
        checked += 1;
    }

    let spec = CohortSpec {
        embed_dim: 8,
        ..CohortSpec::new(2, Architecture::Mlp { hidden: vec![12] }, vec![6], 3, seed)
    };
    let mut cohort = Cohort::build(spec)?;
    let mut state = SelfSupState::new(&cohort, 8, 0.9)?;
    let mut opt = Sgd::new(cohort.store(), 0.9, 0.0)?;
    let weights = MclWeights::self_supervised();
    let mut mom_max: f64 = 0.0;
    let mut steps = 0;
    for _ in 0..6 {
        let raw = Tensor::new(&[4, 6], (0..24).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        let v2 = raw.map(|v| v * 0.9 + 0.1);
        if let Some(out) = selfsup_step(&mut cohort, &mut state, &raw, &v2, &weights, &mut opt, 0.1)? {
            mom_max = mom_max.max(out.momentum_grad_max);
            steps += 1;
        }
    }
    Ok(StopGradientReport {
        soft_target_grad_max: soft_max,
        soft_terms_checked: checked,
        momentum_grad_max: mom_max,
        momentum_steps_checked: steps,
        passed: soft_max == 0.0 && mom_max == 0.0 && checked > 0 && steps > 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegenerateReport {
    /// Largest `|mean ICL(a→b) − mean VCL(a)|`.
    pub icl_vcl_gap: f64,
    pub soft_vcl: f64,
    pub soft_icl: f64,
    pub passed: bool,
}

/// Cohorts whose branches are bit-identical copies: ICL must equal VCL and
/// both soft losses must vanish. Checked for `M = 2` and `M = 3`.
pub fn degenerate_cohort_check(seed: u64) -> Result<DegenerateReport> {
    let mut gap: f64 = 0.0;
    let mut soft_vcl: f64 = 0.0;
    let mut soft_icl: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in [2, 3] {
        let spec = CohortSpec {
            embed_dim: 16,
            ..CohortSpec::new(m, Architecture::SmallCnn { channels: [4, 4, 8] }, vec![3, 8, 8], 4, seed + m as u64)
        };
        let mut cohort = Cohort::build(spec)?;
        for k in 1..m {
            cohort.copy_branch(0, k);
        }
        let x = Tensor::new(&[8, 3, 8, 8], (0..8 * 192).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let batches: Vec<EmbeddingBatch> = cohort
            .evaluate(&x)?
            .into_iter()
            .enumerate()
            .map(|(k, (_, e))| EmbeddingBatch::new(e, k, (0..8).collect()))
            .collect::<Result<_>>()?;
        let tuples = tuples_from_class_batch(&labels)?;
        let rep = mcl_loss(&batches, &tuples, &MclWeights::supervised())?;
        let mean = |k: TermKind| rep.term(k) / rep.term_counts[k.name()] as f64;
        gap = gap.max((mean(TermKind::Icl) - mean(TermKind::Vcl)).abs());
        soft_vcl = soft_vcl.max(rep.term(TermKind::SoftVcl).abs());
        soft_icl = soft_icl.max(rep.term(TermKind::SoftIcl).abs());
        for a in 0..m {
            for b in (0..m).filter(|&b| b != a) {
                let pair = [batches[a].clone(), batches[b].clone()];
                let per_pair = icl_cohort_loss(&pair, &tuples, 0.1)? / 2.0;
                let vcl = vcl_cohort_loss(&pair[..1], &tuples, 0.1)?;
                gap = gap.max((per_pair - vcl).abs());
            }
        }
    }
    Ok(DegenerateReport {
        icl_vcl_gap: gap,
        soft_vcl,
        soft_icl,
        passed: gap <= 1e-6 && soft_vcl <= 1e-9 && soft_icl <= 1e-9,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightZeroReport {
    pub steps: usize,
    pub parameters_compared: usize,
    pub mismatches: usize,
    pub passed: bool,
}

/// With every MCL weight at zero, compares per-step cohort gradients with
/// the gradients of each network's cross-entropy alone, bit for bit, along
/// a short SGD trajectory.
pub fn weight_zero_check(steps: usize, seed: u64) -> Result<WeightZeroReport> {
    let spec = CohortSpec {
        embed_dim: 8,
        ..CohortSpec::new(2, Architecture::SmallCnn { channels: [3, 4, 6] }, vec![2, 8, 8], 4, seed)
    };
    let mut cohort = Cohort::build(spec)?;
    let mut opt = Sgd::new(cohort.store(), 0.9, 5e-4)?;
    let zero = MclWeights::zero(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let mut compared = 0;
    let mut mismatches = 0;
    for _ in 0..steps {
        let x = Tensor::new(&[8, 2, 8, 8], (0..8 * 128).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        let (joint, _) = supervised_gradients(&cohort, &x, &labels, &zero)?;
        for m in 0..cohort.networks() {
            let mut g = Graph::new();
            let p = cohort.store().bind(&mut g, true);
            let outs = cohort.forward_all(&mut g, &p, &x)?;
            let ce = cross_entropy(&mut g, outs[m].logits, &labels)?;
            let grads = g.backward(ce)?;
            let solo = p.collect_grads(cohort.store(), &grads);
            for id in cohort.branch_params(m) {
                compared += 1;
                let same = joint[id.0]
                    .data()
                    .iter()
                    .zip(solo[id.0].data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    mismatches += 1;
                }
            }
        }
        opt.step(cohort.store_mut(), &joint, 0.05)?;
    }
    Ok(WeightZeroReport {
        steps,
        parameters_compared: compared,
        mismatches,
        passed: mismatches == 0 && compared > 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub gradient_trials: usize,
    pub oracle_tuples: usize,
    pub mi_samples: usize,
    pub mi_dim: usize,
    pub mi_tau: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            gradient_trials: 20,
            oracle_tuples: 1000,
            mi_samples: 4000,
            mi_dim: 4,
            mi_tau: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub gradient_checks: Vec<GradientCheckReport>,
    pub oracle: OracleReport,
    pub mi: Vec<MiEstimate>,
    pub stop_gradient: StopGradientReport,
    pub degenerate: DegenerateReport,
    pub weight_zero: WeightZeroReport,
    pub passed: bool,
}

/// MI experiments for `ρ ∈ {0, 0.5, 0.9}` and `K ∈ {8, 64, 512}`.
pub fn mi_sweep(opts: &SuiteOptions) -> Result<Vec<MiEstimate>> {
    let mut out = Vec::new();
    for (i, rho) in [0.0, 0.5, 0.9].into_iter().enumerate() {
        for (j, k) in [8, 64, 512].into_iter().enumerate() {
            out.push(
                MiExperiment {
                    dim: opts.mi_dim,
                    rho,
                    k,
                    n_samples: opts.mi_samples,
                    tau: opts.mi_tau,
                    seed: opts.seed.wrapping_add((i * 3 + j) as u64),
                }
                .run()?,
            );
        }
    }
    Ok(out)
}

pub fn run_suite(opts: &SuiteOptions) -> Result<VerificationReport> {
    let gradient_checks = GRADIENT_OPS
        .iter()
        .enumerate()
        .map(|(i, op)| gradient_check(op, opts.gradient_trials, opts.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let oracle = oracle_agreement(opts.oracle_tuples, opts.seed)?;
    let mi = mi_sweep(opts)?;
    let stop_gradient = stop_gradient_audit(opts.seed)?;
    let degenerate = degenerate_cohort_check(opts.seed)?;
    let weight_zero = weight_zero_check(3, opts.seed)?;
    let passed = gradient_checks.iter().all(|r| r.passed)
        && oracle.passed
        && mi.iter().all(|m| m.passed)
        && stop_gradient.passed
        && degenerate.passed
        && weight_zero.passed;
    Ok(VerificationReport {
        gradient_checks,
        oracle,
        mi,
        stop_gradient,
        degenerate,
        weight_zero,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let g = finite_difference_gradient(|x| Ok(x.iter().map(|v| v * v).sum()), &[1.0, 2.0], FD_EPSILON).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| Ok(3.0), &[1.0, 2.0], FD_EPSILON).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_is_oracle_error() {
        let r = finite_difference_gradient(|x| Ok(1.0 / (x[0] - 1e-4)), &[0.0], FD_EPSILON);
        assert!(matches!(r, Err(Error::Oracle(_))));
        assert!(finite_difference_gradient(|_| Ok(0.0), &[0.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn brute_force_examples() {
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 1.0]]).unwrap();
        let p = brute_force_distribution(&[1.0, 0.0], &c, 0.1).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let c = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, -0.8]]).unwrap();
        assert_eq!(brute_force_distribution(&[1.0, 0.0], &c, 0.2).unwrap(), vec![0.5, 0.5]);
        let c = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(brute_force_distribution(&[1.0, 0.0], &c, 1e-3), Err(Error::Oracle(_))));
    }

    #[test]
    fn vcl_single_tuple_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let raw: Vec<f64> = (0..6 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let tuple = ContrastiveTuple {
            anchor_id: 0,
            positive_id: 1,
            negative_ids: vec![2, 3, 4, 5],
        };
        let f = |x: &[f64]| -> Result<f64> {
            let b = EmbeddingBatch::new(Tensor::new(&[6, d], x.to_vec())?, 0, (0..6).collect())?;
            vcl_cohort_loss(&[b], std::slice::from_ref(&tuple), 0.1)
        };
        let numeric = finite_difference_gradient(f, &raw, FD_EPSILON).unwrap();
        let mut g = Graph::new();
        let v = g.variable(Tensor::new(&[6, d], raw.clone()).unwrap());
        let e = g.l2_normalize(v).unwrap();
        let set = ContrastSet::from_tuples(std::slice::from_ref(&tuple)).unwrap();
        let dots = {
            let picked = g.gather_rows(e, set.candidates.clone()).unwrap();
            let a = g.gather_rows(e, vec![0]).unwrap();
            g.row_dots(a, picked, set.group).unwrap()
        };
        let logits = g.scale(dots, 10.0);
        let lp = g.log_softmax(logits).unwrap();
        let pos = g.pick_per_row(lp, vec![0]).unwrap();
        let loss = g.scale(pos, -1.0);
        let loss = g.sum(loss);
        let analytic = g.backward(loss).unwrap().take(v).unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn mi_rejects_unit_correlation() {
        let e = MiExperiment {
            dim: 2,
            rho: 1.0,
            k: 8,
            n_samples: 10,
            tau: 0.2,
            seed: 0,
        };
        assert!(e.run().is_err());
    }
}
