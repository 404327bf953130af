//! Contrastive loss terms for a cohort of networks.
//!
//! Two evaluation paths exist:
//!
//! * per-tuple scalar functions ([`vcl_loss`], [`icl_loss`], [`kl_divergence`],
//!   [`soft_vcl_loss`], [`soft_icl_loss`]) computed directly with log-sum-exp;
//! * batched graph builders ([`build_mcl`], [`cross_entropy`]) that record the
//!   same quantities on an autodiff [`Graph`] for training.
//!
//! Hard terms are averaged over anchors. Soft terms are plain sums over ordered
//! network pairs of per-anchor-averaged KL divergences. Soft targets are
//! always detached.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::embedding::{
    check_temperature, log_sum_exp, similarity_logits, ContrastiveDistribution, EmbeddingBatch,
    RowRef,
};
use crate::error::{Error, Result};
use crate::pairs::ContrastiveTuple;
use crate::tensor::Tensor;

/// Lower clamp applied to target probabilities inside the log of a KL term.
pub const KL_TARGET_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MclWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau_hard: f64,
    pub tau_soft: f64,
}

impl MclWeights {
    /// `α = β = 0.1`, `γ = λ = 1`, `τ = 0.1`, soft `τ = 0.3`.
    pub fn supervised() -> Self {
        Self::new(0.1, 0.1, 1.0, 1.0, 0.1)
    }

    /// `α = β = γ = λ = 1`, `τ = 0.07`, soft `τ = 0.21`.
    pub fn self_supervised() -> Self {
        Self::new(1.0, 1.0, 1.0, 1.0, 0.07)
    }

    /// Weights with the soft temperature defaulted to three times the hard one.
    pub fn new(alpha: f64, beta: f64, gamma: f64, lambda: f64, tau_hard: f64) -> Self {
        Self {
            alpha,
            beta,
            gamma,
            lambda,
            tau_hard,
            tau_soft: 3.0 * tau_hard,
        }
    }

    pub fn zero(tau_hard: f64) -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, tau_hard)
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 && self.lambda == 0.0
    }

    pub fn weight(&self, kind: TermKind) -> f64 {
        match kind {
            TermKind::Vcl => self.alpha,
            TermKind::Icl => self.beta,
            TermKind::SoftVcl => self.gamma,
            TermKind::SoftIcl => self.lambda,
            TermKind::Ce => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("weight must be >= 0, got {v}")));
            }
        }
        check_temperature(self.tau_hard)?;
        check_temperature(self.tau_soft)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Vcl,
    Icl,
    SoftVcl,
    SoftIcl,
    Ce,
}

impl TermKind {
    pub const ALL: [TermKind; 5] = [
        TermKind::Vcl,
        TermKind::Icl,
        TermKind::SoftVcl,
        TermKind::SoftIcl,
        TermKind::Ce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TermKind::Vcl => "vcl",
            TermKind::Icl => "icl",
            TermKind::SoftVcl => "soft_vcl",
            TermKind::SoftIcl => "soft_icl",
            TermKind::Ce => "ce",
        }
    }
}

/// Loss values for one evaluation. `per_term` holds unweighted sums per term
/// kind under the keys `vcl`, `icl`, `soft_vcl`, `soft_icl` and `ce`;
/// `per_network` attributes each weighted term to the network whose
/// parameters it trains (anchor / prediction side).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    #[serde(flatten)]
    pub per_term: BTreeMap<String, f64>,
    pub per_network: BTreeMap<usize, f64>,
    pub term_counts: BTreeMap<String, usize>,
}

impl LossReport {
    pub fn term(&self, kind: TermKind) -> f64 {
        self.per_term.get(kind.name()).copied().unwrap_or(0.0)
    }

    /// `α·vcl + β·icl + γ·soft_vcl + λ·soft_icl + ce`.
    pub fn weighted_sum(&self, weights: &MclWeights) -> f64 {
        TermKind::ALL
            .iter()
            .map(|&k| weights.weight(k) * self.term(k))
            .sum()
    }

    /// Running mean helper for epoch aggregation.
    pub fn accumulate(&mut self, other: &LossReport, count: usize) {
        let w = 1.0 / count as f64;
        self.total += other.total * w;
        for (k, v) in &other.per_term {
            *self.per_term.entry(k.clone()).or_insert(0.0) += v * w;
        }
        for (k, v) in &other.per_network {
            *self.per_network.entry(*k).or_insert(0.0) += v * w;
        }
        for (k, v) in &other.term_counts {
            self.term_counts.insert(k.clone(), *v);
        }
    }

    fn empty() -> Self {
        let mut r = LossReport::default();
        for k in TermKind::ALL {
            r.per_term.insert(k.name().to_string(), 0.0);
            r.term_counts.insert(k.name().to_string(), 0);
        }
        r
    }
}

// ---------------------------------------------------------------------------
// Per-tuple scalar path
// ---------------------------------------------------------------------------

fn stack(rows: &[RowRef<'_>]) -> Result<Tensor> {
    let d = rows[0].vector.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.vector.len() != d {
            return Err(Error::Contract("embedding rows differ in dimension".into()));
        }
        data.extend_from_slice(r.vector);
    }
    Tensor::new(&[rows.len(), d], data)
}

fn info_nce(anchor: RowRef<'_>, positive: RowRef<'_>, negatives: &[RowRef<'_>], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Contract("at least one negative is required".into()));
    }
    let mut rows = Vec::with_capacity(negatives.len() + 1);
    rows.push(positive);
    rows.extend_from_slice(negatives);
    let logits = similarity_logits(anchor.vector, &stack(&rows)?, tau)?;
    Ok(log_sum_exp(&logits) - logits[0])
}

/// InfoNCE with anchor, positive and negatives all from one network.
pub fn vcl_loss(anchor: RowRef<'_>, positive: RowRef<'_>, negatives: &[RowRef<'_>], tau: f64) -> Result<f64> {
    let m = anchor.network_id;
    if positive.network_id != m || negatives.iter().any(|r| r.network_id != m) {
        return Err(Error::Contract(format!(
            "vanilla contrastive loss needs every embedding from network {m}"
        )));
    }
    info_nce(anchor, positive, negatives, tau)
}

/// InfoNCE with the anchor from network `a` and all contrast embeddings from
/// a distinct network `b`.
pub fn icl_loss(anchor: RowRef<'_>, positive: RowRef<'_>, negatives: &[RowRef<'_>], tau: f64) -> Result<f64> {
    let (a, b) = (anchor.network_id, positive.network_id);
    if a == b {
        return Err(Error::Contract(format!(
            "interactive contrastive loss needs distinct networks, got {a} twice"
        )));
    }
    if negatives.iter().any(|r| r.network_id != b) {
        return Err(Error::Contract(format!(
            "interactive contrastive loss needs every contrast embedding from network {b}"
        )));
    }
    info_nce(anchor, positive, negatives, tau)
}

/// `KL(target ‖ pred)`. Only `pred` is treated as trainable by callers.
pub fn kl_divergence(target: &ContrastiveDistribution, pred: &ContrastiveDistribution) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::Contract(format!(
            "KL between distributions of length {} and {}",
            target.len(),
            pred.len()
        )));
    }
    let floor = KL_TARGET_FLOOR.ln();
    Ok(target
        .probs
        .iter()
        .zip(&target.log_probs)
        .zip(&pred.log_probs)
        .map(|((t, lt), lp)| t * (lt.max(floor) - lp))
        .sum())
}

fn check_cohort(len: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::Contract(format!(
            "soft and interactive losses need at least two networks, got {len}"
        )));
    }
    Ok(())
}

/// `Σ_m Σ_{l≠m} KL(p_l ‖ p_m)` for one anchor, with `p[m]` from network `m`.
pub fn soft_vcl_loss(p: &[ContrastiveDistribution]) -> Result<f64> {
    check_cohort(p.len())?;
    let mut total = 0.0;
    for m in 0..p.len() {
        for l in (0..p.len()).filter(|&l| l != m) {
            total += kl_divergence(&p[l], &p[m])?;
        }
    }
    Ok(total)
}

/// `Σ_a Σ_{b≠a} KL(q_{b→a} ‖ q_{a→b})` for one anchor; `q[&(a, b)]` is the
/// distribution of network `a`'s anchor over network `b`'s candidates.
pub fn soft_icl_loss(q: &BTreeMap<(usize, usize), ContrastiveDistribution>) -> Result<f64> {
    let mut nets: Vec<usize> = q.keys().flat_map(|&(a, b)| [a, b]).collect();
    nets.sort_unstable();
    nets.dedup();
    check_cohort(nets.len())?;
    let mut total = 0.0;
    for &a in &nets {
        for &b in nets.iter().filter(|&&b| b != a) {
            let missing = || Error::Contract(format!("missing distribution for pair ({a}, {b})"));
            let pred = q.get(&(a, b)).ok_or_else(missing)?;
            let target = q.get(&(b, a)).ok_or_else(missing)?;
            total += kl_divergence(target, pred)?;
        }
    }
    Ok(total)
}

fn tuple_rows<'a>(batch: &'a EmbeddingBatch, t: &ContrastiveTuple) -> Result<(RowRef<'a>, Vec<RowRef<'a>>)> {
    let n = batch.len();
    let bad = std::iter::once(t.anchor_id)
        .chain(std::iter::once(t.positive_id))
        .chain(t.negative_ids.iter().copied())
        .find(|&i| i >= n);
    if let Some(i) = bad {
        return Err(Error::Contract(format!("tuple index {i} outside batch of {n}")));
    }
    Ok((
        batch.row(t.positive_id),
        t.negative_ids.iter().map(|&i| batch.row(i)).collect(),
    ))
}

fn check_networks(batches: &[EmbeddingBatch]) -> Result<()> {
    for (i, b) in batches.iter().enumerate() {
        if batches[..i].iter().any(|o| o.network_id() == b.network_id()) {
            return Err(Error::Contract(format!(
                "network {} appears twice in the cohort",
                b.network_id()
            )));
        }
        if b.len() != batches[0].len() || b.dim() != batches[0].dim() {
            return Err(Error::Contract("cohort batches are not aligned".into()));
        }
    }
    Ok(())
}

/// `Σ_m mean_tuples vcl_loss` over aligned per-network batches.
pub fn vcl_cohort_loss(batches: &[EmbeddingBatch], tuples: &[ContrastiveTuple], tau: f64) -> Result<f64> {
    if batches.is_empty() || tuples.is_empty() {
        return Err(Error::Contract("empty cohort or tuple list".into()));
    }
    check_networks(batches)?;
    let mut total = 0.0;
    for batch in batches {
        let mut sum = 0.0;
        for t in tuples {
            let (pos, negs) = tuple_rows(batch, t)?;
            sum += vcl_loss(batch.row(t.anchor_id), pos, &negs, tau)?;
        }
        total += sum / tuples.len() as f64;
    }
    Ok(total)
}

/// Sum over all ordered pairs `(a, b)`, `a ≠ b`, of mean `icl_loss(a → b)`.
pub fn icl_cohort_loss(batches: &[EmbeddingBatch], tuples: &[ContrastiveTuple], tau: f64) -> Result<f64> {
    check_cohort(batches.len())?;
    check_networks(batches)?;
    if tuples.is_empty() {
        return Err(Error::Contract("empty tuple list".into()));
    }
    let mut total = 0.0;
    for a in batches {
        for b in batches.iter().filter(|b| b.network_id() != a.network_id()) {
            let mut sum = 0.0;
            for t in tuples {
                let (pos, negs) = tuple_rows(b, t)?;
                sum += icl_loss(a.row(t.anchor_id), pos, &negs, tau)?;
            }
            total += sum / tuples.len() as f64;
        }
    }
    Ok(total)
}

/// `log(K) − E[L_icl]`; may be negative.
pub fn mi_lower_bound(k: usize, mean_icl_loss: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::param("K", "need at least one negative"));
    }
    Ok((k as f64).ln() - mean_icl_loss)
}

// ---------------------------------------------------------------------------
// Batched graph path
// ---------------------------------------------------------------------------

/// Which rows act as anchors and which contrast rows each anchor scores.
///
/// Anchor `i` is row `anchor_rows[i]` of a network's anchor tensor; its
/// candidates are rows `candidates[i·group .. (i+1)·group]` of that network's
/// contrast tensor, positive first. `group = K + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastSet {
    pub anchor_rows: Vec<usize>,
    pub candidates: Vec<usize>,
    pub group: usize,
}

impl ContrastSet {
    /// Builds a set where anchors and contrast rows live in the same tensor.
    pub fn from_tuples(tuples: &[ContrastiveTuple]) -> Result<Self> {
        let first = tuples
            .first()
            .ok_or_else(|| Error::Contract("no contrastive tuples".into()))?;
        let k = first.negative_ids.len();
        if k == 0 {
            return Err(Error::Contract("tuples need at least one negative".into()));
        }
        let mut anchor_rows = Vec::with_capacity(tuples.len());
        let mut candidates = Vec::with_capacity(tuples.len() * (k + 1));
        for t in tuples {
            if t.negative_ids.len() != k {
                return Err(Error::Contract(format!(
                    "tuples mix K={k} and K={}",
                    t.negative_ids.len()
                )));
            }
            anchor_rows.push(t.anchor_id);
            candidates.push(t.positive_id);
            candidates.extend_from_slice(&t.negative_ids);
        }
        Ok(Self {
            anchor_rows,
            candidates,
            group: k + 1,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_rows.len()
    }

    pub fn num_negatives(&self) -> usize {
        self.group - 1
    }
}

/// Graph inputs for one network: anchor embeddings and the tensor its
/// candidates are gathered from. Both must be unit-normalized `[· × d]`.
#[derive(Clone, Copy, Debug)]
pub struct NetworkEmbeddings {
    pub anchors: NodeId,
    pub contrast: NodeId,
}

/// One recorded term: `kind` for networks `(first, second)`.
///
/// * `Vcl`: `(m, m)`
/// * `Icl`: `(a, b)` for `a → b`
/// * `SoftVcl`: `(l, m)` for `KL(p_l ‖ p_m)`, trains `m`
/// * `SoftIcl`: `(a, b)` for `KL(q_{b→a} ‖ q_{a→b})`, trains `a`
/// * `Ce`: `(m, m)`
#[derive(Clone, Copy, Debug)]
pub struct TermNode {
    pub kind: TermKind,
    pub pair: (usize, usize),
    pub node: NodeId,
}

impl TermNode {
    /// Network whose parameters this term trains.
    pub fn trained_network(&self) -> usize {
        match self.kind {
            TermKind::SoftVcl => self.pair.1,
            _ => self.pair.0,
        }
    }
}

/// Detached log-probability targets of the soft terms, `[n × (K+1)]` per
/// network pair, keyed by `(anchor network, contrast network)`.
#[derive(Clone, Debug, Default)]
pub struct SoftTargets {
    pub log_probs: BTreeMap<(usize, usize), Tensor>,
}

#[derive(Debug)]
pub struct MclGraph {
    /// Weighted sum of every term with a nonzero weight; `None` when all
    /// weights are zero.
    pub total: Option<NodeId>,
    pub terms: Vec<TermNode>,
    /// Targets used by the soft terms (for replaying the same objective).
    pub targets: SoftTargets,
    pub weights: MclWeights,
    pub num_negatives: usize,
}

fn contrast_log_probs(
    g: &mut Graph,
    anchors: NodeId,
    gathered: NodeId,
    group: usize,
    tau: f64,
) -> Result<NodeId> {
    let dots = g.row_dots(anchors, gathered, group)?;
    let logits = g.scale(dots, 1.0 / tau);
    g.log_softmax(logits)
}

/// `−mean_i logp[i, 0]`.
fn hard_term(g: &mut Graph, log_probs: NodeId) -> Result<NodeId> {
    let n = g.value(log_probs).rows();
    let pos = g.pick_per_row(log_probs, vec![0; n])?;
    let m = g.mean(pos);
    Ok(g.scale(m, -1.0))
}

/// `mean_i Σ_k t_ik (log t_ik − logp_ik)` with constant targets.
fn kl_term(g: &mut Graph, target_log_probs: &Tensor, pred: NodeId) -> Result<NodeId> {
    let n = target_log_probs.rows() as f64;
    let floor = KL_TARGET_FLOOR.ln();
    let probs = target_log_probs.map(f64::exp);
    let entropy_part: f64 = probs
        .data()
        .iter()
        .zip(target_log_probs.data())
        .map(|(t, lt)| t * lt.max(floor))
        .sum::<f64>()
        / n;
    let t = g.constant(probs);
    let cross = g.mul(t, pred)?;
    let s = g.sum(cross);
    let s = g.scale(s, -1.0 / n);
    Ok(g.add_scalar(s, entropy_part))
}

/// Records every MCL term for a cohort on `g`.
///
/// `nets[m]` supplies network `m`'s anchors and contrast rows. With
/// `frozen = None` the soft targets are the detached current distributions;
/// passing the `targets` of an earlier call replays that objective with the
/// targets held fixed.
pub fn build_mcl(
    g: &mut Graph,
    nets: &[NetworkEmbeddings],
    set: &ContrastSet,
    weights: &MclWeights,
    frozen: Option<&SoftTargets>,
) -> Result<MclGraph> {
    weights.validate()?;
    check_cohort(nets.len())?;
    if set.group < 2 {
        return Err(Error::Contract("need at least one negative per anchor".into()));
    }
    let m_count = nets.len();
    let mut anchors = Vec::with_capacity(m_count);
    let mut gathered = Vec::with_capacity(m_count);
    for net in nets {
        let a = if set.anchor_rows.iter().enumerate().all(|(i, &r)| i == r)
            && g.value(net.anchors).rows() == set.anchor_rows.len()
        {
            net.anchors
        } else {
            g.gather_rows(net.anchors, set.anchor_rows.clone())?
        };
        anchors.push(a);
        gathered.push(g.gather_rows(net.contrast, set.candidates.clone())?);
    }

    let mut terms = Vec::new();
    let mut soft_lp = BTreeMap::new();
    for a in 0..m_count {
        for b in 0..m_count {
            let hard = contrast_log_probs(g, anchors[a], gathered[b], set.group, weights.tau_hard)?;
            let node = hard_term(g, hard)?;
            let kind = if a == b { TermKind::Vcl } else { TermKind::Icl };
            terms.push(TermNode {
                kind,
                pair: (a, b),
                node,
            });
            let soft = contrast_log_probs(g, anchors[a], gathered[b], set.group, weights.tau_soft)?;
            soft_lp.insert((a, b), soft);
        }
    }

    let targets = match frozen {
        Some(t) => t.clone(),
        None => SoftTargets {
            log_probs: soft_lp
                .iter()
                .map(|(&k, &node)| (k, g.value(node).clone()))
                .collect(),
        },
    };
    let target = |key: (usize, usize)| {
        targets
            .log_probs
            .get(&key)
            .ok_or_else(|| Error::Contract(format!("no frozen soft target for {key:?}")))
    };
    for m in 0..m_count {
        for l in (0..m_count).filter(|&l| l != m) {
            let node = kl_term(g, target((l, l))?, soft_lp[&(m, m)])?;
            terms.push(TermNode {
                kind: TermKind::SoftVcl,
                pair: (l, m),
                node,
            });
        }
    }
    for a in 0..m_count {
        for b in (0..m_count).filter(|&b| b != a) {
            let node = kl_term(g, target((b, a))?, soft_lp[&(a, b)])?;
            terms.push(TermNode {
                kind: TermKind::SoftIcl,
                pair: (a, b),
                node,
            });
        }
    }

    let mut weighted = Vec::new();
    for t in &terms {
        let w = weights.weight(t.kind);
        if w != 0.0 {
            weighted.push(if w == 1.0 { t.node } else { g.scale(t.node, w) });
        }
    }
    let total = if weighted.is_empty() {
        None
    } else {
        Some(g.add_all(&weighted)?)
    };
    Ok(MclGraph {
        total,
        terms,
        targets,
        weights: *weights,
        num_negatives: set.num_negatives(),
    })
}

/// Mean cross-entropy of `logits: [n × C]` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let classes = g.value(logits).row_len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} outside {classes} classes")));
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.pick_per_row(lp, labels.to_vec())?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Per-network cross-entropy nodes plus the combined objective
/// `Σ_m CE_m + L_mcl`.
pub struct SupervisedGraph {
    pub total: NodeId,
    pub ce: Vec<TermNode>,
}

pub fn build_supervised(
    g: &mut Graph,
    logits: &[NodeId],
    labels: &[usize],
    mcl: Option<&MclGraph>,
) -> Result<SupervisedGraph> {
    let mut ce = Vec::with_capacity(logits.len());
    for (m, &z) in logits.iter().enumerate() {
        ce.push(TermNode {
            kind: TermKind::Ce,
            pair: (m, m),
            node: cross_entropy(g, z, labels)?,
        });
    }
    let mut parts: Vec<NodeId> = ce.iter().map(|t| t.node).collect();
    if let Some(total) = mcl.and_then(|m| m.total) {
        parts.push(total);
    }
    let total = g.add_all(&parts)?;
    Ok(SupervisedGraph { total, ce })
}

/// Summarizes recorded terms into a [`LossReport`].
pub fn report(g: &Graph, mcl: Option<&MclGraph>, ce: &[TermNode], weights: &MclWeights) -> LossReport {
    let mut r = LossReport::empty();
    let all = mcl
        .map(|m| m.terms.as_slice())
        .unwrap_or_default()
        .iter()
        .chain(ce);
    for t in all {
        let v = g.value(t.node).item();
        let w = weights.weight(t.kind);
        *r.per_term.get_mut(t.kind.name()).unwrap() += v;
        *r.term_counts.get_mut(t.kind.name()).unwrap() += 1;
        *r.per_network.entry(t.trained_network()).or_insert(0.0) += w * v;
        r.total += w * v;
    }
    r
}

/// Value-only MCL objective over aligned per-network batches whose tuples
/// index rows of the batches.
pub fn mcl_loss(batches: &[EmbeddingBatch], tuples: &[ContrastiveTuple], weights: &MclWeights) -> Result<LossReport> {
    check_networks(batches)?;
    let set = ContrastSet::from_tuples(tuples)?;
    let mut g = Graph::new();
    let nets: Vec<NetworkEmbeddings> = batches
        .iter()
        .map(|b| {
            let n = g.constant(b.vectors().clone());
            NetworkEmbeddings {
                anchors: n,
                contrast: n,
            }
        })
        .collect();
    let mcl = build_mcl(&mut g, &nets, &set, weights, None)?;
    Ok(report(&g, Some(&mcl), &[], weights))
}

/// `Σ_m CE(softmax(z_m), y) + mcl.total` over a batch (CE averaged per network).
pub fn supervised_total_loss(logits: &[Tensor], labels: &[usize], mcl: &LossReport) -> Result<f64> {
    let mut g = Graph::new();
    let mut total = mcl.total;
    for z in logits {
        if z.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for {} logit rows",
                labels.len(),
                z.rows()
            )));
        }
        let node = g.constant(z.clone());
        let ce = cross_entropy(&mut g, node, labels)?;
        total += g.value(ce).item();
    }
    Ok(total)
}
