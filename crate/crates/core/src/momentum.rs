//! Momentum encoders and per-network negative queues for self-supervised
//! training.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::losses::{build_mcl, report, ContrastSet, LossReport, MclWeights, NetworkEmbeddings};
use crate::nn::ParamStore;
use crate::optim::Sgd;
use crate::pairs::{two_view_tuples, NegativeSource};
use crate::tensor::Tensor;

const UNIT_TOL: f64 = 1e-6;

/// `target ← c·target + (1−c)·online`, elementwise.
pub fn momentum_update(online: &ParamStore, target: &mut ParamStore, coefficient: f64) -> Result<()> {
    check_coefficient(coefficient)?;
    if !online.same_layout(target) {
        return Err(Error::Contract("online and momentum parameters differ in layout".into()));
    }
    let ids: Vec<_> = online.ids().collect();
    for id in ids {
        let src = online.get(id).data();
        for (t, &o) in target.get_mut(id).data_mut().iter_mut().zip(src) {
            *t = coefficient * *t + (1.0 - coefficient) * o;
        }
    }
    Ok(())
}

pub(crate) fn check_coefficient(c: f64) -> Result<()> {
    if (0.0..1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::param("momentum_coefficient", format!("must be in [0, 1), got {c}")))
    }
}

/// Online parameters and their slowly moving copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumPair {
    pub online: ParamStore,
    pub momentum: ParamStore,
    pub coefficient: f64,
}

impl MomentumPair {
    /// Momentum copy starts equal to the online parameters.
    pub fn new(online: ParamStore, coefficient: f64) -> Result<Self> {
        check_coefficient(coefficient)?;
        Ok(Self {
            momentum: online.clone(),
            online,
            coefficient,
        })
    }

    pub fn update(&mut self) -> Result<()> {
        momentum_update(&self.online, &mut self.momentum, self.coefficient)
    }
}

/// FIFO queue of unit-norm embeddings. Once full, every enqueued row evicts
/// the oldest one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
    enqueued: u64,
    dequeued: u64,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::param("queue_size", "capacity and dimension must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
            enqueued: 0,
            dequeued: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() == self.capacity
    }

    /// Total rows ever pushed / evicted.
    pub fn counters(&self) -> (u64, u64) {
        (self.enqueued, self.dequeued)
    }

    /// Appends the rows of `[n × d]`, evicting the oldest when over capacity.
    pub fn enqueue(&mut self, rows: &Tensor) -> Result<()> {
        if rows.shape().len() != 2 || rows.row_len() != self.dim {
            return Err(Error::Shape {
                op: "queue_enqueue",
                expected: vec![0, self.dim],
                actual: rows.shape().to_vec(),
            });
        }
        for i in 0..rows.rows() {
            let r = rows.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Contract(format!("queue row {i} has norm {norm}")));
            }
        }
        for i in 0..rows.rows() {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
                self.dequeued += 1;
            }
            self.rows.push_back(rows.row(i).to_vec());
            self.enqueued += 1;
        }
        Ok(())
    }

    /// Rows oldest first, `[len × d]`.
    pub fn as_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Tensor::new(&[self.rows.len(), self.dim], data).expect("queue rows have fixed width")
    }
}

/// Momentum copy of a cohort's parameters plus one queue per network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfSupState {
    pub momentum: ParamStore,
    pub queues: Vec<NegativeQueue>,
    pub coefficient: f64,
}

impl SelfSupState {
    pub fn new(cohort: &Cohort, queue_size: usize, coefficient: f64) -> Result<Self> {
        check_coefficient(coefficient)?;
        let d = cohort.spec().embed_dim;
        Ok(Self {
            momentum: cohort.store().clone(),
            queues: (0..cohort.networks())
                .map(|_| NegativeQueue::new(queue_size, d))
                .collect::<Result<_>>()?,
            coefficient,
        })
    }

    pub fn queues_full(&self) -> bool {
        self.queues.iter().all(NegativeQueue::is_full)
    }
}

/// Result of one self-supervised step that was not skipped.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Largest gradient magnitude that reached any momentum parameter.
    pub momentum_grad_max: f64,
}

/// One self-supervised update: online anchors on `view1`, momentum
/// positives on `view2`, queue negatives; every network contrasts against
/// its own and every peer's momentum embeddings. While any queue is not yet
/// full the step only enqueues momentum embeddings and returns `None`.
pub fn selfsup_step(
    cohort: &mut Cohort,
    state: &mut SelfSupState,
    view1: &Tensor,
    view2: &Tensor,
    weights: &MclWeights,
    optimizer: &mut Sgd,
    lr: f64,
) -> Result<Option<StepOutcome>> {
    if view1.shape() != view2.shape() {
        return Err(Error::Data(format!(
            "views differ in shape: {:?} vs {:?}",
            view1.shape(),
            view2.shape()
        )));
    }
    if !cohort.store().same_layout(&state.momentum) || state.queues.len() != cohort.networks() {
        return Err(Error::Contract("self-supervised state does not match the cohort".into()));
    }
    let mut g = Graph::new();
    let online = cohort.store().bind(&mut g, true);
    let slow = state.momentum.bind(&mut g, true);
    let keys_out = cohort.forward_all(&mut g, &slow, view2)?;
    let keys: Vec<Tensor> = keys_out.iter().map(|o| g.value(o.embeddings).clone()).collect();

    if !state.queues_full() {
        for (q, k) in state.queues.iter_mut().zip(&keys) {
            q.enqueue(k)?;
        }
        return Ok(None);
    }

    let query_out = cohort.forward_all(&mut g, &online, view1)?;
    let n = view1.rows();
    let ids: Vec<usize> = (0..n).collect();
    let tuples = two_view_tuples(&ids, &ids, NegativeSource::Queue { len: state.queues[0].len() })?;
    let set = ContrastSet::from_tuples(&tuples)?;
    let mut nets = Vec::with_capacity(cohort.networks());
    for (m, out) in query_out.iter().enumerate() {
        let k = g.detach(keys_out[m].embeddings);
        let q = g.constant(state.queues[m].as_tensor());
        nets.push(NetworkEmbeddings {
            anchors: out.embeddings,
            contrast: g.concat_rows(&[k, q])?,
        });
    }
    let mcl = build_mcl(&mut g, &nets, &set, weights, None)?;
    let rep = report(&g, Some(&mcl), &[], weights);
    let total = mcl
        .total
        .ok_or_else(|| Error::param("weights", "self-supervised training needs a nonzero weight"))?;
    if !rep.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            step: 0,
            batch: ids,
            terms: rep.per_term.clone(),
        });
    }
    let grads = g.backward(total)?;
    let momentum_grad_max = slow
        .collect_grads(&state.momentum, &grads)
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let grads = online.collect_grads(cohort.store(), &grads);
    optimizer.step(cohort.store_mut(), &grads, lr)?;
    momentum_update(cohort.store(), &mut state.momentum, state.coefficient)?;
    for (q, k) in state.queues.iter_mut().zip(&keys) {
        q.enqueue(k)?;
    }
    Ok(Some(StepOutcome {
        report: rep,
        momentum_grad_max,
    }))
}
