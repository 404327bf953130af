use mcl_core::cohort::{Architecture, Cohort, CohortSpec};
use mcl_core::embedding::{contrastive_distribution, RowRef};
use mcl_core::losses::{icl_loss, kl_divergence, vcl_loss, MclWeights, TermKind};
use mcl_core::momentum::{selfsup_step, SelfSupState};
use mcl_core::optim::Sgd;
use mcl_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn cohort(m: usize, seed: u64) -> Cohort {
    let spec = CohortSpec {
        embed_dim: 6,
        ..CohortSpec::new(m, Architecture::Mlp { hidden: vec![10, 8] }, vec![5], 3, seed)
    };
    Cohort::build(spec).unwrap()
}

fn batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(&[n, 5], (0..n * 5).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

#[test]
fn queue_fills_after_ceil_capacity_over_batch_steps() {
    let mut c = cohort(2, 0);
    let mut state = SelfSupState::new(&c, 10, 0.99).unwrap();
    let mut opt = Sgd::new(c.store(), 0.9, 0.0).unwrap();
    let w = MclWeights::self_supervised();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut skipped = 0;
    for step in 0..6 {
        let x = batch(&mut rng, 4);
        let out = selfsup_step(&mut c, &mut state, &x, &x.map(|v| v * 0.9), &w, &mut opt, 0.05).unwrap();
        if out.is_none() {
            skipped += 1;
        }
        let before_full = step + 1 < 3;
        assert_eq!(state.queues_full(), !before_full);
        if state.queues_full() {
            for q in &state.queues {
                assert_eq!(q.len(), 10);
                let (enq, deq) = q.counters();
                assert_eq!(enq - deq, 10);
            }
        }
    }
    // ceil(10 / 4) = 3 warmup steps
    assert_eq!(skipped, 3);
}

#[test]
fn term_counts_and_identical_peers() {
    let mut c = cohort(2, 3);
    c.copy_branch(0, 1);
    let mut state = SelfSupState::new(&c, 4, 0.5).unwrap();
    let mut opt = Sgd::new(c.store(), 0.9, 0.0).unwrap();
    let w = MclWeights::self_supervised();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = batch(&mut rng, 4);
    assert!(selfsup_step(&mut c, &mut state, &x, &x, &w, &mut opt, 0.0).unwrap().is_none());
    let x = batch(&mut rng, 4);
    let out = selfsup_step(&mut c, &mut state, &x, &x.map(|v| v + 0.1), &w, &mut opt, 0.0)
        .unwrap()
        .unwrap();
    for k in [TermKind::Vcl, TermKind::Icl, TermKind::SoftVcl, TermKind::SoftIcl] {
        assert_eq!(out.report.term_counts[k.name()], 2);
    }
    assert!(out.report.term(TermKind::SoftVcl).abs() < 1e-12);
    assert!(out.report.term(TermKind::SoftIcl).abs() < 1e-12);
    assert!((out.report.term(TermKind::Icl) - out.report.term(TermKind::Vcl)).abs() < 1e-12);
    assert_eq!(out.momentum_grad_max, 0.0);
}

#[test]
fn single_step_matches_unrolled_reference() {
    let mut c = cohort(2, 7);
    let coefficient = 0.9;
    let mut state = SelfSupState::new(&c, 6, coefficient).unwrap();
    let mut opt = Sgd::new(c.store(), 0.9, 0.0).unwrap();
    let w = MclWeights::self_supervised();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2 {
        let x = batch(&mut rng, 3);
        selfsup_step(&mut c, &mut state, &x, &x.map(|v| -v), &w, &mut opt, 0.05).unwrap();
    }
    let v1 = batch(&mut rng, 3);
    let v2 = v1.map(|v| v * 1.2 - 0.1);

    let queries = c.evaluate(&v1).unwrap();
    let mut slow = c.clone();
    *slow.store_mut() = state.momentum.clone();
    let keys = slow.evaluate(&v2).unwrap();
    let queues: Vec<Tensor> = state.queues.iter().map(|q| q.as_tensor()).collect();
    let contrast = |b: usize, i: usize| -> Tensor {
        let mut rows = vec![keys[b].1.row(i).to_vec()];
        rows.extend((0..queues[b].rows()).map(|j| queues[b].row(j).to_vec()));
        Tensor::from_rows(&rows).unwrap()
    };
    let mut expected = 0.0;
    let n = 3;
    for a in 0..2 {
        for b in 0..2 {
            let mut hard = 0.0;
            let mut soft = 0.0;
            for i in 0..n {
                let q = RowRef {
                    network_id: a,
                    vector: queries[a].1.row(i),
                };
                let pos = RowRef {
                    network_id: b,
                    vector: keys[b].1.row(i),
                };
                let negs: Vec<RowRef<'_>> = (0..queues[b].rows())
                    .map(|j| RowRef {
                        network_id: b,
                        vector: queues[b].row(j),
                    })
                    .collect();
                hard += if a == b {
                    vcl_loss(q, pos, &negs, w.tau_hard).unwrap()
                } else {
                    icl_loss(q, pos, &negs, w.tau_hard).unwrap()
                };
                if a != b {
                    let own = contrastive_distribution(queries[a].1.row(i), &contrast(a, i), w.tau_soft).unwrap();
                    let peer = contrastive_distribution(queries[b].1.row(i), &contrast(b, i), w.tau_soft).unwrap();
                    soft += w.gamma * kl_divergence(&peer, &own).unwrap();
                    let pred = contrastive_distribution(queries[a].1.row(i), &contrast(b, i), w.tau_soft).unwrap();
                    let target = contrastive_distribution(queries[b].1.row(i), &contrast(a, i), w.tau_soft).unwrap();
                    soft += w.lambda * kl_divergence(&target, &pred).unwrap();
                }
            }
            let weight = if a == b { w.alpha } else { w.beta };
            expected += weight * hard / n as f64 + soft / n as f64;
        }
    }

    let online_before = c.store().clone();
    let momentum_before = state.momentum.clone();
    let out = selfsup_step(&mut c, &mut state, &v1, &v2, &w, &mut opt, 0.05).unwrap().unwrap();
    assert!((out.report.total - expected).abs() < 1e-5, "{} vs {expected}", out.report.total);
    assert_ne!(&online_before, c.store());
    for id in c.store().ids() {
        let after = state.momentum.get(id).data();
        let old = momentum_before.get(id).data();
        let online = c.store().get(id).data();
        for k in 0..after.len() {
            let want = coefficient * old[k] + (1.0 - coefficient) * online[k];
            assert!((after[k] - want).abs() < 1e-12);
        }
    }
    let newest = state.queues[1].as_tensor();
    let last = newest.rows() - 1;
    assert_eq!(newest.row(last), keys[1].1.row(2));
}

#[test]
fn mismatched_state_is_rejected() {
    let mut c = cohort(2, 0);
    let other = cohort(3, 0);
    let mut state = SelfSupState::new(&other, 4, 0.9).unwrap();
    let mut opt = Sgd::new(c.store(), 0.9, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = batch(&mut rng, 2);
    assert!(selfsup_step(&mut c, &mut state, &x, &x, &MclWeights::self_supervised(), &mut opt, 0.1).is_err());
    assert!(SelfSupState::new(&c, 4, 1.0).is_err());
}
