use mcl_core::autograd::Graph;
use mcl_core::cohort::{Architecture, Cohort, CohortSpec, DeploymentNetwork};
use mcl_core::losses::cross_entropy;
use mcl_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inputs(n: usize, shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len: usize = full.iter().product();
    Tensor::new(&full, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn spec(m: usize, arch: Architecture) -> CohortSpec {
    CohortSpec {
        embed_dim: 12,
        ..CohortSpec::new(m, arch, vec![3, 8, 8], 6, 21)
    }
}

#[test]
fn shared_trunk_gradient_flows_only_into_trunk_and_own_branch() {
    let cohort = Cohort::build(spec(3, Architecture::SmallCnn { channels: [4, 6, 8] })).unwrap();
    assert!(cohort.spec().share_trunk);
    let x = inputs(4, &[3, 8, 8], 1);
    let mut g = Graph::new();
    let p = cohort.store().bind(&mut g, true);
    let outs = cohort.forward_all(&mut g, &p, &x).unwrap();
    let loss = cross_entropy(&mut g, outs[0].logits, &[0, 1, 2, 3]).unwrap();
    let grads = g.backward(loss).unwrap();
    let grads = p.collect_grads(cohort.store(), &grads);
    let norm = |ids: Vec<mcl_core::nn::ParamId>| -> f64 {
        ids.iter()
            .flat_map(|id| grads[id.0].data().iter().map(|v| v * v))
            .sum::<f64>()
    };
    assert!(norm(cohort.trunk_params()) > 0.0);
    assert!(norm(cohort.branch(0).stages.iter().flat_map(|s| s.params()).collect()) > 0.0);
    for m in 1..3 {
        assert_eq!(norm(cohort.branch_params(m)), 0.0);
    }
}

#[test]
fn distinct_seeds_give_distinct_initial_embeddings() {
    for arch in [
        Architecture::SmallCnn { channels: [4, 6, 8] },
        Architecture::SmallResNet {
            width: 4,
            blocks_per_stage: 1,
        },
    ] {
        for m in [2, 4] {
            let cohort = Cohort::build(spec(m, arch.clone())).unwrap();
            let outs = cohort.evaluate(&inputs(3, &[3, 8, 8], 2)).unwrap();
            for a in 0..m {
                for b in a + 1..m {
                    let d: f64 = outs[a]
                        .1
                        .data()
                        .iter()
                        .zip(outs[b].1.data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    assert!(d > 0.0, "branches {a} and {b} coincide");
                }
            }
        }
    }
}

#[test]
fn repeated_builds_and_forwards_are_bitwise_reproducible() {
    let s = spec(2, Architecture::SmallCnn { channels: [4, 6, 8] });
    let x = inputs(5, &[3, 8, 8], 3);
    let a = Cohort::build(s.clone()).unwrap().evaluate(&x).unwrap();
    let b = Cohort::build(s).unwrap().evaluate(&x).unwrap();
    for ((za, ea), (zb, eb)) in a.iter().zip(&b) {
        assert!(za.data().iter().zip(zb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(ea.data().iter().zip(eb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn deployment_network_has_no_overhead() {
    let arch = Architecture::SmallResNet {
        width: 4,
        blocks_per_stage: 2,
    };
    let cohort = Cohort::build(spec(4, arch.clone())).unwrap();
    let reference = DeploymentNetwork::reference(arch, vec![3, 8, 8], 6, 99).unwrap();
    let x = inputs(3, &[3, 8, 8], 4);
    let outs = cohort.evaluate(&x).unwrap();
    for m in 0..4 {
        let net = cohort.extract_deployment_network(m).unwrap();
        assert_eq!(net.num_params(), reference.num_params());
        assert_eq!(net.macs().unwrap(), reference.macs().unwrap());
        assert_eq!(net.logits(&x).unwrap(), outs[m].0);
    }
}

#[test]
fn deployment_round_trip_preserves_predictions() {
    let cohort = Cohort::build(spec(2, Architecture::SmallCnn { channels: [4, 6, 8] })).unwrap();
    let net = cohort.extract_deployment_network(1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    net.save(&path).unwrap();
    let back = DeploymentNetwork::load(&path).unwrap();
    let x = inputs(2, &[3, 8, 8], 5);
    assert_eq!(back.logits(&x).unwrap(), net.logits(&x).unwrap());
    assert!(DeploymentNetwork::load(&dir.path().join("missing.json")).is_err());
}

#[test]
fn mlp_cohort_on_vectors() {
    let s = CohortSpec {
        embed_dim: 4,
        ..CohortSpec::new(2, Architecture::Mlp { hidden: vec![10, 8] }, vec![5], 3, 0)
    };
    let cohort = Cohort::build(s).unwrap();
    let outs = cohort.evaluate(&inputs(7, &[5], 6)).unwrap();
    assert_eq!(outs[0].0.shape(), &[7, 3]);
    assert_eq!(outs[1].1.shape(), &[7, 4]);
    assert!(cohort.evaluate(&inputs(7, &[4], 6)).is_err());
}
