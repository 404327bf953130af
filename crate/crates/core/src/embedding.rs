//! Normalization, similarity and contrastive-distribution primitives shared by
//! every loss.

use serde::{Deserialize, Serialize};

use crate::autograd::dot;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unit-normalized embeddings for a batch, tagged with the producing network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    vectors: Tensor,
    network_id: usize,
    sample_ids: Vec<usize>,
}

impl EmbeddingBatch {
    /// Normalizes `vectors: [n × d]` row-wise and tags them.
    pub fn new(vectors: Tensor, network_id: usize, sample_ids: Vec<usize>) -> Result<Self> {
        let (n, d) = match vectors.shape() {
            &[n, d] => (n, d),
            other => {
                return Err(Error::Shape {
                    op: "embedding_batch",
                    expected: vec![0, 0],
                    actual: other.to_vec(),
                })
            }
        };
        if n == 0 || d == 0 {
            return Err(Error::Data(format!("empty embedding batch [{n} × {d}]")));
        }
        if sample_ids.len() != n {
            return Err(Error::Data(format!(
                "{} sample ids for {n} embeddings",
                sample_ids.len()
            )));
        }
        Ok(Self {
            vectors: l2_normalize(&vectors)?,
            network_id,
            sample_ids,
        })
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn network_id(&self) -> usize {
        self.network_id
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.row_len()
    }

    pub fn row(&self, i: usize) -> RowRef<'_> {
        RowRef {
            network_id: self.network_id,
            vector: self.vectors.row(i),
        }
    }
}

/// One embedding row together with the network that produced it.
#[derive(Clone, Copy, Debug)]
pub struct RowRef<'a> {
    pub network_id: usize,
    pub vector: &'a [f64],
}

/// Softmax over `(K+1)` similarity logits; index 0 is the positive candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub temperature: f64,
    pub anchor_network: Option<usize>,
    pub contrast_network: Option<usize>,
}

impl ContrastiveDistribution {
    pub fn from_logits(logits: Vec<f64>, temperature: f64) -> Self {
        let log_probs = log_softmax(&logits);
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Self {
            probs,
            log_probs,
            logits,
            temperature,
            anchor_network: None,
            contrast_network: None,
        }
    }

    pub fn with_networks(mut self, anchor: usize, contrast: usize) -> Self {
        self.anchor_network = Some(anchor);
        self.contrast_network = Some(contrast);
        self
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| v - lse).collect()
}

/// Row-wise L2 normalization. A zero row is an error naming its index.
pub fn l2_normalize(vectors: &Tensor) -> Result<Tensor> {
    let d = vectors.row_len();
    let mut out = vectors.clone();
    for (i, row) in out.data_mut().chunks_mut(d.max(1)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateRow { row: i });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::param(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ))
    }
}

/// `(anchor · contrast_k) / τ` for each contrast row.
pub fn similarity_logits(anchor: &[f64], contrast: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if contrast.row_len() != anchor.len() {
        return Err(Error::Shape {
            op: "similarity_logits",
            expected: vec![contrast.rows(), anchor.len()],
            actual: contrast.shape().to_vec(),
        });
    }
    Ok((0..contrast.rows())
        .map(|k| dot(anchor, contrast.row(k)) / temperature)
        .collect())
}

pub fn contrastive_distribution(
    anchor: &[f64],
    contrast: &Tensor,
    temperature: f64,
) -> Result<ContrastiveDistribution> {
    let logits = similarity_logits(anchor, contrast, temperature)?;
    Ok(ContrastiveDistribution::from_logits(logits, temperature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_three_four_five() {
        let t = Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let n = l2_normalize(&t).unwrap();
        assert!(close(n.data()[0], 0.6, 1e-15) && close(n.data()[1], 0.8, 1e-15));
        assert_eq!(n.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let n = l2_normalize(&Tensor::new(&[5, 8], data).unwrap()).unwrap();
        for i in 0..5 {
            let norm = n.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(close(norm, 1.0, 1e-6));
        }
    }

    #[test]
    fn zero_row_names_index() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize(&t), Err(Error::DegenerateRow { row: 1 })));
        assert!(EmbeddingBatch::new(t, 0, vec![0, 1]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(similarity_logits(&[1.0, 0.0], &c, 0.1).unwrap(), vec![10.0, 0.0]);
        let c = Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        assert_eq!(similarity_logits(&[1.0, 0.0], &c, 0.5).unwrap(), vec![-2.0]);
        assert!(similarity_logits(&[1.0, 0.0], &c, 0.0).is_err());
        assert!(similarity_logits(&[1.0, 0.0], &c, -1.0).is_err());
    }

    #[test]
    fn similarity_matches_brute_force_dots() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let unit = l2_normalize(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let anchor = unit.row(0).to_vec();
        let logits = similarity_logits(&anchor, &unit, 0.07).unwrap();
        for (k, l) in logits.iter().enumerate() {
            let mut brute = 0.0;
            for j in 0..5 {
                brute += anchor[j] * unit.row(k)[j];
            }
            assert!(close(*l, brute / 0.07, 1e-12));
            assert!(l.abs() <= 1.0 / 0.07 + 1e-12);
        }
    }

    #[test]
    fn distribution_examples() {
        let same = Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
        let p = contrastive_distribution(&[1.0, 0.0], &same, 0.1).unwrap();
        assert!(p.probs.iter().all(|v| close(*v, 0.25, 1e-15)));

        // positive equals anchor, two orthogonal negatives
        let c = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let p = contrastive_distribution(&[1.0, 0.0, 0.0], &c, 0.1).unwrap();
        let e10 = 10f64.exp();
        assert!(close(p.probs[0], e10 / (e10 + 2.0), 1e-15));

        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let p = contrastive_distribution(&[1.0, 0.0], &c, 0.3).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn low_temperature_does_not_overflow() {
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let p = contrastive_distribution(&[1.0, 0.0], &c, 1e-3).unwrap();
        assert!(p.probs.iter().all(|v| v.is_finite()));
        assert!(close(p.probs.iter().sum::<f64>(), 1.0, 1e-12));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(logits in prop::collection::vec(-20.0f64..20.0, 2..12), shift in -50.0f64..50.0) {
            let a = ContrastiveDistribution::from_logits(logits.clone(), 1.0);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = ContrastiveDistribution::from_logits(shifted, 1.0);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn lower_temperature_sharpens(raw in prop::collection::vec(-1.0f64..1.0, 2..10), t1 in 0.2f64..1.0, f in 1.1f64..2.0) {
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assume!(max - min > 1e-3);
            let at = |t: f64| {
                let d = ContrastiveDistribution::from_logits(raw.iter().map(|v| v / t).collect(), t);
                d.probs.iter().copied().fold(0.0, f64::max)
            };
            prop_assert!(at(t1 / f) > at(t1));
        }

        #[test]
        fn distributions_are_normalized(seed in 0u64..1000, k in 1usize..20, tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..=k).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let unit = l2_normalize(&Tensor::from_rows(&rows).unwrap()).unwrap();
            let anchor: Vec<f64> = unit.row(0).to_vec();
            let p = contrastive_distribution(&anchor, &unit, tau).unwrap();
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(p.probs.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
