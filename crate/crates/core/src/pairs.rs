//! Anchor / positive / negative construction for supervised batches, the
//! labeled memory bank, and two-view self-supervised batches.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One anchor, one positive and `K` negatives, as row indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveTuple {
    pub anchor_id: usize,
    pub positive_id: usize,
    pub negative_ids: Vec<usize>,
}

impl ContrastiveTuple {
    pub fn k(&self) -> usize {
        self.negative_ids.len()
    }

    /// Checks the supervised labeling rules against `labels` (indexed by the
    /// tuple's ids): distinct anchor/positive, same-class positive, no
    /// same-class or repeated-anchor negatives.
    pub fn validate_supervised(&self, labels: &[usize]) -> Result<()> {
        let label = |i: usize| {
            labels
                .get(i)
                .copied()
                .ok_or_else(|| Error::Contract(format!("index {i} has no label")))
        };
        if self.anchor_id == self.positive_id {
            return Err(Error::Contract("anchor doubles as its positive".into()));
        }
        let y = label(self.anchor_id)?;
        if label(self.positive_id)? != y {
            return Err(Error::Contract(format!(
                "positive {} is not of anchor class {y}",
                self.positive_id
            )));
        }
        for &n in &self.negative_ids {
            if n == self.anchor_id || n == self.positive_id {
                return Err(Error::Contract(format!("negative {n} repeats anchor or positive")));
            }
            if label(n)? == y {
                return Err(Error::Contract(format!("negative {n} shares anchor class {y}")));
            }
        }
        Ok(())
    }
}

/// Per-class index buckets for drawing class-aware batches.
#[derive(Clone, Debug)]
pub struct ClassAwareSampler {
    /// Classes with at least two samples, with their sample indices.
    eligible: Vec<(usize, Vec<usize>)>,
}

impl ClassAwareSampler {
    pub fn new(labels: &[usize]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        Self {
            eligible: by_class.into_iter().filter(|(_, v)| v.len() >= 2).collect(),
        }
    }

    pub fn num_eligible_classes(&self) -> usize {
        self.eligible.len()
    }

    /// `batch_size / 2` distinct classes, two distinct samples each, laid out
    /// as adjacent pairs.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::param(
                "batch_size",
                format!("class-aware batches need an even size, got {batch_size}"),
            ));
        }
        let classes = batch_size / 2;
        if self.eligible.len() < classes {
            return Err(Error::InsufficientClasses {
                needed: classes,
                available: self.eligible.len(),
            });
        }
        let mut batch = Vec::with_capacity(batch_size);
        for c in index::sample(rng, self.eligible.len(), classes) {
            let members = &self.eligible[c].1;
            for j in index::sample(rng, members.len(), 2) {
                batch.push(members[j]);
            }
        }
        Ok(batch)
    }
}

/// Draws a class-aware batch of sample indices from `dataset_labels`.
pub fn class_aware_batch(dataset_labels: &[usize], batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ClassAwareSampler::new(dataset_labels).sample(batch_size, &mut rng)
}

/// Tuples over batch positions: each sample is an anchor, its same-class
/// partner the positive and every other-class sample a negative (`K = B − 2`
/// for a class-aware batch).
pub fn tuples_from_class_batch(batch_labels: &[usize]) -> Result<Vec<ContrastiveTuple>> {
    let mut tuples = Vec::with_capacity(batch_labels.len());
    for (i, &y) in batch_labels.iter().enumerate() {
        let mates: Vec<usize> = (0..batch_labels.len())
            .filter(|&j| j != i && batch_labels[j] == y)
            .collect();
        let [positive] = mates[..] else {
            return Err(Error::Contract(format!(
                "sample {i} (class {y}) has {} same-class partners, expected exactly 1",
                mates.len()
            )));
        };
        tuples.push(ContrastiveTuple {
            anchor_id: i,
            positive_id: positive,
            negative_ids: (0..batch_labels.len())
                .filter(|&j| batch_labels[j] != y)
                .collect(),
        });
    }
    Ok(tuples)
}

/// Where the negatives of a two-view tuple come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    /// `len` queue rows stored after the view-2 rows in the contrast tensor.
    Queue { len: usize },
    /// The view-2 embeddings of every other instance in the batch.
    OtherInstances,
}

/// Tuples for two augmented views. Anchor `i` indexes view-1 rows; positive
/// and negatives index a contrast tensor laid out as `[view-2 rows; queue]`.
pub fn two_view_tuples(
    view1_ids: &[usize],
    view2_ids: &[usize],
    negatives: NegativeSource,
) -> Result<Vec<ContrastiveTuple>> {
    if view1_ids != view2_ids {
        return Err(Error::Contract(
            "view lists are not aligned by instance".into(),
        ));
    }
    let n = view1_ids.len();
    match negatives {
        NegativeSource::Queue { len: 0 } => {
            return Err(Error::Contract("empty negative queue".into()))
        }
        NegativeSource::OtherInstances if n < 2 => {
            return Err(Error::Contract("need two instances for in-batch negatives".into()))
        }
        _ => {}
    }
    Ok((0..n)
        .map(|i| ContrastiveTuple {
            anchor_id: i,
            positive_id: i,
            negative_ids: match negatives {
                NegativeSource::Queue { len } => (n..n + len).collect(),
                NegativeSource::OtherInstances => (0..n).filter(|&j| j != i).collect(),
            },
        })
        .collect())
}

/// Fixed-capacity FIFO ring of labeled unit embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    embeddings: Vec<f64>,
    labels: Vec<usize>,
    write_cursor: usize,
    filled: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::param("capacity", "memory bank needs capacity and dim > 0"));
        }
        Ok(Self {
            capacity,
            dim,
            embeddings: vec![0.0; capacity * dim],
            labels: vec![0; capacity],
            write_cursor: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.embeddings[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn label(&self, slot: usize) -> usize {
        self.labels[slot]
    }

    /// All slots as a `[capacity × d]` tensor (unfilled slots are zero).
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.capacity, self.dim], self.embeddings.clone()).expect("bank shape")
    }

    /// Writes rows at the cursor, wrapping and overwriting the oldest rows.
    pub fn update(&mut self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        if embeddings.row_len() != self.dim || embeddings.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "bank of dim {} given rows of shape {:?}",
                self.dim,
                embeddings.shape()
            )));
        }
        if embeddings.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} rows but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            let row = embeddings.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("bank row {i} has norm {norm}")));
            }
            let slot = self.write_cursor;
            self.embeddings[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
            self.labels[slot] = y;
            self.write_cursor = (slot + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }

    fn partition(&self, label: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.filled).partition(|&s| self.labels[s] == label)
    }

    /// Whether `sample_indices(label, k, ..)` would succeed.
    pub fn can_sample(&self, label: usize, k: usize) -> bool {
        let (same, other) = self.partition(label);
        !same.is_empty() && other.len() >= k
    }

    /// A uniformly drawn same-label slot and `k` distinct other-label slots.
    pub fn sample_indices<R: Rng + ?Sized>(&self, label: usize, k: usize, rng: &mut R) -> Result<(usize, Vec<usize>)> {
        let (same, other) = self.partition(label);
        if same.is_empty() {
            return Err(Error::Retrieval {
                label,
                detail: "no same-label row in the bank (deficit 1)".into(),
            });
        }
        if other.len() < k {
            return Err(Error::Retrieval {
                label,
                detail: format!(
                    "{} different-label rows for K={k} (deficit {})",
                    other.len(),
                    k - other.len()
                ),
            });
        }
        let positive = same[rng.random_range(0..same.len())];
        let negatives = index::sample(rng, other.len(), k)
            .into_iter()
            .map(|i| other[i])
            .collect();
        Ok((positive, negatives))
    }

    /// Writes the bank as little-endian `u64` capacity, dim, filled followed
    /// by `capacity × dim` row-major `f32` values.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.embeddings.len() * 4);
        for h in [self.capacity, self.dim, self.filled] {
            buf.extend_from_slice(&(h as u64).to_le_bytes());
        }
        for &v in &self.embeddings {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }
}

/// Contents of a bank dump written by [`MemoryBank::write_binary`].
#[derive(Clone, Debug, PartialEq)]
pub struct BankDump {
    pub capacity: usize,
    pub dim: usize,
    pub filled: usize,
    pub rows: Vec<f32>,
}

pub fn read_bank_binary(path: &Path) -> Result<BankDump> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::Data("bank dump shorter than its header".into()));
    }
    let header = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap()) as usize;
    let (capacity, dim, filled) = (header(0), header(1), header(2));
    let body = &bytes[24..];
    if body.len() != capacity * dim * 4 {
        return Err(Error::Data(format!(
            "bank dump body has {} bytes, expected {}",
            body.len(),
            capacity * dim * 4
        )));
    }
    let rows = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(BankDump {
        capacity,
        dim,
        filled,
        rows,
    })
}

/// Draws one positive row and `k` negative rows for `anchor_label`.
pub fn bank_sample(bank: &MemoryBank, anchor_label: usize, k: usize, seed: u64) -> Result<(Vec<f64>, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, negs) = bank.sample_indices(anchor_label, k, &mut rng)?;
    Ok((bank.row(pos).to_vec(), bank.as_tensor().select_rows(&negs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashSet, VecDeque};
    use rand::Rng;

    fn labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    fn audit_batch(batch: &[usize], all_labels: &[usize], batch_size: usize) {
        assert_eq!(batch.len(), batch_size);
        let unique: HashSet<_> = batch.iter().collect();
        assert_eq!(unique.len(), batch_size, "sample repeated in batch");
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in batch {
            *per_class.entry(all_labels[i]).or_default() += 1;
        }
        assert_eq!(per_class.len(), batch_size / 2);
        assert!(per_class.values().all(|&c| c == 2));
    }

    #[test]
    fn batch_of_128_has_64_pairs_and_k_126() {
        let y = labels(100, 5);
        let batch = class_aware_batch(&y, 128, 7).unwrap();
        audit_batch(&batch, &y, 128);
        let batch_labels: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
        let tuples = tuples_from_class_batch(&batch_labels).unwrap();
        assert_eq!(tuples.len(), 128);
        for t in &tuples {
            assert_eq!(t.k(), 126);
            t.validate_supervised(&batch_labels).unwrap();
        }
    }

    #[test]
    fn batch_of_four_on_two_classes() {
        let y = vec![0, 1, 0, 1, 1];
        let batch = class_aware_batch(&y, 4, 3).unwrap();
        audit_batch(&batch, &y, 4);
        let bl: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
        assert!(tuples_from_class_batch(&bl).unwrap().iter().all(|t| t.k() == 2));
    }

    #[test]
    fn sampler_errors() {
        let y = labels(3, 4);
        match class_aware_batch(&y, 8, 0) {
            Err(Error::InsufficientClasses { needed, available }) => {
                assert_eq!((needed, available), (4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(class_aware_batch(&y, 5, 0).is_err());
        // a class with a single sample is not eligible
        assert!(class_aware_batch(&[0, 0, 1], 4, 0).is_err());
        assert_eq!(class_aware_batch(&y, 6, 9).unwrap(), class_aware_batch(&y, 6, 9).unwrap());
    }

    #[test]
    fn tuples_reject_unpaired_samples() {
        assert!(tuples_from_class_batch(&[0, 1, 0, 2]).is_err());
        assert!(tuples_from_class_batch(&[0, 0, 0, 1]).is_err());
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let y = labels(10, 6);
        let sampler = ClassAwareSampler::new(&y);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let b = sampler.sample(8, &mut rng).unwrap();
            for pair in b.chunks(2) {
                counts[y[pair[0]]] += 1;
            }
        }
        // each class is one of the 4 chosen out of 10 with probability 0.4
        let p = 0.4;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "count {c} vs {mean} ± {sd}");
        }
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn bank_ring_semantics() {
        let mut bank = MemoryBank::new(3, 2).unwrap();
        let rows = Tensor::from_rows(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]).unwrap();
        bank.update(&rows, &[0, 1]).unwrap();
        assert_eq!(bank.filled(), 2);
        let more = Tensor::from_rows(&[unit(&[1.0, 1.0]), unit(&[-1.0, 0.0])]).unwrap();
        bank.update(&more, &[2, 3]).unwrap();
        assert_eq!(bank.filled(), 3);
        assert_eq!(bank.write_cursor(), 1);
        // slot 0 (oldest) was overwritten by the fourth row
        assert_eq!(bank.row(0), &[-1.0, 0.0]);
        assert_eq!(bank.label(0), 3);
        assert!(bank.update(&Tensor::zeros(&[1, 3]), &[0]).is_err());
        assert!(bank.update(&Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap(), &[0]).is_err());
    }

    proptest! {
        #[test]
        fn bank_matches_reference_ring(capacity in 1usize..7, writes in prop::collection::vec(1usize..5, 1..8), seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = MemoryBank::new(capacity, 2).unwrap();
            let mut reference: VecDeque<(Vec<f64>, usize)> = VecDeque::new();
            let mut next_label = 0;
            for w in writes {
                let rows: Vec<Vec<f64>> = (0..w).map(|_| {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    vec![a.cos(), a.sin()]
                }).collect();
                let labs: Vec<usize> = (0..w).map(|i| next_label + i).collect();
                next_label += w;
                bank.update(&Tensor::from_rows(&rows).unwrap(), &labs).unwrap();
                for (r, l) in rows.into_iter().zip(labs) {
                    if reference.len() == capacity {
                        reference.pop_front();
                    }
                    reference.push_back((r, l));
                }
            }
            prop_assert_eq!(bank.filled(), reference.len());
            // slot order: oldest entry sits at the cursor once the ring is full
            let start = if bank.filled() == capacity { bank.write_cursor() } else { 0 };
            for (i, (row, label)) in reference.iter().enumerate() {
                let slot = (start + i) % capacity;
                prop_assert_eq!(bank.row(slot), &row[..]);
                prop_assert_eq!(bank.label(slot), *label);
            }
        }
    }

    fn filled_bank(labels: &[usize]) -> MemoryBank {
        let mut bank = MemoryBank::new(labels.len(), 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..labels.len())
            .map(|i| {
                let a = i as f64 * 0.7;
                vec![a.cos(), a.sin()]
            })
            .collect();
        bank.update(&Tensor::from_rows(&rows).unwrap(), labels).unwrap();
        bank
    }

    #[test]
    fn bank_sample_examples() {
        let bank = filled_bank(&[0, 1, 1, 2, 2]);
        let (pos, negs) = bank_sample(&bank, 0, 4, 1).unwrap();
        assert_eq!(pos, bank.row(0));
        // K equals every available negative: a permutation of them
        let mut got: Vec<Vec<u64>> = (0..4).map(|i| negs.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = (1..5).map(|s| bank.row(s).iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);

        assert!(matches!(bank_sample(&bank, 0, 5, 1), Err(Error::Retrieval { .. })));
        assert!(matches!(bank_sample(&bank, 9, 1, 1), Err(Error::Retrieval { .. })));
    }

    #[test]
    fn bank_sampling_respects_labels() {
        let y: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let bank = filled_bank(&y);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for draw in 0..10_000 {
            let label = draw % 6;
            let (pos, negs) = bank.sample_indices(label, 20, &mut rng).unwrap();
            assert_eq!(bank.label(pos), label);
            assert!(negs.iter().all(|&s| bank.label(s) != label));
            let unique: HashSet<_> = negs.iter().collect();
            assert_eq!(unique.len(), 20);
        }
    }

    #[test]
    fn bank_binary_dump_round_trips() {
        let bank = filled_bank(&[0, 1, 2]);
        let mut bigger = MemoryBank::new(5, 2).unwrap();
        bigger.update(&bank.as_tensor(), &[0, 1, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        bigger.write_binary(&path).unwrap();
        let dump = read_bank_binary(&path).unwrap();
        assert_eq!((dump.capacity, dump.dim, dump.filled), (5, 2, 3));
        assert_eq!(dump.rows.len(), 10);
        assert_eq!(dump.rows[2], bank.row(1)[0] as f32);
        assert!(dump.rows[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_view_examples() {
        let t = two_view_tuples(&[7], &[7], NegativeSource::Queue { len: 2 }).unwrap();
        assert_eq!(t, vec![ContrastiveTuple { anchor_id: 0, positive_id: 0, negative_ids: vec![1, 2] }]);
        let ids: Vec<usize> = (10..15).collect();
        let t = two_view_tuples(&ids, &ids, NegativeSource::OtherInstances).unwrap();
        assert_eq!(t.len(), 5);
        for (i, tup) in t.iter().enumerate() {
            assert_eq!(tup.positive_id, i);
            assert!(!tup.negative_ids.contains(&i));
        }
        assert!(two_view_tuples(&[1, 2], &[2, 1], NegativeSource::OtherInstances).is_err());
        assert!(two_view_tuples(&[1], &[1], NegativeSource::Queue { len: 0 }).is_err());
    }
}
