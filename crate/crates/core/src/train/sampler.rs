//! Per-epoch batch orders.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// A uniform permutation cut into consecutive batches.
    Shuffle,
    /// Every batch draws an equal quota from each class, so a batch of at
    /// least `2 * classes` sources holds two or more sources per class while
    /// the classes last.
    Balanced,
}

/// Index batches covering every row once.
pub fn epoch_batches<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    batch_size: usize,
    sampler: Sampler,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    match sampler {
        Sampler::Shuffle => {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(rng);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        Sampler::Balanced => {
            let mut queues = vec![Vec::new(); num_classes];
            for (i, &y) in labels.iter().enumerate() {
                queues[y].push(i);
            }
            for q in queues.iter_mut() {
                q.shuffle(rng);
            }
            let present = queues.iter().filter(|q| !q.is_empty()).count().max(1);
            let quota = (batch_size / present).max(1);
            let mut remaining = labels.len();
            let mut out = Vec::new();
            let mut classes: Vec<usize> = (0..num_classes).collect();
            while remaining > 0 {
                classes.shuffle(rng);
                let mut batch = Vec::with_capacity(batch_size);
                for &c in &classes {
                    let take = quota.min(queues[c].len()).min(batch_size - batch.len());
                    let at = queues[c].len() - take;
                    batch.extend(queues[c].drain(at..));
                }
                // Top up from the fullest classes.
                while batch.len() < batch_size {
                    let Some(c) = (0..num_classes).filter(|&c| !queues[c].is_empty()).max_by_key(|&c| (queues[c].len(), std::cmp::Reverse(c))) else {
                        break;
                    };
                    batch.push(queues[c].pop().expect("non-empty"));
                }
                remaining -= batch.len();
                out.push(batch);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn covers_once(batches: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn balanced_batches_hold_two_per_class() {
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = epoch_batches(&labels, 10, 40, Sampler::Balanced, &mut rng);
        covers_once(&batches, 200);
        for b in &batches {
            assert_eq!(b.len(), 40);
            for c in 0..10 {
                assert!(b.iter().filter(|&&i| labels[i] == c).count() >= 2);
            }
        }
    }

    #[test]
    fn shuffle_covers_every_row() {
        let labels = vec![0; 37];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = epoch_batches(&labels, 1, 8, Sampler::Shuffle, &mut rng);
        assert_eq!(b.len(), 5);
        covers_once(&b, 37);
    }

    #[test]
    fn uneven_classes_still_covered() {
        let labels: Vec<usize> = (0..53).map(|i| if i < 40 { 0 } else { 1 + i % 2 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        covers_once(&epoch_batches(&labels, 3, 16, Sampler::Balanced, &mut rng), 53);
    }
}
