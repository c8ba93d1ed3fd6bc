use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset};

/// Disjoint example indices per client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    /// Examples past the shard grid that no client received.
    pub dropped: usize,
}

impl Partition {
    pub fn label_histograms(&self, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    pub fn distinct_labels(&self, labels: &[usize], classes: usize) -> Vec<usize> {
        self.label_histograms(labels, classes)
            .iter()
            .map(|h| h.iter().filter(|&&c| c > 0).count())
            .collect()
    }
}

/// Pathological non-IID split: keep the first `shards·shard_size` indices,
/// stable-sort them by label, cut into equal contiguous shards and deal
/// `shards_per_client` shuffled shards to every client.
pub fn shard_noniid(
    dataset: &Dataset,
    n_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    let shards = n_clients * shards_per_client;
    if shards == 0 || dataset.len() < shards {
        return Err(DataError::TooFewExamples {
            examples: dataset.len(),
            shards,
        });
    }
    let shard_size = dataset.len() / shards;
    let used = shard_size * shards;
    let dropped = dataset.len() - used;
    if dropped > 0 {
        log::info!("sharding drops {dropped} examples past the {shards}x{shard_size} grid");
    }

    let labels = dataset.labels();
    let mut order: Vec<usize> = (0..used).collect();
    order.sort_by_key(|&i| labels[i]);

    let mut deal: Vec<usize> = (0..shards).collect();
    deal.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let clients = deal
        .chunks_exact(shards_per_client)
        .map(|mine| {
            mine.iter()
                .flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect()
        })
        .collect();
    Ok(Partition { clients, dropped })
}

/// Seeded split of one client's indices into `(train, held_out)`. At least
/// one example lands on each side when there are two or more.
pub fn split_holdout(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = (indices.len() as f64 * fraction).round() as usize;
    if indices.len() >= 2 {
        held = held.clamp(1, indices.len() - 1);
    } else {
        held = 0;
    }
    let test = shuffled.split_off(indices.len() - held);
    (shuffled, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::collections::BTreeSet;

    fn labelled(labels: Vec<usize>, classes: usize) -> Dataset {
        Dataset::new(Tensor::zeros(&[labels.len(), 1, 1, 1]), labels, classes).unwrap()
    }

    #[test]
    fn one_client_one_shard_is_everything() {
        let ds = labelled((0..50).map(|i| (i * 7) % 5).collect(), 5);
        let p = shard_noniid(&ds, 1, 1, 3).unwrap();
        let got: BTreeSet<usize> = p.clients[0].iter().copied().collect();
        assert_eq!(got, (0..50).collect());
        assert_eq!(p.dropped, 0);
    }

    #[test]
    fn truncates_remainder_and_covers_prefix() {
        let ds = labelled((0..103).map(|i| i % 10).collect(), 10);
        let p = shard_noniid(&ds, 5, 2, 1).unwrap();
        assert_eq!(p.dropped, 3);
        let mut all: Vec<usize> = p.clients.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(p.clients.iter().all(|c| c.len() == 20));
    }

    #[test]
    fn accepts_twenty_shards_per_client() {
        let ds = labelled((0..1000).map(|i| i % 10).collect(), 10);
        let p = shard_noniid(&ds, 5, 20, 2).unwrap();
        assert_eq!(p.clients.len(), 5);
        assert!(p.clients.iter().all(|c| c.len() == 200));
    }

    #[test]
    fn rejects_too_few_examples() {
        let ds = labelled(vec![0, 1, 0], 2);
        assert!(matches!(
            shard_noniid(&ds, 2, 2, 0),
            Err(DataError::TooFewExamples { examples: 3, shards: 4 })
        ));
        assert!(shard_noniid(&ds, 0, 2, 0).is_err());
    }

    #[test]
    fn holdout_split() {
        let idx: Vec<usize> = (100..130).collect();
        let (train, test) = split_holdout(&idx, 0.1, 5);
        assert_eq!((train.len(), test.len()), (27, 3));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, idx);
        assert_eq!(split_holdout(&idx, 0.1, 5), (train, test));
        assert_eq!(split_holdout(&[4, 5], 0.01, 1).1.len(), 1);
    }
}
