use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::raster::{AugmentPolicy, PartitionSet};
use crate::seed::{derive_seed, rng_for};

/// Where the two views of one training subject come from.
#[derive(Debug, Clone, Copy)]
pub enum PairSource<'a> {
    /// Two augmented views of one scan.
    Single(&'a PartitionSet),
    /// The two real scans of one subject, each augmented once.
    Real(&'a PartitionSet, &'a PartitionSet),
}

impl PairSource<'_> {
    pub(crate) fn views(&self, policy: &AugmentPolicy, seed: u64) -> (PartitionSet, PartitionSet) {
        match *self {
            PairSource::Single(s) => crate::raster::augment_pair(s, policy, seed),
            PairSource::Real(a, b) => (
                policy.apply(a, derive_seed(seed, "scan1")),
                policy.apply(b, derive_seed(seed, "scan2")),
            ),
        }
    }
}

/// Views of one batch. Subject `k` owns views `2k` and `2k + 1`; `pairs` holds
/// `(view, view, label)` with label 0 for positives and 1 for negatives.
#[derive(Debug, Clone)]
pub struct Batch {
    pub views: Vec<PartitionSet>,
    pub pairs: Vec<(usize, usize, u8)>,
}

impl Batch {
    pub fn subjects(&self) -> usize {
        self.views.len() / 2
    }
}

/// Label-0 pairs `(2k, 2k+1)` followed by negatives `(2i, 2j+1)` between
/// different subjects: `i < j` when unordered, every `i ≠ j` when ordered.
pub fn pair_labels(subjects: usize, ordered_negatives: bool) -> Result<Vec<(usize, usize, u8)>> {
    if subjects < 2 {
        return Err(Error::InvalidArgument(format!(
            "a batch needs at least 2 subjects to form negatives, got {subjects}"
        )));
    }
    let mut pairs: Vec<_> = (0..subjects).map(|k| (2 * k, 2 * k + 1, 0)).collect();
    for i in 0..subjects {
        for j in 0..subjects {
            if i != j && (ordered_negatives || i < j) {
                pairs.push((2 * i, 2 * j + 1, 1));
            }
        }
    }
    Ok(pairs)
}

/// Batch index lists for one epoch: a seeded shuffle cut into chunks of
/// `batch_size`, with a trailing single subject merged into the previous chunk.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 subjects to form negatives, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "order"));
    let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        let last = chunks.pop().expect("nonempty");
        chunks.last_mut().expect("nonempty").extend(last);
    }
    Ok(chunks)
}

/// Materializes the augmented views of one batch.
pub fn make_batch(
    sources: &[PairSource],
    members: &[usize],
    policy: &AugmentPolicy,
    ordered_negatives: bool,
    seed: u64,
) -> Result<Batch> {
    let pairs = pair_labels(members.len(), ordered_negatives)?;
    let mut views = Vec::with_capacity(2 * members.len());
    for &m in members {
        let (a, b) = sources[m].views(policy, derive_seed(seed, &format!("subject{m}")));
        views.push(a);
        views.push(b);
    }
    Ok(Batch { views, pairs })
}

/// All batches of one epoch.
pub fn make_training_pairs(
    sources: &[PairSource],
    batch_size: usize,
    policy: &AugmentPolicy,
    ordered_negatives: bool,
    seed: u64,
) -> Result<Vec<Batch>> {
    batch_order(sources.len(), batch_size, seed)?
        .iter()
        .map(|members| make_batch(sources, members, policy, ordered_negatives, seed))
        .collect()
}
