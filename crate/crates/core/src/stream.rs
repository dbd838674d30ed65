//! One-pass mini-batch sources.

use std::collections::VecDeque;

use crate::distributions::{derive_seed, label_batch, sample_batch, DistributionSpec, GroundTruth};
use crate::error::Result;
use crate::sensing::MiniBatch;

/// A stream of independent mini-batches. Each batch is handed out once.
pub trait BatchSource {
    fn next_batch(&mut self) -> Option<Result<MiniBatch>>;

    /// The feature law behind the stream, when known. Needed for analytic moment profiles.
    fn distribution(&self) -> Option<DistributionSpec> {
        None
    }
}

/// Synthetic stream drawing batch `b` from substreams derived from `(seed, b)`.
#[derive(Clone, Debug)]
pub struct SyntheticStream {
    spec: DistributionSpec,
    gt: GroundTruth,
    batch_size: usize,
    seed: u64,
    next: u64,
    limit: Option<u64>,
}

impl SyntheticStream {
    pub fn new(spec: DistributionSpec, gt: GroundTruth, batch_size: usize, seed: u64) -> Self {
        Self {
            spec,
            gt,
            batch_size,
            seed,
            next: 0,
            limit: None,
        }
    }

    /// Stop after `batches` batches.
    pub fn with_limit(mut self, batches: usize) -> Self {
        self.limit = Some(batches as u64);
        self
    }

    pub fn batches_served(&self) -> u64 {
        self.next
    }
}

/// Draws `n` labelled instances from `(spec, gt)` using the stream `seed`.
pub fn draw_labelled(spec: &DistributionSpec, gt: &GroundTruth, n: usize, seed: u64) -> Result<MiniBatch> {
    let x = sample_batch(spec, gt.dim(), n, derive_seed(seed, 0))?;
    let y = label_batch(gt, &x, derive_seed(seed, 1))?;
    MiniBatch::new(x, y)
}

impl BatchSource for SyntheticStream {
    fn next_batch(&mut self) -> Option<Result<MiniBatch>> {
        if self.limit.is_some_and(|l| self.next >= l) {
            return None;
        }
        let b = self.next;
        self.next += 1;
        Some(draw_labelled(&self.spec, &self.gt, self.batch_size, derive_seed(self.seed, b)))
    }

    fn distribution(&self) -> Option<DistributionSpec> {
        Some(self.spec)
    }
}

/// Pre-built batches, served in order.
#[derive(Debug, Default)]
pub struct VecSource {
    batches: VecDeque<MiniBatch>,
    spec: Option<DistributionSpec>,
}

impl VecSource {
    pub fn new(batches: Vec<MiniBatch>) -> Self {
        Self {
            batches: batches.into(),
            spec: None,
        }
    }

    pub fn with_distribution(mut self, spec: DistributionSpec) -> Self {
        self.spec = Some(spec);
        self
    }

    pub fn remaining(&self) -> usize {
        self.batches.len()
    }
}

impl BatchSource for VecSource {
    fn next_batch(&mut self) -> Option<Result<MiniBatch>> {
        self.batches.pop_front().map(Ok)
    }

    fn distribution(&self) -> Option<DistributionSpec> {
        self.spec
    }
}
