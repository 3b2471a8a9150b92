use rand::Rng;

use crate::tensor::Tensor;

/// A conditioning image and a generated depth map, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FakePair {
    pub rgb: Tensor,
    pub depth: Tensor,
}

/// History of generated pairs fed to the discriminator in place of fresh ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    stored: Vec<FakePair>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), stored: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn stored(&self) -> &[FakePair] {
        &self.stored
    }

    pub(crate) fn from_parts(capacity: usize, stored: Vec<FakePair>) -> Self {
        Self { capacity, stored }
    }
}

/// Below capacity the fresh pair is stored and returned. At capacity, with
/// probability ½ a uniformly chosen stored pair is returned and replaced by
/// the fresh one; otherwise the fresh pair is returned.
pub fn buffer_exchange(buffer: &mut ReplayBuffer, fresh: FakePair, rng: &mut impl Rng) -> FakePair {
    if buffer.stored.len() < buffer.capacity {
        buffer.stored.push(fresh.clone());
        return fresh;
    }
    if rng.random_bool(0.5) {
        let i = rng.random_range(0..buffer.stored.len());
        std::mem::replace(&mut buffer.stored[i], fresh)
    } else {
        fresh
    }
}
