use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// History of generated frames shown to a discriminator. Once full, each
/// query returns either the fresh fake or, with probability 1/2, a stored
/// one that is then replaced by the fresh fake.
#[derive(Debug, Clone, PartialEq)]
pub struct FakePool<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
}

impl<T: Real> FakePool<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity),
        }
    }

    pub fn from_images(capacity: usize, images: Vec<Tensor<T>>) -> Self {
        Self { capacity, images }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    /// Mixes a `[N,C,H,W]` batch of fresh fakes with the history.
    pub fn query<R: Rng + ?Sized>(&mut self, fakes: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        if self.capacity == 0 {
            return Ok(fakes.clone());
        }
        let mut out = Vec::new();
        for img in fakes.unstack() {
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.gen_bool(0.5) {
                let i = rng.gen_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[i], img));
            } else {
                out.push(img);
            }
        }
        let refs: Vec<&Tensor<T>> = out.iter().collect();
        Ok(Tensor::stack(&refs)?)
    }
}
