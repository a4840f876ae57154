//! Flat parameter storage.
//!
//! Every learnable tensor lives in one contiguous vector; layers hold
//! [`Slot`]s into it. Gradients, optimizer moments and checkpoints all use the
//! same layout, so none of them need to know about layer structure.

use std::ops::Range;

use rand::Rng;

use super::Real;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.total,
            len,
        };
        self.total += len;
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            slot,
            init,
        });
        slot
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Name of the tensor owning flat index `i`, with the offset inside it.
    pub fn locate(&self, i: usize) -> Option<(&str, usize)> {
        self.specs
            .iter()
            .find(|s| s.slot.range().contains(&i))
            .map(|s| (s.name.as_str(), i - s.slot.offset))
    }

    /// Draws initial values in layout order from the seed's init stream.
    /// Values are drawn in f64 and cast, so f32 and f64 builds agree up to
    /// rounding.
    pub fn initialize<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut out = Vec::with_capacity(self.total);
        for spec in &self.specs {
            for _ in 0..spec.slot.len {
                let v = match spec.init {
                    Init::Uniform(b) => rng.random_range(-b..=b),
                    Init::Constant(c) => c,
                };
                out.push(T::of(v));
            }
        }
        out
    }
}
