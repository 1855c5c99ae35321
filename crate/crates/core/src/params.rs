//! Named parameter storage shared by every trainable module.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch-norm running statistics) are stored alongside
    /// parameters but never receive gradients.
    pub trainable: bool,
}

/// Ordered collection of tensors owned by one module.
///
/// Each store carries a process-unique id so a computation graph can route
/// gradients back to the right store when several modules take part in one
/// loss.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<Entry<T>>,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and values (as `f64` bits). Precision
    /// independent for values that round-trip through `f64`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([e.trainable as u8]);
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Replaces every value from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count {} does not match {}",
                other.len(),
                self.entries.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter_mut().zip(other) {
            if &e.name != name || e.value.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Gradients aligned with the entries of one store; `None` for buffers and
/// parameters that did not take part in the loss.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub(crate) slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn empty(len: usize) -> Self {
        Grads {
            slots: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn slots(&self) -> &[Option<Tensor<T>>] {
        &self.slots
    }
}

/// He-normal initialisation for a layer with the given fan-in.
pub fn kaiming_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense-layer default.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("ordered bounds");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fingerprint_is_precision_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::<f32>::new();
        a.add("w", kaiming_normal(&[4, 3], 3, &mut rng));
        let mut b = ParamStore::<f64>::new();
        b.add("w", a.entries()[0].value.cast());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn clones_get_fresh_ids() {
        let a = ParamStore::<f64>::new();
        let b = a.clone();
        assert_ne!(a.uid(), b.uid());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}
