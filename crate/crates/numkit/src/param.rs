use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Tensor) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }
}

/// Owns every trainable tensor of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub const fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            id,
            name: name.into(),
            value,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Adds `grads` into each `Param::grad` (`+=`).
    pub fn accumulate(&mut self, grads: &Gradients) {
        for p in &mut self.params {
            if let Some(g) = grads.get(p.id) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive FNV-1a hash over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for d in p.value.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// `self ← decay·self + (1−decay)·online` for every parameter.
    pub fn ema_from(&mut self, online: &ParamStore, decay: f64) -> Result<()> {
        self.check_same_layout(online)?;
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            for (tv, ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *tv = decay * *tv + (1.0 - decay) * ov;
            }
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(NumError::Invalid(format!(
                "architecture mismatch: {} vs {} parameters",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(NumError::Invalid(format!(
                    "architecture mismatch at {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[2], v));
        s
    }

    #[test]
    fn ema_limits() {
        let online = store(0.0);
        let mut t = store(1.0);
        t.ema_from(&online, 1.0).unwrap();
        assert_eq!(t.value(ParamId(0)).data(), &[1.0, 1.0]);
        t.ema_from(&online, 0.9).unwrap();
        assert!((t.value(ParamId(0)).data()[0] - 0.9).abs() < 1e-15);
        t.ema_from(&online, 0.0).unwrap();
        assert_eq!(t.value(ParamId(0)).data(), online.value(ParamId(0)).data());
    }

    #[test]
    fn ema_rejects_mismatch() {
        let mut a = store(0.0);
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3]));
        assert!(a.ema_from(&b, 0.5).is_err());
    }

    #[test]
    fn checksum_sees_single_bit() {
        let a = store(1.0);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut(ParamId(0)).value.data_mut()[1] = f64::from_bits(1.0f64.to_bits() + 1);
        assert_ne!(a.checksum(), b.checksum());
    }
}
