use std::collections::HashMap;

use crate::{Error, Result};

use super::{Tape, Tensor};

/// Named, ordered collection of trainable tensors.
///
/// Slot indices are stable for the life of the store; iteration and
/// serialization follow insertion order, which keeps checkpoints and
/// optimizer state deterministic.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name:?}")));
        }
        let slot = self.tensors.len();
        self.index.insert(name.to_string(), slot);
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|s| self.tensor(s))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Pull gradients off a finished tape into each referenced parameter,
    /// accumulating across calls (and across multiple tape refs to the same
    /// slot).
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for &(slot, id) in tape.param_refs() {
            if slot >= self.tensors.len() {
                return Err(Error::Contract(format!("tape references unknown slot {slot}")));
            }
            if let Some(g) = tape.grad(id) {
                self.tensors[slot].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn scale_grads(&mut self, f: f32) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grads_flow_from_tape_to_store() {
        let mut s = ParamStore::new();
        let slot = s
            .insert("w", Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(slot, s.tensor(slot));
        let y = tape.mul(w, w);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        s.accumulate_grads(&tape).unwrap();
        assert_eq!(s.tensor(slot).grad.as_deref().unwrap(), &[6.0, 8.0]);
        // A second pass accumulates rather than overwrites.
        s.accumulate_grads(&tape).unwrap();
        assert_eq!(s.tensor(slot).grad.as_deref().unwrap(), &[12.0, 16.0]);
    }
}
