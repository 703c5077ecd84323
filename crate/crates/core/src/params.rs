//! Named parameter collections and their binding onto a tape.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered set of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "param insert" });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone())?;
            }
        }
        Ok(out)
    }

    /// Appends every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) -> Result<()> {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// True when both sets have the same names in the same order with equal
    /// shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.param(t, trainable)).collect();
        let map = self.names.iter().cloned().zip(vars.iter().copied()).collect();
        Bound { vars, map }
    }

    /// Stores the gradients of the bound leaves on the tensors. Leaves without
    /// a gradient get zeros.
    pub fn store_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Bitwise checksum of all names, shapes and values (FNV-1a, 64 bit).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Tape handles for a [`ParamSet`], looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    map: HashMap<String, Var>,
}

impl Bound {
    /// Pairs `names[i]` with `vars[i]`.
    pub fn from_vars(names: &[String], vars: Vec<Var>) -> Result<Bound> {
        if names.len() != vars.len() {
            return Err(Error::Contract(format!("{} names for {} vars", names.len(), vars.len())));
        }
        let map = names.iter().cloned().zip(vars.iter().copied()).collect();
        Ok(Bound { vars, map })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// A view of the bound names below `prefix`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> Bound {
        let map: HashMap<String, Var> = self
            .map
            .iter()
            .filter_map(|(k, &v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v)))
            .collect();
        let vars = map.values().copied().collect();
        Bound { vars, map }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn checksum_sees_single_ulp() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::ones(&[3])).unwrap();
        let before = p.checksum();
        let w = p.get_mut("w").unwrap();
        w.data_mut()[1] = f32::from_bits(1.0f32.to_bits() + 1);
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn prefix_round_trip() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        let mut q = ParamSet::new();
        q.extend_prefixed("enc.", &p).unwrap();
        assert_eq!(q.names(), &["enc.a".to_string()]);
        assert_eq!(q.with_prefix_stripped("enc.").unwrap(), p);
    }
}
