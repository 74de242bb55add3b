//! Named parameter storage with recorded init specs.
//!
//! Parameters live in a sorted map so iteration order (and therefore training,
//! checkpointing, and perturbation order) is deterministic. Each parameter is
//! seeded from an RNG substream keyed by its own name, so creation order never
//! changes initial values.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How a parameter was initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitSpec {
    /// Truncated normal (|z| <= 2) with the given std.
    TruncNormal { std: f64 },
    Zeros,
    Constant(f64),
}

/// Named map from layer path to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
    specs: BTreeMap<String, InitSpec>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create a parameter; the name must be unique.
    pub fn create(&mut self, name: &str, shape: &[usize], spec: InitSpec, rng: &Rng) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        let t = match spec {
            InitSpec::Zeros => Tensor::zeros(shape),
            InitSpec::Constant(c) => Tensor::full(shape, c),
            InitSpec::TruncNormal { std } => {
                let mut r = rng.split(name);
                Tensor::from_fn(shape, |_| r.trunc_normal(std))
            }
        };
        self.map.insert(name.to_string(), t);
        self.specs.insert(name.to_string(), spec);
        Ok(())
    }

    /// Insert or replace a tensor directly (checkpoint load, tests).
    pub fn insert_raw(&mut self, name: &str, t: Tensor) {
        self.specs
            .entry(name.to_string())
            .or_insert(InitSpec::Zeros);
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn spec(&self, name: &str) -> Option<InitSpec> {
        self.specs.get(name).copied()
    }

    /// All names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Names matching a predicate, sorted.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<String> {
        self.map.keys().filter(|n| pred(n)).cloned().collect()
    }

    /// Total element count across the given names.
    pub fn total_len(&self, names: &[String]) -> Result<usize> {
        let mut n = 0;
        for name in names {
            n += self.get(name)?.len();
        }
        Ok(n)
    }

    /// Concatenate the given parameters into one flat vector (sorted-name
    /// order of `names` as passed).
    pub fn flatten(&self, names: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.total_len(names)?);
        for name in names {
            out.extend_from_slice(self.get(name)?.data());
        }
        Ok(out)
    }

    /// Write a flat vector back into the given parameters.
    pub fn unflatten(&mut self, names: &[String], flat: &[f64]) -> Result<()> {
        let mut o = 0;
        for name in names {
            let t = self.get_mut(name)?;
            let n = t.len();
            if o + n > flat.len() {
                return Err(Error::Dim("unflatten: vector too short".into()));
            }
            t.data_mut().copy_from_slice(&flat[o..o + n]);
            o += n;
        }
        if o != flat.len() {
            return Err(Error::Dim("unflatten: vector too long".into()));
        }
        Ok(())
    }

    /// Add `delta * scale` in place across the given names.
    pub fn axpy(&mut self, names: &[String], delta: &[f64], scale: f64) -> Result<()> {
        let mut o = 0;
        for name in names {
            let t = self.get_mut(name)?;
            let d = t.data_mut();
            for v in d.iter_mut() {
                *v += scale * delta[o];
                o += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let rng = Rng::new(9);
        let mut a = ParamStore::new();
        a.create("x.weight", &[3, 3], InitSpec::TruncNormal { std: 0.02 }, &rng)
            .unwrap();
        a.create("y.weight", &[2], InitSpec::TruncNormal { std: 0.02 }, &rng)
            .unwrap();
        let mut b = ParamStore::new();
        b.create("y.weight", &[2], InitSpec::TruncNormal { std: 0.02 }, &rng)
            .unwrap();
        b.create("x.weight", &[3, 3], InitSpec::TruncNormal { std: 0.02 }, &rng)
            .unwrap();
        assert_eq!(a.get("x.weight").unwrap(), b.get("x.weight").unwrap());
        assert_eq!(a.get("y.weight").unwrap(), b.get("y.weight").unwrap());
    }

    #[test]
    fn duplicate_rejected() {
        let rng = Rng::new(0);
        let mut s = ParamStore::new();
        s.create("p", &[1], InitSpec::Zeros, &rng).unwrap();
        assert!(s.create("p", &[1], InitSpec::Zeros, &rng).is_err());
    }

    #[test]
    fn trunc_normal_within_bounds() {
        let rng = Rng::new(1);
        let mut s = ParamStore::new();
        s.create("w", &[1000], InitSpec::TruncNormal { std: 0.02 }, &rng)
            .unwrap();
        for v in s.get("w").unwrap().data() {
            assert!(v.abs() <= 0.04 + 1e-12);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let rng = Rng::new(2);
        let mut s = ParamStore::new();
        s.create("a", &[2, 2], InitSpec::TruncNormal { std: 1.0 }, &rng)
            .unwrap();
        s.create("b", &[3], InitSpec::TruncNormal { std: 1.0 }, &rng)
            .unwrap();
        let names = s.names();
        let flat = s.flatten(&names).unwrap();
        assert_eq!(flat.len(), 7);
        let mut s2 = s.clone();
        s2.unflatten(&names, &flat).unwrap();
        assert_eq!(s2.get("a").unwrap(), s.get("a").unwrap());
    }
}
