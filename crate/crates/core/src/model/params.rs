//! Named parameter container shared by training, aggregation, and checkpoints.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Ordered map from tensor name to tensor, with a flagged subset of names
/// belonging to the trend-awareness module (the aligned subset Θ_T).
///
/// Iteration order is insertion order and is identical for every set built
/// from the same model config, which fixes the floating-point reduction
/// order during aggregation.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    entries: Vec<(String, Mat)>,
    index: HashMap<String, usize>,
    atm_names: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            index: HashMap::new(),
            atm_names: BTreeSet::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Mat, is_atm: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate tensor name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        if is_atm {
            self.atm_names.insert(name.clone());
        }
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::UnknownTensor(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::UnknownTensor(name.into())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn atm_names(&self) -> &BTreeSet<String> {
        &self.atm_names
    }

    pub fn is_atm(&self, name: &str) -> bool {
        self.atm_names.contains(name)
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.data.len()).sum()
    }

    /// Same names, in the same order, with the same shapes.
    pub fn same_structure(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, am), (bn, bm))| an == bn && am.rows == bm.rows && am.cols == bm.cols)
    }

    /// Zero-filled set with identical structure and flags.
    pub fn zeros_like(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, m) in &self.entries {
            out.push(name.clone(), Mat::zeros(m.rows, m.cols), self.is_atm(name));
        }
        out
    }

    /// `self += factor * other`, elementwise over all tensors.
    pub fn scaled_add(&mut self, other: &ParameterSet, factor: f64) -> Result<()> {
        for ((an, am), (bn, bm)) in self.entries.iter_mut().zip(&other.entries) {
            if an != bn || am.rows != bm.rows || am.cols != bm.cols {
                return Err(Error::ShapeMismatch {
                    context: format!("scaled_add tensor `{bn}`"),
                    expected: format!("{an} {}x{}", am.rows, am.cols),
                    actual: format!("{bn} {}x{}", bm.rows, bm.cols),
                });
            }
            for (a, b) in am.data.iter_mut().zip(&bm.data) {
                *a += factor * b;
            }
        }
        Ok(())
    }

    /// Multiply every element by `factor`.
    pub fn scale_in_place(&mut self, factor: f64) {
        for (_, m) in self.entries.iter_mut() {
            for v in m.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// A new set holding only the flagged trend-module tensors.
    pub fn atm_subset(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, m) in &self.entries {
            if self.is_atm(name) {
                out.push(name.clone(), m.clone(), true);
            }
        }
        out
    }

    /// Squared Euclidean distance over the flagged subset, ‖Θ_T − Θ̂_T‖².
    pub fn atm_sq_distance(&self, other: &ParameterSet) -> Result<f64> {
        let mut acc = 0.0;
        for name in &self.atm_names {
            let a = self.get(name)?;
            let b = other.get(name)?;
            if a.rows != b.rows || a.cols != b.cols {
                return Err(Error::ShapeMismatch {
                    context: format!("atm distance tensor `{name}`"),
                    expected: format!("{}x{}", a.rows, a.cols),
                    actual: format!("{}x{}", b.rows, b.cols),
                });
            }
            for (x, y) in a.data.iter().zip(&b.data) {
                let d = x - y;
                acc += d * d;
            }
        }
        Ok(acc)
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Bit-level equality of every tensor.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.same_structure(other)
            && self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}
