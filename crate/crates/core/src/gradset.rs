//! Ordered layer-name -> gradient maps for one model partition.
//!
//! Aggregation treats a gradient set both as named per-layer tensors (for
//! attention rescaling) and as one flattened vector (for conflict tests
//! and projection), so flatten/unflatten must be an exact bijection.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;

/// Ordered (layer name, gradient) pairs; insertion order is iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T: Scalar> {
    entries: IndexMap<String, Tensor<T>>,
}

/// Names and shapes of a gradient set, used to rebuild one from a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema(pub Vec<(String, Vec<usize>)>);

impl<T: Scalar> Default for GradientSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradientSet<T> {
    pub fn new() -> Self {
        GradientSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Aggregation(format!("duplicate gradient name {name}")));
        }
        self.entries.insert(name, grad);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn schema(&self) -> Schema {
        Schema(
            self.entries
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect(),
        )
    }

    pub fn same_schema(&self, other: &GradientSet<T>) -> bool {
        self.schema() == other.schema()
    }

    pub fn ensure_same_schema(&self, other: &GradientSet<T>, what: &str) -> Result<()> {
        if !self.same_schema(other) {
            return Err(Error::Aggregation(format!(
                "{what}: gradient schemas differ ({:?} vs {:?})",
                self.schema().0,
                other.schema().0
            )));
        }
        Ok(())
    }

    /// Concatenate all gradients into one vector, in insertion order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn zeros_like(&self) -> GradientSet<T> {
        GradientSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn scale(&self, s: T) -> GradientSet<T> {
        GradientSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.scale(s)))
                .collect(),
        }
    }

    /// self += other * s (schemas must match).
    pub fn add_scaled(&mut self, other: &GradientSet<T>, s: T) -> Result<()> {
        self.ensure_same_schema(other, "add_scaled")?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            a.add_scaled(b, s)?;
        }
        Ok(())
    }

    /// Inner product of the flattened vectors, accumulated in f64.
    pub fn dot(&self, other: &GradientSet<T>) -> Result<f64> {
        self.ensure_same_schema(other, "dot")?;
        let mut acc = 0.0f64;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                acc += x.to_f64() * y.to_f64();
            }
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in self.entries.values() {
            for &x in t.data() {
                let v = x.to_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn to_f64(&self) -> GradientSet<f64> {
        GradientSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f64()))
                .collect(),
        }
    }
}

impl Schema {
    pub fn numel(&self) -> usize {
        self.0
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }

    /// Rebuild a gradient set from a flat vector laid out in schema order.
    pub fn unflatten<T: Scalar>(&self, flat: &[T]) -> Result<GradientSet<T>> {
        if flat.len() != self.numel() {
            return Err(Error::Aggregation(format!(
                "unflatten: vector length {} does not match schema size {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = GradientSet::new();
        let mut offset = 0;
        for (name, shape) in &self.0 {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), flat[offset..offset + n].to_vec())?;
            out.insert(name.clone(), t)?;
            offset += n;
        }
        Ok(out)
    }
}

/// Unweighted mean of gradient sets, summed in argument order.
///
/// Shared by the FedAvg baseline and the projection aggregator so that the
/// no-conflict case reproduces FedAvg bit-for-bit.
pub fn mean_sets<T: Scalar>(sets: &[GradientSet<T>]) -> Result<GradientSet<T>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Aggregation("cannot average zero gradient sets".into()))?;
    let mut sum = first.clone();
    for s in &sets[1..] {
        sum.add_scaled(s, T::one())?;
    }
    let k = T::from_f64(sets.len() as f64);
    Ok(GradientSet {
        entries: sum
            .entries
            .into_iter()
            .map(|(name, t)| {
                let averaged = t.map(|x| x / k);
                (name, averaged)
            })
            .collect(),
    })
}
