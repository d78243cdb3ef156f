//! Named-tensor parameter store with deterministic arithmetic.
//!
//! A [`ParamSet`] is an ordered map from layer name to a dense f64 tensor.
//! Iteration order is always lexicographic by layer name, so flattening,
//! hashing and file layout are reproducible across processes. All binary
//! operations require strict alignment: identical layer names and shapes,
//! no broadcasting.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::error::{Error, Result};
use crate::hashing::Hasher;
use std::collections::BTreeMap;

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::LayoutMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Ordered map from layer name to tensor, plus free-form string metadata.
///
/// The universal currency of the crate: pretrained, finetuned, protected
/// and merged models are all plain `ParamSet`s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set from (name, tensor) pairs, rejecting duplicate names
    /// and non-finite values.
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Tensor)>,
    {
        let mut set = Self::new();
        for (name, tensor) in entries {
            set.insert(name, tensor)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { layer: name });
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateLayer(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Layers in lexicographic name order.
    pub fn layers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn layer(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|n| n.as_str())
    }

    pub fn num_layers(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all tensors.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    /// Strict alignment check: same layer names, same shapes. Returns the
    /// first offending layer (lexicographic) on mismatch.
    pub fn check_aligned(&self, other: &ParamSet) -> Result<()> {
        let mut a = self.entries.iter();
        let mut b = other.entries.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((name, _)), None) => {
                    return Err(Error::Misaligned {
                        layer: name.clone(),
                        reason: "layer missing from right operand".into(),
                    })
                }
                (None, Some((name, _))) => {
                    return Err(Error::Misaligned {
                        layer: name.clone(),
                        reason: "layer missing from left operand".into(),
                    })
                }
                (Some((na, ta)), Some((nb, tb))) => {
                    if na != nb {
                        let first = na.min(nb);
                        return Err(Error::Misaligned {
                            layer: first.clone(),
                            reason: format!("layer names diverge ('{na}' vs '{nb}')"),
                        });
                    }
                    if ta.shape != tb.shape {
                        return Err(Error::Misaligned {
                            layer: na.clone(),
                            reason: format!("shape {:?} vs {:?}", ta.shape, tb.shape),
                        });
                    }
                }
            }
        }
    }

    /// Same layout and zero values everywhere; carries no meta.
    pub fn zeros_like(&self) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
            .collect();
        ParamSet { entries, meta: BTreeMap::new() }
    }

    /// Concatenation of all tensors in lexicographic layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.entries.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Euclidean norm of the flattened vector.
    pub fn norm2(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Inner product of flattened vectors. Requires alignment.
    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_aligned(other)?;
        let mut acc = 0.0;
        for (ta, tb) in self.entries.values().zip(other.entries.values()) {
            for (x, y) in ta.data.iter().zip(tb.data.iter()) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    /// Content hash over layer names, shapes and raw f64 bits, in
    /// lexicographic order. Metadata does not participate, so two sets
    /// with equal values fingerprint identically regardless of provenance
    /// tags.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Hasher::new();
        for (name, tensor) in &self.entries {
            h.update(name.as_bytes());
            h.update(&[0u8]);
            h.update(&(tensor.shape.len() as u64).to_le_bytes());
            for d in &tensor.shape {
                h.update(&(*d as u64).to_le_bytes());
            }
            h.update_f64s(&tensor.data);
        }
        h.finish()
    }

    /// Exact bit-pattern equality of values (shapes, names and f64 bits).
    /// Unlike `==`, distinguishes -0.0 from 0.0 and ignores metadata.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        if self.check_aligned(other).is_err() {
            return false;
        }
        self.entries
            .values()
            .zip(other.entries.values())
            .all(|(a, b)| {
                a.data
                    .iter()
                    .zip(b.data.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Elementwise combination of two aligned sets. The closure sees
    /// (left, right) values per coordinate. Result carries no meta.
    pub(crate) fn zip_map(
        &self,
        other: &ParamSet,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<ParamSet> {
        self.check_aligned(other)?;
        let mut entries = BTreeMap::new();
        for ((name, ta), tb) in self.entries.iter().zip(other.entries.values()) {
            let data: Vec<f64> = ta
                .data
                .iter()
                .zip(tb.data.iter())
                .map(|(x, y)| f(*x, *y))
                .collect();
            entries.insert(name.clone(), Tensor { shape: ta.shape.clone(), data });
        }
        let out = ParamSet { entries, meta: BTreeMap::new() };
        out.ensure_finite()?;
        Ok(out)
    }

    pub(crate) fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<ParamSet> {
        let mut entries = BTreeMap::new();
        for (name, t) in &self.entries {
            let data: Vec<f64> = t.data.iter().map(|x| f(*x)).collect();
            entries.insert(name.clone(), Tensor { shape: t.shape.clone(), data });
        }
        let out = ParamSet { entries, meta: BTreeMap::new() };
        out.ensure_finite()?;
        Ok(out)
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        for (name, t) in &self.entries {
            if !t.is_finite() {
                return Err(Error::NonFinite { layer: name.clone() });
            }
        }
        Ok(())
    }

    /// In-place `self -= a * other` over aligned sets. Used by training
    /// loops where allocating a fresh set per minibatch would dominate.
    pub(crate) fn sub_scaled_in_place(&mut self, a: f64, other: &ParamSet) -> Result<()> {
        self.check_aligned(other)?;
        for (t, o) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in t.data.iter_mut().zip(o.data.iter()) {
                *x -= a * y;
            }
        }
        Ok(())
    }

    /// In-place `self += a * other`.
    pub(crate) fn add_scaled_internal(&mut self, a: f64, other: &ParamSet) -> Result<()> {
        self.sub_scaled_in_place(-a, other)
    }

    /// Mutable view of one layer's data, for gradient accumulation.
    pub(crate) fn layer_mut_internal(&mut self, name: &str) -> Option<&mut [f64]> {
        self.entries.get_mut(name).map(|t| t.data.as_mut_slice())
    }
}

/// Elementwise `a * x + y` over aligned sets; inputs unmodified.
pub fn axpy(a: f64, x: &ParamSet, y: &ParamSet) -> Result<ParamSet> {
    x.zip_map(y, |xv, yv| a * xv + yv)
}

/// Elementwise `a * x`.
pub fn scale(a: f64, x: &ParamSet) -> Result<ParamSet> {
    x.map(|v| a * v)
}

/// Task vector: the parameter delta of a finetuned model relative to its
/// base, tagged with a fingerprint of that base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: ParamSet,
    pub base_fingerprint: u64,
}

/// `model - base`, with the base's fingerprint recorded.
pub fn task_vector(model: &ParamSet, base: &ParamSet) -> Result<TaskVector> {
    let delta = model.zip_map(base, |m, b| m - b)?;
    Ok(TaskVector { delta, base_fingerprint: base.fingerprint() })
}

/// {0,1}-valued parameter set aligned with a model.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    inner: ParamSet,
}

impl MaskSet {
    /// Validates that every element is exactly 0.0 or 1.0.
    pub fn new(params: ParamSet) -> Result<Self> {
        for (name, t) in params.layers() {
            for v in t.data() {
                if *v != 0.0 && *v != 1.0 {
                    return Err(Error::InvalidMaskValue {
                        layer: name.to_string(),
                        value: *v,
                    });
                }
            }
        }
        Ok(Self { inner: params })
    }

    pub fn ones_like(model: &ParamSet) -> Self {
        let mut inner = model.zeros_like();
        for t in inner.entries.values_mut() {
            t.data.fill(1.0);
        }
        Self { inner }
    }

    pub fn zeros_like(model: &ParamSet) -> Self {
        Self { inner: model.zeros_like() }
    }

    pub fn as_params(&self) -> &ParamSet {
        &self.inner
    }

    pub fn count_ones(&self) -> usize {
        self.inner
            .entries
            .values()
            .flat_map(|t| t.data.iter())
            .filter(|v| **v == 1.0)
            .count()
    }

    /// Fraction of ones per layer, in lexicographic layer order.
    pub fn per_layer_density(&self) -> Vec<(String, f64)> {
        self.inner
            .entries
            .iter()
            .map(|(n, t)| {
                let ones = t.data.iter().filter(|v| **v == 1.0).count();
                (n.clone(), ones as f64 / t.numel().max(1) as f64)
            })
            .collect()
    }
}

/// Hadamard product `m ⊙ x`; mask and operand must be aligned.
pub fn apply_mask(m: &MaskSet, x: &ParamSet) -> Result<ParamSet> {
    m.as_params().zip_map(x, |mv, xv| mv * xv)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pset(pairs: &[(&str, &[f64])]) -> ParamSet {
        ParamSet::from_entries(pairs.iter().map(|(n, d)| {
            (n.to_string(), Tensor::new(vec![d.len()], d.to_vec()).unwrap())
        }))
        .unwrap()
    }

    #[test]
    fn axpy_zero_scale_is_identity() {
        let x = pset(&[("w", &[9.0, -3.0])]);
        let y = pset(&[("w", &[1.0, 2.0])]);
        let out = axpy(0.0, &x, &y).unwrap();
        assert!(out.bits_eq(&y));
    }

    #[test]
    fn axpy_additive_inverse_yields_zero() {
        let p = pset(&[("w", &[2.0, -4.0]), ("b", &[0.5])]);
        let neg = scale(-1.0, &p).unwrap();
        let out = axpy(1.0, &p, &neg).unwrap();
        assert!(out.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn axpy_hand_case() {
        let x = pset(&[("w", &[2.0, 4.0])]);
        let y = pset(&[("w", &[1.0, 1.0])]);
        let out = axpy(0.5, &x, &y).unwrap();
        assert_eq!(out.flatten(), vec![2.0, 3.0]);
    }

    #[test]
    fn axpy_misalignment_names_first_offending_layer() {
        let x = pset(&[("a", &[1.0]), ("c", &[1.0])]);
        let y = pset(&[("a", &[1.0]), ("b", &[1.0])]);
        let err = axpy(1.0, &x, &y).unwrap_err();
        match err {
            Error::Misaligned { layer, .. } => assert_eq!(layer, "b"),
            other => panic!("expected Misaligned, got {other:?}"),
        }
    }

    #[test]
    fn axpy_shape_mismatch_rejected() {
        let x = pset(&[("w", &[1.0, 2.0])]);
        let y = pset(&[("w", &[1.0, 2.0, 3.0])]);
        assert!(matches!(axpy(1.0, &x, &y), Err(Error::Misaligned { .. })));
    }

    #[test]
    fn task_vector_of_identical_models_is_zero() {
        let base = pset(&[("w", &[1.0, 5.0])]);
        let tv = task_vector(&base, &base).unwrap();
        assert!(tv.delta.flatten().iter().all(|v| *v == 0.0));
        assert_eq!(tv.base_fingerprint, base.fingerprint());
    }

    #[test]
    fn task_vector_subtraction_and_round_trip() {
        let base = pset(&[("w", &[1.0])]);
        let model = pset(&[("w", &[3.0])]);
        let tv = task_vector(&model, &base).unwrap();
        assert_eq!(tv.delta.flatten(), vec![2.0]);
        let rebuilt = axpy(1.0, &tv.delta, &base).unwrap();
        assert!(rebuilt.bits_eq(&model));
    }

    #[test]
    fn apply_mask_all_ones_and_zeros() {
        let x = pset(&[("w", &[5.0, 7.0])]);
        let ones = MaskSet::ones_like(&x);
        assert!(apply_mask(&ones, &x).unwrap().bits_eq(&x));
        let zeros = MaskSet::zeros_like(&x);
        assert!(apply_mask(&zeros, &x)
            .unwrap()
            .flatten()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn apply_mask_hand_case() {
        let x = pset(&[("w", &[5.0, 7.0])]);
        let m = MaskSet::new(pset(&[("w", &[1.0, 0.0])])).unwrap();
        assert_eq!(apply_mask(&m, &x).unwrap().flatten(), vec![5.0, 0.0]);
    }

    #[test]
    fn mask_rejects_values_outside_zero_one() {
        let bad = pset(&[("w", &[0.5])]);
        assert!(matches!(
            MaskSet::new(bad),
            Err(Error::InvalidMaskValue { .. })
        ));
    }

    #[test]
    fn norm_and_dot_basics() {
        let x = pset(&[("w", &[3.0, 4.0])]);
        assert_eq!(x.norm2(), 5.0);
        let zero = x.zeros_like();
        assert_eq!(zero.norm2(), 0.0);
        let d = x.dot(&x).unwrap();
        assert!((d - x.norm2().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn flatten_is_lexicographic() {
        let p = pset(&[("b", &[2.0]), ("a", &[1.0]), ("c", &[3.0])]);
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn nonfinite_rejected_on_construction() {
        let t = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let mut p = ParamSet::new();
        assert!(matches!(
            p.insert("w".into(), t),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn duplicate_layer_rejected() {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(
            p.insert("w".into(), Tensor::zeros(vec![1])),
            Err(Error::DuplicateLayer(_))
        ));
    }

    #[test]
    fn fingerprint_ignores_meta() {
        let mut a = pset(&[("w", &[1.0])]);
        let b = pset(&[("w", &[1.0])]);
        a.set_meta("stage", "protected");
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}
