use crate::error::{Error, Result};

/// A named dense float64 array with a fixed shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(name, format!("{shape:?} ({expected} values)"), data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor `{name}` has non-finite value at index {pos}")));
        }
        Ok(Self { name, shape, data })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. The shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.name.clone(), self.shape.clone())
    }
}

/// Ordered collection of named tensors holding one network's weights (or the
/// gradients / optimizer moments mirroring them).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(Tensor::zeros_like).collect(),
        }
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape("<parameter set>", self.tensors.len(), other.tensors.len()));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::shape(
                    a.name.clone(),
                    format!("{:?}", a.shape),
                    format!("{} {:?}", b.name, b.shape),
                ));
            }
        }
        Ok(())
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter_scalars().collect()
    }

    /// Read scalar `index` in flat (concatenated) order.
    pub fn scalar(&self, mut index: usize) -> f64 {
        for t in &self.tensors {
            if index < t.data.len() {
                return t.data[index];
            }
            index -= t.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn set_scalar(&mut self, mut index: usize, value: f64) {
        for t in &mut self.tensors {
            if index < t.data.len() {
                t.data[index] = value;
                return;
            }
            index -= t.data.len();
        }
        panic!("scalar index out of range");
    }

    /// `self += alpha * other`. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParameterSet, alpha: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_scalars().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.iter_scalars()
            .zip(other.iter_scalars())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Index (flat) of the first non-finite scalar, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.iter_scalars().position(|v| !v.is_finite())
    }

    /// Cheap content hash used to detect activation caches that outlived a
    /// parameter update.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            h = fold(h, t.data.len() as u64);
            for v in &t.data {
                h = fold(h, v.to_bits());
            }
        }
        h
    }

    /// Concatenate several sets, prefixing each tensor name.
    pub fn concat_prefixed(parts: Vec<(&str, ParameterSet)>) -> Self {
        let mut tensors = Vec::new();
        for (prefix, set) in parts {
            for mut t in set.tensors {
                t.name = format!("{prefix}.{}", t.name);
                tensors.push(t);
            }
        }
        Self { tensors }
    }
}

pub(crate) fn fold(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5)
}

/// Max-norm relative discrepancy between two gradient sets:
/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both are identically zero.
pub fn relative_discrepancy(a: &ParameterSet, b: &ParameterSet) -> f64 {
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    a.max_abs_diff(b) / scale
}

/// The gradient-check error measure `‖a − b‖∞ / (1 + ‖b‖∞)`.
pub fn gradcheck_error(analytic: &ParameterSet, reference: &ParameterSet) -> f64 {
    analytic.max_abs_diff(reference) / (1.0 + reference.max_abs())
}
