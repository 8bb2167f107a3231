use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

use crate::error::{FuseError, Result};

/// A named, fixed-shape block of trainable values (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Weights drawn from U(-b, b) with `b = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = xavier_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            name: name.into(),
            shape: vec![fan_in, fan_out],
            data,
        }
    }

    pub fn from_vec(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(FuseError::Dimension(format!(
                "tensor {name}: shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if shape.is_empty() || shape.len() > 2 {
            return Err(FuseError::Dimension(format!(
                "tensor {name}: unsupported rank {}",
                shape.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FuseError::Numeric(format!("tensor {name} has non-finite values")));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(self.dims2(), &self.data)
            .expect("shape matches data length")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let dims = self.dims2();
        ArrayViewMut2::from_shape(dims, &mut self.data)
            .expect("shape matches data length")
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn view1_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[..])
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Ordered collection of named tensors. Used both for parameters and for
/// gradients of the same layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

pub type GradStore = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: ParamTensor) -> Result<()> {
        if self.get(tensor.name()).is_some() {
            return Err(FuseError::Usage(format!("duplicate tensor name {}", tensor.name())));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Like [`get`](Self::get) but a missing name is an error.
    pub fn tensor(&self, name: &str) -> Result<&ParamTensor> {
        self.get(name)
            .ok_or_else(|| FuseError::Usage(format!("missing tensor {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut ParamTensor> {
        self.get_mut(name)
            .ok_or_else(|| FuseError::Usage(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor::zeros(t.name.clone(), &t.shape))
                .collect(),
        }
    }

    /// Appends all tensors of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for t in other.tensors {
            self.push(t)?;
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|t| t.name.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(ParamTensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += factor * other`, matched by name.
    pub fn add_scaled(&mut self, other: &ParamSet, factor: f64) -> Result<()> {
        for t in &other.tensors {
            let dst = self.tensor_mut(&t.name)?;
            if dst.shape != t.shape {
                return Err(FuseError::Dimension(format!("shape mismatch for {}", t.name)));
            }
            dst.data
                .iter_mut()
                .zip(&t.data)
                .for_each(|(d, s)| *d += factor * s);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|&x| x == 0.0))
    }

    /// Flattened values in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}
