use super::NumericsError;

/// Dense row-major tensor. Storage is `f64`, but any tensor produced by a
/// quantizing graph or a parameter initializer holds only values exactly
/// representable in `f32`; see the module docs for the precision contract.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Leaves with this flag set receive gradients in [`super::Graph::backward`].
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value as f32 as f64);
        t
    }

    /// Builds from `f64` values, rounding each to `f32` precision.
    pub fn from_values(shape: &[usize], values: &[f64]) -> Result<Self, NumericsError> {
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(NumericsError::ShapeMismatch {
                op: "from_values",
                detail: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: values.iter().map(|&v| v as f32 as f64).collect(),
            requires_grad: false,
        })
    }

    /// Builds without rounding. Reserved for oracle-precision paths.
    pub(crate) fn from_values_raw(shape: &[usize], values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Tensor {
            shape: shape.to_vec(),
            data: values,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i) as f32 as f64).collect(),
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v as f32 as f64],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of {} elements", self.len());
        self.data[0]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn at3(&self, a: usize, b: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(a * self.shape[1] + b) * self.shape[2] + c]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[r * n..(r + 1) * n]
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Rounds every element to `f32` precision in place.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
