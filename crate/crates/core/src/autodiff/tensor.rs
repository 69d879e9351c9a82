use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the graph can run in. Training uses `f32`; gradient checks
/// replay the same graph in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + Sum + 'static
{
    /// `c = alpha * a · b + beta * c` for strided row/column-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

fn check_span(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm view out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_span(a.len(), m, k, a_strides);
                check_span(b.len(), k, n, b_strides);
                check_span(c.len(), m, n, c_strides);
                // SAFETY: every view was bounds-checked against its slice above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Contiguous slab `[index]` along the first axis.
    pub fn slab(&self, index: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[index * stride..(index + 1) * stride]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &item.shape));
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}
