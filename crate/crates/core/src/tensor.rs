//! Dense row-major tensors.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Value-wise operations; `Ge` yields 1 where `a >= b` and 0 elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Ge,
}

impl ElemOp {
    #[inline]
    fn apply<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            ElemOp::Add => a + b,
            ElemOp::Sub => a - b,
            ElemOp::Mul => a * b,
            ElemOp::Div => a / b,
            ElemOp::Ge => {
                if a >= b {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

/// Right-hand side of [`Tensor::elementwise`]: a same-shape tensor or a broadcast scalar.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, S> {
    Tensor(&'a Tensor<S>),
    Scalar(S),
}

impl<'a, S> From<&'a Tensor<S>> for Operand<'a, S> {
    fn from(t: &'a Tensor<S>) -> Self {
        Operand::Tensor(t)
    }
}

impl<S: Scalar> From<S> for Operand<'_, S> {
    fn from(v: S) -> Self {
        Operand::Scalar(v)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        assert!(
            shape.iter().all(|&e| e > 0),
            "zero extent in shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    /// Builds a tensor from `f64` values, converting to the scalar type.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::lit(v)).collect())
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize(self.len()).expect("length fits in scalar")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Converts to another scalar type (used to promote f32 weights to f64 and back).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(v.as_f64()).expect("finite cast"))
                .collect(),
        }
    }

    pub fn elementwise<'a>(&self, op: ElemOp, rhs: impl Into<Operand<'a, S>>) -> Result<Self> {
        let data: Vec<S> = match rhs.into() {
            Operand::Scalar(b) => self.data.iter().map(|&a| op.apply(a, b)).collect(),
            Operand::Tensor(b) => {
                if b.shape != self.shape {
                    return dim_err(format!(
                        "elementwise {op:?} on {:?} and {:?}",
                        self.shape, b.shape
                    ));
                }
                self.data
                    .iter()
                    .zip(&b.data)
                    .map(|(&a, &b)| op.apply(a, b))
                    .collect()
            }
        };
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("elementwise result")?;
        Ok(out)
    }

    /// `self [m×k] · rhs [k×n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Self> {
        self.matmul_impl(rhs, false, false)
    }

    /// `self [m×k] · rhsᵀ` where `rhs` is `[n×k]`.
    pub fn matmul_nt(&self, rhs: &Tensor<S>) -> Result<Self> {
        self.matmul_impl(rhs, false, true)
    }

    /// `selfᵀ · rhs` where `self` is `[k×m]` and `rhs` is `[k×n]`.
    pub fn matmul_tn(&self, rhs: &Tensor<S>) -> Result<Self> {
        self.matmul_impl(rhs, true, false)
    }

    fn matmul_impl(&self, rhs: &Tensor<S>, ta: bool, tb: bool) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return dim_err(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, rhs.shape
            ));
        }
        let a = MatRef::new(&self.data, self.shape[0], self.shape[1], ta);
        let b = MatRef::new(&rhs.data, rhs.shape[0], rhs.shape[1], tb);
        if a.cols != b.rows {
            return dim_err(format!(
                "matmul inner extents differ: {:?}{} x {:?}{}",
                self.shape,
                if ta { "ᵀ" } else { "" },
                rhs.shape,
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![S::zero(); a.rows * b.cols];
        gemm(a, b, &mut out, false);
        let out = Tensor {
            shape: vec![a.rows, b.cols],
            data: out,
        };
        out.ensure_finite("matmul result")?;
        Ok(out)
    }
}

/// Borrowed row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, S> MatRef<'a, S> {
    /// `stored_rows × stored_cols` storage, logically transposed when `transposed`.
    pub fn new(data: &'a [S], stored_rows: usize, stored_cols: usize, transposed: bool) -> Self {
        debug_assert_eq!(data.len(), stored_rows * stored_cols);
        if transposed {
            MatRef {
                data,
                rows: stored_cols,
                cols: stored_rows,
                rs: 1,
                cs: stored_cols as isize,
            }
        } else {
            MatRef {
                data,
                rows: stored_rows,
                cols: stored_cols,
                rs: stored_cols as isize,
                cs: 1,
            }
        }
    }
}

/// `out (+)= a · b` into a row-major `a.rows × b.cols` buffer.
pub(crate) fn gemm<S: Scalar>(a: MatRef<'_, S>, b: MatRef<'_, S>, out: &mut [S], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output extent");
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: extents and strides were validated against the slice lengths above.
    unsafe {
        S::gemm(
            a.rows,
            a.cols,
            b.cols,
            S::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}
