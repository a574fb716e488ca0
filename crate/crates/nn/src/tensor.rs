//! Dense row-major f64 tensors and a strided matrix-multiply wrapper.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of {} values", self.data.len());
        self.data[0]
    }

    pub fn from_array3(a: &ndarray::Array3<f64>) -> Tensor {
        let (b, t, f) = a.dim();
        Tensor::new(&[b, t, f], a.iter().copied().collect())
    }

    pub fn to_array2(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.rows(), self.last_dim()), self.data.clone()).expect("shape")
    }
}

/// Strided view of a matrix inside a slice: element `(i, j)` sits at
/// `offset + i·rs + j·cs`.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(cols: usize) -> MatView {
        MatView { offset: 0, rs: cols, cs: 1 }
    }

    /// Row-major `rows × cols` storage read as its transpose.
    pub fn transposed(cols: usize) -> MatView {
        MatView { offset: 0, rs: 1, cs: cols }
    }

    pub fn at(self, offset: usize) -> MatView {
        MatView { offset, ..self }
    }

    fn last_index(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c ← beta·c + a·b` with `a: m×k`, `b: k×n`, `c: m×n`, all strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], av: MatView, b: &[f64], bv: MatView, beta: f64, c: &mut [f64], cv: MatView) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last_index(m, k) < a.len().max(1) || k == 0);
    assert!(bv.last_index(k, n) < b.len().max(1) || k == 0);
    assert!(cv.last_index(m, n) < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[cv.offset + i * cv.rs + j * cv.cs] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside its slice, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
