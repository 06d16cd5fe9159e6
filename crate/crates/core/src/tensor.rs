//! Dense row-major tensors and the primitive kernels every layer is built on.
//!
//! Tensors are generic over [`Scalar`] so the same layer code runs in `f32`
//! for training and in `f64` for finite-difference checks. Reductions run in
//! ascending flat-index order; nothing here is parallel, so results are
//! bit-reproducible for a given build.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must be in
    /// bounds of the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only matrix view over a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` view.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer (`cols x rows`).
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out (m x n, row-major) = beta * out + a (m x k) * b (k x n)`.
///
/// Panics if the views are inconsistent; callers validate shapes first.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: the bounds of both views and the output were asserted above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "shape {shape:?} must be non-empty with positive dimensions"
        )));
    }
    Ok(numel(shape))
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Panics on an invalid shape; for internal construction with known geometry.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Value and gradient buffers borrowed together.
    pub fn value_and_grad_mut(&mut self) -> (&mut [T], &mut [T]) {
        let n = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        (&mut self.data, grad)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                layer: what.to_string(),
            })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Sum in ascending index order, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v.as_f64())
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, l] => Ok((n, c, l)),
            _ => Err(Error::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Elementwise `a (op) b` over equal shapes.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "elementwise",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let f: fn(T, T) -> T = match op {
        ElementwiseOp::Add => |x, y| x + y,
        ElementwiseOp::Sub => |x, y| x - y,
        ElementwiseOp::Mul => |x, y| x * y,
    };
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    let out = Tensor::from_vec(&a.shape, data)?;
    out.ensure_finite("elementwise")?;
    Ok(out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Add, a, b)
}

/// In-place `acc += other`.
pub fn add_assign<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if acc.shape != other.shape {
        return Err(Error::ShapeMismatch {
            op: "add_assign",
            left: acc.shape.clone(),
            right: other.shape.clone(),
        });
    }
    for (x, &y) in acc.data.iter_mut().zip(&other.data) {
        *x = *x + y;
    }
    Ok(())
}

/// Rank-2 matrix product `[M x K] * [K x N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        MatRef::row_major(&a.data, m, k),
        MatRef::row_major(&b.data, k, n),
        T::zero(),
        &mut out.data,
    );
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Per-channel mean and biased variance of an `[N x C x L]` tensor.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mean, var) = channel_stats_f64(x)?;
    let c = mean.len();
    let mean = Tensor::from_f64(&[c], &mean)?;
    let var = Tensor::from_f64(&[c], &var)?;
    mean.ensure_finite("channel_stats")?;
    var.ensure_finite("channel_stats")?;
    Ok((mean, var))
}

/// Two-pass statistics in `f64`, summed in ascending `(n, l)` order.
pub(crate) fn channel_stats_f64<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, l) = x.dims3("channel_stats")?;
    let count = (n * l) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * l;
            for v in &x.data[base..base + l] {
                s += v.as_f64();
            }
        }
        let mu = s / count;
        let mut sq = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * l;
            for v in &x.data[base..base + l] {
                let d = v.as_f64() - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = numel(shape);
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_identity_and_hand_values() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let z = Tensor::zeros(&[2]);
        assert_eq!(add(&a, &z).unwrap().data(), &[1.0, 2.0]);
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        let d = elementwise(ElementwiseOp::Sub, &b, &a).unwrap();
        assert_eq!(d.data(), &[2.0, 2.0]);
    }

    #[test]
    fn mul_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let out = elementwise(ElementwiseOp::Mul, &a, &b).unwrap();
        for i in 0..6 {
            assert_eq!(out.data()[i], a.data()[i] * b.data()[i]);
        }
    }

    #[test]
    fn elementwise_shape_mismatch_reports_both() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = add(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn elementwise_rejects_overflow() {
        let a = Tensor::<f32>::full(&[1], f32::MAX);
        assert!(matches!(add(&a, &a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 2], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &x).unwrap(), x);
        let a = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let out = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
                let got = out.data()[i * 3 + j] as f64;
                assert!((got - s).abs() <= 1e-6 * s.abs().max(1.0), "{got} vs {s}");
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_geometry() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::ShapeMismatch { .. })));
        let v = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(matmul(&v, &a), Err(Error::Rank { .. })));
    }

    #[test]
    fn channel_stats_cases() {
        let x = Tensor::<f32>::full(&[2, 3, 4], 5.0);
        let (m, v) = channel_stats(&x).unwrap();
        assert_eq!(m.data(), &[5.0; 3]);
        assert_eq!(v.data(), &[0.0; 3]);

        let x = Tensor::<f32>::from_vec(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (m, v) = channel_stats(&x).unwrap();
        assert_eq!(m.data(), &[2.0]);
        assert_eq!(v.data(), &[1.0]);

        assert!(matches!(
            channel_stats(&Tensor::<f32>::zeros(&[2, 2])),
            Err(Error::Rank { .. })
        ));
    }

    #[test]
    fn channel_stats_matches_two_pass_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 8, 20], &mut rng);
        let (m, v) = channel_stats(&x).unwrap();
        for c in 0..8 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..20).map(move |l| (n, l)))
                .map(|(n, l)| x.data()[(n * 8 + c) * 20 + l] as f64)
                .collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((m.data()[c] as f64 - mu).abs() < 1e-6);
            assert!((v.data()[c] as f64 - var).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::<f32>::from_vec(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn grad_buffer_lazily_allocated() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.grad_mut()[1] = 2.0;
        assert_eq!(t.grad().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs(n: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(-100.0f32..100.0, n)
        }

        proptest! {
            #[test]
            fn add_commutes(a in vecs(12), b in vecs(12)) {
                let a = Tensor::from_vec(&[3, 4], a).unwrap();
                let b = Tensor::from_vec(&[3, 4], b).unwrap();
                prop_assert_eq!(add(&a, &b).unwrap(), add(&b, &a).unwrap());
            }

            #[test]
            fn matmul_distributes_over_add(a in vecs(12), b in vecs(20), c in vecs(20)) {
                let a = Tensor::from_vec(&[3, 4], a).unwrap();
                let b = Tensor::from_vec(&[4, 5], b).unwrap();
                let c = Tensor::from_vec(&[4, 5], c).unwrap();
                let lhs = matmul(&a, &add(&b, &c).unwrap()).unwrap();
                let rhs = add(&matmul(&a, &b).unwrap(), &matmul(&a, &c).unwrap()).unwrap();
                let scale = lhs.data().iter().map(|v| v.abs()).fold(1.0f32, f32::max);
                for (x, y) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((x - y).abs() <= 1e-5 * scale);
                }
            }

            #[test]
            fn matmul_identity_exact(x in vecs(8)) {
                let x = Tensor::from_vec(&[4, 2], x).unwrap();
                prop_assert_eq!(matmul(&Tensor::identity(4), &x).unwrap(), x);
            }
        }
    }
}
