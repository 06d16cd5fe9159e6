use rand::Rng;

use super::{expect_shape, join, output_len, uniform_init, Layer, LayerKind, Visit, VisitMut};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// 1D convolution over `[N x C_in x L]` via im2col and a single GEMM per batch.
#[derive(Debug, Clone)]
pub struct Conv1d<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    // [C_in*K x N*L_out]
    cols: Vec<T>,
    n: usize,
    len: usize,
    len_out: usize,
}

struct Geometry {
    n: usize,
    c_in: usize,
    len: usize,
    len_out: usize,
}

impl<T: Scalar> Conv1d<T> {
    /// Fan-in uniform weights with bound `sqrt(1 / (C_in * K))`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / (c_in * kernel) as f64).sqrt();
        Self {
            weight: uniform_init(&[c_out, c_in, kernel], bound, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (c_out, _, _) = weight.dims3("conv1d")?;
        expect_shape("conv1d bias", &bias, &[c_out])?;
        if stride == 0 {
            return Err(Error::Geometry {
                op: "conv1d",
                detail: "stride must be positive".into(),
            });
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            cache: None,
        })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        let (n, c_in, len) = x.dims3("conv1d")?;
        if c_in != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv1d input channels",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let len_out = output_len(len, self.kernel(), self.stride, self.padding).ok_or_else(|| Error::Geometry {
            op: "conv1d",
            detail: format!(
                "input length {len} with padding {p} is shorter than kernel {k} (L + 2p = {})",
                len + 2 * self.padding,
                p = self.padding,
                k = self.kernel()
            ),
        })?;
        Ok(Geometry { n, c_in, len, len_out })
    }

    fn im2col(&self, x: &Tensor<T>, g: &Geometry) -> Vec<T> {
        let k_len = self.kernel();
        let width = g.n * g.len_out;
        let mut cols = vec![T::zero(); g.c_in * k_len * width];
        let xs = x.data();
        for c in 0..g.c_in {
            for k in 0..k_len {
                let row = &mut cols[(c * k_len + k) * width..(c * k_len + k + 1) * width];
                for b in 0..g.n {
                    let src = &xs[(b * g.c_in + c) * g.len..(b * g.c_in + c + 1) * g.len];
                    let dst = &mut row[b * g.len_out..(b + 1) * g.len_out];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let pos = (t * self.stride + k) as isize - self.padding as isize;
                        if pos >= 0 && (pos as usize) < g.len {
                            *d = src[pos as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn compute(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Geometry)> {
        let g = self.geometry(x)?;
        let cols = self.im2col(x, &g);
        let c_out = self.out_channels();
        let ck = g.c_in * self.kernel();
        let width = g.n * g.len_out;
        let mut prod = vec![T::zero(); c_out * width];
        gemm(
            MatRef::row_major(self.weight.data(), c_out, ck),
            MatRef::row_major(&cols, ck, width),
            T::zero(),
            &mut prod,
        );
        let mut out = Tensor::zeros(&[g.n, c_out, g.len_out]);
        let bias = self.bias.data();
        let od = out.data_mut();
        for b in 0..g.n {
            for o in 0..c_out {
                let src = &prod[o * width + b * g.len_out..o * width + (b + 1) * g.len_out];
                let dst = &mut od[(b * c_out + o) * g.len_out..(b * c_out + o + 1) * g.len_out];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        Ok((out, cols, g))
    }
}

impl<T: Scalar> Layer<T> for Conv1d<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Conv1d
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, cols, g) = self.compute(x)?;
        self.cache = Some(ConvCache {
            cols,
            n: g.n,
            len: g.len,
            len_out: g.len_out,
        });
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.compute(x)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::MissingCache { layer: "conv1d".into() })?;
        let (n, len, len_out) = (cache.n, cache.len, cache.len_out);
        let c_out = self.out_channels();
        let c_in = self.in_channels();
        let k_len = self.kernel();
        let ck = c_in * k_len;
        let width = n * len_out;
        expect_shape("conv1d backward", grad_out, &[n, c_out, len_out])?;

        // [C_out x N*L_out]
        let gd = grad_out.data();
        let mut gmat = vec![T::zero(); c_out * width];
        for b in 0..n {
            for o in 0..c_out {
                gmat[o * width + b * len_out..o * width + (b + 1) * len_out]
                    .copy_from_slice(&gd[(b * c_out + o) * len_out..(b * c_out + o + 1) * len_out]);
            }
        }

        gemm(
            MatRef::row_major(&gmat, c_out, width),
            MatRef::transposed(&cache.cols, ck, width),
            T::one(),
            self.weight.grad_mut(),
        );
        let bias_grad = self.bias.grad_mut();
        for o in 0..c_out {
            let s = gmat[o * width..(o + 1) * width]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            bias_grad[o] = bias_grad[o] + s;
        }

        let mut dcols = vec![T::zero(); ck * width];
        gemm(
            MatRef::transposed(self.weight.data(), c_out, ck),
            MatRef::row_major(&gmat, c_out, width),
            T::zero(),
            &mut dcols,
        );

        let mut grad_in = Tensor::zeros(&[n, c_in, len]);
        let gi = grad_in.data_mut();
        for c in 0..c_in {
            for k in 0..k_len {
                let row = &dcols[(c * k_len + k) * width..(c * k_len + k + 1) * width];
                for b in 0..n {
                    let dst = &mut gi[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                    for t in 0..len_out {
                        let pos = (t * self.stride + k) as isize - self.padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            dst[pos as usize] = dst[pos as usize] + row[b * len_out + t];
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c, len] if c == self.in_channels() => {
                let l = output_len(len, self.kernel(), self.stride, self.padding).ok_or_else(|| Error::Geometry {
                    op: "conv1d",
                    detail: format!("length {len} too short for kernel {}", self.kernel()),
                })?;
                Ok(vec![n, self.out_channels(), l])
            }
            _ => Err(Error::ShapeMismatch {
                op: "conv1d",
                left: input.to_vec(),
                right: self.weight.shape().to_vec(),
            }),
        }
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }

    fn params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(w: &[f64], shape: [usize; 3], bias: &[f64], stride: usize, pad: usize) -> Conv1d<f64> {
        Conv1d::from_parts(
            Tensor::from_f64(&shape, w).unwrap(),
            Tensor::from_f64(&[shape[0]], bias).unwrap(),
            stride,
            pad,
        )
        .unwrap()
    }

    /// Naive quadruple loop with explicit zero padding.
    fn oracle(w: &Tensor<f64>, b: &Tensor<f64>, x: &Tensor<f64>, s: usize, p: usize) -> Vec<f64> {
        let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let (n, _, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let lo = (l + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * co * lo];
        for bn in 0..n {
            for o in 0..co {
                for t in 0..lo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for kk in 0..k {
                            let pos = (t * s + kk) as isize - p as isize;
                            if pos >= 0 && (pos as usize) < l {
                                acc += w.data()[(o * ci + c) * k + kk] * x.data()[(bn * ci + c) * l + pos as usize];
                            }
                        }
                    }
                    out[(bn * co + o) * lo + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernels() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 5], &[1.0, -2.0, 3.0, 4.0, 0.5]).unwrap();
        let mut one = conv(&[1.0], [1, 1, 1], &[0.0], 1, 0);
        assert_eq!(one.forward_train(&x).unwrap(), x);
        let mut delta = conv(&[0.0, 1.0, 0.0], [1, 1, 3], &[0.0], 1, 1);
        assert_eq!(delta.forward_train(&x).unwrap(), x);
        // identity map: gradient passes straight through
        let g = Tensor::from_f64(&[1, 1, 5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(one.backward(&g).unwrap(), g);
    }

    #[test]
    fn stem_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv1d::<f32>::new(1, 4, 7, 2, 3, &mut rng);
        let y = c.infer(&Tensor::zeros(&[1, 1, 178])).unwrap();
        assert_eq!(y.shape(), &[1, 4, 89]);
    }

    #[test]
    fn too_short_input_reports_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv1d::<f32>::new(1, 1, 7, 1, 0, &mut rng);
        let err = c.infer(&Tensor::zeros(&[1, 1, 4])).unwrap_err().to_string();
        assert!(err.contains("length 4") && err.contains("kernel 7"), "{err}");
    }

    #[test]
    fn matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Tensor<f64> = uniform_init(&[4, 3, 3], 1.0, &mut rng);
        let b: Tensor<f64> = uniform_init(&[4], 1.0, &mut rng);
        let x: Tensor<f64> = uniform_init(&[2, 3, 20], 1.0, &mut rng);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let c = Conv1d::from_parts(w.clone(), b.clone(), s, p).unwrap();
            let got = c.infer(&x).unwrap();
            let want = oracle(&w, &b, &x, s, p);
            for (g, e) in got.data().iter().zip(&want) {
                assert!((g - e).abs() <= 1e-5 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn bias_grad_is_sum_of_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Conv1d::<f64>::new(2, 3, 3, 1, 1, &mut rng);
        let x: Tensor<f64> = uniform_init(&[2, 2, 6], 1.0, &mut rng);
        c.forward_train(&x).unwrap();
        let g: Tensor<f64> = uniform_init(&[2, 3, 6], 1.0, &mut rng);
        c.backward(&g).unwrap();
        for o in 0..3 {
            let mut s = 0.0;
            for b in 0..2 {
                for t in 0..6 {
                    s += g.data()[(b * 3 + o) * 6 + t];
                }
            }
            assert!((c.bias().grad().unwrap()[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_forward_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Conv1d::<f64>::new(1, 1, 3, 1, 1, &mut rng);
        assert!(matches!(
            c.backward(&Tensor::zeros(&[1, 1, 4])),
            Err(Error::MissingCache { .. })
        ));
    }
}
