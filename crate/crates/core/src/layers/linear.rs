use rand::Rng;

use super::{expect_shape, join, uniform_init, Layer, LayerKind, Visit, VisitMut};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Fully connected layer `out = x * W^T + b` on `[N x C_in]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Weights and bias uniform in `+-sqrt(1 / C_in)`.
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / c_in as f64).sqrt();
        Self {
            weight: uniform_init(&[c_out, c_in], bound, rng),
            bias: uniform_init(&[c_out], bound, rng),
            cached_input: None,
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (c_out, _) = weight.dims2("linear")?;
        expect_shape("linear bias", &bias, &[c_out])?;
        Ok(Self {
            weight,
            bias,
            cached_input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
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

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, c) = x.dims2("linear")?;
        if c != self.in_features() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        Ok(n)
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Linear
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.infer(x)?;
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check(x)?;
        let (c_in, c_out) = (self.in_features(), self.out_features());
        let mut out = Tensor::zeros(&[n, c_out]);
        for row in out.data_mut().chunks_exact_mut(c_out) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            MatRef::row_major(x.data(), n, c_in),
            MatRef::transposed(self.weight.data(), c_out, c_in),
            T::one(),
            out.data_mut(),
        );
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::MissingCache { layer: "linear".into() })?;
        let n = x.shape()[0];
        let (c_in, c_out) = (self.in_features(), self.out_features());
        expect_shape("linear backward", grad_out, &[n, c_out])?;
        gemm(
            MatRef::transposed(grad_out.data(), n, c_out),
            MatRef::row_major(x.data(), n, c_in),
            T::one(),
            self.weight.grad_mut(),
        );
        let bg = self.bias.grad_mut();
        for row in grad_out.data().chunks_exact(c_out) {
            for (b, &g) in bg.iter_mut().zip(row) {
                *b = *b + g;
            }
        }
        let mut grad_in = Tensor::zeros(&[n, c_in]);
        gemm(
            MatRef::row_major(grad_out.data(), n, c_out),
            MatRef::row_major(self.weight.data(), c_out, c_in),
            T::zero(),
            grad_in.data_mut(),
        );
        Ok(grad_in)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c] if c == self.in_features() => Ok(vec![n, self.out_features()]),
            _ => Err(Error::ShapeMismatch {
                op: "linear",
                left: input.to_vec(),
                right: self.weight.shape().to_vec(),
            }),
        }
    }

    fn clear_cache(&mut self) {
        self.cached_input = None;
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

    #[test]
    fn identity_weight() {
        let l = Linear::from_parts(Tensor::<f32>::identity(3), Tensor::zeros(&[3])).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        assert_eq!(l.infer(&x).unwrap(), x);
    }

    #[test]
    fn hand_arithmetic() {
        let l = Linear::from_parts(
            Tensor::<f32>::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap(),
            Tensor::from_vec(&[1], vec![5.0]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(l.infer(&x).unwrap().data(), &[16.0]);
    }

    #[test]
    fn rejects_wrong_width() {
        let l = Linear::from_parts(Tensor::<f32>::identity(3), Tensor::zeros(&[3])).unwrap();
        assert!(matches!(
            l.infer(&Tensor::zeros(&[1, 2])),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
