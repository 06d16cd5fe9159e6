use super::{expect_shape, Layer, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `max(0, x)`; the gradient passes only where the input was strictly positive.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) fn relu_apply<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

impl<T: Scalar> Layer<T> for Relu {
    fn kind(&self) -> LayerKind {
        LayerKind::Relu
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = x.data().iter().map(|&v| v > T::zero()).collect();
        self.mask = Some((x.shape().to_vec(), mask));
        Ok(relu_apply(x))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu_apply(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, mask) = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::MissingCache { layer: "relu".into() })?;
        expect_shape("relu backward", grad_out, shape)?;
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_definition() {
        let mut r = Relu::new();
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(r.forward_train(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::<f32>::from_vec(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(Layer::<f32>::infer(&r, &pos).unwrap(), pos);
    }

    #[test]
    fn backward_masks() {
        let mut r = Relu::new();
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        r.forward_train(&x).unwrap();
        let g = Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(r.backward(&g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }
}
