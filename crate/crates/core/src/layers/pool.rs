use super::{expect_shape, output_len, Layer, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max pooling; padded positions never win, ties go to the lowest index.
#[derive(Debug, Clone)]
pub struct MaxPool1d {
    kernel: usize,
    stride: usize,
    padding: usize,
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 || padding >= kernel {
            return Err(Error::Geometry {
                op: "maxpool1d",
                detail: format!(
                    "kernel {kernel}, stride {stride}, padding {padding}: need kernel, stride > 0 and padding < kernel"
                ),
            });
        }
        Ok(Self {
            kernel,
            stride,
            padding,
            argmax: None,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let (n, c, len) = x.dims3("maxpool1d")?;
        let len_out = output_len(len, self.kernel, self.stride, self.padding).ok_or_else(|| Error::Geometry {
            op: "maxpool1d",
            detail: format!("length {len} too short for kernel {}", self.kernel),
        })?;
        let mut out = Tensor::zeros(&[n, c, len_out]);
        let mut idx = vec![0usize; n * c * len_out];
        let xs = x.data();
        for row in 0..n * c {
            let base = row * len;
            for t in 0..len_out {
                let start = (t * self.stride) as isize - self.padding as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + self.kernel as isize) as usize).min(len);
                if lo >= hi {
                    return Err(Error::Geometry {
                        op: "maxpool1d",
                        detail: format!("window {t} lies entirely in padding"),
                    });
                }
                let mut best = lo;
                for p in lo + 1..hi {
                    if xs[base + p] > xs[base + best] {
                        best = p;
                    }
                }
                out.data_mut()[row * len_out + t] = xs[base + best];
                idx[row * len_out + t] = base + best;
            }
        }
        Ok((out, idx))
    }
}

impl<T: Scalar> Layer<T> for MaxPool1d {
    fn kind(&self) -> LayerKind {
        LayerKind::MaxPool1d
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, idx) = self.run(x)?;
        self.argmax = Some((x.shape().to_vec(), idx));
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, idx) = self.argmax.as_ref().ok_or_else(|| Error::MissingCache {
            layer: "maxpool1d".into(),
        })?;
        if grad_out.len() != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "maxpool1d backward",
                left: grad_out.shape().to_vec(),
                right: shape.clone(),
            });
        }
        let mut grad_in = Tensor::zeros(shape);
        let gi = grad_in.data_mut();
        for (&i, &g) in idx.iter().zip(grad_out.data()) {
            gi[i] = gi[i] + g;
        }
        Ok(grad_in)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c, len] => {
                let l = output_len(len, self.kernel, self.stride, self.padding).ok_or_else(|| Error::Geometry {
                    op: "maxpool1d",
                    detail: format!("length {len} too short for kernel {}", self.kernel),
                })?;
                Ok(vec![n, c, l])
            }
            _ => Err(Error::Rank {
                op: "maxpool1d",
                expected: 3,
                shape: input.to_vec(),
            }),
        }
    }

    fn clear_cache(&mut self) {
        self.argmax = None;
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}

/// Mean over the whole temporal axis: `[N x C x L] -> [N x C x 1]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool1d {
    cached: Option<[usize; 3]>,
}

impl GlobalAvgPool1d {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool1d {
    fn kind(&self) -> LayerKind {
        LayerKind::GlobalAvgPool1d
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, l) = x.dims3("global_avgpool1d")?;
        self.cached = Some([n, c, l]);
        self.infer(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, l) = x.dims3("global_avgpool1d")?;
        let inv = T::from_f64_lossy(1.0 / l as f64);
        let data = x
            .data()
            .chunks_exact(l)
            .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        Tensor::from_vec(&[n, c, 1], data)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, l] = self.cached.ok_or_else(|| Error::MissingCache {
            layer: "global_avgpool1d".into(),
        })?;
        expect_shape("global_avgpool1d backward", grad_out, &[n, c, 1])?;
        let inv = T::from_f64_lossy(1.0 / l as f64);
        let data = grad_out
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, l))
            .collect();
        Tensor::from_vec(&[n, c, l], data)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c, _] => Ok(vec![n, c, 1]),
            _ => Err(Error::Rank {
                op: "global_avgpool1d",
                expected: 3,
                shape: input.to_vec(),
            }),
        }
    }

    fn clear_cache(&mut self) {
        self.cached = None;
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}

/// `[N x C x L] -> [N x C*L]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cached: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for Flatten {
    fn kind(&self) -> LayerKind {
        LayerKind::Flatten
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.cached = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = Layer::<T>::output_shape(self, x.shape())?;
        x.clone().reshape(&shape)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.cached.as_ref().ok_or_else(|| Error::MissingCache {
            layer: "flatten".into(),
        })?;
        grad_out.clone().reshape(shape)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [n, rest @ ..] if !rest.is_empty() => Ok(vec![*n, rest.iter().product()]),
            _ => Err(Error::Rank {
                op: "flatten",
                expected: 3,
                shape: input.to_vec(),
            }),
        }
    }

    fn clear_cache(&mut self) {
        self.cached = None;
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, v.len()], v).unwrap()
    }

    #[test]
    fn maxpool_hand_windows() {
        let mut p = MaxPool1d::new(3, 2, 1).unwrap();
        let y = p.forward_train(&t(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 5.0]);
        let g = p.backward(&t(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_constant_and_ties() {
        let mut p = MaxPool1d::new(2, 1, 0).unwrap();
        let y = p.forward_train(&t(&[3.0; 4])).unwrap();
        assert_eq!(y.data(), &[3.0; 3]);
        let g = p.backward(&t(&[1.0, 1.0, 1.0])).unwrap();
        // lowest index wins each tie
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_padding_never_selected() {
        let p = MaxPool1d::new(3, 1, 1).unwrap();
        let y = Layer::<f64>::infer(&p, &t(&[-5.0, -6.0])).unwrap();
        assert_eq!(y.data(), &[-5.0, -5.0]);
    }

    #[test]
    fn maxpool_rejects_padding_ge_kernel() {
        assert!(MaxPool1d::new(2, 2, 2).is_err());
    }

    #[test]
    fn stem_pool_geometry() {
        let p = MaxPool1d::new(3, 2, 1).unwrap();
        assert_eq!(Layer::<f32>::output_shape(&p, &[1, 64, 89]).unwrap(), vec![1, 64, 45]);
    }

    #[test]
    fn global_avg_cases() {
        let mut p = GlobalAvgPool1d::new();
        assert_eq!(p.forward_train(&t(&[2.0, 4.0, 6.0])).unwrap().data(), &[4.0]);
        let g = Tensor::<f64>::from_f64(&[1, 1, 1], &[3.0]).unwrap();
        assert_eq!(p.backward(&g).unwrap().data(), &[1.0, 1.0, 1.0]);
        let one = t(&[1.5]);
        assert_eq!(Layer::<f64>::infer(&p, &one).unwrap(), one);
    }

    #[test]
    fn flatten_round_trip() {
        let mut f = Flatten::new();
        let x = Tensor::<f32>::zeros(&[2, 3, 4]);
        let y = f.forward_train(&x).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
        assert_eq!(f.backward(&y).unwrap().shape(), &[2, 3, 4]);
    }
}
