use super::{expect_shape, join, Layer, LayerKind, Visit, VisitMut};
use crate::error::{Error, Result};
use crate::tensor::{channel_stats_f64, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `[N x C x L]`.
///
/// Train mode normalizes with biased batch statistics and folds them into the
/// running estimates as `running = (1 - momentum) * running + momentum * batch`.
/// Infer mode uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    momentum: f64,
    epsilon: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<f64>,
    shape: [usize; 3],
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &Tensor<T> {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut Tensor<T> {
        &mut self.gamma
    }

    pub fn beta(&self) -> &Tensor<T> {
        &self.beta
    }

    pub fn beta_mut(&mut self) -> &mut Tensor<T> {
        &mut self.beta
    }

    pub fn running_mean(&self) -> &Tensor<T> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor<T> {
        &self.running_var
    }

    pub fn running_mean_mut(&mut self) -> &mut Tensor<T> {
        &mut self.running_mean
    }

    pub fn running_var_mut(&mut self) -> &mut Tensor<T> {
        &mut self.running_var
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, l) = x.dims3("batchnorm1d")?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d channels",
                left: x.shape().to_vec(),
                right: self.gamma.shape().to_vec(),
            });
        }
        Ok((n, c, l))
    }
}

impl<T: Scalar> Layer<T> for BatchNorm1d<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::BatchNorm1d
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, l) = self.check_input(x)?;
        if n * l < 2 {
            return Err(Error::InvalidMode {
                layer: "batchnorm1d".into(),
                detail: format!("train mode needs at least 2 values per channel, got N*L = {}", n * l),
            });
        }
        let (mean, var) = channel_stats_f64(x)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();

        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = Tensor::zeros(x.shape());
        let (xs, od) = (x.data(), out.data_mut());
        for b in 0..n {
            for ch in 0..c {
                let m = T::from_f64_lossy(mean[ch]);
                let is = T::from_f64_lossy(inv_std[ch]);
                let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let base = (b * c + ch) * l;
                for i in base..base + l {
                    let h = (xs[i] - m) * is;
                    x_hat[i] = h;
                    od[i] = g * h + be;
                }
            }
        }

        let mom = self.momentum;
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = T::from_f64_lossy((1.0 - mom) * rm.as_f64() + mom * mean[ch]);
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = T::from_f64_lossy((1.0 - mom) * rv.as_f64() + mom * var[ch]);
        }

        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            shape: [n, c, l],
        });
        Ok(out)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, l) = self.check_input(x)?;
        let mut out = Tensor::zeros(x.shape());
        let (xs, od) = (x.data(), out.data_mut());
        for ch in 0..c {
            let is = 1.0 / (self.running_var.data()[ch].as_f64() + self.epsilon).sqrt();
            let scale = T::from_f64_lossy(self.gamma.data()[ch].as_f64() * is);
            let m = self.running_mean.data()[ch];
            let be = self.beta.data()[ch];
            for b in 0..n {
                let base = (b * c + ch) * l;
                for i in base..base + l {
                    od[i] = (xs[i] - m) * scale + be;
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| Error::MissingCache {
            layer: "batchnorm1d".into(),
        })?;
        let [n, c, l] = cache.shape;
        expect_shape("batchnorm1d backward", grad_out, &cache.shape)?;
        let count = (n * l) as f64;
        let gd = grad_out.data();
        let mut grad_in = Tensor::zeros(&cache.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * l;
                for (g, xh) in gd[base..base + l].iter().zip(&cache.x_hat[base..base + l]) {
                    let dy = g.as_f64();
                    sum_dy += dy;
                    sum_dy_xhat += dy * xh.as_f64();
                }
            }
            let gg = self.gamma.grad_mut();
            gg[ch] = gg[ch] + T::from_f64_lossy(sum_dy_xhat);
            let bg = self.beta.grad_mut();
            bg[ch] = bg[ch] + T::from_f64_lossy(sum_dy);

            let k = self.gamma.data()[ch].as_f64() * cache.inv_std[ch] / count;
            let gi = grad_in.data_mut();
            for b in 0..n {
                let base = (b * c + ch) * l;
                for i in base..base + l {
                    let v = k * (count * gd[i].as_f64() - sum_dy - cache.x_hat[i].as_f64() * sum_dy_xhat);
                    gi[i] = T::from_f64_lossy(v);
                }
            }
        }
        Ok(grad_in)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [_, c, _] if c == self.channels() => Ok(input.to_vec()),
            _ => Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                left: input.to_vec(),
                right: vec![self.channels()],
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
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn buffers(&self, prefix: &str, f: &mut Visit<'_, T>) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn buffers_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
