use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, BatchNorm1d, Conv1d, Layer, LayerKind, Relu, Visit, VisitMut};
use crate::tensor::{add_assign, Scalar, Tensor};

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Shortcut<T: Scalar> {
    Identity,
    Projection { conv: Conv1d<T>, bn: BatchNorm1d<T> },
}

/// Residual unit: `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
///
/// Both convolutions have kernel 3 and padding 1; the first carries the
/// block stride. The shortcut is the identity when shapes already agree and a
/// strided kernel-1 projection followed by batch norm otherwise.
#[derive(Debug, Clone)]
pub struct BasicBlock<T: Scalar> {
    conv1: Conv1d<T>,
    bn1: BatchNorm1d<T>,
    relu1: Relu,
    conv2: Conv1d<T>,
    bn2: BatchNorm1d<T>,
    shortcut: Shortcut<T>,
    out_relu: Relu,
    shortcut_enabled: bool,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv1d::new(in_channels, out_channels, 3, stride, 1, rng);
        let conv2 = Conv1d::new(out_channels, out_channels, 3, 1, 1, rng);
        let shortcut = if in_channels == out_channels && stride == 1 {
            Shortcut::Identity
        } else {
            Shortcut::Projection {
                conv: Conv1d::new(in_channels, out_channels, 1, stride, 0, rng),
                bn: BatchNorm1d::new(out_channels),
            }
        };
        Self {
            conv1,
            bn1: BatchNorm1d::new(out_channels),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm1d::new(out_channels),
            shortcut,
            out_relu: Relu::new(),
            shortcut_enabled: true,
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn shortcut(&self) -> &Shortcut<T> {
        &self.shortcut
    }

    pub fn has_identity_shortcut(&self) -> bool {
        matches!(self.shortcut, Shortcut::Identity)
    }

    /// Ablation switch: with the shortcut disabled the block computes `relu(main(x))`.
    pub fn set_shortcut_enabled(&mut self, enabled: bool) {
        self.shortcut_enabled = enabled;
    }

    pub fn convs_mut(&mut self) -> [&mut Conv1d<T>; 2] {
        [&mut self.conv1, &mut self.conv2]
    }

    pub fn norms_mut(&mut self) -> [&mut BatchNorm1d<T>; 2] {
        [&mut self.bn1, &mut self.bn2]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, _) = x.dims3("basic_block")?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "basic_block input channels",
                left: x.shape().to_vec(),
                right: vec![self.in_channels],
            });
        }
        Ok(())
    }

    fn merge(&self, mut main: Tensor<T>, short: Option<Tensor<T>>) -> Result<Tensor<T>> {
        if let Some(s) = short {
            if s.shape() != main.shape() {
                return Err(Error::ShapeMismatch {
                    op: "basic_block residual add",
                    left: main.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
            add_assign(&mut main, &s)?;
        }
        Ok(main)
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::BasicBlock
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = self.conv1.forward_train(x)?;
        let h = self.bn1.forward_train(&h)?;
        let h = self.relu1.forward_train(&h)?;
        let h = self.conv2.forward_train(&h)?;
        let main = self.bn2.forward_train(&h)?;
        let short = if !self.shortcut_enabled {
            None
        } else {
            Some(match &mut self.shortcut {
                Shortcut::Identity => x.clone(),
                Shortcut::Projection { conv, bn } => {
                    let s = conv.forward_train(x)?;
                    bn.forward_train(&s)?
                }
            })
        };
        let sum = self.merge(main, short)?;
        self.out_relu.forward_train(&sum)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = self.conv1.infer(x)?;
        let h = self.bn1.infer(&h)?;
        let h = Layer::<T>::infer(&self.relu1, &h)?;
        let h = self.conv2.infer(&h)?;
        let main = self.bn2.infer(&h)?;
        let short = if !self.shortcut_enabled {
            None
        } else {
            Some(match &self.shortcut {
                Shortcut::Identity => x.clone(),
                Shortcut::Projection { conv, bn } => bn.infer(&conv.infer(x)?)?,
            })
        };
        let sum = self.merge(main, short)?;
        Layer::<T>::infer(&self.out_relu, &sum)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.out_relu.backward(grad_out)?;
        let h = self.bn2.backward(&g)?;
        let h = self.conv2.backward(&h)?;
        let h = self.relu1.backward(&h)?;
        let h = self.bn1.backward(&h)?;
        let mut grad_in = self.conv1.backward(&h)?;
        if self.shortcut_enabled {
            match &mut self.shortcut {
                Shortcut::Identity => add_assign(&mut grad_in, &g)?,
                Shortcut::Projection { conv, bn } => {
                    let s = bn.backward(&g)?;
                    add_assign(&mut grad_in, &conv.backward(&s)?)?;
                }
            }
        }
        Ok(grad_in)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let main = self.conv1.output_shape(input)?;
        let main = self.conv2.output_shape(&main)?;
        if let Shortcut::Projection { conv, .. } = &self.shortcut {
            let s = conv.output_shape(input)?;
            if s != main {
                return Err(Error::ShapeMismatch {
                    op: "basic_block residual add",
                    left: main,
                    right: s,
                });
            }
        } else if main != input {
            return Err(Error::ShapeMismatch {
                op: "basic_block residual add",
                left: main,
                right: input.to_vec(),
            });
        }
        Ok(main)
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        Layer::<T>::clear_cache(&mut self.relu1);
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        if let Shortcut::Projection { conv, bn } = &mut self.shortcut {
            conv.clear_cache();
            bn.clear_cache();
        }
        Layer::<T>::clear_cache(&mut self.out_relu);
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }

    fn params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        self.conv1.params(&join(prefix, "conv1"), f);
        self.bn1.params(&join(prefix, "bn1"), f);
        self.conv2.params(&join(prefix, "conv2"), f);
        self.bn2.params(&join(prefix, "bn2"), f);
        if let Shortcut::Projection { conv, bn } = &self.shortcut {
            conv.params(&join(prefix, "shortcut.conv"), f);
            bn.params(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        self.conv1.params_mut(&join(prefix, "conv1"), f);
        self.bn1.params_mut(&join(prefix, "bn1"), f);
        self.conv2.params_mut(&join(prefix, "conv2"), f);
        self.bn2.params_mut(&join(prefix, "bn2"), f);
        if let Shortcut::Projection { conv, bn } = &mut self.shortcut {
            conv.params_mut(&join(prefix, "shortcut.conv"), f);
            bn.params_mut(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn buffers(&self, prefix: &str, f: &mut Visit<'_, T>) {
        self.bn1.buffers(&join(prefix, "bn1"), f);
        self.bn2.buffers(&join(prefix, "bn2"), f);
        if let Shortcut::Projection { bn, .. } = &self.shortcut {
            bn.buffers(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn buffers_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        self.bn1.buffers_mut(&join(prefix, "bn1"), f);
        self.bn2.buffers_mut(&join(prefix, "bn2"), f);
        if let Shortcut::Projection { bn, .. } = &mut self.shortcut {
            bn.buffers_mut(&join(prefix, "shortcut.bn"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shortcut_kind_follows_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(BasicBlock::<f32>::new(8, 8, 1, &mut rng).has_identity_shortcut());
        assert!(!BasicBlock::<f32>::new(8, 16, 2, &mut rng).has_identity_shortcut());
        assert!(!BasicBlock::<f32>::new(8, 8, 2, &mut rng).has_identity_shortcut());
        assert!(!BasicBlock::<f32>::new(4, 8, 1, &mut rng).has_identity_shortcut());
    }

    #[test]
    fn annihilated_main_path_passes_relu_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = BasicBlock::<f32>::new(3, 3, 1, &mut rng);
        for c in block.convs_mut() {
            c.weight_mut().data_mut().fill(0.0);
        }
        for bn in block.norms_mut() {
            bn.gamma_mut().data_mut().fill(0.0);
        }
        let x: Tensor<f32> = uniform_init(&[2, 3, 7], 1.0, &mut rng);
        let relu_x: Vec<f32> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(block.forward_train(&x).unwrap().data(), relu_x.as_slice());

        let pos = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.abs()).collect()).unwrap();
        assert_eq!(block.infer(&pos).unwrap(), pos);
    }

    #[test]
    fn disabled_shortcut_equals_main_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = BasicBlock::<f64>::new(2, 4, 2, &mut rng);
        let x: Tensor<f64> = uniform_init(&[2, 2, 9], 1.0, &mut rng);
        block.set_shortcut_enabled(false);
        let y = block.forward_train(&x).unwrap();

        let mut h = block.conv1.forward_train(&x).unwrap();
        h = block.bn1.forward_train(&h).unwrap();
        h = block.relu1.forward_train(&h).unwrap();
        h = block.conv2.forward_train(&h).unwrap();
        h = block.bn2.forward_train(&h).unwrap();
        let main: Vec<f64> = h.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(y.data(), main.as_slice());
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = BasicBlock::<f32>::new(4, 4, 1, &mut rng);
        assert!(block.infer(&Tensor::zeros(&[1, 3, 8])).is_err());
    }

    #[test]
    fn strided_block_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = BasicBlock::<f32>::new(64, 128, 2, &mut rng);
        assert_eq!(block.output_shape(&[1, 64, 45]).unwrap(), vec![1, 128, 23]);
    }
}
