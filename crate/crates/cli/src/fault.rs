use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seiznet::gradcheck::CheckCase;
use seiznet::layers::{uniform_init, Conv1d, Layer, LayerKind, Visit, VisitMut};
use seiznet::{Result, Tensor};

/// Conv layer whose backward overstates the input gradient by 10%; used to
/// show that the gradient check catches a broken kernel.
struct CorruptedConv(Conv1d<f64>);

impl Layer<f64> for CorruptedConv {
    fn kind(&self) -> LayerKind {
        LayerKind::Conv1d
    }

    fn forward_train(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.forward_train(x)
    }

    fn infer(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0.infer(x)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = self.0.backward(grad_out)?;
        g.data_mut().iter_mut().for_each(|v| *v *= 1.1);
        Ok(g)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.0.output_shape(input)
    }

    fn clear_cache(&mut self) {
        self.0.clear_cache()
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }

    fn params(&self, prefix: &str, f: &mut Visit<'_, f64>) {
        self.0.params(prefix, f)
    }

    fn params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, f64>) {
        self.0.params_mut(prefix, f)
    }
}

pub(crate) fn corrupted_conv_case(seed: u64) -> CheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Tensor<f64> = uniform_init(&[2, 3, 8], 1.0, &mut rng);
    let conv_seed: u64 = rng.gen();
    CheckCase::layer(
        "conv1d",
        move || {
            let mut r = ChaCha8Rng::seed_from_u64(conv_seed);
            Box::new(CorruptedConv(Conv1d::new(3, 4, 3, 1, 1, &mut r)))
        },
        x,
        rng.gen(),
    )
}
