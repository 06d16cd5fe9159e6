//! Central finite-difference verification of every analytic gradient.
//!
//! All checks run in `f64`. A layer is probed through the scalar objective
//! `sum(r * layer(x))` with a fixed random projection `r`, so every output
//! element contributes; the whole-model check uses the real softmax
//! cross-entropy loss on a reduced residual network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    softmax_xent, softmax_xent_backward, uniform_init, BatchNorm1d, Conv1d, GlobalAvgPool1d, Layer, Linear, MaxPool1d,
    Mode, Relu, VisitMut,
};
use crate::models::{build_residual, ModelGraph, ResidualConfig};
use crate::tensor::Tensor;

/// Finite-difference step for layer checks.
pub const LAYER_STEP: f64 = 1e-3;
/// Smaller step for the whole-model check, which crosses many ReLU and
/// max-pool decision boundaries.
pub const MODEL_STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    /// `input` or a parameter path such as `weight`.
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(Worst {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// A differentiable scalar objective of an input tensor and some parameters.
type Gradients = (Tensor<f64>, Vec<(String, Vec<f64>)>);

trait Probe {
    fn loss(&mut self, x: &Tensor<f64>) -> Result<f64>;
    /// Input gradient and `(name, gradient)` per parameter tensor, in visit order.
    fn gradients(&mut self, x: &Tensor<f64>) -> Result<Gradients>;
    fn params_mut(&mut self, f: &mut VisitMut<'_, f64>);
}

struct LayerProbe {
    layer: Box<dyn Layer<f64>>,
    projection: Tensor<f64>,
}

impl Probe for LayerProbe {
    fn loss(&mut self, x: &Tensor<f64>) -> Result<f64> {
        let y = self.layer.forward_train(x)?;
        Ok(y.data().iter().zip(self.projection.data()).map(|(a, b)| a * b).sum())
    }

    fn gradients(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<(String, Vec<f64>)>)> {
        self.layer.params_mut("", &mut |_, t| t.zero_grad());
        self.layer.forward_train(x)?;
        let gin = self.layer.backward(&self.projection)?;
        let mut grads = Vec::new();
        self.layer.params("", &mut |name, t| {
            grads.push((
                name.to_string(),
                t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]),
            ))
        });
        Ok((gin, grads))
    }

    fn params_mut(&mut self, f: &mut VisitMut<'_, f64>) {
        self.layer.params_mut("", f);
    }
}

struct XentProbe {
    labels: Vec<usize>,
}

impl Probe for XentProbe {
    fn loss(&mut self, x: &Tensor<f64>) -> Result<f64> {
        Ok(softmax_xent(x, &self.labels)?.loss)
    }

    fn gradients(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<(String, Vec<f64>)>)> {
        let out = softmax_xent(x, &self.labels)?;
        Ok((softmax_xent_backward(&out.probs, &self.labels)?, Vec::new()))
    }

    fn params_mut(&mut self, _f: &mut VisitMut<'_, f64>) {}
}

struct ModelProbe {
    model: ModelGraph<f64>,
    labels: Vec<usize>,
}

impl Probe for ModelProbe {
    fn loss(&mut self, x: &Tensor<f64>) -> Result<f64> {
        let logits = self.model.forward(x, Mode::Train)?;
        Ok(softmax_xent(&logits, &self.labels)?.loss)
    }

    fn gradients(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<(String, Vec<f64>)>)> {
        self.model.zero_grad();
        let logits = self.model.forward(x, Mode::Train)?;
        let out = softmax_xent(&logits, &self.labels)?;
        let gin = self.model.backward(&softmax_xent_backward(&out.probs, &self.labels)?)?;
        let mut grads = Vec::new();
        self.model.visit_params(&mut |name, t| {
            grads.push((
                name.to_string(),
                t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]),
            ))
        });
        Ok((gin, grads))
    }

    fn params_mut(&mut self, f: &mut VisitMut<'_, f64>) {
        self.model.visit_params_mut(f);
    }
}

fn nudge(probe: &mut dyn Probe, tensor: usize, index: usize, delta: f64) {
    let mut seen = 0;
    probe.params_mut(&mut |_, t| {
        if seen == tensor {
            t.data_mut()[index] += delta;
        }
        seen += 1;
    });
}

fn run_probe(probe: &mut dyn Probe, x: &Tensor<f64>, step: f64) -> Result<GradReport> {
    let (gin, grads) = probe.gradients(x)?;
    let mut report = GradReport::new();

    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let plus = probe.loss(&xp)?;
        xp.data_mut()[i] = orig - step;
        let minus = probe.loss(&xp)?;
        xp.data_mut()[i] = orig;
        report.record("input", i, gin.data()[i], (plus - minus) / (2.0 * step));
    }

    for (ti, (name, analytic)) in grads.iter().enumerate() {
        for (i, &a) in analytic.iter().enumerate() {
            nudge(probe, ti, i, step);
            let plus = probe.loss(x)?;
            nudge(probe, ti, i, -2.0 * step);
            let minus = probe.loss(x)?;
            nudge(probe, ti, i, step);
            report.record(name, i, a, (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks a layer's input and parameter gradients at `x`.
pub fn check_layer(layer: Box<dyn Layer<f64>>, x: &Tensor<f64>, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = layer.output_shape(x.shape())?;
    let projection = uniform_init(&out_shape, 1.0, &mut rng);
    let mut probe = LayerProbe { layer, projection };
    run_probe(&mut probe, x, LAYER_STEP)
}

pub fn check_softmax_xent(logits: &Tensor<f64>, labels: &[usize]) -> Result<GradReport> {
    let mut probe = XentProbe {
        labels: labels.to_vec(),
    };
    run_probe(&mut probe, logits, LAYER_STEP)
}

/// Whole-model check of a residual network through the real loss.
pub fn check_model(model: ModelGraph<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<GradReport> {
    let mut probe = ModelProbe {
        model,
        labels: labels.to_vec(),
    };
    run_probe(&mut probe, x, MODEL_STEP)
}

/// Reduced residual network: two stages of one block each on length-16 input.
pub fn reduced_resnet(seed: u64) -> Result<ModelGraph<f64>> {
    build_residual(
        &ResidualConfig {
            stem_channels: 4,
            stages: vec![(4, 1), (8, 1)],
            num_classes: 3,
            input_len: 16,
        },
        seed,
    )
}

/// Random values whose magnitude is at least `margin`, away from the ReLU kink.
pub fn away_from_zero(shape: &[usize], margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).expect("valid shape")
}

/// Distinct values spaced `gap` apart in random order, so no pooling window has a near-tie.
pub fn distinct_values(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    data.shuffle(rng);
    Tensor::from_f64(shape, &data).expect("valid shape")
}

type CheckFn = Box<dyn Fn() -> Result<GradReport>>;

/// One line of the verification report.
pub struct CheckCase {
    pub name: String,
    pub shape: String,
    pub threshold: f64,
    run: CheckFn,
}

impl CheckCase {
    pub fn new(name: &str, shape: &str, threshold: f64, run: impl Fn() -> Result<GradReport> + 'static) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_string(),
            threshold,
            run: Box::new(run),
        }
    }

    /// Layer case with a fresh layer from `make` at the fixed input `x`.
    pub fn layer(name: &str, make: impl Fn() -> Box<dyn Layer<f64>> + 'static, x: Tensor<f64>, seed: u64) -> Self {
        let shape = format!("{:?}", x.shape());
        Self::new(name, &shape, LAYER_TOLERANCE, move || check_layer(make(), &x, seed))
    }

    pub fn run(&self) -> CheckOutcome {
        match (self.run)() {
            Ok(report) => CheckOutcome {
                name: self.name.clone(),
                shape: self.shape.clone(),
                threshold: self.threshold,
                passed: report.max_rel_error < self.threshold,
                report: Some(report),
                error: None,
            },
            Err(e) => CheckOutcome {
                name: self.name.clone(),
                shape: self.shape.clone(),
                threshold: self.threshold,
                passed: false,
                report: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub shape: String,
    pub threshold: f64,
    pub passed: bool,
    pub report: Option<GradReport>,
    pub error: Option<String>,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<18} shape {:<12}", self.name, self.shape)?;
        match (&self.report, &self.error) {
            (Some(r), _) => {
                write!(
                    f,
                    " max_rel_err {:.3e} (< {:.0e}, {} entries)",
                    r.max_rel_error, self.threshold, r.checked
                )?;
                if let (false, Some(w)) = (self.passed, &r.worst) {
                    write!(
                        f,
                        " worst {}[{}] analytic {:.6e} numeric {:.6e}",
                        w.tensor, w.index, w.analytic, w.numeric
                    )?;
                }
                Ok(())
            }
            (None, Some(e)) => write!(f, " error: {e}"),
            (None, None) => Ok(()),
        }
    }
}

/// Seven layer kinds plus the reduced whole-model check.
pub fn standard_cases(seed: u64) -> Vec<CheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let conv_x: Tensor<f64> = uniform_init(&[2, 3, 8], 1.0, &mut rng);
    let conv_seed = rng.gen();
    cases.push(CheckCase::layer(
        "conv1d",
        move || {
            let mut r = ChaCha8Rng::seed_from_u64(conv_seed);
            let mut c = Conv1d::<f64>::new(3, 4, 3, 1, 1, &mut r);
            *c.bias_mut() = uniform_init(&[4], 0.5, &mut r);
            Box::new(c)
        },
        conv_x,
        rng.gen(),
    ));

    let bn_x: Tensor<f64> = uniform_init(&[4, 2, 6], 2.0, &mut rng);
    let bn_seed = rng.gen();
    cases.push(CheckCase::layer(
        "batchnorm1d",
        move || {
            let mut r = ChaCha8Rng::seed_from_u64(bn_seed);
            let mut bn = BatchNorm1d::<f64>::new(2);
            *bn.gamma_mut() = Tensor::from_f64(&[2], &[r.gen_range(0.5..1.5), r.gen_range(0.5..1.5)]).unwrap();
            *bn.beta_mut() = uniform_init(&[2], 0.5, &mut r);
            Box::new(bn)
        },
        bn_x,
        rng.gen(),
    ));

    let relu_x = away_from_zero(&[2, 3, 8], 1e-2, &mut rng);
    cases.push(CheckCase::layer("relu", || Box::new(Relu::new()), relu_x, rng.gen()));

    let pool_x = distinct_values(&[2, 3, 8], 1e-2, &mut rng);
    cases.push(CheckCase::layer(
        "maxpool1d",
        || Box::new(MaxPool1d::new(3, 2, 1).expect("valid pool")),
        pool_x,
        rng.gen(),
    ));

    let gap_x: Tensor<f64> = uniform_init(&[2, 3, 8], 1.0, &mut rng);
    cases.push(CheckCase::layer(
        "global_avgpool1d",
        || Box::new(GlobalAvgPool1d::new()),
        gap_x,
        rng.gen(),
    ));

    let lin_x: Tensor<f64> = uniform_init(&[3, 5], 1.0, &mut rng);
    let lin_seed = rng.gen();
    cases.push(CheckCase::layer(
        "linear",
        move || Box::new(Linear::<f64>::new(5, 4, &mut ChaCha8Rng::seed_from_u64(lin_seed))),
        lin_x,
        rng.gen(),
    ));

    let logits: Tensor<f64> = uniform_init(&[3, 5], 2.0, &mut rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
    cases.push(CheckCase::new("softmax_xent", "[3, 5]", LAYER_TOLERANCE, move || {
        check_softmax_xent(&logits, &labels)
    }));

    let model_x: Tensor<f64> = uniform_init(&[2, 1, 16], 1.0, &mut rng);
    let model_labels: Vec<usize> = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
    let model_seed = rng.gen();
    cases.push(CheckCase::new("model", "[2, 1, 16]", MODEL_TOLERANCE, move || {
        check_model(reduced_resnet(model_seed)?, &model_x, &model_labels)
    }));

    cases
}

pub fn run_cases(cases: &[CheckCase]) -> Vec<CheckOutcome> {
    cases.iter().map(CheckCase::run).collect()
}
