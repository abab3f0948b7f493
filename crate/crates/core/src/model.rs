//! Network architecture, the full ADMM iterate, and hyperparameters.
//!
//! Layers are stored 0-based: `layers[0]` is the first layer, whose input copy
//! `p` is the fixed data matrix. Every layer except the last owns an output
//! copy `q` and the dual `u` that ties `q` to the next layer's `p`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{matmul, relu, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Relu => relu(z),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `n_0, n_1, ..., n_L`: input width, hidden widths, class count.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        let spec = NetworkSpec {
            layer_widths,
            activation: Activation::Relu,
            loss: Loss::SoftmaxCrossEntropy,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Input width, `hidden_layers` layers of `width` neurons, then `classes`.
    pub fn uniform(inputs: usize, hidden_layers: usize, width: usize, classes: usize) -> Result<Self> {
        let mut widths = vec![inputs];
        widths.extend(std::iter::repeat_n(width, hidden_layers));
        widths.push(classes);
        Self::new(widths)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::InvalidNetwork(format!(
                "need at least two layers (three widths), got widths {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "all widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    /// `L`, the number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.num_features() != self.input_width() {
            return Err(Error::InvalidNetwork(format!(
                "input width {} does not match dataset feature count {}",
                self.input_width(),
                data.num_features()
            )));
        }
        if data.num_classes() != self.output_width() {
            return Err(Error::InvalidNetwork(format!(
                "output width {} does not match dataset class count {}",
                self.output_width(),
                data.num_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub rho: f64,
    pub nu: f64,
    pub tau_init: f64,
    pub theta_init: f64,
    pub backtrack_growth: f64,
    pub backtrack_shrink: f64,
    pub fista_max_iters: usize,
    pub fista_tol: f64,
    pub lipschitz_s: f64,
    pub subgrad_bound_m: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            rho: 1e-4,
            nu: 1e-4,
            tau_init: 1e-6,
            theta_init: 1e-6,
            backtrack_growth: 2.0,
            backtrack_shrink: 0.9,
            fista_max_iters: 50,
            fista_tol: 1e-8,
            lipschitz_s: 1.0,
            subgrad_bound_m: 1.0,
        }
    }
}

impl HyperParams {
    pub fn with_penalties(rho: f64, nu: f64) -> Self {
        HyperParams {
            rho,
            nu,
            ..Default::default()
        }
    }

    pub fn validate(&self, activation: Activation) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("nu", self.nu),
            ("tau_init", self.tau_init),
            ("theta_init", self.theta_init),
            ("fista_tol", self.fista_tol),
            ("lipschitz_s", self.lipschitz_s),
            ("subgrad_bound_m", self.subgrad_bound_m),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidHyperParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.backtrack_growth.is_finite() && self.backtrack_growth > 1.0) {
            return Err(Error::InvalidHyperParams(format!(
                "backtrack_growth must exceed 1, got {}",
                self.backtrack_growth
            )));
        }
        if !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0) {
            return Err(Error::InvalidHyperParams(format!(
                "backtrack_shrink must lie in (0, 1), got {}",
                self.backtrack_shrink
            )));
        }
        if self.fista_max_iters == 0 {
            return Err(Error::InvalidHyperParams("fista_max_iters must be positive".into()));
        }
        match activation {
            Activation::Relu if self.lipschitz_s != 1.0 || self.subgrad_bound_m != 1.0 => {
                Err(Error::InvalidHyperParams(
                    "relu requires lipschitz_s = 1 and subgrad_bound_m = 1".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Backtracking seeds carried from one iteration to the next.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSeeds {
    pub tau: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub z: Matrix,
    /// Input copy; for the first layer this is the data matrix.
    pub p: Matrix,
    /// Output copy, absent on the last layer.
    pub q: Option<Matrix>,
    /// Dual for `p_{l+1} = q_l`, absent on the last layer.
    pub u: Option<Matrix>,
    pub seeds: StepSeeds,
}

impl LayerBlock {
    pub fn is_output(&self) -> bool {
        self.q.is_none()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self.b.iter().all(|x| x.is_finite())
            && self.z.is_finite()
            && self.p.is_finite()
            && self.q.as_ref().is_none_or(Matrix::is_finite)
            && self.u.as_ref().is_none_or(Matrix::is_finite)
    }

    pub fn q(&self) -> &Matrix {
        self.q.as_ref().expect("output layer has no q")
    }

    pub fn u(&self) -> &Matrix {
        self.u.as_ref().expect("output layer has no u")
    }
}

/// Complete ADMM iterate together with the labels it is trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerBlock>,
    pub labels: Matrix,
}

impl ModelState {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_samples(&self) -> usize {
        self.labels.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.layers[0].p
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerBlock::is_finite)
    }

    /// Checks every block's shape against the spec and sample count.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.num_samples();
        let l_count = self.spec.num_layers();
        if self.layers.len() != l_count {
            return Err(Error::InvalidNetwork(format!(
                "spec has {l_count} layers, state has {}",
                self.layers.len()
            )));
        }
        if self.labels.rows() != self.spec.output_width() {
            return Err(Error::InvalidNetwork("label rows do not match output width".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let bad = |what: &str| Error::InvalidNetwork(format!("layer {} has a malformed {what}", l + 1));
            if layer.w.shape() != (n_out, n_in) {
                return Err(bad("W"));
            }
            if layer.b.len() != n_out {
                return Err(bad("b"));
            }
            if layer.z.shape() != (n_out, n) {
                return Err(bad("z"));
            }
            if layer.p.shape() != (n_in, n) {
                return Err(bad("p"));
            }
            let hidden = l + 1 < l_count;
            for (name, m) in [("q", &layer.q), ("u", &layer.u)] {
                match (hidden, m) {
                    (true, Some(m)) if m.shape() == (n_out, n) => {}
                    (false, None) => {}
                    _ => return Err(bad(name)),
                }
            }
        }
        Ok(())
    }
}

fn he_weights(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// A layer initialized by a forward pass from `input`.
fn forward_layer(
    input: Matrix,
    n_out: usize,
    hidden: bool,
    activation: Activation,
    hp: &HyperParams,
    rng: &mut ChaCha8Rng,
) -> LayerBlock {
    let w = he_weights(n_out, input.rows(), rng);
    let z = matmul(&w, &input).expect("shapes agree by construction");
    let (q, u) = if hidden {
        let n = z.cols();
        (Some(activation.apply(&z)), Some(Matrix::zeros(n_out, n)))
    } else {
        (None, None)
    };
    LayerBlock {
        w,
        b: vec![0.0; n_out],
        z,
        p: input,
        q,
        u,
        seeds: StepSeeds {
            tau: hp.tau_init,
            theta: hp.theta_init,
        },
    }
}

/// Random He-scaled weights, zero biases, and every other block filled by a
/// forward pass, so all residuals and duals start at exactly zero.
pub fn init_state(spec: &NetworkSpec, data: &Dataset, hp: &HyperParams, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    spec.check_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_count = spec.num_layers();
    let mut layers = Vec::with_capacity(l_count);
    let mut input = data.features().clone();
    for l in 0..l_count {
        let hidden = l + 1 < l_count;
        let layer = forward_layer(input, spec.layer_widths[l + 1], hidden, spec.activation, hp, &mut rng);
        input = match &layer.q {
            Some(q) => q.clone(),
            None => Matrix::zeros(0, 0),
        };
        layers.push(layer);
    }
    Ok(ModelState {
        spec: spec.clone(),
        layers,
        labels: data.labels().clone(),
    })
}

/// Inserts `extra_layers` hidden layers directly before the output layer.
///
/// New layers take the width of the current last hidden layer and are filled
/// forward-consistently from that layer's `q`. The output layer keeps its
/// weights and bias; its input copy and pre-activation are refreshed from the
/// new last hidden layer.
pub fn grow_network(state: &mut ModelState, extra_layers: usize, hp: &HyperParams, seed: u64) -> Result<()> {
    if extra_layers == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_count = state.num_layers();
    let width = state.spec.layer_widths[l_count - 1];
    let activation = state.spec.activation;
    let mut inserted = Vec::with_capacity(extra_layers);
    let mut input = state.layers[l_count - 2].q().clone();
    for _ in 0..extra_layers {
        let layer = forward_layer(input, width, true, activation, hp, &mut rng);
        input = layer.q().clone();
        inserted.push(layer);
    }
    let mut output = state.layers.pop().expect("at least two layers");
    output.z = matmul(&output.w, &input)?.add_row_bias(&output.b)?;
    output.p = input;
    state.layers.extend(inserted);
    state.layers.push(output);
    let out_width = state.spec.output_width();
    state.spec.layer_widths.pop();
    state
        .spec
        .layer_widths
        .extend(std::iter::repeat_n(width, extra_layers));
    state.spec.layer_widths.push(out_width);
    state.validate()
}
