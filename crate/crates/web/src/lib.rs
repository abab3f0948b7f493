//! Browser bindings: the hidden-layer z subproblem, the descent constants,
//! and a small trainer on two-dimensional synthetic clusters.

use wasm_bindgen::prelude::*;

use pdadmm::dataset::{label_indices, Dataset};
use pdadmm::diagnostics::{accuracy, lagrangian, objective_f, predict, residuals, DescentConstants};
use pdadmm::model::{init_state, HyperParams, ModelState, NetworkSpec};
use pdadmm::solvers::{relu_z_entry, relu_z_objective};
use pdadmm::trainer::{ExecMode, Trainer};
use pdadmm::Matrix;

/// `points` samples of the scalar z objective on `[lo, hi]`.
#[wasm_bindgen]
pub fn z_objective_profile(a: f64, z_prev: f64, q: f64, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n)
        .map(|i| {
            let z = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            relu_z_objective(z, a, z_prev, q)
        })
        .collect()
}

#[wasm_bindgen]
pub fn z_minimizer(a: f64, z_prev: f64, q: f64) -> f64 {
    relu_z_entry(a, z_prev, q)
}

/// `[C1, C2, rho threshold]`.
#[wasm_bindgen]
pub fn descent_constants(rho: f64, nu: f64, lipschitz: f64) -> Vec<f64> {
    let hp = HyperParams {
        lipschitz_s: lipschitz,
        ..HyperParams::with_penalties(rho, nu)
    };
    let k = DescentConstants::new(&hp);
    vec![k.c1, k.c2, k.rho_threshold]
}

#[wasm_bindgen]
pub struct Demo {
    data: Dataset,
    state: ModelState,
    trainer: Trainer,
    epoch: usize,
}

impl Demo {
    fn build(rho: f64, nu: f64, hidden: usize, width: usize, seed: u64) -> pdadmm::Result<Demo> {
        let hp = HyperParams::with_penalties(rho, nu);
        hp.validate(pdadmm::model::Activation::Relu)?;
        let data = Dataset::synthetic_blobs(2, 3, 240, seed);
        let spec = NetworkSpec::uniform(2, hidden, width, 3)?;
        let state = init_state(&spec, &data, &hp, seed)?;
        let trainer = Trainer::new(hp, ExecMode::Serial)?;
        Ok(Demo {
            data,
            state,
            trainer,
            epoch: 0,
        })
    }

    fn advance(&mut self, iterations: usize) -> pdadmm::Result<Vec<f64>> {
        for _ in 0..iterations {
            self.trainer.run_iteration(&mut self.state)?;
            self.epoch += 1;
        }
        let hp = self.trainer.hyper_params();
        Ok(vec![
            self.epoch as f64,
            lagrangian(&self.state, hp)?,
            objective_f(&self.state, hp)?,
            residuals(&self.state)?.iter().sum(),
            accuracy(&self.state)?,
        ])
    }

    fn grid(&self, resolution: usize) -> pdadmm::Result<Vec<u8>> {
        let n = resolution.max(1);
        let mut x = Matrix::zeros(2, n * n);
        for row in 0..n {
            for col in 0..n {
                x.set(0, row * n + col, (col as f64 + 0.5) / n as f64);
                x.set(1, row * n + col, 1.0 - (row as f64 + 0.5) / n as f64);
            }
        }
        let scores = predict(&self.state.layers, &x)?;
        Ok((0..n * n)
            .map(|j| {
                (0..scores.rows())
                    .max_by(|&a, &b| scores.get(a, j).total_cmp(&scores.get(b, j)))
                    .unwrap_or(0) as u8
            })
            .collect())
    }
}

fn js(e: pdadmm::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// Three clusters of 80 points in the unit square.
    #[wasm_bindgen(constructor)]
    pub fn new(rho: f64, nu: f64, hidden: usize, width: usize, seed: u64) -> Result<Demo, JsError> {
        Demo::build(rho, nu, hidden, width, seed).map_err(js)
    }

    /// Runs `iterations` and returns `[epoch, L, F, residual, accuracy]`.
    pub fn step(&mut self, iterations: usize) -> Result<Vec<f64>, JsError> {
        self.advance(iterations).map_err(js)
    }

    /// Predicted class per cell of a `resolution x resolution` grid over the
    /// unit square, row-major from the top.
    pub fn decision_grid(&self, resolution: usize) -> Result<Vec<u8>, JsError> {
        self.grid(resolution).map_err(js)
    }

    /// `x, y, class` triples.
    pub fn points(&self) -> Vec<f64> {
        let x = self.data.features();
        label_indices(self.data.labels())
            .into_iter()
            .enumerate()
            .flat_map(|(j, c)| [x.get(0, j), x.get(1, j), c as f64])
            .collect()
    }
}
