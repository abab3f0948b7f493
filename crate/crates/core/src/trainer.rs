//! Iteration driver: six barrier-separated phases per iteration, each phase
//! fanning out one task per layer.
//!
//! Every task of a phase reads only the state as it was before the phase and
//! returns a staged value. The coordinator commits all staged values after
//! the barrier and keeps the replaced blocks so a later failure can restore
//! the iterate exactly. Because each task runs the same single-threaded code
//! whichever worker picks it up, serial and parallel runs are bit-identical.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diagnostics::{
    accuracy, check_descent, check_stationarity, dual_identity_gap, max_iterate_abs, objective_parts,
    DescentCertificate, DescentConstants, DescentTerms, StationarityReport, StepNorms,
};
use crate::error::{Error, Result};
use crate::matrix::{frob_sq_diff, matmul, Matrix};
use crate::model::{grow_network, init_state, HyperParams, ModelState, NetworkSpec, StepSeeds};
use crate::solvers::{
    bias_from_product, update_p, update_q, update_u, update_w, update_z_hidden, update_z_output, Coupling,
    PhiContext,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Serial,
    Parallel { workers: usize },
}

impl ExecMode {
    pub fn workers(self) -> usize {
        match self {
            ExecMode::Serial => 1,
            ExecMode::Parallel { workers } => workers,
        }
    }
}

/// Wall time of each phase of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub p: u64,
    pub w: u64,
    pub b: u64,
    pub z: u64,
    pub q: u64,
    pub u: u64,
}

impl PhaseTiming {
    pub fn total_ns(&self) -> u64 {
        self.p + self.w + self.b + self.z + self.q + self.u
    }
}

/// Wall clock for phase timings. Reads zero on wasm32, where `Instant` is
/// unavailable.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn nanos(&self) -> u64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_nanos() as u64;
        #[cfg(target_arch = "wasm32")]
        return 0;
    }
}

/// Everything one iteration reports besides the new state.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutcome {
    pub steps: StepNorms,
    pub timing: PhaseTiming,
    /// `W_l p_l` at the new iterate.
    pub products: Vec<Matrix>,
}

// replaced blocks, in commit order
#[derive(Default)]
struct Undo {
    p: Vec<(usize, Matrix)>,
    w: Vec<(usize, Matrix)>,
    b: Vec<(usize, Vec<f64>)>,
    z: Vec<(usize, Matrix)>,
    q: Vec<(usize, Matrix)>,
    u: Vec<(usize, Matrix)>,
    // certified step coefficients; not restored
    tau: Vec<(usize, f64)>,
    theta: Vec<(usize, f64)>,
    seeds: Vec<StepSeeds>,
}

impl Undo {
    fn restore(self, state: &mut ModelState) {
        for (l, m) in self.p {
            state.layers[l].p = m;
        }
        for (l, m) in self.w {
            state.layers[l].w = m;
        }
        for (l, v) in self.b {
            state.layers[l].b = v;
        }
        for (l, m) in self.z {
            state.layers[l].z = m;
        }
        for (l, m) in self.q {
            state.layers[l].q = Some(m);
        }
        for (l, m) in self.u {
            state.layers[l].u = Some(m);
        }
        for (layer, seeds) in state.layers.iter_mut().zip(self.seeds) {
            layer.seeds = seeds;
        }
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

fn layer_error(l: usize, e: Error) -> Error {
    match e {
        Error::BacktrackFailed { coeff, .. } => Error::BacktrackFailed { layer: l + 1, coeff },
        other => other,
    }
}

/// Runs iterations in serial or on a dedicated worker pool.
pub struct Trainer {
    hp: HyperParams,
    mode: ExecMode,
    pool: Option<rayon::ThreadPool>,
    #[cfg(test)]
    fail_phase: Option<&'static str>,
}

impl Trainer {
    pub fn new(hp: HyperParams, mode: ExecMode) -> Result<Self> {
        let pool = match mode {
            ExecMode::Serial => None,
            ExecMode::Parallel { workers } => {
                if workers == 0 {
                    return Err(Error::InvalidConfig("workers must be at least 1".into()));
                }
                Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(workers)
                        .thread_name(|i| format!("pdadmm-worker-{i}"))
                        .build()
                        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?,
                )
            }
        };
        Ok(Trainer {
            hp,
            mode,
            pool,
            #[cfg(test)]
            fail_phase: None,
        })
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    /// One task per layer; results come back in layer order.
    fn fan_out<T, F>(&self, phase: &'static str, layers: usize, task: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        let guarded = |l: usize| -> Result<T> {
            let run = || {
                #[cfg(test)]
                if self.fail_phase == Some(phase) && l + 1 == layers {
                    panic!("injected failure");
                }
                task(l)
            };
            match catch_unwind(AssertUnwindSafe(run)) {
                Ok(r) => r.map_err(|e| layer_error(l, e)),
                Err(payload) => Err(Error::WorkerFailure {
                    phase,
                    message: format!("layer {}: {}", l + 1, panic_message(payload)),
                }),
            }
        };
        let results: Vec<Result<T>> = match &self.pool {
            None => (0..layers).map(guarded).collect(),
            Some(pool) => pool.install(|| (0..layers).into_par_iter().map(guarded).collect()),
        };
        results.into_iter().collect()
    }

    /// Applies the p, W, b, z, q, u phases in order. On error the state is
    /// restored to its value before the call.
    pub fn run_iteration(&self, state: &mut ModelState) -> Result<IterationOutcome> {
        let mut undo = Undo {
            seeds: state.layers.iter().map(|l| l.seeds).collect(),
            ..Undo::default()
        };
        match self.phases(state, &mut undo) {
            Ok((timing, products)) => {
                let steps = step_norms(state, &undo)?;
                Ok(IterationOutcome {
                    steps,
                    timing,
                    products,
                })
            }
            Err(e) => {
                undo.restore(state);
                Err(e)
            }
        }
    }

    fn phases(&self, state: &mut ModelState, undo: &mut Undo) -> Result<(PhaseTiming, Vec<Matrix>)> {
        let hp = &self.hp;
        let l_count = state.num_layers();
        let mut timing = PhaseTiming::default();
        let t = Stopwatch::start();
        let snap = &*state;
        let staged = self.fan_out("p", l_count, |l| {
            if l == 0 {
                return Ok(None);
            }
            update_p(&phi_context(snap, l, hp), snap.layers[l].seeds.tau, hp).map(Some)
        })?;
        for (l, res) in staged.into_iter().enumerate() {
            if let Some(res) = res {
                let layer = &mut state.layers[l];
                undo.p.push((l, std::mem::replace(&mut layer.p, res.new_point)));
                undo.tau.push((l, res.step_coeff));
                layer.seeds.tau = res.next_seed;
            }
        }
        timing.p = t.nanos();

        let t = Stopwatch::start();
        let snap = &*state;
        let staged = self.fan_out("W", l_count, |l| update_w(&phi_context(snap, l, hp), snap.layers[l].seeds.theta, hp))?;
        for (l, res) in staged.into_iter().enumerate() {
            let layer = &mut state.layers[l];
            undo.w.push((l, std::mem::replace(&mut layer.w, res.new_point)));
            undo.theta.push((l, res.step_coeff));
            layer.seeds.theta = res.next_seed;
        }
        timing.w = t.nanos();

        let t = Stopwatch::start();
        let staged = self.fan_out("b", l_count, |l| {
            let layer = &state.layers[l];
            let wp = matmul(&layer.w, &layer.p)?;
            Ok((bias_from_product(&layer.z, &wp)?, wp))
        })?;
        let mut products = Vec::with_capacity(l_count);
        for (l, (b, wp)) in staged.into_iter().enumerate() {
            undo.b.push((l, std::mem::replace(&mut state.layers[l].b, b)));
            products.push(wp);
        }
        timing.b = t.nanos();

        let t = Stopwatch::start();
        let staged = self.fan_out("z", l_count, |l| {
            let layer = &state.layers[l];
            let a = products[l].add_row_bias(&layer.b)?;
            match &layer.q {
                Some(q) => update_z_hidden(&a, &layer.z, q),
                None => update_z_output(&a, &layer.z, &state.labels, hp).map(|o| o.z),
            }
        })?;
        for (l, z) in staged.into_iter().enumerate() {
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("z of layer {}", l + 1)));
            }
            undo.z.push((l, std::mem::replace(&mut state.layers[l].z, z)));
        }
        timing.z = t.nanos();

        let hidden = l_count - 1;
        let t = Stopwatch::start();
        let staged = self.fan_out("q", hidden, |l| {
            let layer = &state.layers[l];
            update_q(&state.layers[l + 1].p, layer.u(), &layer.z, hp.rho, hp.nu)
        })?;
        for (l, q) in staged.into_iter().enumerate() {
            let old = state.layers[l].q.replace(q).expect("hidden layer");
            undo.q.push((l, old));
        }
        timing.q = t.nanos();

        let t = Stopwatch::start();
        let staged = self.fan_out("u", hidden, |l| {
            let layer = &state.layers[l];
            update_u(layer.u(), &state.layers[l + 1].p, layer.q(), hp.rho).map(|(u, _)| u)
        })?;
        for (l, u) in staged.into_iter().enumerate() {
            let old = state.layers[l].u.replace(u).expect("hidden layer");
            undo.u.push((l, old));
        }
        timing.u = t.nanos();

        if !state.is_finite() {
            return Err(Error::NonFinite("iterate after the u phase".into()));
        }
        Ok((timing, products))
    }
}

fn phi_context<'a>(s: &'a ModelState, l: usize, hp: &HyperParams) -> PhiContext<'a> {
    let layer = &s.layers[l];
    PhiContext {
        nu: hp.nu,
        rho: hp.rho,
        z: &layer.z,
        w: &layer.w,
        p: &layer.p,
        b: &layer.b,
        coupling: (l > 0).then(|| Coupling {
            q_prev: s.layers[l - 1].q(),
            u_prev: s.layers[l - 1].u(),
        }),
    }
}

fn step_norms(state: &ModelState, undo: &Undo) -> Result<StepNorms> {
    let l_count = state.num_layers();
    let mut steps = StepNorms {
        p: vec![0.0; l_count],
        w: vec![0.0; l_count],
        b: vec![0.0; l_count],
        z: vec![0.0; l_count],
        q: vec![0.0; l_count - 1],
        tau: vec![0.0; l_count],
        theta: vec![0.0; l_count],
    };
    for (l, old) in &undo.p {
        steps.p[*l] = frob_sq_diff(&state.layers[*l].p, old)?;
    }
    for (l, old) in &undo.w {
        steps.w[*l] = frob_sq_diff(&state.layers[*l].w, old)?;
    }
    for (l, old) in &undo.b {
        steps.b[*l] = state.layers[*l].b.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum();
    }
    for (l, old) in &undo.z {
        steps.z[*l] = frob_sq_diff(&state.layers[*l].z, old)?;
    }
    for (l, old) in &undo.q {
        steps.q[*l] = frob_sq_diff(state.layers[*l].q(), old)?;
    }
    for &(l, c) in &undo.tau {
        steps.tau[l] = c;
    }
    for &(l, c) in &undo.theta {
        steps.theta[l] = c;
    }
    Ok(steps)
}

/// Insert `layers` hidden layers before iteration `epoch` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthStep {
    pub epoch: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub mode: ExecMode,
    pub growth_schedule: Vec<GrowthStep>,
    /// Evaluate descent and stationarity certificates every iteration.
    pub check_certificates: bool,
    /// Record phase timings; off for byte-reproducible metrics.
    pub record_timing: bool,
    /// Seeds the weights of grown layers.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            mode: ExecMode::Serial,
            growth_schedule: Vec::new(),
            check_certificates: false,
            record_timing: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.workers() == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        for pair in self.growth_schedule.windows(2) {
            if pair[1].epoch <= pair[0].epoch {
                return Err(Error::InvalidConfig(format!(
                    "growth epochs must be strictly increasing, got {} then {}",
                    pair[0].epoch, pair[1].epoch
                )));
            }
        }
        if let Some(step) = self.growth_schedule.iter().find(|s| s.epoch == 0) {
            return Err(Error::InvalidConfig(format!(
                "growth epochs are 1-based, got {}",
                step.epoch
            )));
        }
        Ok(())
    }
}

/// One metrics record. Epoch 0 describes the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub epoch: usize,
    #[serde(rename = "F")]
    pub f: f64,
    pub lagrangian: f64,
    pub residual_norm_sq_total: f64,
    pub per_layer_residuals: Vec<f64>,
    pub train_accuracy: f64,
    pub phase_times_ns: Option<PhaseTiming>,
    /// Running minimum of `descent_quantity`.
    pub c_k: Option<f64>,
    /// `lhs - rhs` of the descent inequality, with the Lagrangian taken
    /// after any growth at this epoch.
    pub descent_gap: Option<f64>,
    pub descent_quantity: Option<f64>,
    pub descent_terms: Option<DescentTerms>,
    pub step_norms: Option<StepNorms>,
    pub dual_identity_gap: f64,
    pub max_iterate_abs: f64,
    pub hidden_layers: usize,
    pub grew: bool,
    pub certificate: Option<DescentCertificate>,
    pub stationarity: Option<StationarityReport>,
}

fn snapshot_metrics(state: &ModelState, hp: &HyperParams, epoch: usize, products: Option<&[Matrix]>) -> Result<(IterationMetrics, f64)> {
    let parts = objective_parts(state, products)?;
    let lagrangian = parts.lagrangian(hp.rho, hp.nu);
    let metrics = IterationMetrics {
        epoch,
        f: parts.objective(hp.nu),
        lagrangian,
        residual_norm_sq_total: parts.residual_total(),
        per_layer_residuals: parts.residuals.clone(),
        train_accuracy: accuracy(state)?,
        phase_times_ns: None,
        c_k: None,
        descent_gap: None,
        descent_quantity: None,
        descent_terms: None,
        step_norms: None,
        dual_identity_gap: dual_identity_gap(state, hp.nu),
        max_iterate_abs: max_iterate_abs(state),
        hidden_layers: state.num_layers() - 1,
        grew: false,
        certificate: None,
        stationarity: None,
    };
    if !lagrangian.is_finite() {
        return Err(Error::NonFinite(format!(
            "augmented Lagrangian at epoch {epoch} (F = {}, residual = {})",
            metrics.f, metrics.residual_norm_sq_total
        )));
    }
    Ok((metrics, lagrangian))
}

fn emit(sink: &mut Option<&mut dyn Write>, record: &IterationMetrics) -> Result<()> {
    if let Some(w) = sink.as_mut() {
        serde_json::to_writer(&mut **w, record).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Runs `config.epochs` iterations, growing the network on schedule, and
/// returns one record per epoch (plus the epoch-0 record).
pub fn train(
    state: &mut ModelState,
    config: &TrainConfig,
    hp: &HyperParams,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<IterationMetrics>> {
    config.validate()?;
    hp.validate(state.spec.activation)?;
    state.validate()?;
    let constants = DescentConstants::new(hp);
    if !constants.rho_sufficient(hp.rho) {
        log::warn!(
            "rho = {} is not above the descent threshold {:.6e}; monotone decrease is not guaranteed",
            hp.rho,
            constants.rho_threshold
        );
    }
    let trainer = Trainer::new(*hp, config.mode)?;
    let (first, mut l_prev) = snapshot_metrics(state, hp, 0, None)?;
    emit(&mut sink, &first)?;
    let mut history = vec![first];
    let mut c_k = f64::INFINITY;
    for epoch in 1..=config.epochs {
        let mut grew = false;
        if let Some(step) = config.growth_schedule.iter().find(|s| s.epoch == epoch) {
            let seed = config.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            grow_network(state, step.layers, hp, seed)?;
            l_prev = objective_parts(state, None)?.lagrangian(hp.rho, hp.nu);
            grew = step.layers > 0;
            log::info!("epoch {epoch}: grew to {} hidden layers", state.num_layers() - 1);
        }
        let previous = config.check_certificates.then(|| state.clone());
        let outcome = trainer.run_iteration(state)?;
        let (mut record, l_now) = snapshot_metrics(state, hp, epoch, Some(&outcome.products))?;
        let terms = outcome.steps.terms();
        let cert = check_descent(l_prev, l_now, &terms, hp);
        c_k = c_k.min(cert.rhs);
        record.grew = grew;
        record.c_k = Some(c_k);
        record.descent_gap = Some(cert.slack());
        record.descent_quantity = Some(cert.rhs);
        record.descent_terms = Some(terms);
        record.step_norms = Some(outcome.steps);
        if config.record_timing {
            record.phase_times_ns = Some(outcome.timing);
        }
        if let Some(prev) = previous {
            record.certificate = Some(cert);
            record.stationarity = Some(check_stationarity(state, Some(&prev), hp)?);
        }
        log::debug!(
            "epoch {epoch}: L = {:.6e}, residual = {:.3e}, accuracy = {:.4}",
            l_now,
            record.residual_norm_sq_total,
            record.train_accuracy
        );
        emit(&mut sink, &record)?;
        history.push(record);
        l_prev = l_now;
    }
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    Ok(history)
}

/// Growth schedule that starts with `start_hidden` hidden layers and adds
/// the rest at `at_epoch`.
pub fn progressive_schedule(total_hidden: usize, start_hidden: usize, at_epoch: usize) -> Vec<GrowthStep> {
    if total_hidden > start_hidden {
        vec![GrowthStep {
            epoch: at_epoch,
            layers: total_hidden - start_hidden,
        }]
    } else {
        Vec::new()
    }
}

/// One cell of a speedup grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub hidden_layers: usize,
    pub width: usize,
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub layers: usize,
    pub width: usize,
    pub workers: usize,
    pub samples: usize,
    pub serial_mean_s: f64,
    pub parallel_mean_s: f64,
    pub speedup: f64,
}

pub const SPEEDUP_CSV_HEADER: &str = "layers,width,workers,samples,serial_mean_s,parallel_mean_s,speedup";

impl SpeedupRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.4}",
            self.layers, self.width, self.workers, self.samples, self.serial_mean_s, self.parallel_mean_s, self.speedup
        )
    }
}

fn mean_epoch_seconds(state: &ModelState, trainer: &Trainer, repetitions: usize) -> Result<f64> {
    let mut s = state.clone();
    trainer.run_iteration(&mut s)?;
    let t = Stopwatch::start();
    for _ in 0..repetitions {
        trainer.run_iteration(&mut s)?;
    }
    Ok(t.nanos() as f64 * 1e-9 / repetitions as f64)
}

/// Mean serial and parallel epoch times per cell, after one warm-up epoch.
pub fn benchmark(data: &Dataset, cells: &[BenchmarkCell], hp: &HyperParams, repetitions: usize, seed: u64) -> Result<Vec<SpeedupRow>> {
    if repetitions < 3 {
        return Err(Error::InvalidConfig(format!(
            "benchmark needs at least 3 repetitions, got {repetitions}"
        )));
    }
    let serial = Trainer::new(*hp, ExecMode::Serial)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let spec = NetworkSpec::uniform(data.num_features(), cell.hidden_layers, cell.width, data.num_classes())?;
        let state = init_state(&spec, data, hp, seed)?;
        let parallel = Trainer::new(*hp, ExecMode::Parallel { workers: cell.workers })?;
        let serial_mean_s = mean_epoch_seconds(&state, &serial, repetitions)?;
        let parallel_mean_s = mean_epoch_seconds(&state, &parallel, repetitions)?;
        let row = SpeedupRow {
            layers: cell.hidden_layers,
            width: cell.width,
            workers: cell.workers,
            samples: data.num_samples(),
            serial_mean_s,
            parallel_mean_s,
            speedup: serial_mean_s / parallel_mean_s,
        };
        if cell.hidden_layers >= 4 && cell.width >= 256 && row.speedup < 1.0 {
            log::warn!(
                "parallel epoch slower than serial for {} layers x {} ({:.3}x)",
                cell.hidden_layers,
                cell.width,
                row.speedup
            );
        }
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::lagrangian;

    fn tiny(seed: u64) -> (ModelState, HyperParams) {
        let data = Dataset::synthetic_blobs(8, 3, 30, seed);
        let spec = NetworkSpec::uniform(8, 3, 6, 3).unwrap();
        let hp = HyperParams::with_penalties(1.0, 0.1);
        (init_state(&spec, &data, &hp, seed).unwrap(), hp)
    }

    #[test]
    fn zero_epochs_leave_state_untouched() {
        let (mut state, hp) = tiny(1);
        let before = state.clone();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let history = train(&mut state, &config, &hp, None).unwrap();
        assert_eq!(state, before);
        assert_eq!(history.len(), 1);
        assert_eq!(history[0].lagrangian, history[0].f);
    }

    #[test]
    fn serial_and_parallel_agree_bitwise() {
        let (state, hp) = tiny(2);
        let serial = Trainer::new(hp, ExecMode::Serial).unwrap();
        let parallel = Trainer::new(hp, ExecMode::Parallel { workers: 4 }).unwrap();
        let (mut a, mut b) = (state.clone(), state);
        let oa = serial.run_iteration(&mut a).unwrap();
        let ob = parallel.run_iteration(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa.steps, ob.steps);
        assert_eq!(oa.products, ob.products);
    }

    #[test]
    fn one_iteration_decreases_lagrangian_above_threshold() {
        let (mut state, hp) = tiny(3);
        let before = lagrangian(&state, &hp).unwrap();
        Trainer::new(hp, ExecMode::Serial).unwrap().run_iteration(&mut state).unwrap();
        assert!(lagrangian(&state, &hp).unwrap() < before);
    }

    #[test]
    fn failed_phase_restores_state() {
        for phase in ["p", "W", "b", "z", "q", "u"] {
            let (mut state, hp) = tiny(4);
            let before = state.clone();
            let mut trainer = Trainer::new(hp, ExecMode::Parallel { workers: 2 }).unwrap();
            trainer.fail_phase = Some(phase);
            let err = trainer.run_iteration(&mut state).unwrap_err();
            assert!(matches!(err, Error::WorkerFailure { phase: p, .. } if p == phase), "{err}");
            assert_eq!(state, before, "phase {phase}");
        }
    }

    #[test]
    fn growth_schedule_changes_depth_and_flags_record() {
        let (mut state, hp) = tiny(5);
        let config = TrainConfig {
            epochs: 4,
            growth_schedule: progressive_schedule(5, 3, 2),
            record_timing: false,
            ..TrainConfig::default()
        };
        let history = train(&mut state, &config, &hp, None).unwrap();
        assert_eq!(state.num_layers(), 6);
        let grew: Vec<bool> = history.iter().map(|r| r.grew).collect();
        assert_eq!(grew, vec![false, false, true, false, false]);
        assert_eq!(history[4].hidden_layers, 5);
        assert!(history.iter().all(|r| r.phase_times_ns.is_none()));
    }

    #[test]
    fn empty_schedule_matches_repeated_iterations() {
        let (state, hp) = tiny(6);
        let mut trained = state.clone();
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        train(&mut trained, &config, &hp, None).unwrap();
        let mut manual = state;
        let trainer = Trainer::new(hp, ExecMode::Serial).unwrap();
        for _ in 0..3 {
            trainer.run_iteration(&mut manual).unwrap();
        }
        assert_eq!(trained, manual);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            growth_schedule: vec![GrowthStep { epoch: 5, layers: 1 }, GrowthStep { epoch: 5, layers: 1 }],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            mode: ExecMode::Parallel { workers: 0 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn metrics_records_are_json_lines() {
        let (mut state, hp) = tiny(7);
        let config = TrainConfig {
            epochs: 2,
            check_certificates: true,
            record_timing: false,
            ..TrainConfig::default()
        };
        let mut buf = Vec::new();
        train(&mut state, &config, &hp, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        for key in [
            "epoch",
            "F",
            "lagrangian",
            "residual_norm_sq_total",
            "per_layer_residuals",
            "train_accuracy",
            "phase_times_ns",
            "c_k",
            "descent_gap",
        ] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
        let back: IterationMetrics = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(back.epoch, 2);
        assert!(back.certificate.unwrap().satisfied);
    }

    #[test]
    fn benchmark_rows_and_repetition_floor() {
        let data = Dataset::synthetic_blobs(6, 2, 20, 1);
        let hp = HyperParams::with_penalties(1.0, 0.1);
        let cells = [BenchmarkCell {
            hidden_layers: 2,
            width: 4,
            workers: 1,
        }];
        assert!(benchmark(&data, &cells, &hp, 2, 0).is_err());
        let rows = benchmark(&data, &cells, &hp, 3, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].speedup > 0.0);
        assert_eq!(rows[0].csv_line().split(',').count(), SPEEDUP_CSV_HEADER.split(',').count());
    }
}
