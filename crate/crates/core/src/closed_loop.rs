//! The coupled closed-loop ODE (plant, reference model, prefilter, filters,
//! `Ξ`, parameters, covariance) and the fixed-step run that records traces.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::controller::{pack_symmetric, unpack_symmetric, assemble_omega, ControlScratch, Controller, Law};
use crate::dynamics::{rk4_step_into, Prefilter, RefModel, Rk4Workspace, SignalSpec, StateSpace};
use crate::factorization::{gamma_threshold, ldu_factor};

/// Any state entry above this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("run diverged at t = {t:.6} s")]
    Diverged { t: f64, trace: Box<Trace> },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl RunError {
    pub fn partial_trace(&self) -> Option<&Trace> {
        match self {
            RunError::Diverged { trace, .. } => Some(trace),
            RunError::Invalid(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integration {
    /// Step size in seconds.
    pub h: f64,
    /// Final time in seconds.
    pub duration: f64,
    /// Record every `stride`-th step.
    pub stride: usize,
    /// Declared magnitude bound for recorded signals.
    pub bound: Option<f64>,
    /// Integrate `∫ Ξ_i Ξ_i^T` alongside the loop.
    pub track_information: bool,
}

impl Integration {
    pub fn steps(&self) -> usize {
        (self.duration / self.h).round() as usize
    }
}

/// One closed-loop experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub label: String,
    pub plant: StateSpace,
    /// Reference model integrated in the loop (for a prefiltered scenario
    /// this is the `-aI` model behind the prefilter).
    pub model: RefModel,
    pub prefilter: Option<Prefilter>,
    pub signal: SignalSpec,
    pub controller: Controller,
    /// Initial covariance blocks (least squares only).
    pub r0: Vec<DMatrix<f64>>,
    pub theta0: Vec<DVector<f64>>,
    pub minor_signs: Vec<f64>,
    pub integration: Integration,
}

impl Scenario {
    pub fn m(&self) -> usize {
        self.controller.dims.m
    }

    /// Structural checks plus the design warnings (loop model pole vs `ell0`,
    /// the adaptation-gain threshold) that do not stop a run.
    pub fn validate(&self) -> Result<Vec<String>, String> {
        let m = self.m();
        let ig = &self.integration;
        if self.plant.inputs() != m || self.plant.c.nrows() != m {
            return Err(format!("plant must have {m} inputs and outputs"));
        }
        if self.model.channels() != m || self.signal.channels.len() != m {
            return Err("model and reference must have m channels".into());
        }
        if let Some(pf) = &self.prefilter {
            if pf.channels() != m {
                return Err("prefilter must have m channels".into());
            }
        }
        if !(ig.h > 0.0) || !ig.h.is_finite() {
            return Err(format!("step h = {} must be > 0", ig.h));
        }
        if !(ig.duration >= 0.0) || !ig.duration.is_finite() {
            return Err(format!("duration T = {} must be >= 0", ig.duration));
        }
        if ig.stride == 0 {
            return Err("stride must be >= 1".into());
        }
        if self.theta0.len() != m
            || self.theta0.iter().enumerate().any(|(i, b)| b.len() != self.controller.dims.block_len(i))
        {
            return Err("Theta0 block lengths do not match the regressor".into());
        }
        if self.controller.law.has_covariance() && self.r0.len() != m {
            return Err("least squares needs one R0 block per channel".into());
        }

        let mut warnings = Vec::new();
        if !matches!(self.controller.law, Law::Gradient { .. }) {
            let ell0 = self.controller.ell0;
            if self.model.a.iter().any(|a| (a - ell0).abs() > 1e-12 * ell0) {
                warnings.push(format!(
                    "loop model poles {:?} differ from ell0 = {ell0}; the error equation keeps a dynamic term",
                    self.model.a
                ));
            }
        }
        if let Law::LeastSquares { gamma } = self.controller.law {
            if let Ok(ldu) = ldu_factor(&self.plant.high_freq_gain()) {
                let thr = gamma_threshold(&ldu);
                if gamma <= thr {
                    warnings.push(format!("gamma = {gamma} does not exceed the stability threshold {thr:.6}"));
                }
            } else {
                warnings.push("high-frequency gain has a singular leading minor".into());
            }
        }
        Ok(warnings)
    }
}

/// Offsets of each component inside the flat loop state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopLayout {
    pub plant: usize,
    pub model: usize,
    pub prefilter: usize,
    pub v1: usize,
    pub v2: usize,
    pub xi: usize,
    pub theta: usize,
    pub cov: usize,
    pub info: usize,
    pub len: usize,
    n: usize,
    m: usize,
    filt: usize,
    channels: usize,
    params: usize,
    cov_len: usize,
    info_len: usize,
}

impl LoopLayout {
    pub fn new(s: &Scenario) -> Self {
        let dims = s.controller.dims;
        let n = s.plant.order();
        let m = dims.m;
        let pf = if s.prefilter.is_some() { m } else { 0 };
        let filt = m * dims.filter_order();
        let cov_len = if s.controller.law.has_covariance() { dims.packed_total() } else { 0 };
        let info_len = if s.integration.track_information { dims.packed_total() } else { 0 };
        let plant = 0;
        let model = plant + n;
        let prefilter = model + m;
        let v1 = prefilter + pf;
        let v2 = v1 + filt;
        let xi = v2 + filt;
        let theta = xi + dims.channels();
        let cov = theta + dims.param_count();
        let info = cov + cov_len;
        let len = info + info_len;
        Self {
            plant,
            model,
            prefilter,
            v1,
            v2,
            xi,
            theta,
            cov,
            info,
            len,
            n,
            m,
            filt,
            channels: dims.channels(),
            params: dims.param_count(),
            cov_len,
            info_len,
        }
    }

    pub fn initial_state(&self, s: &Scenario) -> Vec<f64> {
        let mut x = vec![0.0; self.len];
        x[self.plant..self.plant + self.n].copy_from_slice(s.plant.x.as_slice());
        x[self.model..self.model + self.m].copy_from_slice(&s.model.ym);
        let mut off = self.theta;
        for b in &s.theta0 {
            x[off..off + b.len()].copy_from_slice(b.as_slice());
            off += b.len();
        }
        if self.cov_len > 0 {
            let dims = s.controller.dims;
            let mut off = self.cov;
            for (i, r) in s.r0.iter().enumerate() {
                pack_symmetric(r, &mut x[off..off + dims.packed_len(i)]);
                off += dims.packed_len(i);
            }
        }
        x
    }

    pub fn theta<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.theta..self.theta + self.params]
    }

    pub fn cov<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.cov..self.cov + self.cov_len]
    }

    pub fn info<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.info..self.info + self.info_len]
    }

    pub fn xi<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.xi..self.xi + self.channels]
    }
}

/// Algebraic loop signals at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSignals {
    pub y: Vec<f64>,
    pub ym: Vec<f64>,
    pub e0: Vec<f64>,
    /// Reference seen by the loop (after the prefilter, if any).
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub omega: Vec<f64>,
    pub theta_dot: Vec<f64>,
}

/// The closed-loop vector field with its scratch buffers.
pub struct LoopSystem<'a> {
    pub scenario: &'a Scenario,
    pub layout: LoopLayout,
    scratch: ControlScratch,
    r_raw: Vec<f64>,
    r: Vec<f64>,
    y: Vec<f64>,
    e0: Vec<f64>,
    omega: Vec<f64>,
}

impl<'a> LoopSystem<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let m = scenario.m();
        let dims = scenario.controller.dims;
        Self {
            scenario,
            layout: LoopLayout::new(scenario),
            scratch: ControlScratch::new(dims),
            r_raw: vec![0.0; m],
            r: vec![0.0; m],
            y: vec![0.0; m],
            e0: vec![0.0; m],
            omega: vec![0.0; dims.omega_len()],
        }
    }

    /// Evaluation order: reference (through the prefilter), plant output,
    /// tracking error, `ω`, back-substituted control and parameter rates,
    /// then every state derivative.
    pub fn derivative(&mut self, t: f64, x: &[f64], dx: &mut [f64]) {
        let s = self.scenario;
        let l = &self.layout;
        let m = l.m;
        let c = &s.controller;

        s.signal.eval_into(t, &mut self.r_raw);
        match &s.prefilter {
            Some(pf) => pf.step_into(
                &x[l.prefilter..l.prefilter + m],
                &self.r_raw,
                &mut dx[l.prefilter..l.prefilter + m],
                &mut self.r,
            ),
            None => self.r.copy_from_slice(&self.r_raw),
        }
        let xp = &x[l.plant..l.plant + l.n];
        let ym = &x[l.model..l.model + m];
        s.plant.output_into(xp, &mut self.y);
        for i in 0..m {
            self.e0[i] = self.y[i] - ym[i];
        }
        let v1 = &x[l.v1..l.v1 + l.filt];
        let v2 = &x[l.v2..l.v2 + l.filt];
        assemble_omega(v1, v2, &self.y, &self.r, &mut self.omega);

        let xi = &x[l.xi..l.xi + l.channels];
        c.evaluate(xi, &self.omega, l.theta(x), l.cov(x), &self.e0, &mut self.scratch);
        let u = &self.scratch.u;

        s.plant.derivative_into(xp, u, &mut dx[l.plant..l.plant + l.n]);
        s.model.derivative_into(ym, &self.r, &mut dx[l.model..l.model + m]);
        {
            let (d1, d2) = dx[l.v1..l.v2 + l.filt].split_at_mut(l.filt);
            c.filters.derivatives_into(v1, v2, u, &self.y, d1, d2);
        }
        let ell0 = c.ell0;
        for k in 0..l.channels {
            dx[l.xi + k] = -ell0 * xi[k] + self.scratch.channels[k];
        }
        dx[l.theta..l.theta + l.params].copy_from_slice(&self.scratch.theta_dot);
        dx[l.cov..l.cov + l.cov_len].copy_from_slice(&self.scratch.cov_dot[..l.cov_len]);
        if l.info_len > 0 {
            let dims = c.dims;
            let mut off = l.info;
            for i in 0..m {
                let n = dims.block_len(i);
                for r in 0..n {
                    let xr = xi[dims.block_channel(i, r)];
                    for q in r..n {
                        dx[off] = xr * xi[dims.block_channel(i, q)];
                        off += 1;
                    }
                }
            }
        }
    }

    /// Loop signals at state `x`, time `t`.
    pub fn signals(&mut self, t: f64, x: &[f64]) -> LoopSignals {
        let mut dx = vec![0.0; self.layout.len];
        self.derivative(t, x, &mut dx);
        let l = &self.layout;
        LoopSignals {
            y: self.y.clone(),
            ym: x[l.model..l.model + l.m].to_vec(),
            e0: self.e0.clone(),
            r: self.r.clone(),
            u: self.scratch.u.clone(),
            omega: self.omega.clone(),
            theta_dot: self.scratch.theta_dot.clone(),
        }
    }
}

/// Row-major table of equally sized samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub width: usize,
    pub data: Vec<f64>,
}

impl Series {
    pub fn new(width: usize) -> Self {
        Self { width, data: Vec::new() }
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.width);
        self.data.extend_from_slice(row);
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.width..(k + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width.max(1)).take(self.len())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Uniformly strided record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub label: String,
    pub m: usize,
    /// Spacing of recorded samples in seconds.
    pub dt: f64,
    pub block_lens: Vec<usize>,
    pub t: Vec<f64>,
    pub y: Series,
    pub ym: Series,
    pub e0: Series,
    pub r: Series,
    pub u: Series,
    pub theta: Series,
    /// Filtered regressor channels `[ω; u_1..u_{m-1}]` after `1/(s+ℓ0)`.
    pub xi: Series,
    /// Smallest and largest eigenvalue of each covariance (or constant gain)
    /// block.
    pub r_min_eig: Series,
    pub r_max_eig: Series,
    /// Packed covariance blocks (least squares only).
    pub cov: Series,
    /// Packed `∫ Ξ_i Ξ_i^T` blocks when information tracking is on.
    pub info: Series,
}

impl Trace {
    fn new(s: &Scenario) -> Self {
        let dims = s.controller.dims;
        let m = dims.m;
        let l = LoopLayout::new(s);
        Self {
            label: s.label.clone(),
            m,
            dt: s.integration.h * s.integration.stride as f64,
            block_lens: (0..m).map(|i| dims.block_len(i)).collect(),
            t: Vec::new(),
            y: Series::new(m),
            ym: Series::new(m),
            e0: Series::new(m),
            r: Series::new(m),
            u: Series::new(m),
            theta: Series::new(dims.param_count()),
            xi: Series::new(dims.channels()),
            r_min_eig: Series::new(m),
            r_max_eig: Series::new(m),
            cov: Series::new(l.cov_len),
            info: Series::new(l.info_len),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Parameter blocks of sample `k`.
    pub fn theta_blocks(&self, k: usize) -> Vec<DVector<f64>> {
        let row = self.theta.row(k);
        let mut off = 0;
        self.block_lens
            .iter()
            .map(|&n| {
                let b = DVector::from_column_slice(&row[off..off + n]);
                off += n;
                b
            })
            .collect()
    }

    fn packed_blocks(&self, series: &Series, k: usize) -> Vec<DMatrix<f64>> {
        let row = series.row(k);
        let mut off = 0;
        self.block_lens
            .iter()
            .map(|&n| {
                let mut mat = DMatrix::zeros(n, n);
                unpack_symmetric(&row[off..off + n * (n + 1) / 2], n, &mut mat);
                off += n * (n + 1) / 2;
                mat
            })
            .collect()
    }

    /// Covariance blocks of sample `k` (least squares only).
    pub fn cov_blocks(&self, k: usize) -> Option<Vec<DMatrix<f64>>> {
        (!self.cov.is_empty()).then(|| self.packed_blocks(&self.cov, k))
    }

    /// `∫_0^t Ξ_i Ξ_i^T` blocks of sample `k` when tracked.
    pub fn info_blocks(&self, k: usize) -> Option<Vec<DMatrix<f64>>> {
        (!self.info.is_empty()).then(|| self.packed_blocks(&self.info, k))
    }

    /// Filtered regressor blocks `Ξ_i` of sample `k`.
    pub fn xi_blocks(&self, k: usize) -> Vec<DVector<f64>> {
        let row = self.xi.row(k);
        let m = self.m;
        let w = self.block_lens[m - 1];
        (0..m)
            .map(|i| {
                DVector::from_iterator(
                    self.block_lens[i],
                    (0..self.block_lens[i]).map(|k| if k < w { row[k] } else { row[w + i + (k - w)] }),
                )
            })
            .collect()
    }

    /// Largest magnitude over the recorded loop signals.
    pub fn max_signal(&self) -> f64 {
        [&self.y, &self.ym, &self.e0, &self.r, &self.u, &self.theta, &self.xi]
            .iter()
            .map(|s| s.max_abs())
            .fold(0.0, f64::max)
    }
}

fn eig_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    (ev.min(), ev.max())
}

/// Integrates the scenario from `t = 0` to `T` with fixed step `h`,
/// recording every `stride`-th step.
pub fn run(s: &Scenario) -> Result<Trace, RunError> {
    let warnings = s.validate().map_err(RunError::Invalid)?;
    for w in &warnings {
        warn!("{}: {w}", s.label);
    }
    let mut sys = LoopSystem::new(s);
    let layout = sys.layout;
    let mut x = layout.initial_state(s);
    let mut trace = Trace::new(s);
    let ig = s.integration;
    let steps = ig.steps();
    let dims = s.controller.dims;

    let constant_eigs: Option<Vec<(f64, f64)>> = match &s.controller.law {
        Law::LeastSquares { .. } => None,
        Law::MMrac { gain } | Law::Gradient { gain } => Some(gain.iter().map(eig_bounds).collect()),
    };

    let record = |sys: &mut LoopSystem, trace: &mut Trace, t: f64, x: &[f64]| {
        let sig = sys.signals(t, x);
        trace.t.push(t);
        trace.y.push(&sig.y);
        trace.ym.push(&sig.ym);
        trace.e0.push(&sig.e0);
        trace.r.push(&sig.r);
        trace.u.push(&sig.u);
        trace.theta.push(layout.theta(x));
        trace.xi.push(layout.xi(x));
        trace.cov.push(layout.cov(x));
        trace.info.push(layout.info(x));
        let (mins, maxs): (Vec<f64>, Vec<f64>) = match &constant_eigs {
            Some(e) => e.iter().copied().unzip(),
            None => {
                let cov = layout.cov(x);
                let mut off = 0;
                (0..dims.m)
                    .map(|i| {
                        let n = dims.block_len(i);
                        let mut mat = DMatrix::zeros(n, n);
                        unpack_symmetric(&cov[off..off + dims.packed_len(i)], n, &mut mat);
                        off += dims.packed_len(i);
                        eig_bounds(&mat)
                    })
                    .unzip()
            }
        };
        trace.r_min_eig.push(&mins);
        trace.r_max_eig.push(&maxs);
    };

    record(&mut sys, &mut trace, 0.0, &x);
    let mut ws = Rk4Workspace::new(layout.len);
    for k in 0..steps {
        let t = k as f64 * ig.h;
        let t_next = (k + 1) as f64 * ig.h;
        let ok = rk4_step_into(&mut |t, x: &[f64], dx: &mut [f64]| sys.derivative(t, x, dx), t, &mut x, ig.h, &mut ws)
            .is_ok()
            && x.iter().all(|v| v.abs() <= DIVERGENCE_LIMIT);
        if !ok {
            return Err(RunError::Diverged {
                t: t_next,
                trace: Box::new(trace),
            });
        }
        if (k + 1) % ig.stride == 0 {
            record(&mut sys, &mut trace, t_next, &x);
        }
    }
    Ok(trace)
}

/// Initial state of the loop for `s`.
pub fn initial_state(s: &Scenario) -> Vec<f64> {
    LoopLayout::new(s).initial_state(s)
}
