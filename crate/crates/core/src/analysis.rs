//! Post-run metrics: tracking-error norms, convergence times, γ-scaling fits,
//! the sup-norm bound check, the `V1` Lyapunov monitor, the control mismatch
//! `Υ`, sliding-window excitation and the matching-parameter oracle for
//! first-order diagonal plants.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::closed_loop::{run, RunError, Scenario, Trace};
use crate::controller::{Dims, Law};
use crate::factorization::{cholesky, dplus_abs, ldu_factor, sdu_from_ldu, FactorError, SduResult};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no closed-form matching parameters for this plant: {0}")]
    UnsupportedPlantFamily(String),
    #[error("gain factorization failed: {0}")]
    Factor(#[from] FactorError),
    #[error("{0}")]
    Run(#[from] RunError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate sweep: every run has zero tracking error")]
    Degenerate,
    #[error("trace carries no covariance blocks")]
    MissingCovariance,
}

/// First-order diagonal plant `dy_i = -p_i y_i + (K_p u)_i` with a diagonal
/// reference model `dym_i = -a_i ym_i + b_i r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingOracle {
    pub dims: Dims,
    pub p: Vec<f64>,
    pub kp: DMatrix<f64>,
    pub a: Vec<f64>,
    pub bm: Vec<f64>,
    pub dplus: DMatrix<f64>,
    /// State-variable filter realization, used only by the frequency check.
    pub lambda: DMatrix<f64>,
    pub g: DVector<f64>,
}

/// `θ*` (rows ordered like `ω`, one column per input), its factorization and
/// the per-block `Θ*`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingParams {
    pub theta_star: DMatrix<f64>,
    pub sdu: SduResult,
    pub blocks: Vec<DVector<f64>>,
}

impl MatchingParams {
    pub fn stacked(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    /// `|d_i|` for the Lyapunov weighting.
    pub fn abs_d(&self) -> Vec<f64> {
        (0..self.sdu.d.nrows()).map(|i| self.sdu.d[(i, i)].abs()).collect()
    }

    pub fn d(&self) -> Vec<f64> {
        (0..self.sdu.d.nrows()).map(|i| self.sdu.d[(i, i)]).collect()
    }
}

impl MatchingOracle {
    /// Detects the first-order diagonal family in `s` (`A`, `C` diagonal,
    /// `n = m`). The oracle matches the loop's internal model, so for a
    /// prefiltered scenario the targets are the prefilter-side model.
    /// `dplus = None` selects `|D_p|`.
    pub fn from_scenario(s: &Scenario, dplus: Option<DMatrix<f64>>) -> Result<Self, AnalysisError> {
        let pl = &s.plant;
        let m = s.m();
        let unsupported = |why: &str| AnalysisError::UnsupportedPlantFamily(why.to_string());
        if pl.order() != m {
            return Err(unsupported("plant order differs from the number of inputs"));
        }
        let off_diag = |mat: &DMatrix<f64>| {
            (0..m).any(|i| (0..m).any(|j| i != j && mat[(i, j)] != 0.0))
        };
        if off_diag(&pl.a) || off_diag(&pl.c) {
            return Err(unsupported("A and C must be diagonal"));
        }
        if (0..m).any(|i| pl.c[(i, i)] == 0.0) {
            return Err(unsupported("C must be nonsingular"));
        }
        let kp = pl.high_freq_gain();
        let dplus = match dplus {
            Some(d) => d,
            None => dplus_abs(&ldu_factor(&kp)?),
        };
        Ok(Self {
            dims: s.controller.dims,
            p: (0..m).map(|i| -pl.a[(i, i)]).collect(),
            kp,
            a: s.model.a.clone(),
            bm: s.model.bm.clone(),
            dplus,
            lambda: s.controller.filters.lambda.clone(),
            g: s.controller.filters.g.clone(),
        })
    }

    /// `θ*` and the triangular `Θ*`: block `i` is row `i` of `U θ*^T`
    /// followed by `-U_ij`, `j > i`, so that
    /// `Θ*^T Ω = U θ*^T ω + (I - U) u` row by row.
    pub fn matching_params(&self) -> Result<MatchingParams, AnalysisError> {
        let m = self.dims.m;
        let w = self.dims.omega_len();
        let kinv = self
            .kp
            .clone()
            .try_inverse()
            .ok_or_else(|| AnalysisError::UnsupportedPlantFamily("singular K_p".into()))?;
        let k = self.dims.filter_order() * m;
        let mut theta_star = DMatrix::zeros(w, m);
        let gy = kinv.clone() * DMatrix::from_fn(m, m, |i, j| if i == j { self.p[i] - self.a[i] } else { 0.0 });
        let gr = kinv * DMatrix::from_fn(m, m, |i, j| if i == j { self.bm[i] } else { 0.0 });
        for i in 0..m {
            for j in 0..m {
                theta_star[(2 * k + j, i)] = gy[(i, j)];
                theta_star[(2 * k + m + j, i)] = gr[(i, j)];
            }
        }
        let sdu = sdu_from_ldu(&ldu_factor(&self.kp)?, &self.dplus)?;
        let ut = &sdu.u * theta_star.transpose();
        let blocks = (0..m)
            .map(|i| {
                let n = self.dims.block_len(i);
                DVector::from_iterator(n, (0..n).map(|c| if c < w { ut[(i, c)] } else { -sdu.u[(i, i + 1 + c - w)] }))
            })
            .collect();
        Ok(MatchingParams { theta_star, sdu, blocks })
    }

    /// Every unit upper triangular `U` yields a matching `Θ*(U)`, so the
    /// matching set is affine in the entries `U_ij`, `j > i`. Returns the
    /// Euclidean distance from the stacked `theta` to that set and the
    /// minimizing `U`.
    pub fn matching_family_distance(&self, theta: &[f64]) -> Result<(f64, DMatrix<f64>), AnalysisError> {
        let m = self.dims.m;
        let w = self.dims.omega_len();
        if theta.len() != self.dims.param_count() {
            return Err(AnalysisError::Invalid("parameter vector length".into()));
        }
        let ts = self.matching_params()?.theta_star.transpose();
        let mut u = DMatrix::identity(m, m);
        let mut dist2 = 0.0;
        for i in 0..m {
            let n = self.dims.block_len(i);
            let off = self.dims.block_offset(i);
            let b = DVector::from_column_slice(&theta[off..off + n]);
            let base = DVector::from_iterator(n, (0..n).map(|c| if c < w { ts[(i, c)] } else { 0.0 }));
            let free = m - 1 - i;
            let dirs = DMatrix::from_fn(n, free, |c, f| {
                let j = i + 1 + f;
                if c < w {
                    ts[(j, c)]
                } else if c - w == f {
                    -1.0
                } else {
                    0.0
                }
            });
            let rhs = &b - &base;
            let coef = if free > 0 {
                let gram = dirs.transpose() * &dirs;
                gram.cholesky()
                    .map(|c| c.solve(&(dirs.transpose() * &rhs)))
                    .ok_or_else(|| AnalysisError::Invalid("degenerate matching family".into()))?
            } else {
                DVector::zeros(0)
            };
            for f in 0..free {
                u[(i, i + 1 + f)] = coef[f];
            }
            dist2 += (rhs - dirs * coef).norm_squared();
        }
        Ok((dist2.sqrt(), u))
    }

    /// Plant transfer `C (sI - A)^{-1} B` at `s = jω`.
    fn plant_tf(&self, omega: f64) -> DMatrix<Complex<f64>> {
        let m = self.dims.m;
        let s = Complex::new(0.0, omega);
        DMatrix::from_fn(m, m, |i, j| self.kp[(i, j)] / (s + self.p[i]))
    }

    /// Reference model `diag{b_i / (s + a_i)}` at `s = jω`.
    pub fn model_tf(&self, omega: f64) -> DMatrix<Complex<f64>> {
        let s = Complex::new(0.0, omega);
        DMatrix::from_fn(self.dims.m, self.dims.m, |i, j| {
            if i == j {
                Complex::new(self.bm[i], 0.0) / (s + self.a[i])
            } else {
                Complex::new(0.0, 0.0)
            }
        })
    }

    /// Closed loop `r -> y` under the fixed parameters `blocks` with the
    /// algebraic loop through `u_{i+1..m}` solved exactly.
    pub fn closed_loop_tf(&self, blocks: &[DVector<f64>], omega: f64) -> DMatrix<Complex<f64>> {
        let m = self.dims.m;
        let w = self.dims.omega_len();
        let kf = self.dims.filter_order();
        let c = |v: f64| Complex::new(v, 0.0);
        let s = Complex::new(0.0, omega);
        // f(s) = (sI - Λ)^{-1} g, shared by every filter channel.
        let f: DVector<Complex<f64>> = if kf > 0 {
            let si = DMatrix::from_fn(kf, kf, |i, j| if i == j { s - self.lambda[(i, j)] } else { c(-self.lambda[(i, j)]) });
            si.lu().solve(&self.g.map(c)).expect("filter resolvent is regular on the imaginary axis")
        } else {
            DVector::zeros(0)
        };
        let zero = DMatrix::<Complex<f64>>::zeros(m, m);
        // Coefficient matrices of u in terms of u (through v1), y (v2 and y) and r.
        let mut cu = zero.clone();
        let mut cy = zero.clone();
        let mut cr = zero;
        for i in 0..m {
            let b = &blocks[i];
            for ch in 0..m {
                for r in 0..kf {
                    cu[(i, ch)] += c(b[ch * kf + r]) * f[r];
                    cy[(i, ch)] += c(b[m * kf + ch * kf + r]) * f[r];
                }
                cy[(i, ch)] += c(b[2 * m * kf + ch]);
                cr[(i, ch)] += c(b[2 * m * kf + m + ch]);
            }
            for k in w..b.len() {
                cu[(i, i + 1 + k - w)] += c(b[k]);
            }
        }
        let g = self.plant_tf(omega);
        let lhs = DMatrix::<Complex<f64>>::identity(m, m) - cu - cy * &g;
        let u_of_r = lhs.lu().solve(&cr).expect("closed loop is well posed");
        g * u_of_r
    }

    /// Largest relative deviation `‖T(jω) - M(jω)‖ / ‖M(jω)‖` over `n`
    /// log-spaced frequencies in `[1e-2, 1e2]` rad/s.
    pub fn frequency_check(&self, blocks: &[DVector<f64>], n: usize) -> f64 {
        log_space(1e-2, 1e2, n)
            .into_iter()
            .map(|w| {
                let mm = self.model_tf(w);
                (self.closed_loop_tf(blocks, w) - &mm).norm() / mm.norm()
            })
            .fold(0.0, f64::max)
    }
}

pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64)).collect()
}

/// Trapezoidal `∫ f² dt` over samples `f` at times `t`.
pub fn l2sq(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(tw, fw)| 0.5 * (tw[1] - tw[0]) * (fw[0] * fw[0] + fw[1] * fw[1]))
        .sum()
}

/// `max |f|` over samples with `t >= t_start`.
pub fn linf(t: &[f64], f: &[f64], t_start: f64) -> f64 {
    t.iter()
        .zip(f)
        .filter(|(tk, _)| **tk >= t_start)
        .fold(0.0_f64, |acc, (_, v)| acc.max(v.abs()))
}

/// First recorded time after which `|f| <= eps` holds at every later sample;
/// `f64::INFINITY` if the last sample still exceeds `eps`.
pub fn convergence_time(t: &[f64], f: &[f64], eps: f64) -> f64 {
    match f.iter().rposition(|v| v.abs() > eps) {
        None => t.first().copied().unwrap_or(0.0),
        Some(k) if k + 1 < t.len() => t[k + 1],
        Some(_) => f64::INFINITY,
    }
}

/// Outcome of the sup-norm bound `‖f‖∞ <= (3 K ‖f‖₂²)^{1/3}` for a signal
/// with Lipschitz constant `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupBoundCheck {
    /// Lipschitz constant estimated from first differences.
    pub k_est: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Checks the sup-norm bound on a channel sampled every `dt` seconds.
pub fn sup_bound_check(f: &[f64], dt: f64) -> SupBoundCheck {
    let k_est = f.windows(2).map(|w| (w[1] - w[0]).abs() / dt).fold(0.0, f64::max);
    let lhs = f.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let energy: f64 = f.windows(2).map(|w| 0.5 * dt * (w[0] * w[0] + w[1] * w[1])).sum();
    let rhs = (3.0 * k_est * energy).cbrt();
    SupBoundCheck {
        k_est,
        lhs,
        rhs,
        pass: lhs <= rhs * (1.0 + 1e-6),
    }
}

/// Least-squares line through `(log x, log y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Fits `log y = slope · log x + intercept`; NaN when any point is
/// non-positive or non-finite.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> SlopeFit {
    let nan = SlopeFit {
        slope: f64::NAN,
        intercept: f64::NAN,
        residual: f64::NAN,
    };
    if x.len() < 2 || x.len() != y.len() || x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return nan;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (lx.iter().zip(&ly).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum::<f64>() / n).sqrt();
    SlopeFit {
        slope,
        intercept,
        residual,
    }
}

/// Tracking threshold used for convergence times in scaling sweeps.
pub const SWEEP_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub gamma: f64,
    pub l2sq: f64,
    pub linf_post: f64,
    pub t_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub c: f64,
    pub rows: Vec<ScalingRow>,
    pub l2sq_fit: SlopeFit,
    pub linf_fit: SlopeFit,
    pub t_eps_fit: SlopeFit,
}

/// Start of the post-transient window, `max(5/a, 20/γ)` with `a` the
/// slowest pole of the overall reference model.
pub fn post_transient_start(s: &Scenario, gamma: f64) -> f64 {
    let poles = match &s.prefilter {
        Some(pf) => &pf.poles,
        None => &s.model.a,
    };
    let a = poles.iter().copied().fold(f64::INFINITY, f64::min);
    (5.0 / a).max(20.0 / gamma)
}

/// Euclidean norm of `e0` at every recorded sample.
pub fn e0_norms(trace: &Trace) -> Vec<f64> {
    trace.e0.row_norms()
}

/// Copy of `base` with least-squares gain `γ` and `R(0) = cγI`.
pub fn with_gamma(base: &Scenario, gamma: f64, c: f64) -> Result<Scenario, AnalysisError> {
    if !matches!(base.controller.law, Law::LeastSquares { .. }) {
        return Err(AnalysisError::Invalid("the sweep needs a least-squares base scenario".into()));
    }
    let mut s = base.clone();
    s.controller.law = Law::LeastSquares { gamma };
    let dims = s.controller.dims;
    s.r0 = (0..dims.m)
        .map(|i| DMatrix::identity(dims.block_len(i), dims.block_len(i)) * (c * gamma))
        .collect();
    s.label = format!("{}-gamma{}", base.label, gamma);
    Ok(s)
}

fn check_sweep_args(gammas: &[f64], c: f64) -> Result<(), AnalysisError> {
    if gammas.len() < 4 {
        return Err(AnalysisError::Invalid(format!("need at least 4 gamma values, got {}", gammas.len())));
    }
    if gammas.windows(2).any(|w| !(w[1] > w[0])) || gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(AnalysisError::Invalid("gamma values must be positive and strictly increasing".into()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(AnalysisError::Invalid(format!("c = {c} must be > 0")));
    }
    Ok(())
}

/// Runs `base` at every `γ` (with `R(0) = cγI`) concurrently. The results
/// keep the order of `gammas`.
pub fn sweep_runs(base: &Scenario, gammas: &[f64], c: f64) -> Result<Vec<(Scenario, Result<Trace, RunError>)>, AnalysisError> {
    check_sweep_args(gammas, c)?;
    let scenarios = gammas.iter().map(|&g| with_gamma(base, g, c)).collect::<Result<Vec<_>, _>>()?;
    Ok(scenarios
        .into_par_iter()
        .map(|s| {
            let r = run(&s);
            (s, r)
        })
        .collect())
}

/// Builds the scaling report from completed traces (one per `γ`).
pub fn scaling_report(base: &Scenario, gammas: &[f64], c: f64, traces: &[&Trace]) -> Result<ScalingReport, AnalysisError> {
    check_sweep_args(gammas, c)?;
    if traces.len() != gammas.len() {
        return Err(AnalysisError::Invalid("one trace per gamma required".into()));
    }
    let rows: Vec<ScalingRow> = gammas
        .iter()
        .zip(traces)
        .map(|(&gamma, tr)| {
            let e = e0_norms(tr);
            ScalingRow {
                gamma,
                l2sq: l2sq(&tr.t, &e),
                linf_post: linf(&tr.t, &e, post_transient_start(base, gamma)),
                t_eps: convergence_time(&tr.t, &e, SWEEP_EPSILON),
            }
        })
        .collect();
    if rows.iter().all(|r| r.l2sq == 0.0 && r.linf_post == 0.0) {
        return Err(AnalysisError::Degenerate);
    }
    let col = |f: fn(&ScalingRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let g = col(|r| r.gamma);
    Ok(ScalingReport {
        c,
        l2sq_fit: loglog_fit(&g, &col(|r| r.l2sq)),
        linf_fit: loglog_fit(&g, &col(|r| r.linf_post)),
        t_eps_fit: loglog_fit(&g, &col(|r| r.t_eps)),
        rows,
    })
}

/// Sweep plus report; any diverged run aborts the report.
pub fn gamma_sweep(base: &Scenario, gammas: &[f64], c: f64) -> Result<ScalingReport, AnalysisError> {
    let runs = sweep_runs(base, gammas, c)?;
    let mut traces = Vec::with_capacity(runs.len());
    for (_, r) in runs {
        traces.push(r?);
    }
    let refs: Vec<&Trace> = traces.iter().collect();
    scaling_report(base, gammas, c, &refs)
}

fn block_split(theta: &[f64], lens: &[usize]) -> Vec<DVector<f64>> {
    let mut off = 0;
    lens.iter()
        .map(|&n| {
            let b = DVector::from_column_slice(&theta[off..off + n]);
            off += n;
            b
        })
        .collect()
}

/// `‖Θ(t_k) - Θ*‖` at every recorded sample.
pub fn theta_error_norms(trace: &Trace, theta_star: &[f64]) -> Vec<f64> {
    trace
        .theta
        .rows()
        .map(|row| row.iter().zip(theta_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// `V1(t_k) = ½ Σ_i |d_i| Θ̃_i^T R_i(t_k)^{-1} Θ̃_i` from the recorded
/// covariance.
pub fn v1_monitor(trace: &Trace, theta_star: &[f64], abs_d: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if trace.cov.is_empty() || trace.cov.width == 0 {
        return Err(AnalysisError::MissingCovariance);
    }
    let star = block_split(theta_star, &trace.block_lens);
    (0..trace.len())
        .map(|k| {
            let cov = trace.cov_blocks(k).ok_or(AnalysisError::MissingCovariance)?;
            let theta = trace.theta_blocks(k);
            let mut v = 0.0;
            for i in 0..trace.m {
                let err = &theta[i] - &star[i];
                let l = cholesky(&cov[i]).ok_or(AnalysisError::MissingCovariance)?;
                // Θ̃^T R^{-1} Θ̃ = ‖L^{-1} Θ̃‖² with R = L L^T.
                let z = l
                    .solve_lower_triangular(&err)
                    .ok_or(AnalysisError::MissingCovariance)?;
                v += 0.5 * abs_d[i] * z.norm_squared();
            }
            Ok(v)
        })
        .collect()
}

/// `Υ_i = d_i Ξ_i^T (Θ_i - Θ_i*)` at sample `k`.
pub fn upsilon(trace: &Trace, k: usize, theta_star: &[f64], d: &[f64]) -> DVector<f64> {
    let star = block_split(theta_star, &trace.block_lens);
    let theta = trace.theta_blocks(k);
    let xi = trace.xi_blocks(k);
    DVector::from_iterator(trace.m, (0..trace.m).map(|i| d[i] * xi[i].dot(&(&theta[i] - &star[i]))))
}

/// Minimum eigenvalue of the sliding Gram `∫_t^{t+window} Ξ_i Ξ_i^T dτ` of
/// every block, one series per block (trapezoidal, aligned with the window
/// start).
pub fn pe_measure(trace: &Trace, window: f64) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let w = (window / trace.dt).round() as usize;
    if w < 10 {
        return Err(AnalysisError::Invalid(format!("window {window} s spans fewer than 10 samples")));
    }
    let len = trace.len();
    let mut out = Vec::with_capacity(trace.m);
    for i in 0..trace.m {
        let n = trace.block_lens[i];
        let samples: Vec<DVector<f64>> = (0..len).map(|k| trace.xi_blocks(k).swap_remove(i)).collect();
        // prefix[k] = trapezoidal ∫_0^{t_k} Ξ Ξ^T.
        let mut prefix = Vec::with_capacity(len);
        let mut acc = DMatrix::zeros(n, n);
        prefix.push(acc.clone());
        for k in 1..len {
            acc += (&samples[k - 1] * samples[k - 1].transpose() + &samples[k] * samples[k].transpose()) * (0.5 * trace.dt);
            prefix.push(acc.clone());
        }
        let series = (0..len.saturating_sub(w))
            .map(|k| SymmetricEigen::new(&prefix[k + w] - &prefix[k]).eigenvalues.min().max(0.0))
            .collect();
        out.push(series);
    }
    Ok(out)
}
