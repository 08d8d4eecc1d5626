//! LTI blocks (plant, reference model, reference prefilter), reference
//! signals and the fixed-step RK4 integrator used by the closed loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite state after step at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid block: {0}")]
    Invalid(String),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch { what, expected, got })
    }
}

/// Scratch space for [`rk4_step_into`]; reuse it across steps to avoid
/// allocating four stage vectors per step.
#[derive(Debug, Clone, Default)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// One classical RK4 step of `dx/dt = field(t, x)` in place.
///
/// `field(t, x, dx)` writes the derivative into `dx`.
pub fn rk4_step_into<F>(
    field: &mut F,
    t: f64,
    state: &mut [f64],
    h: f64,
    ws: &mut Rk4Workspace,
) -> Result<(), DynamicsError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = state.len();
    if ws.k1.len() != n {
        *ws = Rk4Workspace::new(n);
    }
    let Rk4Workspace { k1, k2, k3, k4, tmp } = ws;

    field(t, state, k1);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k1[i];
    }
    field(t + 0.5 * h, tmp, k2);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k2[i];
    }
    field(t + 0.5 * h, tmp, k3);
    for i in 0..n {
        tmp[i] = state[i] + h * k3[i];
    }
    field(t + h, tmp, k4);

    let h6 = h / 6.0;
    let mut finite = true;
    for i in 0..n {
        state[i] += h6 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        finite &= state[i].is_finite();
    }
    if finite {
        Ok(())
    } else {
        Err(DynamicsError::NonFiniteState { t: t + h })
    }
}

/// Allocating convenience wrapper around [`rk4_step_into`].
pub fn rk4_step<F>(mut field: F, t: f64, state: &[f64], h: f64) -> Result<Vec<f64>, DynamicsError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut out = state.to_vec();
    let mut ws = Rk4Workspace::new(state.len());
    rk4_step_into(&mut field, t, &mut out, h, &mut ws)?;
    Ok(out)
}

/// `dx/dt = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Initial state.
    pub x: DVector<f64>,
}

impl StateSpace {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        x: DVector<f64>,
    ) -> Result<Self, DynamicsError> {
        let n = a.nrows();
        check_len("A columns", n, a.ncols())?;
        check_len("B rows", n, b.nrows())?;
        check_len("C columns", n, c.ncols())?;
        check_len("x0", n, x.len())?;
        if b.ncols() != c.nrows() {
            return Err(DynamicsError::Invalid(format!(
                "B has {} inputs but C has {} outputs; square plants only",
                b.ncols(),
                c.nrows()
            )));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(DynamicsError::Invalid("non-finite entry".into()));
        }
        Ok(Self { a, b, c, x })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// `A x + B u` written into `dx`.
    pub fn derivative_into(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let n = self.order();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.a[(i, j)] * x[j];
            }
            for (j, uj) in u.iter().enumerate() {
                acc += self.b[(i, j)] * uj;
            }
            dx[i] = acc;
        }
    }

    pub fn output_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (0..self.order()).map(|j| self.c[(i, j)] * x[j]).sum();
        }
    }

    pub fn plant_derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        check_len("state", self.order(), x.len())?;
        check_len("input", self.inputs(), u.len())?;
        let mut dx = vec![0.0; self.order()];
        self.derivative_into(x, u, &mut dx);
        Ok(dx)
    }

    pub fn plant_output(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        check_len("state", self.order(), x.len())?;
        let mut y = vec![0.0; self.c.nrows()];
        self.output_into(x, &mut y);
        Ok(y)
    }

    /// High-frequency gain `C B` of a relative-degree-one realization.
    pub fn high_freq_gain(&self) -> DMatrix<f64> {
        &self.c * &self.b
    }
}

/// `dym/dt = Am ym + Bm r` with diagonal `Am = diag{-a_i}` and diagonal `Bm`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefModel {
    /// Pole magnitudes `a_i > 0`.
    pub a: Vec<f64>,
    /// Diagonal of `Bm`.
    pub bm: Vec<f64>,
    /// Initial output.
    pub ym: Vec<f64>,
}

impl RefModel {
    pub fn new(a: Vec<f64>, bm: Vec<f64>, ym: Vec<f64>) -> Result<Self, DynamicsError> {
        check_len("Bm diagonal", a.len(), bm.len())?;
        check_len("ym0", a.len(), ym.len())?;
        if a.is_empty() {
            return Err(DynamicsError::Invalid("reference model has no channels".into()));
        }
        if let Some(ai) = a.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(DynamicsError::Invalid(format!("model pole a_i = {ai} must be > 0")));
        }
        Ok(Self { a, bm, ym })
    }

    /// `Am = -aI`, `Bm = aI` (unity DC gain).
    pub fn uniform(m: usize, a: f64) -> Self {
        Self {
            a: vec![a; m],
            bm: vec![a; m],
            ym: vec![0.0; m],
        }
    }

    pub fn channels(&self) -> usize {
        self.a.len()
    }

    pub fn derivative_into(&self, ym: &[f64], r: &[f64], dym: &mut [f64]) {
        for i in 0..self.a.len() {
            dym[i] = -self.a[i] * ym[i] + self.bm[i] * r[i];
        }
    }

    pub fn refmodel_derivative(&self, ym: &[f64], r: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        check_len("ym", self.channels(), ym.len())?;
        check_len("r", self.channels(), r.len())?;
        let mut d = vec![0.0; self.channels()];
        self.derivative_into(ym, r, &mut d);
        Ok(d)
    }

    /// Static gain `-Am^{-1} Bm`.
    pub fn dc_gain(&self) -> Vec<f64> {
        self.a.iter().zip(&self.bm).map(|(a, b)| b / a).collect()
    }
}

/// One additive term of a reference channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Term {
    Constant {
        value: f64,
    },
    Sine {
        amplitude: f64,
        /// rad/s
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `amplitude * sign(sin(frequency * t))` with `sign(0) = 0`.
    Square {
        amplitude: f64,
        frequency: f64,
    },
}

impl Term {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Term::Constant { value } => value,
            Term::Sine {
                amplitude,
                frequency,
                phase,
            } => amplitude * (frequency * t + phase).sin(),
            Term::Square {
                amplitude,
                frequency,
            } => amplitude * sign0((frequency * t).sin()),
        }
    }

    fn bound(&self) -> f64 {
        match *self {
            Term::Constant { value } => value.abs(),
            Term::Sine { amplitude, .. } | Term::Square { amplitude, .. } => amplitude.abs(),
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Term::Constant { value } => value.is_finite(),
            Term::Sine {
                amplitude,
                frequency,
                phase,
            } => amplitude.is_finite() && frequency.is_finite() && phase.is_finite(),
            Term::Square {
                amplitude,
                frequency,
            } => amplitude.is_finite() && frequency.is_finite(),
        }
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Reference signal `r(t)`: a sum of terms per output channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalSpec {
    pub channels: Vec<Vec<Term>>,
}

impl SignalSpec {
    pub fn new(channels: Vec<Vec<Term>>) -> Result<Self, DynamicsError> {
        if channels.is_empty() {
            return Err(DynamicsError::Invalid("reference has no channels".into()));
        }
        if channels.iter().flatten().any(|t| !t.is_finite()) {
            return Err(DynamicsError::Invalid("non-finite reference coefficient".into()));
        }
        Ok(Self { channels })
    }

    pub fn eval_into(&self, t: f64, r: &mut [f64]) {
        for (ri, terms) in r.iter_mut().zip(&self.channels) {
            *ri = terms.iter().map(|term| term.eval(t)).sum();
        }
    }

    pub fn eval_signal(&self, t: f64) -> Vec<f64> {
        let mut r = vec![0.0; self.channels.len()];
        self.eval_into(t, &mut r);
        r
    }

    /// Per-channel bound `sum |coefficient|`.
    pub fn bound(&self) -> Vec<f64> {
        self.channels
            .iter()
            .map(|terms| terms.iter().map(Term::bound).sum())
            .collect()
    }
}

/// Per-channel first-order reference filter `(s + a) / (s + a_i)`, realized
/// as unit feedthrough plus a state with residue `a - a_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefilter {
    /// Common zero `a`.
    pub zero: f64,
    /// Per-channel poles `a_i > 0`.
    pub poles: Vec<f64>,
}

impl Prefilter {
    pub fn new(zero: f64, poles: Vec<f64>) -> Result<Self, DynamicsError> {
        if !(zero > 0.0) || !zero.is_finite() {
            return Err(DynamicsError::Invalid(format!("prefilter zero {zero} must be > 0")));
        }
        if let Some(p) = poles.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(DynamicsError::Invalid(format!("prefilter pole {p} must be > 0")));
        }
        Ok(Self { zero, poles })
    }

    pub fn channels(&self) -> usize {
        self.poles.len()
    }

    /// Writes the state derivative into `dxf` and the filtered reference
    /// into `out`.
    pub fn step_into(&self, xf: &[f64], r: &[f64], dxf: &mut [f64], out: &mut [f64]) {
        for i in 0..self.poles.len() {
            let ai = self.poles[i];
            dxf[i] = -ai * xf[i] + (self.zero - ai) * r[i];
            out[i] = r[i] + xf[i];
        }
    }

    pub fn prefilter_step(&self, xf: &[f64], r: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
        check_len("prefilter state", self.channels(), xf.len())?;
        check_len("r", self.channels(), r.len())?;
        let mut d = vec![0.0; self.channels()];
        let mut out = vec![0.0; self.channels()];
        self.step_into(xf, r, &mut d, &mut out);
        Ok((d, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Matrix exponential by scaling and squaring of a truncated Taylor
    /// series; used only as an independent oracle.
    fn expm_oracle(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let norm = a.amax() * n as f64;
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scaled = a / 2f64.powi(s);
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    fn linear_run(a: &DMatrix<f64>, x0: &[f64], h: f64, t_end: f64) -> Vec<f64> {
        let steps = (t_end / h).round() as usize;
        let mut x = x0.to_vec();
        let mut ws = Rk4Workspace::new(x.len());
        let mut field = |_t: f64, x: &[f64], dx: &mut [f64]| {
            for i in 0..x.len() {
                dx[i] = (0..x.len()).map(|j| a[(i, j)] * x[j]).sum();
            }
        };
        for k in 0..steps {
            rk4_step_into(&mut field, k as f64 * h, &mut x, h, &mut ws).unwrap();
        }
        x
    }

    fn test_matrix() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -2.0, -1.0, 0.5, 0.0, 0.3, -3.0])
    }

    #[test]
    fn zero_field_keeps_state() {
        let x = rk4_step(|_, _, dx: &mut [f64]| dx.fill(0.0), 0.0, &[1.0, -2.0], 0.1).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let x = rk4_step(|_, x: &[f64], dx: &mut [f64]| dx[0] = -x[0], 0.0, &[1.0], 0.01).unwrap();
        assert!((x[0] - (-0.01f64).exp()).abs() <= 1e-10);
    }

    #[test]
    fn linear_system_matches_expm() {
        let a = test_matrix();
        let x0 = [1.0, -0.5, 2.0];
        let x = linear_run(&a, &x0, 1e-3, 1.0);
        let exact = expm_oracle(&a) * DVector::from_column_slice(&x0);
        let err = (DVector::from_vec(x) - &exact).norm() / exact.norm();
        assert!(err <= 1e-8, "relative error {err}");
    }

    #[test]
    fn fourth_order_convergence() {
        let a = test_matrix();
        let x0 = [1.0, -0.5, 2.0];
        let exact = expm_oracle(&a) * DVector::from_column_slice(&x0);
        let e1 = (DVector::from_vec(linear_run(&a, &x0, 0.1, 1.0)) - &exact).norm();
        let e2 = (DVector::from_vec(linear_run(&a, &x0, 0.05, 1.0)) - &exact).norm();
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn blow_up_is_reported() {
        let err = rk4_step(|_, _, dx: &mut [f64]| dx[0] = f64::INFINITY, 0.0, &[0.0], 0.1);
        assert!(matches!(err, Err(DynamicsError::NonFiniteState { .. })));
    }

    fn servo_plant() -> StateSpace {
        let (phi, h) = (1.0f64, 0.5);
        let kp = DMatrix::from_row_slice(2, 2, &[phi.cos(), phi.sin(), -h * phi.sin(), h * phi.cos()]);
        StateSpace::new(DMatrix::identity(2, 2) * -2.0, kp, DMatrix::identity(2, 2), DVector::zeros(2)).unwrap()
    }

    fn third_order_plant() -> StateSpace {
        StateSpace::new(
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 1.0, -1.0]),
            DMatrix::from_row_slice(2, 3, &[1.0, 1.0, -1.0, 2.0, -5.0, 1.0]),
            DVector::zeros(3),
        )
        .unwrap()
    }

    #[test]
    fn plant_zero_input() {
        let p = servo_plant();
        assert_eq!(p.plant_derivative(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(p.plant_output(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(p.plant_derivative(&[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn servo_plant_initial_slope_is_kp_u() {
        let p = servo_plant();
        let u = [0.7, -1.3];
        let dx = p.plant_derivative(&[0.0, 0.0], &u).unwrap();
        let dy = &p.c * DVector::from_vec(dx);
        let expect = p.high_freq_gain() * DVector::from_column_slice(&u);
        assert!((dy - expect).norm() < 1e-15);
    }

    #[test]
    fn third_order_plant_poles_and_gain() {
        let p = third_order_plant();
        let mut ev: Vec<f64> = p.a.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert_eq!(ev, vec![-1.0, 1.0, 1.0]);
        assert_eq!(p.high_freq_gain(), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -2.0, 1.0]));
        assert_eq!(servo_plant().high_freq_gain(), servo_plant().b);
        let mut z = third_order_plant();
        z.b.fill(0.0);
        assert_eq!(z.high_freq_gain(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn refmodel_examples() {
        let rm = RefModel::new(vec![2.0, 2.0], vec![2.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(rm.refmodel_derivative(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        // At ym = [1, -1] with r = [1, -1] the derivative vanishes.
        assert_eq!(rm.refmodel_derivative(&[1.0, -1.0], &[1.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        let rm = RefModel::new(vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(rm.dc_gain(), vec![1.0, 1.0]);
        assert!(RefModel::new(vec![1.0, -2.0], vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(rm.refmodel_derivative(&[0.0], &[0.0, 0.0]).is_err());
    }

    fn sim_reference(square: bool) -> SignalSpec {
        let osc = |amplitude, frequency| {
            if square {
                Term::Square { amplitude, frequency }
            } else {
                Term::Sine { amplitude, frequency, phase: 0.0 }
            }
        };
        SignalSpec::new(vec![
            vec![Term::Constant { value: 1.0 }, osc(10.0, 5.0)],
            vec![Term::Constant { value: -1.0 }, osc(5.0, 3.0)],
        ])
        .unwrap()
    }

    #[test]
    fn signal_examples() {
        assert_eq!(sim_reference(false).eval_signal(0.0), vec![1.0, -1.0]);
        assert_eq!(sim_reference(true).eval_signal(0.0), vec![1.0, -1.0]);
        let empty = SignalSpec::new(vec![vec![], vec![]]).unwrap();
        assert_eq!(empty.eval_signal(3.0), vec![0.0, 0.0]);
        let sq = sim_reference(true).eval_signal(0.1);
        assert_eq!(sq, vec![11.0, 4.0]);
        assert!(SignalSpec::new(vec![]).is_err());
    }

    #[test]
    fn signal_is_bounded() {
        let s = sim_reference(false);
        let b = s.bound();
        for k in 0..5000 {
            let r = s.eval_signal(k as f64 * 0.0137);
            for (ri, bi) in r.iter().zip(&b) {
                assert!(ri.abs() <= *bi);
            }
        }
    }

    #[test]
    fn prefilter_identity_when_zero_equals_pole() {
        let pf = Prefilter::new(2.0, vec![2.0, 2.0]).unwrap();
        let (d, out) = pf.prefilter_step(&[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        assert_eq!(out, vec![3.0, -1.0]);
    }

    #[test]
    fn prefilter_dc_gain_and_feedthrough() {
        let pf = Prefilter::new(3.0, vec![2.0, 1.0]).unwrap();
        let r = [1.5, -2.0];
        // Unit feedthrough at t = 0+.
        let (_, out0) = pf.prefilter_step(&[0.0, 0.0], &r).unwrap();
        assert_eq!(out0, r.to_vec());
        // Steady state: xf = (a - a_i) r / a_i.
        let xf: Vec<f64> = (0..2).map(|i| (3.0 - pf.poles[i]) * r[i] / pf.poles[i]).collect();
        let (d, out) = pf.prefilter_step(&xf, &r).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-15));
        for i in 0..2 {
            assert!((out[i] - r[i] * 3.0 / pf.poles[i]).abs() < 1e-14);
        }
    }
}
