//! State-variable filters, the block-triangular regressor `Ω`, the `Ξ`
//! filter, the adaptation laws and the back-substituted control law
//! `u = Ω^T Θ + Ξ^T dΘ/dt`.
//!
//! Regressor ordering is `ω = [v1; v2; y; r]` and block `i` (0-based) is
//! `Ω_i = [ω; u_{i+1}; ...; u_{m-1}]`. Only the distinct scalar channels
//! `[ω; u_1; ...; u_{m-1}]` are filtered into `Ξ`; blocks are gathered from
//! that channel vector by index.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::factorization::{cholesky, is_spd};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("filter matrix Lambda is not Hurwitz")]
    NotHurwitz,
    #[error("covariance block {0} is not positive definite")]
    NonSpdCovariance(usize),
    #[error("adaptation gain block {0} is not positive definite")]
    NonSpdGain(usize),
    #[error("invalid controller setting: {0}")]
    Invalid(String),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ControllerError> {
    if expected == got {
        Ok(())
    } else {
        Err(ControllerError::DimensionMismatch { what, expected, got })
    }
}

/// Loop dimensions: `m` inputs/outputs and observability index `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub m: usize,
    pub nu: usize,
}

impl Dims {
    pub fn new(m: usize, nu: usize) -> Result<Self, ControllerError> {
        if m == 0 || nu == 0 {
            return Err(ControllerError::Invalid("m and nu must be positive".into()));
        }
        Ok(Self { m, nu })
    }

    /// Length `nu - 1` of each per-channel filter state.
    pub fn filter_order(&self) -> usize {
        self.nu - 1
    }

    /// `2 m nu`.
    pub fn omega_len(&self) -> usize {
        2 * self.m * self.nu
    }

    /// Distinct filtered channels `2 m nu + m - 1`.
    pub fn channels(&self) -> usize {
        self.omega_len() + self.m - 1
    }

    /// `N_i = 2 m nu + m - 1 - i` for 0-based block `i`.
    pub fn block_len(&self, i: usize) -> usize {
        self.omega_len() + self.m - 1 - i
    }

    pub fn param_count(&self) -> usize {
        (0..self.m).map(|i| self.block_len(i)).sum()
    }

    /// Offset of block `i` in the stacked parameter vector.
    pub fn block_offset(&self, i: usize) -> usize {
        (0..i).map(|j| self.block_len(j)).sum()
    }

    /// Channel holding entry `k` of block `i`.
    #[inline]
    pub fn block_channel(&self, i: usize, k: usize) -> usize {
        let w = self.omega_len();
        if k < w {
            k
        } else {
            // u_j with j = i + 1 + (k - w) lives in channel w + j - 1.
            w + i + (k - w)
        }
    }

    /// Channel holding `u_j` (0-based, `j >= 1`).
    pub fn u_channel(&self, j: usize) -> usize {
        self.omega_len() + j - 1
    }

    /// Packed upper-triangle length of covariance block `i`.
    pub fn packed_len(&self, i: usize) -> usize {
        let n = self.block_len(i);
        n * (n + 1) / 2
    }

    pub fn packed_total(&self) -> usize {
        (0..self.m).map(|i| self.packed_len(i)).sum()
    }
}

/// Row-major packing of the upper triangle of a symmetric matrix.
pub fn pack_symmetric(mat: &DMatrix<f64>, out: &mut [f64]) {
    let n = mat.nrows();
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            k += 1;
        }
    }
}

pub fn unpack_symmetric(packed: &[f64], n: usize, out: &mut DMatrix<f64>) {
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[(i, j)] = packed[k];
            out[(j, i)] = packed[k];
            k += 1;
        }
    }
}

/// Characteristic polynomial coefficients `[1, c1, ..., cn]` of `a` by the
/// Faddeev-LeVerrier recursion.
fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![1.0];
    let mut mk = DMatrix::<f64>::zeros(n, n);
    let id = DMatrix::<f64>::identity(n, n);
    for k in 1..=n {
        mk = a * &mk + &id * coeffs[k - 1];
        let c = -(a * &mk).trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

/// Hurwitz test: Routh conditions on the characteristic polynomial up to
/// order 3, otherwise a Lyapunov certificate `A^T P + P A = -I, P > 0`.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    if a.ncols() != n || a.iter().any(|v| !v.is_finite()) {
        return false;
    }
    match n {
        1 => a[(0, 0)] < 0.0,
        2 | 3 => {
            let c = char_poly(a);
            if c[1..].iter().any(|v| !(*v > 0.0)) {
                return false;
            }
            n == 2 || c[1] * c[2] > c[3]
        }
        _ => {
            // (I ⊗ A^T + A^T ⊗ I) vec(P) = -vec(I)
            let at = a.transpose();
            let id = DMatrix::<f64>::identity(n, n);
            let lhs = id.kronecker(&at) + at.kronecker(&id);
            let rhs = -DVector::from_iterator(n * n, id.iter().copied());
            match lhs.lu().solve(&rhs) {
                Some(p) => is_spd(&DMatrix::from_column_slice(n, n, p.as_slice())),
                None => false,
            }
        }
    }
}

/// State-variable filters `dv1_i = Λ v1_i + g u_i`, `dv2_i = Λ v2_i + g y_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub lambda: DMatrix<f64>,
    pub g: DVector<f64>,
    pub dims: Dims,
}

impl FilterBank {
    pub fn new(lambda: DMatrix<f64>, g: DVector<f64>, dims: Dims) -> Result<Self, ControllerError> {
        let k = dims.filter_order();
        check_len("Lambda rows", k, lambda.nrows())?;
        check_len("Lambda columns", k, lambda.ncols())?;
        check_len("g", k, g.len())?;
        if !is_hurwitz(&lambda) {
            return Err(ControllerError::NotHurwitz);
        }
        Ok(Self { lambda, g, dims })
    }

    /// `Λ = -λI`, `g = [1, ..., 1]`.
    pub fn diagonal(lambda: f64, dims: Dims) -> Result<Self, ControllerError> {
        let k = dims.filter_order();
        Self::new(DMatrix::identity(k, k) * -lambda, DVector::from_element(k, 1.0), dims)
    }

    /// `v1`, `v2` are `m (nu - 1)` long, channel-major.
    pub fn derivatives_into(&self, v1: &[f64], v2: &[f64], u: &[f64], y: &[f64], dv1: &mut [f64], dv2: &mut [f64]) {
        let k = self.dims.filter_order();
        for ch in 0..self.dims.m {
            let o = ch * k;
            for r in 0..k {
                let mut a1 = self.g[r] * u[ch];
                let mut a2 = self.g[r] * y[ch];
                for c in 0..k {
                    a1 += self.lambda[(r, c)] * v1[o + c];
                    a2 += self.lambda[(r, c)] * v2[o + c];
                }
                dv1[o + r] = a1;
                dv2[o + r] = a2;
            }
        }
    }

    pub fn filter_derivatives(
        &self,
        v1: &[f64],
        v2: &[f64],
        u: &[f64],
        y: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ControllerError> {
        let n = self.dims.m * self.dims.filter_order();
        check_len("v1", n, v1.len())?;
        check_len("v2", n, v2.len())?;
        check_len("u", self.dims.m, u.len())?;
        check_len("y", self.dims.m, y.len())?;
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        self.derivatives_into(v1, v2, u, y, &mut d1, &mut d2);
        Ok((d1, d2))
    }
}

/// Assembles `ω = [v1; v2; y; r]`.
pub fn assemble_omega(v1: &[f64], v2: &[f64], y: &[f64], r: &[f64], out: &mut [f64]) {
    let mut k = 0;
    for s in [v1, v2, y, r] {
        out[k..k + s.len()].copy_from_slice(s);
        k += s.len();
    }
}

/// The regressor channels `[ω; u_1; ...; u_{m-1}]` and their block views.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaStack {
    pub dims: Dims,
    pub channels: DVector<f64>,
}

impl OmegaStack {
    pub fn block(&self, i: usize) -> DVector<f64> {
        gather_block(&self.dims, self.channels.as_slice(), i)
    }

    pub fn blocks(&self) -> Vec<DVector<f64>> {
        (0..self.dims.m).map(|i| self.block(i)).collect()
    }
}

fn gather_block(dims: &Dims, channels: &[f64], i: usize) -> DVector<f64> {
    DVector::from_iterator(dims.block_len(i), (0..dims.block_len(i)).map(|k| channels[dims.block_channel(i, k)]))
}

/// `Ω_i = [ω; u_{i+1}; ...; u_m]`; only the entries of `u` past the block
/// index are read.
pub fn build_omega(dims: Dims, omega: &[f64], u: &[f64]) -> Result<OmegaStack, ControllerError> {
    check_len("omega", dims.omega_len(), omega.len())?;
    check_len("u", dims.m, u.len())?;
    let mut ch = DVector::zeros(dims.channels());
    ch.as_mut_slice()[..omega.len()].copy_from_slice(omega);
    for j in 1..dims.m {
        ch[dims.u_channel(j)] = u[j];
    }
    Ok(OmegaStack { dims, channels: ch })
}

/// Filtered regressor `Ξ = Ω / (s + ℓ0)`, stored per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct XiState {
    pub dims: Dims,
    pub ell0: f64,
    pub channels: DVector<f64>,
}

impl XiState {
    pub fn zeros(dims: Dims, ell0: f64) -> Self {
        Self {
            dims,
            ell0,
            channels: DVector::zeros(dims.channels()),
        }
    }

    pub fn block(&self, i: usize) -> DVector<f64> {
        gather_block(&self.dims, self.channels.as_slice(), i)
    }

    pub fn blocks(&self) -> Vec<DVector<f64>> {
        (0..self.dims.m).map(|i| self.block(i)).collect()
    }
}

/// `dΞ/dt = -ℓ0 Ξ + Ω` on the shared channel vector.
pub fn xi_derivative(xi: &XiState, omega: &OmegaStack) -> Result<XiState, ControllerError> {
    if xi.dims != omega.dims {
        return Err(ControllerError::Invalid("Xi and Omega dimensions differ".into()));
    }
    Ok(XiState {
        dims: xi.dims,
        ell0: xi.ell0,
        channels: omega.channels.clone() - &xi.channels * xi.ell0,
    })
}

/// Switched σ-modification: leakage `σ_max` when `‖Θ‖ > M0`, otherwise 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaMod {
    pub enabled: bool,
    pub sigma_max: f64,
    pub m0: f64,
}

impl Default for SigmaMod {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma_max: 10.0,
            m0: 1.0,
        }
    }
}

impl SigmaMod {
    pub fn switched(&self, theta_norm: f64) -> f64 {
        if self.enabled && theta_norm > self.m0 {
            self.sigma_max
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Law {
    /// `dΘ_i = -γ sign(d_i) e0_i R_i Ξ_i`, `dR_i = -R_i Ξ_i Ξ_i^T R_i`.
    LeastSquares { gamma: f64 },
    /// `dΘ_i = -sign(d_i) e0_i Γ_i Ξ_i`.
    MMrac { gain: Vec<DMatrix<f64>> },
    /// `dΘ_i = -sign(d_i) e0_i Γ_i Ω_i` with the plain law `u = Ω^T Θ`.
    Gradient { gain: Vec<DMatrix<f64>> },
}

impl Law {
    pub fn name(&self) -> &'static str {
        match self {
            Law::LeastSquares { .. } => "ls",
            Law::MMrac { .. } => "mmrac",
            Law::Gradient { .. } => "gradient",
        }
    }

    pub fn has_covariance(&self) -> bool {
        matches!(self, Law::LeastSquares { .. })
    }
}

/// Adaptive parameters and (for least squares) covariance blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub theta: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl AdaptiveState {
    pub fn stacked_theta(&self) -> DVector<f64> {
        let data: Vec<f64> = self.theta.iter().flat_map(|b| b.iter().copied()).collect();
        DVector::from_vec(data)
    }
}

/// Derivatives produced by one evaluation of the adaptation law.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveRates {
    pub theta_dot: Vec<DVector<f64>>,
    /// `dR_i/dt` under least squares, `None` for constant-gain laws.
    pub cov_dot: Option<Vec<DMatrix<f64>>>,
}

/// Controller configuration shared by all derivative evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub dims: Dims,
    pub filters: FilterBank,
    pub ell0: f64,
    pub law: Law,
    pub sign_d: Vec<f64>,
    pub sigma: SigmaMod,
}

/// Reusable buffers for [`Controller::evaluate`].
#[derive(Debug, Clone)]
pub struct ControlScratch {
    pub channels: Vec<f64>,
    pub u: Vec<f64>,
    pub theta_dot: Vec<f64>,
    pub cov_dot: Vec<f64>,
    regressor: Vec<f64>,
    xi_block: Vec<f64>,
    omega_block: Vec<f64>,
    w: Vec<f64>,
    cov: DMatrix<f64>,
}

impl ControlScratch {
    pub fn new(dims: Dims) -> Self {
        let n0 = dims.block_len(0);
        Self {
            channels: vec![0.0; dims.channels()],
            u: vec![0.0; dims.m],
            theta_dot: vec![0.0; dims.param_count()],
            cov_dot: vec![0.0; dims.packed_total()],
            regressor: vec![0.0; n0],
            xi_block: vec![0.0; n0],
            omega_block: vec![0.0; n0],
            w: vec![0.0; n0],
            cov: DMatrix::zeros(n0, n0),
        }
    }
}

impl Controller {
    pub fn new(
        dims: Dims,
        filters: FilterBank,
        ell0: f64,
        law: Law,
        sign_d: Vec<f64>,
        sigma: SigmaMod,
    ) -> Result<Self, ControllerError> {
        if filters.dims != dims {
            return Err(ControllerError::Invalid("filter bank dimensions differ".into()));
        }
        if !(ell0 > 0.0) || !ell0.is_finite() {
            return Err(ControllerError::Invalid(format!("ell0 = {ell0} must be > 0")));
        }
        check_len("sign_d", dims.m, sign_d.len())?;
        if sign_d.iter().any(|s| *s != 1.0 && *s != -1.0) {
            return Err(ControllerError::Invalid("sign_d entries must be +1 or -1".into()));
        }
        match &law {
            Law::LeastSquares { gamma } => {
                if !(*gamma >= 0.0) || !gamma.is_finite() {
                    return Err(ControllerError::Invalid(format!("gamma = {gamma} must be >= 0")));
                }
            }
            Law::MMrac { gain } | Law::Gradient { gain } => {
                check_len("gain blocks", dims.m, gain.len())?;
                for (i, g) in gain.iter().enumerate() {
                    check_len("gain block", dims.block_len(i), g.nrows())?;
                    if !is_spd(g) {
                        return Err(ControllerError::NonSpdGain(i + 1));
                    }
                }
            }
        }
        if sigma.enabled && (!(sigma.sigma_max >= 0.0) || !(sigma.m0 > 0.0)) {
            return Err(ControllerError::Invalid("sigma-modification needs sigma_max >= 0 and M0 > 0".into()));
        }
        Ok(Self {
            dims,
            filters,
            ell0,
            law,
            sign_d,
            sigma,
        })
    }

    /// Adaptation rate of block `i` given its regressor, parameters and
    /// covariance (packed, least squares only). Writes `dΘ_i` into
    /// `theta_dot` and, for least squares, packed `dR_i` into `cov_dot`.
    #[allow(clippy::too_many_arguments)]
    fn block_rate(
        &self,
        i: usize,
        regressor: &[f64],
        theta: &[f64],
        cov_packed: &[f64],
        e0: f64,
        sigma_sw: f64,
        theta_dot: &mut [f64],
        cov_dot: &mut [f64],
        w: &mut [f64],
        cov: &mut DMatrix<f64>,
    ) {
        let n = self.dims.block_len(i);
        let s = self.sign_d[i] * e0;
        match &self.law {
            Law::LeastSquares { gamma } => {
                unpack_symmetric(cov_packed, n, cov);
                for r in 0..n {
                    w[r] = (0..n).map(|c| cov[(r, c)] * regressor[c]).sum();
                }
                for r in 0..n {
                    let mut v = -gamma * s * w[r];
                    if sigma_sw != 0.0 {
                        let rt: f64 = (0..n).map(|c| cov[(r, c)] * theta[c]).sum();
                        v -= sigma_sw * gamma * rt;
                    }
                    theta_dot[r] = v;
                }
                let mut k = 0;
                for r in 0..n {
                    for c in r..n {
                        cov_dot[k] = -w[r] * w[c];
                        k += 1;
                    }
                }
            }
            Law::MMrac { gain } | Law::Gradient { gain } => {
                // Same grouping as the least-squares branch, so that Γ = γR
                // gives bit-identical rates.
                let g = &gain[i];
                for r in 0..n {
                    let w: f64 = (0..n).map(|c| g[(r, c)] * regressor[c]).sum();
                    let mut v = -s * w;
                    if sigma_sw != 0.0 {
                        let gt: f64 = (0..n).map(|c| g[(r, c)] * theta[c]).sum();
                        v -= sigma_sw * gt;
                    }
                    theta_dot[r] = v;
                }
            }
        }
    }

    fn sigma_switch(&self, theta: &[f64]) -> f64 {
        if self.sigma.enabled {
            self.sigma.switched(theta.iter().map(|v| v * v).sum::<f64>().sqrt())
        } else {
            0.0
        }
    }

    /// Back-substitution from the last block to the first:
    /// `dΘ_i` never depends on `u`, and `Ω_i` only reads `u_{i+1..m}`, which
    /// are already computed when block `i` is reached.
    ///
    /// `xi` holds the filtered channels, `omega` is `ω`, `theta` the stacked
    /// parameters and `cov` the packed covariance (ignored unless least
    /// squares). Results land in `scratch.u`, `scratch.theta_dot` and
    /// `scratch.cov_dot`.
    pub fn evaluate(&self, xi: &[f64], omega: &[f64], theta: &[f64], cov: &[f64], e0: &[f64], scratch: &mut ControlScratch) {
        let dims = self.dims;
        let w_len = dims.omega_len();
        scratch.channels[..w_len].copy_from_slice(omega);
        let sigma_sw = self.sigma_switch(theta);
        let gradient = matches!(self.law, Law::Gradient { .. });

        let mut cov_off = dims.packed_total();
        for i in (0..dims.m).rev() {
            let n = dims.block_len(i);
            let off = dims.block_offset(i);
            cov_off -= dims.packed_len(i);
            for k in 0..n {
                let ch = dims.block_channel(i, k);
                scratch.xi_block[k] = xi[ch];
                scratch.omega_block[k] = scratch.channels[ch];
            }
            scratch.regressor[..n].copy_from_slice(if gradient {
                &scratch.omega_block[..n]
            } else {
                &scratch.xi_block[..n]
            });
            let cov_block: &[f64] = if self.law.has_covariance() {
                &cov[cov_off..cov_off + dims.packed_len(i)]
            } else {
                &[]
            };
            let (td, cd) = (
                &mut scratch.theta_dot[off..off + n],
                if self.law.has_covariance() {
                    &mut scratch.cov_dot[cov_off..cov_off + dims.packed_len(i)]
                } else {
                    &mut scratch.cov_dot[0..0]
                },
            );
            self.block_rate(
                i,
                &scratch.regressor[..n],
                &theta[off..off + n],
                cov_block,
                e0[i],
                sigma_sw,
                td,
                cd,
                &mut scratch.w,
                &mut scratch.cov,
            );
            let th = &theta[off..off + n];
            let mut ui: f64 = (0..n).map(|k| scratch.omega_block[k] * th[k]).sum();
            if !gradient {
                ui += (0..n).map(|k| scratch.xi_block[k] * scratch.theta_dot[off + k]).sum::<f64>();
            }
            scratch.u[i] = ui;
            if i >= 1 {
                scratch.channels[dims.u_channel(i)] = ui;
            }
        }
    }

    fn pack_state(&self, a: &AdaptiveState) -> Result<(Vec<f64>, Vec<f64>), ControllerError> {
        let dims = self.dims;
        check_len("theta blocks", dims.m, a.theta.len())?;
        let mut theta = Vec::with_capacity(dims.param_count());
        for (i, b) in a.theta.iter().enumerate() {
            check_len("theta block", dims.block_len(i), b.len())?;
            theta.extend(b.iter());
        }
        let mut cov = vec![0.0; dims.packed_total()];
        if self.law.has_covariance() {
            check_len("covariance blocks", dims.m, a.cov.len())?;
            let mut off = 0;
            for (i, r) in a.cov.iter().enumerate() {
                check_len("covariance block", dims.block_len(i), r.nrows())?;
                pack_symmetric(r, &mut cov[off..off + dims.packed_len(i)]);
                off += dims.packed_len(i);
            }
        }
        Ok((theta, cov))
    }

    fn unpack_rates(&self, scratch: &ControlScratch) -> AdaptiveRates {
        let dims = self.dims;
        let theta_dot = (0..dims.m)
            .map(|i| {
                let off = dims.block_offset(i);
                DVector::from_column_slice(&scratch.theta_dot[off..off + dims.block_len(i)])
            })
            .collect();
        let cov_dot = self.law.has_covariance().then(|| {
            let mut off = 0;
            (0..dims.m)
                .map(|i| {
                    let n = dims.block_len(i);
                    let mut m = DMatrix::zeros(n, n);
                    unpack_symmetric(&scratch.cov_dot[off..off + dims.packed_len(i)], n, &mut m);
                    off += dims.packed_len(i);
                    m
                })
                .collect()
        });
        AdaptiveRates { theta_dot, cov_dot }
    }

    /// Adaptation rates for a fully assembled regressor stack.
    pub fn theta_dot(&self, a: &AdaptiveState, xi: &XiState, omega: &OmegaStack, e0: &[f64]) -> Result<AdaptiveRates, ControllerError> {
        check_len("e0", self.dims.m, e0.len())?;
        let (theta, cov) = self.pack_state(a)?;
        let mut scratch = ControlScratch::new(self.dims);
        let sigma_sw = self.sigma_switch(&theta);
        let gradient = matches!(self.law, Law::Gradient { .. });
        let mut cov_off = 0;
        for i in 0..self.dims.m {
            let n = self.dims.block_len(i);
            let off = self.dims.block_offset(i);
            let reg = if gradient { omega.block(i) } else { xi.block(i) };
            let pl = self.dims.packed_len(i);
            let (cb, cd): (&[f64], &mut [f64]) = if self.law.has_covariance() {
                (&cov[cov_off..cov_off + pl], &mut scratch.cov_dot[cov_off..cov_off + pl])
            } else {
                (&[], &mut [])
            };
            self.block_rate(
                i,
                reg.as_slice(),
                &theta[off..off + n],
                cb,
                e0[i],
                sigma_sw,
                &mut scratch.theta_dot[off..off + n],
                cd,
                &mut scratch.w,
                &mut scratch.cov,
            );
            cov_off += pl;
        }
        Ok(self.unpack_rates(&scratch))
    }

    /// Control `u` and parameter rates from the filtered regressor, `ω` and
    /// the tracking error.
    pub fn compute_control(
        &self,
        a: &AdaptiveState,
        xi: &XiState,
        omega: &[f64],
        e0: &[f64],
    ) -> Result<(Vec<f64>, AdaptiveRates), ControllerError> {
        check_len("omega", self.dims.omega_len(), omega.len())?;
        check_len("e0", self.dims.m, e0.len())?;
        check_len("Xi channels", self.dims.channels(), xi.channels.len())?;
        let (theta, cov) = self.pack_state(a)?;
        let mut scratch = ControlScratch::new(self.dims);
        self.evaluate(xi.channels.as_slice(), omega, &theta, &cov, e0, &mut scratch);
        Ok((scratch.u.clone(), self.unpack_rates(&scratch)))
    }

    /// Cholesky check of every covariance block.
    pub fn check_covariance(&self, a: &AdaptiveState) -> Result<(), ControllerError> {
        for (i, r) in a.cov.iter().enumerate() {
            if cholesky(r).is_none() {
                return Err(ControllerError::NonSpdCovariance(i + 1));
            }
        }
        Ok(())
    }
}

/// `sign(d_i) = sign(Δ_i) sign(Δ_{i-1})` with `sign(Δ_0) = +1`.
pub fn sign_d_from_minors(minor_signs: &[f64]) -> Vec<f64> {
    let mut prev = 1.0;
    minor_signs
        .iter()
        .map(|s| {
            let s = s.signum();
            let d = s * prev;
            prev = s;
            d
        })
        .collect()
}
