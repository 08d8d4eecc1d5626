//! Leading minors, LDU and SDU factorizations of the high-frequency gain
//! matrix, and the geometric `D+` construction that certifies
//! `-(A S^-1 + S^-1 A) > 0` for a diagonal Hurwitz `A`.
//!
//! All routines are plain functions over small dense matrices. Pivoting is
//! deliberately restricted to the leading blocks: the factorizations are
//! defined in terms of leading principal minors, so a row exchange would
//! change the object being factored.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dense square matrix. Shape is checked by each operation.
pub type SquareMatrix = DMatrix<f64>;

/// Default threshold on the row-scaled magnitude of a leading minor.
pub const DEFAULT_MINOR_TOL: f64 = 1e-10;

/// Largest `d+` tried by [`find_dplus`] (2^60).
pub const DPLUS_SEARCH_CAP: f64 = 1152921504606846976.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("matrix has non-finite entries")]
    NonFinite,
    /// Leading principal minor `index` (1-based) is numerically zero.
    #[error("leading principal minor {0} is singular")]
    SingularMinor(usize),
    /// Entry `index` (1-based) of the positive diagonal scaling is not positive.
    #[error("D+ entry {0} is not positive")]
    NonPositiveDplus(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reference-model matrix entry {0} is not negative")]
    NonHurwitzModel(usize),
    #[error("no d+ up to 2^60 certified the factorization")]
    SearchExhausted,
}

/// Unique unit-triangular factorization `K = Lp * Dp * Up`.
#[derive(Debug, Clone, PartialEq)]
pub struct LduResult {
    pub lp: SquareMatrix,
    pub dp: SquareMatrix,
    pub up: SquareMatrix,
    /// Leading principal minors `Δ1..Δm`.
    pub minors: Vec<f64>,
}

impl LduResult {
    pub fn dp_diagonal(&self) -> DVector<f64> {
        self.dp.diagonal()
    }
}

/// `K = S * D * U` with `S` symmetric positive definite, `D` diagonal and `U`
/// unit upper triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct SduResult {
    pub s: SquareMatrix,
    pub d: SquareMatrix,
    pub u: SquareMatrix,
    pub dplus: SquareMatrix,
    pub sign_d: Vec<f64>,
}

impl SduResult {
    pub fn d_diagonal(&self) -> DVector<f64> {
        self.d.diagonal()
    }
}

fn check_square(k: &SquareMatrix) -> Result<usize, FactorError> {
    if k.nrows() != k.ncols() {
        return Err(FactorError::NotSquare {
            rows: k.nrows(),
            cols: k.ncols(),
        });
    }
    if k.nrows() == 0 {
        return Err(FactorError::Empty);
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(FactorError::NonFinite);
    }
    Ok(k.nrows())
}

/// Determinant by Gaussian elimination with partial pivoting.
fn det_partial_pivot(mut a: DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut det = 1.0;
    for col in 0..n {
        let (piv, pmax) = (col..n)
            .map(|r| (r, a[(r, col)].abs()))
            .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if pmax == 0.0 {
            return 0.0;
        }
        if piv != col {
            a.swap_rows(piv, col);
            det = -det;
        }
        let p = a[(col, col)];
        det *= p;
        for r in col + 1..n {
            let f = a[(r, col)] / p;
            if f != 0.0 {
                for c in col + 1..n {
                    a[(r, c)] -= f * a[(col, c)];
                }
            }
        }
    }
    det
}

/// Leading principal minors `Δi = det K[0..i, 0..i]` for `i = 1..m`.
///
/// Each minor is evaluated independently so that a zero minor is reported
/// as a value instead of breaking the elimination for the larger blocks.
pub fn leading_minors(k: &SquareMatrix) -> Vec<f64> {
    let m = k.nrows().min(k.ncols());
    (1..=m)
        .map(|i| det_partial_pivot(k.view((0, 0), (i, i)).into_owned()))
        .collect()
}

/// Row-scaled magnitude `|Δi| / Π ||row_j||` of every leading minor. By
/// Hadamard's inequality each value lies in `[0, 1]`.
fn scaled_minors(k: &SquareMatrix, minors: &[f64]) -> Vec<f64> {
    minors
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let scale: f64 = (0..=i)
                .map(|j| k.view((j, 0), (1, i + 1)).norm())
                .product();
            if scale == 0.0 {
                0.0
            } else {
                d.abs() / scale
            }
        })
        .collect()
}

pub fn ldu_factor(k: &SquareMatrix) -> Result<LduResult, FactorError> {
    ldu_factor_with_tol(k, DEFAULT_MINOR_TOL)
}

/// LDU factorization by Doolittle elimination without row exchanges.
///
/// Fails with [`FactorError::SingularMinor`] when a leading minor is below
/// `tol` after row-norm scaling.
pub fn ldu_factor_with_tol(k: &SquareMatrix, tol: f64) -> Result<LduResult, FactorError> {
    let m = check_square(k)?;
    let minors = leading_minors(k);
    for (i, s) in scaled_minors(k, &minors).iter().enumerate() {
        if *s <= tol {
            return Err(FactorError::SingularMinor(i + 1));
        }
    }

    let mut work = k.clone();
    let mut lp = SquareMatrix::identity(m, m);
    for col in 0..m {
        let p = work[(col, col)];
        if p == 0.0 || !p.is_finite() {
            return Err(FactorError::SingularMinor(col + 1));
        }
        for r in col + 1..m {
            let f = work[(r, col)] / p;
            lp[(r, col)] = f;
            work[(r, col)] = 0.0;
            for c in col + 1..m {
                work[(r, c)] -= f * work[(col, c)];
            }
        }
    }
    let mut dp = SquareMatrix::zeros(m, m);
    let mut up = SquareMatrix::identity(m, m);
    for i in 0..m {
        let p = work[(i, i)];
        dp[(i, i)] = p;
        for j in i + 1..m {
            up[(i, j)] = work[(i, j)] / p;
        }
    }
    Ok(LduResult { lp, dp, up, minors })
}

/// `diag{1, d^2, d^4, ..., d^(2(m-1))}`.
pub fn dplus_geometric(d_plus: f64, m: usize) -> SquareMatrix {
    let d2 = d_plus * d_plus;
    let mut out = SquareMatrix::zeros(m, m);
    let mut v = 1.0;
    for i in 0..m {
        out[(i, i)] = v;
        v *= d2;
    }
    out
}

/// `L+ = D+^{-1/2} Lp D+^{1/2}` for the geometric `D+`: entry `(i, j)`
/// below the diagonal is `l_ij / d^(i-j)`.
pub fn lplus(lp: &SquareMatrix, d_plus: f64) -> SquareMatrix {
    let m = lp.nrows();
    let mut out = SquareMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..i {
            out[(i, j)] = lp[(i, j)] / d_plus.powi((i - j) as i32);
        }
    }
    out
}

/// Forward substitution for `Lp^{-1}` with a unit lower triangular `Lp`.
fn unit_lower_inverse(lp: &SquareMatrix) -> SquareMatrix {
    let m = lp.nrows();
    let mut inv = SquareMatrix::identity(m, m);
    for col in 0..m {
        for i in col + 1..m {
            let mut acc = 0.0;
            for k in col..i {
                acc += lp[(i, k)] * inv[(k, col)];
            }
            inv[(i, col)] = -acc;
        }
    }
    inv
}

pub fn sdu_factor(k: &SquareMatrix, dplus: &SquareMatrix) -> Result<SduResult, FactorError> {
    let ldu = ldu_factor(k)?;
    sdu_from_ldu(&ldu, dplus)
}

/// SDU factorization built on an existing LDU:
/// `S = Lp D+ Lp^T`, `D = D+^{-1} Dp`, `U = D^{-1} Lp^{-T} D Up`.
pub fn sdu_from_ldu(ldu: &LduResult, dplus: &SquareMatrix) -> Result<SduResult, FactorError> {
    let m = ldu.lp.nrows();
    if dplus.nrows() != m || dplus.ncols() != m {
        return Err(FactorError::DimensionMismatch {
            expected: m,
            got: dplus.nrows(),
        });
    }
    let mut dp_pos = SquareMatrix::zeros(m, m);
    for i in 0..m {
        let v = dplus[(i, i)];
        if !(v > 0.0) || !v.is_finite() {
            return Err(FactorError::NonPositiveDplus(i + 1));
        }
        dp_pos[(i, i)] = v;
    }

    let lp = &ldu.lp;
    let mut s = lp * &dp_pos * lp.transpose();
    // Exact symmetry: the product above is symmetric only up to rounding.
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }

    let d_diag: Vec<f64> = (0..m).map(|i| ldu.dp[(i, i)] / dp_pos[(i, i)]).collect();
    let d = SquareMatrix::from_diagonal(&DVector::from_vec(d_diag.clone()));

    // (D^{-1} Lp^{-T} D)_ij = (Lp^{-T})_ij d_j / d_i, upper triangular.
    let lit = unit_lower_inverse(lp).transpose();
    let mut u = SquareMatrix::identity(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let mut acc = 0.0;
            for k in i..=j {
                let left = if k == i { 1.0 } else { lit[(i, k)] * d_diag[k] / d_diag[i] };
                acc += left * ldu.up[(k, j)];
            }
            u[(i, j)] = acc;
        }
    }

    let sign_d = ldu.dp.diagonal().iter().map(|v| v.signum()).collect();
    Ok(SduResult {
        s,
        d,
        u,
        dplus: dp_pos,
        sign_d,
    })
}

/// `|Dp|`: the scaling that makes `|D| = I`.
pub fn dplus_abs(ldu: &LduResult) -> SquareMatrix {
    SquareMatrix::from_diagonal(&ldu.dp.diagonal().map(f64::abs))
}

/// Cholesky factor `L` with `M = L L^T`, or `None` on a non-positive pivot.
pub fn cholesky(m: &SquareMatrix) -> Option<SquareMatrix> {
    let n = m.nrows();
    if n != m.ncols() {
        return None;
    }
    let mut l = SquareMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / ljj;
        }
    }
    Some(l)
}

/// Symmetric to `1e-10 * ||M||` and Cholesky-factorable with positive pivots.
pub fn is_spd(m: &SquareMatrix) -> bool {
    if m.nrows() != m.ncols() || m.nrows() == 0 || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let tol = 1e-10 * m.norm();
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    cholesky(m).is_some()
}

/// Stability certificate of the factorization found by [`find_dplus`].
#[derive(Debug, Clone, PartialEq)]
pub struct DplusCertificate {
    pub d_plus: f64,
    /// `Q = -(A S^-1 + S^-1 A) / 2`, positive definite.
    pub q: SquareMatrix,
    pub sdu: SduResult,
}

/// Doubling search `d+ = 1, 2, 4, ...` for the first geometric `D+` with
/// `L+ L+^T A + A L+ L+^T < 0`; returns `d+`, the certified `Q` and the
/// SDU factors at that `d+`.
pub fn find_dplus(k: &SquareMatrix, am: &[f64]) -> Result<DplusCertificate, FactorError> {
    let m = check_square(k)?;
    if am.len() != m {
        return Err(FactorError::DimensionMismatch {
            expected: m,
            got: am.len(),
        });
    }
    if let Some(i) = am.iter().position(|a| !(*a < 0.0)) {
        return Err(FactorError::NonHurwitzModel(i + 1));
    }
    let ldu = ldu_factor(k)?;
    let a = SquareMatrix::from_diagonal(&DVector::from_column_slice(am));

    let mut d_plus = 1.0;
    while d_plus <= DPLUS_SEARCH_CAP {
        let lpl = lplus(&ldu.lp, d_plus);
        let llt = &lpl * lpl.transpose();
        let test = -(&llt * &a + &a * &llt);
        if is_spd(&test) {
            let sdu = sdu_from_ldu(&ldu, &dplus_geometric(d_plus, m))?;
            if let Some(s_inv) = sdu.s.clone().cholesky().map(|c| c.inverse()) {
                let mut q = -(&a * &s_inv + &s_inv * &a) * 0.5;
                q = (&q + q.transpose()) * 0.5;
                if is_spd(&q) {
                    return Ok(DplusCertificate { d_plus, q, sdu });
                }
            }
        }
        d_plus *= 2.0;
    }
    Err(FactorError::SearchExhausted)
}

/// Adaptation-gain threshold `γ > max_i |d_p,i|^{-1} / 2`.
pub fn gamma_threshold(ldu: &LduResult) -> f64 {
    0.5 * ldu
        .dp
        .diagonal()
        .iter()
        .map(|d| 1.0 / d.abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> SquareMatrix {
        let m = rows.len();
        SquareMatrix::from_fn(m, rows[0].len(), |i, j| rows[i][j])
    }

    fn servo_gain(phi: f64, h: f64) -> SquareMatrix {
        mat(&[&[phi.cos(), phi.sin()], &[-h * phi.sin(), h * phi.cos()]])
    }

    fn rel_err(a: &SquareMatrix, b: &SquareMatrix) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn minors_of_identity_and_examples() {
        assert_eq!(leading_minors(&SquareMatrix::identity(2, 2)), vec![1.0, 1.0]);
        let m = leading_minors(&mat(&[&[1.0, 2.0], &[-2.0, 1.0]]));
        assert!((m[0] - 1.0).abs() < 1e-15 && (m[1] - 5.0).abs() < 1e-14);
        let m = leading_minors(&servo_gain(1.0, 0.5));
        assert!((m[0] - 1f64.cos()).abs() < 1e-15);
        assert!((m[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_minor_is_a_value() {
        let m = leading_minors(&mat(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(m[0], 0.0);
        assert!((m[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ldu_examples() {
        let id = SquareMatrix::identity(3, 3);
        let r = ldu_factor(&id).unwrap();
        assert_eq!(r.lp, id);
        assert_eq!(r.dp, id);
        assert_eq!(r.up, id);

        let k = mat(&[&[1.0, 2.0], &[-2.0, 1.0]]);
        let r = ldu_factor(&k).unwrap();
        assert_eq!(r.lp, mat(&[&[1.0, 0.0], &[-2.0, 1.0]]));
        assert_eq!(r.dp, mat(&[&[1.0, 0.0], &[0.0, 5.0]]));
        assert_eq!(r.up, mat(&[&[1.0, 2.0], &[0.0, 1.0]]));
        assert_eq!(&r.lp * &r.dp * &r.up, k);

        assert_eq!(
            ldu_factor(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])),
            Err(FactorError::SingularMinor(1))
        );
        assert_eq!(
            ldu_factor(&mat(&[&[1.0, 1.0], &[1.0, 1.0]])),
            Err(FactorError::SingularMinor(2))
        );
    }

    #[test]
    fn ldu_rejects_bad_shapes() {
        assert!(matches!(
            ldu_factor(&SquareMatrix::zeros(2, 3)),
            Err(FactorError::NotSquare { .. })
        ));
        assert_eq!(ldu_factor(&SquareMatrix::zeros(0, 0)), Err(FactorError::Empty));
        let mut k = SquareMatrix::identity(2, 2);
        k[(0, 1)] = f64::NAN;
        assert_eq!(ldu_factor(&k), Err(FactorError::NonFinite));
    }

    #[test]
    fn dplus_examples() {
        assert_eq!(dplus_geometric(1.0, 3), SquareMatrix::identity(3, 3));
        assert_eq!(
            dplus_geometric(2.0, 3).diagonal().as_slice(),
            &[1.0, 4.0, 16.0]
        );
        assert_eq!(dplus_geometric(10.0, 2).diagonal().as_slice(), &[1.0, 100.0]);
    }

    #[test]
    fn lplus_examples() {
        assert_eq!(lplus(&SquareMatrix::identity(3, 3), 3.0), SquareMatrix::identity(3, 3));
        let lp = mat(&[&[1.0, 0.0], &[-2.0, 1.0]]);
        assert_eq!(lplus(&lp, 4.0), mat(&[&[1.0, 0.0], &[-0.5, 1.0]]));
        let lp3 = mat(&[&[1.0, 0.0, 0.0], &[3.0, 1.0, 0.0], &[-7.0, 0.5, 1.0]]);
        let big = lplus(&lp3, 1e6);
        let off = (&big - SquareMatrix::identity(3, 3)).amax();
        assert!(off <= 7.0 / 1e6);
    }

    #[test]
    fn sdu_identity() {
        let id = SquareMatrix::identity(2, 2);
        let r = sdu_factor(&id, &id).unwrap();
        assert_eq!(r.s, id);
        assert_eq!(r.d, id);
        assert_eq!(r.u, id);
        assert_eq!(r.sign_d, vec![1.0, 1.0]);
    }

    #[test]
    fn sdu_with_abs_dp() {
        let k = mat(&[&[1.0, 2.0], &[-2.0, 1.0]]);
        let ldu = ldu_factor(&k).unwrap();
        let r = sdu_from_ldu(&ldu, &dplus_abs(&ldu)).unwrap();
        assert_eq!(r.d, SquareMatrix::identity(2, 2));
        assert!(rel_err(&r.s, &mat(&[&[1.0, -2.0], &[-2.0, 9.0]])) < 1e-15);
        assert!(rel_err(&(&r.s * &r.u), &k) < 1e-14);
        assert!(is_spd(&r.s));
    }

    #[test]
    fn sdu_rejects_nonpositive_dplus() {
        let k = mat(&[&[1.0, 2.0], &[-2.0, 1.0]]);
        let dp = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(sdu_factor(&k, &dp), Err(FactorError::NonPositiveDplus(2)));
        assert_eq!(
            sdu_factor(&mat(&[&[0.0, 1.0], &[1.0, 0.0]]), &SquareMatrix::identity(2, 2)),
            Err(FactorError::SingularMinor(1))
        );
    }

    #[test]
    fn spd_examples() {
        assert!(is_spd(&SquareMatrix::identity(2, 2)));
        assert!(!is_spd(&mat(&[&[1.0, 0.0], &[0.0, -1.0]])));
        assert!(is_spd(&mat(&[&[2.0, 1.0], &[1.0, 2.0]])));
        assert!(!is_spd(&mat(&[&[2.0, 1.0], &[0.0, 2.0]])));
        assert!(!is_spd(&SquareMatrix::zeros(2, 2)));
    }

    #[test]
    fn find_dplus_examples() {
        let c = find_dplus(&SquareMatrix::identity(2, 2), &[-2.0, -2.0]).unwrap();
        assert_eq!(c.d_plus, 1.0);
        assert!(rel_err(&c.q, &(SquareMatrix::identity(2, 2) * 2.0)) < 1e-15);

        let k = mat(&[&[1.0, 2.0], &[-2.0, 1.0]]);
        let c = find_dplus(&k, &[-2.0, -2.0]).unwrap();
        assert!(cholesky(&c.q).is_some());
        assert!(rel_err(&(&c.sdu.s * &c.sdu.d * &c.sdu.u), &k) < 1e-10);

        let k = mat(&[&[-3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, -0.5]]);
        let c = find_dplus(&k, &[-1.0, -1.0, -1.0]).unwrap();
        assert_eq!(c.d_plus, 1.0);
    }

    #[test]
    fn find_dplus_input_errors() {
        let k = SquareMatrix::identity(2, 2);
        assert!(matches!(
            find_dplus(&k, &[-1.0]),
            Err(FactorError::DimensionMismatch { .. })
        ));
        assert_eq!(find_dplus(&k, &[-1.0, 0.0]), Err(FactorError::NonHurwitzModel(2)));
    }

    #[test]
    fn gamma_threshold_example() {
        let ldu = ldu_factor(&mat(&[&[1.0, 2.0], &[-2.0, 1.0]])).unwrap();
        assert!((gamma_threshold(&ldu) - 0.5).abs() < 1e-15);
    }

    fn random_matrix() -> impl Strategy<Value = SquareMatrix> {
        (2usize..=4)
            .prop_flat_map(|m| proptest::collection::vec(-1.0f64..1.0, m * m).prop_map(move |v| SquareMatrix::from_vec(m, m, v)))
            .prop_filter("leading minors away from zero", |k| {
                leading_minors(k).iter().all(|d| d.abs() > 1e-3)
            })
    }

    proptest! {
        #[test]
        fn sign_d_independent_of_dplus(k in random_matrix(), scales in proptest::collection::vec(0.01f64..100.0, 4)) {
            let ldu = ldu_factor(&k).unwrap();
            let m = k.nrows();
            let base = sdu_from_ldu(&ldu, &SquareMatrix::identity(m, m)).unwrap();
            let dp = SquareMatrix::from_diagonal(&DVector::from_column_slice(&scales[..m]));
            let r = sdu_from_ldu(&ldu, &dp).unwrap();
            prop_assert_eq!(&r.sign_d, &base.sign_d);
            let dsign: Vec<f64> = r.d.diagonal().iter().map(|v| v.signum()).collect();
            prop_assert_eq!(dsign, base.sign_d);
        }

        #[test]
        fn lplus_converges_to_identity(k in random_matrix(), d in 1.0f64..1e4) {
            let ldu = ldu_factor(&k).unwrap();
            let dev = (lplus(&ldu.lp, d) - SquareMatrix::identity(k.nrows(), k.nrows())).amax();
            prop_assert!(dev <= ldu.lp.amax() / d * (1.0 + 1e-12));
        }

        #[test]
        fn certificate_persists_for_larger_dplus(k in random_matrix(), a in proptest::collection::vec(0.1f64..10.0, 4)) {
            let m = k.nrows();
            let am: Vec<f64> = a[..m].iter().map(|v| -v).collect();
            let c = find_dplus(&k, &am).unwrap();
            prop_assert!(is_spd(&c.q));
            let ldu = ldu_factor(&k).unwrap();
            let amat = SquareMatrix::from_diagonal(&DVector::from_column_slice(&am));
            for factor in [2.0, 4.0] {
                let lpl = lplus(&ldu.lp, c.d_plus * factor);
                let llt = &lpl * lpl.transpose();
                prop_assert!(is_spd(&(-(&llt * &amat + &amat * &llt))));
            }
        }
    }
}
