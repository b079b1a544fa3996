//! Deterministic fixed-step integration and the small dense linear-algebra
//! kernel the observer machinery builds on.
//!
//! Everything here is value-semantics and allocation-per-call; the matrices
//! involved are tiny (n <= 5), so clarity and exactness win over speed.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    /// A vector field produced NaN or infinity. Carries the evaluation time
    /// and the first offending component index.
    #[error("non-finite derivative component {component} at t = {t}")]
    NonFinite { t: f64, component: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("filter gain must be positive, got {0}")]
    InvalidGain(f64),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
}

/// Uniform integration grid `t_k = t0 + k*h`, `k = 0..=steps`.
///
/// A degenerate grid with `t_final == t0` (zero steps) is allowed so that
/// empty scenario runs are well-defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_final: f64,
    step: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t_final: f64, step: f64) -> Result<Self, NumericsError> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(NumericsError::InvalidGrid(format!(
                "step h = {step} must be positive and finite"
            )));
        }
        if !t0.is_finite() || !t_final.is_finite() || t_final < t0 {
            return Err(NumericsError::InvalidGrid(format!(
                "need t0 <= t_final, got t0 = {t0}, t_final = {t_final}"
            )));
        }
        Ok(Self { t0, t_final, step })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of RK4 steps; the run lands on `time(steps())` exactly.
    pub fn steps(&self) -> usize {
        ((self.t_final - self.t0) / self.step).round() as usize
    }

    /// Grid time of node `k`, computed as `t0 + k*h` (never accumulated),
    /// so identical runs produce bit-identical time stamps.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + (k as f64) * self.step
    }
}

/// One classical fourth-order Runge-Kutta step of `dx/dt = field(t, x)`.
///
/// Fails if any stage derivative contains a non-finite component; the error
/// reports the stage time and component so integration blow-ups are
/// attributable.
pub fn rk4_step<F>(field: F, t: f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>, NumericsError>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let check = |k: &DVector<f64>, tk: f64| -> Result<(), NumericsError> {
        for (i, v) in k.iter().enumerate() {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { t: tk, component: i });
            }
        }
        Ok(())
    };
    let half = 0.5 * h;
    let k1 = field(t, x);
    check(&k1, t)?;
    let k2 = field(t + half, &(x + &k1 * half));
    check(&k2, t + half)?;
    let k3 = field(t + half, &(x + &k2 * half));
    check(&k3, t + half)?;
    let k4 = field(t + h, &(x + &k3 * h));
    check(&k4, t + h)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Signal types a first-order filter can carry (scalar, vector, matrix).
pub trait FilterSignal: Sized + Clone {
    fn shape_matches(&self, other: &Self) -> bool;
    /// `ca * a + cb * b`
    fn lin(a: &Self, ca: f64, b: &Self, cb: f64) -> Self;
}

impl FilterSignal for f64 {
    fn shape_matches(&self, _other: &Self) -> bool {
        true
    }
    fn lin(a: &Self, ca: f64, b: &Self, cb: f64) -> Self {
        ca * a + cb * b
    }
}

impl FilterSignal for DVector<f64> {
    fn shape_matches(&self, other: &Self) -> bool {
        self.len() == other.len()
    }
    fn lin(a: &Self, ca: f64, b: &Self, cb: f64) -> Self {
        a * ca + b * cb
    }
}

impl FilterSignal for DMatrix<f64> {
    fn shape_matches(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
    fn lin(a: &Self, ca: f64, b: &Self, cb: f64) -> Self {
        a * ca + b * cb
    }
}

/// State of the low-pass filter `dz/dt = -gain*z + gain*v`, i.e. the operator
/// `gain/(p + gain)` applied to the input signal `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderFilter<T: FilterSignal> {
    state: T,
    gain: f64,
}

impl<T: FilterSignal> FirstOrderFilter<T> {
    pub fn new(initial: T, gain: f64) -> Result<Self, NumericsError> {
        if !(gain > 0.0) || !gain.is_finite() {
            return Err(NumericsError::InvalidGain(gain));
        }
        Ok(Self { state: initial, gain })
    }

    pub fn state(&self) -> &T {
        &self.state
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Advance one RK4 step with the input held at `v` over the step.
    pub fn step(&self, v: &T, h: f64) -> Result<Self, NumericsError> {
        if !self.state.shape_matches(v) {
            return Err(NumericsError::Dimension(
                "filter input shape differs from filter state".into(),
            ));
        }
        let g = self.gain;
        let rate = |z: &T| T::lin(v, g, z, -g);
        let k1 = rate(&self.state);
        let k2 = rate(&T::lin(&self.state, 1.0, &k1, 0.5 * h));
        let k3 = rate(&T::lin(&self.state, 1.0, &k2, 0.5 * h));
        let k4 = rate(&T::lin(&self.state, 1.0, &k3, h));
        let sum = T::lin(&T::lin(&k1, 1.0, &k2, 2.0), 1.0, &T::lin(&k3, 2.0, &k4, 1.0), 1.0);
        Ok(Self {
            state: T::lin(&self.state, 1.0, &sum, h / 6.0),
            gain: g,
        })
    }

    /// Output of the band-limited differentiator `gain*p/(p + gain)` fed by
    /// `v`: algebraically `gain*(v - z)`, no differentiation and no state
    /// change involved.
    pub fn derivative_output(&self, v: &T) -> Result<T, NumericsError> {
        if !self.state.shape_matches(v) {
            return Err(NumericsError::Dimension(
                "filter input shape differs from filter state".into(),
            ));
        }
        Ok(T::lin(v, self.gain, &self.state, -self.gain))
    }
}

/// Adjugate (transpose of the cofactor matrix).
///
/// Satisfies `adjugate(M) * M = determinant(M) * I` for every square matrix,
/// including singular ones, which is what the regression mixing step relies
/// on. Convention: the 1x1 adjugate is `[[1]]`.
pub fn adjugate(m: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    let n = require_square(m)?;
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if n == 1 {
        return Ok(DMatrix::from_element(1, 1, 1.0));
    }
    let mut adj = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            // adj[(j, i)] = cofactor C_ij
            adj[(j, i)] = sign * minor_det(m, i, j);
        }
    }
    Ok(adj)
}

/// Determinant; cofactor formulas for n <= 3, LU with partial pivoting above.
pub fn determinant(m: &DMatrix<f64>) -> Result<f64, NumericsError> {
    let n = require_square(m)?;
    Ok(det_unchecked(m, n))
}

fn require_square(m: &DMatrix<f64>) -> Result<usize, NumericsError> {
    let (r, c) = m.shape();
    if r != c {
        return Err(NumericsError::Dimension(format!(
            "expected a square matrix, got {r}x{c}"
        )));
    }
    Ok(r)
}

fn det_unchecked(m: &DMatrix<f64>, n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => det_lu(m.clone()),
    }
}

/// Determinant of the minor obtained by deleting row `i` and column `j`.
fn minor_det(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let n = m.nrows();
    let mut sub = DMatrix::zeros(n - 1, n - 1);
    let mut rr = 0;
    for r in 0..n {
        if r == i {
            continue;
        }
        let mut cc = 0;
        for c in 0..n {
            if c == j {
                continue;
            }
            sub[(rr, cc)] = m[(r, c)];
            cc += 1;
        }
        rr += 1;
    }
    det_unchecked(&sub, n - 1)
}

fn det_lu(mut a: DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut det = 1.0;
    for k in 0..n {
        // partial pivot
        let mut piv = k;
        let mut best = a[(k, k)].abs();
        for r in (k + 1)..n {
            let v = a[(r, k)].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != k {
            a.swap_rows(piv, k);
            det = -det;
        }
        det *= a[(k, k)];
        for r in (k + 1)..n {
            let f = a[(r, k)] / a[(k, k)];
            for c in (k + 1)..n {
                a[(r, c)] -= f * a[(k, c)];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_validates_and_lands_exactly() {
        let g = TimeGrid::new(0.0, 20.0, 1e-3).unwrap();
        assert_eq!(g.steps(), 20_000);
        assert_eq!(g.time(0), 0.0);
        assert!(TimeGrid::new(0.0, 1.0, 0.0).is_err());
        assert!(TimeGrid::new(1.0, 0.0, 0.1).is_err());
        // degenerate zero-length run is allowed
        assert_eq!(TimeGrid::new(2.0, 2.0, 0.1).unwrap().steps(), 0);
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let out = rk4_step(|_, _| DVector::zeros(2), 0.0, &x, 0.1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn rk4_matches_exponential_one_step() {
        let x = DVector::from_vec(vec![1.0]);
        let out = rk4_step(|_, x: &DVector<f64>| -x, 0.0, &x, 1e-3).unwrap();
        assert!((out[0] - (-1e-3f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rk4_rotation_returns_home() {
        // dx = (x2, -x1): rotation with period 2*pi
        let field = |_t: f64, x: &DVector<f64>| DVector::from_vec(vec![x[1], -x[0]]);
        let mut x = DVector::from_vec(vec![1.0, 0.0]);
        let h = 1e-3;
        let n = (2.0 * std::f64::consts::PI / h).round() as usize;
        let h_exact = 2.0 * std::f64::consts::PI / n as f64;
        for k in 0..n {
            x = rk4_step(field, k as f64 * h_exact, &x, h_exact).unwrap();
        }
        assert!((x[0] - 1.0).abs() < 1e-9);
        assert!(x[1].abs() < 1e-9);
    }

    #[test]
    fn rk4_fourth_order_convergence_on_exponential() {
        // global error at t = 10 for dx = -x, and the halving ratio
        let run = |h: f64| {
            let mut x = DVector::from_vec(vec![1.0]);
            let n = (10.0 / h).round() as usize;
            for k in 0..n {
                x = rk4_step(|_, x: &DVector<f64>| -x, k as f64 * h, &x, h).unwrap();
            }
            (x[0] - (-10.0f64).exp()).abs()
        };
        let e1 = run(1e-3);
        let e2 = run(5e-4);
        assert!(e1 < 1e-12, "global error {e1}");
        assert!(e1 / e2 >= 15.0, "convergence ratio {}", e1 / e2);
    }

    #[test]
    fn rk4_reports_nonfinite_component() {
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let err = rk4_step(
            |_, _| DVector::from_vec(vec![0.0, f64::NAN]),
            3.5,
            &x,
            0.1,
        )
        .unwrap_err();
        match err {
            NumericsError::NonFinite { t, component } => {
                assert_eq!(t, 3.5);
                assert_eq!(component, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn filter_zero_input_stays_zero_and_fixed_point_holds() {
        let f = FirstOrderFilter::new(0.0f64, 1.0).unwrap();
        let f = f.step(&0.0, 1e-3).unwrap();
        assert_eq!(*f.state(), 0.0);
        let g = FirstOrderFilter::new(2.5f64, 1.0).unwrap();
        let g = g.step(&2.5, 1e-3).unwrap();
        assert!((g.state() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn filter_step_response_matches_closed_form() {
        // z(t) = c (1 - exp(-lambda t)), lambda = 1, c = 3, t = 5
        let c = 3.0;
        let mut f = FirstOrderFilter::new(0.0f64, 1.0).unwrap();
        let h = 1e-3;
        let mut prev = 0.0;
        for _ in 0..5000 {
            f = f.step(&c, h).unwrap();
            assert!(*f.state() >= prev); // monotone rise from zero
            prev = *f.state();
        }
        let expected = c * (1.0 - (-5.0f64).exp());
        assert!((f.state() - expected).abs() < 1e-9);
    }

    #[test]
    fn filter_gain_must_be_positive() {
        assert!(FirstOrderFilter::new(0.0f64, 0.0).is_err());
        assert!(FirstOrderFilter::new(0.0f64, -1.0).is_err());
    }

    #[test]
    fn filter_shape_mismatch_is_an_error() {
        let f = FirstOrderFilter::new(DVector::<f64>::zeros(2), 1.0).unwrap();
        assert!(f.step(&DVector::zeros(3), 1e-3).is_err());
        assert!(f.derivative_output(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn derivative_output_of_constant_is_zero() {
        let f = FirstOrderFilter::new(4.0f64, 2.0).unwrap();
        assert_eq!(f.derivative_output(&4.0).unwrap(), 0.0);
    }

    /// Advance a scalar filter one RK4 step with the input evaluated at the
    /// stage times, the way the coupled simulators drive their filters.
    fn step_stage_exact(
        f: &FirstOrderFilter<f64>,
        v: impl Fn(f64) -> f64,
        t: f64,
        h: f64,
    ) -> FirstOrderFilter<f64> {
        let g = f.gain();
        let z = *f.state();
        let rate = |z: f64, v: f64| g * (v - z);
        let k1 = rate(z, v(t));
        let k2 = rate(z + 0.5 * h * k1, v(t + 0.5 * h));
        let k3 = rate(z + 0.5 * h * k2, v(t + 0.5 * h));
        let k4 = rate(z + h * k3, v(t + h));
        FirstOrderFilter::new(z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), g).unwrap()
    }

    #[test]
    fn derivative_output_tracks_ramp_slope() {
        // v = t with lambda = 1: output is 1 - exp(-t) -> 1
        let mut f = FirstOrderFilter::new(0.0f64, 1.0).unwrap();
        let h = 1e-3;
        let mut out = 0.0;
        for k in 0..20_000 {
            let t = k as f64 * h;
            f = step_stage_exact(&f, |s| s, t, h);
            out = f.derivative_output(&(t + h)).unwrap();
        }
        assert!((out - 1.0).abs() < 1e-6, "ramp derivative {out}");
    }

    #[test]
    fn derivative_output_tracks_sinusoid_at_high_gain() {
        // v = sin(t), lambda = 100: output stays within 2e-2 of cos(t)
        let mut f = FirstOrderFilter::new(0.0f64, 100.0).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for k in 0..30_000 {
            let t = k as f64 * h;
            f = step_stage_exact(&f, |s| s.sin(), t, h);
            let t1 = t + h;
            if t1 > 1.0 {
                let out = f.derivative_output(&t1.sin()).unwrap();
                worst = worst.max((out - t1.cos()).abs());
            }
        }
        assert!(worst < 2e-2, "sinusoid tracking error {worst}");
    }

    #[test]
    fn adjugate_identity_and_hand_cases() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(adjugate(&i2).unwrap(), i2);

        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let adj = adjugate(&m).unwrap();
        assert_eq!(adj, DMatrix::from_row_slice(2, 2, &[4.0, -2.0, -3.0, 1.0]));

        // singular: adj([[1,1],[1,1]]) = [[1,-1],[-1,1]] and adj(M)*M = 0
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let adj_s = adjugate(&s).unwrap();
        assert_eq!(adj_s, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(&adj_s * &s, DMatrix::zeros(2, 2));
    }

    #[test]
    fn adjugate_one_by_one_is_one() {
        let m = DMatrix::from_element(1, 1, 7.0);
        assert_eq!(adjugate(&m).unwrap(), DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn adjugate_rejects_non_square() {
        assert!(adjugate(&DMatrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn determinant_hand_cases() {
        assert_eq!(determinant(&DMatrix::<f64>::identity(3, 3)).unwrap(), 1.0);
        assert_eq!(
            determinant(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap(),
            -2.0
        );
        assert_eq!(
            determinant(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap(),
            0.0
        );
        assert!(determinant(&DMatrix::<f64>::zeros(1, 2)).is_err());
    }

    #[test]
    fn determinant_lu_path_matches_cofactor_expansion() {
        // 4x4 with known determinant via block structure
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.0, 0.0, 1.0, //
                0.0, 3.0, 0.0, 0.0, //
                0.0, 0.0, 4.0, 0.0, //
                1.0, 0.0, 0.0, 2.0,
            ],
        );
        // det = 3 * 4 * det([[2,1],[1,2]]) = 12 * 3 = 36
        assert!((determinant(&m).unwrap() - 36.0).abs() < 1e-12);
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-1.0f64..1.0, n * n)
            .prop_map(move |v| DMatrix::from_vec(n, n, v))
    }

    fn arb_rank_deficient(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        // outer product u v^T has rank <= 1
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
            .prop_map(move |(u, v)| {
                let u = DVector::from_vec(u);
                let v = DVector::from_vec(v);
                &u * v.transpose()
            })
    }

    fn arb_any_square() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..=5).prop_flat_map(|n| prop_oneof![arb_matrix(n), arb_rank_deficient(n)])
    }

    proptest! {
        #[test]
        fn adjugate_times_matrix_is_det_times_identity(m in arb_any_square()) {
            let n = m.nrows();
            let adj = adjugate(&m).unwrap();
            let det = determinant(&m).unwrap();
            let residual = &adj * &m - DMatrix::identity(n, n) * det;
            let worst = residual.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            prop_assert!(worst < 1e-10, "worst residual {}", worst);
        }
    }
}
