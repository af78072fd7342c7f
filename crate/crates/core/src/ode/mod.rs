//! Simulation of a four-tree DE system with Dormand-Prince 5(4).
//!
//! State layout is `[P1dot, P2dot, P3dot, RA]`. The first three trees model the
//! time derivatives of the phase rates, the fourth models dRA/dt directly.
//! Temperature is an exogenous input interpolated linearly on the dataset grid
//! and the cooling rate is constant per trajectory.

mod model;

pub use model::{format_model, parse_model, ModelError, SECTION_NAMES};

use thiserror::Error;

use crate::expr::{ExprError, ExpressionTree, STATE_LEN};
use crate::genotype::TREES;

pub type StateVector = [f64; TREES];

/// The simulatable model: one right-hand side per state entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DeSystem {
    pub trees: [ExpressionTree; TREES],
}

impl DeSystem {
    pub fn new(trees: [ExpressionTree; TREES]) -> Self {
        DeSystem { trees }
    }

    /// Right-hand side that is identically zero.
    pub fn zero() -> Self {
        DeSystem::new(std::array::from_fn(|_| ExpressionTree::param(0.0)))
    }

    pub fn param_count(&self) -> usize {
        self.trees.iter().map(|t| t.param_count()).sum()
    }

    /// All parameters, tree by tree, each tree in prefix order.
    pub fn extract_params(&self) -> Vec<f64> {
        self.trees.iter().flat_map(|t| t.extract_params()).collect()
    }

    pub fn inject_params(&self, theta: &[f64]) -> Result<DeSystem, ExprError> {
        let expected = self.param_count();
        if theta.len() != expected {
            return Err(ExprError::ParamLength {
                expected,
                got: theta.len(),
            });
        }
        let mut offset = 0;
        let mut trees = self.trees.clone();
        for tree in trees.iter_mut() {
            let n = tree.param_count();
            *tree = tree.inject_params(&theta[offset..offset + n])?;
            offset += n;
        }
        Ok(DeSystem { trees })
    }

    #[inline]
    fn eval_at(&self, y: &StateVector, ks: f64, temp: f64) -> StateVector {
        let state: [f64; STATE_LEN] = [y[0], y[1], y[2], y[3], ks, temp];
        std::array::from_fn(|i| self.trees[i].eval(&state))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("time and temperature columns differ in length ({time} vs {temperature})")]
    LengthMismatch { time: usize, temperature: usize },
    #[error("time grid is empty")]
    Empty,
    #[error("time grid is not strictly increasing at index {0}")]
    NonMonotone(usize),
}

/// Time grid with the temperature measured at each grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousSignal {
    time: Vec<f64>,
    temperature: Vec<f64>,
    ks: f64,
}

impl ExogenousSignal {
    pub fn new(time: Vec<f64>, temperature: Vec<f64>, ks: f64) -> Result<Self, SignalError> {
        if time.len() != temperature.len() {
            return Err(SignalError::LengthMismatch {
                time: time.len(),
                temperature: temperature.len(),
            });
        }
        if time.is_empty() {
            return Err(SignalError::Empty);
        }
        if let Some(i) = time
            .windows(2)
            .position(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
        {
            return Err(SignalError::NonMonotone(i + 1));
        }
        Ok(ExogenousSignal {
            time,
            temperature,
            ks,
        })
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn temperature(&self) -> &[f64] {
        &self.temperature
    }

    pub fn ks(&self) -> f64 {
        self.ks
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    fn span(&self) -> f64 {
        self.time[self.time.len() - 1] - self.time[0]
    }

    /// Linear interpolation inside grid segment `k` (between points k and k+1).
    #[inline]
    fn temperature_in_segment(&self, k: usize, t: f64) -> f64 {
        let (t0, t1) = (self.time[k], self.time[k + 1]);
        let (a, b) = (self.temperature[k], self.temperature[k + 1]);
        a + (b - a) * ((t - t0) / (t1 - t0))
    }

    /// Temperature at `t`, clamped to the grid ends.
    pub fn temperature_at(&self, t: f64) -> f64 {
        let n = self.time.len();
        if n == 1 || t <= self.time[0] {
            return self.temperature[0];
        }
        if t >= self.time[n - 1] {
            return self.temperature[n - 1];
        }
        let k = self.time.partition_point(|&x| x <= t) - 1;
        self.temperature_in_segment(k, t)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("right-hand side is not finite at t = {time}")]
pub struct NonFinite {
    pub time: f64,
}

/// Evaluates all four right-hand sides at `(y, t)`.
pub fn rhs(
    system: &DeSystem,
    y: &StateVector,
    t: f64,
    exo: &ExogenousSignal,
) -> Result<StateVector, NonFinite> {
    let dy = system.eval_at(y, exo.ks, exo.temperature_at(t));
    if dy.iter().all(|v| v.is_finite()) {
        Ok(dy)
    } else {
        Err(NonFinite { time: t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rel: 1e-6,
            abs: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSettings {
    pub tol: Tolerance,
    /// Attempted steps (accepted or rejected) per trajectory.
    pub max_steps: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        IntegratorSettings {
            tol: Tolerance::default(),
            max_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    NonFinite,
    StepUnderflow,
    MaxSteps,
    InvalidInput,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("integration failed ({reason:?}) at t = {time}, {:.1}% done", progress * 100.0)]
pub struct IntegrationFailed {
    pub reason: FailureReason,
    pub time: f64,
    /// Fraction of the time span completed, in [0, 1].
    pub progress: f64,
}

/// One state sample per grid point; `samples[0]` is the initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<StateVector>,
}

impl Trajectory {
    /// Values of state entry `index` over the grid.
    pub fn column(&self, index: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[index]).collect()
    }
}

const MIN_STEP: f64 = 1e-9;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[inline]
fn axpy(y: &StateVector, h: f64, terms: &[(f64, &StateVector)]) -> StateVector {
    std::array::from_fn(|i| y[i] + h * terms.iter().map(|(a, k)| a * k[i]).sum::<f64>())
}

/// Integrates `system` from `y0` over the grid of `exo`, landing exactly on
/// every grid time.
pub fn integrate_rk45(
    system: &DeSystem,
    y0: &StateVector,
    exo: &ExogenousSignal,
    settings: &IntegratorSettings,
) -> Result<Trajectory, IntegrationFailed> {
    let grid = exo.time();
    let t_start = grid[0];
    let span = exo.span();
    let fail = |reason, t: f64| IntegrationFailed {
        reason,
        time: t,
        progress: if span > 0.0 {
            ((t - t_start) / span).clamp(0.0, 1.0)
        } else {
            0.0
        },
    };
    let tol = settings.tol;
    if !(tol.rel > 0.0 && tol.abs > 0.0) || y0.iter().any(|v| !v.is_finite()) {
        return Err(fail(FailureReason::InvalidInput, t_start));
    }

    let mut samples = Vec::with_capacity(grid.len());
    samples.push(*y0);
    if grid.len() == 1 {
        return Ok(Trajectory { samples });
    }

    let ks = exo.ks();
    let eval = |k: usize, t: f64, y: &StateVector| -> Result<StateVector, IntegrationFailed> {
        let dy = system.eval_at(y, ks, exo.temperature_in_segment(k, t));
        if dy.iter().all(|v| v.is_finite()) {
            Ok(dy)
        } else {
            Err(fail(FailureReason::NonFinite, t))
        }
    };

    let mut t = t_start;
    let mut y = *y0;
    let mut k1 = eval(0, t, &y)?;
    let mut h = (grid[1] - grid[0]).min(span);
    let mut steps = 0usize;

    for seg in 0..grid.len() - 1 {
        let t_next = grid[seg + 1];
        while t < t_next {
            if steps >= settings.max_steps {
                return Err(fail(FailureReason::MaxSteps, t));
            }
            steps += 1;
            if h < MIN_STEP {
                return Err(fail(FailureReason::StepUnderflow, t));
            }
            let remaining = t_next - t;
            let lands = h >= remaining;
            let hs = if lands { remaining } else { h };

            let k2 = eval(seg, t + C2 * hs, &axpy(&y, hs, &[(A21, &k1)]))?;
            let k3 = eval(seg, t + C3 * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]))?;
            let k4 = eval(
                seg,
                t + C4 * hs,
                &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
            )?;
            let k5 = eval(
                seg,
                t + C5 * hs,
                &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
            )?;
            let t_end = if lands { t_next } else { t + hs };
            let k6 = eval(
                seg,
                t_end,
                &axpy(
                    &y,
                    hs,
                    &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
                ),
            )?;
            let y_new = axpy(
                &y,
                hs,
                &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
            );
            if y_new.iter().any(|v| !v.is_finite()) {
                return Err(fail(FailureReason::NonFinite, t_end));
            }
            let k7 = eval(seg, t_end, &y_new)?;

            let mut sum = 0.0;
            for i in 0..TREES {
                let e = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let scale = tol.abs + tol.rel * y[i].abs().max(y_new[i].abs());
                sum += (e / scale).powi(2);
            }
            let err = (sum / TREES as f64).sqrt();
            if !err.is_finite() {
                return Err(fail(FailureReason::NonFinite, t_end));
            }

            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            if err <= 1.0 {
                t = t_end;
                y = y_new;
                k1 = k7;
                // a step shortened to land on the grid does not shrink the next one
                h = if lands {
                    h.max(hs * factor)
                } else {
                    hs * factor
                };
            } else {
                h = hs * factor.min(1.0);
            }
            h = h.min(span);
        }
        samples.push(y);
    }
    Ok(Trajectory { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Function, Variable};

    fn unit_grid(n: usize, end: f64) -> ExogenousSignal {
        let t: Vec<f64> = (0..n).map(|i| end * i as f64 / (n - 1) as f64).collect();
        let temp = vec![0.0; n];
        ExogenousSignal::new(t, temp, 1.0).unwrap()
    }

    fn decay_system() -> DeSystem {
        let mut s = DeSystem::zero();
        s.trees[0] = ExpressionTree::binary(
            Function::Mul,
            ExpressionTree::param(-1.0),
            ExpressionTree::var(Variable::P1Dot),
        );
        s
    }

    fn settings(tol: f64) -> IntegratorSettings {
        IntegratorSettings {
            tol: Tolerance { rel: tol, abs: tol },
            ..IntegratorSettings::default()
        }
    }

    #[test]
    fn exponential_decay_matches_analytic() {
        let exo = unit_grid(11, 1.0);
        let traj = integrate_rk45(
            &decay_system(),
            &[1.0, 0.0, 0.0, 0.0],
            &exo,
            &settings(1e-8),
        )
        .unwrap();
        assert_eq!(traj.samples.len(), 11);
        assert!((traj.samples[10][0] - (-1f64).exp()).abs() < 1e-6);
        for (t, s) in exo.time().iter().zip(&traj.samples) {
            assert!((s[0] - (-t).exp()).abs() < 10.0 * 1e-8, "t = {t}");
        }
    }

    #[test]
    fn tolerance_halving_never_hurts() {
        let exo = unit_grid(11, 1.0);
        let mut previous = f64::INFINITY;
        for k in 0..=5 {
            let tol = 1e-6 / 2f64.powi(k);
            let traj = integrate_rk45(&decay_system(), &[1.0, 0.0, 0.0, 0.0], &exo, &settings(tol))
                .unwrap();
            let dev = exo
                .time()
                .iter()
                .zip(&traj.samples)
                .map(|(t, s)| (s[0] - (-t).exp()).abs())
                .fold(0.0, f64::max);
            assert!(dev <= previous, "tol {tol}: {dev} > {previous}");
            previous = dev;
        }
    }

    #[test]
    fn zero_rhs_keeps_initial_state() {
        let exo = unit_grid(7, 3.0);
        let y0 = [0.1, -0.2, 0.3, 1.0];
        let traj =
            integrate_rk45(&DeSystem::zero(), &y0, &exo, &IntegratorSettings::default()).unwrap();
        assert!(traj.samples.iter().all(|s| *s == y0));
    }

    #[test]
    fn single_point_grid() {
        let exo = ExogenousSignal::new(vec![5.0], vec![830.0], 0.6).unwrap();
        let y0 = [0.0, 0.0, 0.0, 1.0];
        let traj =
            integrate_rk45(&decay_system(), &y0, &exo, &IntegratorSettings::default()).unwrap();
        assert_eq!(traj.samples, vec![y0]);
    }

    #[test]
    fn rhs_examples() {
        let exo = unit_grid(3, 1.0);
        let zero = rhs(&DeSystem::zero(), &[1.0, 2.0, 3.0, 4.0], 0.5, &exo).unwrap();
        assert_eq!(zero, [0.0; 4]);
        let mut s = DeSystem::zero();
        s.trees[0] = ExpressionTree::param(2.0);
        assert_eq!(rhs(&s, &[9.0, 1.0, 1.0, 0.3], 0.7, &exo).unwrap()[0], 2.0);
        s.trees[3] = ExpressionTree::binary(
            Function::Div,
            ExpressionTree::param(1.0),
            ExpressionTree::var(Variable::T),
        );
        assert_eq!(rhs(&s, &[0.0; 4], 0.2, &exo), Err(NonFinite { time: 0.2 }));
    }

    #[test]
    fn temperature_is_interpolated() {
        let exo =
            ExogenousSignal::new(vec![0.0, 10.0, 20.0], vec![800.0, 700.0, 650.0], 10.0).unwrap();
        assert_eq!(exo.temperature_at(5.0), 750.0);
        assert_eq!(exo.temperature_at(15.0), 675.0);
        assert_eq!(exo.temperature_at(20.0), 650.0);
        assert_eq!(exo.temperature_at(-1.0), 800.0);
        let mut s = DeSystem::zero();
        s.trees[1] = ExpressionTree::var(Variable::T);
        s.trees[2] = ExpressionTree::var(Variable::Ks);
        let d = rhs(&s, &[0.0; 4], 10.0, &exo).unwrap();
        assert_eq!(d, [0.0, 700.0, 10.0, 0.0]);
    }

    #[test]
    fn linear_temperature_drive_integrates_exactly() {
        // dRA/dt = T with T falling linearly: RA(t) = 1 + 100 t - 5 t^2
        let t: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let temp: Vec<f64> = t.iter().map(|t| 100.0 - 10.0 * t).collect();
        let exo = ExogenousSignal::new(t.clone(), temp, 10.0).unwrap();
        let mut s = DeSystem::zero();
        s.trees[3] = ExpressionTree::var(Variable::T);
        let traj = integrate_rk45(
            &s,
            &[0.0, 0.0, 0.0, 1.0],
            &exo,
            &IntegratorSettings::default(),
        )
        .unwrap();
        for (ti, y) in t.iter().zip(&traj.samples) {
            assert!((y[3] - (1.0 + 100.0 * ti - 5.0 * ti * ti)).abs() < 1e-9);
        }
    }

    #[test]
    fn overflow_is_reported_not_panicking() {
        let mut s = DeSystem::zero();
        let t = ExpressionTree::var(Variable::T);
        let e = |x| ExpressionTree::unary(Function::Exp, x);
        s.trees[0] = e(e(e(t)));
        let times: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let temp: Vec<f64> = times.iter().map(|t| 830.0 - 10.0 * t).collect();
        let exo = ExogenousSignal::new(times, temp, 10.0).unwrap();
        let err = integrate_rk45(
            &s,
            &[0.0, 0.0, 0.0, 1.0],
            &exo,
            &IntegratorSettings::default(),
        )
        .unwrap_err();
        assert_eq!(err.reason, FailureReason::NonFinite);
        assert!((0.0..=1.0).contains(&err.progress));
    }

    #[test]
    fn blow_up_fails_with_progress() {
        // dy/dt = y^2, y(0) = 1 blows up at t = 1
        let mut s = DeSystem::zero();
        s.trees[0] = ExpressionTree::unary(Function::Square, ExpressionTree::var(Variable::P1Dot));
        let exo = unit_grid(21, 2.0);
        let err = integrate_rk45(
            &s,
            &[1.0, 0.0, 0.0, 0.0],
            &exo,
            &IntegratorSettings::default(),
        )
        .unwrap_err();
        assert!(err.progress > 0.4 && err.progress < 0.6, "{err}");
    }

    #[test]
    fn step_budget_is_enforced() {
        let exo = unit_grid(3, 1.0);
        let tight = IntegratorSettings {
            max_steps: 1,
            ..IntegratorSettings::default()
        };
        let err = integrate_rk45(&decay_system(), &[1.0, 0.0, 0.0, 0.0], &exo, &tight).unwrap_err();
        assert_eq!(err.reason, FailureReason::MaxSteps);
    }

    #[test]
    fn deterministic_and_exact_first_sample() {
        let exo = unit_grid(11, 1.0);
        let y0 = [0.1 + 0.2, 0.0, 0.0, 1.0];
        let a = integrate_rk45(&decay_system(), &y0, &exo, &IntegratorSettings::default()).unwrap();
        let b = integrate_rk45(&decay_system(), &y0, &exo, &IntegratorSettings::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples[0][0].to_bits(), y0[0].to_bits());
    }

    #[test]
    fn signal_validation() {
        assert_eq!(
            ExogenousSignal::new(vec![0.0, 1.0, 1.0], vec![0.0; 3], 1.0),
            Err(SignalError::NonMonotone(2))
        );
        assert_eq!(
            ExogenousSignal::new(vec![0.0], vec![0.0; 2], 1.0),
            Err(SignalError::LengthMismatch {
                time: 1,
                temperature: 2
            })
        );
    }

    #[test]
    fn system_params_concatenate() {
        let mut s = decay_system();
        s.trees[2] = ExpressionTree::binary(
            Function::Add,
            ExpressionTree::param(3.0),
            ExpressionTree::param(4.0),
        );
        assert_eq!(s.extract_params(), vec![-1.0, 0.0, 3.0, 4.0, 0.0]);
        let u = s.inject_params(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(u.extract_params(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(s.inject_params(&[1.0]).is_err());
    }
}
