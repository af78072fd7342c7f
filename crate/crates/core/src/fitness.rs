//! NMSE objective over all trajectories and Levenberg-Marquardt refinement of
//! the numeric parameters embedded in the trees.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::alps::Problem;
use crate::data::Dataset;
use crate::expr::{random_tree, ExpressionTree};
use crate::genotype::{Individual, Variation, TREES};
use crate::ode::{
    integrate_rk45, DeSystem, ExogenousSignal, IntegrationFailed, IntegratorSettings, StateVector,
};

/// Base score of a candidate whose integration fails; `1 - progress` is added.
pub const PENALTY_BASE: f64 = 10.0;

/// Mean squared error normalized by the (population) variance of `target`.
/// A constant target falls back to the plain MSE.
pub fn nmse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(
        pred.len(),
        target.len(),
        "prediction and target lengths differ"
    );
    assert!(!target.is_empty(), "empty series");
    let mse = squared_error(pred, target) / target.len() as f64;
    mse / variance_or_one(target)
}

fn squared_error(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

fn variance_or_one(target: &[f64]) -> f64 {
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let var = target.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    if var > 0.0 {
        var
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessReport {
    /// Mean NMSE over all (dataset, variable) cells, or the penalty.
    pub total: f64,
    /// Mean NMSE over the active variables of each dataset.
    pub per_dataset: Vec<f64>,
    /// Mean NMSE over datasets; `None` for variables that are not fitted.
    pub per_variable: [Option<f64>; TREES],
    pub penalized: bool,
    /// Fraction of the failing integration that completed, 1 when not penalized.
    pub progress: f64,
}

impl FitnessReport {
    fn penalty(progress: f64, datasets: usize) -> Self {
        FitnessReport {
            total: PENALTY_BASE + (1.0 - progress),
            per_dataset: vec![f64::NAN; datasets],
            per_variable: [None; TREES],
            penalized: true,
            progress,
        }
    }
}

struct Prepared {
    signal: ExogenousSignal,
    initial: StateVector,
    targets: [Vec<f64>; TREES],
    denominators: [f64; TREES],
}

/// The fitting objective for one set of trajectories.
pub struct Objective {
    data: Vec<Prepared>,
    pub settings: IntegratorSettings,
    /// Variables that enter the score.
    pub active: [bool; TREES],
}

impl Objective {
    /// `datasets` must be validated and non-empty.
    pub fn new(datasets: &[Dataset], settings: IntegratorSettings, active: [bool; TREES]) -> Self {
        assert!(!datasets.is_empty(), "at least one dataset is required");
        let data = datasets
            .iter()
            .map(|d| {
                let targets: [Vec<f64>; TREES] = std::array::from_fn(|v| d.target(v));
                let denominators =
                    std::array::from_fn(|v| targets[v].len() as f64 * variance_or_one(&targets[v]));
                Prepared {
                    signal: d.signal(),
                    initial: d.initial_state(),
                    targets,
                    denominators,
                }
            })
            .collect();
        Objective {
            data,
            settings,
            active,
        }
    }

    fn cells(&self) -> usize {
        self.data.len() * self.active.iter().filter(|a| **a).count()
    }

    /// Simulates `system` on every trajectory, stopping at the first failure.
    fn simulate(&self, system: &DeSystem) -> Result<Vec<Vec<StateVector>>, IntegrationFailed> {
        self.data
            .iter()
            .map(|d| {
                integrate_rk45(system, &d.initial, &d.signal, &self.settings).map(|t| t.samples)
            })
            .collect()
    }

    pub fn evaluate(&self, system: &DeSystem) -> FitnessReport {
        let runs = match self.simulate(system) {
            Ok(r) => r,
            Err(fail) => return FitnessReport::penalty(fail.progress, self.data.len()),
        };
        let active: Vec<usize> = (0..TREES).filter(|&v| self.active[v]).collect();
        let mut per_dataset = Vec::with_capacity(self.data.len());
        let mut per_variable = [0.0; TREES];
        for (d, samples) in self.data.iter().zip(&runs) {
            let mut sum = 0.0;
            for &v in &active {
                let pred: Vec<f64> = samples.iter().map(|s| s[v]).collect();
                let e = nmse(&pred, &d.targets[v]);
                sum += e;
                per_variable[v] += e / self.data.len() as f64;
            }
            per_dataset.push(sum / active.len() as f64);
        }
        let total = per_dataset.iter().sum::<f64>() / per_dataset.len() as f64;
        if !total.is_finite() {
            return FitnessReport::penalty(1.0, self.data.len());
        }
        FitnessReport {
            total,
            per_dataset,
            per_variable: std::array::from_fn(|v| self.active[v].then_some(per_variable[v])),
            penalized: false,
            progress: 1.0,
        }
    }

    /// Scaled residuals whose squared sum equals the total NMSE.
    pub fn residuals(&self, system: &DeSystem) -> Result<Vec<f64>, IntegrationFailed> {
        let runs = self.simulate(system)?;
        let cells = self.cells() as f64;
        let mut out = Vec::new();
        for (d, samples) in self.data.iter().zip(&runs) {
            for v in (0..TREES).filter(|&v| self.active[v]) {
                let scale = 1.0 / (d.denominators[v] * cells).sqrt();
                out.extend(
                    samples
                        .iter()
                        .zip(&d.targets[v])
                        .map(|(s, t)| (s[v] - t) * scale),
                );
            }
        }
        Ok(out)
    }
}

/// The parameters of the active trees of a system, as one flat vector.
#[derive(Debug, Clone)]
pub struct ParamView {
    base: DeSystem,
    active: [bool; TREES],
}

impl ParamView {
    pub fn new(base: DeSystem, active: [bool; TREES]) -> Self {
        ParamView { base, active }
    }

    pub fn theta(&self) -> Vec<f64> {
        (0..TREES)
            .filter(|&i| self.active[i])
            .flat_map(|i| self.base.trees[i].extract_params())
            .collect()
    }

    pub fn len(&self) -> usize {
        (0..TREES)
            .filter(|&i| self.active[i])
            .map(|i| self.base.trees[i].param_count())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn system(&self, theta: &[f64]) -> DeSystem {
        assert_eq!(theta.len(), self.len());
        let mut trees = self.base.trees.clone();
        let mut offset = 0;
        for (i, tree) in trees.iter_mut().enumerate() {
            if !self.active[i] {
                continue;
            }
            let n = tree.param_count();
            *tree = tree
                .inject_params(&theta[offset..offset + n])
                .expect("length checked");
            offset += n;
        }
        DeSystem::new(trees)
    }
}

/// Central-difference step for parameter value `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-6f64.max(1e-6 * v.abs())
}

/// Jacobian of the residuals by central differences, one column per parameter.
pub fn jacobian(
    objective: &Objective,
    view: &ParamView,
    theta: &[f64],
) -> Result<DMatrix<f64>, IntegrationFailed> {
    let mut columns = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let h = fd_step(theta[i]);
        probe[i] = theta[i] + h;
        let plus = objective.residuals(&view.system(&probe))?;
        probe[i] = theta[i] - h;
        let minus = objective.residuals(&view.system(&probe))?;
        probe[i] = theta[i];
        columns.push(DVector::from_iterator(
            plus.len(),
            plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)),
        ));
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Gradient of the total NMSE, `2 J^T r`.
pub fn gradient(
    objective: &Objective,
    view: &ParamView,
    theta: &[f64],
) -> Result<Vec<f64>, IntegrationFailed> {
    let r = DVector::from_vec(objective.residuals(&view.system(theta))?);
    let j = jacobian(objective, view, theta)?;
    Ok((j.transpose() * r * 2.0).iter().copied().collect())
}

const LAMBDA_START: f64 = 1e-3;
/// Probe length for the second directional derivative.
const GEODESIC_PROBE: f64 = 0.1;
/// Largest accepted ratio of acceleration to velocity.
const GEODESIC_RATIO: f64 = 0.75;
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_CAP: f64 = 1e10;

/// Adds the geodesic acceleration correction to an LM velocity step, which
/// lets the step follow curved valleys. Returns `None` when the correction is
/// too large compared with the step itself.
fn geodesic_step(
    objective: &Objective,
    view: &ParamView,
    theta: &[f64],
    r: &DVector<f64>,
    j: &DMatrix<f64>,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    velocity: DVector<f64>,
) -> Option<DVector<f64>> {
    let h = GEODESIC_PROBE;
    let probe: Vec<f64> = theta
        .iter()
        .zip(velocity.iter())
        .map(|(t, v)| t + h * v)
        .collect();
    let Ok(r_probe) = objective.residuals(&view.system(&probe)) else {
        return Some(velocity);
    };
    let jv = j * &velocity;
    let second = (DVector::from_vec(r_probe) - r) / h - jv;
    let second = second * (2.0 / h);
    let accel = -chol.solve(&(j.transpose() * second));
    let vnorm = velocity.norm();
    if vnorm > 0.0 && 2.0 * accel.norm() / vnorm > GEODESIC_RATIO {
        return None;
    }
    Some(velocity + accel * 0.5)
}

/// Levenberg-Marquardt on the active parameters of `system`, at most
/// `max_iters` Jacobian evaluations. Returns the refined system and its
/// report, or the input and its report when nothing improved.
pub fn optimize_system(
    system: &DeSystem,
    objective: &Objective,
    max_iters: usize,
) -> (DeSystem, FitnessReport) {
    let start_report = objective.evaluate(system);
    let view = ParamView::new(system.clone(), objective.active);
    if view.is_empty() || max_iters == 0 || start_report.penalized {
        return (system.clone(), start_report);
    }
    let Ok(r0) = objective.residuals(system) else {
        return (system.clone(), start_report);
    };
    let mut theta = view.theta();
    let mut r = DVector::from_vec(r0);
    let mut cost = r.norm_squared();
    let mut lambda = LAMBDA_START;
    let p = theta.len();

    'outer: for _ in 0..max_iters {
        if cost == 0.0 {
            break;
        }
        let Ok(j) = jacobian(objective, &view, &theta) else {
            break;
        };
        let g = j.transpose() * &r;
        if !g.iter().all(|x| x.is_finite()) || g.amax() == 0.0 {
            break;
        }
        let a = j.transpose() * &j;
        let diag_floor = a.diagonal().max() * 1e-12 + f64::MIN_POSITIVE;
        loop {
            let mut damped = a.clone();
            for i in 0..p {
                damped[(i, i)] += lambda * a[(i, i)].max(diag_floor);
            }
            if let Some(chol) = damped.cholesky() {
                let velocity = -chol.solve(&g);
                let step = geodesic_step(objective, &view, &theta, &r, &j, &chol, velocity);
                if let Some(step) = step.filter(|s| s.iter().all(|x| x.is_finite())) {
                    let candidate: Vec<f64> =
                        theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
                    if let Ok(r_new) = objective.residuals(&view.system(&candidate)) {
                        let r_new = DVector::from_vec(r_new);
                        let c_new = r_new.norm_squared();
                        if c_new < cost {
                            let relative_gain = (cost - c_new) / cost;
                            theta = candidate;
                            r = r_new;
                            cost = c_new;
                            lambda = (lambda / 10.0).max(LAMBDA_MIN);
                            if relative_gain < 1e-12 {
                                break 'outer;
                            }
                            break;
                        }
                    }
                }
            }
            lambda *= 10.0;
            if lambda > LAMBDA_CAP {
                break 'outer;
            }
        }
    }

    let refined = view.system(&theta);
    let report = objective.evaluate(&refined);
    if !report.penalized && report.total < start_report.total {
        (refined, report)
    } else {
        (system.clone(), start_report)
    }
}

/// Lamarckian refinement of an individual: improved parameters are written
/// back into its trees. The fitness is set either way.
pub fn optimize_params(
    ind: &Individual,
    objective: &Objective,
    max_iters: usize,
) -> (Individual, FitnessReport) {
    let (system, report) = optimize_system(&DeSystem::new(ind.trees.clone()), objective, max_iters);
    let mut out = ind.clone();
    out.trees = system.trees;
    out.fitness = Some(report.total);
    (out, report)
}

/// Evolution problem: random multi-tree systems scored (and optionally
/// refined) against the objective.
pub struct OdeProblem {
    pub objective: Objective,
    pub variation: Variation,
    /// Levenberg-Marquardt iterations per evaluation; 0 disables refinement.
    pub memetic_iterations: usize,
}

impl Problem for OdeProblem {
    fn random_individual(&self, rng: &mut ChaCha8Rng) -> Individual {
        let trees = std::array::from_fn(|slot| {
            if self.variation.active[slot] {
                random_tree(rng, &self.variation.grammar, &self.variation.limits)
            } else {
                ExpressionTree::param(0.0)
            }
        });
        Individual::new(trees)
    }

    fn evaluate(&self, individual: Individual) -> Individual {
        if self.memetic_iterations > 0 {
            return optimize_params(&individual, &self.objective, self.memetic_iterations).0;
        }
        let report = self
            .objective
            .evaluate(&DeSystem::new(individual.trees.clone()));
        Individual {
            fitness: Some(report.total),
            ..individual
        }
    }

    fn variation(&self) -> &Variation {
        &self.variation
    }
}
