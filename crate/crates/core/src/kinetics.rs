//! Closed-form transformation laws, the reference learned four-equation
//! system, and a synthetic cooling-curve generator built on that system.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{Dataset, Row};
use crate::expr::{ExpressionTree, Function, Variable};
use crate::ode::{
    integrate_rk45, DeSystem, ExogenousSignal, IntegrationFailed, IntegratorSettings, StateVector,
};

/// Isothermal JMAK law parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JmakParams {
    pub k: f64,
    /// Avrami exponent.
    pub n: f64,
}

/// Transformed fraction `1 - exp(-k t^n)` after `t` seconds.
pub fn jmak_fraction(p: JmakParams, t: f64) -> f64 {
    1.0 - (-p.k * t.max(0.0).powf(p.n)).exp()
}

/// Koistinen-Marburger martensite law parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmParams {
    /// 1/K.
    pub alpha: f64,
    /// Martensite start temperature, degrees Celsius.
    pub ms: f64,
}

impl KmParams {
    pub const DEFAULT_ALPHA: f64 = 0.011;

    pub fn with_ms(ms: f64) -> Self {
        KmParams {
            alpha: Self::DEFAULT_ALPHA,
            ms,
        }
    }
}

/// Martensite fraction `1 - exp(-alpha (Ms - T))`, zero above Ms.
pub fn km_fraction(p: KmParams, temp: f64) -> f64 {
    if temp >= p.ms {
        0.0
    } else {
        1.0 - (-p.alpha * (p.ms - temp)).exp()
    }
}

/// Distinct constants of the reference model, per equation (P1, P2, P3, RA).
pub const REFERENCE_CONSTANTS: [&[f64]; 4] = [
    &[
        3.591, 2.2151, -3.031, 6.4351e-2, 4.2717, 56.255, 5.1832, 5.0527e-4,
    ],
    &[
        0.96475, -7.6099e-5, 0.68128, 1.0441, -3.9235, 2.5571e-5, 0.65098, 2.0752e-7,
    ],
    &[
        3.1903e-4, 0.99678, -406.1, 0.75539, -9.0097e-2, 0.63386, 1.4733e-5,
    ],
    &[
        0.50793, 9.0808, -3.368, 0.91246, -1.5443e-3, 0.7967, 0.12045, -0.28694, 6.6264e-2,
        1.3127e-2,
    ],
];

/// For each equation, which reference constant each parameter node holds,
/// in prefix order. The P2 equation uses two of its constants twice.
pub const PARAM_SLOTS: [&[usize]; 4] = [
    &[0, 1, 2, 3, 4, 5, 6, 7],
    &[0, 0, 1, 2, 3, 3, 4, 5, 6, 7],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
];

fn c(v: f64) -> ExpressionTree {
    ExpressionTree::param(v)
}

fn var(v: Variable) -> ExpressionTree {
    ExpressionTree::var(v)
}

fn add(a: ExpressionTree, b: ExpressionTree) -> ExpressionTree {
    ExpressionTree::binary(Function::Add, a, b)
}

fn mul(a: ExpressionTree, b: ExpressionTree) -> ExpressionTree {
    ExpressionTree::binary(Function::Mul, a, b)
}

fn aq(a: ExpressionTree, b: ExpressionTree) -> ExpressionTree {
    ExpressionTree::binary(Function::Aq, a, b)
}

fn tanh(a: ExpressionTree) -> ExpressionTree {
    ExpressionTree::unary(Function::Tanh, a)
}

fn square(a: ExpressionTree) -> ExpressionTree {
    ExpressionTree::unary(Function::Square, a)
}

/// The learned system with its reference constants, as expression trees.
pub fn reference_system() -> DeSystem {
    use Variable::*;
    let k = REFERENCE_CONSTANTS;

    // (AQ(c0, tanh(c1 RA)) + c2) (c3 P1 + AQ(c4, (c5 Ks)^2)) c6 + c7
    let c1 = k[0];
    let p1 = add(
        mul(
            mul(
                add(aq(c(c1[0]), tanh(mul(c(c1[1]), var(Ra)))), c(c1[2])),
                add(
                    mul(c(c1[3]), var(P1Dot)),
                    aq(c(c1[4]), square(mul(c(c1[5]), var(Ks)))),
                ),
            ),
            c(c1[6]),
        ),
        c(c1[7]),
    );

    // (c0 P1 (c0 P2 + c1) c2 + c3 P3 c3 P2 c4 + c5) c6 + c7
    let c2 = k[1];
    let p2 = add(
        mul(
            add(
                add(
                    mul(
                        mul(
                            mul(c(c2[0]), var(P1Dot)),
                            add(mul(c(c2[0]), var(P2Dot)), c(c2[1])),
                        ),
                        c(c2[2]),
                    ),
                    mul(
                        mul(mul(mul(c(c2[3]), var(P3Dot)), c(c2[3])), var(P2Dot)),
                        c(c2[4]),
                    ),
                ),
                c(c2[5]),
            ),
            c(c2[6]),
        ),
        c(c2[7]),
    );

    // (c0 P1 + c1 P3 tanh(tanh(c2 P1 + c3)) c4) c5 + c6
    let c3 = k[2];
    let p3 = add(
        mul(
            add(
                mul(c(c3[0]), var(P1Dot)),
                mul(
                    mul(
                        mul(c(c3[1]), var(P3Dot)),
                        tanh(tanh(add(mul(c(c3[2]), var(P1Dot)), c(c3[3])))),
                    ),
                    c(c3[4]),
                ),
            ),
            c(c3[5]),
        ),
        c(c3[6]),
    );

    // (AQ(c0, c1 RA + c2) + c3 P1 (AQ(c4, c5 P1) + c6) + c7) c8 + c9
    let c4 = k[3];
    let ra = add(
        mul(
            add(
                add(
                    aq(c(c4[0]), add(mul(c(c4[1]), var(Ra)), c(c4[2]))),
                    mul(
                        mul(c(c4[3]), var(P1Dot)),
                        add(aq(c(c4[4]), mul(c(c4[5]), var(P1Dot))), c(c4[6])),
                    ),
                ),
                c(c4[7]),
            ),
            c(c4[8]),
        ),
        c(c4[9]),
    );

    DeSystem::new([p1, p2, p3, ra])
}

/// Austenitized start: no transformation under way, all austenite.
pub const AUSTENITE_START: StateVector = [0.0, 0.0, 0.0, 1.0];

/// Synthetic measurement campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// K/s.
    pub cooling_rates: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub samples_per_trajectory: usize,
    /// Relative sd of multiplicative Gaussian noise on the rate columns.
    pub noise_sd: f64,
    pub seed: u64,
    pub integrator: IntegratorSettings,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            cooling_rates: vec![0.6, 2.5, 10.0, 40.0, 80.0],
            t_start: 830.0,
            t_end: 34.0,
            samples_per_trajectory: 200,
            noise_sd: 0.0,
            seed: 0,
            integrator: IntegratorSettings::default(),
        }
    }
}

pub const MIN_COOLING_RATE: f64 = 0.6;
pub const MAX_COOLING_RATE: f64 = 120.0;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthesis setting `{key}`: {reason}")]
    InvalidSpec { key: &'static str, reason: String },
    #[error("cooling rate {ks} K/s: {source}")]
    Integration { ks: f64, source: IntegrationFailed },
    #[error("cooling rate {ks} K/s: generated data is invalid: {reason}")]
    InvalidData { ks: f64, reason: String },
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |key, reason: &str| {
            Err(SynthError::InvalidSpec {
                key,
                reason: reason.to_string(),
            })
        };
        if self.cooling_rates.is_empty() {
            return bad("cooling_rates", "at least one rate is required");
        }
        if self
            .cooling_rates
            .iter()
            .any(|k| !(MIN_COOLING_RATE..=MAX_COOLING_RATE).contains(k))
        {
            return bad("cooling_rates", "rates must lie in [0.6, 120] K/s");
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite() && self.t_start > self.t_end) {
            return bad("t_start", "start temperature must exceed end temperature");
        }
        if self.samples_per_trajectory < 2 {
            return bad(
                "samples_per_trajectory",
                "at least two samples are required",
            );
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd", "must be non-negative");
        }
        Ok(())
    }

    /// Linear cooling grid `T(t) = t_start - ks t` down to `t_end`.
    pub fn grid(&self, ks: f64) -> ExogenousSignal {
        let n = self.samples_per_trajectory;
        let duration = (self.t_start - self.t_end) / ks;
        let time: Vec<f64> = (0..n)
            .map(|i| duration * i as f64 / (n - 1) as f64)
            .collect();
        let temperature = time.iter().map(|t| self.t_start - ks * t).collect();
        ExogenousSignal::new(time, temperature, ks).expect("grid is strictly increasing")
    }
}

/// Generates one dataset per cooling rate by integrating `system` from `y0`.
pub fn synthesize(
    system: &DeSystem,
    y0: &StateVector,
    spec: &SynthSpec,
) -> Result<Vec<Dataset>, SynthError> {
    spec.validate()?;
    let normal = StandardNormal;
    spec.cooling_rates
        .iter()
        .enumerate()
        .map(|(index, &ks)| {
            let exo = spec.grid(ks);
            let traj = integrate_rk45(system, y0, &exo, &spec.integrator)
                .map_err(|source| SynthError::Integration { ks, source })?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let mut noisy = |v: f64| {
                if spec.noise_sd == 0.0 {
                    v
                } else {
                    let z: f64 = normal.sample(&mut rng);
                    v * (1.0 + spec.noise_sd * z)
                }
            };
            let rows = exo
                .time()
                .iter()
                .zip(exo.temperature())
                .zip(&traj.samples)
                .map(|((&t, &temp), y)| Row {
                    t,
                    temp,
                    p1dot: noisy(y[0]),
                    p2dot: noisy(y[1]),
                    p3dot: noisy(y[2]),
                    p4dot: 0.0,
                    ra: y[3],
                })
                .collect();
            let dataset = Dataset { ks, rows };
            dataset.validate().map_err(|e| SynthError::InvalidData {
                ks,
                reason: e.to_string(),
            })?;
            Ok(dataset)
        })
        .collect()
}

/// Synthetic stand-in for dilatometer-derived data: the reference system
/// integrated from a fully austenitic start.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<Vec<Dataset>, SynthError> {
    synthesize(&reference_system(), &AUSTENITE_START, spec)
}

/// File name used for a cooling rate, e.g. `ks_0.6.csv`.
pub fn dataset_file_name(ks: f64) -> String {
    format!("ks_{}.csv", crate::expr::format_number(ks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::format_infix;
    use crate::ode::rhs;

    #[test]
    fn jmak_examples() {
        let p = JmakParams {
            k: 2f64.ln(),
            n: 1.0,
        };
        assert_eq!(jmak_fraction(p, 0.0), 0.0);
        assert!((jmak_fraction(p, 1.0) - 0.5).abs() < 1e-12);
        let q = JmakParams { k: 1.0, n: 2.0 };
        assert!(jmak_fraction(q, 2.0) > jmak_fraction(q, 1.0));
    }

    #[test]
    fn km_examples() {
        let p = KmParams::with_ms(400.0);
        assert_eq!(km_fraction(p, 400.0), 0.0);
        assert_eq!(km_fraction(p, 450.0), 0.0);
        assert!((km_fraction(p, 300.0) - (1.0 - (-1.1f64).exp())).abs() < 1e-12);
        assert!((km_fraction(p, 300.0) - 0.66713).abs() < 1e-5);
    }

    #[test]
    fn laws_stay_in_unit_interval_and_are_monotone() {
        let p = JmakParams { k: 0.3, n: 2.5 };
        let mut last = 0.0;
        for i in 0..200 {
            let x = jmak_fraction(p, i as f64 * 0.02);
            assert!((0.0..1.0).contains(&x) && x >= last);
            last = x;
        }
        let q = KmParams::with_ms(380.0);
        let mut last = 0.0;
        for i in 0..400 {
            let x = km_fraction(q, 380.0 - i as f64);
            assert!((0.0..1.0).contains(&x) && x >= last);
            last = x;
        }
    }

    #[test]
    fn reference_parameter_layout() {
        let s = reference_system();
        for eq in 0..4 {
            let expected: Vec<f64> = PARAM_SLOTS[eq]
                .iter()
                .map(|&i| REFERENCE_CONSTANTS[eq][i])
                .collect();
            assert_eq!(s.trees[eq].extract_params(), expected, "equation {eq}");
        }
        assert_eq!(s.trees[0].param_count(), 8);
        assert_eq!(s.trees[3].param_count(), 10);
        assert_eq!(REFERENCE_CONSTANTS[1].len(), 8);
        assert_eq!(&REFERENCE_CONSTANTS[1][..2], &[0.96475, -7.6099e-5]);
        assert_eq!(
            &s.trees[1].extract_params()[..3],
            &[0.96475, 0.96475, -7.6099e-5]
        );
    }

    #[test]
    fn reference_fits_default_limits() {
        let limits = crate::expr::TreeLimits::default();
        for t in &reference_system().trees {
            assert!(t.satisfies(&limits), "{t}");
        }
    }

    #[test]
    fn reference_infix_mirrors_reference_structure() {
        let s = reference_system();
        assert_eq!(
            format_infix(&s.trees[0]),
            "((((AQ(3.591, tanh((2.2151 * RA))) + -3.031) * ((0.064351 * P1dot) + AQ(4.2717, (56.255 * Ks)^2))) * 5.1832) + 0.00050527)"
        );
        assert_eq!(
            format_infix(&s.trees[2]),
            "((((0.00031903 * P1dot) + (((0.99678 * P3dot) * tanh(tanh(((-406.1 * P1dot) + 0.75539)))) * -0.090097)) * 0.63386) + 1.4733e-5)"
        );
    }

    #[test]
    fn reference_rhs_golden_value() {
        let s = reference_system();
        let exo = ExogenousSignal::new(vec![0.0, 1.0], vec![830.0, 829.4], 0.6).unwrap();
        let d = rhs(&s, &AUSTENITE_START, 0.0, &exo).unwrap();

        // direct hand evaluation of the four formulas at P = 0, RA = 1, Ks = 0.6
        let k = REFERENCE_CONSTANTS;
        let aq = |x: f64, y: f64| x / (1.0 + y * y).sqrt();
        let e1 = (aq(k[0][0], (k[0][1]).tanh()) + k[0][2])
            * aq(k[0][4], (k[0][5] * 0.6).powi(2))
            * k[0][6]
            + k[0][7];
        let e2 = k[1][5] * k[1][6] + k[1][7];
        let e3 = k[2][6];
        let e4 = (aq(k[3][0], k[3][1] + k[3][2]) + k[3][7]) * k[3][8] + k[3][9];
        for (got, want) in d.iter().zip([e1, e2, e3, e4]) {
            assert!(
                (got - want).abs() <= 1e-15 * want.abs().max(1e-300),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let spec = SynthSpec {
            samples_per_trajectory: 50,
            ..SynthSpec::default()
        };
        let data = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(data.len(), 5);
        for d in &data {
            assert_eq!(d.len(), 50);
            assert_eq!(d.rows[0].ra, 1.0);
            assert!(d.rows.iter().all(|r| r.p4dot == 0.0));
            assert_eq!(d.rows[0].temp, 830.0);
            assert!((d.rows[49].temp - 34.0).abs() < 1e-9);
        }
        assert_eq!(generate_synthetic_dataset(&spec).unwrap(), data);

        let noisy = SynthSpec {
            noise_sd: 0.05,
            seed: 3,
            ..spec.clone()
        };
        let a = generate_synthetic_dataset(&noisy).unwrap();
        assert_eq!(a, generate_synthetic_dataset(&noisy).unwrap());
        assert_ne!(a, data);
        let other_seed = SynthSpec { seed: 4, ..noisy };
        assert_ne!(generate_synthetic_dataset(&other_seed).unwrap(), a);
    }

    #[test]
    fn spec_validation() {
        let bad = [
            SynthSpec {
                cooling_rates: vec![],
                ..SynthSpec::default()
            },
            SynthSpec {
                cooling_rates: vec![0.1],
                ..SynthSpec::default()
            },
            SynthSpec {
                cooling_rates: vec![200.0],
                ..SynthSpec::default()
            },
            SynthSpec {
                t_start: 20.0,
                ..SynthSpec::default()
            },
            SynthSpec {
                samples_per_trajectory: 1,
                ..SynthSpec::default()
            },
            SynthSpec {
                noise_sd: -0.1,
                ..SynthSpec::default()
            },
        ];
        for spec in bad {
            assert!(
                matches!(spec.validate(), Err(SynthError::InvalidSpec { .. })),
                "{spec:?}"
            );
        }
    }

    #[test]
    fn file_names() {
        assert_eq!(dataset_file_name(0.6), "ks_0.6.csv");
        assert_eq!(dataset_file_name(10.0), "ks_10.csv");
        assert_eq!(dataset_file_name(2.5), "ks_2.5.csv");
    }
}
