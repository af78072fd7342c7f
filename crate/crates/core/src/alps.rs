//! Age-layered population structure (ALPS) genetic algorithm.
//!
//! Each layer is an age bracket with its own population. Parents are drawn
//! from the layer itself plus the layers directly below it, layer 0 is
//! replaced by fresh random individuals every `age_gap` generations, and
//! individuals that outgrow their bracket move up one layer.

use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::format_number;
use crate::genotype::{
    crossover, mutate, select_generalized_rank, sort_best_first, Individual, Variation,
};

/// How layer age limits grow with the layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgingScheme {
    /// 1, 2, 3, 4, ...
    Linear,
    /// 1, 2, 4, 9, 16, 25, ...
    Polynomial,
    /// 1, 2, 4, 8, 16, ...
    Exponential,
}

impl AgingScheme {
    pub fn multiplier(self, layer: usize) -> u64 {
        let i = layer as u64;
        match self {
            AgingScheme::Linear => i + 1,
            AgingScheme::Polynomial => match i {
                0 => 1,
                1 => 2,
                _ => i * i,
            },
            AgingScheme::Exponential => 1u64.checked_shl(layer as u32).unwrap_or(u64::MAX),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlpsConfig {
    pub population_size: usize,
    pub max_layers: usize,
    pub age_gap: u32,
    pub aging_scheme: AgingScheme,
    /// Number of younger layers that join a layer's mating pool.
    pub mating_pool_range: usize,
    pub elites: usize,
    pub max_generations: u32,
    pub crossover_probability: f64,
    pub mutation_probability: f64,
    pub selection_pressure: f64,
    pub seed: u64,
}

impl Default for AlpsConfig {
    fn default() -> Self {
        AlpsConfig {
            population_size: 200,
            max_layers: 16,
            age_gap: 8,
            aging_scheme: AgingScheme::Polynomial,
            mating_pool_range: 1,
            elites: 1,
            max_generations: 2000,
            crossover_probability: 0.25,
            mutation_probability: 0.10,
            selection_pressure: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AlpsError {
    #[error("invalid setting `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> AlpsError {
    AlpsError::InvalidConfig {
        key,
        reason: reason.into(),
    }
}

impl AlpsConfig {
    pub fn validate(&self) -> Result<(), AlpsError> {
        if self.population_size == 0 {
            return Err(invalid("population_size", "must be positive"));
        }
        if self.max_layers == 0 {
            return Err(invalid("max_layers", "must be positive"));
        }
        if self.age_gap == 0 {
            return Err(invalid("age_gap", "must be positive"));
        }
        if self.elites >= self.population_size {
            return Err(invalid("elites", "must be smaller than population_size"));
        }
        for (key, p) in [
            ("crossover_probability", self.crossover_probability),
            ("mutation_probability", self.mutation_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(key, format!("{p} is outside [0, 1]")));
            }
        }
        if !(self.selection_pressure >= 1.0 && self.selection_pressure.is_finite()) {
            return Err(invalid("selection_pressure", "must be at least 1"));
        }
        Ok(())
    }

    /// Age limit of layer `layer` when it is not the topmost open layer.
    pub fn bounded_age_limit(&self, layer: usize) -> u64 {
        layer_age_limit(layer, self.age_gap, self.aging_scheme)
    }
}

/// `age_gap * s(layer)` for the aging scheme's sequence `s`.
pub fn layer_age_limit(layer: usize, age_gap: u32, scheme: AgingScheme) -> u64 {
    (age_gap as u64).saturating_mul(scheme.multiplier(layer))
}

/// What the engine needs from the problem being solved.
pub trait Problem: Sync {
    fn random_individual(&self, rng: &mut ChaCha8Rng) -> Individual;

    /// Returns the individual with its fitness set. May also refine its
    /// parameters. Must be deterministic.
    fn evaluate(&self, individual: Individual) -> Individual;

    /// Grammar, tree limits and active slots for the variation operators.
    /// The probabilities are taken from [`AlpsConfig`] instead.
    fn variation(&self) -> &Variation;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub index: usize,
    pub population: Vec<Individual>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub generation: u32,
    pub layer: usize,
    pub best: f64,
    pub mean: f64,
    pub mean_age: f64,
}

pub const HISTORY_HEADER: &str = "generation,layer,best_nmse,mean_nmse,mean_age";

impl HistoryRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.generation,
            self.layer,
            format_number(self.best),
            format_number(self.mean),
            format_number(self.mean_age)
        )
    }
}

#[derive(Debug, Clone)]
pub struct EngineState {
    pub config: AlpsConfig,
    variation: Variation,
    pub layers: Vec<Layer>,
    pub generation: u32,
    pub best_ever: Individual,
    pub history: Vec<HistoryRecord>,
}

const RESEED_STREAM: u64 = 0xffff;

fn stream_rng(seed: u64, generation: u32, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 16) | tag);
    rng
}

fn fresh_population<P: Problem>(problem: &P, rng: &mut ChaCha8Rng, n: usize) -> Vec<Individual> {
    let raw: Vec<Individual> = (0..n).map(|_| problem.random_individual(rng)).collect();
    evaluate_batch(problem, raw)
}

/// Evaluates in parallel; output order equals input order.
fn evaluate_batch<P: Problem>(problem: &P, batch: Vec<Individual>) -> Vec<Individual> {
    batch
        .into_par_iter()
        .map(|ind| {
            if ind.fitness.is_some() {
                ind
            } else {
                problem.evaluate(ind)
            }
        })
        .collect()
}

fn best_of(pop: &[Individual]) -> Option<&Individual> {
    pop.iter()
        .min_by(|a, b| crate::genotype::compare_best_first(a, b))
}

impl EngineState {
    /// Layer 0 filled with evaluated random individuals, generation 0.
    pub fn initialize<P: Problem>(config: &AlpsConfig, problem: &P) -> Result<Self, AlpsError> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0, RESEED_STREAM);
        let population = fresh_population(problem, &mut rng, config.population_size);
        let best_ever = best_of(&population)
            .expect("population is not empty")
            .clone();
        let variation = Variation {
            crossover_probability: config.crossover_probability,
            mutation_probability: config.mutation_probability,
            ..problem.variation().clone()
        };
        let mut state = EngineState {
            config: config.clone(),
            variation,
            layers: vec![Layer {
                index: 0,
                population,
            }],
            generation: 0,
            best_ever,
            history: Vec::new(),
        };
        state.record_history();
        Ok(state)
    }

    /// Age limit of an open layer; `None` for the topmost open layer.
    pub fn age_limit(&self, layer: usize) -> Option<u64> {
        if layer + 1 >= self.layers.len() {
            None
        } else {
            Some(self.config.bounded_age_limit(layer))
        }
    }

    pub fn best_fitness(&self) -> f64 {
        self.best_ever.fitness_or_worst()
    }

    fn record_history(&mut self) {
        for layer in &self.layers {
            let pop = &layer.population;
            let (best, mean, mean_age) = if pop.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                let n = pop.len() as f64;
                (
                    pop.iter()
                        .map(|i| i.fitness_or_worst())
                        .fold(f64::INFINITY, f64::min),
                    pop.iter().map(|i| i.fitness_or_worst()).sum::<f64>() / n,
                    pop.iter().map(|i| i.age as f64).sum::<f64>() / n,
                )
            };
            self.history.push(HistoryRecord {
                generation: self.generation,
                layer: layer.index,
                best,
                mean,
                mean_age,
            });
        }
    }

    /// Advances one generation: breed every layer, evaluate, open a layer if
    /// needed, migrate over-age individuals, reseed layer 0 on schedule.
    pub fn step<P: Problem>(&mut self, problem: &P) {
        let cfg = &self.config;
        let open = self.layers.len();

        // breed all layers from the current (old) populations
        let mut pending: Vec<Vec<Individual>> = Vec::with_capacity(open);
        for i in 0..open {
            let mut own = self.layers[i].population.clone();
            sort_best_first(&mut own);
            let mut next: Vec<Individual> = own
                .iter()
                .take(cfg.elites)
                .map(|e| Individual {
                    age: e.age + 1,
                    ..e.clone()
                })
                .collect();

            let lowest = i.saturating_sub(cfg.mating_pool_range);
            let mut pool: Vec<Individual> = (lowest..=i)
                .rev()
                .flat_map(|j| self.layers[j].population.iter().cloned())
                .collect();
            sort_best_first(&mut pool);

            let mut rng = stream_rng(cfg.seed, self.generation + 1, i as u64);
            if !pool.is_empty() {
                while next.len() < cfg.population_size {
                    let a = &pool[select_generalized_rank(&pool, cfg.selection_pressure, &mut rng)
                        .expect("pool is not empty")];
                    let b = &pool[select_generalized_rank(&pool, cfg.selection_pressure, &mut rng)
                        .expect("pool is not empty")];
                    let child = crossover(a, b, &mut rng, &self.variation);
                    let mut child = mutate(&child, &mut rng, &self.variation);
                    if child.same_trees(a) {
                        child.fitness = a.fitness;
                    }
                    next.push(child);
                }
            }
            pending.push(next);
        }

        // evaluate layer-major, slot-minor
        let sizes: Vec<usize> = pending.iter().map(Vec::len).collect();
        let mut evaluated =
            evaluate_batch(problem, pending.into_iter().flatten().collect()).into_iter();
        for (i, n) in sizes.into_iter().enumerate() {
            self.layers[i].population = evaluated.by_ref().take(n).collect();
        }
        self.generation += 1;

        // open a layer once the top one holds individuals past its bounded limit
        let top = self.layers.len() - 1;
        if self.layers.len() < self.config.max_layers {
            let limit = self.config.bounded_age_limit(top);
            if self.layers[top]
                .population
                .iter()
                .any(|ind| ind.age as u64 > limit)
            {
                self.layers.push(Layer {
                    index: top + 1,
                    population: Vec::new(),
                });
            }
        }

        self.migrate();

        if self.config.max_layers > 1 && self.generation.is_multiple_of(self.config.age_gap) {
            let mut rng = stream_rng(self.config.seed, self.generation, RESEED_STREAM);
            self.layers[0].population =
                fresh_population(problem, &mut rng, self.config.population_size);
        }

        for layer in &self.layers {
            if let Some(b) = best_of(&layer.population) {
                if b.fitness_or_worst() < self.best_ever.fitness_or_worst() {
                    self.best_ever = b.clone();
                }
            }
        }
        self.record_history();
    }

    fn migrate(&mut self) {
        let size = self.config.population_size;
        for i in 0..self.layers.len().saturating_sub(1) {
            let limit = self.config.bounded_age_limit(i);
            let (stay, movers): (Vec<Individual>, Vec<Individual>) = self.layers[i]
                .population
                .drain(..)
                .partition(|ind| ind.age as u64 <= limit);
            self.layers[i].population = stay;
            if movers.is_empty() {
                continue;
            }
            let target = &mut self.layers[i + 1].population;
            target.extend(movers);
            if target.len() > size {
                // the worst individuals are displaced
                sort_best_first(target);
                target.truncate(size);
            }
        }
    }

    /// Residency check: every individual in a bounded layer is within its limit.
    pub fn age_limits_hold(&self) -> bool {
        self.layers
            .iter()
            .all(|layer| match self.age_limit(layer.index) {
                Some(limit) => layer.population.iter().all(|ind| ind.age as u64 <= limit),
                None => true,
            })
    }
}

/// Optional controls for [`run`].
#[derive(Default)]
pub struct RunControl<'a> {
    pub deadline: Option<Instant>,
    pub stop: Option<&'a AtomicBool>,
    /// Receives history records as CSV lines, header first.
    pub history_sink: Option<&'a mut dyn Write>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub best: Individual,
    pub history: Vec<HistoryRecord>,
    pub generations: u32,
    /// True if the run ended before `max_generations`.
    pub interrupted: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] AlpsError),
    #[error("writing history: {0}")]
    History(#[from] io::Error),
}

/// Runs generations until `max_generations`, the deadline, or the stop flag.
pub fn run<P: Problem>(
    config: &AlpsConfig,
    problem: &P,
    mut control: RunControl<'_>,
) -> Result<RunResult, RunError> {
    let mut state = EngineState::initialize(config, problem)?;
    let mut written = 0;
    let mut flush = |state: &EngineState, sink: &mut Option<&mut dyn Write>| -> io::Result<()> {
        if let Some(sink) = sink.as_deref_mut() {
            if written == 0 {
                writeln!(sink, "{HISTORY_HEADER}")?;
            }
            for rec in &state.history[written..] {
                writeln!(sink, "{}", rec.csv_line())?;
            }
            written = state.history.len();
        }
        Ok(())
    };
    flush(&state, &mut control.history_sink)?;
    let mut interrupted = false;
    while state.generation < config.max_generations {
        let stop_requested = control.stop.is_some_and(|s| s.load(Ordering::Relaxed));
        let past_deadline = control.deadline.is_some_and(|d| Instant::now() >= d);
        if stop_requested || past_deadline {
            interrupted = true;
            break;
        }
        state.step(problem);
        flush(&state, &mut control.history_sink)?;
    }
    Ok(RunResult {
        best: state.best_ever,
        history: state.history,
        generations: state.generation,
        interrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{ExpressionTree, Grammar, Node, TreeLimits};

    /// Minimize the sum of squares of four single-parameter trees.
    struct Sphere {
        variation: Variation,
    }

    impl Sphere {
        fn new() -> Self {
            Sphere {
                variation: Variation {
                    grammar: Grammar {
                        functions: vec![],
                        variables: vec![],
                        ..Grammar::default()
                    },
                    limits: TreeLimits {
                        max_nodes: 1,
                        max_depth: 1,
                    },
                    ..Variation::default()
                },
            }
        }
    }

    impl Problem for Sphere {
        fn random_individual(&self, rng: &mut ChaCha8Rng) -> Individual {
            Individual::new(std::array::from_fn(|_| {
                ExpressionTree::param(self.variation.grammar.random_param(rng))
            }))
        }

        fn evaluate(&self, mut ind: Individual) -> Individual {
            let f = ind
                .trees
                .iter()
                .map(|t| match t.nodes()[0] {
                    Node::Param(v) => v * v,
                    _ => f64::INFINITY,
                })
                .sum();
            ind.fitness = Some(f);
            ind
        }

        fn variation(&self) -> &Variation {
            &self.variation
        }
    }

    fn small(pop: usize, layers: usize, gens: u32, seed: u64) -> AlpsConfig {
        AlpsConfig {
            population_size: pop,
            max_layers: layers,
            max_generations: gens,
            seed,
            ..AlpsConfig::default()
        }
    }

    #[test]
    fn polynomial_limits() {
        let s = AgingScheme::Polynomial;
        let limits: Vec<u64> = (0..6).map(|i| layer_age_limit(i, 8, s)).collect();
        assert_eq!(limits, vec![8, 16, 32, 72, 128, 200]);
        assert_eq!(layer_age_limit(3, 1, AgingScheme::Linear), 4);
        assert_eq!(layer_age_limit(3, 1, AgingScheme::Exponential), 8);
    }

    #[test]
    fn zero_generations_returns_initial_best() {
        let problem = Sphere::new();
        let cfg = small(30, 3, 0, 4);
        let res = run(&cfg, &problem, RunControl::default()).unwrap();
        assert_eq!(res.generations, 0);
        let mut rng = stream_rng(4, 0, RESEED_STREAM);
        let initial: Vec<Individual> = (0..30)
            .map(|_| problem.evaluate(problem.random_individual(&mut rng)))
            .collect();
        let best = initial
            .iter()
            .map(|i| i.fitness.unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(res.best.fitness, Some(best));
    }

    #[test]
    fn sphere_reaches_optimum() {
        let res = run(&small(50, 3, 200, 1), &Sphere::new(), RunControl::default()).unwrap();
        assert!(res.best.fitness.unwrap() < 1e-3, "{:?}", res.best.fitness);
    }

    #[test]
    fn single_layer_best_is_monotone() {
        let problem = Sphere::new();
        let mut state = EngineState::initialize(&small(20, 1, 0, 2), &problem).unwrap();
        let mut last = state.layers[0]
            .population
            .iter()
            .map(|i| i.fitness_or_worst())
            .fold(f64::INFINITY, f64::min);
        for _ in 0..60 {
            state.step(&problem);
            assert_eq!(state.layers.len(), 1);
            let best = state.layers[0]
                .population
                .iter()
                .map(|i| i.fitness_or_worst())
                .fold(f64::INFINITY, f64::min);
            assert!(best <= last);
            last = best;
        }
    }

    #[test]
    fn same_seed_same_history() {
        let problem = Sphere::new();
        let a = run(&small(20, 4, 40, 9), &problem, RunControl::default()).unwrap();
        let b = run(&small(20, 4, 40, 9), &problem, RunControl::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        let c = run(&small(20, 4, 40, 10), &problem, RunControl::default()).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn stop_flag_interrupts() {
        let flag = AtomicBool::new(true);
        let control = RunControl {
            stop: Some(&flag),
            ..RunControl::default()
        };
        let res = run(&small(10, 2, 50, 1), &Sphere::new(), control).unwrap();
        assert!(res.interrupted);
        assert_eq!(res.generations, 0);
    }

    #[test]
    fn history_is_streamed_as_csv() {
        let mut sink = Vec::new();
        let control = RunControl {
            history_sink: Some(&mut sink),
            ..RunControl::default()
        };
        let res = run(&small(10, 3, 12, 1), &Sphere::new(), control).unwrap();
        let text = String::from_utf8(sink).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 1 + res.history.len());
        assert!(lines[1].starts_with("0,0,"));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = AlpsConfig {
            mutation_probability: 1.5,
            ..AlpsConfig::default()
        };
        assert!(matches!(
            run(&cfg, &Sphere::new(), RunControl::default()),
            Err(RunError::Config(AlpsError::InvalidConfig {
                key: "mutation_probability",
                ..
            }))
        ));
        let cfg = AlpsConfig {
            population_size: 0,
            ..AlpsConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
