//! Multi-tree individuals and the variation/selection operators that act on them.

use std::cmp::Ordering;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::expr::{random_tree, ExpressionTree, Function, Grammar, Node, TreeLimits};

/// Number of trees per individual: P1dot, P2dot, P3dot and RA equations.
pub const TREES: usize = 4;

/// Crossover and mutation give up after this many limit-violating attempts.
const MAX_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub trees: [ExpressionTree; TREES],
    /// Generations of evolution the genetic material has been around; starts at 1.
    pub age: u32,
    /// NMSE (or penalty), lower is better. `None` until evaluated.
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn new(trees: [ExpressionTree; TREES]) -> Self {
        Individual {
            trees,
            age: 1,
            fitness: None,
        }
    }

    /// Fitness with unevaluated individuals sorting last.
    pub fn fitness_or_worst(&self) -> f64 {
        match self.fitness {
            Some(f) if !f.is_nan() => f,
            _ => f64::INFINITY,
        }
    }

    pub fn same_trees(&self, other: &Individual) -> bool {
        self.trees == other.trees
    }
}

/// Best-first ordering: lower fitness, then lower age.
pub fn compare_best_first(a: &Individual, b: &Individual) -> Ordering {
    a.fitness_or_worst()
        .total_cmp(&b.fitness_or_worst())
        .then(a.age.cmp(&b.age))
}

/// Stable best-first sort.
pub fn sort_best_first(pool: &mut [Individual]) {
    pool.sort_by(compare_best_first);
}

/// Parameters shared by the variation operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Variation {
    pub grammar: Grammar,
    pub limits: TreeLimits,
    /// Per tree slot.
    pub crossover_probability: f64,
    /// Per individual.
    pub mutation_probability: f64,
    /// Slots that take part in evolution; inactive slots are never modified.
    pub active: [bool; TREES],
}

impl Default for Variation {
    fn default() -> Self {
        Variation {
            grammar: Grammar::default(),
            limits: TreeLimits::default(),
            crossover_probability: 0.25,
            mutation_probability: 0.10,
            active: [true; TREES],
        }
    }
}

impl Variation {
    fn active_slots(&self) -> Vec<usize> {
        (0..TREES).filter(|&i| self.active[i]).collect()
    }
}

/// Subtree-swapping crossover applied independently to each tree slot.
pub fn crossover<R: Rng + ?Sized>(
    a: &Individual,
    b: &Individual,
    rng: &mut R,
    cfg: &Variation,
) -> Individual {
    let mut child = a.clone();
    for slot in 0..TREES {
        let draw: f64 = rng.random();
        if draw < cfg.crossover_probability && cfg.active[slot] {
            if let Some(t) = swap_subtree(&child.trees[slot], &b.trees[slot], rng, &cfg.limits) {
                child.trees[slot] = t;
            }
        }
    }
    child.age = 1 + a.age.max(b.age);
    child.fitness = None;
    child
}

fn swap_subtree<R: Rng + ?Sized>(
    receiver: &ExpressionTree,
    donor: &ExpressionTree,
    rng: &mut R,
    limits: &TreeLimits,
) -> Option<ExpressionTree> {
    for _ in 0..MAX_RETRIES {
        let cut = rng.random_range(0..receiver.len());
        let graft = donor.subtree(rng.random_range(0..donor.len()));
        let candidate = receiver.replace_subtree(cut, &graft);
        if candidate.satisfies(limits) {
            return Some(candidate);
        }
    }
    None
}

/// The manipulations a mutation chooses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manipulation {
    ReplaceBranch,
    ChangeFunction,
    ChangeTerminal,
    PerturbOneParam,
    PerturbAllParams,
}

impl Manipulation {
    pub const ALL: [Manipulation; 5] = [
        Manipulation::ReplaceBranch,
        Manipulation::ChangeFunction,
        Manipulation::ChangeTerminal,
        Manipulation::PerturbOneParam,
        Manipulation::PerturbAllParams,
    ];
}

/// With probability `mutation_probability`, applies one random manipulation
/// to one randomly chosen active tree.
pub fn mutate<R: Rng + ?Sized>(ind: &Individual, rng: &mut R, cfg: &Variation) -> Individual {
    let draw: f64 = rng.random();
    let slots = cfg.active_slots();
    if draw >= cfg.mutation_probability || slots.is_empty() {
        return ind.clone();
    }
    let slot = *slots.choose(rng).unwrap();
    let kind = *Manipulation::ALL.choose(rng).unwrap();
    let tree = manipulate(&ind.trees[slot], kind, rng, cfg);
    let mut out = ind.clone();
    if tree != out.trees[slot] {
        out.trees[slot] = tree;
        out.fitness = None;
    }
    out
}

/// Applies one manipulation; returns the input unchanged when it does not apply.
pub fn manipulate<R: Rng + ?Sized>(
    tree: &ExpressionTree,
    kind: Manipulation,
    rng: &mut R,
    cfg: &Variation,
) -> ExpressionTree {
    let limits = &cfg.limits;
    let grammar = &cfg.grammar;
    let pick = |rng: &mut R, pred: &dyn Fn(&Node) -> bool| -> Option<usize> {
        let idx: Vec<usize> = (0..tree.len())
            .filter(|&i| pred(&tree.nodes()[i]))
            .collect();
        idx.choose(rng).copied()
    };
    match kind {
        Manipulation::ReplaceBranch => {
            let at = rng.random_range(0..tree.len());
            let outside = tree.len() - tree.subtree_range(at).len();
            let room = TreeLimits {
                max_nodes: limits.max_nodes.saturating_sub(outside).max(1),
                max_depth: (limits.max_depth + 1)
                    .saturating_sub(tree.depth_of(at))
                    .max(1),
            };
            let branch = random_tree(rng, grammar, &room);
            let candidate = tree.replace_subtree(at, &branch);
            if candidate.satisfies(limits) {
                candidate
            } else {
                tree.clone()
            }
        }
        Manipulation::ChangeFunction => {
            let Some(at) = pick(rng, &|n| matches!(n, Node::Func(_))) else {
                return tree.clone();
            };
            let Node::Func(current) = tree.nodes()[at] else {
                unreachable!()
            };
            let options: Vec<Function> = grammar
                .functions
                .iter()
                .copied()
                .filter(|f| *f != current && f.arity() == current.arity())
                .collect();
            match options.choose(rng) {
                Some(f) => tree.with_node(at, Node::Func(*f)),
                None => tree.clone(),
            }
        }
        Manipulation::ChangeTerminal => {
            let Some(at) = pick(rng, &|n| n.is_terminal()) else {
                return tree.clone();
            };
            tree.with_node(at, grammar.random_terminal(rng))
        }
        Manipulation::PerturbOneParam => {
            let Some(at) = pick(rng, &|n| matches!(n, Node::Param(_))) else {
                return tree.clone();
            };
            let Node::Param(v) = tree.nodes()[at] else {
                unreachable!()
            };
            tree.with_node(at, Node::Param(v * perturbation(rng)))
        }
        Manipulation::PerturbAllParams => {
            let theta: Vec<f64> = tree
                .extract_params()
                .into_iter()
                .map(|v| v * perturbation(rng))
                .collect();
            tree.inject_params(&theta).expect("length preserved")
        }
    }
}

fn perturbation<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Normal::new(1.0, 0.5).unwrap().sample(rng)
}

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("cannot select from an empty pool")]
    EmptyPool,
}

/// Generalized rank selection over a best-first sorted pool: returns
/// `floor(N * u^pressure)` for `u` uniform in [0, 1).
pub fn select_generalized_rank<T, R: Rng + ?Sized>(
    pool: &[T],
    pressure: f64,
    rng: &mut R,
) -> Result<usize, SelectionError> {
    if pool.is_empty() {
        return Err(SelectionError::EmptyPool);
    }
    let u: f64 = rng.random();
    let index = (pool.len() as f64 * u.powf(pressure)).floor() as usize;
    Ok(index.min(pool.len() - 1))
}
