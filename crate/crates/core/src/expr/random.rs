use rand::seq::IndexedRandom;
use rand::Rng;

use super::{ExpressionTree, Function, Node, TreeLimits, Variable};

/// Symbols available to tree construction and mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub functions: Vec<Function>,
    pub variables: Vec<Variable>,
    /// Closed range for freshly drawn parameter values.
    pub param_range: (f64, f64),
    /// Chance of stopping early with a terminal where a function would fit.
    pub terminal_probability: f64,
    /// Chance that a terminal is a variable rather than a parameter.
    pub variable_probability: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar {
            functions: Function::ALL.to_vec(),
            variables: Variable::ALL.to_vec(),
            param_range: (-10.0, 10.0),
            terminal_probability: 0.3,
            variable_probability: 0.5,
        }
    }
}

impl Grammar {
    pub fn random_param<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.param_range;
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    pub fn random_terminal<R: Rng + ?Sized>(&self, rng: &mut R) -> Node {
        if !self.variables.is_empty() && rng.random_bool(self.variable_probability) {
            Node::Var(*self.variables.choose(rng).unwrap())
        } else {
            Node::Param(self.random_param(rng))
        }
    }
}

/// Grows a random tree within `limits`. The size budget is drawn uniformly
/// from `1..=max_nodes` so that small and large trees both occur.
pub fn random_tree<R: Rng + ?Sized>(
    rng: &mut R,
    grammar: &Grammar,
    limits: &TreeLimits,
) -> ExpressionTree {
    assert!(limits.max_nodes >= 1 && limits.max_depth >= 1);
    let budget = rng.random_range(1..=limits.max_nodes);
    let mut nodes = Vec::with_capacity(budget);
    grow(rng, grammar, limits.max_depth, 1, budget, &mut nodes);
    ExpressionTree { nodes }
}

fn grow<R: Rng + ?Sized>(
    rng: &mut R,
    grammar: &Grammar,
    max_depth: usize,
    depth: usize,
    budget: usize,
    out: &mut Vec<Node>,
) -> usize {
    let fits = |f: &&Function| depth < max_depth && budget > f.arity();
    let candidates: Vec<&Function> = grammar.functions.iter().filter(fits).collect();
    if candidates.is_empty() || rng.random_bool(grammar.terminal_probability) {
        out.push(grammar.random_terminal(rng));
        return 1;
    }
    let f = **candidates.choose(rng).unwrap();
    out.push(Node::Func(f));
    match f.arity() {
        1 => 1 + grow(rng, grammar, max_depth, depth + 1, budget - 1, out),
        _ => {
            let left = grow(rng, grammar, max_depth, depth + 1, budget - 2, out);
            let right = grow(rng, grammar, max_depth, depth + 1, budget - 1 - left, out);
            1 + left + right
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_one_forces_a_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let limits = TreeLimits {
            max_nodes: 30,
            max_depth: 1,
        };
        for _ in 0..200 {
            let t = random_tree(&mut rng, &Grammar::default(), &limits);
            assert_eq!(t.len(), 1);
            assert!(t.nodes()[0].is_terminal());
        }
    }

    #[test]
    fn one_node_forces_a_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let limits = TreeLimits {
            max_nodes: 1,
            max_depth: 10,
        };
        for _ in 0..200 {
            assert_eq!(random_tree(&mut rng, &Grammar::default(), &limits).len(), 1);
        }
    }

    #[test]
    fn ten_thousand_samples_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let limits = TreeLimits {
            max_nodes: 25,
            max_depth: 8,
        };
        let g = Grammar::default();
        let mut largest = 0;
        for _ in 0..10_000 {
            let t = random_tree(&mut rng, &g, &limits);
            assert!(t.satisfies(&limits), "{t}");
            assert!(ExpressionTree::from_prefix(t.nodes().to_vec()).is_ok());
            for v in t.extract_params() {
                assert!((-10.0..=10.0).contains(&v));
            }
            largest = largest.max(t.len());
        }
        assert!(largest > 15, "sampler never produced large trees");
    }

    proptest! {
        #[test]
        fn extract_inject_round_trip(seed in any::<u64>(), values in proptest::collection::vec(-1e6f64..1e6, 0..40)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, &Grammar::default(), &TreeLimits::default());
            prop_assert_eq!(t.inject_params(&t.extract_params()).unwrap(), t.clone());
            let n = t.param_count();
            let theta: Vec<f64> = values.iter().copied().cycle().take(n).collect();
            if theta.len() == n {
                let u = t.inject_params(&theta).unwrap();
                prop_assert_eq!(u.extract_params(), theta);
                prop_assert!(u.same_shape(&t));
            }
        }
    }
}
