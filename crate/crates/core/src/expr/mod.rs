//! Expression trees for the right-hand sides of the evolved DE system.
//!
//! Trees are stored as a flat prefix-order node list. Subtrees are contiguous
//! ranges of that list, which keeps crossover and mutation down to a splice.

mod random;
mod text;

pub use random::{random_tree, Grammar};
pub use text::{format_infix, format_number, format_prefix, parse_prefix, ParseError};

use std::fmt;

use thiserror::Error;

/// Number of entries in an evaluation state.
pub const STATE_LEN: usize = 6;

/// Input variables, in evaluation-state order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    P1Dot,
    P2Dot,
    P3Dot,
    Ra,
    Ks,
    T,
}

impl Variable {
    pub const ALL: [Variable; STATE_LEN] = [
        Variable::P1Dot,
        Variable::P2Dot,
        Variable::P3Dot,
        Variable::Ra,
        Variable::Ks,
        Variable::T,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Variable> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::P1Dot => "P1dot",
            Variable::P2Dot => "P2dot",
            Variable::P3Dot => "P3dot",
            Variable::Ra => "RA",
            Variable::Ks => "Ks",
            Variable::T => "T",
        }
    }

    pub fn from_name(name: &str) -> Option<Variable> {
        Self::ALL.iter().copied().find(|v| v.name() == name)
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Function set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Function {
    Add,
    Mul,
    Div,
    Square,
    Exp,
    Tanh,
    /// Analytic quotient, `x / sqrt(1 + y^2)`.
    Aq,
}

impl Function {
    pub const ALL: [Function; 7] = [
        Function::Add,
        Function::Mul,
        Function::Div,
        Function::Square,
        Function::Exp,
        Function::Tanh,
        Function::Aq,
    ];

    pub fn arity(self) -> usize {
        match self {
            Function::Square | Function::Exp | Function::Tanh => 1,
            Function::Add | Function::Mul | Function::Div | Function::Aq => 2,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Function::Add => "add",
            Function::Mul => "mul",
            Function::Div => "div",
            Function::Square => "square",
            Function::Exp => "exp",
            Function::Tanh => "tanh",
            Function::Aq => "aq",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Function> {
        Self::ALL.iter().copied().find(|f| f.keyword() == word)
    }

    #[inline]
    pub fn apply1(self, x: f64) -> f64 {
        match self {
            Function::Square => x * x,
            Function::Exp => x.exp(),
            Function::Tanh => x.tanh(),
            _ => unreachable!("binary function applied to one argument"),
        }
    }

    #[inline]
    pub fn apply2(self, x: f64, y: f64) -> f64 {
        match self {
            Function::Add => x + y,
            Function::Mul => x * y,
            Function::Div => x / y,
            Function::Aq => x / (1.0 + y * y).sqrt(),
            _ => unreachable!("unary function applied to two arguments"),
        }
    }
}

/// One node of a prefix-encoded tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Func(Function),
    Var(Variable),
    Param(f64),
}

impl Node {
    pub fn arity(&self) -> usize {
        match self {
            Node::Func(f) => f.arity(),
            _ => 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        !matches!(self, Node::Func(_))
    }

    /// Equal up to the value held by a parameter node.
    pub fn same_shape(&self, other: &Node) -> bool {
        match (self, other) {
            (Node::Param(_), Node::Param(_)) => true,
            _ => self == other,
        }
    }
}

/// Size and depth bounds. The root sits at depth 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeLimits {
    pub max_nodes: usize,
    pub max_depth: usize,
}

impl Default for TreeLimits {
    fn default() -> Self {
        TreeLimits {
            max_nodes: 30,
            max_depth: 10,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("parameter vector has {got} values, tree has {expected} parameters")]
    ParamLength { expected: usize, got: usize },
    #[error("malformed prefix sequence")]
    Malformed,
    #[error("parameter value {0} is not finite")]
    NonFiniteParam(f64),
}

/// An immutable-by-convention expression tree in prefix order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTree {
    nodes: Vec<Node>,
}

impl ExpressionTree {
    /// Builds a tree from a prefix node list, checking that it is well formed.
    pub fn from_prefix(nodes: Vec<Node>) -> Result<Self, ExprError> {
        if nodes.is_empty() || subtree_end(&nodes, 0) != Some(nodes.len()) {
            return Err(ExprError::Malformed);
        }
        for n in &nodes {
            if let Node::Param(v) = n {
                if !v.is_finite() {
                    return Err(ExprError::NonFiniteParam(*v));
                }
            }
        }
        Ok(ExpressionTree { nodes })
    }

    pub fn var(v: Variable) -> Self {
        ExpressionTree {
            nodes: vec![Node::Var(v)],
        }
    }

    pub fn param(value: f64) -> Self {
        ExpressionTree {
            nodes: vec![Node::Param(value)],
        }
    }

    pub fn unary(f: Function, arg: ExpressionTree) -> Self {
        assert_eq!(f.arity(), 1, "{f:?} is not unary");
        let mut nodes = Vec::with_capacity(arg.len() + 1);
        nodes.push(Node::Func(f));
        nodes.extend(arg.nodes);
        ExpressionTree { nodes }
    }

    pub fn binary(f: Function, lhs: ExpressionTree, rhs: ExpressionTree) -> Self {
        assert_eq!(f.arity(), 2, "{f:?} is not binary");
        let mut nodes = Vec::with_capacity(lhs.len() + rhs.len() + 1);
        nodes.push(Node::Func(f));
        nodes.extend(lhs.nodes);
        nodes.extend(rhs.nodes);
        ExpressionTree { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        node_depths(&self.nodes).into_iter().max().unwrap_or(0)
    }

    pub fn satisfies(&self, limits: &TreeLimits) -> bool {
        self.len() <= limits.max_nodes && self.depth() <= limits.max_depth
    }

    /// Half-open node range of the subtree rooted at `index`.
    pub fn subtree_range(&self, index: usize) -> std::ops::Range<usize> {
        let end = subtree_end(&self.nodes, index).expect("tree is well formed");
        index..end
    }

    pub fn subtree(&self, index: usize) -> ExpressionTree {
        ExpressionTree {
            nodes: self.nodes[self.subtree_range(index)].to_vec(),
        }
    }

    /// Depth of the node at `index` (root is 1).
    pub fn depth_of(&self, index: usize) -> usize {
        node_depths(&self.nodes)[index]
    }

    /// Returns a copy with the subtree at `index` replaced by `replacement`.
    pub fn replace_subtree(&self, index: usize, replacement: &ExpressionTree) -> ExpressionTree {
        let range = self.subtree_range(index);
        let mut nodes = Vec::with_capacity(self.len() - range.len() + replacement.len());
        nodes.extend_from_slice(&self.nodes[..range.start]);
        nodes.extend_from_slice(&replacement.nodes);
        nodes.extend_from_slice(&self.nodes[range.end..]);
        ExpressionTree { nodes }
    }

    /// Returns a copy with the node at `index` swapped for `node` of the same arity.
    pub fn with_node(&self, index: usize, node: Node) -> ExpressionTree {
        assert_eq!(self.nodes[index].arity(), node.arity(), "arity must match");
        let mut nodes = self.nodes.clone();
        nodes[index] = node;
        ExpressionTree { nodes }
    }

    /// Same structure, ignoring parameter values.
    pub fn same_shape(&self, other: &ExpressionTree) -> bool {
        self.len() == other.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Param(_)))
            .count()
    }

    pub fn uses_variable(&self, v: Variable) -> bool {
        self.nodes.contains(&Node::Var(v))
    }

    /// Parameter values in prefix order.
    pub fn extract_params(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Param(v) => Some(*v),
                _ => None,
            })
            .collect()
    }

    /// Writes `theta` into the parameter nodes, in prefix order.
    pub fn inject_params(&self, theta: &[f64]) -> Result<ExpressionTree, ExprError> {
        let expected = self.param_count();
        if theta.len() != expected {
            return Err(ExprError::ParamLength {
                expected,
                got: theta.len(),
            });
        }
        let mut values = theta.iter();
        let nodes = self
            .nodes
            .iter()
            .map(|n| match n {
                Node::Param(_) => Node::Param(*values.next().unwrap()),
                other => *other,
            })
            .collect();
        Ok(ExpressionTree { nodes })
    }

    /// Evaluates the tree at `state` = [P1dot, P2dot, P3dot, RA, Ks, T].
    ///
    /// Non-finite intermediate values propagate unchanged.
    pub fn eval(&self, state: &[f64; STATE_LEN]) -> f64 {
        let mut stack = [0.0f64; 64];
        let mut heap = Vec::new();
        if self.nodes.len() > stack.len() {
            heap.resize(self.nodes.len(), 0.0);
            eval_prefix(&self.nodes, state, &mut heap)
        } else {
            eval_prefix(&self.nodes, state, &mut stack)
        }
    }
}

impl fmt::Display for ExpressionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_infix(self))
    }
}

/// Stack evaluation of a prefix list, scanning right to left.
fn eval_prefix(nodes: &[Node], state: &[f64; STATE_LEN], stack: &mut [f64]) -> f64 {
    let mut sp = 0usize;
    for node in nodes.iter().rev() {
        match *node {
            Node::Var(v) => {
                stack[sp] = state[v.index()];
                sp += 1;
            }
            Node::Param(c) => {
                stack[sp] = c;
                sp += 1;
            }
            Node::Func(f) => {
                if f.arity() == 1 {
                    stack[sp - 1] = f.apply1(stack[sp - 1]);
                } else {
                    // first argument was pushed last
                    let x = stack[sp - 1];
                    let y = stack[sp - 2];
                    sp -= 1;
                    stack[sp - 1] = f.apply2(x, y);
                }
            }
        }
    }
    debug_assert_eq!(sp, 1);
    stack[0]
}

fn subtree_end(nodes: &[Node], start: usize) -> Option<usize> {
    let mut open = 1usize;
    for (i, n) in nodes.iter().enumerate().skip(start) {
        open = open + n.arity() - 1;
        if open == 0 {
            return Some(i + 1);
        }
    }
    None
}

fn node_depths(nodes: &[Node]) -> Vec<usize> {
    let mut depths = Vec::with_capacity(nodes.len());
    // remaining child slots of each open ancestor, with its depth
    let mut open: Vec<(usize, usize)> = Vec::new();
    for n in nodes {
        let d = match open.last_mut() {
            Some((remaining, depth)) => {
                *remaining -= 1;
                *depth + 1
            }
            None => 1,
        };
        while matches!(open.last(), Some((0, _))) {
            open.pop();
        }
        depths.push(d);
        if n.arity() > 0 {
            open.push((n.arity(), d));
        }
    }
    depths
}

#[cfg(test)]
mod tests {
    use super::*;
    use Function::*;

    fn p(v: f64) -> ExpressionTree {
        ExpressionTree::param(v)
    }

    fn zero_state() -> [f64; STATE_LEN] {
        [0.0; STATE_LEN]
    }

    #[test]
    fn aq_with_zero_denominator_is_identity() {
        let t = ExpressionTree::binary(Aq, ExpressionTree::var(Variable::P1Dot), p(0.0));
        let mut s = zero_state();
        s[0] = 7.0;
        assert_eq!(t.eval(&s), 7.0);
    }

    #[test]
    fn aq_of_three_and_four() {
        let t = ExpressionTree::binary(Aq, p(3.0), p(4.0));
        assert!((t.eval(&zero_state()) - 3.0 / 17f64.sqrt()).abs() < 1e-15);
        assert!((t.eval(&zero_state()) - 0.727607).abs() < 1e-6);
    }

    #[test]
    fn tanh_of_zero() {
        let t = ExpressionTree::unary(Tanh, p(0.0));
        assert_eq!(t.eval(&zero_state()), 0.0);
    }

    #[test]
    fn argument_order_is_preserved() {
        let t = ExpressionTree::binary(Div, p(1.0), p(4.0));
        assert_eq!(t.eval(&zero_state()), 0.25);
        let t = ExpressionTree::binary(
            Div,
            ExpressionTree::var(Variable::T),
            ExpressionTree::binary(Add, p(1.0), ExpressionTree::var(Variable::Ks)),
        );
        let s = [0.0, 0.0, 0.0, 0.0, 3.0, 8.0];
        assert_eq!(t.eval(&s), 2.0);
    }

    #[test]
    fn division_by_zero_is_not_masked() {
        let t = ExpressionTree::binary(Div, p(1.0), p(0.0));
        assert_eq!(t.eval(&zero_state()), f64::INFINITY);
        let t = ExpressionTree::binary(Div, p(0.0), p(0.0));
        assert!(t.eval(&zero_state()).is_nan());
    }

    #[test]
    fn depth_and_ranges() {
        // (add (square (var T)) (const 1))
        let t = ExpressionTree::binary(
            Add,
            ExpressionTree::unary(Square, ExpressionTree::var(Variable::T)),
            p(1.0),
        );
        assert_eq!(t.len(), 4);
        assert_eq!(t.depth(), 3);
        assert_eq!(t.subtree_range(1), 1..3);
        assert_eq!(t.subtree_range(3), 3..4);
        assert_eq!(t.depth_of(2), 3);
        assert_eq!(t.depth_of(3), 2);
    }

    #[test]
    fn malformed_prefix_is_rejected() {
        assert_eq!(
            ExpressionTree::from_prefix(vec![Node::Func(Add), Node::Param(1.0)]),
            Err(ExprError::Malformed)
        );
        assert_eq!(
            ExpressionTree::from_prefix(vec![Node::Param(1.0), Node::Param(1.0)]),
            Err(ExprError::Malformed)
        );
        assert!(ExpressionTree::from_prefix(vec![]).is_err());
    }

    #[test]
    fn params_without_parameter_nodes() {
        let t = ExpressionTree::unary(Exp, ExpressionTree::var(Variable::Ra));
        assert!(t.extract_params().is_empty());
        assert_eq!(t.inject_params(&[]).unwrap(), t);
    }

    #[test]
    fn inject_rejects_wrong_length() {
        let t = ExpressionTree::binary(Mul, p(2.0), p(3.0));
        assert_eq!(t.extract_params(), vec![2.0, 3.0]);
        assert_eq!(
            t.inject_params(&[1.0]),
            Err(ExprError::ParamLength {
                expected: 2,
                got: 1
            })
        );
        let u = t.inject_params(&[5.0, 6.0]).unwrap();
        assert_eq!(u.eval(&zero_state()), 30.0);
        assert!(u.same_shape(&t));
    }

    #[test]
    fn replace_subtree_splices() {
        let t = ExpressionTree::binary(Add, p(1.0), p(2.0));
        let u = t.replace_subtree(2, &ExpressionTree::unary(Exp, p(0.0)));
        assert_eq!(u.len(), 4);
        assert_eq!(u.eval(&zero_state()), 2.0);
        let root = t.replace_subtree(0, &p(9.0));
        assert_eq!(root, p(9.0));
    }
}
