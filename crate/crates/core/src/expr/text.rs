//! Text renderings of trees: a human-readable infix form for reports and an
//! s-expression prefix form used by model files.

use thiserror::Error;

use super::{ExpressionTree, Function, Node, Variable};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token `{token}` at token {position}")]
    UnexpectedToken { token: String, position: usize },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("invalid number `{0}`")]
    BadNumber(String),
    #[error("trailing input after expression: `{0}`")]
    TrailingInput(String),
}

/// Shortest text that parses back to exactly `value`; integral values drop
/// the trailing `.0`.
pub fn format_number(value: f64) -> String {
    let s = format!("{value:?}");
    match s.strip_suffix(".0") {
        Some(stripped) => stripped.to_string(),
        None => s,
    }
}

pub fn format_infix(tree: &ExpressionTree) -> String {
    let mut out = String::new();
    infix(tree.nodes(), &mut 0, &mut out);
    out
}

fn infix(nodes: &[Node], pos: &mut usize, out: &mut String) {
    let node = nodes[*pos];
    *pos += 1;
    match node {
        Node::Var(v) => out.push_str(v.name()),
        Node::Param(c) => out.push_str(&format_number(c)),
        Node::Func(f) => match f {
            Function::Add | Function::Mul | Function::Div => {
                let op = match f {
                    Function::Add => " + ",
                    Function::Mul => " * ",
                    _ => " / ",
                };
                out.push('(');
                infix(nodes, pos, out);
                out.push_str(op);
                infix(nodes, pos, out);
                out.push(')');
            }
            Function::Square => {
                let wrap = matches!(nodes[*pos], Node::Param(c) if c.is_sign_negative());
                if wrap {
                    out.push('(');
                }
                infix(nodes, pos, out);
                if wrap {
                    out.push(')');
                }
                out.push_str("^2");
            }
            Function::Exp | Function::Tanh => {
                out.push_str(if f == Function::Exp { "exp(" } else { "tanh(" });
                infix(nodes, pos, out);
                out.push(')');
            }
            Function::Aq => {
                out.push_str("AQ(");
                infix(nodes, pos, out);
                out.push_str(", ");
                infix(nodes, pos, out);
                out.push(')');
            }
        },
    }
}

pub fn format_prefix(tree: &ExpressionTree) -> String {
    let mut out = String::new();
    prefix(tree.nodes(), &mut 0, &mut out);
    out
}

fn prefix(nodes: &[Node], pos: &mut usize, out: &mut String) {
    let node = nodes[*pos];
    *pos += 1;
    match node {
        Node::Var(v) => {
            out.push_str("(var ");
            out.push_str(v.name());
            out.push(')');
        }
        Node::Param(c) => {
            out.push_str("(const ");
            out.push_str(&format_number(c));
            out.push(')');
        }
        Node::Func(f) => {
            out.push('(');
            out.push_str(f.keyword());
            for _ in 0..f.arity() {
                out.push(' ');
                prefix(nodes, pos, out);
            }
            out.push(')');
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(Token::Atom(&text[s..i]));
            }
            match ch {
                '(' => tokens.push(Token::Open),
                ')' => tokens.push(Token::Close),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(Token::Atom(&text[s..]));
    }
    tokens
}

/// Parses the s-expression form written by [`format_prefix`].
pub fn parse_prefix(text: &str) -> Result<ExpressionTree, ParseError> {
    let tokens = tokenize(text);
    let mut pos = 0;
    let mut nodes = Vec::new();
    parse_node(&tokens, &mut pos, &mut nodes)?;
    if pos < tokens.len() {
        let rest: Vec<String> = tokens[pos..]
            .iter()
            .map(|t| match t {
                Token::Open => "(".to_string(),
                Token::Close => ")".to_string(),
                Token::Atom(a) => a.to_string(),
            })
            .collect();
        return Err(ParseError::TrailingInput(rest.join(" ")));
    }
    Ok(ExpressionTree { nodes })
}

fn unexpected(tokens: &[Token<'_>], position: usize) -> ParseError {
    match tokens.get(position) {
        None => ParseError::UnexpectedEnd,
        Some(t) => ParseError::UnexpectedToken {
            token: match t {
                Token::Open => "(".into(),
                Token::Close => ")".into(),
                Token::Atom(a) => a.to_string(),
            },
            position,
        },
    }
}

fn expect_atom<'a>(tokens: &[Token<'a>], pos: &mut usize) -> Result<&'a str, ParseError> {
    match tokens.get(*pos) {
        Some(Token::Atom(a)) => {
            *pos += 1;
            Ok(a)
        }
        _ => Err(unexpected(tokens, *pos)),
    }
}

fn expect_close(tokens: &[Token<'_>], pos: &mut usize) -> Result<(), ParseError> {
    match tokens.get(*pos) {
        Some(Token::Close) => {
            *pos += 1;
            Ok(())
        }
        _ => Err(unexpected(tokens, *pos)),
    }
}

fn parse_node(
    tokens: &[Token<'_>],
    pos: &mut usize,
    out: &mut Vec<Node>,
) -> Result<(), ParseError> {
    match tokens.get(*pos) {
        Some(Token::Open) => *pos += 1,
        _ => return Err(unexpected(tokens, *pos)),
    }
    let head = expect_atom(tokens, pos)?;
    match head {
        "var" => {
            let name = expect_atom(tokens, pos)?;
            let v = Variable::from_name(name)
                .ok_or_else(|| ParseError::UnknownVariable(name.to_string()))?;
            out.push(Node::Var(v));
        }
        "const" => {
            let text = expect_atom(tokens, pos)?;
            let value: f64 = text
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| ParseError::BadNumber(text.to_string()))?;
            out.push(Node::Param(value));
        }
        word => {
            let f = Function::from_keyword(word)
                .ok_or_else(|| ParseError::UnknownFunction(word.to_string()))?;
            out.push(Node::Func(f));
            for _ in 0..f.arity() {
                parse_node(tokens, pos, out)?;
            }
        }
    }
    expect_close(tokens, pos)
}
