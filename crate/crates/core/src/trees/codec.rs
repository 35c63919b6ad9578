//! Text form of a tree: nested s-expressions,
//!
//! ```text
//! (split 3 0.51 (leaf 0.1 -0.2) (split 0 0.25 (leaf 1.0 2.0) (leaf 3.0 4.0)))
//! ```
//!
//! Floats are written with the shortest representation that round-trips, so
//! a parsed tree reproduces the original predictions bit for bit.

use std::fmt;

use super::{NodeKind, SplitRule, Tree};
use crate::error::{Error, Result};

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn write_node(tree: &Tree, idx: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match &tree.nodes()[idx].kind {
                NodeKind::Leaf(v) => {
                    write!(f, "(leaf")?;
                    for x in v {
                        write!(f, " {x:?}")?;
                    }
                    write!(f, ")")
                }
                NodeKind::Split { rule, left, right } => {
                    write!(f, "(split {} {:?} ", rule.variable, rule.cutpoint)?;
                    write_node(tree, *left, f)?;
                    write!(f, " ")?;
                    write_node(tree, *right, f)?;
                    write!(f, ")")
                }
            }
        }
        write_node(self, 0, f)
    }
}

struct Parser<'a> {
    tokens: Vec<&'a str>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let tokens = text
            .split(|c: char| c.is_whitespace())
            .flat_map(split_parens)
            .filter(|t| !t.is_empty())
            .collect();
        Parser { tokens, pos: 0 }
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self
            .tokens
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::TreeFormat("unexpected end of input".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).copied()
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got != want {
            return Err(Error::TreeFormat(format!("expected '{want}', found '{got}'")));
        }
        Ok(())
    }

    fn number<T: std::str::FromStr>(&mut self) -> Result<T> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| Error::TreeFormat(format!("bad number '{t}'")))
    }

    fn node(&mut self) -> Result<Tree> {
        self.expect("(")?;
        let tree = match self.next()? {
            "leaf" => {
                let mut v = Vec::new();
                while self.peek() != Some(")") {
                    v.push(self.number::<f64>()?);
                }
                if v.is_empty() {
                    return Err(Error::TreeFormat("leaf without values".into()));
                }
                Tree::stump_with(v)
            }
            "split" => {
                let variable = self.number::<usize>()?;
                let cutpoint = self.number::<f64>()?;
                let left = self.node()?;
                let right = self.node()?;
                Tree::join(SplitRule::new(variable, cutpoint), left, right)
                    .map_err(|e| Error::TreeFormat(e.to_string()))?
            }
            other => return Err(Error::TreeFormat(format!("unknown node '{other}'"))),
        };
        self.expect(")")?;
        Ok(tree)
    }
}

fn split_parens(word: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in word.char_indices() {
        if c == '(' || c == ')' {
            out.push(&word[start..i]);
            out.push(&word[i..i + 1]);
            start = i + 1;
        }
    }
    out.push(&word[start..]);
    out
}

impl std::str::FromStr for Tree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Parser::new(s);
        let tree = p.node()?;
        if p.peek().is_some() {
            return Err(Error::TreeFormat("trailing input after tree".into()));
        }
        Ok(tree)
    }
}
