//! ListOps-mini: nested prefix expressions over `MIN`, `MAX`, `MED` and
//! `SM` (sum mod 10) with single-digit operands. The label is the value of
//! the expression.
//!
//! Token ids: digits are `0..=9`, then `[MIN`, `[MAX`, `[MED`, `[SM`, `]`
//! and padding.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CflError, Result};

use super::{Dataset, Inputs};

pub const MIN: usize = 10;
pub const MAX: usize = 11;
pub const MED: usize = 12;
pub const SM: usize = 13;
pub const CLOSE: usize = 14;
pub const PAD: usize = 15;
pub const VOCAB: usize = 16;
pub const CLASSES: usize = 10;
pub const MAX_LEN_LIMIT: usize = 512;

const MAX_ARGS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Min,
    Max,
    Med,
    SumMod,
}

impl Op {
    const ALL: [Op; 4] = [Op::Min, Op::Max, Op::Med, Op::SumMod];

    fn token(self) -> usize {
        match self {
            Op::Min => MIN,
            Op::Max => MAX,
            Op::Med => MED,
            Op::SumMod => SM,
        }
    }

    fn from_token(t: usize) -> Option<Op> {
        Op::ALL.into_iter().find(|o| o.token() == t)
    }

    /// `MED` takes the lower median of an even-length list.
    pub fn apply(self, args: &[usize]) -> usize {
        match self {
            Op::Min => *args.iter().min().expect("nonempty"),
            Op::Max => *args.iter().max().expect("nonempty"),
            Op::Med => {
                let mut v = args.to_vec();
                v.sort_unstable();
                v[(v.len() - 1) / 2]
            }
            Op::SumMod => args.iter().sum::<usize>() % 10,
        }
    }
}

pub fn token_text(t: usize) -> &'static str {
    const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
    match t {
        0..=9 => DIGITS[t],
        MIN => "[MIN",
        MAX => "[MAX",
        MED => "[MED",
        SM => "[SM",
        CLOSE => "]",
        _ => "<pad>",
    }
}

/// Space-separated rendering, e.g. `[MAX 2 7 1 ]`.
pub fn to_text(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_text(t)).collect::<Vec<_>>().join(" ")
}

/// Accepts `]` attached to a preceding operand, as in `[MAX 2 7 1]`.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let closes = word.len() - word.trim_end_matches(']').len();
        let head = word.trim_end_matches(']');
        if !head.is_empty() {
            out.push(match head {
                "[MIN" => MIN,
                "[MAX" => MAX,
                "[MED" => MED,
                "[SM" => SM,
                d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => (d.as_bytes()[0] - b'0') as usize,
                other => return Err(CflError::Format(format!("unknown ListOps token {other:?}"))),
            });
        }
        out.extend(std::iter::repeat(CLOSE).take(closes));
    }
    Ok(out)
}

/// Stack evaluation of a token sequence (trailing padding allowed).
pub fn evaluate(tokens: &[usize]) -> Result<usize> {
    let mut stack: Vec<(Op, Vec<usize>)> = Vec::new();
    let mut result = None;
    let body = tokens.iter().copied().take_while(|&t| t != PAD);
    for t in body {
        if result.is_some() {
            return Err(CflError::Format("tokens after the closing bracket".into()));
        }
        match t {
            0..=9 => match stack.last_mut() {
                Some((_, args)) => args.push(t),
                None if tokens.len() == 1 => result = Some(t),
                None => return Err(CflError::Format("operand outside any list".into())),
            },
            CLOSE => {
                let (op, args) = stack.pop().ok_or_else(|| CflError::Format("unbalanced ]".into()))?;
                if args.is_empty() {
                    return Err(CflError::Format("empty list".into()));
                }
                let v = op.apply(&args);
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(v),
                    None => result = Some(v),
                }
            }
            _ => match Op::from_token(t) {
                Some(op) => stack.push((op, Vec::new())),
                None => return Err(CflError::Format(format!("token {t} not in vocabulary"))),
            },
        }
    }
    if !stack.is_empty() {
        return Err(CflError::Format("unclosed list".into()));
    }
    result.ok_or_else(|| CflError::Format("empty expression".into()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    max_depth: usize,
}

impl Gen<'_> {
    /// Appends one expression and returns its value.
    fn expr(&mut self, depth: usize, out: &mut Vec<usize>) -> usize {
        let leaf = depth > 0 && (depth >= self.max_depth || self.rng.gen_bool(0.6));
        if leaf {
            let d = self.rng.gen_range(0..10);
            out.push(d);
            return d;
        }
        let op = Op::ALL[self.rng.gen_range(0..4)];
        out.push(op.token());
        let n = self.rng.gen_range(2..=MAX_ARGS);
        let args: Vec<usize> = (0..n).map(|_| self.expr(depth + 1, out)).collect();
        out.push(CLOSE);
        op.apply(&args)
    }
}

/// `n` expressions of nesting depth at most `max_depth` and at most
/// `max_len` tokens.
pub fn generate(seed: u64, n: usize, max_depth: usize, max_len: usize) -> Result<Vec<Sample>> {
    if max_depth == 0 {
        return Err(CflError::Config("max_depth must be at least 1".into()));
    }
    if !(4..=MAX_LEN_LIMIT).contains(&max_len) {
        return Err(CflError::Config(format!("max_len must lie in 4..={MAX_LEN_LIMIT}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Gen {
        rng: &mut rng,
        max_depth,
    };
    let mut out = Vec::with_capacity(n);
    let mut tokens = Vec::new();
    while out.len() < n {
        tokens.clear();
        let label = g.expr(0, &mut tokens);
        if tokens.len() <= max_len {
            out.push(Sample {
                tokens: tokens.clone(),
                label,
            });
        }
    }
    Ok(out)
}

pub fn gen_listops_mini(seed: u64, n: usize, max_depth: usize, max_len: usize) -> Result<Dataset> {
    let samples = generate(seed, n, max_depth, max_len)?;
    let labels = samples.iter().map(|s| s.label).collect();
    Dataset::new(Inputs::Tokens(samples.into_iter().map(|s| s.tokens).collect()), labels, CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(evaluate(&tokenize("[MAX 2 7 1]").unwrap()).unwrap(), 7);
        assert_eq!(evaluate(&tokenize("[MIN [MAX 3 9] 4]").unwrap()).unwrap(), 4);
        assert_eq!(evaluate(&tokenize("[MED 4 1 3 2]").unwrap()).unwrap(), 2);
        assert_eq!(evaluate(&tokenize("[SM 9 8 7]").unwrap()).unwrap(), 4);
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        assert!(evaluate(&tokenize("[MAX 2 7").unwrap()).is_err());
        assert!(evaluate(&tokenize("[MAX]").unwrap()).is_err());
        assert!(evaluate(&[CLOSE]).is_err());
        assert!(tokenize("[FOO 1]").is_err());
    }

    #[test]
    fn bounds_are_checked() {
        assert!(generate(0, 1, 0, 10).is_err());
        assert!(generate(0, 1, 2, 3).is_err());
        assert!(generate(0, 1, 2, 513).is_err());
        for s in generate(1, 200, 3, 40).unwrap() {
            assert!(s.tokens.len() <= 40);
        }
    }
}
