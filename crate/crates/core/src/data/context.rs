//! Mode-switch task: a leading mode token decides how the payload is
//! aggregated. Mode `A` asks for the maximum, mode `B` for the minimum, so the
//! label depends on a global cue as well as on the payload.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CflError, Result};

use super::{Dataset, Inputs};

/// Payload values are `0..VALUES`; also the number of classes.
pub const VALUES: usize = 9;
pub const MODE_A: usize = 9;
pub const MODE_B: usize = 10;
pub const VOCAB: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    A,
    B,
}

impl ContextMode {
    pub fn token(self) -> usize {
        match self {
            ContextMode::A => MODE_A,
            ContextMode::B => MODE_B,
        }
    }
}

pub fn rule(mode: ContextMode, payload: &[usize]) -> usize {
    match mode {
        ContextMode::A => *payload.iter().max().expect("nonempty payload"),
        ContextMode::B => *payload.iter().min().expect("nonempty payload"),
    }
}

/// Labels a full sequence (mode token then payload).
pub fn label(seq: &[usize]) -> Result<usize> {
    let (&mode, payload) = seq
        .split_first()
        .ok_or_else(|| CflError::Format("empty sequence".into()))?;
    let mode = match mode {
        MODE_A => ContextMode::A,
        MODE_B => ContextMode::B,
        t => return Err(CflError::Format(format!("token {t} is not a mode token"))),
    };
    if payload.is_empty() || payload.iter().any(|&v| v >= VALUES) {
        return Err(CflError::Format("payload must be nonempty values below 9".into()));
    }
    Ok(rule(mode, payload))
}

/// `n` sequences of `len` tokens.
pub fn gen_context_task(seed: u64, n: usize, len: usize) -> Result<Dataset> {
    if len < 4 {
        return Err(CflError::Config("context task needs len >= 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mode = if rng.gen_bool(0.5) { ContextMode::A } else { ContextMode::B };
        let mut seq = Vec::with_capacity(len);
        seq.push(mode.token());
        seq.extend((1..len).map(|_| rng.gen_range(0..VALUES)));
        labels.push(rule(mode, &seq[1..]));
        seqs.push(seq);
    }
    Dataset::new(Inputs::Tokens(seqs), labels, VALUES)
}
