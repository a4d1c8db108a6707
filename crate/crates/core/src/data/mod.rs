//! Datasets: generated ListOps-mini expressions, the mode-switch context
//! task, Gaussian blobs, and IDX image files.

pub mod context;
pub mod idx;
pub mod listops;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CflError, Result};
use crate::model::Input;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `n × d_x`, one example per row.
    Dense(Tensor<f64>),
    Tokens(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// A slice of a dataset ready to feed a model.
#[derive(Clone, Debug)]
pub enum Batch {
    Dense { x: Tensor<f64>, labels: Vec<usize> },
    Tokens { seqs: Vec<Vec<usize>>, labels: Vec<usize> },
}

impl Batch {
    pub fn labels(&self) -> &[usize] {
        match self {
            Batch::Dense { labels, .. } | Batch::Tokens { labels, .. } => labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }

    /// Model inputs: one for a dense batch, one per sequence otherwise.
    pub fn inputs(&self) -> Vec<Input<'_>> {
        match self {
            Batch::Dense { x, .. } => vec![Input::Dense(x)],
            Batch::Tokens { seqs, .. } => seqs.iter().map(|s| Input::Tokens(s)).collect(),
        }
    }
}

impl Dataset {
    pub fn new(inputs: Inputs, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = match &inputs {
            Inputs::Dense(x) => x.dims2()?.0,
            Inputs::Tokens(s) => s.len(),
        };
        if n != labels.len() {
            return Err(CflError::Length(format!("{n} inputs, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CflError::Format(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(match &self.inputs {
            Inputs::Dense(x) => {
                let (_, c) = x.dims2()?;
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
                }
                Batch::Dense {
                    x: Tensor::matrix(idx.len(), c, data)?,
                    labels,
                }
            }
            Inputs::Tokens(s) => Batch::Tokens {
                seqs: idx.iter().map(|&i| s[i].clone()).collect(),
                labels,
            },
        })
    }

    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(CflError::Config(format!("split point {n} outside 1..{}", self.len())));
        }
        let part = |r: std::ops::Range<usize>| -> Result<Dataset> {
            let idx: Vec<usize> = r.collect();
            Ok(match self.batch(&idx)? {
                Batch::Dense { x, labels } => Dataset::new(Inputs::Dense(x), labels, self.classes)?,
                Batch::Tokens { seqs, labels } => Dataset::new(Inputs::Tokens(seqs), labels, self.classes)?,
            })
        };
        Ok((part(0..n)?, part(n..self.len())?))
    }

    /// One-hot encodes fixed-length token sequences into dense rows of
    /// width `len · vocab`.
    pub fn one_hot(&self, vocab: usize) -> Result<Dataset> {
        let Inputs::Tokens(seqs) = &self.inputs else {
            return Ok(self.clone());
        };
        let len = seqs.first().map_or(0, Vec::len);
        if len == 0 || seqs.iter().any(|s| s.len() != len) {
            return Err(CflError::Shape("one-hot encoding needs equal nonzero lengths".into()));
        }
        let mut data = vec![0.0; seqs.len() * len * vocab];
        for (i, s) in seqs.iter().enumerate() {
            for (j, &t) in s.iter().enumerate() {
                if t >= vocab {
                    return Err(CflError::Shape(format!("token {t} outside vocabulary of {vocab}")));
                }
                data[(i * len + j) * vocab + t] = 1.0;
            }
        }
        Dataset::new(
            Inputs::Dense(Tensor::matrix(seqs.len(), len * vocab, data)?),
            self.labels.clone(),
            self.classes,
        )
    }
}

/// Shuffled minibatch index lists.
pub fn minibatches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Two Gaussian blobs centred at `±sep/2` along every axis; with
/// `sep` several standard deviations wide they are linearly separable.
pub fn gen_blobs(seed: u64, n: usize, d: usize, sep: f64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(CflError::Config("blobs need n > 0 and d > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..2usize);
        let centre = if label == 0 { -sep / 2.0 } else { sep / 2.0 };
        for _ in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(centre + 0.5 * e);
        }
        labels.push(label);
    }
    Dataset::new(Inputs::Dense(Tensor::matrix(n, d, data)?), labels, 2)
}
