//! Named parameter storage.
//!
//! Parameters always live in double precision. A [`crate::model::Session`]
//! binds them into a graph of whatever scalar type it runs in.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Projector,
    Adapter,
}

/// Parameters with special freezing rules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    #[default]
    Regular,
    /// Frozen orthonormal basis of the low-rank projector.
    ProjectorBasis,
    /// Frozen base matrix of the low-rank merged adapter.
    MergedBase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor<f64>,
    pub group: ParamGroup,
    pub role: ParamRole,
}

impl ParamEntry {
    /// Whether the optimizer may touch this tensor by default.
    pub fn trainable(&self) -> bool {
        self.role == ParamRole::Regular
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f64>, group: ParamGroup) -> ParamId {
        self.add_with_role(name, value, group, ParamRole::Regular)
    }

    pub fn add_with_role(
        &mut self,
        name: impl Into<String>,
        value: Tensor<f64>,
        group: ParamGroup,
        role: ParamRole,
    ) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            group,
            role,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Scalar count of a group; `trainable_only` skips frozen roles.
    pub fn count(&self, group: ParamGroup, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group && (!trainable_only || e.trainable()))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Seeded initializer. Each model component draws from its own stream so
/// that, e.g., a baseline and a feedback model built from the same seed
/// share a bit-identical backbone.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                v * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape checked by caller")
    }

    /// Glorot-uniform for an `(in × out)` weight.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-limit..limit))
            .collect();
        Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
    }

    /// `rows × cols` matrix (rows ≥ cols) with orthonormal columns:
    /// Gram–Schmidt on a Gaussian draw.
    pub fn orthonormal_columns(&mut self, rows: usize, cols: usize) -> Tensor<f64> {
        assert!(cols <= rows, "need rows >= cols for orthonormal columns");
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
        while columns.len() < cols {
            let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut self.rng)).collect();
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for q in &columns {
                    let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                columns.push(v);
            }
        }
        let mut data = vec![0.0; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Tensor::matrix(rows, cols, data).expect("positive dims")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_columns_are_orthonormal() {
        let mut init = Init::new(7, 0);
        let a = init.orthonormal_columns(10, 4);
        let gram = a.matmul_tn(&a).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a = Init::new(3, 0).normal(&[5], 1.0);
        let b = Init::new(3, 0).normal(&[5], 1.0);
        let c = Init::new(3, 1).normal(&[5], 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
