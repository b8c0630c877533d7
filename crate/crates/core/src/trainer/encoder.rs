//! Hashed bag-of-tokens features and the linear projection over them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{fnv1a64_str, salted};

/// Weight of the token at `pos` in its sequence. Earlier tokens weigh more,
/// so reordering changes the features whenever the moved tokens hash apart.
pub fn position_weight(pos: usize) -> f64 {
    1.0 / (1.0 + 0.1 * pos as f64)
}

pub fn feature_bucket(token: &str, dim: usize) -> usize {
    (fnv1a64_str(token) % dim as u64) as usize
}

/// Sparse feature vector, sorted by index with no duplicate indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Features(pub Vec<(usize, f64)>);

pub fn featurize<S: AsRef<str>>(tokens: &[S], dim: usize) -> Features {
    let mut dense: Vec<(usize, f64)> = tokens
        .iter()
        .enumerate()
        .map(|(pos, t)| (feature_bucket(t.as_ref(), dim), position_weight(pos)))
        .collect();
    dense.sort_by_key(|&(i, _)| i);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(dense.len());
    for (i, w) in dense {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += w,
            _ => out.push((i, w)),
        }
    }
    Features(out)
}

/// Row-major `output_dim x input_dim` projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weights: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        EncoderParams {
            input_dim,
            output_dim,
            weights: vec![0.0; input_dim * output_dim],
        }
    }

    /// Entries uniform in `[-scale, scale]`.
    pub fn random(input_dim: usize, output_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..input_dim * output_dim)
            .map(|_| rng.gen_range(-1.0..=1.0) * scale)
            .collect();
        EncoderParams {
            input_dim,
            output_dim,
            weights,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.len() != self.input_dim * self.output_dim {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim * self.output_dim,
                actual: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::ConfigInvalid("encoder weights must be finite".into()));
        }
        Ok(())
    }

    pub fn project(&self, x: &Features) -> Vec<f64> {
        let mut v = vec![0.0; self.output_dim];
        for (r, out) in v.iter_mut().enumerate() {
            let row = &self.weights[r * self.input_dim..(r + 1) * self.input_dim];
            *out = x.0.iter().map(|&(i, w)| row[i] * w).sum();
        }
        v
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        self.project(&featurize(tokens, self.input_dim))
    }

    /// Adds `dv x^T` into a gradient laid out like `weights`.
    pub fn accumulate(&self, grad: &mut [f64], dv: &[f64], x: &Features) {
        for (r, g) in dv.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &mut grad[r * self.input_dim..(r + 1) * self.input_dim];
            for &(i, w) in &x.0 {
                row[i] += g * w;
            }
        }
    }
}

/// Frozen stand-in for a passage encoder: a unit vector derived from the
/// passage id alone.
pub fn passage_vector(passage_id: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(salted("passage", passage_id));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
