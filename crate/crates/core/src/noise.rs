//! Seeded noise partitioned by `(purpose, step, row)`.
//!
//! Each `(purpose, step)` pair selects its own ChaCha stream; inside a stream
//! every row key owns a fixed, non-overlapping window of words. Draws for a
//! row therefore do not depend on which other rows share the batch or on the
//! order they are requested in.

use rand::distr::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    BetaQuery = 1,
    BetaAnswer = 2,
    ConcreteQuery = 3,
    ConcreteAnswer = 4,
    GaussianQuery = 5,
    GaussianAnswer = 6,
    Shuffle = 7,
    Init = 8,
    Dropout = 9,
    PriorSample = 10,
    Communities = 11,
}

/// 32-bit words consumed by one uniform.
const UNIFORM_WORDS: u128 = 2;
/// Words per normal: two uniforms through Box-Muller.
const NORMAL_WORDS: u128 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator for `(purpose, step)`, positioned at its start.
    pub fn rng(&self, purpose: Purpose, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 56) | (step & ((1 << 56) - 1)));
        rng
    }

    fn row_rng(&self, purpose: Purpose, step: u64, row: usize, width: usize, words: u128) -> ChaCha8Rng {
        let mut rng = self.rng(purpose, step);
        rng.set_word_pos(row as u128 * width as u128 * words);
        rng
    }

    /// Open-interval uniforms, one row of `width` per key.
    pub fn uniforms(&self, purpose: Purpose, step: u64, rows: &[usize], width: usize) -> Matrix {
        let mut out = Matrix::zeros((rows.len(), width));
        for (i, &row) in rows.iter().enumerate() {
            let mut rng = self.row_rng(purpose, step, row, width, UNIFORM_WORDS);
            for x in out.row_mut(i).iter_mut() {
                *x = Open01.sample(&mut rng);
            }
        }
        out
    }

    /// Standard normals, one row of `width` per key.
    pub fn normals(&self, purpose: Purpose, step: u64, rows: &[usize], width: usize) -> Matrix {
        let mut out = Matrix::zeros((rows.len(), width));
        for (i, &row) in rows.iter().enumerate() {
            let mut rng = self.row_rng(purpose, step, row, width, NORMAL_WORDS);
            for x in out.row_mut(i).iter_mut() {
                *x = box_muller(&mut rng);
            }
        }
        out
    }
}

/// One standard normal from two open uniforms.
pub fn box_muller(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = Open01.sample(rng);
    let u2: f64 = Open01.sample(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
