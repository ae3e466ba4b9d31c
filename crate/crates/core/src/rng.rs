//! Per-particle random streams.
//!
//! Every particle (or rollout) owns a ChaCha8 stream selected by its index,
//! so results do not depend on how work is scheduled across threads.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug)]
pub struct ParticleStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl ParticleStreams {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            rngs: (0..count as u64).map(|i| stream(seed, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rngs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rngs.is_empty()
    }

    /// `rows x N` standard normals; column `i` comes from stream `i`.
    pub fn standard_normals(&mut self, rows: usize) -> DMatrix<f64> {
        let n = self.rngs.len();
        let mut out = DMatrix::zeros(rows, n);
        if rows == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(rows)
            .zip(self.rngs.par_iter_mut())
            .for_each(|(col, rng)| {
                for v in col.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            });
        out
    }
}
