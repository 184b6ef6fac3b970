//! Direct simulation of the averaged jump process, used to cross-check the
//! closed-form jump-path probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::environment::derive_seed;
use crate::markov::{Generator, JumpQuery};

const BLOCK: u64 = 4096;

/// Number of simulated paths (out of `n`) whose first `p` holding times and
/// targets satisfy `query`.
pub fn simulate_query(g: &Generator, query: &JumpQuery, n: u64, seed: u64) -> u64 {
    let m = g.m();
    let exit: Vec<f64> = (0..m).map(|i| g.exit_rate(i)).collect();
    let blocks = n.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, b));
            let count = BLOCK.min(n - b * BLOCK);
            let mut hits = 0;
            'sample: for _ in 0..count {
                let mut s = query.j0;
                for (w, &target) in query.deltas.iter().zip(&query.targets) {
                    let r = exit[s];
                    if r <= 0.0 {
                        continue 'sample;
                    }
                    // both uniforms are drawn every step so streams stay aligned
                    let u: f64 = rng.random();
                    let v: f64 = rng.random();
                    let hold = -(1.0 - u).ln() / r;
                    let mut acc = 0.0;
                    let mut next = m - 1;
                    for j in 0..m {
                        if j == s {
                            continue;
                        }
                        acc += g.rate(s, j) / r;
                        if v < acc {
                            next = j;
                            break;
                        }
                    }
                    if !w.contains(hold) || next != target {
                        continue 'sample;
                    }
                    s = next;
                }
                hits += 1;
            }
            hits
        })
        .sum()
}
