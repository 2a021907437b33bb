//! Sobol points for per-ray quasi-Monte-Carlo draws.
//!
//! Each ray scrambles the shared table with a hash-based nested uniform
//! (Owen-style) permutation per dimension, which keeps the one-point-per-
//! stratum structure while randomizing positions inside each stratum.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sobol::params::JoeKuoD6;
use sobol::Sobol;

use crate::error::{Error, Result};

const TWO_POW_32: f64 = 4_294_967_296.0;

/// First `count` points of a `dims`-dimensional Sobol sequence, stored as
/// raw 32-bit integers. The leading all-zero point is kept: scrambling moves
/// it off the corner, and dropping it would break the stratification of the
/// first power-of-two block.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolTable {
    count: usize,
    dims: usize,
    raw: Vec<u32>,
}

impl SobolTable {
    pub fn new(count: usize, dims: usize) -> Result<Self> {
        if count < 2 || dims == 0 {
            return Err(Error::invalid(format!(
                "Sobol table needs at least 2 points and 1 dimension, got {count}x{dims}"
            )));
        }
        let params = if dims <= 100 {
            JoeKuoD6::minimal()
        } else if dims <= 1000 {
            JoeKuoD6::standard()
        } else {
            return Err(Error::invalid(format!("{dims} Sobol dimensions exceed 1000")));
        };
        let raw: Vec<u32> = Sobol::<u32>::new(dims, &params)
            .take(count)
            .flatten()
            .collect();
        Ok(Self { count, dims, raw })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn raw(&self, point: usize, dim: usize) -> u32 {
        self.raw[point * self.dims + dim]
    }

    /// Coordinate in (0, 1) after scrambling `dim` with its seed.
    pub fn scrambled(&self, point: usize, dim: usize, seeds: &[u32]) -> f64 {
        (nested_uniform_scramble(self.raw(point, dim), seeds[dim]) as f64 + 0.5) / TWO_POW_32
    }

    /// Per-dimension scramble seeds for one ray.
    pub fn scramble_seeds(&self, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dims).map(|_| rng.next_u32()).collect()
    }
}

/// Laine-Karras style hash; only flips a bit under the influence of lower
/// bits, so applied to bit-reversed input it permutes nested dyadic
/// intervals.
fn lk_hash(mut x: u32, seed: u32) -> u32 {
    x = x.wrapping_add(seed);
    x ^= x.wrapping_mul(0x6c50_b47c);
    x ^= x.wrapping_mul(0xb82f_1e52);
    x ^= x.wrapping_mul(0xc7af_e638);
    x ^= x.wrapping_mul(0x8d22_f6e6);
    x
}

pub fn nested_uniform_scramble(x: u32, seed: u32) -> u32 {
    lk_hash(x.reverse_bits(), seed).reverse_bits()
}
