//! Deterministic random number generation.
//!
//! The toolkit's artifacts (detectors, triggers, datasets) must be exactly
//! reproducible from a recorded seed, so the generator and every sampling
//! transform are pinned here and tagged by [`crate::RNG_ALGORITHM`]:
//! xoshiro256++ state updates, splitmix64 seed expansion, and the Marsaglia
//! polar method for Gaussians (both members of each accepted pair are
//! consumed, in order). Changing any of these transforms is a format break
//! and requires a new tag.

use crate::error::{Result, SealError};
use crate::tensor::Tensor;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator (xoshiro256++ core).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
    gauss_spare: Option<f64>,
}

impl Rng {
    /// Creates a generator from a seed. The four state words are expanded
    /// from the seed with splitmix64.
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ];
        Rng {
            seed,
            state,
            gauss_spare: None,
        }
    }

    /// The seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child generator for a numbered worker or
    /// stream. The child seed is a fixed hash of (seed, index), so
    /// parallel work can be split deterministically regardless of
    /// scheduling.
    pub fn derive(&self, index: u64) -> Rng {
        Rng::new(derive_seed(self.seed, index))
    }

    /// Next raw 64-bit output (xoshiro256++).
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be nonzero. Uses rejection to
    /// avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal via the Marsaglia polar method. Each accepted pair
    /// yields two variates; the second is cached and returned by the next
    /// call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.gauss_spare = Some(v * f);
                return u * f;
            }
        }
    }

    /// Tensor of i.i.d. standard normals.
    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.normal() as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data length agree by construction")
    }

    /// Tensor of i.i.d. uniforms in [lo, hi).
    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.uniform_range(lo, hi) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data length agree by construction")
    }

    /// Uniform sample from the unit sphere in `dim` dimensions: normalize
    /// a standard Gaussian vector (norm computed in f64 before the f32
    /// cast). Degenerate draws (norm below 1e-12) are rejected and
    /// redrawn.
    pub fn unit_sphere(&mut self, dim: usize) -> Result<Tensor> {
        if dim == 0 {
            return Err(SealError::InvalidArgument(
                "unit sphere dimension must be positive".into(),
            ));
        }
        loop {
            let raw: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            let data: Vec<f32> = raw.iter().map(|v| (v / norm) as f32).collect();
            if data.iter().any(|v| *v == 0.0) {
                // Keep every component sign-carrying so orthant
                // constraints below are well defined.
                continue;
            }
            return Tensor::new(vec![dim], data);
        }
    }

    /// Uniform sample from the intersection of the unit sphere with the
    /// orthant selected by `signs` (`true` = positive coordinate): sample
    /// the sphere, then flip each coordinate's sign to match.
    pub fn orthant_sphere(&mut self, signs: &[bool]) -> Result<Tensor> {
        let mut t = self.unit_sphere(signs.len())?;
        for (v, &positive) in t.data_mut().iter_mut().zip(signs.iter()) {
            let mag = v.abs();
            *v = if positive { mag } else { -mag };
        }
        Ok(t)
    }
}

/// Fixed (seed, index) -> child-seed hash used by [`Rng::derive`].
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut s = index ^ 0xA076_1D64_78BD_642F;
    let folded = splitmix64(&mut s);
    let mut s2 = seed ^ folded;
    splitmix64(&mut s2)
}
