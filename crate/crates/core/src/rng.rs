//! Park–Miller "minimal standard" generator: `seed' = 16807 * seed mod (2^31 - 1)`.

use thiserror::Error;

use crate::messages::EntityId;

pub const MODULUS: u64 = 2_147_483_647;
pub const MULTIPLIER: u64 = 16_807;

/// Draws reserved for each entity stream before it would run into the next
/// entity's stream. Keeps streams disjoint for up to `(2^31 - 2) / STRIDE`
/// entities.
pub const ENTITY_STREAM_STRIDE: u64 = 1 << 19;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RngError {
    #[error("seed {0} outside [1, 2^31 - 2]")]
    InvalidSeed(u64),
    #[error("exponential mean must be positive and finite, got {0}")]
    InvalidMean(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState(u32);

impl RngState {
    pub fn new(seed: u64) -> Result<Self, RngError> {
        if seed == 0 || seed >= MODULUS {
            return Err(RngError::InvalidSeed(seed));
        }
        Ok(RngState(seed as u32))
    }

    pub fn seed(self) -> u32 {
        self.0
    }

    /// Advances the state and returns it as the variate.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> u32 {
        self.0 = ((self.0 as u64 * MULTIPLIER) % MODULUS) as u32;
        self.0
    }

    /// Uniform in the open interval (0, 1).
    pub fn next_uniform01(&mut self) -> f64 {
        self.next() as f64 / MODULUS as f64
    }

    /// Exponential variate with the given mean, by inverse transform.
    pub fn next_exponential(&mut self, mean: f64) -> Result<f64, RngError> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(RngError::InvalidMean(mean));
        }
        Ok(-mean * self.next_uniform01().ln())
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn next_below(&mut self, n: u32) -> u32 {
        debug_assert!(n > 0);
        // u < 1, so the product stays below n
        ((self.next_uniform01() * n as f64) as u32).min(n - 1)
    }

    /// The state `steps` draws ahead, in O(log steps).
    pub fn jump(self, steps: u64) -> Self {
        let factor = pow_mod(MULTIPLIER, steps, MODULUS);
        RngState(((self.0 as u64 * factor) % MODULUS) as u32)
    }
}

fn pow_mod(mut base: u64, mut exp: u64, modulus: u64) -> u64 {
    let mut acc = 1u64;
    base %= modulus;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % modulus;
        }
        base = base * base % modulus;
        exp >>= 1;
    }
    acc
}

/// Independent stream for one entity: the base state advanced
/// `1 + entity * ENTITY_STREAM_STRIDE` draws. Entity 0 starts one draw after
/// the base. The result does not depend on the number of LPs.
pub fn seed_for_entity(base: RngState, entity: EntityId) -> RngState {
    base.jump(1 + entity.0 as u64 * ENTITY_STREAM_STRIDE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use std::collections::HashSet;

    #[test]
    fn first_steps() {
        let mut r = RngState::new(1).unwrap();
        assert_eq!(r.next(), 16_807);
        assert_eq!(r.next(), 282_475_249);
    }

    #[test]
    fn minimal_standard_check_value() {
        // independent route: 16807^10000 mod (2^31 - 1) in arbitrary precision
        let oracle =
            BigUint::from(MULTIPLIER).modpow(&BigUint::from(10_000u32), &BigUint::from(MODULUS));
        assert_eq!(oracle, BigUint::from(1_043_618_065u32));

        let mut r = RngState::new(1).unwrap();
        for _ in 0..10_000 {
            r.next();
        }
        assert_eq!(r.seed(), 1_043_618_065);
        assert_eq!(RngState::new(1).unwrap().jump(10_000).seed(), 1_043_618_065);
    }

    #[test]
    fn rejects_degenerate_seeds() {
        assert!(RngState::new(0).is_err());
        assert!(RngState::new(MODULUS).is_err());
        assert!(RngState::new(MODULUS - 1).is_ok());
    }

    #[test]
    fn uniform_stays_open() {
        let mut low = RngState::new(1).unwrap();
        assert_eq!(low.next_uniform01(), 16_807.0 / 2_147_483_647.0);
        let mut r = RngState::new(987_654_321).unwrap();
        for _ in 0..100_000 {
            let u = r.next_uniform01();
            assert!(u > 0.0 && u < 1.0);
        }
        // largest possible state gives u just below 1
        let top = (MODULUS - 1) as f64 / MODULUS as f64;
        assert!(top < 1.0);
    }

    #[test]
    fn exponential_inverse_transform() {
        let e = 1.0f64.exp();
        assert!((-5.0 * (1.0 / e).ln() - 5.0).abs() < 1e-12);
        let mut r = RngState::new(1).unwrap();
        let u = 16_807.0 / 2_147_483_647.0;
        let x = r.next_exponential(5.0).unwrap();
        assert!((x - (-5.0 * f64::ln(u))).abs() < 1e-12);
        assert!(r.next_exponential(0.0).is_err());
        assert!(r.next_exponential(-1.0).is_err());
        assert!(r.next_exponential(f64::NAN).is_err());
    }

    #[test]
    fn exponential_sample_mean() {
        let mut r = RngState::new(1).unwrap();
        let n = 1_000_000;
        let sum: f64 = (0..n).map(|_| r.next_exponential(5.0).unwrap()).sum();
        let mean = sum / n as f64;
        assert!((mean - 5.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn entity_seeds() {
        let base = RngState::new(12_345).unwrap();
        let mut one_step = base;
        one_step.next();
        assert_eq!(seed_for_entity(base, EntityId(0)), one_step);
        assert_eq!(
            seed_for_entity(base, EntityId(17)),
            seed_for_entity(base, EntityId(17))
        );
        let distinct: HashSet<_> = (0..840)
            .map(|e| seed_for_entity(base, EntityId(e)))
            .collect();
        assert_eq!(distinct.len(), 840);

        // jump agrees with stepping
        let mut stepped = base;
        for _ in 0..(1 + ENTITY_STREAM_STRIDE) {
            stepped.next();
        }
        assert_eq!(seed_for_entity(base, EntityId(1)), stepped);
    }

    #[test]
    fn no_repeat_in_first_million() {
        let mut r = RngState::new(1).unwrap();
        let mut seen = HashSet::with_capacity(1_000_000);
        for _ in 0..1_000_000 {
            assert!(seen.insert(r.next()));
        }
    }
}
