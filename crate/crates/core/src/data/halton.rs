//! Low-discrepancy unit draws for augmentation parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The first `n` primes.
pub fn primes(n: usize) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(n);
    let mut c = 2u32;
    while out.len() < n {
        if out.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Radical inverse of `index` in `base`, with digits mapped through `perm`
/// (identity when `None`). `perm[0]` must be 0 so the expansion terminates.
pub fn radical_inverse(index: u64, base: u32, perm: Option<&[u32]>) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut i = index;
    let mut f = inv;
    let mut v = 0.0;
    while i > 0 {
        let d = (i % b) as usize;
        let d = perm.map_or(d as u32, |p| p[d]);
        v += d as f64 * f;
        f *= inv;
        i /= b;
    }
    v.min(1.0 - f64::EPSILON / 2.0)
}

/// Halton sequence with one prime base per dimension and optional seeded
/// digit scrambling.
#[derive(Clone, Debug)]
pub struct Halton {
    bases: Vec<u32>,
    perms: Option<Vec<Vec<u32>>>,
}

impl Halton {
    pub fn new(dims: usize) -> Self {
        Halton {
            bases: primes(dims),
            perms: None,
        }
    }

    /// Each dimension gets a random permutation of its nonzero digits.
    pub fn scrambled(dims: usize, seed: u64) -> Self {
        let bases = primes(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms = bases
            .iter()
            .map(|&b| {
                let mut p: Vec<u32> = (1..b).collect();
                p.shuffle(&mut rng);
                p.insert(0, 0);
                p
            })
            .collect();
        Halton {
            bases,
            perms: Some(perms),
        }
    }

    pub fn dims(&self) -> usize {
        self.bases.len()
    }

    pub fn value(&self, index: u64, dim: usize) -> Result<f64> {
        let base = *self
            .bases
            .get(dim)
            .ok_or_else(|| Error::invalid("halton", format!("dimension {dim} out of range (have {})", self.dims())))?;
        Ok(radical_inverse(
            index,
            base,
            self.perms.as_ref().map(|p| p[dim].as_slice()),
        ))
    }
}

/// Where augmentation parameters come from. Every variant is a pure
/// function of `(index, dim)`, so dimensions never shift each other and
/// samples can be processed in any order.
#[derive(Clone, Debug)]
pub enum UnitSource {
    Halton(Halton),
    /// Seeded PRNG stream per index.
    Prng {
        seed: u64,
        dims: usize,
    },
    /// The same value in every dimension.
    Constant(f64),
}

impl UnitSource {
    pub fn value(&self, index: u64, dim: usize) -> Result<f64> {
        match self {
            UnitSource::Halton(h) => h.value(index, dim),
            UnitSource::Prng { seed, dims } => {
                if dim >= *dims {
                    return Err(Error::invalid(
                        "prng source",
                        format!("dimension {dim} out of range (have {dims})"),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(index);
                rng.set_word_pos(2 * dim as u128);
                Ok(rng.random::<f64>())
            }
            UnitSource::Constant(v) => Ok(*v),
        }
    }
}

/// A [`UnitSource`] plus an explicit index counter.
#[derive(Clone, Debug)]
pub struct QuasiRandomSampler {
    source: UnitSource,
    index: u64,
}

impl QuasiRandomSampler {
    /// Scrambled Halton over `dims` dimensions starting at index 1.
    pub fn halton(dims: usize, seed: u64) -> Self {
        Self::new(UnitSource::Halton(Halton::scrambled(dims, seed)))
    }

    pub fn new(source: UnitSource) -> Self {
        QuasiRandomSampler { source, index: 1 }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn source(&self) -> &UnitSource {
        &self.source
    }

    /// Value of `dim` at the current index; does not advance.
    pub fn halton_next(&self, dim: usize) -> Result<f64> {
        self.source.value(self.index, dim)
    }

    pub fn advance(&mut self, by: u64) {
        self.index += by;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_primes() {
        assert_eq!(primes(8), vec![2, 3, 5, 7, 11, 13, 17, 19]);
    }

    #[test]
    fn base_two_sequence() {
        let h = Halton::new(2);
        let v: Vec<f64> = (1..=4).map(|i| h.value(i, 0).unwrap()).collect();
        assert_eq!(v, vec![0.5, 0.25, 0.75, 0.125]);
        assert_eq!(h.value(1, 1).unwrap(), 1.0 / 3.0);
        assert!(h.value(1, 2).is_err());
    }

    #[test]
    fn scramble_keeps_digit_zero_fixed() {
        let h = Halton::scrambled(20, 3);
        for p in h.perms.as_ref().unwrap() {
            assert_eq!(p[0], 0);
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..p.len() as u32).collect::<Vec<_>>());
        }
        assert_eq!(h.value(0, 5).unwrap(), 0.0);
    }

    #[test]
    fn prng_source_is_a_pure_function() {
        let s = UnitSource::Prng { seed: 4, dims: 10 };
        let a = s.value(17, 3).unwrap();
        let _ = s.value(17, 2).unwrap();
        assert_eq!(a, s.value(17, 3).unwrap());
        assert_ne!(a, s.value(18, 3).unwrap());
        assert!(s.value(0, 10).is_err());
    }

    #[test]
    fn sampler_advances_explicitly() {
        let mut s = QuasiRandomSampler::new(UnitSource::Halton(Halton::new(1)));
        assert_eq!(s.halton_next(0).unwrap(), 0.5);
        assert_eq!(s.halton_next(0).unwrap(), 0.5);
        s.advance(1);
        assert_eq!(s.halton_next(0).unwrap(), 0.25);
    }
}
