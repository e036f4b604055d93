//! Seedable, splittable random streams and the exact samplers the
//! estimators use.
//!
//! A [`RngStream`] is identified by a master seed and a path of integer
//! labels (chain, replicate, step, ...). Child streams are derived from the
//! path alone, never from how much randomness the parent has consumed, so
//! parallel work keyed by label reproduces regardless of scheduling.

use crate::error::{Error, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma};
use statrs::distribution::{ContinuousCDF, Normal};

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a, used to turn textual labels into path components.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// A labelled, reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    fn at(seed: u64, path: Vec<u64>) -> Self {
        let mut key = splitmix64(seed);
        for &label in &path {
            key = splitmix64(key ^ splitmix64(label.wrapping_add(0x5851_F42D_4C95_7F2D)));
        }
        let mut bytes = [0u8; 32];
        let mut state = key;
        for chunk in bytes.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { seed, path, key, rng: ChaCha8Rng::from_seed(bytes) }
    }

    /// Child stream for `label`; depends only on `(seed, path, label)`.
    pub fn split(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self::at(self.seed, path)
    }

    pub fn split_named(&self, name: &str) -> Self {
        self.split(fnv1a(name))
    }

    /// Root seed the stream descends from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// 64-bit digest of seed and path, for interfaces that take a plain seed.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Human-readable path such as `42/3/17`.
    pub fn label(&self) -> String {
        std::iter::once(self.seed.to_string()).chain(self.path.iter().map(u64::to_string)).collect::<Vec<_>>().join("/")
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Uniform draw on the open interval `(0, 1)`.
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0).map_err(|e| Error::ParameterDomain(format!("gamma shape {shape}: {e}")))?;
    Ok(g.sample(rng))
}

/// Dirichlet draw by normalizing independent Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(params: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if params.is_empty() || params.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::ParameterDomain(format!("Dirichlet parameters must be positive: {params:?}")));
    }
    if params.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut draws = params.iter().map(|&a| sample_gamma(a, rng)).collect::<Result<Vec<_>>>()?;
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter_mut().for_each(|g| *g /= sum);
    } else {
        // every variate underflowed; fall back to a categorical pick
        let probs: Vec<f64> = {
            let t: f64 = params.iter().sum();
            params.iter().map(|a| a / t).collect()
        };
        let k = sample_categorical(&probs, rng)?;
        draws.iter_mut().enumerate().for_each(|(i, g)| *g = if i == k { 1.0 } else { 0.0 });
    }
    Ok(draws)
}

pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let d = Beta::new(a, b).map_err(|e| Error::ParameterDomain(format!("Beta({a}, {b}): {e}")))?;
    Ok(d.sample(rng))
}

pub fn sample_binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> Result<u64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ParameterDomain(format!("binomial probability {p} outside [0, 1]")));
    }
    if n == 0 || p == 0.0 {
        return Ok(0);
    }
    if p == 1.0 {
        return Ok(n);
    }
    let d = Binomial::new(n, p).map_err(|e| Error::ParameterDomain(format!("Binomial({n}, {p}): {e}")))?;
    Ok(d.sample(rng))
}

/// Index drawn with the given probabilities (renormalized).
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|p| *p < 0.0 || !p.is_finite()) || !(total > 0.0) {
        return Err(Error::ParameterDomain(format!("invalid categorical probabilities {probs:?}")));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1))
}

/// Multinomial draw via sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) || !(total > 0.0) {
        return Err(Error::ParameterDomain(format!("invalid multinomial probabilities {probs:?}")));
    }
    let mut out = vec![0u64; probs.len()];
    let mut left = n;
    let mut mass = total;
    for (i, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == probs.len() || mass <= 0.0 {
            out[i] = left;
            break;
        }
        let k = sample_binomial(left, (p / mass).clamp(0.0, 1.0), rng)?;
        out[i] = k;
        left -= k;
        mass -= p;
    }
    Ok(out)
}

/// Result of a truncated-Normal draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedDraw {
    pub value: f64,
    /// The interval carried less than `1e-300` probability and the draw was
    /// clamped to the nearer boundary.
    pub clamped: bool,
}

/// Inverse-CDF draw from `N(mean, sd^2)` restricted to `[lo, hi]`.
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> Result<TruncatedDraw> {
    if !(sd > 0.0) || !(lo < hi) || !mean.is_finite() {
        return Err(Error::ParameterDomain(format!("truncated normal needs sd > 0 and lo < hi (mean={mean}, sd={sd}, [{lo}, {hi}])")));
    }
    let std = Normal::standard();
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    // Work in the lower tail, where the CDF keeps full relative precision.
    let (a, b, flip) = if a > 0.0 { (-b, -a, true) } else { (a, b, false) };
    let fa = std.cdf(a);
    let fb = std.cdf(b);
    let mass = fb - fa;
    let x = if mass < 1e-300 {
        let nearer = if b <= 0.0 { b } else { a };
        return Ok(TruncatedDraw { value: mean + sd * if flip { -nearer } else { nearer }, clamped: true });
    } else {
        let u = open_unit(rng);
        std.inverse_cdf(fa + u * mass).clamp(a, b)
    };
    let x = if flip { -x } else { x };
    Ok(TruncatedDraw { value: (mean + sd * x).clamp(lo, hi), clamped: false })
}
