//! Keyed random streams.
//!
//! A stream is identified by `(master_seed, StreamKey)`. The key is folded into the
//! master seed with a SplitMix64 cascade and the result seeds a ChaCha8 generator,
//! so the values drawn for e.g. the mask of layer 2 in batch 17 of epoch 3 never
//! depend on what else was sampled before it.

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a stream is used for. Different purposes never share values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    WeightInit,
    Mask,
    Shuffle,
    Synthetic,
    Oracle,
    Probe,
    Custom(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::WeightInit => 1,
            Purpose::Mask => 2,
            Purpose::Shuffle => 3,
            Purpose::Synthetic => 4,
            Purpose::Oracle => 5,
            Purpose::Probe => 6,
            Purpose::Custom(v) => 0x1000 ^ v.rotate_left(17),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub epoch: u64,
    pub batch: u64,
    pub layer: u64,
}

impl StreamKey {
    pub fn new(purpose: Purpose, epoch: u64, batch: u64, layer: u64) -> Self {
        StreamKey {
            purpose,
            epoch,
            batch,
            layer,
        }
    }

    pub fn of(purpose: Purpose) -> Self {
        Self::new(purpose, 0, 0, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub master_seed: u64,
    pub key: StreamKey,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, key: StreamKey) -> Self {
        RngStream { master_seed, key }
    }

    /// Same master seed, different key.
    pub fn with_key(&self, key: StreamKey) -> Self {
        RngStream::new(self.master_seed, key)
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut h = splitmix64(self.master_seed);
        for part in [
            self.key.purpose.tag(),
            self.key.epoch,
            self.key.batch,
            self.key.layer,
        ] {
            h = splitmix64(h ^ part);
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        seed
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.seed_bytes())
    }
}

/// i.i.d. {0,1} values with `P(1) = keep_prob`.
pub fn sample_bernoulli<S: Scalar>(
    stream: &RngStream,
    shape: &[usize],
    keep_prob: f64,
) -> Result<Tensor<S>> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Domain(format!(
            "keep probability {keep_prob} outside [0, 1]"
        )));
    }
    if keep_prob == 1.0 {
        return Ok(Tensor::full(shape, S::one()));
    }
    if keep_prob == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let n: usize = shape.iter().product();
    let mut data = vec![S::zero(); n];
    let values = [S::zero(), S::one()];
    bernoulli_draws(stream, n, keep_prob, |i, keep| {
        data[i] = values[keep as usize]
    });
    Tensor::new(shape.to_vec(), data)
}

/// Feeds `n` i.i.d. draws with `P(true) = keep_prob` to `f(index, draw)`.
///
/// A draw is `u < keep_prob·2³²` for a uniform 32-bit `u`, so `keep_prob` is resolved to
/// 2⁻³². Values are generated in blocks; the sequence depends only on the stream.
pub(crate) fn bernoulli_draws(
    stream: &RngStream,
    n: usize,
    keep_prob: f64,
    mut f: impl FnMut(usize, bool),
) {
    let threshold = (keep_prob.clamp(0.0, 1.0) * 4_294_967_296.0) as u64;
    let mut rng = stream.rng();
    let mut block = [0u32; 1024];
    let mut start = 0;
    while start < n {
        let len = (n - start).min(block.len());
        rng.fill(&mut block[..len]);
        for (j, &u) in block[..len].iter().enumerate() {
            f(start + j, (u as u64) < threshold);
        }
        start += len;
    }
}

/// i.i.d. `N(mu, sigma²)` values.
pub fn sample_gaussian<S: Scalar>(
    stream: &RngStream,
    shape: &[usize],
    mu: f64,
    sigma: f64,
) -> Result<Tensor<S>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Domain(format!(
            "negative standard deviation {sigma}"
        )));
    }
    let mut rng = stream.rng();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            S::lit(mu + sigma * z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// i.i.d. uniform values on `[lo, hi)`.
pub fn sample_uniform<S: Scalar>(
    stream: &RngStream,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Result<Tensor<S>> {
    if lo.is_nan() || hi.is_nan() || hi < lo {
        return Err(Error::Domain(format!("empty uniform range [{lo}, {hi})")));
    }
    let mut rng = stream.rng();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            S::lit(lo + (hi - lo) * u)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
