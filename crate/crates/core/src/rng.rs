//! Seeded random streams.
//!
//! A single master seed fans out into independent named streams. Each stream
//! is a ChaCha12 generator keyed by the master seed, with its 64-bit stream id
//! derived from `(label, index)` through SplitMix64. Stream ids never depend on
//! how many other streams were drawn, so adding replications leaves earlier
//! ones untouched and results do not depend on thread scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub type StreamRng = ChaCha12Rng;

/// Named purposes for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Assignment,
    Laplace,
    Resampling,
    Population,
    Subsample,
    Graph,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Assignment => 0x6173_7369_676e,
            Stream::Laplace => 0x6c61_706c_6163,
            Stream::Resampling => 0x7265_7361_6d70,
            Stream::Population => 0x706f_7075_6c61,
            Stream::Subsample => 0x7375_6273_616d,
            Stream::Graph => 0x6772_6170_6800,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Master seed from which all per-purpose, per-replication streams derive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Independent stream for `purpose` at replication `index`.
    pub fn stream(&self, purpose: Stream, index: u64) -> StreamRng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master);
        rng.set_stream(splitmix64(purpose.tag() ^ splitmix64(index)));
        rng
    }

    /// A child tree, e.g. one per sub-population or per noise realization.
    pub fn child(&self, index: u64) -> SeedTree {
        SeedTree::new(splitmix64(self.master ^ splitmix64(index.wrapping_add(0x5eed))))
    }
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw on [0, 1).
pub fn unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Laplace(0, b) by inverse CDF; density (1/2b) exp(-|x|/b). `b = 0` gives 0.
pub fn laplace<R: RngCore + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u = open_unit(rng) - 0.5;
    laplace_quantile(u + 0.5, scale)
}

/// Quantile function of Laplace(0, b) at `p` in (0, 1).
pub fn laplace_quantile(p: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u = p - 0.5;
    -scale * u.signum() * (-2.0 * u.abs()).ln_1p()
}

/// Standard normal draw by inverse CDF.
pub fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(open_unit(rng))
}

/// Draw an index from a probability vector by inverse CDF on one uniform.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding can leave acc a hair below 1
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
