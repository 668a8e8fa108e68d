//! Synthetic populations: a Gaussian mixture over clusters and a
//! community-graph model whose cluster features drive the outcomes.

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OutcomeSpace, PopulationDataset};
use crate::rng::{standard_normal, unit};

/// Maps a continuous response to an integer in `[-k', k']`.
///
/// Values beyond `2 sqrt(v)` saturate; inside, `y / delta` with
/// `delta = 2 sqrt(v) / k'` is rounded half away from zero.
pub fn quantize(y: f64, v: f64, k_prime: i64) -> i64 {
    let edge = 2.0 * v.sqrt();
    if y > edge {
        k_prime
    } else if y < -edge {
        -k_prime
    } else {
        let delta = edge / k_prime as f64;
        ((y / delta).round() as i64).clamp(-k_prime, k_prime)
    }
}

/// Gaussian-mixture population: `y' = sqrt(beta) mu_c + sqrt(v - beta) w_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub beta: f64,
    pub v: f64,
    pub k_prime: i64,
    /// Additive integer treatment effect.
    pub tau: i64,
    pub cluster_sizes: Vec<usize>,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { beta: 4.5, v: 5.0, k_prime: 5, tau: 1, cluster_sizes: vec![500, 1000, 2000] }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v > 0.0) {
            return Err(Error::InvalidParams(format!("v = {} must be > 0", self.v)));
        }
        if !(0.0..=self.v).contains(&self.beta) {
            return Err(Error::InvalidParams(format!("beta = {} outside [0, v]", self.beta)));
        }
        if self.k_prime < 1 {
            return Err(Error::InvalidParams(format!("k' = {} must be >= 1", self.k_prime)));
        }
        if self.cluster_sizes.is_empty() || self.cluster_sizes.iter().any(|&s| s < 2) {
            return Err(Error::InvalidParams("every cluster needs at least 2 units".into()));
        }
        Ok(())
    }

    /// Outcome space `{-k' + min(0, tau), ..., k' + max(0, tau)}`.
    pub fn space(&self) -> Result<OutcomeSpace> {
        OutcomeSpace::integer_range(-self.k_prime + self.tau.min(0), self.k_prime + self.tau.max(0))
    }
}

/// Draws a GMM population. Cluster means are drawn first (one per cluster),
/// then unit noise in unit order, so a fixed seed and sizes give the same
/// underlying normals for every `beta`.
pub fn gen_gmm<R: RngCore + ?Sized>(config: &GmmConfig, rng: &mut R) -> Result<PopulationDataset> {
    config.validate()?;
    let mu: Vec<f64> = config.cluster_sizes.iter().map(|_| standard_normal(rng)).collect();
    let n: usize = config.cluster_sizes.iter().sum();
    let w: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
    gmm_from_normals(config, &mu, &w)
}

/// GMM population from given cluster means and unit noise.
pub fn gmm_from_normals(config: &GmmConfig, mu: &[f64], w: &[f64]) -> Result<PopulationDataset> {
    config.validate()?;
    let space = config.space()?;
    let lo = -config.k_prime + config.tau.min(0);
    let (sb, sw) = (config.beta.sqrt(), (config.v - config.beta).sqrt());
    let mut clusters = Vec::with_capacity(w.len());
    let mut y0 = Vec::with_capacity(w.len());
    let mut y1 = Vec::with_capacity(w.len());
    let mut i = 0;
    for (c, &size) in config.cluster_sizes.iter().enumerate() {
        for _ in 0..size {
            let q = quantize(sb * mu[c] + sw * w[i], config.v, config.k_prime);
            clusters.push(c);
            y0.push((q - lo) as usize);
            y1.push((q + config.tau - lo) as usize);
            i += 1;
        }
    }
    PopulationDataset::from_indices(space, clusters, y0, y1)
}

/// Community-graph population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphPopConfig {
    pub community_sizes: Vec<usize>,
    /// Edge probability within a community.
    pub p_in: f64,
    /// Edge probability across communities.
    pub p_out: f64,
    pub beta: [f64; 4],
    /// Standard deviation of the outcome noise.
    pub v: f64,
    /// Number of outcome levels.
    pub k: usize,
    pub tau: f64,
}

impl Default for GraphPopConfig {
    fn default() -> Self {
        Self {
            community_sizes: vec![30, 45, 60, 80, 100, 125],
            p_in: 0.15,
            p_out: 0.005,
            beta: [1.0; 4],
            v: 0.1,
            k: 8,
            tau: 1.0,
        }
    }
}

/// Generated graph population with its cluster features.
#[derive(Debug, Clone)]
pub struct GraphPopulation {
    pub population: PopulationDataset,
    /// Per cluster: nodes, internal edges, cross edges, density.
    pub raw_features: Vec<[f64; 4]>,
    /// Centered, unit-norm columns of `raw_features`.
    pub features: Vec<[f64; 4]>,
    /// Continuous `[lo, hi]` range that was cut into `k` bins.
    pub bin_range: (f64, f64),
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Centers each column and scales it to unit l2 norm.
pub fn standardize_columns(raw: &[[f64; 4]]) -> Result<Vec<[f64; 4]>> {
    let c = raw.len() as f64;
    let mut out = raw.to_vec();
    for f in 0..4 {
        let mean = raw.iter().map(|r| r[f]).sum::<f64>() / c;
        let norm = raw.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>().sqrt();
        let magnitude = raw.iter().map(|r| r[f].abs()).fold(0.0, f64::max).max(1.0);
        if norm <= 1e-12 * magnitude {
            return Err(Error::FeatureStandardization { feature: f });
        }
        for row in out.iter_mut() {
            row[f] = (row[f] - mean) / norm;
        }
    }
    Ok(out)
}

/// Draws a planted-partition graph, builds per-community features and
/// outcomes `y(0) = x_c^T beta + N(0, v^2)`, `y(1) = y(0) + tau`, then bins
/// both on one grid of `k` equal-width bins between the 0.5th and 99.5th
/// percentiles of the pooled continuous outcomes.
pub fn gen_graph_population<R: RngCore + ?Sized>(config: &GraphPopConfig, rng: &mut R) -> Result<GraphPopulation> {
    let sizes = &config.community_sizes;
    if sizes.len() < 2 || sizes.iter().any(|&s| s < 2) {
        return Err(Error::InvalidParams("need at least 2 communities of at least 2 nodes".into()));
    }
    for p in [config.p_in, config.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParams(format!("edge probability {p} outside [0, 1]")));
        }
    }
    if config.k < 2 || !(config.v >= 0.0) {
        return Err(Error::InvalidParams("need k >= 2 and v >= 0".into()));
    }
    let membership: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
    let n = membership.len();
    let mut internal = vec![0usize; sizes.len()];
    let mut cross = vec![0usize; sizes.len()];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (membership[i], membership[j]);
            let p = if a == b { config.p_in } else { config.p_out };
            if unit(rng) < p {
                if a == b {
                    internal[a] += 1;
                } else {
                    cross[a] += 1;
                    cross[b] += 1;
                }
            }
        }
    }
    let raw: Vec<[f64; 4]> = sizes
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let pairs = (s * (s - 1) / 2) as f64;
            [s as f64, internal[c] as f64, cross[c] as f64, internal[c] as f64 / pairs]
        })
        .collect();
    let features = standardize_columns(&raw)?;
    let signal: Vec<f64> = features.iter().map(|x| x.iter().zip(&config.beta).map(|(a, b)| a * b).sum()).collect();
    let y0c: Vec<f64> = membership.iter().map(|&c| signal[c] + config.v * standard_normal(rng)).collect();
    let y1c: Vec<f64> = y0c.iter().map(|y| y + config.tau).collect();

    let mut pooled: Vec<f64> = y0c.iter().chain(&y1c).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&pooled, 0.005), percentile(&pooled, 0.995));
    if !(hi > lo) {
        return Err(Error::InvalidParams("outcome range is degenerate; cannot bin".into()));
    }
    let width = (hi - lo) / config.k as f64;
    let bin = |y: f64| (((y - lo) / width).floor().max(0.0) as usize).min(config.k - 1);
    let space = OutcomeSpace::new((0..config.k).map(|b| lo + (b as f64 + 0.5) * width).collect())?;
    let population = PopulationDataset::from_indices(
        space,
        membership,
        y0c.iter().map(|&y| bin(y)).collect(),
        y1c.iter().map(|&y| bin(y)).collect(),
    )?;
    Ok(GraphPopulation { population, raw_features: raw, features, bin_range: (lo, hi) })
}

/// Uniform without-replacement subsample of `counts[c]` units from every cluster.
/// Units keep their original relative order.
pub fn subsample<R: RngCore + ?Sized>(
    pop: &PopulationDataset,
    counts: &[usize],
    rng: &mut R,
) -> Result<PopulationDataset> {
    if counts.len() != pop.num_clusters() {
        return Err(Error::InvalidParams(format!("{} counts for {} clusters", counts.len(), pop.num_clusters())));
    }
    let mut chosen = Vec::with_capacity(counts.iter().sum());
    for (c, &m) in counts.iter().enumerate() {
        let members = pop.members(c);
        if m > members.len() {
            return Err(Error::InvalidParams(format!(
                "cannot draw {m} units from cluster {c} of size {}",
                members.len()
            )));
        }
        chosen.extend(index::sample(rng, members.len(), m).into_iter().map(|k| members[k]));
    }
    chosen.sort_unstable();
    pop.select(&chosen)
}
