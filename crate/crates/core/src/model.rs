//! Domain types shared by every module: outcome spaces, populations, designs,
//! mechanism parameters and privatized releases.
//!
//! Outcomes are stored as indices into an [`OutcomeSpace`]; real values are
//! only looked up for arithmetic. Cluster ids are dense `0..C` with the
//! original labels kept alongside.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Minimum number of units per cluster.
pub const MIN_CLUSTER_SIZE: usize = 2;

/// Finite, ordered response space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OutcomeSpace {
    values: Vec<f64>,
}

impl OutcomeSpace {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidSpace(format!("need at least 2 outcomes, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpace("outcome values must be finite".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpace("outcome values must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// Integer outcomes `lo..=hi`.
    pub fn integer_range(lo: i64, hi: i64) -> Result<Self> {
        Self::new((lo..=hi).map(|v| v as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Exact-match lookup of a value.
    pub fn index_of(&self, value: f64) -> Option<usize> {
        self.values.iter().position(|&v| v == value)
    }

    /// B = max |y| over the space.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }

    /// Mean of the outcome values.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Mean of the squared outcome values.
    pub fn mean_sq(&self) -> f64 {
        self.l2_norm_sq() / self.len() as f64
    }

    /// Inner product of the value vector with a weight vector over the space.
    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.values.iter().zip(weights).map(|(v, w)| v * w).sum()
    }
}

impl TryFrom<Vec<f64>> for OutcomeSpace {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<OutcomeSpace> for Vec<f64> {
    fn from(s: OutcomeSpace) -> Self {
        s.values
    }
}

impl FromStr for OutcomeSpace {
    type Err = Error;

    /// Either a comma-separated list (`0,1,2.5`) or an integer range (`-5..=6`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((lo, hi)) = s.split_once("..=") {
            let lo = lo.trim().parse::<i64>();
            let hi = hi.trim().parse::<i64>();
            return match (lo, hi) {
                (Ok(lo), Ok(hi)) => Self::integer_range(lo, hi),
                _ => Err(Error::InvalidSpace(format!("bad range {s:?}"))),
            };
        }
        let values = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidSpace(format!("{s:?}: {e}")))?;
        Self::new(values)
    }
}

/// A non-negative real that may be +infinity, kept as an explicit tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

/// Laplace scale parameter sigma; `Infinite` means the Laplace step is skipped.
pub type NoiseScale = Extended;
/// Privacy loss epsilon.
pub type Epsilon = Extended;

impl Extended {
    pub fn finite(self) -> Option<f64> {
        match self {
            Extended::Finite(v) => Some(v),
            Extended::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinite)
    }

    /// 1/x with 1/inf = 0 and 1/0 = inf.
    pub fn recip(self) -> Extended {
        match self {
            Extended::Infinite => Extended::Finite(0.0),
            Extended::Finite(v) if v == 0.0 => Extended::Infinite,
            Extended::Finite(v) => Extended::Finite(1.0 / v),
        }
    }

    /// Value as f64, mapping the tag to `f64::INFINITY` (for display and plotting only).
    pub fn to_f64_lossy(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Finite(v) => write!(f, "{v}"),
            Extended::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Extended {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" | "∞" => Ok(Extended::Infinite),
            t => {
                let v = t.parse::<f64>().map_err(|e| Error::InvalidParams(format!("{s:?}: {e}")))?;
                if v.is_infinite() && v > 0.0 {
                    Ok(Extended::Infinite)
                } else if v.is_finite() {
                    Ok(Extended::Finite(v))
                } else {
                    Err(Error::InvalidParams(format!("{s:?} is not a valid value")))
                }
            }
        }
    }
}

impl Serialize for Extended {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Extended::Finite(v) => s.serialize_f64(*v),
            Extended::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Extended {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Extended::Finite(v)),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One input row before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawUnit {
    pub unit_id: String,
    pub cluster: String,
    pub y0: f64,
    pub y1: f64,
}

/// A problem found by [`validate_population`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    OutcomeOutsideSpace { unit_id: String, value: f64 },
    ClusterTooSmall { cluster: String, size: usize },
    CountMismatch { cluster: String, declared: usize, actual: usize },
    DuplicateUnit { unit_id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutcomeOutsideSpace { unit_id, value } => {
                write!(f, "outcome outside space: unit {unit_id} has value {value}")
            }
            Violation::ClusterTooSmall { cluster, size } => {
                write!(f, "cluster below minimum size {MIN_CLUSTER_SIZE}: cluster {cluster} has {size} unit(s)")
            }
            Violation::CountMismatch { cluster, declared, actual } => {
                write!(f, "count mismatch: cluster {cluster} declared {declared} units, found {actual}")
            }
            Violation::DuplicateUnit { unit_id } => write!(f, "duplicate unit {unit_id}"),
        }
    }
}

/// Reports every violation in `units`; empty iff the rows form a valid population.
///
/// `declared_sizes`, when given, is checked against the counted cluster sizes.
pub fn validate_population(
    units: &[RawUnit],
    space: &OutcomeSpace,
    declared_sizes: Option<&HashMap<String, usize>>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    let mut sizes: Vec<(String, usize)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for u in units {
        if seen.insert(u.unit_id.as_str(), ()).is_some() {
            out.push(Violation::DuplicateUnit { unit_id: u.unit_id.clone() });
        }
        for v in [u.y0, u.y1] {
            if space.index_of(v).is_none() {
                out.push(Violation::OutcomeOutsideSpace { unit_id: u.unit_id.clone(), value: v });
            }
        }
        match slot.get(u.cluster.as_str()) {
            Some(&i) => sizes[i].1 += 1,
            None => {
                slot.insert(u.cluster.as_str(), sizes.len());
                sizes.push((u.cluster.clone(), 1));
            }
        }
    }
    for (cluster, size) in &sizes {
        if *size < MIN_CLUSTER_SIZE {
            out.push(Violation::ClusterTooSmall { cluster: cluster.clone(), size: *size });
        }
    }
    if let Some(declared) = declared_sizes {
        let mut keys: Vec<_> = declared.keys().collect();
        keys.sort();
        for key in keys {
            let actual = slot.get(key.as_str()).map_or(0, |&i| sizes[i].1);
            if declared[key] != actual {
                out.push(Violation::CountMismatch { cluster: key.clone(), declared: declared[key], actual });
            }
        }
    }
    out
}

/// Fixed population with both potential outcomes and cluster membership.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDataset {
    space: OutcomeSpace,
    unit_ids: Vec<String>,
    clusters: Vec<usize>,
    y0: Vec<usize>,
    y1: Vec<usize>,
    cluster_labels: Vec<String>,
    members: Vec<Vec<usize>>,
}

impl PopulationDataset {
    /// Validates raw rows; cluster ids are assigned in order of first appearance.
    pub fn from_raw(units: &[RawUnit], space: OutcomeSpace) -> Result<Self> {
        let violations = validate_population(units, &space, None);
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::InvalidPopulation(msg.join("; ")));
        }
        let mut labels: Vec<String> = Vec::new();
        let mut slot: HashMap<String, usize> = HashMap::new();
        let mut clusters = Vec::with_capacity(units.len());
        for u in units {
            let id = *slot.entry(u.cluster.clone()).or_insert_with(|| {
                labels.push(u.cluster.clone());
                labels.len() - 1
            });
            clusters.push(id);
        }
        let idx = |v: f64| space.index_of(v).expect("validated");
        let y0 = units.iter().map(|u| idx(u.y0)).collect();
        let y1 = units.iter().map(|u| idx(u.y1)).collect();
        let unit_ids = units.iter().map(|u| u.unit_id.clone()).collect();
        Self::assemble(space, unit_ids, clusters, y0, y1, labels)
    }

    /// Builds a population from dense cluster ids and outcome indices.
    /// Unit ids are `u0, u1, ...`; cluster labels are the decimal ids.
    pub fn from_indices(space: OutcomeSpace, clusters: Vec<usize>, y0: Vec<usize>, y1: Vec<usize>) -> Result<Self> {
        let c = clusters.iter().max().map_or(0, |m| m + 1);
        let labels = (0..c).map(|i| i.to_string()).collect();
        let unit_ids = (0..clusters.len()).map(|i| format!("u{i}")).collect();
        Self::assemble(space, unit_ids, clusters, y0, y1, labels)
    }

    fn assemble(
        space: OutcomeSpace,
        unit_ids: Vec<String>,
        clusters: Vec<usize>,
        y0: Vec<usize>,
        y1: Vec<usize>,
        cluster_labels: Vec<String>,
    ) -> Result<Self> {
        let n = clusters.len();
        if y0.len() != n || y1.len() != n || unit_ids.len() != n {
            return Err(Error::InvalidPopulation("column lengths differ".into()));
        }
        let k = space.len();
        if y0.iter().chain(&y1).any(|&y| y >= k) {
            return Err(Error::InvalidPopulation("outcome outside space".into()));
        }
        let mut members = vec![Vec::new(); cluster_labels.len()];
        for (i, &c) in clusters.iter().enumerate() {
            if c >= members.len() {
                return Err(Error::InvalidPopulation(format!("cluster id {c} out of range")));
            }
            members[c].push(i);
        }
        for (c, m) in members.iter().enumerate() {
            if m.len() < MIN_CLUSTER_SIZE {
                return Err(Error::InvalidPopulation(format!(
                    "cluster below minimum size {MIN_CLUSTER_SIZE}: cluster {} has {} unit(s)",
                    cluster_labels[c],
                    m.len()
                )));
            }
        }
        Ok(Self { space, unit_ids, clusters, y0, y1, cluster_labels, members })
    }

    pub fn space(&self) -> &OutcomeSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn clusters(&self) -> &[usize] {
        &self.clusters
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    /// Unit indices of cluster `c`, in input order.
    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Outcome index of unit `i` under arm `a`.
    pub fn outcome(&self, i: usize, arm: u8) -> usize {
        if arm == 1 {
            self.y1[i]
        } else {
            self.y0[i]
        }
    }

    pub fn outcome_value(&self, i: usize, arm: u8) -> f64 {
        self.space.value(self.outcome(i, arm))
    }

    pub fn y0(&self) -> &[usize] {
        &self.y0
    }

    pub fn y1(&self) -> &[usize] {
        &self.y1
    }

    /// True average treatment effect (1/n) sum(y(1) - y(0)).
    pub fn ate(&self) -> f64 {
        let s: f64 = (0..self.len()).map(|i| self.outcome_value(i, 1) - self.outcome_value(i, 0)).sum();
        s / self.len() as f64
    }

    /// Same units and outcomes with every unit placed in a single cluster.
    pub fn pooled(&self) -> PopulationDataset {
        let n = self.len();
        PopulationDataset {
            space: self.space.clone(),
            unit_ids: self.unit_ids.clone(),
            clusters: vec![0; n],
            y0: self.y0.clone(),
            y1: self.y1.clone(),
            cluster_labels: vec!["pooled".into()],
            members: vec![(0..n).collect()],
        }
    }

    /// Keeps the units at `indices` (in the given order), preserving cluster labels.
    pub fn select(&self, indices: &[usize]) -> Result<PopulationDataset> {
        let mut remap = vec![usize::MAX; self.num_clusters()];
        let mut labels = Vec::new();
        let mut clusters = Vec::with_capacity(indices.len());
        for &i in indices {
            let c = self.clusters[i];
            if remap[c] == usize::MAX {
                remap[c] = labels.len();
                labels.push(self.cluster_labels[c].clone());
            }
            clusters.push(remap[c]);
        }
        Self::assemble(
            self.space.clone(),
            indices.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            clusters,
            indices.iter().map(|&i| self.y0[i]).collect(),
            indices.iter().map(|&i| self.y1[i]).collect(),
            labels,
        )
    }
}

/// Per-cluster treated and control counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignCounts {
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
}

impl DesignCounts {
    /// Checks `1 <= n1c <= n_c - 1` for every cluster and sets `n0c = n_c - n1c`.
    pub fn new(cluster_sizes: &[usize], treated: Vec<usize>) -> Result<Self> {
        if treated.len() != cluster_sizes.len() {
            return Err(Error::InvalidDesign(format!(
                "{} treated counts for {} clusters",
                treated.len(),
                cluster_sizes.len()
            )));
        }
        let mut control = Vec::with_capacity(treated.len());
        for (c, (&n1, &nc)) in treated.iter().zip(cluster_sizes).enumerate() {
            if n1 == 0 || n1 >= nc {
                return Err(Error::InvalidDesign(format!(
                    "cluster {c}: treated count {n1} must lie in [1, {}]",
                    nc.saturating_sub(1)
                )));
            }
            control.push(nc - n1);
        }
        Ok(Self { treated, control })
    }

    /// Half of each cluster treated (rounded down).
    pub fn balanced(cluster_sizes: &[usize]) -> Result<Self> {
        Self::new(cluster_sizes, cluster_sizes.iter().map(|n| n / 2).collect())
    }

    /// `round(fraction * n_c)` treated in each cluster.
    pub fn from_fraction(cluster_sizes: &[usize], fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidDesign(format!("treated fraction {fraction} outside [0, 1]")));
        }
        Self::new(cluster_sizes, cluster_sizes.iter().map(|&n| (fraction * n as f64).round() as usize).collect())
    }

    pub fn arm(&self, c: usize, arm: u8) -> usize {
        if arm == 1 {
            self.treated[c]
        } else {
            self.control[c]
        }
    }

    pub fn size(&self, c: usize) -> usize {
        self.treated[c] + self.control[c]
    }

    pub fn num_clusters(&self) -> usize {
        self.treated.len()
    }

    pub fn total(&self) -> usize {
        self.treated.iter().sum::<usize>() + self.control.iter().sum::<usize>()
    }

    /// Counts with all clusters merged into one.
    pub fn pooled(&self) -> DesignCounts {
        DesignCounts { treated: vec![self.treated.iter().sum()], control: vec![self.control.iter().sum()] }
    }
}

/// Realized completely randomized design within clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Design {
    counts: DesignCounts,
    assignment: Vec<bool>,
}

impl Design {
    /// Wraps an explicit assignment, deriving and checking the counts.
    pub fn from_assignment(pop: &PopulationDataset, assignment: Vec<bool>) -> Result<Self> {
        if assignment.len() != pop.len() {
            return Err(Error::InvalidDesign(format!(
                "assignment has {} entries for {} units",
                assignment.len(),
                pop.len()
            )));
        }
        let treated =
            (0..pop.num_clusters()).map(|c| pop.members(c).iter().filter(|&&i| assignment[i]).count()).collect();
        let counts = DesignCounts::new(&pop.cluster_sizes(), treated)?;
        Ok(Self { counts, assignment })
    }

    pub fn counts(&self) -> &DesignCounts {
        &self.counts
    }

    pub fn assignment(&self) -> &[bool] {
        &self.assignment
    }

    pub fn arm_of(&self, i: usize) -> u8 {
        self.assignment[i] as u8
    }

    /// Observed outcome index of unit `i`.
    pub fn observed(&self, pop: &PopulationDataset, i: usize) -> usize {
        pop.outcome(i, self.arm_of(i))
    }
}

/// Draws exactly `counts.treated[c]` treated units uniformly at random in every cluster.
pub fn draw_design<R: RngCore + ?Sized>(pop: &PopulationDataset, counts: &DesignCounts, rng: &mut R) -> Result<Design> {
    let sizes = pop.cluster_sizes();
    if counts.num_clusters() != sizes.len() || (0..sizes.len()).any(|c| counts.size(c) != sizes[c]) {
        return Err(Error::InvalidDesign("counts do not match cluster sizes".into()));
    }
    // re-check the [1, n_c - 1] bound for hand-built counts
    let counts = DesignCounts::new(&sizes, counts.treated.clone())?;
    let mut assignment = vec![false; pop.len()];
    for c in 0..sizes.len() {
        let members = pop.members(c);
        for k in index::sample(rng, members.len(), counts.treated[c]) {
            assignment[members[k]] = true;
        }
    }
    Ok(Design { counts, assignment })
}

/// Which privatization mechanism a parameter set refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismKind {
    ClusterDp,
    ClusterFreeDp,
    UniformPriorDp,
    NoisyHt,
    NoisyHistogram,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::ClusterDp => "cluster-dp",
            MechanismKind::ClusterFreeDp => "cluster-free-dp",
            MechanismKind::UniformPriorDp => "uniform-prior-dp",
            MechanismKind::NoisyHt => "noisy-ht",
            MechanismKind::NoisyHistogram => "noisy-histogram",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cluster-dp" => MechanismKind::ClusterDp,
            "cluster-free-dp" => MechanismKind::ClusterFreeDp,
            "uniform-prior-dp" => MechanismKind::UniformPriorDp,
            "noisy-ht" => MechanismKind::NoisyHt,
            "noisy-histogram" => MechanismKind::NoisyHistogram,
            other => return Err(Error::InvalidParams(format!("unknown mechanism {other:?}"))),
        })
    }
}

/// Knobs consumed by the mechanisms, the accountant and the variance formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    pub kind: MechanismKind,
    /// Truncation threshold, in `[0, 1/K]`.
    pub gamma: f64,
    /// Laplace scale; `Infinite` skips the Laplace step.
    pub sigma: NoiseScale,
    /// Resampling probability, in `[0, 1]`.
    pub lambda: f64,
    /// Budget for the aggregate baselines (noisy HT / noisy histogram).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Epsilon>,
}

impl MechanismParams {
    pub fn cluster_dp(gamma: f64, sigma: NoiseScale, lambda: f64) -> Self {
        Self { kind: MechanismKind::ClusterDp, gamma, sigma, lambda, epsilon: None }
    }

    pub fn cluster_free_dp(gamma: f64, sigma: NoiseScale, lambda: f64) -> Self {
        Self { kind: MechanismKind::ClusterFreeDp, ..Self::cluster_dp(gamma, sigma, lambda) }
    }

    /// Uniform prior over `k` outcomes: gamma = 1/K, no Laplace step.
    pub fn uniform_prior(k: usize, lambda: f64) -> Self {
        Self {
            kind: MechanismKind::UniformPriorDp,
            gamma: 1.0 / k as f64,
            sigma: Extended::Infinite,
            lambda,
            epsilon: None,
        }
    }

    pub fn noisy_ht(epsilon: Epsilon) -> Self {
        Self {
            kind: MechanismKind::NoisyHt,
            gamma: 0.0,
            sigma: Extended::Infinite,
            lambda: 0.0,
            epsilon: Some(epsilon),
        }
    }

    pub fn noisy_histogram(epsilon: Epsilon) -> Self {
        Self { kind: MechanismKind::NoisyHistogram, ..Self::noisy_ht(epsilon) }
    }

    /// Checks parameter ranges against an outcome space of size `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self.kind {
            MechanismKind::NoisyHt | MechanismKind::NoisyHistogram => match self.epsilon {
                Some(Extended::Infinite) => Ok(()),
                Some(Extended::Finite(e)) if e > 0.0 => Ok(()),
                _ => Err(Error::InvalidParams("epsilon must be > 0".into())),
            },
            _ => {
                let max_gamma = 1.0 / k as f64;
                if !(0.0..=max_gamma * (1.0 + 1e-12)).contains(&self.gamma) {
                    return Err(Error::InvalidParams(format!("gamma {} outside [0, 1/K = {max_gamma}]", self.gamma)));
                }
                if let Extended::Finite(s) = self.sigma {
                    if s.is_nan() || s < 0.0 {
                        return Err(Error::InvalidParams(format!("sigma {s} must be >= 0")));
                    }
                }
                if !(0.0..=1.0).contains(&self.lambda) {
                    return Err(Error::InvalidParams(format!("lambda {} outside [0, 1]", self.lambda)));
                }
                Ok(())
            }
        }
    }
}

/// Per-(cluster, arm) prior used for resampling; index `[c][arm][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPrior {
    pub gamma: f64,
    pub priors: Vec<[Vec<f64>; 2]>,
}

impl ProjectedPrior {
    pub fn get(&self, c: usize, arm: u8) -> &[f64] {
        &self.priors[c][arm as usize]
    }

    pub fn num_clusters(&self) -> usize {
        self.priors.len()
    }
}

/// One released unit: everything a third party sees about it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReleasedUnit {
    pub unit_id: String,
    pub cluster: usize,
    pub treated: bool,
    pub y_tilde: usize,
}

/// Output of a user-level mechanism: privatized outcomes plus debiasing rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedRelease {
    pub space: OutcomeSpace,
    pub cluster_labels: Vec<String>,
    pub units: Vec<ReleasedUnit>,
    /// `debias[c][arm]` = y^T Q_{c,arm}^{-1}.
    pub debias: Vec<[Vec<f64>; 2]>,
    pub prior: ProjectedPrior,
    pub params: MechanismParams,
}

impl PrivatizedRelease {
    /// Per-cluster treated and control counts implied by the released assignment.
    pub fn counts(&self) -> Result<DesignCounts> {
        let c = self.cluster_labels.len();
        let mut sizes = vec![0usize; c];
        let mut treated = vec![0usize; c];
        for u in &self.units {
            if u.cluster >= c {
                return Err(Error::InvalidDesign(format!("cluster id {} out of range", u.cluster)));
            }
            sizes[u.cluster] += 1;
            treated[u.cluster] += u.treated as usize;
        }
        DesignCounts::new(&sizes, treated)
    }
}
