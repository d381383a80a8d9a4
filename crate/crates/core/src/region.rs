//! Fixed-point estimation from uncontrolled orbits, the control region `D`,
//! and the coordinate transform into region-relative offsets.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::RawState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn of_diff(self, a: &[f64], b: &[f64]) -> f64 {
        let d = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            Norm::L1 => d.sum(),
            Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
            Norm::Linf => d.fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecurrenceConfig {
    pub epsilon: f64,
    pub norm: Norm,
    pub transient_skip: usize,
    /// Minimum number of accepted samples.
    pub sample_budget: usize,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        RecurrenceConfig {
            epsilon: 0.02,
            norm: Norm::L1,
            transient_skip: 1000,
            sample_budget: 100,
        }
    }
}

impl RecurrenceConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            errs.push(format!("recurrence.epsilon must be > 0 (got {})", self.epsilon));
        }
        if self.sample_budget == 0 {
            errs.push("recurrence.sample_budget must be >= 1".into());
        }
        errs
    }
}

/// Orbit points whose one-step displacement is below `epsilon`, in orbit order.
pub fn sample_recurrences(orbit: &[RawState], cfg: &RecurrenceConfig) -> Result<Vec<RawState>> {
    let mut sampler = RecurrenceSampler::new(cfg);
    for x in orbit {
        sampler.push(x);
    }
    sampler.finish()
}

/// Streaming form of [`sample_recurrences`] for orbits too long to store.
#[derive(Debug, Clone)]
pub struct RecurrenceSampler<'a> {
    cfg: &'a RecurrenceConfig,
    seen: usize,
    prev: Option<RawState>,
    accepted: Vec<RawState>,
}

impl<'a> RecurrenceSampler<'a> {
    pub fn new(cfg: &'a RecurrenceConfig) -> Self {
        RecurrenceSampler {
            cfg,
            seen: 0,
            prev: None,
            accepted: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &RawState) {
        if let Some(prev) = self.prev.take() {
            let k = self.seen - 1;
            if k >= self.cfg.transient_skip && self.cfg.norm.of_diff(x.coords(), prev.coords()) < self.cfg.epsilon {
                self.accepted.push(prev);
            }
        }
        self.prev = Some(x.clone());
        self.seen += 1;
    }

    pub fn accepted(&self) -> usize {
        self.accepted.len()
    }

    pub fn finish(self) -> Result<Vec<RawState>> {
        if self.seen <= self.cfg.transient_skip + 1 {
            return Err(Error::Contract(format!(
                "orbit length {} must exceed transient_skip + 1 = {}",
                self.seen,
                self.cfg.transient_skip + 1
            )));
        }
        if self.accepted.len() < self.cfg.sample_budget {
            return Err(Error::InsufficientData {
                accepted: self.accepted.len(),
                required: self.cfg.sample_budget,
            });
        }
        Ok(self.accepted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: Vec<RawState>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean(&self) -> RawState {
        let n = self.members[0].dim();
        let mut acc = vec![0.0; n];
        for m in &self.members {
            for (a, v) in acc.iter_mut().zip(m.coords()) {
                *a += v;
            }
        }
        let count = self.members.len() as f64;
        RawState(acc.into_iter().map(|a| a / count).collect())
    }

    /// Largest max-norm deviation of a member from `center`.
    pub fn spread_about(&self, center: &RawState) -> f64 {
        self.members
            .iter()
            .map(|m| m.dist_inf(center))
            .fold(0.0, f64::max)
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage clustering under the max-norm, largest cluster first.
///
/// Samples are bucketed on a grid with cell size `link_radius`, so only
/// neighbouring cells need pairwise checks. Ties in size keep the order of
/// each cluster's first member.
pub fn cluster_samples(samples: &[RawState], link_radius: f64) -> Vec<Cluster> {
    if samples.is_empty() {
        return Vec::new();
    }
    let dim = samples[0].dim();
    let cell_of = |s: &RawState| -> Vec<i64> {
        s.coords()
            .iter()
            .map(|v| (v / link_radius).floor() as i64)
            .collect()
    };
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        grid.entry(cell_of(s)).or_default().push(i);
    }

    let offsets = neighbour_offsets(dim);
    let mut sets = DisjointSet::new(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let base = cell_of(s);
        for off in &offsets {
            let key: Vec<i64> = base.iter().zip(off).map(|(b, o)| b + o).collect();
            if let Some(bucket) = grid.get(&key) {
                for &j in bucket {
                    if j > i && s.dist_inf(&samples[j]) <= link_radius {
                        sets.union(i, j);
                    }
                }
            }
        }
    }

    let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..samples.len() {
        let r = sets.find(i);
        by_root.entry(r).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_root.into_values().collect();
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    groups
        .into_iter()
        .map(|g| Cluster {
            members: g.into_iter().map(|i| samples[i].clone()).collect(),
        })
        .collect()
}

fn neighbour_offsets(dim: usize) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (-1..=1).map(move |d| {
                    let mut p = prefix.clone();
                    p.push(d);
                    p
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterChoice {
    #[default]
    Largest,
    Index(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointEstimate {
    pub point: RawState,
    pub sample_count: usize,
    pub cluster_id: usize,
    /// Max-norm deviation of cluster members from `point`.
    pub spread: f64,
}

/// Mean of the chosen cluster.
pub fn estimate_fixed_point(clusters: &[Cluster], choice: ClusterChoice) -> Result<FixedPointEstimate> {
    let id = match choice {
        ClusterChoice::Largest => 0,
        ClusterChoice::Index(i) => i,
    };
    let cluster = clusters.get(id).ok_or(Error::ClusterOutOfRange {
        index: id,
        count: clusters.len(),
    })?;
    if cluster.is_empty() {
        return Err(Error::Contract(format!("cluster {id} is empty")));
    }
    let point = cluster.mean();
    Ok(FixedPointEstimate {
        spread: cluster.spread_about(&point),
        sample_count: cluster.len(),
        cluster_id: id,
        point,
    })
}

/// Axis-aligned box `{x : |x - center|_inf <= radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// A state in region-relative coordinates, or the out-of-region token.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformedState {
    InRegion(Vec<f64>),
    Out,
}

impl TransformedState {
    pub fn is_out(&self) -> bool {
        matches!(self, TransformedState::Out)
    }

    pub fn offset(&self) -> Option<&[f64]> {
        match self {
            TransformedState::InRegion(s) => Some(s),
            TransformedState::Out => None,
        }
    }
}

impl Region {
    pub fn new(center: RawState, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidConfig(vec![format!(
                "region radius must be > 0 (got {radius})"
            )]));
        }
        if !center.is_finite() {
            return Err(Error::NonFinite("region center".into()));
        }
        Ok(Region {
            center: center.0,
            radius,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &RawState) -> bool {
        x.coords()
            .iter()
            .zip(&self.center)
            .all(|(v, c)| (v - c).abs() <= self.radius)
    }

    pub fn transform(&self, x: &RawState) -> TransformedState {
        if self.contains(x) {
            TransformedState::InRegion(x.coords().iter().zip(&self.center).map(|(v, c)| v - c).collect())
        } else {
            TransformedState::Out
        }
    }

    pub fn inverse_transform(&self, s: &TransformedState) -> Result<RawState> {
        match s {
            TransformedState::InRegion(off) => {
                if off.len() != self.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim(),
                        got: off.len(),
                    });
                }
                Ok(RawState(off.iter().zip(&self.center).map(|(o, c)| c + o).collect()))
            }
            TransformedState::Out => Err(Error::Contract(
                "inverse_transform called on the out-of-region token".into(),
            )),
        }
    }

    /// `(lower, upper)` corner of the box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.center.iter().map(|c| c - self.radius).collect(),
            self.center.iter().map(|c| c + self.radius).collect(),
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterRow {
    pub id: usize,
    pub size: usize,
    pub mean: Vec<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub point: Vec<f64>,
    pub sample_count: usize,
    pub cluster_id: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionBounds {
    pub center: Vec<f64>,
    pub radius: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Human-readable summary of one estimation pass (serialized as TOML).
#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub accepted_samples: usize,
    pub estimate: EstimateRow,
    pub region: RegionBounds,
    pub clusters: Vec<ClusterRow>,
}

impl EstimationReport {
    pub fn new(accepted: usize, clusters: &[Cluster], est: &FixedPointEstimate, region: &Region) -> Self {
        let (lower, upper) = region.bounds();
        EstimationReport {
            accepted_samples: accepted,
            clusters: clusters
                .iter()
                .enumerate()
                .map(|(id, c)| {
                    let mean = c.mean();
                    ClusterRow {
                        id,
                        size: c.len(),
                        spread: c.spread_about(&mean),
                        mean: mean.0,
                    }
                })
                .collect(),
            estimate: EstimateRow {
                point: est.point.0.clone(),
                sample_count: est.sample_count,
                cluster_id: est.cluster_id,
                spread: est.spread,
            },
            region: RegionBounds {
                center: region.center.clone(),
                radius: region.radius,
                lower,
                upper,
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}
