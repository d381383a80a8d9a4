//! Whole-pipeline configuration and the estimation stage.

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, ControlInput, ControlledMap, GumowskiMiraParams, RawState};
use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, TrainConfig};
use crate::region::{
    self, ClusterChoice, EstimationReport, FixedPointEstimate, RecurrenceConfig, RecurrenceSampler, Region,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    /// Starting point of the uncontrolled orbit.
    pub x0: Vec<f64>,
    pub orbit_length: usize,
    pub link_radius: f64,
    /// Index into the size-ordered cluster list; `None` picks the largest.
    pub cluster: Option<usize>,
    pub radius: f64,
    pub recurrence: RecurrenceConfig,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            x0: vec![0.2, 1.8],
            orbit_length: 20_000_000,
            link_radius: 0.1,
            cluster: None,
            radius: 1.0,
            recurrence: RecurrenceConfig::default(),
        }
    }
}

impl EstimateConfig {
    pub fn validate(&self, state_dim: usize) -> Vec<String> {
        let mut errs = self.recurrence.validate();
        if self.x0.len() != state_dim {
            errs.push(format!("estimate.x0 must have {state_dim} coordinates"));
        }
        if self.orbit_length <= self.recurrence.transient_skip + 1 {
            errs.push(format!(
                "estimate.orbit_length ({}) must exceed recurrence.transient_skip + 1 ({})",
                self.orbit_length,
                self.recurrence.transient_skip + 1
            ));
        }
        if !(self.link_radius > 0.0) {
            errs.push("estimate.link_radius must be > 0".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            errs.push("estimate.radius must be > 0".into());
        }
        errs
    }

    pub fn choice(&self) -> ClusterChoice {
        self.cluster.map_or(ClusterChoice::Largest, ClusterChoice::Index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub x0: Vec<f64>,
    pub steps: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            x0: vec![0.2, 1.8],
            steps: 10800,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceConfig {
    pub grid_resolution: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig { grid_resolution: 101 }
    }
}

/// Everything one config file can hold; every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub system: GumowskiMiraParams,
    pub estimate: EstimateConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub evaluate: EvaluateConfig,
    pub surface: SurfaceConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.message().to_string()]))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// All violations across sections, Gumowski-Mira dimensions.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.system.validate();
        errs.extend(self.estimate.validate(2));
        errs.extend(self.train.validate(2, 1));
        errs.extend(self.experiment.validate());
        if self.evaluate.x0.len() != 2 {
            errs.push("evaluate.x0 must have 2 coordinates".into());
        }
        if self.surface.grid_resolution < 2 {
            errs.push("surface.grid_resolution must be >= 2".into());
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Estimation {
    pub estimate: FixedPointEstimate,
    pub region: Region,
    pub report: EstimationReport,
}

/// Uncontrolled orbit, recurrence sampling, clustering and the region.
pub fn estimate<M: ControlledMap + ?Sized>(map: &M, cfg: &EstimateConfig) -> Result<Estimation> {
    let errs = cfg.validate(map.state_dim());
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let zero = ControlInput::zeros(map.input_dim());
    let mut sampler = RecurrenceSampler::new(&cfg.recurrence);
    let mut x = RawState(cfg.x0.clone());
    sampler.push(&x);
    for k in 1..cfg.orbit_length {
        x = map.step(&x, &zero).map_err(|e| dynamics::with_step(e, k - 1))?;
        sampler.push(&x);
    }
    let samples = sampler.finish()?;
    let clusters = region::cluster_samples(&samples, cfg.link_radius);
    let estimate = region::estimate_fixed_point(&clusters, cfg.choice())?;
    let region = Region::new(estimate.point.clone(), cfg.radius)?;
    let report = EstimationReport::new(samples.len(), &clusters, &estimate, &region);
    Ok(Estimation {
        estimate,
        region,
        report,
    })
}
