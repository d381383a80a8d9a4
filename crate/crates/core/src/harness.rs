//! Episode loop, multi-run experiments, greedy evaluation and control
//! surfaces.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{self, ControlInput, ControlledMap, RawState};
use crate::error::{Error, Result};
use crate::net::{self, AdamConfig, NetArchitecture, NetParams, Scratch};
use crate::par;
use crate::region::{Region, TransformedState};
use crate::rl::{self, NafLearner, OuConfig, OuNoise, ReplayBuffer, RewardSpec, Transition};
use crate::seeding::{self, Stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub update_period: usize,
    pub updates_per_period: usize,
    pub gamma: f64,
    pub beta: f64,
    pub minibatch: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    /// Episodes start from this point after an uncontrolled transient.
    pub anchor: Vec<f64>,
    pub transient_min: usize,
    pub transient_max: usize,
    pub reward: RewardSpec,
    pub net: NetArchitecture,
    pub adam: AdamConfig,
    pub noise: OuConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 100,
            steps_per_episode: 10800,
            update_period: 80,
            updates_per_period: 2,
            gamma: 0.99,
            beta: 0.01,
            minibatch: 64,
            buffer_capacity: 1_000_000,
            seed: 0,
            anchor: vec![0.2, 1.8],
            transient_min: 100,
            transient_max: 1100,
            reward: RewardSpec::default(),
            net: NetArchitecture::default(),
            adam: AdamConfig::default(),
            noise: OuConfig::default(),
        }
    }
}

impl TrainConfig {
    /// All violations, empty when valid.
    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("episodes", self.episodes),
            ("steps_per_episode", self.steps_per_episode),
            ("update_period", self.update_period),
            ("updates_per_period", self.updates_per_period),
            ("minibatch", self.minibatch),
            ("buffer_capacity", self.buffer_capacity),
        ] {
            if v == 0 {
                errs.push(format!("train.{name} must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            errs.push(format!("train.gamma must be in [0, 1) (got {})", self.gamma));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            errs.push(format!("train.beta must be in (0, 1] (got {})", self.beta));
        }
        if self.minibatch > self.buffer_capacity {
            errs.push(format!(
                "train.minibatch ({}) exceeds train.buffer_capacity ({})",
                self.minibatch, self.buffer_capacity
            ));
        }
        if self.transient_min > self.transient_max {
            errs.push("train.transient_min must be <= train.transient_max".into());
        }
        if self.anchor.len() != state_dim {
            errs.push(format!("train.anchor must have {state_dim} coordinates"));
        }
        if self.net.input_dim != state_dim {
            errs.push(format!("net.input_dim must equal the state dimension {state_dim}"));
        }
        if self.net.action_dim != action_dim {
            errs.push(format!("net.action_dim must equal the input dimension {action_dim}"));
        }
        errs.extend(self.reward.validate(state_dim, action_dim));
        errs.extend(self.net.validate());
        errs.extend(self.adam.validate());
        errs.extend(self.noise.validate());
        errs
    }
}

/// Learned policy together with the region it was trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub region: Region,
    pub params: NetParams,
}

pub const CONTROLLER_MAGIC: &str = "nafchaos-controller";

impl Controller {
    pub fn to_text(&self) -> String {
        let center: String = self.region.center.iter().map(|c| format!(" {c:?}")).collect();
        format!(
            "{CONTROLLER_MAGIC} 1\nregion_radius {:?}\nregion_center{center}\n{}",
            self.region.radius,
            net::write_checkpoint(&self.params)
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(&format!("{CONTROLLER_MAGIC} 1")) {
            return Err(bad("missing `nafchaos-controller 1` header"));
        }
        let radius = lines
            .next()
            .and_then(|l| l.strip_prefix("region_radius "))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| bad("malformed region_radius line"))?;
        let center = lines
            .next()
            .and_then(|l| l.strip_prefix("region_center"))
            .ok_or_else(|| bad("malformed region_center line"))?
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("cannot parse `{t}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let region = Region::new(RawState(center), radius).map_err(|e| bad(&e.to_string()))?;
        let rest: String = lines.map(|l| format!("{l}\n")).collect();
        let params = net::read_checkpoint(&rest)?;
        if params.arch().input_dim != region.dim() {
            return Err(bad("region dimension does not match network input"));
        }
        Ok(Controller { region, params })
    }

    /// Greedy action: `mu(s)` inside the region, zero outside.
    pub fn act(&self, x: &RawState, scratch: &mut Scratch) -> Result<(bool, Vec<f64>)> {
        match self.region.transform(x) {
            TransformedState::InRegion(s) => {
                let out = net::forward_with(&self.params, &s, scratch)?;
                let u_max = self.params.arch().action_scale;
                Ok((true, out.mu.iter().map(|m| m.clamp(-u_max, u_max)).collect()))
            }
            TransformedState::Out => Ok((false, vec![0.0; self.params.arch().action_dim])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub in_region: bool,
    pub u: Vec<f64>,
    /// Immediate reward, only for recorded (in-region) transitions.
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: Vec<StepRecord>,
    /// Mean reward over in-region transitions; NaN if there were none.
    pub mean_reward: f64,
    pub steps_in_region: usize,
    pub updates: usize,
    pub mean_loss: f64,
}

/// Mutable state of one training run.
pub struct RunState {
    pub learner: NafLearner,
    pub buffer: ReplayBuffer,
    pub noise: OuNoise,
    noise_rng: StreamRng,
    batch_rng: StreamRng,
    start_rng: StreamRng,
}

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut init_rng = seeding::stream(cfg.seed, Stream::Init);
        let main = NetParams::init(&cfg.net, &mut init_rng);
        RunState {
            learner: NafLearner::new(main, cfg.adam),
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.net.input_dim, cfg.net.action_dim),
            noise: OuNoise::new(cfg.net.action_dim, cfg.noise.theta, cfg.noise.sigma, cfg.noise.mu),
            noise_rng: seeding::stream(cfg.seed, Stream::Noise),
            batch_rng: seeding::stream(cfg.seed, Stream::Minibatch),
            start_rng: seeding::stream(cfg.seed, Stream::InitialState),
        }
    }

    /// Uncontrolled transient of random length from the anchor.
    pub fn initial_state<M: ControlledMap + ?Sized>(&mut self, map: &M, cfg: &TrainConfig) -> Result<RawState> {
        let len = self.start_rng.random_range(cfg.transient_min..=cfg.transient_max);
        let orbit = dynamics::trajectory(map, &RawState(cfg.anchor.clone()), len)?;
        Ok(orbit.into_iter().next_back().unwrap())
    }
}

/// How actions are chosen inside the region during an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    /// `mu(s) + OU noise`, clipped.
    Explore,
    /// Always zero input, still recording transitions.
    Zero,
}

/// One pass of the training loop over `steps_per_episode` plant steps.
///
/// Updates happen at the top of step `k` when `k % update_period == 0` and
/// the buffer holds a full minibatch. Leaving the region only truncates
/// bootstrapping; the plant keeps running uncontrolled until the episode ends.
pub fn run_episode<M: ControlledMap + ?Sized>(
    map: &M,
    region: &Region,
    run: &mut RunState,
    cfg: &TrainConfig,
    episode: usize,
    x0: RawState,
    policy: Policy,
) -> Result<EpisodeLog> {
    let m = map.input_dim();
    let u_max = cfg.net.action_scale;
    run.noise.reset();
    run.noise.sigma = cfg.noise.sigma_at(episode, cfg.episodes);
    let zero = ControlInput::zeros(m);
    let wrap = |e: Error| Error::Episode {
        episode,
        source: Box::new(e),
    };

    let mut steps = Vec::with_capacity(cfg.steps_per_episode);
    let (mut reward_sum, mut in_region, mut updates, mut loss_sum) = (0.0, 0usize, 0usize, 0.0);
    let mut x = x0;
    for k in 0..cfg.steps_per_episode {
        if k % cfg.update_period == 0 && run.buffer.len() >= cfg.minibatch {
            for _ in 0..cfg.updates_per_period {
                let batch = run.buffer.sample_minibatch(cfg.minibatch, &mut run.batch_rng)?;
                loss_sum += run.learner.update(&batch, cfg.gamma, cfg.beta).map_err(wrap)?;
                updates += 1;
            }
        }

        match region.transform(&x) {
            TransformedState::InRegion(s) => {
                let u = match policy {
                    Policy::Explore => {
                        let out = run.learner.forward(&s).map_err(wrap)?;
                        let delta = run.noise.sample(&mut run.noise_rng);
                        rl::explore_action(&out, delta, u_max)
                    }
                    Policy::Zero => vec![0.0; m],
                };
                let next = map
                    .step(&x, &ControlInput(u.clone()))
                    .map_err(|e| wrap(dynamics::with_step(e, k)))?;
                let s_next = region.transform(&next);
                let r = rl::reward(&s, &u, &s_next, &cfg.reward)?;
                run.buffer.push(&Transition {
                    s,
                    u: u.clone(),
                    s_next,
                    r,
                })?;
                reward_sum += r;
                in_region += 1;
                steps.push(StepRecord {
                    k,
                    x: std::mem::replace(&mut x, next).0,
                    in_region: true,
                    u,
                    r: Some(r),
                });
            }
            TransformedState::Out => {
                let next = map.step(&x, &zero).map_err(|e| wrap(dynamics::with_step(e, k)))?;
                steps.push(StepRecord {
                    k,
                    x: std::mem::replace(&mut x, next).0,
                    in_region: false,
                    u: vec![0.0; m],
                    r: None,
                });
            }
        }
    }
    Ok(EpisodeLog {
        episode,
        steps,
        mean_reward: if in_region > 0 {
            reward_sum / in_region as f64
        } else {
            f64::NAN
        },
        steps_in_region: in_region,
        updates,
        mean_loss: if updates > 0 { loss_sum / updates as f64 } else { f64::NAN },
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    /// Mean in-region reward per episode.
    pub curve: Vec<f64>,
    pub steps_in_region: Vec<usize>,
    pub controller: Controller,
    /// Target-network parameters at the end of training.
    pub target: NetParams,
}

/// Trains one learner for `cfg.episodes` episodes.
pub fn train<M: ControlledMap + ?Sized>(map: &M, region: &Region, cfg: &TrainConfig) -> Result<RunResult> {
    train_with(map, region, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after each episode.
pub fn train_with<M, F>(map: &M, region: &Region, cfg: &TrainConfig, mut on_episode: F) -> Result<RunResult>
where
    M: ControlledMap + ?Sized,
    F: FnMut(&EpisodeLog, &RunState),
{
    let errs = cfg.validate(map.state_dim(), map.input_dim());
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    if region.dim() != map.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: map.state_dim(),
            got: region.dim(),
        });
    }
    let mut run = RunState::new(cfg);
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut steps_in_region = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let x0 = run.initial_state(map, cfg)?;
        let log = run_episode(map, region, &mut run, cfg, episode, x0, Policy::Explore)?;
        curve.push(log.mean_reward);
        steps_in_region.push(log.steps_in_region);
        on_episode(&log, &run);
    }
    Ok(RunResult {
        run: 0,
        seed: cfg.seed,
        curve,
        steps_in_region,
        target: run.learner.target,
        controller: Controller {
            region: region.clone(),
            params: run.learner.main,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub in_region: bool,
}

/// Greedy closed-loop response from `x0`: rows `k = 0..=steps`, each with the
/// state and the input applied at that state.
///
/// A divergence stops the run; the rows produced so far are returned along
/// with the error.
pub fn evaluate<M: ControlledMap + ?Sized>(
    map: &M,
    controller: &Controller,
    x0: &RawState,
    steps: usize,
) -> (Vec<EvalRow>, Option<Error>) {
    let mut scratch = Scratch::new();
    let mut rows = Vec::with_capacity(steps + 1);
    if x0.dim() != map.state_dim() {
        return (
            rows,
            Some(Error::DimensionMismatch {
                expected: map.state_dim(),
                got: x0.dim(),
            }),
        );
    }
    let mut x = x0.clone();
    for k in 0..=steps {
        let (in_region, u) = match controller.act(&x, &mut scratch) {
            Ok(a) => a,
            Err(e) => return (rows, Some(e)),
        };
        rows.push(EvalRow {
            k,
            x: x.0.clone(),
            u: u.clone(),
            in_region,
        });
        if k == steps {
            break;
        }
        match map.step(&x, &ControlInput(u)) {
            Ok(next) => x = next,
            Err(e) => return (rows, Some(dynamics::with_step(e, k))),
        }
    }
    (rows, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint {
    pub s: Vec<f64>,
    pub u: Vec<f64>,
}

/// `mu(s)` on a uniform lattice over the region-relative box, first
/// coordinate varying slowest.
pub fn control_surface(controller: &Controller, resolution: usize) -> Result<Vec<SurfacePoint>> {
    if resolution < 2 {
        return Err(Error::Contract(format!("grid resolution must be >= 2 (got {resolution})")));
    }
    let n = controller.region.dim();
    let r = controller.region.radius;
    let total = resolution.pow(n as u32);
    let coord = |i: usize| -r + 2.0 * r * i as f64 / (resolution - 1) as f64;
    let points = par::map_range(total, |idx| -> Result<SurfacePoint> {
        let mut s = vec![0.0; n];
        let mut rem = idx;
        for d in (0..n).rev() {
            s[d] = coord(rem % resolution);
            rem /= resolution;
        }
        let out = net::forward(&controller.params, &s)?;
        Ok(SurfacePoint { s, u: out.mu })
    });
    points.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub num_runs: usize,
    /// Two-sided confidence level of the reported bands.
    pub confidence: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_runs: 10,
            confidence: 0.99,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_runs == 0 {
            errs.push("experiment.num_runs must be >= 1".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            errs.push(format!(
                "experiment.confidence must be in (0, 1) (got {})",
                self.confidence
            ));
        }
        errs
    }

    /// Normal quantile `z` with `P(|Z| <= z) = confidence`.
    pub fn z(&self) -> f64 {
        let std = Normal::new(0.0, 1.0).expect("standard normal");
        std.inverse_cdf(0.5 + self.confidence / 2.0)
    }
}

#[derive(Debug)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    pub error: Error,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub mean: Vec<f64>,
    /// `z * sd / sqrt(runs)`; NaN where fewer than two runs have data.
    pub half_width: Vec<f64>,
    pub confidence: f64,
    pub z: f64,
}

/// Per-episode mean and normal-approximation confidence half-width across
/// curves, ignoring NaN entries.
pub fn aggregate(curves: &[Vec<f64>], episodes: usize, z: f64) -> (Vec<f64>, Vec<f64>) {
    (0..episodes)
        .map(|e| {
            let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(e).copied()).filter(|v| !v.is_nan()).collect();
            let n = vals.len() as f64;
            if vals.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let mean = vals.iter().sum::<f64>() / n;
            if vals.len() < 2 {
                return (mean, f64::NAN);
            }
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, z * var.sqrt() / n.sqrt())
        })
        .unzip()
}

/// Independent runs with seeds `cfg.seed + i`; failed runs are excluded from
/// the aggregate and reported.
pub fn run_experiment<M: ControlledMap + ?Sized>(
    map: &M,
    region: &Region,
    cfg: &TrainConfig,
    exp: &ExperimentConfig,
) -> Result<ExperimentResult> {
    let mut errs = cfg.validate(map.state_dim(), map.input_dim());
    errs.extend(exp.validate());
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let outcomes = par::map_range(exp.num_runs, |i| {
        let seed = seeding::run_seed(cfg.seed, i);
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        train(map, region, &run_cfg)
            .map(|r| RunResult { run: i, ..r })
            .map_err(|error| RunFailure { run: i, seed, error })
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(f) => failures.push(f),
        }
    }
    let z = exp.z();
    let curves: Vec<Vec<f64>> = runs.iter().map(|r| r.curve.clone()).collect();
    let (mean, half_width) = aggregate(&curves, cfg.episodes, z);
    Ok(ExperimentResult {
        runs,
        failures,
        mean,
        half_width,
        confidence: exp.confidence,
        z,
    })
}
