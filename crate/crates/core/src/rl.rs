//! Reward, experience replay, exploration noise and the TD update.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, AdamState, NafOutput, NetParams, Scratch};
use crate::region::TransformedState;

/// Quadratic reward weights and the out-of-region penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub m1: Vec<Vec<f64>>,
    pub m2: Vec<Vec<f64>>,
    pub q_penalty: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            m1: vec![vec![0.08, 0.0], vec![0.0, 0.08]],
            m2: vec![vec![0.18]],
            q_penalty: 20.0,
        }
    }
}

/// Symmetric positive definite test via Cholesky.
pub fn is_positive_definite(a: &[Vec<f64>]) -> bool {
    let n = a.len();
    if n == 0 || a.iter().any(|r| r.len() != n) {
        return false;
    }
    for i in 0..n {
        for j in 0..i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * (1.0 + a[i][j].abs()) {
                return false;
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return false;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

fn quad_form(m: &[Vec<f64>], x: &[f64]) -> f64 {
    m.iter()
        .zip(x)
        .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

impl RewardSpec {
    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.m1.len() != state_dim {
            errs.push(format!("reward.m1 must be {state_dim}x{state_dim}"));
        } else if !is_positive_definite(&self.m1) {
            errs.push("reward.m1 must be symmetric positive definite".into());
        }
        if self.m2.len() != action_dim {
            errs.push(format!("reward.m2 must be {action_dim}x{action_dim}"));
        } else if !is_positive_definite(&self.m2) {
            errs.push("reward.m2 must be symmetric positive definite".into());
        }
        if !(self.q_penalty > 0.0 && self.q_penalty.is_finite()) {
            errs.push(format!("reward.q_penalty must be > 0 (got {})", self.q_penalty));
        }
        errs
    }
}

/// `-q` on leaving the region, else `-(s'-s)^T M1 (s'-s) - u^T M2 u`.
pub fn reward(s: &[f64], u: &[f64], s_next: &TransformedState, spec: &RewardSpec) -> Result<f64> {
    if s.len() != spec.m1.len() {
        return Err(Error::DimensionMismatch {
            expected: spec.m1.len(),
            got: s.len(),
        });
    }
    if u.len() != spec.m2.len() {
        return Err(Error::DimensionMismatch {
            expected: spec.m2.len(),
            got: u.len(),
        });
    }
    match s_next {
        TransformedState::Out => Ok(-spec.q_penalty),
        TransformedState::InRegion(sn) => {
            if sn.len() != s.len() {
                return Err(Error::DimensionMismatch {
                    expected: s.len(),
                    got: sn.len(),
                });
            }
            let ds: Vec<f64> = sn.iter().zip(s).map(|(a, b)| a - b).collect();
            Ok(-quad_form(&spec.m1, &ds) - quad_form(&spec.m2, u))
        }
    }
}

/// One learning sample. `s` is always an in-region offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub s_next: TransformedState,
    pub r: f64,
}

/// Fixed-capacity FIFO of transitions in flat storage.
///
/// Each slot is `[s | u | s_next | out_flag | r]`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    data: Vec<f64>,
    /// Slot of the oldest entry once the ring has wrapped.
    head: usize,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        ReplayBuffer {
            capacity,
            state_dim,
            action_dim,
            data: Vec::new(),
            head: 0,
            len: 0,
        }
    }

    fn stride(&self) -> usize {
        2 * self.state_dim + self.action_dim + 2
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        let (n, m) = (self.state_dim, self.action_dim);
        if t.s.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: t.s.len() });
        }
        if t.u.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: t.u.len() });
        }
        let stride = self.stride();
        let mut slot = Vec::with_capacity(stride);
        slot.extend_from_slice(&t.s);
        slot.extend_from_slice(&t.u);
        match &t.s_next {
            TransformedState::InRegion(sn) => {
                if sn.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: sn.len() });
                }
                slot.extend_from_slice(sn);
                slot.push(0.0);
            }
            TransformedState::Out => {
                slot.extend(std::iter::repeat_n(0.0, n));
                slot.push(1.0);
            }
        }
        slot.push(t.r);

        if self.len < self.capacity {
            self.data.extend_from_slice(&slot);
            self.len += 1;
        } else {
            let at = self.head * stride;
            self.data[at..at + stride].copy_from_slice(&slot);
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }

    /// The `i`-th surviving transition, oldest first.
    pub fn get(&self, i: usize) -> Option<Transition> {
        if i >= self.len {
            return None;
        }
        let slot = (self.head + i) % self.capacity;
        Some(self.decode(slot))
    }

    fn decode(&self, slot: usize) -> Transition {
        let (n, m) = (self.state_dim, self.action_dim);
        let stride = self.stride();
        let d = &self.data[slot * stride..(slot + 1) * stride];
        let s_next = if d[2 * n + m] != 0.0 {
            TransformedState::Out
        } else {
            TransformedState::InRegion(d[n + m..2 * n + m].to_vec())
        };
        Transition {
            s: d[..n].to_vec(),
            u: d[n..n + m].to_vec(),
            s_next,
            r: d[2 * n + m + 1],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len).map(move |i| self.get(i).unwrap())
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.len < n || n == 0 {
            return Err(Error::InsufficientSamples {
                available: self.len,
                requested: n,
            });
        }
        Ok((0..n).map(|_| self.decode(rng.random_range(0..self.len))).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuConfig {
    pub theta: f64,
    pub sigma: f64,
    /// Long-run mean, applied to every action component.
    pub mu: f64,
    /// Sigma reached at the end of the decay window.
    pub sigma_final: f64,
    /// Fraction of training over which sigma decays linearly; 0 disables decay.
    pub decay_fraction: f64,
}

impl Default for OuConfig {
    fn default() -> Self {
        OuConfig {
            theta: 0.15,
            sigma: 0.3,
            mu: 0.0,
            sigma_final: 0.05,
            decay_fraction: 0.5,
        }
    }
}

impl OuConfig {
    /// Noise scale for `episode` out of `episodes`.
    pub fn sigma_at(&self, episode: usize, episodes: usize) -> f64 {
        if self.decay_fraction <= 0.0 || episodes <= 1 {
            return self.sigma;
        }
        let window = self.decay_fraction * (episodes - 1) as f64;
        let frac = (episode as f64 / window).min(1.0);
        self.sigma + (self.sigma_final - self.sigma) * frac
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            errs.push(format!("noise.theta must be in (0, 1] (got {})", self.theta));
        }
        if !(self.sigma >= 0.0) || !(self.sigma_final >= 0.0) {
            errs.push("noise.sigma and noise.sigma_final must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            errs.push(format!(
                "noise.decay_fraction must be in [0, 1] (got {})",
                self.decay_fraction
            ));
        }
        errs
    }
}

/// Discrete Ornstein-Uhlenbeck process.
#[derive(Debug, Clone, PartialEq)]
pub struct OuNoise {
    pub value: Vec<f64>,
    pub theta: f64,
    pub sigma: f64,
    pub mu: Vec<f64>,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, sigma: f64, mu: f64) -> Self {
        OuNoise {
            value: vec![0.0; dim],
            theta,
            sigma,
            mu: vec![mu; dim],
        }
    }

    pub fn reset(&mut self) {
        self.value.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `x <- x + theta (mu - x) + sigma * xi`, `xi ~ N(0, 1)`.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        for (x, m) in self.value.iter_mut().zip(&self.mu) {
            let xi: f64 = rng.sample(StandardNormal);
            *x += self.theta * (m - *x) + self.sigma * xi;
        }
        &self.value
    }
}

/// `clip(mu + noise, -u_max, u_max)`.
pub fn explore_action(out: &NafOutput, noise: &[f64], u_max: f64) -> Vec<f64> {
    out.mu
        .iter()
        .zip(noise)
        .map(|(m, n)| (m + n).clamp(-u_max, u_max))
        .collect()
}

/// `r + gamma * V(s'; target)`, or just `r` when `s'` left the region.
pub fn td_target(t: &Transition, target: &NetParams, gamma: f64, scratch: &mut Scratch) -> Result<f64> {
    match &t.s_next {
        TransformedState::Out => Ok(t.r),
        TransformedState::InRegion(sn) => {
            if gamma == 0.0 {
                return Ok(t.r);
            }
            Ok(t.r + gamma * net::value(target, sn, scratch)?)
        }
    }
}

/// Mean squared TD error of `main` over `batch` with fixed targets, and its
/// gradient accumulated into `grad` (which is overwritten).
pub fn td_loss_and_grad(
    main: &NetParams,
    target: &NetParams,
    batch: &[Transition],
    gamma: f64,
    grad: &mut NetParams,
    scratch: &mut Scratch,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty minibatch".into()));
    }
    grad.fill(0.0);
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for t in batch {
        let y = td_target(t, target, gamma, scratch)?;
        let out = net::forward_with(main, &t.s, scratch)?;
        let err = net::q_value(&out, &t.u) - y;
        loss += err * err * inv_n;
        net::backward_cached(main, &t.u, 2.0 * err * inv_n, grad, scratch)?;
    }
    Ok(loss)
}

/// Main network, target network and optimizer of one learner.
#[derive(Debug, Clone)]
pub struct NafLearner {
    pub main: NetParams,
    pub target: NetParams,
    pub opt: AdamState,
    grad: NetParams,
    scratch: Scratch,
}

impl NafLearner {
    /// Target starts as an exact copy of `main`.
    pub fn new(main: NetParams, adam: net::AdamConfig) -> Self {
        NafLearner {
            target: main.clone(),
            opt: AdamState::new(adam, &main),
            grad: main.zeros_like(),
            scratch: Scratch::new(),
            main,
        }
    }

    pub fn forward(&mut self, s: &[f64]) -> Result<NafOutput> {
        net::forward_with(&self.main, s, &mut self.scratch)
    }

    /// One Adam step on the TD loss followed by the soft target update.
    /// Returns the loss before the step.
    pub fn update(&mut self, batch: &[Transition], gamma: f64, beta: f64) -> Result<f64> {
        update_step(
            &mut self.main,
            &mut self.target,
            &mut self.opt,
            batch,
            gamma,
            beta,
            &mut self.grad,
            &mut self.scratch,
        )
    }
}

/// One learning iteration; `grad` and `scratch` are work buffers.
#[allow(clippy::too_many_arguments)]
pub fn update_step(
    main: &mut NetParams,
    target: &mut NetParams,
    opt: &mut AdamState,
    batch: &[Transition],
    gamma: f64,
    beta: f64,
    grad: &mut NetParams,
    scratch: &mut Scratch,
) -> Result<f64> {
    let loss = td_loss_and_grad(main, target, batch, gamma, grad, scratch)?;
    if !loss.is_finite() {
        let worst = batch.iter().map(|t| t.r.abs()).fold(0.0, f64::max);
        return Err(Error::NonFinite(format!(
            "TD loss is {loss} (batch of {}, max |r| = {worst})",
            batch.len()
        )));
    }
    net::adam_step(main, grad, opt)?;
    net::soft_update(target, main, beta)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{AdamConfig, NetArchitecture};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(id: f64) -> Transition {
        Transition {
            s: vec![id, 0.0],
            u: vec![0.1],
            s_next: TransformedState::InRegion(vec![0.0, id]),
            r: -id,
        }
    }

    #[test]
    fn reward_examples() {
        let spec = RewardSpec::default();
        let s = [0.1, 0.0];
        assert_eq!(reward(&s, &[0.0], &TransformedState::Out, &spec).unwrap(), -20.0);
        assert_eq!(
            reward(&s, &[0.0], &TransformedState::InRegion(s.to_vec()), &spec).unwrap(),
            0.0
        );
        let r = reward(&s, &[0.5], &TransformedState::InRegion(vec![0.0, 0.0]), &spec).unwrap();
        assert!((r + 0.0458).abs() < 1e-15);
        assert!(reward(&[0.1], &[0.0], &TransformedState::Out, &spec).is_err());
    }

    #[test]
    fn positive_definite_check() {
        assert!(is_positive_definite(&RewardSpec::default().m1));
        assert!(is_positive_definite(&[vec![2.0, 1.0], vec![1.0, 2.0]]));
        assert!(!is_positive_definite(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert!(!is_positive_definite(&[vec![1.0, 0.5], vec![0.0, 1.0]]));
        assert!(!is_positive_definite(&[vec![0.0]]));
        let bad = RewardSpec {
            m2: vec![vec![-0.18]],
            ..Default::default()
        };
        assert_eq!(bad.validate(2, 1).len(), 1);
    }

    #[test]
    fn ou_deterministic_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ou = OuNoise::new(1, 0.15, 0.0, 0.0);
        for _ in 0..10 {
            assert_eq!(ou.sample(&mut rng), &[0.0]);
        }
        ou.value = vec![1.0];
        assert!((ou.sample(&mut rng)[0] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn sigma_schedule() {
        let c = OuConfig::default();
        assert_eq!(c.sigma_at(0, 101), 0.3);
        assert!((c.sigma_at(25, 101) - 0.175).abs() < 1e-12);
        assert!((c.sigma_at(50, 101) - 0.05).abs() < 1e-12);
        assert!((c.sigma_at(100, 101) - 0.05).abs() < 1e-12);
        let flat = OuConfig {
            decay_fraction: 0.0,
            ..c
        };
        assert_eq!(flat.sigma_at(80, 101), 0.3);
    }

    #[test]
    fn explore_action_clips() {
        let out = NafOutput {
            v: 0.0,
            mu: vec![1.9],
            p_l: vec![1.0],
        };
        assert_eq!(explore_action(&out, &[0.0], 2.0), vec![1.9]);
        assert_eq!(explore_action(&out, &[0.5], 2.0), vec![2.0]);
        let out = NafOutput {
            mu: vec![0.0],
            ..out
        };
        assert_eq!(explore_action(&out, &[-0.3], 2.0), vec![-0.3]);
    }

    #[test]
    fn buffer_fifo() {
        let mut b = ReplayBuffer::new(2, 2, 1);
        assert!(b.is_empty());
        b.push(&tr(1.0)).unwrap();
        assert_eq!(b.len(), 1);
        b.push(&tr(2.0)).unwrap();
        b.push(&tr(3.0)).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.iter().collect::<Vec<_>>(), vec![tr(2.0), tr(3.0)]);
        b.push(&tr(4.0)).unwrap();
        assert_eq!(b.iter().collect::<Vec<_>>(), vec![tr(3.0), tr(4.0)]);
    }

    #[test]
    fn buffer_keeps_out_token() {
        let mut b = ReplayBuffer::new(4, 2, 1);
        let t = Transition {
            s: vec![0.5, -0.5],
            u: vec![1.0],
            s_next: TransformedState::Out,
            r: -20.0,
        };
        b.push(&t).unwrap();
        assert_eq!(b.get(0).unwrap(), t);
        assert!(b.push(&Transition { s: vec![0.0], ..t }).is_err());
    }

    #[test]
    fn minibatch_errors_and_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(100, 2, 1);
        b.push(&tr(1.0)).unwrap();
        assert_eq!(b.sample_minibatch(1, &mut rng).unwrap(), vec![tr(1.0)]);
        for i in 0..62 {
            b.push(&tr(i as f64)).unwrap();
        }
        assert_eq!(b.len(), 63);
        assert!(matches!(
            b.sample_minibatch(64, &mut rng),
            Err(Error::InsufficientSamples { available: 63, requested: 64 })
        ));
    }

    #[test]
    fn td_target_examples() {
        let arch = NetArchitecture::default();
        let mut p = NetParams::zeros(&arch);
        let mut scratch = Scratch::new();
        let out = Transition {
            s: vec![0.0, 0.0],
            u: vec![0.0],
            s_next: TransformedState::Out,
            r: -20.0,
        };
        assert_eq!(td_target(&out, &p, 0.99, &mut scratch).unwrap(), -20.0);

        // Head bias on V only: V(s') = 1 everywhere.
        let last = p.num_layers() - 1;
        p.bias_mut(last)[0] = 1.0;
        let t = Transition {
            s_next: TransformedState::InRegion(vec![0.3, 0.3]),
            r: 0.0,
            ..out.clone()
        };
        assert_eq!(td_target(&t, &p, 0.99, &mut scratch).unwrap(), 0.99);
        assert_eq!(td_target(&Transition { r: -1.5, ..t.clone() }, &p, 0.0, &mut scratch).unwrap(), -1.5);
    }

    #[test]
    fn self_consistent_batch_has_zero_loss() {
        // Zero net: Q(s, 0) = 0 and V(s') = 0, so r = 0 transitions are consistent.
        let arch = NetArchitecture::default();
        let mut main = NetParams::zeros(&arch);
        let mut target = main.clone();
        let mut opt = AdamState::new(AdamConfig::default(), &main);
        let batch: Vec<Transition> = (0..8)
            .map(|i| Transition {
                s: vec![0.1 * i as f64, -0.05],
                u: vec![0.0],
                s_next: TransformedState::InRegion(vec![0.0, 0.1]),
                r: 0.0,
            })
            .collect();
        let mut grad = main.zeros_like();
        let mut scratch = Scratch::new();
        let loss = update_step(&mut main, &mut target, &mut opt, &batch, 0.99, 0.01, &mut grad, &mut scratch)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
        assert_eq!(main, NetParams::zeros(&arch));
    }

    #[test]
    fn beta_zero_freezes_target() {
        let arch = NetArchitecture::default();
        let main = NetParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(2));
        let mut learner = NafLearner::new(main, AdamConfig::default());
        let before = learner.target.clone();
        let batch = vec![tr(0.3), tr(0.1)];
        learner.update(&batch, 0.99, 0.0).unwrap();
        assert_eq!(learner.target, before);
        assert_ne!(learner.main, before);
    }
}
