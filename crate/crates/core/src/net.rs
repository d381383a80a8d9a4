//! Fully connected NAF network: forward pass, reverse-mode gradient of
//! `Q(s, u)`, Adam, soft target updates and a text checkpoint format.
//!
//! The head is `[v | mu_raw | l_raw]`. `l_raw` packs the lower triangle of
//! `P_L` row-major (`(0,0), (1,0), (1,1), (2,0), ...`); diagonal entries are
//! exponentiated in place, off-diagonal entries are linear.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetArchitecture {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub action_dim: usize,
    /// Bound `u_max` of the `u_max * tanh` action head.
    pub action_scale: f64,
}

impl Default for NetArchitecture {
    fn default() -> Self {
        NetArchitecture {
            input_dim: 2,
            hidden_layers: vec![32, 32, 32],
            action_dim: 1,
            action_scale: 2.0,
        }
    }
}

impl NetArchitecture {
    /// Number of packed lower-triangular entries, `m(m+1)/2`.
    pub fn tri_len(&self) -> usize {
        self.action_dim * (self.action_dim + 1) / 2
    }

    /// `1 + m + m(m+1)/2`.
    pub fn head_width(&self) -> usize {
        1 + self.action_dim + self.tri_len()
    }

    /// `(fan_in, fan_out)` of every layer, input to head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_layers);
        widths.push(self.head_width());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_dim == 0 {
            errs.push("net.input_dim must be >= 1".into());
        }
        if self.action_dim == 0 {
            errs.push("net.action_dim must be >= 1".into());
        }
        if self.hidden_layers.contains(&0) {
            errs.push("net.hidden_layers widths must be >= 1".into());
        }
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            errs.push(format!("net.action_scale must be > 0 (got {})", self.action_scale));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    /// Offset of the row-major `fan_out x fan_in` weight block.
    w: usize,
    /// Offset of the bias vector.
    b: usize,
}

/// All weights and biases of one network, stored contiguously layer by layer
/// (weights row-major, then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    arch: NetArchitecture,
    layout: Vec<LayerLayout>,
    data: Vec<f64>,
}

impl NetParams {
    pub fn zeros(arch: &NetArchitecture) -> Self {
        let mut layout = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in arch.layer_dims() {
            layout.push(LayerLayout {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        NetParams {
            arch: arch.clone(),
            layout,
            data: vec![0.0; off],
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &NetArchitecture, rng: &mut R) -> Self {
        let mut p = NetParams::zeros(arch);
        for l in p.layout.clone() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for w in &mut p.data[l.w..l.b] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn arch(&self) -> &NetArchitecture {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    /// `(fan_in, fan_out)` of layer `i`.
    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        (self.layout[i].fan_in, self.layout[i].fan_out)
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        let l = self.layout[i];
        &self.data[l.w..l.b]
    }

    pub fn bias(&self, i: usize) -> &[f64] {
        let l = self.layout[i];
        &self.data[l.b..l.b + l.fan_out]
    }

    pub fn weights_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.layout[i];
        &mut self.data[l.w..l.b]
    }

    pub fn bias_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.layout[i];
        &mut self.data[l.b..l.b + l.fan_out]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    fn check_same_shape(&self, other: &NetParams) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Contract(format!(
                "parameter shape mismatch: {:?} vs {:?}",
                self.arch.layer_dims(),
                other.arch.layer_dims()
            )));
        }
        Ok(())
    }

    fn check_input(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: s.len(),
            });
        }
        Ok(())
    }
}

/// Network head for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct NafOutput {
    pub v: f64,
    pub mu: Vec<f64>,
    /// Lower-triangular `m x m`, row-major, strictly positive diagonal.
    pub p_l: Vec<f64>,
}

impl NafOutput {
    pub fn action_dim(&self) -> usize {
        self.mu.len()
    }

    /// `P_L^T (u - mu)`, together with `u - mu`.
    fn projected(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.mu.len();
        let d: Vec<f64> = u.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let mut w = vec![0.0; m];
        for (j, wj) in w.iter_mut().enumerate() {
            for (i, di) in d.iter().enumerate().skip(j) {
                *wj += self.p_l[i * m + j] * di;
            }
        }
        (d, w)
    }
}

/// `-1/2 (u - mu)^T P_L P_L^T (u - mu)`.
pub fn advantage(out: &NafOutput, u: &[f64]) -> f64 {
    let (_, w) = out.projected(u);
    -0.5 * w.iter().map(|x| x * x).sum::<f64>()
}

/// `V + A`.
pub fn q_value(out: &NafOutput, u: &[f64]) -> f64 {
    out.v + advantage(out, u)
}

/// Reusable activation buffers for forward/backward passes.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    /// `acts[0]` is the input, `acts[i]` the output of layer `i-1` (ReLU
    /// applied for hidden layers, raw for the head).
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    pub fn new() -> Self {
        Self::default()
    }
}

fn forward_into(params: &NetParams, s: &[f64], scratch: &mut Scratch) {
    let n = params.layout.len();
    scratch.acts.resize(n + 1, Vec::new());
    scratch.acts[0].clear();
    scratch.acts[0].extend_from_slice(s);
    for (li, l) in params.layout.iter().enumerate() {
        let (inputs, rest) = scratch.acts.split_at_mut(li + 1);
        let x = &inputs[li];
        let out = &mut rest[0];
        out.clear();
        out.extend_from_slice(&params.data[l.b..l.b + l.fan_out]);
        let w = &params.data[l.w..l.b];
        for (o, y) in out.iter_mut().enumerate() {
            let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
            *y += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        if li + 1 < n {
            for y in out.iter_mut() {
                if *y < 0.0 {
                    *y = 0.0;
                }
            }
        }
    }
}

fn decode_head(arch: &NetArchitecture, raw: &[f64]) -> NafOutput {
    let m = arch.action_dim;
    let mu = raw[1..1 + m]
        .iter()
        .map(|r| arch.action_scale * r.tanh())
        .collect();
    let mut p_l = vec![0.0; m * m];
    let mut k = 1 + m;
    for i in 0..m {
        for j in 0..=i {
            p_l[i * m + j] = if i == j { raw[k].exp() } else { raw[k] };
            k += 1;
        }
    }
    NafOutput { v: raw[0], mu, p_l }
}

/// Evaluate the network at an in-region offset `s`.
pub fn forward(params: &NetParams, s: &[f64]) -> Result<NafOutput> {
    forward_with(params, s, &mut Scratch::new())
}

pub fn forward_with(params: &NetParams, s: &[f64], scratch: &mut Scratch) -> Result<NafOutput> {
    params.check_input(s)?;
    forward_into(params, s, scratch);
    Ok(decode_head(&params.arch, scratch.acts.last().unwrap()))
}

/// Value head only.
pub fn value(params: &NetParams, s: &[f64], scratch: &mut Scratch) -> Result<f64> {
    params.check_input(s)?;
    forward_into(params, s, scratch);
    Ok(scratch.acts.last().unwrap()[0])
}

/// Adds `scale * dQ(s,u)/dtheta` into `grad` and returns `Q(s,u)`.
pub fn accumulate_q_grad(
    params: &NetParams,
    s: &[f64],
    u: &[f64],
    scale: f64,
    grad: &mut NetParams,
    scratch: &mut Scratch,
) -> Result<f64> {
    params.check_input(s)?;
    forward_into(params, s, scratch);
    backward_cached(params, u, scale, grad, scratch)
}

/// Like [`accumulate_q_grad`] but reuses the activations left in `scratch`
/// by the last [`forward_with`] call on the same parameters.
pub fn backward_cached(
    params: &NetParams,
    u: &[f64],
    scale: f64,
    grad: &mut NetParams,
    scratch: &mut Scratch,
) -> Result<f64> {
    params.check_same_shape(grad)?;
    let arch = &params.arch;
    let m = arch.action_dim;
    if u.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: u.len(),
        });
    }
    if scratch.acts.len() != params.layout.len() + 1 {
        return Err(Error::Contract("backward_cached called before forward".into()));
    }
    let out = decode_head(arch, scratch.acts.last().unwrap());
    let (d, w) = out.projected(u);
    let q = out.v - 0.5 * w.iter().map(|x| x * x).sum::<f64>();

    // Head gradient: dQ/dv = 1, dQ/dmu = P P^T d, dQ/dP_ij = -w_j d_i.
    let head = &mut scratch.delta;
    head.clear();
    head.resize(arch.head_width(), 0.0);
    head[0] = scale;
    for i in 0..m {
        let pw: f64 = (0..=i).map(|j| out.p_l[i * m + j] * w[j]).sum();
        let mu = out.mu[i];
        let dtanh = arch.action_scale - mu * mu / arch.action_scale;
        head[1 + i] = scale * pw * dtanh;
    }
    let mut k = 1 + m;
    for i in 0..m {
        for j in 0..=i {
            let g = -scale * w[j] * d[i];
            head[k] = if i == j { g * out.p_l[i * m + i] } else { g };
            k += 1;
        }
    }

    for li in (0..params.layout.len()).rev() {
        let l = params.layout[li];
        let x = &scratch.acts[li];
        let delta = &scratch.delta;
        {
            let (gw, gb) = grad.data[l.w..l.b + l.fan_out].split_at_mut(l.b - l.w);
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[o] += dv;
                for (g, xi) in gw[o * l.fan_in..(o + 1) * l.fan_in].iter_mut().zip(x) {
                    *g += dv * xi;
                }
            }
        }
        if li == 0 {
            break;
        }
        let wts = &params.data[l.w..l.b];
        let prev = &mut scratch.delta_prev;
        prev.clear();
        prev.resize(l.fan_in, 0.0);
        for (o, &dv) in delta.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            for (p, wv) in prev.iter_mut().zip(&wts[o * l.fan_in..(o + 1) * l.fan_in]) {
                *p += dv * wv;
            }
        }
        // ReLU subgradient at exactly zero is zero.
        for (p, a) in prev.iter_mut().zip(x) {
            if *a <= 0.0 {
                *p = 0.0;
            }
        }
        std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
    }
    Ok(q)
}

/// Gradient of `loss_grad * Q(s, u; theta)` with respect to every parameter.
pub fn backward(params: &NetParams, s: &[f64], u: &[f64], loss_grad: f64) -> Result<NetParams> {
    let mut grad = params.zeros_like();
    accumulate_q_grad(params, s, u, loss_grad, &mut grad, &mut Scratch::new())?;
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub stepsize: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            stepsize: 1.25e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            errs.push(format!("adam.stepsize must be > 0 (got {})", self.stepsize));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("adam.{name} must be in [0, 1) (got {b})"));
            }
        }
        if !(self.eps_hat > 0.0) {
            errs.push(format!("adam.eps_hat must be > 0 (got {})", self.eps_hat));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &NetParams) -> Self {
        AdamState {
            config,
            first: vec![0.0; params.len()],
            second: vec![0.0; params.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One bias-corrected Adam step in place.
pub fn adam_step(params: &mut NetParams, grad: &NetParams, opt: &mut AdamState) -> Result<()> {
    params.check_same_shape(grad)?;
    if opt.first.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    if let Some(i) = grad.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad.data[i])));
    }
    let c = opt.config;
    opt.steps += 1;
    let t = opt.steps as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (((p, &g), m), v) in params
        .data
        .iter_mut()
        .zip(&grad.data)
        .zip(&mut opt.first)
        .zip(&mut opt.second)
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= c.stepsize * m_hat / (v_hat.sqrt() + c.eps_hat);
    }
    Ok(())
}

/// `target <- beta * main + (1 - beta) * target`.
pub fn soft_update(target: &mut NetParams, main: &NetParams, beta: f64) -> Result<()> {
    target.check_same_shape(main)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!("soft update beta {beta} outside [0, 1]")));
    }
    if beta == 0.0 {
        return Ok(());
    }
    for (t, m) in target.data.iter_mut().zip(&main.data) {
        *t = beta * m + (1.0 - beta) * *t;
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &str = "nafchaos-net";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize architecture and parameters. Floats use the shortest
/// round-trip decimal form so reading back is bit-exact.
pub fn write_checkpoint(params: &NetParams) -> String {
    let a = &params.arch;
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(s, "input_dim {}", a.input_dim);
    let _ = writeln!(
        s,
        "hidden_layers{}",
        a.hidden_layers.iter().map(|w| format!(" {w}")).collect::<String>()
    );
    let _ = writeln!(s, "action_dim {}", a.action_dim);
    let _ = writeln!(s, "action_scale {:?}", a.action_scale);
    for i in 0..params.num_layers() {
        let (fan_in, fan_out) = params.layer_shape(i);
        let _ = writeln!(s, "layer {i} {fan_in} {fan_out}");
        for row in params.weights(i).chunks(fan_in) {
            let _ = writeln!(s, "w{}", floats(row));
        }
        let _ = writeln!(s, "b{}", floats(params.bias(i)));
    }
    s.push_str("end\n");
    s
}

fn floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!(" {x:?}")).collect()
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn expect(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        loop {
            let (no, line) = self
                .inner
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected `{key}`")))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            if head != key {
                return Err(Error::Checkpoint(format!(
                    "line {}: expected `{key}`, found `{head}`",
                    no + 1
                )));
            }
            return Ok((no + 1, parts.collect()));
        }
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::Checkpoint(format!("line {line}: cannot parse `{tok}`")))
}

fn single<T: std::str::FromStr>(lines: &mut Lines<'_>, key: &str) -> Result<T> {
    let (no, toks) = lines.expect(key)?;
    match toks.as_slice() {
        [t] => parse_num(t, no),
        _ => Err(Error::Checkpoint(format!("line {no}: `{key}` takes one value"))),
    }
}

fn float_row(lines: &mut Lines<'_>, key: &str, len: usize) -> Result<Vec<f64>> {
    let (no, toks) = lines.expect(key)?;
    if toks.len() != len {
        return Err(Error::Checkpoint(format!(
            "line {no}: expected {len} values, found {}",
            toks.len()
        )));
    }
    let row = toks
        .iter()
        .map(|t| parse_num::<f64>(t, no))
        .collect::<Result<Vec<_>>>()?;
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("line {no}: non-finite parameter")));
    }
    Ok(row)
}

/// Parse text produced by [`write_checkpoint`].
pub fn read_checkpoint(text: &str) -> Result<NetParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (no, toks) = lines.expect(CHECKPOINT_MAGIC)?;
    let version: u32 = match toks.as_slice() {
        [v] => parse_num(v, no)?,
        _ => return Err(Error::Checkpoint("missing version".into())),
    };
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let input_dim = single(&mut lines, "input_dim")?;
    let (no, toks) = lines.expect("hidden_layers")?;
    let hidden_layers = toks
        .iter()
        .map(|t| parse_num(t, no))
        .collect::<Result<Vec<usize>>>()?;
    let arch = NetArchitecture {
        input_dim,
        hidden_layers,
        action_dim: single(&mut lines, "action_dim")?,
        action_scale: single(&mut lines, "action_scale")?,
    };
    let errs = arch.validate();
    if !errs.is_empty() {
        return Err(Error::Checkpoint(errs.join("; ")));
    }
    let mut params = NetParams::zeros(&arch);
    for i in 0..params.num_layers() {
        let (fan_in, fan_out) = params.layer_shape(i);
        let (no, toks) = lines.expect("layer")?;
        let hdr = toks
            .iter()
            .map(|t| parse_num(t, no))
            .collect::<Result<Vec<usize>>>()?;
        if hdr != [i, fan_in, fan_out] {
            return Err(Error::Checkpoint(format!(
                "line {no}: layer header {hdr:?} does not match architecture ({i}, {fan_in}, {fan_out})"
            )));
        }
        for o in 0..fan_out {
            let row = float_row(&mut lines, "w", fan_in)?;
            params.weights_mut(i)[o * fan_in..(o + 1) * fan_in].copy_from_slice(&row);
        }
        let b = float_row(&mut lines, "b", fan_out)?;
        params.bias_mut(i).copy_from_slice(&b);
    }
    lines.expect("end")?;
    Ok(params)
}
