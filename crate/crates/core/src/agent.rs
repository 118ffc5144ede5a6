//! The CNN trader.
//!
//! Each asset row of the observation passes through the same stack of
//! time-axis convolutions (`conv → ReLU → normalization`), so the network is
//! independent of the asset count and equivariant under asset permutations.
//! The flattened features of an asset are joined with that asset's advice
//! weight and mapped to a hidden vector `h_a`. The portfolio head scores
//! `[h_a, v_a]` per asset and applies a softmax across assets; the return head
//! reads the asset mean of `[h_a, v_a]`.
//!
//! Normalization layers run in two modes. [`forward`] and [`loss`] use the
//! running statistics, so a decision depends on its own record only. The
//! training objective [`batch_loss`] normalizes with the statistics of the
//! batch, and [`gradient`] differentiates through them exactly. Each training
//! step folds the batch statistics into the running ones.

use std::ops::Range;
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{FluctuationVector, StateTensor};
use crate::rng::{self, EngineRng};
use crate::weights::{argmax, PortfolioWeights};

const NORM_EPS: f64 = 1e-3;
/// Weight of the newest batch in the running normalization statistics.
const NORM_MOMENTUM: f64 = 0.1;

/// Layer shapes. Immutable once parameters exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Periods per observation.
    pub history: usize,
    /// Channel counts from the input (always 4) through each conv layer.
    pub channels: Vec<usize>,
    /// Filter width along the time axis.
    pub width: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            history: 10,
            channels: vec![StateTensor::CHANNELS, 16, 16, 16],
            width: 3,
            hidden: 16,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.channels.first() != Some(&StateTensor::CHANNELS) {
            return Err(Error::InvalidArgument(format!(
                "input channels must be {}",
                StateTensor::CHANNELS
            )));
        }
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("need at least one conv layer with channels".into()));
        }
        if self.width == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("filter width and hidden size must be positive".into()));
        }
        let layers = self.channels.len() - 1;
        if self.history < layers * (self.width - 1) + 1 {
            return Err(Error::InvalidArgument(format!(
                "history {} too short for {layers} layers of width {}",
                self.history, self.width
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.channels.len() - 1
    }

    /// Time length entering layer `l` (`l = layers()` is the output length).
    fn length(&self, l: usize) -> usize {
        self.history - l * (self.width - 1)
    }

    fn features(&self) -> usize {
        self.length(self.layers()) * self.channels[self.layers()]
    }

    fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut at = 0;
        let mut push = |name: String, len: usize| {
            blocks.push((name, at..at + len));
            at += len;
        };
        for l in 0..self.layers() {
            let (ci, co) = (self.channels[l], self.channels[l + 1]);
            push(format!("conv{l}.weight"), co * ci * self.width);
            push(format!("conv{l}.bias"), co);
            push(format!("norm{l}.scale"), co);
            push(format!("norm{l}.shift"), co);
        }
        let z = self.features() + 1;
        push("fusion.weight".into(), self.hidden * z);
        push("fusion.bias".into(), self.hidden);
        push("head.portfolio".into(), self.hidden + 1);
        push("head.return".into(), self.hidden + 1);
        push("head.return_bias".into(), 1);
        Layout { blocks, len: at }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<(String, Range<usize>)>,
    len: usize,
}

impl Layout {
    // blocks are pushed in a fixed order; see `Architecture::layout`
    fn conv(&self, l: usize) -> [Range<usize>; 4] {
        let i = 4 * l;
        [
            self.blocks[i].1.clone(),
            self.blocks[i + 1].1.clone(),
            self.blocks[i + 2].1.clone(),
            self.blocks[i + 3].1.clone(),
        ]
    }

    fn tail(&self) -> [Range<usize>; 5] {
        let n = self.blocks.len();
        std::array::from_fn(|k| self.blocks[n - 5 + k].1.clone())
    }
}

/// All trainable weights plus the normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParameters {
    arch: Architecture,
    values: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

impl AgentParameters {
    /// Every block zero, running statistics at mean 0 and variance 1.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let len = arch.parameter_count();
        let running_mean = arch.channels[1..].iter().map(|c| vec![0.0; *c]).collect();
        let running_var = arch.channels[1..].iter().map(|c| vec![1.0; *c]).collect();
        Ok(Self {
            arch,
            values: vec![0.0; len],
            running_mean,
            running_var,
        })
    }

    /// He-normal weights for rectified layers, unit normalization scales,
    /// zero biases and a zero advice weight in the portfolio head.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = rng::seeded(seed);
        let layout = p.arch.layout();
        let fill = |values: &mut [f64], fan_in: usize, gain: f64, rng: &mut EngineRng| {
            let n = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive variance");
            values.iter_mut().for_each(|v| *v = n.sample(rng));
        };
        for l in 0..p.arch.layers() {
            let [w, _, scale, _] = layout.conv(l);
            let fan_in = p.arch.channels[l] * p.arch.width;
            fill(&mut p.values[w], fan_in, 2.0, &mut rng);
            p.values[scale].iter_mut().for_each(|v| *v = 1.0);
        }
        let [fw, _, hp, hr, _] = layout.tail();
        let z = p.arch.features() + 1;
        fill(&mut p.values[fw], z, 2.0, &mut rng);
        let h = p.arch.hidden;
        fill(&mut p.values[hp.start..hp.start + h], h, 1.0, &mut rng);
        fill(&mut p.values[hr.start..hr.start + h], h, 1.0, &mut rng);
        Ok(p)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Named parameter blocks as ranges into [`values`](Self::values).
    pub fn blocks(&self) -> Vec<(String, Range<usize>)> {
        self.arch.layout().blocks
    }

    /// Euclidean norm over every trainable value.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn running_mean(&self) -> &[Vec<f64>] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[Vec<f64>] {
        &self.running_var
    }
}

/// Where normalization layers take their statistics from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Running statistics; records are independent of each other.
    Inference,
    /// Statistics of the current batch over every asset row and time step.
    Training,
}

/// Values of one conv layer over all rows, kept for the backward pass.
struct LayerTrace {
    /// Layer input, `[t * C_in + c]` per row.
    inputs: Vec<Vec<f64>>,
    /// Conv output before rectification, `[t * C_out + o]` per row.
    conv: Vec<Vec<f64>>,
    /// Rectified output after centering and scaling by the statistics.
    normed: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Fusion-stage values of one asset row.
struct HeadTrace {
    fused: Vec<f64>,
    hidden_pre: Vec<f64>,
    head_in: Vec<f64>,
}

struct RecordTrace {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    mean_head_in: Vec<f64>,
    predicted_return: f64,
}

struct Trace {
    layers: Vec<LayerTrace>,
    heads: Vec<HeadTrace>,
    /// Rows `offsets[r]..offsets[r + 1]` belong to record `r`.
    offsets: Vec<usize>,
    records: Vec<RecordTrace>,
}

fn check_inputs(params: &AgentParameters, state: &StateTensor, advice: &PortfolioWeights) -> Result<()> {
    if state.history() != params.arch.history {
        return Err(Error::ShapeMismatch(format!(
            "state covers {} periods, network expects {}",
            state.history(),
            params.arch.history
        )));
    }
    if advice.len() != state.assets() {
        return Err(Error::ShapeMismatch(format!(
            "{} advice weights for {} assets",
            advice.len(),
            state.assets()
        )));
    }
    Ok(())
}

/// Log-probabilities of the normalized exponential; finite for finite logits.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Per-channel mean and population variance of the rectified conv outputs.
fn channel_moments(conv: &[Vec<f64>], co: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; co];
    let mut n = 0usize;
    for s in conv {
        for (i, v) in s.iter().enumerate() {
            mean[i % co] += v.max(0.0);
        }
        n += s.len() / co;
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; co];
    for s in conv {
        for (i, v) in s.iter().enumerate() {
            var[i % co] += (v.max(0.0) - mean[i % co]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn run(params: &AgentParameters, layout: &Layout, records: &[(&StateTensor, &[f64])], mode: Mode) -> Trace {
    let arch = &params.arch;
    let v = &params.values;
    let k = arch.width;
    let mut offsets = vec![0];
    let mut x: Vec<Vec<f64>> = Vec::new();
    let mut advice = Vec::new();
    for (state, adv) in records {
        for (a, &w) in adv.iter().enumerate() {
            x.push(
                (0..arch.history)
                    .flat_map(|t| (0..StateTensor::CHANNELS).map(move |c| (t, c)))
                    .map(|(t, c)| state.get(a, t, c))
                    .collect(),
            );
            advice.push(w);
        }
        offsets.push(x.len());
    }

    let mut layers = Vec::with_capacity(arch.layers());
    for l in 0..arch.layers() {
        let [w, b, scale, shift] = layout.conv(l);
        let (ci, co) = (arch.channels[l], arch.channels[l + 1]);
        let t_out = arch.length(l + 1);
        let conv: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                let mut s = vec![0.0; t_out * co];
                for t in 0..t_out {
                    for o in 0..co {
                        let mut acc = v[b.start + o];
                        for c in 0..ci {
                            let wrow = w.start + (o * ci + c) * k;
                            for j in 0..k {
                                acc += v[wrow + j] * row[(t + j) * ci + c];
                            }
                        }
                        s[t * co + o] = acc;
                    }
                }
                s
            })
            .collect();
        let (mean, var) = match mode {
            Mode::Inference => (params.running_mean[l].clone(), params.running_var[l].clone()),
            Mode::Training => channel_moments(&conv, co),
        };
        let inv_sd: Vec<f64> = var.iter().map(|s| 1.0 / (s + NORM_EPS).sqrt()).collect();
        let normed: Vec<Vec<f64>> = conv
            .iter()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(i, s)| (s.max(0.0) - mean[i % co]) * inv_sd[i % co])
                    .collect()
            })
            .collect();
        let next = normed
            .iter()
            .map(|z| {
                z.iter()
                    .enumerate()
                    .map(|(i, z)| v[scale.start + i % co] * z + v[shift.start + i % co])
                    .collect()
            })
            .collect();
        layers.push(LayerTrace {
            inputs: std::mem::replace(&mut x, next),
            conv,
            normed,
            mean,
            var,
        });
    }

    let h = arch.hidden;
    let [fw, fb, hp, hr, hrb] = layout.tail();
    let z_len = arch.features() + 1;
    let heads: Vec<HeadTrace> = x
        .into_iter()
        .zip(&advice)
        .map(|(mut fused, &adv)| {
            fused.push(adv);
            let hidden_pre: Vec<f64> = (0..h)
                .map(|i| {
                    let row = &v[fw.start + i * z_len..fw.start + (i + 1) * z_len];
                    v[fb.start + i] + row.iter().zip(&fused).map(|(w, z)| w * z).sum::<f64>()
                })
                .collect();
            let mut head_in: Vec<f64> = hidden_pre.iter().map(|q| q.max(0.0)).collect();
            head_in.push(adv);
            HeadTrace {
                fused,
                hidden_pre,
                head_in,
            }
        })
        .collect();
    let records = offsets
        .windows(2)
        .map(|r| {
            let rows = &heads[r[0]..r[1]];
            let logits: Vec<f64> = rows
                .iter()
                .map(|ht| v[hp.clone()].iter().zip(&ht.head_in).map(|(w, e)| w * e).sum())
                .collect();
            let mut mean_head_in = vec![0.0; h + 1];
            for ht in rows {
                for (m, e) in mean_head_in.iter_mut().zip(&ht.head_in) {
                    *m += e / rows.len() as f64;
                }
            }
            let predicted_return =
                v[hrb.start] + v[hr.clone()].iter().zip(&mean_head_in).map(|(w, e)| w * e).sum::<f64>();
            let log_probs = log_softmax(&logits);
            RecordTrace {
                probs: log_probs.iter().map(|l| l.exp()).collect(),
                log_probs,
                mean_head_in,
                predicted_return,
            }
        })
        .collect();
    Trace {
        layers,
        heads,
        offsets,
        records,
    }
}

/// `(b_pre, r_pre)` for one observation and its advice, with normalization in
/// inference mode.
pub fn forward(
    params: &AgentParameters,
    state: &StateTensor,
    advice: &PortfolioWeights,
) -> Result<(PortfolioWeights, f64)> {
    check_inputs(params, state, advice)?;
    let trace = run(params, &params.arch.layout(), &[(state, advice.as_slice())], Mode::Inference);
    let rec = trace.records.into_iter().next().expect("one record");
    Ok((PortfolioWeights::new(rec.probs)?, rec.predicted_return))
}

/// One-hot at the best asset, lowest index on ties.
pub fn build_winner_target(x: &FluctuationVector) -> PortfolioWeights {
    PortfolioWeights::one_hot(x.len(), argmax(x.as_slice())).expect("argmax is in range")
}

/// One executed trade and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeRecord {
    pub period: usize,
    pub state: StateTensor,
    /// Weights suggested by the RLOS ensemble.
    pub advice: PortfolioWeights,
    /// Weights actually held.
    pub action: PortfolioWeights,
    pub predicted_return: f64,
    pub fluctuation: FluctuationVector,
    /// `log(actionᵀX)`.
    pub realized_return: f64,
}

impl TradeRecord {
    /// Builds the record, computing the realized return from the action.
    pub fn new(
        period: usize,
        state: StateTensor,
        advice: PortfolioWeights,
        action: PortfolioWeights,
        predicted_return: f64,
        fluctuation: FluctuationVector,
    ) -> Result<Self> {
        if action.len() != fluctuation.len() || advice.len() != fluctuation.len() {
            return Err(Error::ShapeMismatch("record vectors differ in length".into()));
        }
        let realized_return = action.dot(fluctuation.as_slice()).ln();
        Ok(Self {
            period,
            state,
            advice,
            action,
            predicted_return,
            fluctuation,
            realized_return,
        })
    }
}

/// Learning rate by training step: entry `(from, lr)` applies from step `from`
/// until the next entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule(pub Vec<(u64, f64)>);

impl Default for LearningRateSchedule {
    fn default() -> Self {
        Self(vec![(0, 1e-2), (50_000, 1e-3), (100_000, 1e-4)])
    }
}

impl LearningRateSchedule {
    pub fn rate(&self, step: u64) -> f64 {
        self.0
            .iter()
            .take_while(|(from, _)| *from <= step)
            .last()
            .or(self.0.first())
            .map(|(_, lr)| *lr)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Weight of the squared return-prediction error.
    pub alpha: f64,
    /// Weight of the cross-entropy against the winner target.
    pub beta: f64,
    /// Weight of the realized log return reward.
    pub sigma: f64,
    /// Weight of the parameter norm.
    pub c: f64,
    /// Poisson mean of the replay look-back.
    pub lambda: f64,
    pub momentum: f64,
    pub schedule: LearningRateSchedule,
    pub batch_size: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-2,
            sigma: 1e-2,
            c: 1e-4,
            lambda: 50.0,
            momentum: 0.9,
            schedule: LearningRateSchedule::default(),
            batch_size: 32,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("sigma", self.sigma),
            ("c", self.c),
            ("lambda", self.lambda),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.schedule.0.is_empty() || self.schedule.0.iter().any(|(_, lr)| !(*lr > 0.0)) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.schedule.0.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument("schedule steps must increase".into()));
        }
        Ok(())
    }
}

/// Per-record loss without the norm penalty, and its gradients with respect
/// to the logits and the predicted return.
fn record_terms(trace: &RecordTrace, rec: &TradeRecord, hp: &Hyperparameters) -> (f64, Vec<f64>, f64) {
    let x = rec.fluctuation.as_slice();
    let p = &trace.probs;
    let growth: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
    let r_true = growth.ln();
    let winner = argmax(x);
    let err = trace.predicted_return - r_true;
    let loss = hp.alpha * err * err - hp.beta * trace.log_probs[winner] - hp.sigma * r_true;
    let d_rtrue = -2.0 * hp.alpha * err - hp.sigma;
    let d_logits = p
        .iter()
        .zip(x)
        .enumerate()
        .map(|(j, (pj, xj))| {
            let target = if j == winner { 1.0 } else { 0.0 };
            hp.beta * (pj - target) + d_rtrue * pj * (xj / growth - 1.0)
        })
        .collect();
    (loss, d_logits, 2.0 * hp.alpha * err)
}

/// Loss of one record, recomputing `(b_pre, r_pre)` with [`forward`].
pub fn loss(params: &AgentParameters, rec: &TradeRecord, hp: &Hyperparameters) -> Result<f64> {
    check_batch(params, std::slice::from_ref(rec))?;
    let trace = run(
        params,
        &params.arch.layout(),
        &[(&rec.state, rec.advice.as_slice())],
        Mode::Inference,
    );
    Ok(record_terms(&trace.records[0], rec, hp).0 + hp.c * params.norm())
}

/// Accumulates into `grad` given per-record logit and return gradients.
fn backward(
    params: &AgentParameters,
    layout: &Layout,
    trace: &Trace,
    mode: Mode,
    d_logits: &[Vec<f64>],
    d_return: &[f64],
    grad: &mut [f64],
) {
    let arch = &params.arch;
    let v = &params.values;
    let k = arch.width;
    let h = arch.hidden;
    let [fw, fb, hp, hr, hrb] = layout.tail();
    let z_len = arch.features() + 1;

    let mut dy: Vec<Vec<f64>> = Vec::with_capacity(trace.heads.len());
    for (r, span) in trace.offsets.windows(2).enumerate() {
        let rec = &trace.records[r];
        let dr = d_return[r];
        let n = (span[1] - span[0]) as f64;
        grad[hrb.start] += dr;
        for (g, e) in grad[hr.clone()].iter_mut().zip(&rec.mean_head_in) {
            *g += dr * e;
        }
        for (a, ht) in trace.heads[span[0]..span[1]].iter().enumerate() {
            let dl = d_logits[r][a];
            for (g, e) in grad[hp.clone()].iter_mut().zip(&ht.head_in) {
                *g += dl * e;
            }
            let mut d_fused = vec![0.0; z_len];
            for i in 0..h {
                if ht.hidden_pre[i] <= 0.0 {
                    continue;
                }
                let dq = dl * v[hp.start + i] + dr * v[hr.start + i] / n;
                grad[fb.start + i] += dq;
                let row = fw.start + i * z_len;
                for (j, z) in ht.fused.iter().enumerate() {
                    grad[row + j] += dq * z;
                    d_fused[j] += dq * v[row + j];
                }
            }
            d_fused.pop();
            dy.push(d_fused);
        }
    }

    for l in (0..arch.layers()).rev() {
        let lt = &trace.layers[l];
        let [w, b, sc, sh] = layout.conv(l);
        let (ci, co) = (arch.channels[l], arch.channels[l + 1]);
        let t_out = arch.length(l + 1);
        let inv_sd: Vec<f64> = lt.var.iter().map(|s| 1.0 / (s + NORM_EPS).sqrt()).collect();

        // Gradient with respect to the normalized values.
        let mut dn: Vec<Vec<f64>> = Vec::with_capacity(dy.len());
        for (dyr, zr) in dy.iter().zip(&lt.normed) {
            let mut row = vec![0.0; dyr.len()];
            for (i, (d, z)) in dyr.iter().zip(zr).enumerate() {
                let o = i % co;
                grad[sc.start + o] += d * z;
                grad[sh.start + o] += d;
                row[i] = d * v[sc.start + o];
            }
            dn.push(row);
        }
        // Batch statistics depend on every row: subtract the mean gradient
        // and its projection onto the normalized values.
        let (mut mean_dn, mut mean_dnz) = (vec![0.0; co], vec![0.0; co]);
        if mode == Mode::Training {
            let count = (dn.len() * t_out).max(1) as f64;
            for (dr, zr) in dn.iter().zip(&lt.normed) {
                for (i, (d, z)) in dr.iter().zip(zr).enumerate() {
                    mean_dn[i % co] += d / count;
                    mean_dnz[i % co] += d * z / count;
                }
            }
        }

        let mut next = Vec::with_capacity(dy.len());
        for ((dnr, zr), (sr, xr)) in dn.iter().zip(&lt.normed).zip(lt.conv.iter().zip(&lt.inputs)) {
            let mut dx = if l > 0 { vec![0.0; arch.length(l) * ci] } else { Vec::new() };
            for t in 0..t_out {
                for o in 0..co {
                    let i = t * co + o;
                    if sr[i] <= 0.0 {
                        continue;
                    }
                    let g = inv_sd[o] * (dnr[i] - mean_dn[o] - zr[i] * mean_dnz[o]);
                    grad[b.start + o] += g;
                    for c in 0..ci {
                        let wrow = w.start + (o * ci + c) * k;
                        for j in 0..k {
                            grad[wrow + j] += g * xr[(t + j) * ci + c];
                            if l > 0 {
                                dx[(t + j) * ci + c] += g * v[wrow + j];
                            }
                        }
                    }
                }
            }
            next.push(dx);
        }
        dy = next;
    }
}

fn check_batch(params: &AgentParameters, batch: &[TradeRecord]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for rec in batch {
        check_inputs(params, &rec.state, &rec.advice)?;
        if rec.fluctuation.len() != rec.advice.len() {
            return Err(Error::ShapeMismatch("fluctuation length differs from asset count".into()));
        }
    }
    Ok(())
}

fn batch_inputs(batch: &[TradeRecord]) -> Vec<(&StateTensor, &[f64])> {
    batch.iter().map(|r| (&r.state, r.advice.as_slice())).collect()
}

fn loss_and_gradient(params: &AgentParameters, batch: &[TradeRecord], hp: &Hyperparameters) -> (f64, Vec<f64>, Trace) {
    let layout = params.arch.layout();
    let trace = run(params, &layout, &batch_inputs(batch), Mode::Training);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut d_logits = Vec::with_capacity(batch.len());
    let mut d_return = Vec::with_capacity(batch.len());
    for (rt, rec) in trace.records.iter().zip(batch) {
        let (l, dl, dr) = record_terms(rt, rec, hp);
        total += l;
        d_logits.push(dl.into_iter().map(|g| g * scale).collect());
        d_return.push(dr * scale);
    }
    let mut grad = vec![0.0; layout.len];
    backward(params, &layout, &trace, Mode::Training, &d_logits, &d_return, &mut grad);
    let norm = params.norm();
    if norm > 0.0 {
        for (g, v) in grad.iter_mut().zip(&params.values) {
            *g += hp.c * v / norm;
        }
    }
    (total * scale + hp.c * norm, grad, trace)
}

/// Gradient of [`batch_loss`], laid out like [`AgentParameters::values`].
///
/// The norm penalty contributes `c·θ/‖θ‖` (zero at `θ = 0`).
pub fn gradient(params: &AgentParameters, batch: &[TradeRecord], hp: &Hyperparameters) -> Result<Vec<f64>> {
    check_batch(params, batch)?;
    Ok(loss_and_gradient(params, batch, hp).1)
}

/// Mean batch loss, the training objective: normalization layers use the
/// statistics of this batch.
pub fn batch_loss(params: &AgentParameters, batch: &[TradeRecord], hp: &Hyperparameters) -> Result<f64> {
    check_batch(params, batch)?;
    let trace = run(params, &params.arch.layout(), &batch_inputs(batch), Mode::Training);
    let total: f64 = trace
        .records
        .iter()
        .zip(batch)
        .map(|(rt, rec)| record_terms(rt, rec, hp).0)
        .sum();
    Ok(total / batch.len() as f64 + hp.c * params.norm())
}

/// Replay periods for training at the end of period `t`.
///
/// Each draw takes `k ~ Poisson(λ)` and returns `t − k` clamped to
/// `[earliest, t]`.
pub fn sample_replay(
    t: usize,
    earliest: usize,
    lambda: f64,
    batch: usize,
    rng: &mut EngineRng,
) -> Result<Vec<usize>> {
    if t < earliest {
        return Err(Error::InvalidArgument(format!(
            "no stored records: current period {t} precedes earliest {earliest}"
        )));
    }
    let poisson = Poisson::new(lambda)
        .map_err(|e| Error::InvalidArgument(format!("Poisson parameter {lambda}: {e}")))?;
    Ok((0..batch)
        .map(|_| {
            let back = poisson.sample(rng) as usize;
            t.saturating_sub(back).max(earliest)
        })
        .collect())
}

fn refresh_statistics(params: &mut AgentParameters, trace: &Trace) {
    for (l, lt) in trace.layers.iter().enumerate() {
        for (m, batch) in params.running_mean[l].iter_mut().zip(&lt.mean) {
            *m = (1.0 - NORM_MOMENTUM) * *m + NORM_MOMENTUM * batch;
        }
        for (v, batch) in params.running_var[l].iter_mut().zip(&lt.var) {
            *v = (1.0 - NORM_MOMENTUM) * *v + NORM_MOMENTUM * batch;
        }
    }
}

/// One momentum-SGD step: `velocity ← r·velocity + ∇L`, `θ ← θ − l(step)·velocity`,
/// then the running normalization statistics absorb the batch.
///
/// Returns the batch loss before the update.
pub fn train_step(
    params: &mut AgentParameters,
    velocity: &mut Vec<f64>,
    batch: &[TradeRecord],
    hp: &Hyperparameters,
    step: u64,
) -> Result<f64> {
    check_batch(params, batch)?;
    if velocity.len() != params.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "velocity has {} entries, parameters {}",
            velocity.len(),
            params.values.len()
        )));
    }
    let (l, grad, trace) = loss_and_gradient(params, batch, hp);
    if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(step));
    }
    let lr = hp.schedule.rate(step);
    for ((p, v), g) in params.values.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
        *v = hp.momentum * *v + g;
        *p -= lr * *v;
    }
    refresh_statistics(params, &trace);
    Ok(l)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    architecture: Architecture,
    blocks: Vec<NamedBlock>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NamedBlock {
    name: String,
    values: Vec<f64>,
}

/// Writes a JSON checkpoint with the architecture and named blocks.
pub fn save_checkpoint(params: &AgentParameters, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        architecture: params.arch.clone(),
        blocks: params
            .blocks()
            .into_iter()
            .map(|(name, r)| NamedBlock {
                name,
                values: params.values[r].to_vec(),
            })
            .collect(),
        running_mean: params.running_mean.clone(),
        running_var: params.running_var.clone(),
    };
    let text = serde_json::to_string_pretty(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Reads a checkpoint; with `expected`, the stored architecture must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&Architecture>) -> Result<AgentParameters> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if let Some(arch) = expected {
        if *arch != ck.architecture {
            return Err(Error::Checkpoint(format!(
                "{}: architecture {:?} differs from expected {:?}",
                path.display(),
                ck.architecture,
                arch
            )));
        }
    }
    let mut params = AgentParameters::zeros(ck.architecture)?;
    let blocks = params.blocks();
    if blocks.len() != ck.blocks.len() {
        return Err(Error::Checkpoint(format!("{}: wrong number of blocks", path.display())));
    }
    for ((name, r), b) in blocks.into_iter().zip(ck.blocks) {
        if name != b.name || r.len() != b.values.len() {
            return Err(Error::Checkpoint(format!("{}: block {} does not match {name}", path.display(), b.name)));
        }
        if b.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{}: non-finite value in {name}", path.display())));
        }
        params.values[r].copy_from_slice(&b.values);
    }
    let shapes_match = |s: &[Vec<f64>]| {
        s.len() == params.running_mean.len() && s.iter().zip(&params.running_mean).all(|(a, b)| a.len() == b.len())
    };
    if !shapes_match(&ck.running_mean) || !shapes_match(&ck.running_var) {
        return Err(Error::Checkpoint(format!("{}: running statistics have the wrong shape", path.display())));
    }
    params.running_mean = ck.running_mean;
    params.running_var = ck.running_var;
    Ok(params)
}

/// Online trader: parameters, optimizer state, replay store and training log.
#[derive(Debug, Clone)]
pub struct Agent {
    params: AgentParameters,
    velocity: Vec<f64>,
    hp: Hyperparameters,
    records: Vec<TradeRecord>,
    step: u64,
    rng: EngineRng,
    curve: Vec<(u64, f64, f64)>,
}

impl Agent {
    pub fn new(params: AgentParameters, hp: Hyperparameters, seed: u64) -> Result<Self> {
        hp.validate()?;
        let velocity = vec![0.0; params.values.len()];
        Ok(Self {
            params,
            velocity,
            hp,
            records: Vec::new(),
            step: 0,
            rng: rng::seeded(seed),
            curve: Vec::new(),
        })
    }

    pub fn params(&self) -> &AgentParameters {
        &self.params
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hp
    }

    pub fn records(&self) -> &[TradeRecord] {
        &self.records
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn decide(&self, state: &StateTensor, advice: &PortfolioWeights) -> Result<(PortfolioWeights, f64)> {
        forward(&self.params, state, advice)
    }

    /// Stores a record. The store holds consecutive periods only, so a record
    /// that does not follow the latest one replaces the whole store.
    pub fn remember(&mut self, rec: TradeRecord) {
        if self.records.last().is_some_and(|last| rec.period != last.period + 1) {
            self.records.clear();
        }
        self.records.push(rec);
    }

    /// One replay-sampled training step at the end of the latest stored period.
    pub fn train(&mut self) -> Result<f64> {
        let (Some(first), Some(last)) = (self.records.first(), self.records.last()) else {
            return Err(Error::InvalidArgument("no stored records".into()));
        };
        let (t0, t) = (first.period, last.period);
        let picks = sample_replay(t, t0, self.hp.lambda, self.hp.batch_size, &mut self.rng)?;
        let batch: Vec<TradeRecord> = picks.iter().map(|p| self.records[p - t0].clone()).collect();
        let lr = self.hp.schedule.rate(self.step);
        let l = train_step(&mut self.params, &mut self.velocity, &batch, &self.hp, self.step)?;
        self.curve.push((self.step, l, lr));
        self.step += 1;
        Ok(l)
    }

    /// Training log as CSV `step,loss,lr`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for (s, l, lr) in &self.curve {
            out.push_str(&format!("{s},{l:e},{lr:e}\n"));
        }
        out
    }

    pub fn into_params(self) -> AgentParameters {
        self.params
    }
}

/// State tensor with entries drawn uniformly from `[0.5, 1.5)`.
pub fn random_state(rng: &mut dyn RngCore, assets: usize, history: usize) -> Result<StateTensor> {
    let data = (0..assets * history * StateTensor::CHANNELS)
        .map(|_| 0.5 + rng::unit_f64(rng))
        .collect();
    StateTensor::from_raw(assets, history, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            history: 5,
            channels: vec![4, 3, 2],
            width: 2,
            hidden: 4,
        }
    }

    fn record(params: &AgentParameters, rng: &mut EngineRng, d: usize, period: usize) -> TradeRecord {
        let state = random_state(rng, d, params.arch.history).unwrap();
        let advice = PortfolioWeights::new(rng::simplex_point(rng, d)).unwrap();
        let x = FluctuationVector::new((0..d).map(|_| 0.8 + 0.4 * rng::unit_f64(rng)).collect()).unwrap();
        let (b, r) = forward(params, &state, &advice).unwrap();
        TradeRecord::new(period, state, advice, b, r, x).unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_and_zero() {
        let p = AgentParameters::zeros(Architecture::default()).unwrap();
        let mut rng = rng::seeded(1);
        let s = random_state(&mut rng, 3, 10).unwrap();
        let (b, r) = forward(&p, &s, &PortfolioWeights::uniform(3).unwrap()).unwrap();
        assert_eq!(b.as_slice(), &[1.0 / 3.0; 3]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn zero_parameter_loss_example() {
        let p = AgentParameters::zeros(Architecture::default()).unwrap();
        let mut rng = rng::seeded(2);
        let s = random_state(&mut rng, 2, 10).unwrap();
        let u = PortfolioWeights::uniform(2).unwrap();
        let x = FluctuationVector::new(vec![1.1, 0.9]).unwrap();
        let rec = TradeRecord::new(0, s, u.clone(), u, 0.0, x).unwrap();
        let hp = Hyperparameters::default();
        let l = loss(&p, &rec, &hp).unwrap();
        assert!((l - 1e-2 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.00693).abs() < 1e-5);
    }

    #[test]
    fn winner_target_examples() {
        let t = |v: &[f64]| build_winner_target(&FluctuationVector::new(v.to_vec()).unwrap()).into_inner();
        assert_eq!(t(&[1.1, 0.9]), vec![1.0, 0.0]);
        assert_eq!(t(&[1.0, 1.0]), vec![1.0, 0.0]);
        assert_eq!(t(&[0.9, 1.0, 1.3]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigma_enters_linearly() {
        let p = AgentParameters::init(small(), 3).unwrap();
        let mut rng = rng::seeded(3);
        let rec = record(&p, &mut rng, 3, 0);
        let hp = Hyperparameters::default();
        let doubled = Hyperparameters {
            sigma: 2.0 * hp.sigma,
            ..hp.clone()
        };
        let (b, _) = forward(&p, &rec.state, &rec.advice).unwrap();
        let r_true = b.dot(rec.fluctuation.as_slice()).ln();
        let diff = loss(&p, &rec, &doubled).unwrap() - loss(&p, &rec, &hp).unwrap();
        assert!((diff + hp.sigma * r_true).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut p = AgentParameters::init(small(), 5).unwrap();
        let mut rng = rng::seeded(5);
        p.values.iter_mut().for_each(|v| *v += 0.1 * (rng::unit_f64(&mut rng) - 0.5));
        let hp = Hyperparameters {
            alpha: 0.5,
            beta: 0.3,
            sigma: 0.2,
            c: 0.1,
            ..Hyperparameters::default()
        };
        let batch: Vec<TradeRecord> = (0..4).map(|i| record(&p, &mut rng, 3, i)).collect();
        let g = gradient(&p, &batch, &hp).unwrap();
        let h = 1e-5;
        for (name, r) in p.blocks() {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in r {
                let mut q = p.clone();
                q.values[i] += h;
                let up = batch_loss(&q, &batch, &hp).unwrap();
                q.values[i] -= 2.0 * h;
                let down = batch_loss(&q, &batch, &hp).unwrap();
                let fd = (up - down) / (2.0 * h);
                num += (fd - g[i]).powi(2);
                den += fd.powi(2).max(g[i].powi(2));
            }
            assert!(num.sqrt() <= 1e-4 * den.sqrt().max(1e-8), "{name}: {} vs {}", num.sqrt(), den.sqrt());
        }
    }

    #[test]
    fn duplicated_record_gradient_equals_single() {
        let p = AgentParameters::init(small(), 6).unwrap();
        let mut rng = rng::seeded(6);
        let rec = record(&p, &mut rng, 2, 0);
        let hp = Hyperparameters::default();
        let one = gradient(&p, std::slice::from_ref(&rec), &hp).unwrap();
        let two = gradient(&p, &[rec.clone(), rec], &hp).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn norm_term_gradient() {
        let p = AgentParameters::init(small(), 7).unwrap();
        let mut rng = rng::seeded(7);
        let rec = record(&p, &mut rng, 2, 0);
        let base = Hyperparameters::default();
        let with_c = Hyperparameters { c: 0.5, ..base.clone() };
        let g0 = gradient(&p, std::slice::from_ref(&rec), &base).unwrap();
        let g1 = gradient(&p, std::slice::from_ref(&rec), &with_c).unwrap();
        let norm = p.norm();
        for i in 0..g0.len() {
            let expect = (0.5 - base.c) * p.values[i] / norm;
            assert!((g1[i] - g0[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_equivariant_and_deterministic() {
        let p = AgentParameters::init(Architecture::default(), 8).unwrap();
        let mut rng = rng::seeded(8);
        let s = random_state(&mut rng, 4, 10).unwrap();
        let v = PortfolioWeights::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (b, r) = forward(&p, &s, &v).unwrap();
        assert_eq!(forward(&p, &s, &v).unwrap(), (b.clone(), r));
        let perm = [2, 0, 3, 1];
        let vp = PortfolioWeights::new(perm.iter().map(|&i| v[i]).collect()).unwrap();
        let (bp, rp) = forward(&p, &s.permute_assets(&perm), &vp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((bp[k] - b[i]).abs() < 1e-15);
        }
        assert!((rp - r).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_and_plain_sgd() {
        let p = AgentParameters::init(small(), 9).unwrap();
        let mut rng = rng::seeded(9);
        let batch: Vec<TradeRecord> = (0..3).map(|i| record(&p, &mut rng, 2, i)).collect();
        let hp = Hyperparameters {
            momentum: 0.0,
            ..Hyperparameters::default()
        };
        let g = gradient(&p, &batch, &hp).unwrap();
        let mut q = p.clone();
        let mut vel = vec![0.0; g.len()];
        train_step(&mut q, &mut vel, &batch, &hp, 0).unwrap();
        for i in 0..g.len() {
            assert_eq!(q.values[i], p.values[i] - 1e-2 * g[i]);
        }
        assert_eq!(vel, g);
    }

    #[test]
    fn schedule_steps() {
        let s = LearningRateSchedule::default();
        assert_eq!(s.rate(0), 1e-2);
        assert_eq!(s.rate(49_999), 1e-2);
        assert_eq!(s.rate(50_000), 1e-3);
        assert_eq!(s.rate(100_000), 1e-4);
        assert_eq!(s.rate(10_000_000), 1e-4);
    }

    #[test]
    fn replay_clamps_and_repeats() {
        let mut a = rng::seeded(10);
        assert_eq!(sample_replay(4, 4, 50.0, 20, &mut a).unwrap(), vec![4; 20]);
        let x = sample_replay(100, 0, 5.0, 50, &mut rng::seeded(11)).unwrap();
        let y = sample_replay(100, 0, 5.0, 50, &mut rng::seeded(11)).unwrap();
        assert_eq!(x, y);
        assert!(x.iter().all(|i| *i <= 100));
        assert!(sample_replay(3, 4, 5.0, 1, &mut a).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = AgentParameters::init(small(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path, Some(&small())).unwrap(), p);
        assert!(matches!(
            load_checkpoint(&path, Some(&Architecture::default())),
            Err(Error::Checkpoint(_))
        ));
    }
}
