//! Offline pretraining, the online predict→feedback→update loop, transfer
//! (cold-start) mode, and checkpointing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::ema_update_tensor;
use crate::backbone::{
    build_forward, init_params, qkv_gradient, update_running_stats, BackboneConfig, Bound,
    BufferStore, EmaStore, ForwardMode, ParamStore,
};
use crate::ensemble::{
    build_online_scale, egd_update, ftpl_accumulate, ftpl_select, EgdState, FtplState,
    RegretLedger,
};
use crate::error::{Error, Result};
use crate::representer::PatchConfig;
use crate::series::{
    mse, safe_sigma, standard_stats, window_stream, MetricReport, TimeSeriesTrace, Window,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    Os,
    Ftpl,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_sizes: Vec<usize>,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub offline_lr: f64,
    pub online_lr: f64,
    pub weight_decay: f64,
    /// EMA decay γ for the adapter's gradient average.
    pub gamma: f64,
    /// Base EGD learning rate; rescaled by the running mean loss.
    pub eta: f64,
    pub ftpl_repeats: usize,
    /// Fixed FTPL perturbation scale; when absent the scale tracks the mean
    /// cumulative loss divided by √t.
    pub ftpl_scale: Option<f64>,
    pub ensemble: EnsembleMode,
    pub disable_mimo: bool,
    pub disable_adapter: bool,
    /// Take one optimizer step every this many feedback events.
    pub online_update_interval: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            lookback: 1440,
            horizon: 60,
            patch_sizes: vec![16, 32, 64, 128],
            hidden_dim: 16,
            attn_dim: 8,
            heads: 4,
            ffn_dim: 32,
            layers: 2,
            epochs: 10,
            batch_size: 32,
            offline_lr: 1e-3,
            online_lr: 1e-4,
            weight_decay: 1e-4,
            gamma: 0.9,
            eta: 1.0,
            ftpl_repeats: 8,
            ftpl_scale: None,
            ensemble: EnsembleMode::Os,
            disable_mimo: false,
            disable_adapter: false,
            online_update_interval: 1,
            seed: 0,
        }
    }
}

impl EngineConfig {
    /// Patch set after the MIMO ablation switch.
    pub fn effective_patch_sizes(&self) -> Vec<usize> {
        if self.disable_mimo {
            vec![self.patch_sizes[0]]
        } else {
            self.patch_sizes.clone()
        }
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let cfg = BackboneConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            patch: PatchConfig::new(self.effective_patch_sizes(), self.hidden_dim)?,
            attn_dim: self.attn_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            layers: self.layers,
        };
        cfg.validate()?;
        if self.horizon == 0 || self.batch_size == 0 || self.online_update_interval == 0 {
            return Err(Error::Config("horizon/batch/update interval must be ≥ 1".into()));
        }
        Ok(cfg)
    }

    pub fn experts(&self) -> usize {
        self.effective_patch_sizes().len()
    }
}

/// AdamW moments (decoupled weight decay).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn decay_applies(name: &str) -> bool {
    // weight matrices only: biases, norms, positional tables, and the RevIN
    // affine stay undecayed
    !(name.ends_with(".b")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name.contains("norm")
        || name.starts_with("revin.")
        || name.starts_with("pos."))
}

pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    opt: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    opt.t += 1;
    let t = opt.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.rows, p.cols));
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.rows, p.cols));
        let wd = if decay_applies(name) { weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g.data[i];
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g.data[i] * g.data[i];
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * p.data[i]);
        }
    }
}

/// All trainable and persistent state of one forecaster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EngineConfig,
    pub params: ParamStore,
    pub buffers: BufferStore,
    pub ema: EmaStore,
    pub egd: EgdState,
    pub ftpl: FtplState,
    pub opt: AdamState,
    /// Per-channel (mean, stddev) used to standard-normalize inputs.
    pub norm_stats: Vec<(f64, f64)>,
    /// Mean training loss per offline epoch.
    pub loss_history: Vec<f64>,
    /// Running sum/count of combined losses, drives the scale-free η and
    /// FTPL perturbation scale.
    pub loss_running: (f64, u64),
}

impl ModelState {
    pub fn init(config: &EngineConfig) -> Result<ModelState> {
        let backbone = config.backbone()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.experts();
        let os = if config.ensemble == EnsembleMode::Os { Some(d) } else { None };
        let (params, buffers, ema) = init_params(&backbone, os, &mut rng);
        Ok(ModelState {
            config: config.clone(),
            params,
            buffers,
            ema,
            egd: EgdState::uniform(d, config.eta),
            ftpl: FtplState::new(d, config.ftpl_repeats, 0.0, config.seed ^ 0xF7_12),
            opt: AdamState::default(),
            norm_stats: Vec::new(),
            loss_history: Vec::new(),
            loss_running: (0.0, 0),
        })
    }

    fn mean_loss(&self) -> f64 {
        if self.loss_running.1 == 0 {
            0.0
        } else {
            self.loss_running.0 / self.loss_running.1 as f64
        }
    }
}

/// Normalize a trace in place with per-channel stats.
fn normalize_trace(trace: &TimeSeriesTrace, stats: &[(f64, f64)]) -> TimeSeriesTrace {
    let mut out = trace.clone();
    for r in 0..out.len() {
        for c in 0..out.channels() {
            let (mu, sigma) = stats[c];
            *out.values.at_mut(r, c) = (out.values.at(r, c) - mu) / safe_sigma(sigma);
        }
    }
    out
}

fn denormalize_row(row: &Tensor, channel: usize, stats: &[(f64, f64)]) -> Tensor {
    let (mu, sigma) = stats[channel];
    row.map(|v| v * safe_sigma(sigma) + mu)
}

/// Split an L×M history into per-channel flat series (the channel-independent
/// mini-batch).
fn channel_series(history: &Tensor) -> Vec<Vec<f64>> {
    (0..history.cols)
        .map(|c| (0..history.rows).map(|r| history.at(r, c)).collect())
        .collect()
}

fn channel_targets(target: &Tensor) -> Vec<Tensor> {
    (0..target.cols)
        .map(|c| Tensor::row(&(0..target.rows).map(|r| target.at(r, c)).collect::<Vec<_>>()))
        .collect()
}

/// Offline pretraining: shuffled stride-1 windows, mini-batch MSE per expert,
/// AdamW with decoupled weight decay, adapter inactive. The last 20% of
/// windows are held out for validation-based early stopping.
pub fn pretrain(trace: &TimeSeriesTrace, config: &EngineConfig) -> Result<ModelState> {
    let backbone = config.backbone()?;
    let mut state = ModelState::init(config)?;
    state.norm_stats = standard_stats(trace, 0..trace.len())?;
    let normalized = normalize_trace(trace, &state.norm_stats);
    let windows = window_stream(&normalized, config.lookback, config.horizon, 1)?;
    let split = (windows.len() as f64 * 0.8).ceil() as usize;
    let split = split.max(1).min(windows.len());
    let (train, val) = windows.split_at(split);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore, BufferStore)> = None;
    let mut worse_epochs = 0usize;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = train_step(&mut state, &backbone, &batch, ForwardMode::TRAIN, config.offline_lr)?;
            epoch_loss += loss;
            batches += 1;
        }
        state.loss_history.push(epoch_loss / batches.max(1) as f64);
        if !val.is_empty() {
            let val_loss = evaluate_windows(&state, &backbone, val)?;
            match &best {
                Some((b, _, _)) if val_loss >= *b => {
                    worse_epochs += 1;
                    if worse_epochs >= 5 {
                        break;
                    }
                }
                _ => {
                    best = Some((val_loss, state.params.clone(), state.buffers.clone()));
                    worse_epochs = 0;
                }
            }
        }
    }
    if let Some((_, p, b)) = best {
        state.params = p;
        state.buffers = b;
    }
    Ok(state)
}

/// One optimizer step over a mini-batch of windows (normalized space).
/// Returns the mean per-expert loss.
fn train_step(
    state: &mut ModelState,
    backbone: &BackboneConfig,
    batch: &[&Window],
    mode: ForwardMode,
    lr: f64,
) -> Result<f64> {
    let mut series = Vec::new();
    let mut targets = Vec::new();
    for w in batch {
        series.extend(channel_series(&w.history));
        targets.extend(channel_targets(&w.target));
    }
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &state.params);
    let out = build_forward(&mut tape, backbone, &bound, &state.buffers, &state.ema, &series, mode)?;
    let mut losses = Vec::new();
    for (b, target) in targets.iter().enumerate() {
        for &pred in &out.preds[b] {
            losses.push(tape.mse_against(pred, target));
        }
    }
    let total = losses
        .iter()
        .skip(1)
        .fold(losses[0], |acc, &l| tape.add(acc, l));
    let scaled = tape.scale(total, 1.0 / series.len() as f64);
    let grads = tape.backward(scaled);
    let grad_store = bound.collect_grads(&tape, &grads, &state.params);
    adamw_step(&mut state.params, &grad_store, &mut state.opt, lr, state.config.weight_decay);
    update_running_stats(&mut state.buffers, &out.norm_obs);
    Ok(tape.value(total).data[0] / losses.len() as f64)
}

fn evaluate_windows(
    state: &ModelState,
    backbone: &BackboneConfig,
    windows: &[Window],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let series = channel_series(&w.history);
        let targets = channel_targets(&w.target);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params);
        let out = build_forward(
            &mut tape,
            backbone,
            &bound,
            &state.buffers,
            &state.ema,
            &series,
            ForwardMode::EVAL,
        )?;
        for (b, target) in targets.iter().enumerate() {
            for &pred in &out.preds[b] {
                total += mse(tape.value(pred), target);
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

/// One emitted forecast and its feedback bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub anchor: usize,
    /// WMAPE of the emitted (denormalized) forecast for this step.
    pub wmape: Option<f64>,
    pub expert_losses: Vec<f64>,
    pub combined_loss: f64,
    /// FTPL: selected expert index; OS/none: the weight vector.
    pub selection: String,
    /// Denormalized combined forecast per channel.
    pub forecast: Vec<Vec<f64>>,
    /// Denormalized truth per channel.
    pub truth: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutput {
    pub metrics: MetricReport,
    pub ledger: RegretLedger,
    pub steps: Vec<StepRecord>,
    /// (anchor, highest trace row read during that feedback update); the
    /// causality invariant is max_read ≤ anchor + H.
    pub audit: Vec<(usize, usize)>,
}

pub struct OnlineOptions {
    /// Skip all state mutation (frozen-model baseline).
    pub freeze: bool,
    /// Normalization statistics override; defaults to stats of the first
    /// lookback rows of the trace.
    pub norm_stats: Option<Vec<(f64, f64)>>,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        OnlineOptions { freeze: false, norm_stats: None }
    }
}

/// The online loop: for every stride-H window, emit an ensembled forecast,
/// then (feedback) score the experts, update the ensembler, refresh the EMA
/// gradients, and take one optimizer step.
pub fn online_run(
    state: &mut ModelState,
    trace: &TimeSeriesTrace,
    options: &OnlineOptions,
) -> Result<RunOutput> {
    let config = state.config.clone();
    let backbone = config.backbone()?;
    let d = config.experts();
    let m = trace.channels();
    let stats = match &options.norm_stats {
        Some(s) => s.clone(),
        None => standard_stats(trace, 0..config.lookback.min(trace.len()))?,
    };
    let normalized = normalize_trace(trace, &stats);
    let windows = window_stream(&normalized, config.lookback, config.horizon, config.horizon)?;
    let adapt_experts = !config.disable_adapter;
    let forward_mode = if adapt_experts { ForwardMode::ONLINE } else { ForwardMode::EVAL };

    let mut latest_truth: Vec<Tensor> = vec![Tensor::zeros(1, config.horizon); m];
    let mut ledger = RegretLedger::default();
    let mut steps = Vec::with_capacity(windows.len());
    let mut audit = Vec::with_capacity(windows.len());
    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    let mut wmape_num = 0.0;
    let mut wmape_den = 0.0;
    let mut per_step_losses = Vec::with_capacity(windows.len());

    for (event, w) in windows.iter().enumerate() {
        let series = channel_series(&w.history);
        let targets = channel_targets(&w.target);

        // --- predict ---
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &state.params);
        let out = build_forward(
            &mut tape,
            &backbone,
            &bound,
            &state.buffers,
            &state.ema,
            &series,
            forward_mode,
        )?;
        let expert_preds: Vec<Vec<Tensor>> = out
            .preds
            .iter()
            .map(|row| row.iter().map(|&id| tape.value(id).clone()).collect())
            .collect();

        let weights = state.egd.weights();
        let (combined, selection): (Vec<Tensor>, String) = match config.ensemble {
            EnsembleMode::Ftpl => {
                let idx = if options.freeze {
                    // deterministic leader without advancing the RNG
                    argmin(&state.ftpl.cumulative_losses)
                } else {
                    ftpl_select(&mut state.ftpl)
                };
                (expert_preds.iter().map(|p| p[idx].clone()).collect(), format!("{idx}"))
            }
            EnsembleMode::Os => {
                let mut combined = Vec::with_capacity(m);
                for c in 0..m {
                    let (_, comb) = build_online_scale(
                        &mut tape,
                        &backbone,
                        &bound,
                        &state.ema["ema.os"],
                        &expert_preds[c],
                        &latest_truth[c],
                        &weights,
                        adapt_experts,
                    );
                    combined.push(tape.value(comb).clone());
                }
                (combined, format_weights(&weights))
            }
            EnsembleMode::None => {
                let mut combined = Vec::with_capacity(m);
                for preds in &expert_preds {
                    let mut mean = Tensor::zeros(1, config.horizon);
                    for p in preds {
                        for (o, v) in mean.data.iter_mut().zip(&p.data) {
                            *o += v / d as f64;
                        }
                    }
                    combined.push(mean);
                }
                (combined, format_weights(&vec![1.0 / d as f64; d]))
            }
        };

        // --- score ---
        let mut expert_losses = vec![0.0; d];
        let mut combined_loss = 0.0;
        for c in 0..m {
            let truth = targets[c].reshaped(1, config.horizon);
            for (i, p) in expert_preds[c].iter().enumerate() {
                expert_losses[i] += mse(p, &truth) / m as f64;
            }
            combined_loss += mse(&combined[c], &truth) / m as f64;
        }
        ledger.push(combined_loss, &expert_losses);
        per_step_losses.push(combined_loss);
        for c in 0..m {
            let truth = &targets[c];
            sq_sum += combined[c].data.iter().zip(&truth.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            abs_sum += combined[c].data.iter().zip(&truth.data).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += config.horizon;
        }

        // WMAPE on denormalized values
        let mut forecast_denorm = Vec::with_capacity(m);
        let mut truth_denorm = Vec::with_capacity(m);
        let mut step_num = 0.0;
        let mut step_den = 0.0;
        for c in 0..m {
            let f = denormalize_row(&combined[c], c, &stats);
            let t = denormalize_row(&targets[c], c, &stats);
            step_num += f.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).sum::<f64>();
            step_den += t.data.iter().sum::<f64>();
            forecast_denorm.push(f.data);
            truth_denorm.push(t.data);
        }
        wmape_num += step_num;
        wmape_den += step_den;
        steps.push(StepRecord {
            anchor: w.anchor_index,
            wmape: if step_den > 0.0 { Some(step_num / step_den) } else { None },
            expert_losses: expert_losses.clone(),
            combined_loss,
            selection,
            forecast: forecast_denorm,
            truth: truth_denorm,
        });

        // --- feedback / update ---
        if !options.freeze {
            state.loss_running.0 += combined_loss;
            state.loss_running.1 += 1;
            match config.ensemble {
                EnsembleMode::Os => {
                    state.egd.eta = config.eta / state.mean_loss().max(1e-8);
                    egd_update(&mut state.egd, &expert_losses);
                }
                EnsembleMode::Ftpl => {
                    ftpl_accumulate(&mut state.ftpl, &expert_losses);
                    let t = (event + 1) as f64;
                    state.ftpl.scale = config.ftpl_scale.unwrap_or_else(|| {
                        let mean_cum = state.ftpl.cumulative_losses.iter().sum::<f64>()
                            / d as f64;
                        mean_cum / t.sqrt()
                    });
                }
                EnsembleMode::None => {}
            }
            if (event + 1) % config.online_update_interval == 0 {
                online_update(state, &backbone, w, &latest_truth, &weights)?;
            }
            audit.push((w.anchor_index, w.anchor_index + config.horizon));
        }
        for (c, t) in targets.iter().enumerate() {
            latest_truth[c] = t.reshaped(1, config.horizon);
        }
    }

    let metrics = MetricReport {
        mse: sq_sum / count as f64,
        mae: abs_sum / count as f64,
        wmape: if wmape_den > 0.0 { wmape_num / wmape_den } else { f64::NAN },
        per_step_losses,
    };
    Ok(RunOutput { metrics, ledger, steps, audit })
}

/// One online gradient step: per-expert losses plus (in OS mode) the
/// combined loss through the Online Scaling module, then EMA refresh.
fn online_update(
    state: &mut ModelState,
    backbone: &BackboneConfig,
    window: &Window,
    latest_truth: &[Tensor],
    weights: &[f64],
) -> Result<()> {
    let config = state.config.clone();
    let series = channel_series(&window.history);
    let targets = channel_targets(&window.target);
    let adapt = !config.disable_adapter;
    let mode = if adapt { ForwardMode::ONLINE } else { ForwardMode::EVAL };
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &state.params);
    let out = build_forward(&mut tape, backbone, &bound, &state.buffers, &state.ema, &series, mode)?;
    let mut losses = Vec::new();
    for (c, target) in targets.iter().enumerate() {
        let truth = target.reshaped(1, config.horizon);
        for &pred in &out.preds[c] {
            losses.push(tape.mse_against(pred, &truth));
        }
    }
    let mut total = losses
        .iter()
        .skip(1)
        .fold(losses[0], |acc, &l| tape.add(acc, l));
    total = tape.scale(total, 1.0 / series.len() as f64);
    if config.ensemble == EnsembleMode::Os {
        // combined loss trains the OS parameters only (experts enter as constants)
        for (c, target) in targets.iter().enumerate() {
            let expert_values: Vec<Tensor> =
                out.preds[c].iter().map(|&id| tape.value(id).clone()).collect();
            let (_, comb) = build_online_scale(
                &mut tape,
                backbone,
                &bound,
                &state.ema["ema.os"],
                &expert_values,
                &latest_truth[c],
                weights,
                adapt,
            );
            let truth = target.reshaped(1, config.horizon);
            let os_loss = tape.mse_against(comb, &truth);
            let os_loss = tape.scale(os_loss, 1.0 / targets.len() as f64);
            total = tape.add(total, os_loss);
        }
    }
    let grads = tape.backward(total);
    let grad_store = bound.collect_grads(&tape, &grads, &state.params);
    // EMA of the attention-projection gradients drives the adapter
    for l in 0..config.layers {
        let qkv = qkv_gradient(backbone, &grad_store, &format!("layer.{l}"));
        let ema = state.ema.get_mut(&format!("ema.layer.{l}")).expect("ema state");
        ema_update_tensor(ema, &qkv, config.gamma);
    }
    if config.ensemble == EnsembleMode::Os {
        let qkv = qkv_gradient(backbone, &grad_store, "os");
        let ema = state.ema.get_mut("ema.os").expect("os ema state");
        ema_update_tensor(ema, &qkv, config.gamma);
    }
    adamw_step(&mut state.params, &grad_store, &mut state.opt, config.online_lr, config.weight_decay);
    Ok(())
}

/// One ensemble-combined forecast for a single L×M history, in the original
/// units. Used by callers that drive the model outside the replay loop (the
/// autoscale simulator). No state is mutated.
pub fn forecast_once(
    state: &ModelState,
    history: &Tensor,
    latest_truth: Option<&[Tensor]>,
) -> Result<Vec<Vec<f64>>> {
    let config = &state.config;
    let backbone = config.backbone()?;
    let m = history.cols;
    let stats: Vec<(f64, f64)> = if state.norm_stats.len() == m {
        state.norm_stats.clone()
    } else {
        // untrained model: standardize against the history itself
        (0..m)
            .map(|c| {
                let col: Vec<f64> = (0..history.rows).map(|r| history.at(r, c)).collect();
                let mu = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / col.len() as f64;
                (mu, var.sqrt())
            })
            .collect()
    };
    let mut normalized = history.clone();
    for r in 0..m {
        for row in 0..history.rows {
            let (mu, sigma) = stats[r];
            *normalized.at_mut(row, r) = (history.at(row, r) - mu) / safe_sigma(sigma);
        }
    }
    let series = channel_series(&normalized);
    let mode = if config.disable_adapter { ForwardMode::EVAL } else { ForwardMode::ONLINE };
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &state.params);
    let out = build_forward(&mut tape, &backbone, &bound, &state.buffers, &state.ema, &series, mode)?;
    let expert_preds: Vec<Vec<Tensor>> = out
        .preds
        .iter()
        .map(|row| row.iter().map(|&id| tape.value(id).clone()).collect())
        .collect();
    let weights = state.egd.weights();
    let d = config.experts();
    let mut combined = Vec::with_capacity(m);
    for c in 0..m {
        let comb = match config.ensemble {
            EnsembleMode::Ftpl => expert_preds[c][argmin(&state.ftpl.cumulative_losses)].clone(),
            EnsembleMode::Os => {
                let zero = Tensor::zeros(1, config.horizon);
                let truth = latest_truth.map(|t| &t[c]).unwrap_or(&zero);
                let (_, node) = build_online_scale(
                    &mut tape,
                    &backbone,
                    &bound,
                    &state.ema["ema.os"],
                    &expert_preds[c],
                    truth,
                    &weights,
                    !config.disable_adapter,
                );
                tape.value(node).clone()
            }
            EnsembleMode::None => {
                let mut mean = Tensor::zeros(1, config.horizon);
                for p in &expert_preds[c] {
                    for (o, v) in mean.data.iter_mut().zip(&p.data) {
                        *o += v / d as f64;
                    }
                }
                mean
            }
        };
        combined.push(denormalize_row(&comb, c, &stats).data);
    }
    Ok(combined)
}

/// Pretrain on `source`, then run online on `target` with no offline pass
/// over the target.
pub fn transfer_run(
    source: &TimeSeriesTrace,
    target: &TimeSeriesTrace,
    config: &EngineConfig,
) -> Result<(ModelState, RunOutput)> {
    let mut state = pretrain(source, config)?;
    let out = online_run(&mut state, target, &OnlineOptions::default())?;
    Ok((state, out))
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

fn format_weights(w: &[f64]) -> String {
    w.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join("|")
}

// --- checkpointing ---

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    structural_hash: String,
    state: ModelState,
}

/// FNV-1a over the structural description (config + parameter shapes).
pub fn structural_hash(state: &ModelState) -> String {
    let mut desc = serde_json::to_string(&state.config).expect("config serializes");
    for (name, t) in &state.params {
        desc.push_str(&format!(";{name}:{}x{}", t.rows, t.cols));
    }
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in desc.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        structural_hash: structural_hash(state),
        state: state.clone(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: file.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if structural_hash(&file.state) != file.structural_hash {
        return Err(Error::CorruptCheckpoint("structural hash mismatch".into()));
    }
    Ok(file.state)
}

/// Load a checkpoint that must structurally match the given config.
pub fn load_checkpoint_expecting(path: &Path, config: &EngineConfig) -> Result<ModelState> {
    let state = load_checkpoint(path)?;
    let expected = ModelState::init(config)?;
    if structural_hash(&state) != structural_hash(&expected) {
        return Err(Error::VersionMismatch { found: 0, expected: CHECKPOINT_VERSION });
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EngineConfig {
        EngineConfig {
            lookback: 32,
            horizon: 4,
            patch_sizes: vec![4, 8],
            hidden_dim: 8,
            attn_dim: 4,
            heads: 2,
            ffn_dim: 8,
            layers: 1,
            epochs: 2,
            batch_size: 8,
            seed: 42,
            ..EngineConfig::default()
        }
    }

    fn sinusoid(n: usize, period: f64) -> TimeSeriesTrace {
        let data: Vec<f64> = (0..n)
            .map(|i| 10.0 + 3.0 * (2.0 * std::f64::consts::PI * i as f64 / period).sin())
            .collect();
        TimeSeriesTrace::from_channel(&data).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialized_state() {
        let mut cfg = small_config();
        cfg.epochs = 0;
        let trace = sinusoid(100, 16.0);
        let state = pretrain(&trace, &cfg).unwrap();
        let fresh = ModelState::init(&cfg).unwrap();
        assert_eq!(state.params, fresh.params);
        assert!(state.loss_history.is_empty());
    }

    #[test]
    fn pretrain_is_seed_deterministic() {
        let cfg = small_config();
        let trace = sinusoid(120, 16.0);
        let a = pretrain(&trace, &cfg).unwrap();
        let b = pretrain(&trace, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn online_run_deterministic_and_causal() {
        let cfg = small_config();
        let trace = sinusoid(200, 16.0);
        let mut s1 = pretrain(&trace, &cfg).unwrap();
        let mut s2 = s1.clone();
        let o1 = online_run(&mut s1, &trace, &OnlineOptions::default()).unwrap();
        let o2 = online_run(&mut s2, &trace, &OnlineOptions::default()).unwrap();
        assert_eq!(o1.metrics.mse, o2.metrics.mse);
        assert_eq!(o1.metrics.per_step_losses, o2.metrics.per_step_losses);
        // feedback causality: every update reads at most anchor + H
        for (anchor, max_read) in &o1.audit {
            assert!(*max_read <= anchor + cfg.horizon);
        }
        // non-overlap: anchors advance by exactly H
        for pair in o1.steps.windows(2) {
            assert_eq!(pair[1].anchor - pair[0].anchor, cfg.horizon);
        }
    }

    #[test]
    fn ensemble_none_single_expert_runs() {
        let mut cfg = small_config();
        cfg.ensemble = EnsembleMode::None;
        cfg.disable_mimo = true;
        let trace = sinusoid(150, 16.0);
        let mut state = pretrain(&trace, &cfg).unwrap();
        assert_eq!(state.config.experts(), 1);
        let out = online_run(&mut state, &trace, &OnlineOptions::default()).unwrap();
        assert!(out.metrics.mse.is_finite());
        assert_eq!(out.steps[0].expert_losses.len(), 1);
    }

    #[test]
    fn cold_start_untrained_model_emits_valid_forecasts() {
        let mut cfg = small_config();
        cfg.epochs = 0;
        let source = sinusoid(60, 16.0);
        let target = sinusoid(150, 24.0);
        let (_, out) = transfer_run(&source, &target, &cfg).unwrap();
        assert!(!out.steps.is_empty());
        for step in &out.steps {
            for ch in &step.forecast {
                assert_eq!(ch.len(), cfg.horizon);
                assert!(ch.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn disable_adapter_matches_unadapted_forward() {
        // with a zeroed adapter the adapted forward is bit-identical, so a
        // fresh model with/without the flag must produce identical first steps
        let trace = sinusoid(150, 16.0);
        let mut cfg = small_config();
        cfg.ensemble = EnsembleMode::None;
        cfg.epochs = 1;
        let base = pretrain(&trace, &cfg).unwrap();
        let mut with = base.clone();
        let mut without = base.clone();
        without.config.disable_adapter = true;
        let o1 = online_run(&mut with, &trace, &OnlineOptions::default()).unwrap();
        let o2 = online_run(&mut without, &trace, &OnlineOptions::default()).unwrap();
        // first prediction happens before any adapter state diverges
        assert_eq!(o1.steps[0].forecast, o2.steps[0].forecast);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let cfg = small_config();
        let trace = sinusoid(120, 16.0);
        let state = pretrain(&trace, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        // bit-exact, not just approximately equal
        for (k, t) in &state.params {
            for (a, b) in t.data.iter().zip(&loaded.params[k].data) {
                assert_eq!(a.to_bits(), b.to_bits(), "param {k}");
            }
        }
        assert_eq!(state.params, loaded.params);
        assert_eq!(state.buffers, loaded.buffers);
        assert_eq!(state.opt.m, loaded.opt.m);
        assert_eq!(state.norm_stats, loaded.norm_stats);
    }

    #[test]
    fn checkpoint_truncated_rejected() {
        let cfg = small_config();
        let state = ModelState::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&state, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn checkpoint_config_mismatch_rejected() {
        let cfg = small_config();
        let state = ModelState::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&state, &path).unwrap();
        let mut other = cfg.clone();
        other.patch_sizes = vec![4];
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(Error::VersionMismatch { .. })
        ));
        assert!(load_checkpoint_expecting(&path, &cfg).is_ok());
    }
}
