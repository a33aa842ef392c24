//! Shared attention encoder with per-resolution output heads.
//!
//! The forward pass is recorded on a [`Tape`], so exact reverse-mode
//! gradients are available for every parameter: attention projections,
//! output projection, FFN, norm affine, positional encodings, alignment
//! maps, RevIN affine, heads, and the adapter's linear maps.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::representer::{instance_stats, PatchConfig, RevInStats};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch: PatchConfig,
    /// Per-head attention width D′.
    pub attn_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
}

impl BackboneConfig {
    pub fn hidden_dim(&self) -> usize {
        self.patch.hidden_dim
    }

    pub fn resolutions(&self) -> usize {
        self.patch.resolutions()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.attn_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("backbone dimensions must be ≥ 1".into()));
        }
        if self.lookback < *self.patch.patch_sizes.iter().max().unwrap() {
            return Err(Error::Config("lookback must be ≥ the largest patch size".into()));
        }
        Ok(())
    }

    /// Width of the concatenated per-layer Q/K/V gradient ∇_t.
    pub fn qkv_grad_width(&self) -> usize {
        3 * self.heads * self.hidden_dim() * self.attn_dim
    }

    /// Width of one adaptation coefficient vector (α or β).
    pub fn coeff_width(&self) -> usize {
        3 * self.heads * self.attn_dim
    }
}

/// Named trainable tensors.
pub type ParamStore = BTreeMap<String, Tensor>;
/// Named non-trainable buffers (batch-norm running statistics).
pub type BufferStore = BTreeMap<String, Tensor>;
/// Per-layer EMA of the concatenated attention-projection gradients.
pub type EmaStore = BTreeMap<String, Tensor>;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data)
}

fn init_attention_layer(params: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.hidden_dim();
    let dp = cfg.attn_dim;
    let bound = (1.0 / d as f64).sqrt();
    for j in 0..cfg.heads {
        params.insert(format!("{prefix}.q.{j}"), uniform(rng, d, dp, bound));
        params.insert(format!("{prefix}.k.{j}"), uniform(rng, d, dp, bound));
        params.insert(format!("{prefix}.v.{j}"), uniform(rng, d, dp, bound));
    }
    let hb = (1.0 / (cfg.heads * dp) as f64).sqrt();
    params.insert(format!("{prefix}.wo"), uniform(rng, cfg.heads * dp, d, hb));
}

fn init_adapter_map(params: &mut ParamStore, prefix: &str, cfg: &BackboneConfig) {
    // zero init: an untrained adapter is the identity adaptation
    params.insert(
        format!("{prefix}.w"),
        Tensor::zeros(cfg.qkv_grad_width(), 2 * cfg.coeff_width()),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(1, 2 * cfg.coeff_width()));
}

fn init_norm(
    params: &mut ParamStore,
    buffers: &mut BufferStore,
    prefix: &str,
    d: usize,
    resolutions: usize,
) {
    params.insert(format!("{prefix}.scale"), Tensor::filled(1, d, 1.0));
    params.insert(format!("{prefix}.shift"), Tensor::zeros(1, d));
    // token statistics differ wildly across patch resolutions, so each
    // resolution keeps its own running buffers (the affine stays shared)
    for i in 0..resolutions {
        buffers.insert(format!("{prefix}.res{i}.mean"), Tensor::zeros(1, d));
        buffers.insert(format!("{prefix}.res{i}.var"), Tensor::filled(1, d, 1.0));
    }
}

/// Initialize all trainable parameters, buffers, and EMA state.
/// `os_experts` adds the Online Scaling module for that many experts.
pub fn init_params(
    cfg: &BackboneConfig,
    os_experts: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> (ParamStore, BufferStore, EmaStore) {
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut ema = EmaStore::new();
    let d = cfg.hidden_dim();
    params.insert("revin.r1".into(), Tensor::scalar(1.0));
    params.insert("revin.r2".into(), Tensor::scalar(0.0));
    let counts = cfg.patch.patch_counts(cfg.lookback);
    for (i, (&p, &n)) in cfg.patch.patch_sizes.iter().zip(&counts).enumerate() {
        let bound = (1.0 / p as f64).sqrt();
        params.insert(format!("align.{i}.w"), uniform(rng, p, d, bound));
        params.insert(format!("align.{i}.b"), Tensor::zeros(1, d));
        params.insert(format!("pos.{i}"), uniform(rng, n, d, 0.02));
        let hbound = (1.0 / (n * d) as f64).sqrt();
        params.insert(format!("head.{i}.w"), uniform(rng, n * d, cfg.horizon, hbound));
        params.insert(format!("head.{i}.b"), Tensor::zeros(1, cfg.horizon));
    }
    for l in 0..cfg.layers {
        let prefix = format!("layer.{l}");
        init_attention_layer(&mut params, &prefix, cfg, rng);
        let fb = (1.0 / d as f64).sqrt();
        params.insert(format!("{prefix}.ffn.w1"), uniform(rng, d, cfg.ffn_dim, fb));
        params.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(1, cfg.ffn_dim));
        let fb2 = (1.0 / cfg.ffn_dim as f64).sqrt();
        params.insert(format!("{prefix}.ffn.w2"), uniform(rng, cfg.ffn_dim, d, fb2));
        params.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(1, d));
        init_norm(&mut params, &mut buffers, &format!("{prefix}.norm1"), d, cfg.resolutions());
        init_norm(&mut params, &mut buffers, &format!("{prefix}.norm2"), d, cfg.resolutions());
        init_adapter_map(&mut params, &format!("adapter.{l}"), cfg);
        ema.insert(format!("ema.layer.{l}"), Tensor::zeros(1, cfg.qkv_grad_width()));
    }
    if let Some(nexp) = os_experts {
        let eb = (1.0 / cfg.horizon as f64).sqrt();
        params.insert("os.embed.w".into(), uniform(rng, cfg.horizon, d, eb));
        params.insert("os.embed.b".into(), Tensor::zeros(1, d));
        init_attention_layer(&mut params, "os", cfg, rng);
        params.insert("os.out.w".into(), Tensor::zeros((nexp + 1) * d, nexp));
        params.insert("os.out.b".into(), Tensor::zeros(1, nexp));
        init_adapter_map(&mut params, "os.adapter", cfg);
        ema.insert("ema.os".into(), Tensor::zeros(1, cfg.qkv_grad_width()));
    }
    (params, buffers, ema)
}

/// Parameter leaves bound into a tape for one forward pass.
pub struct Bound {
    pub ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, tensor) in params {
            ids.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        Bound { ids }
    }

    pub fn get(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients for every bound parameter, zeros where unreached.
    pub fn collect_grads(&self, tape: &Tape, grads: &crate::tape::Grads, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, id) in &self.ids {
            let shape = params[name].shape();
            let _ = tape;
            out.insert(name.clone(), grads.get_or_zeros(*id, shape.0, shape.1));
        }
        out
    }
}

/// Adaptation coefficients for one attention layer, already split per
/// projection and head: `alpha[p][j]` and `beta[p][j]` are 1×D′ nodes
/// (p: 0=Q, 1=K, 2=V).
pub struct LayerCoeffs {
    pub alpha: Vec<Vec<NodeId>>,
    pub beta: Vec<Vec<NodeId>>,
}

/// Eq.-style adapter head: coeffs = 1 + Linear(Flatten(∇̂)), split into α, β.
pub fn build_coeffs(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    bound: &Bound,
    adapter_prefix: &str,
    ema_grad: &Tensor,
) -> LayerCoeffs {
    let flat = tape.constant(ema_grad.reshaped(1, ema_grad.len()));
    let w = bound.get(&format!("{adapter_prefix}.w"));
    let b = bound.get(&format!("{adapter_prefix}.b"));
    let lin = tape.matmul(flat, w);
    let lin = tape.add(lin, b);
    let ones = tape.constant(Tensor::filled(1, 2 * cfg.coeff_width(), 1.0));
    let coeffs = tape.add(lin, ones);
    let half = cfg.coeff_width();
    let alpha_all = tape.slice_cols(coeffs, 0, half);
    let beta_all = tape.slice_cols(coeffs, half, half);
    let dp = cfg.attn_dim;
    let mut alpha = Vec::with_capacity(3);
    let mut beta = Vec::with_capacity(3);
    for p in 0..3 {
        let mut arow = Vec::with_capacity(cfg.heads);
        let mut brow = Vec::with_capacity(cfg.heads);
        for j in 0..cfg.heads {
            let off = (p * cfg.heads + j) * dp;
            arow.push(tape.slice_cols(alpha_all, off, dp));
            brow.push(tape.slice_cols(beta_all, off, dp));
        }
        alpha.push(arow);
        beta.push(brow);
    }
    LayerCoeffs { alpha, beta }
}

/// Multi-head self-attention over an N×D token matrix, with optional
/// parameter- and feature-level adaptation.
pub fn build_mhsa(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    bound: &Bound,
    layer_prefix: &str,
    tokens: NodeId,
    coeffs: Option<&LayerCoeffs>,
) -> NodeId {
    let scale = 1.0 / (cfg.attn_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for j in 0..cfg.heads {
        let mut proj = |p: usize, name: &str| {
            let mut w = bound.get(&format!("{layer_prefix}.{name}.{j}"));
            if let Some(c) = coeffs {
                w = tape.mul_row(w, c.alpha[p][j]);
            }
            let mut e = tape.matmul(tokens, w);
            if let Some(c) = coeffs {
                e = tape.mul_row(e, c.beta[p][j]);
            }
            e
        };
        let q = proj(0, "q");
        let k = proj(1, "k");
        let v = proj(2, "v");
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, scale);
        let scores = tape.softmax_rows(logits);
        heads.push(tape.matmul(scores, v));
    }
    let cat = tape.concat_cols(&heads);
    let wo = bound.get(&format!("{layer_prefix}.wo"));
    tape.matmul(cat, wo)
}

/// Batch statistics observed during a train-mode forward, used to update
/// running buffers afterwards.
pub struct BatchNormObs {
    pub name: String,
    pub mean: Tensor,
    pub var: Tensor,
}

pub enum NormMode<'a> {
    /// Normalize with batch statistics; record them.
    Train(&'a mut Vec<BatchNormObs>),
    /// Normalize with running statistics from the buffer store.
    Eval(&'a BufferStore),
}

fn build_batchnorm(
    tape: &mut Tape,
    bound: &Bound,
    norm_prefix: &str,
    buffer_key: &str,
    x: NodeId,
    mode: &mut NormMode,
) -> NodeId {
    let scale = bound.get(&format!("{norm_prefix}.scale"));
    let shift = bound.get(&format!("{norm_prefix}.shift"));
    let normalized = match mode {
        NormMode::Train(obs) => {
            let mu = tape.mean_rows(x);
            let centered = tape.sub_row(x, mu);
            let sq = tape.mul(centered, centered);
            let var = tape.mean_rows(sq);
            obs.push(BatchNormObs {
                name: buffer_key.to_string(),
                mean: tape.value(mu).clone(),
                var: tape.value(var).clone(),
            });
            let inv = tape.rsqrt_eps(var, BN_EPS);
            tape.mul_row(centered, inv)
        }
        NormMode::Eval(buffers) => {
            let mean = &buffers[&format!("{buffer_key}.mean")];
            let var = &buffers[&format!("{buffer_key}.var")];
            let inv = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
            let mean_c = tape.constant(mean.clone());
            let inv_c = tape.constant(inv);
            let centered = tape.sub_row(x, mean_c);
            tape.mul_row(centered, inv_c)
        }
    };
    let scaled = tape.mul_row(normalized, scale);
    tape.add_row(scaled, shift)
}

/// One encoder layer: X_A = Norm(X + MHSA(X)); out = Norm(X_A + FFN(X_A)).
/// `blocks` lists the row extents of the independent series in the stacked
/// input; attention runs within each block, normalization across all rows.
#[allow(clippy::too_many_arguments)]
pub fn build_attention_layer(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    bound: &Bound,
    layer_prefix: &str,
    norm_scope: &str,
    x: NodeId,
    blocks: &[usize],
    coeffs: Option<&LayerCoeffs>,
    mode: &mut NormMode,
) -> NodeId {
    let mut mhsa_parts = Vec::with_capacity(blocks.len());
    let mut off = 0;
    for &n in blocks {
        let xb = if blocks.len() == 1 { x } else { tape.slice_rows(x, off, n) };
        mhsa_parts.push(build_mhsa(tape, cfg, bound, layer_prefix, xb, coeffs));
        off += n;
    }
    let mhsa = if mhsa_parts.len() == 1 { mhsa_parts[0] } else { tape.concat_rows(&mhsa_parts) };
    let a = tape.add(x, mhsa);
    let xa = build_batchnorm(
        tape,
        bound,
        &format!("{layer_prefix}.norm1"),
        &format!("{layer_prefix}.norm1.{norm_scope}"),
        a,
        mode,
    );
    let w1 = bound.get(&format!("{layer_prefix}.ffn.w1"));
    let b1 = bound.get(&format!("{layer_prefix}.ffn.b1"));
    let w2 = bound.get(&format!("{layer_prefix}.ffn.w2"));
    let b2 = bound.get(&format!("{layer_prefix}.ffn.b2"));
    let h = tape.matmul(xa, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let f = tape.matmul(h, w2);
    let f = tape.add_row(f, b2);
    let sum = tape.add(xa, f);
    build_batchnorm(
        tape,
        bound,
        &format!("{layer_prefix}.norm2"),
        &format!("{layer_prefix}.norm2.{norm_scope}"),
        sum,
        mode,
    )
}

/// Output of a full forward pass over a mini-batch of univariate series.
pub struct ForwardOut {
    /// `preds[b][i]`: 1×H denormalized forecast of expert i for series b.
    pub preds: Vec<Vec<NodeId>>,
    /// Per-series RevIN window statistics.
    pub stats: Vec<RevInStats>,
    /// Batch-norm statistics observed in train mode (empty in eval mode).
    pub norm_obs: Vec<BatchNormObs>,
}

/// Whether the forward pass uses batch statistics (offline training) or
/// running statistics (online/eval), and whether the adapter is active.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub train_norm: bool,
    pub adapt: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode { train_norm: true, adapt: false };
    pub const EVAL: ForwardMode = ForwardMode { train_norm: false, adapt: false };
    pub const ONLINE: ForwardMode = ForwardMode { train_norm: false, adapt: true };
}

/// Full forward pass: RevIN → patchify → align → positional encoding →
/// shared layer stack → per-resolution head → RevIN inversion.
///
/// `series` holds the mini-batch of univariate histories (one per channel,
/// possibly for several windows at once); each entry is a flat length-L
/// slice. Outputs are denormalized back to the input scale.
pub fn build_forward(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    bound: &Bound,
    buffers: &BufferStore,
    ema: &EmaStore,
    series: &[Vec<f64>],
    mode: ForwardMode,
) -> Result<ForwardOut> {
    cfg.validate()?;
    for s in series {
        if s.len() != cfg.lookback {
            return Err(Error::ShapeError(format!(
                "series length {} != lookback {}",
                s.len(),
                cfg.lookback
            )));
        }
    }
    let r1 = bound.get("revin.r1");
    let r2 = bound.get("revin.r2");
    let r1_recip = tape.recip(r1);
    let neg_r2 = tape.scale(r2, -1.0);

    // per-layer adaptation coefficients, shared by every block this pass
    let coeffs: Vec<Option<LayerCoeffs>> = (0..cfg.layers)
        .map(|l| {
            if mode.adapt {
                Some(build_coeffs(tape, cfg, bound, &format!("adapter.{l}"), &ema[&format!("ema.layer.{l}")]))
            } else {
                None
            }
        })
        .collect();

    let mut stats = Vec::with_capacity(series.len());
    let mut normalized_ids = Vec::with_capacity(series.len());
    for s in series {
        let st = instance_stats(s);
        let base: Vec<f64> = s.iter().map(|&x| (x - st.mu) / st.sigma).collect();
        let base_c = tape.constant(Tensor::row(&base));
        let scaled = tape.mul_scalar(base_c, r1);
        let xn = tape.add_scalar(scaled, r2);
        normalized_ids.push(xn);
        stats.push(st);
    }

    let counts = cfg.patch.patch_counts(cfg.lookback);
    let mut norm_obs = Vec::new();
    let mut preds: Vec<Vec<NodeId>> = vec![Vec::with_capacity(cfg.resolutions()); series.len()];
    for (i, &p) in cfg.patch.patch_sizes.iter().enumerate() {
        let n = counts[i];
        let align_w = bound.get(&format!("align.{i}.w"));
        let align_b = bound.get(&format!("align.{i}.b"));
        let pos = bound.get(&format!("pos.{i}"));
        let mut tokens = Vec::with_capacity(series.len());
        for &xn in &normalized_ids {
            let patches = tape.patchify(xn, p);
            let emb = tape.matmul(patches, align_w);
            let emb = tape.add_row(emb, align_b);
            tokens.push(tape.add(emb, pos));
        }
        let mut x = if tokens.len() == 1 { tokens[0] } else { tape.concat_rows(&tokens) };
        let blocks = vec![n; series.len()];
        for l in 0..cfg.layers {
            let mut nm = if mode.train_norm {
                NormMode::Train(&mut norm_obs)
            } else {
                NormMode::Eval(buffers)
            };
            x = build_attention_layer(
                tape,
                cfg,
                bound,
                &format!("layer.{l}"),
                &format!("res{i}"),
                x,
                &blocks,
                coeffs[l].as_ref(),
                &mut nm,
            );
        }
        if !tape.value(x).all_finite() {
            return Err(Error::NumericalInstability(format!("layer stack, resolution {i}")));
        }
        let head_w = bound.get(&format!("head.{i}.w"));
        let head_b = bound.get(&format!("head.{i}.b"));
        for (b, st) in stats.iter().enumerate() {
            let xb = if series.len() == 1 { x } else { tape.slice_rows(x, b * n, n) };
            let flat = tape.reshape(xb, 1, n * cfg.hidden_dim());
            let y = tape.matmul(flat, head_w);
            let y = tape.add_row(y, head_b);
            // invert the RevIN affine and window statistics
            let y = tape.add_scalar(y, neg_r2);
            let y = tape.mul_scalar(y, r1_recip);
            let y = tape.scale(y, st.sigma);
            let mu = tape.constant(Tensor::scalar(st.mu));
            let y = tape.add_scalar(y, mu);
            preds[b].push(y);
        }
    }
    Ok(ForwardOut { preds, stats, norm_obs })
}

/// Fold train-mode batch statistics into the running buffers.
pub fn update_running_stats(buffers: &mut BufferStore, obs: &[BatchNormObs]) {
    for o in obs {
        let mean = buffers.get_mut(&format!("{}.mean", o.name)).expect("norm buffer");
        for (m, b) in mean.data.iter_mut().zip(&o.mean.data) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        let var = buffers.get_mut(&format!("{}.var", o.name)).expect("norm buffer");
        for (v, b) in var.data.iter_mut().zip(&o.var.data) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

/// Concatenated flattened Q/K/V gradients for one layer (the adapter input
/// layout): order Q heads, K heads, V heads.
pub fn qkv_gradient(cfg: &BackboneConfig, grads: &ParamStore, layer_prefix: &str) -> Tensor {
    let mut data = Vec::with_capacity(cfg.qkv_grad_width());
    for name in ["q", "k", "v"] {
        for j in 0..cfg.heads {
            data.extend_from_slice(&grads[&format!("{layer_prefix}.{name}.{j}")].data);
        }
    }
    Tensor::new(1, data.len(), data)
}


#[cfg(test)]
pub use tests::tiny_config;
