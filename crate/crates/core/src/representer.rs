//! Input representation: channel independence, reversible instance
//! normalization (RevIN), multi-resolution patching, and per-resolution
//! alignment to the shared hidden width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable RevIN affine. One scalar pair shared across channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevInParams {
    pub r1: f64,
    pub r2: f64,
}

impl Default for RevInParams {
    fn default() -> Self {
        RevInParams { r1: 1.0, r2: 0.0 }
    }
}

/// Per-window instance statistics for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevInStats {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_sizes: Vec<usize>,
    pub hidden_dim: usize,
}

impl PatchConfig {
    pub fn new(patch_sizes: Vec<usize>, hidden_dim: usize) -> Result<Self> {
        if patch_sizes.is_empty() || hidden_dim == 0 {
            return Err(Error::Config("patch set and hidden dim must be nonempty".into()));
        }
        let mut sorted = patch_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != patch_sizes.len() || patch_sizes.iter().any(|&p| p == 0) {
            return Err(Error::Config("patch sizes must be distinct and ≥ 1".into()));
        }
        Ok(PatchConfig { patch_sizes, hidden_dim })
    }

    pub fn resolutions(&self) -> usize {
        self.patch_sizes.len()
    }

    /// Patch count N_i = ⌈L/P_i⌉ per resolution.
    pub fn patch_counts(&self, lookback: usize) -> Vec<usize> {
        self.patch_sizes.iter().map(|&p| lookback.div_ceil(p)).collect()
    }
}

/// Window-level instance statistics (population stddev, 1 substituted when
/// the window is constant).
pub fn instance_stats(history: &[f64]) -> RevInStats {
    let n = history.len() as f64;
    let mu = history.iter().sum::<f64>() / n;
    let var = history.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    RevInStats { mu, sigma: if sigma == 0.0 { 1.0 } else { sigma } }
}

/// RevIN forward: r1·(x−μ)/σ + r2 with window statistics μ, σ.
pub fn revin_normalize(history: &[f64], params: RevInParams) -> (Vec<f64>, RevInStats) {
    let stats = instance_stats(history);
    let out = history
        .iter()
        .map(|&x| params.r1 * (x - stats.mu) / stats.sigma + params.r2)
        .collect();
    (out, stats)
}

/// Exact inverse of [`revin_normalize`]: y = σ·((ŷ−r2)/r1) + μ.
pub fn revin_denormalize(
    prediction: &[f64],
    stats: RevInStats,
    params: RevInParams,
) -> Result<Vec<f64>> {
    if params.r1 == 0.0 {
        return Err(Error::NonInvertibleAffine);
    }
    Ok(prediction
        .iter()
        .map(|&y| stats.sigma * ((y - params.r2) / params.r1) + stats.mu)
        .collect())
}

/// Segment into ⌈L/P⌉ patches of width P, padding the final patch with
/// repeats of the last observed value.
pub fn patchify(normalized: &[f64], patch: usize) -> Tensor {
    assert!(patch >= 1 && !normalized.is_empty());
    let l = normalized.len();
    let n = l.div_ceil(patch);
    let data = (0..n * patch).map(|i| normalized[i.min(l - 1)]).collect();
    Tensor::new(n, patch, data)
}

/// Row-wise affine projection of N×P patches to width D.
pub fn align(patches: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if patches.cols != weight.rows || bias.cols != weight.cols || bias.rows != 1 {
        return Err(Error::ShapeError(format!(
            "align: patches {}×{} vs map {}×{}",
            patches.rows, patches.cols, weight.rows, weight.cols
        )));
    }
    let mut out = patches.matmul(weight);
    for r in 0..out.rows {
        for c in 0..out.cols {
            *out.at_mut(r, c) += bias.data[c];
        }
    }
    Ok(out)
}

/// Fully represented input: per channel, per resolution aligned embeddings
/// plus the per-channel stats needed to invert the output.
pub struct Represented {
    /// `aligned[channel][resolution]` is N_i×D.
    pub aligned: Vec<Vec<Tensor>>,
    pub stats: Vec<RevInStats>,
}

/// Treat the M channels of an L×M history as a size-M mini-batch of
/// univariate series; normalize, patch at every resolution, and align.
pub fn represent(
    history: &Tensor,
    config: &PatchConfig,
    revin: RevInParams,
    align_maps: &[(Tensor, Tensor)],
) -> Result<Represented> {
    if align_maps.len() != config.resolutions() {
        return Err(Error::ShapeError("one alignment map per resolution required".into()));
    }
    let mut aligned = Vec::with_capacity(history.cols);
    let mut stats = Vec::with_capacity(history.cols);
    for c in 0..history.cols {
        let series: Vec<f64> = (0..history.rows).map(|r| history.at(r, c)).collect();
        let (normalized, st) = revin_normalize(&series, revin);
        stats.push(st);
        let mut per_res = Vec::with_capacity(config.resolutions());
        for (i, &p) in config.patch_sizes.iter().enumerate() {
            let patches = patchify(&normalized, p);
            per_res.push(align(&patches, &align_maps[i].0, &align_maps[i].1)?);
        }
        aligned.push(per_res);
    }
    Ok(Represented { aligned, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_basic() {
        let (out, stats) = revin_normalize(&[1.0, 2.0, 3.0], RevInParams::default());
        assert!((stats.mu - 2.0).abs() < 1e-12);
        assert!((stats.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_constant_window() {
        let params = RevInParams { r1: 3.0, r2: 7.0 };
        let (out, stats) = revin_normalize(&[5.0, 5.0, 5.0], params);
        assert_eq!(stats.sigma, 1.0);
        assert!(out.iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn affine_only() {
        // zero-mean unit-variance input: output = r1·x + r2
        let x = [-1.0, 0.0, 1.0];
        let sigma = (2.0f64 / 3.0).sqrt();
        let scaled: Vec<f64> = x.iter().map(|v| v / sigma).collect();
        let (out, _) = revin_normalize(&scaled, RevInParams { r1: 2.0, r2: 1.0 });
        for (o, xi) in out.iter().zip(&scaled) {
            assert!((o - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn denormalize_inverse_formula() {
        let stats = RevInStats { mu: 10.0, sigma: 2.0 };
        let out = revin_denormalize(&[0.0], stats, RevInParams::default()).unwrap();
        assert_eq!(out, vec![10.0]);
    }

    #[test]
    fn denormalize_degenerate_affine() {
        let stats = RevInStats { mu: 0.0, sigma: 1.0 };
        assert!(matches!(
            revin_denormalize(&[1.0], stats, RevInParams { r1: 0.0, r2: 0.0 }),
            Err(Error::NonInvertibleAffine)
        ));
    }

    #[test]
    fn patchify_pad_counts() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let p = patchify(&x, 4);
        assert_eq!(p.shape(), (3, 4));
        assert_eq!(&p.data[8..], &[8.0, 9.0, 9.0, 9.0]);
        let p = patchify(&x[..8], 4);
        assert_eq!(p.shape(), (2, 4));
    }

    #[test]
    fn patch_counts_lookback_1440() {
        let cfg = PatchConfig::new(vec![16, 32, 64, 128], 16).unwrap();
        assert_eq!(cfg.patch_counts(1440), vec![90, 45, 23, 12]);
    }

    #[test]
    fn align_zero_patches_gives_bias_rows() {
        let patches = Tensor::zeros(3, 4);
        let w = Tensor::zeros(4, 2);
        let b = Tensor::row(&[1.5, -2.0]);
        let out = align(&patches, &w, &b).unwrap();
        for r in 0..3 {
            assert_eq!(out.at(r, 0), 1.5);
            assert_eq!(out.at(r, 1), -2.0);
        }
    }

    #[test]
    fn align_identity_map() {
        let patches = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(1, 2);
        assert_eq!(align(&patches, &w, &b).unwrap(), patches);
    }

    #[test]
    fn align_shape_mismatch() {
        let patches = Tensor::zeros(2, 3);
        let w = Tensor::zeros(4, 2);
        let b = Tensor::zeros(1, 2);
        assert!(matches!(align(&patches, &w, &b), Err(Error::ShapeError(_))));
    }

    #[test]
    fn represent_channel_permutation_equivariant() {
        let cfg = PatchConfig::new(vec![2, 4], 3).unwrap();
        let maps: Vec<(Tensor, Tensor)> = cfg
            .patch_sizes
            .iter()
            .map(|&p| {
                let w = Tensor::new(p, 3, (0..p * 3).map(|i| (i as f64) * 0.1 - 0.4).collect());
                (w, Tensor::row(&[0.1, 0.2, 0.3]))
            })
            .collect();
        let hist = Tensor::new(4, 2, vec![1.0, 9.0, 2.0, 7.0, 3.0, 5.0, 4.0, 3.0]);
        let rep = represent(&hist, &cfg, RevInParams::default(), &maps).unwrap();
        // swap channels
        let mut swapped = hist.clone();
        for r in 0..4 {
            swapped.data.swap(r * 2, r * 2 + 1);
        }
        let rep2 = represent(&swapped, &cfg, RevInParams::default(), &maps).unwrap();
        assert_eq!(rep.aligned[0], rep2.aligned[1]);
        assert_eq!(rep.aligned[1], rep2.aligned[0]);
    }

    proptest! {
        #[test]
        fn unpatch_is_left_inverse(l in 1usize..200, p in 1usize..40) {
            let x: Vec<f64> = (0..l).map(|v| (v as f64) * 0.37 - 3.0).collect();
            let patches = patchify(&x, p);
            prop_assert_eq!(patches.rows, l.div_ceil(p));
            let flat: Vec<f64> = patches.data[..l].to_vec();
            prop_assert_eq!(flat, x);
        }

        #[test]
        fn revin_roundtrip(vals in proptest::collection::vec(-50.0..50.0f64, 2..64),
                           r1 in 0.5..2.0f64, r2 in -1.0..1.0f64) {
            let params = RevInParams { r1, r2 };
            let (norm, stats) = revin_normalize(&vals, params);
            let back = revin_denormalize(&norm, stats, params).unwrap();
            for (a, b) in vals.iter().zip(back) {
                let denom = a.abs().max(1.0);
                prop_assert!((a - b).abs() / denom < 1e-10);
            }
        }
    }
}
