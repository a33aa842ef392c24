//! Expert combination: exponentiated-gradient simplex weights, the Online
//! Scaling attention refinement, follow-the-perturbed-leader selection, and
//! regret accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_coeffs, build_mhsa, BackboneConfig, Bound};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// EGD simplex weights, kept in log space so long runs cannot underflow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgdState {
    pub log_w: Vec<f64>,
    pub eta: f64,
}

impl EgdState {
    /// Uniform start at the simplex center.
    pub fn uniform(d: usize, eta: f64) -> Self {
        assert!(d >= 1 && eta >= 0.0);
        EgdState { log_w: vec![-(d as f64).ln(); d], eta }
    }

    pub fn weights(&self) -> Vec<f64> {
        let max = self.log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.log_w.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / z).collect()
    }
}

/// Multiplicative update w_i ← w_i·exp(−η·loss_i)/Z, performed in log space.
pub fn egd_update(state: &mut EgdState, losses: &[f64]) {
    assert_eq!(losses.len(), state.log_w.len());
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    for (lw, &l) in state.log_w.iter_mut().zip(losses) {
        *lw -= state.eta * l;
    }
    // renormalize in log space
    let max = state.log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = state.log_w.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + z.ln();
    for lw in state.log_w.iter_mut() {
        *lw -= log_z;
    }
}

/// Online Scaling forward: stack the d expert forecasts plus the latest
/// observed truth, embed rows from H to D, run one adapted attention layer,
/// flatten, map to d logits, add the EGD weights pre-softmax, and combine.
///
/// The expert forecasts enter as constants: the combined loss trains only
/// the Online Scaling parameters, never the experts.
pub fn build_online_scale(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    bound: &Bound,
    os_ema: &Tensor,
    forecasts: &[Tensor],
    latest_truth: &Tensor,
    w: &[f64],
    adapt: bool,
) -> (NodeId, NodeId) {
    let d = forecasts.len();
    assert_eq!(w.len(), d);
    assert_eq!(latest_truth.shape(), (1, cfg.horizon));
    let mut rows = Vec::with_capacity((d + 1) * cfg.horizon);
    for f in forecasts {
        assert_eq!(f.shape(), (1, cfg.horizon));
        rows.extend_from_slice(&f.data);
    }
    rows.extend_from_slice(&latest_truth.data);
    let stacked = tape.constant(Tensor::new(d + 1, cfg.horizon, rows));
    let embed_w = bound.get("os.embed.w");
    let embed_b = bound.get("os.embed.b");
    let emb = tape.matmul(stacked, embed_w);
    let emb = tape.add_row(emb, embed_b);
    let coeffs = if adapt {
        Some(build_coeffs(tape, cfg, bound, "os.adapter", os_ema))
    } else {
        None
    };
    let att = build_mhsa(tape, cfg, bound, "os", emb, coeffs.as_ref());
    let flat = tape.reshape(att, 1, (d + 1) * cfg.hidden_dim());
    let out_w = bound.get("os.out.w");
    let out_b = bound.get("os.out.b");
    let logits = tape.matmul(flat, out_w);
    let logits = tape.add_row(logits, out_b);
    let w_const = tape.constant(Tensor::row(w));
    let logits = tape.add(logits, w_const);
    let s = tape.softmax_rows(logits);
    let f_const = tape.constant({
        let mut data = Vec::with_capacity(d * cfg.horizon);
        for f in forecasts {
            data.extend_from_slice(&f.data);
        }
        Tensor::new(d, cfg.horizon, data)
    });
    let combined = tape.matmul(s, f_const);
    (s, combined)
}

/// Follow-the-perturbed-leader state over d experts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FtplState {
    pub cumulative_losses: Vec<f64>,
    /// Repeat count m of the perturbed argmin.
    pub repeats: usize,
    /// Perturbation scale b of Uniform(0, b).
    pub scale: f64,
    pub rng_seed: u64,
    /// Selection counter; makes repeated selects deterministic yet distinct.
    pub draws: u64,
}

impl FtplState {
    pub fn new(d: usize, repeats: usize, scale: f64, rng_seed: u64) -> Self {
        assert!(d >= 1 && repeats >= 1 && scale >= 0.0);
        FtplState { cumulative_losses: vec![0.0; d], repeats, scale, rng_seed, draws: 0 }
    }

    pub fn experts(&self) -> usize {
        self.cumulative_losses.len()
    }
}

/// Repeat m times: perturb each cumulative loss with Uniform(0, b) noise and
/// take the argmin; then sample one of the m decisions uniformly. Ties break
/// toward the lowest index. Deterministic given the stored seed.
pub fn ftpl_select(state: &mut FtplState) -> usize {
    let d = state.experts();
    if d == 1 {
        state.draws += 1;
        return 0;
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(state.rng_seed.wrapping_add(state.draws.wrapping_mul(0x9E3779B97F4A7C15)));
    state.draws += 1;
    let mut decisions = Vec::with_capacity(state.repeats);
    for _ in 0..state.repeats {
        let mut best = 0usize;
        let mut best_val = f64::INFINITY;
        for (i, &cl) in state.cumulative_losses.iter().enumerate() {
            let noise = if state.scale > 0.0 { rng.random_range(0.0..state.scale) } else { 0.0 };
            let val = cl + noise;
            if val < best_val {
                best_val = val;
                best = i;
            }
        }
        decisions.push(best);
    }
    decisions[rng.random_range(0..decisions.len())]
}

/// Elementwise running-sum update of the cumulative losses.
pub fn ftpl_accumulate(state: &mut FtplState, losses: &[f64]) {
    assert_eq!(losses.len(), state.experts());
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    for (c, &l) in state.cumulative_losses.iter_mut().zip(losses) {
        *c += l;
    }
}

/// Per-step losses of the combined output and of every expert.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegretLedger {
    pub combined: Vec<f64>,
    /// `experts[t]` holds the d per-expert losses at step t.
    pub experts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretReport {
    /// regret(T′) for T′ = 1..T against the fixed hindsight-best expert.
    pub regret_curve: Vec<f64>,
    pub best_expert: usize,
    /// Least-squares slope of log regret vs log T′ over the second half.
    pub slope: f64,
}

impl RegretLedger {
    pub fn push(&mut self, combined_loss: f64, expert_losses: &[f64]) {
        if let Some(first) = self.experts.first() {
            assert_eq!(first.len(), expert_losses.len());
        }
        self.combined.push(combined_loss);
        self.experts.push(expert_losses.to_vec());
    }

    pub fn steps(&self) -> usize {
        self.combined.len()
    }

    pub fn report(&self) -> RegretReport {
        assert!(self.steps() >= 2, "need at least two recorded steps");
        let d = self.experts[0].len();
        let mut totals = vec![0.0; d];
        for step in &self.experts {
            for (t, &l) in totals.iter_mut().zip(step) {
                *t += l;
            }
        }
        let best_expert = totals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut curve = Vec::with_capacity(self.steps());
        let mut cum_combined = 0.0;
        let mut cum_best = 0.0;
        for (c, step) in self.combined.iter().zip(&self.experts) {
            cum_combined += c;
            cum_best += step[best_expert];
            curve.push(cum_combined - cum_best);
        }
        let slope = log_log_slope(&curve);
        RegretReport { regret_curve: curve, best_expert, slope }
    }

    /// CSV export: `step,combined_loss,expert_1,...,expert_d`.
    pub fn to_csv(&self) -> String {
        let d = self.experts.first().map_or(0, |e| e.len());
        let mut out = String::from("step,combined_loss");
        for i in 1..=d {
            out.push_str(&format!(",expert_{i}"));
        }
        out.push('\n');
        for (t, (c, ex)) in self.combined.iter().zip(&self.experts).enumerate() {
            out.push_str(&format!("{},{}", t + 1, c));
            for l in ex {
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
        out
    }
}

fn log_log_slope(curve: &[f64]) -> f64 {
    let start = curve.len() / 2;
    let pts: Vec<(f64, f64)> = (start..curve.len())
        .map(|i| (((i + 1) as f64).ln(), curve[i].max(1e-9).ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (n * sxy - sx * sy) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, tiny_config};
    use crate::backbone::EmaStore;

    fn assert_simplex(w: &[f64], tol: f64) {
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < tol);
    }

    #[test]
    fn egd_equal_losses_no_change() {
        let mut st = EgdState::uniform(3, 1.0);
        let before = st.weights();
        egd_update(&mut st, &[2.5, 2.5, 2.5]);
        let after = st.weights();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn egd_worked_example() {
        // w=[0.5,0.5], η=1, losses=[0, ln 2] → numerators 0.5, 0.25 → [2/3, 1/3]
        let mut st = EgdState::uniform(2, 1.0);
        egd_update(&mut st, &[0.0, std::f64::consts::LN_2]);
        let w = st.weights();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn egd_zero_eta_inert() {
        let mut st = EgdState::uniform(4, 0.0);
        egd_update(&mut st, &[10.0, 0.0, 3.0, 7.0]);
        for w in st.weights() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn egd_best_loss_weight_never_relatively_decreases() {
        let mut st = EgdState::uniform(3, 0.5);
        egd_update(&mut st, &[1.0, 0.2, 0.9]);
        let w1 = st.weights();
        egd_update(&mut st, &[1.0, 0.1, 0.5]);
        let w2 = st.weights();
        // expert 1 had the strictly smallest loss: its relative mass grows
        assert!(w2[1] / w2[0] >= w1[1] / w1[0]);
        assert!(w2[1] / w2[2] >= w1[1] / w1[2]);
    }

    #[test]
    fn egd_simplex_preserved_under_extreme_losses() {
        let mut st = EgdState::uniform(4, 1.0);
        for _ in 0..2000 {
            egd_update(&mut st, &[1000.0, 0.0, 500.0, 1.0]);
            assert_simplex(&st.weights(), 1e-12);
        }
    }

    #[test]
    fn ftpl_zero_scale_is_argmin() {
        let mut st = FtplState::new(3, 8, 0.0, 42);
        st.cumulative_losses = vec![5.0, 3.0, 7.0];
        assert_eq!(ftpl_select(&mut st), 1);
    }

    #[test]
    fn ftpl_singleton() {
        let mut st = FtplState::new(1, 4, 10.0, 1);
        assert_eq!(ftpl_select(&mut st), 0);
    }

    #[test]
    fn ftpl_tie_breaks_low_index() {
        let mut st = FtplState::new(3, 1, 0.0, 9);
        st.cumulative_losses = vec![2.0, 2.0, 2.0];
        assert_eq!(ftpl_select(&mut st), 0);
    }

    #[test]
    fn ftpl_symmetric_split() {
        // equal cumulative losses, positive noise: each of 2 experts ~50%
        let mut st = FtplState::new(2, 4, 1.0, 7);
        let trials = 10_000;
        let mut count = [0usize; 2];
        for _ in 0..trials {
            count[ftpl_select(&mut st)] += 1;
        }
        let freq = count[0] as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.05, "freq {freq}");
    }

    #[test]
    fn ftpl_accumulate_running_sum() {
        let mut st = FtplState::new(2, 1, 0.0, 0);
        ftpl_accumulate(&mut st, &[1.0, 2.0]);
        ftpl_accumulate(&mut st, &[1.0, 2.0]);
        assert_eq!(st.cumulative_losses, vec![2.0, 4.0]);
        let before = st.cumulative_losses.clone();
        ftpl_accumulate(&mut st, &[0.0, 0.0]);
        assert_eq!(st.cumulative_losses, before);
    }

    #[test]
    fn ftpl_deterministic_given_seed() {
        let run = || {
            let mut st = FtplState::new(3, 8, 2.0, 123);
            st.cumulative_losses = vec![1.0, 1.1, 0.9];
            (0..50).map(|_| ftpl_select(&mut st)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn regret_zero_when_combined_matches_best() {
        let mut ledger = RegretLedger::default();
        for _ in 0..10 {
            ledger.push(0.2, &[0.2, 0.9]);
        }
        let report = ledger.report();
        assert_eq!(report.best_expert, 0);
        assert!(report.regret_curve.iter().all(|&r| r.abs() < 1e-12));
    }

    #[test]
    fn regret_static_uniform_over_two_experts() {
        // best expert loss 0, other loss 1, combined = 0.5 → regret(T′) = T′/2
        let mut ledger = RegretLedger::default();
        for _ in 0..100 {
            ledger.push(0.5, &[0.0, 1.0]);
        }
        let report = ledger.report();
        for (i, r) in report.regret_curve.iter().enumerate() {
            assert!((r - (i + 1) as f64 / 2.0).abs() < 1e-12);
        }
        // linear regret → slope ≈ 1
        assert!((report.slope - 1.0).abs() < 0.05);
    }

    #[test]
    fn egd_vanishing_average_regret() {
        // the same stream, but EGD actually learns: regret(T)/T → 0
        let mut st = EgdState::uniform(2, 0.5);
        let mut ledger = RegretLedger::default();
        let t_max = 2000;
        for _ in 0..t_max {
            let losses = [0.0, 1.0];
            let w = st.weights();
            let combined: f64 = w.iter().zip(losses).map(|(wi, l)| wi * l).sum();
            ledger.push(combined, &losses);
            egd_update(&mut st, &losses);
        }
        let report = ledger.report();
        let avg = report.regret_curve.last().unwrap() / t_max as f64;
        assert!(avg < 0.01, "average regret {avg}");
    }

    #[test]
    fn online_scale_softmax_of_w_when_output_zero() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (params, _, ema) = init_params(&cfg, Some(2), &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let forecasts = vec![Tensor::row(&[1.0; 4]), Tensor::row(&[2.0; 4])];
        let truth = Tensor::row(&[1.5; 4]);
        let os_ema = get_os_ema(&ema);
        let (s, _) = build_online_scale(
            &mut tape, &cfg, &bound, &os_ema, &forecasts, &truth, &[0.7, 0.3], false,
        );
        // out map is zero-initialized → logits are exactly w
        let sv = tape.value(s);
        let e7 = 0.7f64.exp();
        let e3 = 0.3f64.exp();
        assert!((sv.data[0] - e7 / (e7 + e3)).abs() < 1e-12);
        assert!((sv.data[1] - e3 / (e7 + e3)).abs() < 1e-12);
    }

    #[test]
    fn online_scale_identical_experts_reproduced() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (params, _, ema) = init_params(&cfg, Some(3), &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let f = Tensor::row(&[0.3, -0.2, 0.8, 1.1]);
        let forecasts = vec![f.clone(), f.clone(), f.clone()];
        let truth = Tensor::row(&[0.0; 4]);
        let os_ema = get_os_ema(&ema);
        let (s, combined) = build_online_scale(
            &mut tape, &cfg, &bound, &os_ema, &forecasts, &truth, &[0.2, 0.3, 0.5], true,
        );
        assert_simplex(&tape.value(s).data, 1e-12);
        for (a, b) in tape.value(combined).data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn get_os_ema(ema: &EmaStore) -> Tensor {
        ema["ema.os"].clone()
    }
}
