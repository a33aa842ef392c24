//! Workload traces, sliding windows, normalization statistics, and the three
//! evaluation metrics (MSE / MAE / WMAPE).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A uniformly sampled multi-channel workload stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTrace {
    /// Epoch seconds, strictly increasing with one uniform interval.
    pub timestamps: Vec<i64>,
    /// Row-major T×M value matrix.
    pub values: Tensor,
    pub channel_names: Vec<String>,
}

impl TimeSeriesTrace {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.cols
    }

    /// The uniform sampling interval Δ.
    pub fn interval(&self) -> i64 {
        self.timestamps[1] - self.timestamps[0]
    }

    pub fn from_values(start: i64, interval: i64, values: Tensor, names: Vec<String>) -> Result<Self> {
        let timestamps = (0..values.rows).map(|i| start + interval * i as i64).collect();
        let trace = TimeSeriesTrace { timestamps, values, channel_names: names };
        trace.validate()?;
        Ok(trace)
    }

    /// Single-channel convenience constructor for synthetic streams.
    pub fn from_channel(data: &[f64]) -> Result<Self> {
        Self::from_values(0, 60, Tensor::new(data.len(), 1, data.to_vec()), vec!["value".into()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::EmptyTrace(format!("need at least 2 rows, have {}", self.len())));
        }
        if self.values.rows != self.len() || self.values.cols != self.channel_names.len() {
            return Err(Error::ShapeError("trace rows/channels inconsistent".into()));
        }
        let delta = self.interval();
        if delta <= 0 {
            return Err(Error::IrregularSampling { row: 1, expected: 1, found: delta });
        }
        for i in 2..self.len() {
            let gap = self.timestamps[i] - self.timestamps[i - 1];
            if gap != delta {
                return Err(Error::IrregularSampling { row: i, expected: delta, found: gap });
            }
        }
        for (i, v) in self.values.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::MalformedValue {
                    row: i / self.values.cols,
                    detail: format!("non-finite value {v}"),
                });
            }
        }
        Ok(())
    }

    /// One channel as a flat vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.values.at(r, c)).collect()
    }

    /// Contiguous row slice [start, start+len) as an len×M matrix.
    pub fn rows(&self, start: usize, len: usize) -> Tensor {
        let m = self.channels();
        Tensor::new(len, m, self.values.data[start * m..(start + len) * m].to_vec())
    }
}

/// One forecasting instance: L history rows immediately followed by H target rows.
#[derive(Debug, Clone)]
pub struct Window {
    pub history: Tensor,
    pub target: Tensor,
    /// Position t of the first target row in the trace.
    pub anchor_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub wmape: f64,
    pub per_step_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
}

/// Parse a trace CSV: header `timestamp,<name1>,...,<nameM>`, then rows of
/// integer epoch seconds and M decimal values.
pub fn load_trace(path: &Path, _format: TraceFormat) -> Result<TimeSeriesTrace> {
    let text = fs::read_to_string(path)?;
    parse_trace_csv(&text)
}

pub fn parse_trace_csv(text: &str) -> Result<TimeSeriesTrace> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::EmptyTrace("no header line".into()))?;
    let mut cols = header.trim_end_matches('\r').split(',');
    let first = cols.next().unwrap_or_default();
    if first != "timestamp" {
        return Err(Error::MalformedValue {
            row: 0,
            detail: format!("header must start with 'timestamp', got '{first}'"),
        });
    }
    let channel_names: Vec<String> = cols.map(|s| s.trim().to_string()).collect();
    if channel_names.is_empty() {
        return Err(Error::EmptyTrace("no channels in header".into()));
    }
    let m = channel_names.len();
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if fields.len() != m + 1 {
            return Err(Error::MalformedValue {
                row,
                detail: format!("expected {} fields, got {}", m + 1, fields.len()),
            });
        }
        let ts: i64 = fields[0].trim().parse().map_err(|_| Error::MalformedValue {
            row,
            detail: format!("bad timestamp '{}'", fields[0]),
        })?;
        timestamps.push(ts);
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| Error::MalformedValue {
                row,
                detail: format!("bad value '{f}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedValue { row, detail: format!("non-finite value {v}") });
            }
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::EmptyTrace("no data rows".into()));
    }
    let rows = timestamps.len();
    let trace =
        TimeSeriesTrace { timestamps, values: Tensor::new(rows, m, data), channel_names };
    trace.validate()?;
    Ok(trace)
}

pub fn write_trace_csv(trace: &TimeSeriesTrace, path: &Path) -> Result<()> {
    let mut out = String::from("timestamp");
    for n in &trace.channel_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for r in 0..trace.len() {
        out.push_str(&trace.timestamps[r].to_string());
        for c in 0..trace.channels() {
            out.push(',');
            out.push_str(&format!("{}", trace.values.at(r, c)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Windows anchored at t = L, L+stride, … while t+H ≤ T.
pub fn window_stream(
    trace: &TimeSeriesTrace,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    assert!(lookback >= 1 && horizon >= 1 && stride >= 1);
    let t = trace.len();
    if lookback + horizon > t {
        return Err(Error::TraceTooShort { needed: lookback + horizon, have: t });
    }
    let mut windows = Vec::new();
    let mut anchor = lookback;
    while anchor + horizon <= t {
        windows.push(Window {
            history: trace.rows(anchor - lookback, lookback),
            target: trace.rows(anchor, horizon),
            anchor_index: anchor,
        });
        anchor += stride;
    }
    Ok(windows)
}

/// Per-channel mean and population standard deviation over a row range.
pub fn standard_stats(
    trace: &TimeSeriesTrace,
    range: std::ops::Range<usize>,
) -> Result<Vec<(f64, f64)>> {
    if range.is_empty() || range.end > trace.len() {
        return Err(Error::EmptyRange);
    }
    let n = range.len() as f64;
    let mut out = Vec::with_capacity(trace.channels());
    for c in 0..trace.channels() {
        let mean: f64 = range.clone().map(|r| trace.values.at(r, c)).sum::<f64>() / n;
        let var: f64 =
            range.clone().map(|r| (trace.values.at(r, c) - mean).powi(2)).sum::<f64>() / n;
        out.push((mean, var.sqrt()));
    }
    Ok(out)
}

/// Effective divisor for normalization: 1 when the channel is constant.
pub fn safe_sigma(sigma: f64) -> f64 {
    if sigma == 0.0 {
        1.0
    } else {
        sigma
    }
}

pub fn mse(pred: &Tensor, truth: &Tensor) -> f64 {
    assert_eq!(pred.shape(), truth.shape(), "metric shape mismatch");
    pred.data.iter().zip(&truth.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        / pred.len() as f64
}

pub fn mae(pred: &Tensor, truth: &Tensor) -> f64 {
    assert_eq!(pred.shape(), truth.shape(), "metric shape mismatch");
    pred.data.iter().zip(&truth.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
}

pub fn wmape(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    assert_eq!(pred.shape(), truth.shape(), "metric shape mismatch");
    let denom: f64 = truth.data.iter().sum();
    if denom <= 0.0 {
        return Err(Error::UndefinedDenominator(denom));
    }
    let num: f64 = pred.data.iter().zip(&truth.data).map(|(a, b)| (a - b).abs()).sum();
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace_with(values: Vec<f64>, m: usize) -> TimeSeriesTrace {
        let rows = values.len() / m;
        TimeSeriesTrace::from_values(
            0,
            60,
            Tensor::new(rows, m, values),
            (0..m).map(|i| format!("c{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_basic_csv() {
        let trace = parse_trace_csv("timestamp,qps\n0,1.0\n60,2.0\n120,3.0\n").unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace.channels(), 1);
        assert_eq!(trace.interval(), 60);
    }

    #[test]
    fn irregular_gap_rejected() {
        let err = parse_trace_csv("timestamp,qps\n0,1.0\n60,2.0\n180,3.0\n").unwrap_err();
        assert!(matches!(err, Error::IrregularSampling { found: 120, .. }));
    }

    #[test]
    fn two_channel_csv() {
        let mut text = String::from("timestamp,a,b\n");
        for i in 0..100 {
            text.push_str(&format!("{},{},{}\n", i * 30, i, i * 2));
        }
        let trace = parse_trace_csv(&text).unwrap();
        assert_eq!(trace.len(), 100);
        assert_eq!(trace.channels(), 2);
    }

    #[test]
    fn crlf_accepted() {
        let trace = parse_trace_csv("timestamp,qps\r\n0,1.0\r\n60,2.0\r\n").unwrap();
        assert_eq!(trace.len(), 2);
    }

    #[test]
    fn nan_value_rejected() {
        let err = parse_trace_csv("timestamp,qps\n0,1.0\n60,NaN\n").unwrap_err();
        assert!(matches!(err, Error::MalformedValue { .. }));
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(parse_trace_csv(""), Err(Error::EmptyTrace(_))));
        assert!(matches!(parse_trace_csv("timestamp,qps\n"), Err(Error::EmptyTrace(_))));
    }

    #[test]
    fn window_anchors() {
        // T=100, L=60, H=10, stride=10 → anchors 60,70,80,90
        let trace = trace_with((0..100).map(|v| v as f64).collect(), 1);
        let ws = window_stream(&trace, 60, 10, 10).unwrap();
        let anchors: Vec<usize> = ws.iter().map(|w| w.anchor_index).collect();
        assert_eq!(anchors, vec![60, 70, 80, 90]);
        // history rows immediately precede target rows
        for w in &ws {
            assert_eq!(w.history.at(59, 0) + 1.0, w.target.at(0, 0));
        }
    }

    #[test]
    fn window_single_and_short() {
        let trace = trace_with((0..70).map(|v| v as f64).collect(), 1);
        assert_eq!(window_stream(&trace, 60, 10, 10).unwrap().len(), 1);
        let trace = trace_with((0..69).map(|v| v as f64).collect(), 1);
        assert!(matches!(
            window_stream(&trace, 60, 10, 10),
            Err(Error::TraceTooShort { needed: 70, have: 69 })
        ));
    }

    #[test]
    fn stats_population_stddev() {
        let trace = trace_with(vec![1.0, 2.0, 3.0], 1);
        let stats = standard_stats(&trace, 0..3).unwrap();
        assert!((stats[0].0 - 2.0).abs() < 1e-12);
        assert!((stats[0].1 - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stats_constant_channel() {
        let trace = trace_with(vec![5.0, 5.0, 5.0], 1);
        let stats = standard_stats(&trace, 0..3).unwrap();
        assert_eq!(stats[0], (5.0, 0.0));
        assert_eq!(safe_sigma(stats[0].1), 1.0);
    }

    #[test]
    fn stats_channels_independent() {
        let trace = trace_with(vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0], 2);
        let stats = standard_stats(&trace, 0..3).unwrap();
        assert!((stats[0].0 - 2.0).abs() < 1e-12);
        assert!((stats[1].0 - 20.0).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        let pred = Tensor::new(2, 1, vec![2.0, 2.0]);
        let truth = Tensor::new(2, 1, vec![1.0, 3.0]);
        assert!((wmape(&pred, &truth).unwrap() - 0.5).abs() < 1e-12);
        let pred = Tensor::new(2, 1, vec![0.0, 0.0]);
        let truth = Tensor::new(2, 1, vec![1.0, 1.0]);
        assert!((mae(&pred, &truth) - 1.0).abs() < 1e-12);
        assert_eq!(mse(&truth, &truth), 0.0);
        assert_eq!(mae(&truth, &truth), 0.0);
        assert_eq!(wmape(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn wmape_nonpositive_denominator() {
        let pred = Tensor::new(1, 1, vec![1.0]);
        let truth = Tensor::new(1, 1, vec![-1.0]);
        assert!(matches!(wmape(&pred, &truth), Err(Error::UndefinedDenominator(_))));
    }

    proptest! {
        #[test]
        fn stride_h_targets_tile_without_overlap(t in 20usize..200, l in 1usize..10, h in 1usize..10) {
            prop_assume!(l + h <= t);
            let trace = trace_with((0..t).map(|v| v as f64).collect(), 1);
            let ws = window_stream(&trace, l, h, h).unwrap();
            let mut covered = vec![0usize; t];
            for w in &ws {
                for i in w.anchor_index..w.anchor_index + h {
                    covered[i] += 1;
                }
            }
            // contiguous block starting at l, each index exactly once
            for (i, &c) in covered.iter().enumerate() {
                if i < l { prop_assert_eq!(c, 0); } else { prop_assert!(c <= 1); }
            }
            prop_assert!(covered[l] == 1);
        }

        #[test]
        fn mse_zero_iff_equal(vals in proptest::collection::vec(-100.0..100.0f64, 1..32)) {
            let a = Tensor::new(vals.len(), 1, vals.clone());
            prop_assert_eq!(mse(&a, &a), 0.0);
            let mut b = a.clone();
            b.data[0] += 1.0;
            prop_assert!(mse(&a, &b) > 0.0);
        }

        #[test]
        fn wmape_channel_permutation_invariant(vals in proptest::collection::vec(0.1..10.0f64, 4..20)) {
            let n = vals.len() / 2 * 2;
            let truth = Tensor::new(n / 2, 2, vals[..n].to_vec());
            let pred = truth.map(|v| v * 1.1);
            // swap the two channels consistently
            let swap = |t: &Tensor| {
                let mut s = t.clone();
                for r in 0..t.rows {
                    s.data[r * 2] = t.at(r, 1);
                    s.data[r * 2 + 1] = t.at(r, 0);
                }
                s
            };
            let w1 = wmape(&pred, &truth).unwrap();
            let w2 = wmape(&swap(&pred), &swap(&truth)).unwrap();
            prop_assert!((w1 - w2).abs() < 1e-12);
        }
    }
}
