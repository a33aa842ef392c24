//! Discrete-time predictive autoscaling simulator: workload replay, three
//! scaling policies, pod lifecycle with startup delay, and a deterministic
//! fluid FIFO queue for latency accounting.

use serde::{Deserialize, Serialize};

use crate::engine::{forecast_once, ModelState};
use crate::error::{Error, Result};
use crate::series::TimeSeriesTrace;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Requests/sec one ready pod can serve.
    pub pod_capacity: f64,
    pub target_utilization: f64,
    /// Seconds before a newly created pod is ready.
    pub pod_startup_delay: u64,
    pub scale_interval: u64,
    pub min_pods: usize,
    pub max_pods: usize,
    /// Service latency of an unqueued request, seconds.
    pub base_latency: f64,
    pub tick: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            pod_capacity: 100.0,
            target_utilization: 0.5,
            pod_startup_delay: 60,
            scale_interval: 60,
            min_pods: 1,
            max_pods: 100,
            base_latency: 0.05,
            tick: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pod_capacity <= 0.0 {
            return Err(Error::Config("pod capacity must be > 0".into()));
        }
        if !(self.target_utilization > 0.0 && self.target_utilization <= 1.0) {
            return Err(Error::Config("target utilization must be in (0, 1]".into()));
        }
        if self.min_pods > self.max_pods {
            return Err(Error::Config("min_pods must be ≤ max_pods".into()));
        }
        if self.tick == 0 || self.scale_interval == 0 || self.scale_interval % self.tick != 0 {
            return Err(Error::Config("scale interval must be a positive multiple of the tick".into()));
        }
        Ok(())
    }

    fn interval_ticks(&self) -> usize {
        (self.scale_interval / self.tick) as usize
    }

    fn startup_ticks(&self) -> u64 {
        self.pod_startup_delay.div_ceil(self.tick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Naive,
    Ideal,
    Predictive,
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub ready_pods: usize,
    /// (count, ready_at_tick)
    pub pending_pods: Vec<(usize, u64)>,
    pub queue_backlog: f64,
}

impl ClusterState {
    fn pending_total(&self) -> usize {
        self.pending_pods.iter().map(|p| p.0).sum()
    }

    fn total(&self) -> usize {
        self.ready_pods + self.pending_total()
    }
}

/// Table-style latency/pod summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub ave_lat: f64,
    pub max_lat: f64,
    pub p999_lat: f64,
    pub p99_lat: f64,
    pub p90_lat: f64,
    pub ave_pod: f64,
    pub max_pod: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TickLog {
    pub tick: u64,
    pub arrival_rate: f64,
    pub ready_pods: usize,
    pub pending_pods: usize,
    pub backlog: f64,
    pub served: f64,
    /// Mean latency of the load served this tick; 0 when nothing was served.
    pub mean_latency: f64,
}

pub fn tick_log_csv(log: &[TickLog]) -> String {
    let mut out = String::from("tick,arrival_rate,ready_pods,pending_pods,backlog,served,mean_latency\n");
    for t in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.tick, t.arrival_rate, t.ready_pods, t.pending_pods, t.backlog, t.served, t.mean_latency
        ));
    }
    out
}

fn clamp_pods(desired: usize, cfg: &SimConfig) -> usize {
    desired.clamp(cfg.min_pods, cfg.max_pods)
}

/// desired = clamp(⌈max(forecast) / (capacity × target)⌉, min, max).
pub fn policy_predictive(forecast: &[f64], cfg: &SimConfig) -> usize {
    let peak = forecast.iter().cloned().fold(0.0_f64, f64::max);
    let desired = (peak / (cfg.pod_capacity * cfg.target_utilization)).ceil() as usize;
    clamp_pods(desired, cfg)
}

/// Standard reactive rule from the just-elapsed interval:
/// desired = clamp(⌈current × observed / target⌉, min, max).
pub fn policy_naive(recent_utilization: f64, current_pods: usize, cfg: &SimConfig) -> usize {
    assert!(recent_utilization >= 0.0);
    let desired = (current_pods as f64 * recent_utilization / cfg.target_utilization).ceil() as usize;
    clamp_pods(desired, cfg)
}

/// Same sizing rule as the predictive policy, fed the true future.
pub fn policy_ideal(future_truth: &[f64], cfg: &SimConfig) -> usize {
    policy_predictive(future_truth, cfg)
}

/// Supplies arrival-rate forecasts to the predictive policy.
pub trait ForecastProvider {
    /// Forecast the n ticks that follow `history` (tick-resolution rates
    /// observed so far, from the start of the run).
    fn forecast(&mut self, history: &[f64], n: usize) -> Vec<f64>;
}

/// Clairvoyant provider replaying the true trace.
pub struct PerfectForecast {
    pub rates: Vec<f64>,
}

impl ForecastProvider for PerfectForecast {
    fn forecast(&mut self, history: &[f64], n: usize) -> Vec<f64> {
        let start = history.len();
        (start..start + n)
            .map(|i| self.rates.get(i).or(self.rates.last()).copied().unwrap_or(0.0))
            .collect()
    }
}

/// Drives a trained forecaster: ticks are aggregated to the model's sampling
/// interval, the ensemble forecast for the next sample is broadcast back to
/// tick resolution. Falls back to the latest rate until a full lookback of
/// aggregated samples exists.
pub struct EngineForecaster {
    pub state: ModelState,
    /// Ticks per aggregated model sample.
    pub ticks_per_sample: usize,
}

impl ForecastProvider for EngineForecaster {
    fn forecast(&mut self, history: &[f64], n: usize) -> Vec<f64> {
        let k = self.ticks_per_sample.max(1);
        let samples: Vec<f64> = history
            .chunks(k)
            .filter(|c| c.len() == k)
            .map(|c| c.iter().sum::<f64>() / k as f64)
            .collect();
        let l = self.state.config.lookback;
        let fallback = history.last().copied().unwrap_or(0.0);
        if samples.len() < l {
            return vec![fallback; n];
        }
        let hist = Tensor::new(l, 1, samples[samples.len() - l..].to_vec());
        match forecast_once(&self.state, &hist, None) {
            Ok(combined) => {
                let pred = &combined[0];
                (0..n).map(|i| pred.get(i / k).or(pred.last()).copied().unwrap_or(fallback).max(0.0)).collect()
            }
            Err(_) => vec![fallback; n],
        }
    }
}

/// Replay the trace through the queueing model under one scaling policy.
/// The trace's single channel is the arrival rate (requests/sec), one row
/// per tick. Returns the report and the per-tick log.
pub fn simulate(
    policy: Policy,
    workload: &TimeSeriesTrace,
    cfg: &SimConfig,
    mut provider: Option<&mut dyn ForecastProvider>,
) -> Result<(SimReport, Vec<TickLog>)> {
    cfg.validate()?;
    if workload.channels() != 1 {
        return Err(Error::Config("workload must be single-channel".into()));
    }
    let rates = workload.channel(0);
    if let Some(r) = rates.iter().find(|r| **r < 0.0) {
        return Err(Error::MalformedValue { row: 0, detail: format!("negative rate {r}") });
    }
    if policy == Policy::Predictive && provider.is_none() {
        return Err(Error::Config("predictive policy needs a forecaster".into()));
    }

    let tick_secs = cfg.tick as f64;
    let interval = cfg.interval_ticks();
    let mut cluster = ClusterState {
        ready_pods: cfg.min_pods,
        pending_pods: Vec::new(),
        queue_backlog: 0.0,
    };
    // FIFO of (amount, arrival_tick)
    let mut queue: std::collections::VecDeque<(f64, u64)> = std::collections::VecDeque::new();
    // weighted latency samples (latency_secs, served amount)
    let mut latencies: Vec<(f64, f64)> = Vec::new();
    let mut log = Vec::with_capacity(rates.len());
    let mut interval_arrivals = 0.0;
    let mut interval_capacity = 0.0;
    let mut pod_sum = 0.0;
    let mut max_pod = cfg.min_pods;

    for (now, &rate) in rates.iter().enumerate() {
        let now = now as u64;
        // pods finishing startup become ready
        let mut became_ready = 0;
        cluster.pending_pods.retain(|&(count, at)| {
            if at <= now {
                became_ready += count;
                false
            } else {
                true
            }
        });
        cluster.ready_pods += became_ready;

        // scaling decision at the commencement of each interval
        if now as usize % interval == 0 {
            let current = cluster.total();
            let desired = match policy {
                Policy::Naive => {
                    let observed = if interval_capacity > 0.0 {
                        interval_arrivals / interval_capacity
                    } else if interval_arrivals > 0.0 {
                        1e9
                    } else {
                        cfg.target_utilization // no signal yet: hold steady
                    };
                    policy_naive(observed.min(1e9), current, cfg)
                }
                Policy::Ideal => {
                    let start = now as usize;
                    let end = (start + interval).min(rates.len());
                    policy_ideal(&rates[start..end], cfg)
                }
                Policy::Predictive => {
                    let f = provider
                        .as_mut()
                        .unwrap()
                        .forecast(&rates[..now as usize], interval);
                    policy_predictive(&f, cfg)
                }
            };
            if desired > current {
                let ready_at = if policy == Policy::Ideal {
                    now // provisioned startup-delay early
                } else {
                    now + cfg.startup_ticks()
                };
                let mut add = desired - current;
                if ready_at <= now {
                    cluster.ready_pods += add;
                } else {
                    // merge with an existing cohort due at the same tick
                    if let Some(p) = cluster.pending_pods.iter_mut().find(|p| p.1 == ready_at) {
                        p.0 += add;
                        add = 0;
                    }
                    if add > 0 {
                        cluster.pending_pods.push((add, ready_at));
                    }
                }
            } else if desired < current {
                // scale-down is immediate: drop pending first, then ready
                let mut remove = current - desired;
                while remove > 0 {
                    if let Some(last) = cluster.pending_pods.last_mut() {
                        let take = last.0.min(remove);
                        last.0 -= take;
                        remove -= take;
                        if last.0 == 0 {
                            cluster.pending_pods.pop();
                        }
                    } else {
                        cluster.ready_pods -= remove;
                        remove = 0;
                    }
                }
            }
            interval_arrivals = 0.0;
            interval_capacity = 0.0;
        }

        // arrivals join the FIFO queue
        let arrivals = rate * tick_secs;
        if arrivals > 0.0 {
            queue.push_back((arrivals, now));
        }
        interval_arrivals += arrivals;
        interval_capacity += cluster.ready_pods as f64 * cfg.pod_capacity * tick_secs;

        // ready pods drain the queue front-first
        let mut budget = cluster.ready_pods as f64 * cfg.pod_capacity * tick_secs;
        let mut served = 0.0;
        let mut lat_weighted = 0.0;
        while budget > 0.0 {
            let Some(front) = queue.front_mut() else { break };
            let take = front.0.min(budget);
            let wait = (now - front.1) as f64 * tick_secs;
            let lat = cfg.base_latency + wait;
            latencies.push((lat, take));
            lat_weighted += lat * take;
            served += take;
            budget -= take;
            front.0 -= take;
            if front.0 <= 1e-12 {
                queue.pop_front();
            }
        }
        cluster.queue_backlog = queue.iter().map(|q| q.0).sum();

        pod_sum += cluster.ready_pods as f64;
        max_pod = max_pod.max(cluster.ready_pods);
        log.push(TickLog {
            tick: now,
            arrival_rate: rate,
            ready_pods: cluster.ready_pods,
            pending_pods: cluster.pending_total(),
            backlog: cluster.queue_backlog,
            served,
            mean_latency: if served > 0.0 { lat_weighted / served } else { 0.0 },
        });
    }

    let report = build_report(&latencies, pod_sum / rates.len() as f64, max_pod);
    Ok((report, log))
}

/// Weighted nearest-rank percentile: the smallest latency whose cumulative
/// weight reaches p/100 of the total.
pub fn weighted_percentile(samples: &mut [(f64, f64)], p: f64) -> f64 {
    assert!(!samples.is_empty() && (0.0..=100.0).contains(&p));
    samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = samples.iter().map(|s| s.1).sum();
    let threshold = total * p / 100.0;
    let mut cum = 0.0;
    for &(lat, w) in samples.iter() {
        cum += w;
        if cum >= threshold - 1e-12 {
            return lat;
        }
    }
    samples.last().unwrap().0
}

fn build_report(latencies: &[(f64, f64)], ave_pod: f64, max_pod: usize) -> SimReport {
    if latencies.is_empty() {
        return SimReport {
            ave_lat: 0.0,
            max_lat: 0.0,
            p999_lat: 0.0,
            p99_lat: 0.0,
            p90_lat: 0.0,
            ave_pod,
            max_pod,
        };
    }
    let total: f64 = latencies.iter().map(|l| l.1).sum();
    let ave = latencies.iter().map(|l| l.0 * l.1).sum::<f64>() / total;
    let max = latencies.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
    let mut samples = latencies.to_vec();
    SimReport {
        ave_lat: ave,
        max_lat: max,
        p999_lat: weighted_percentile(&mut samples, 99.9),
        p99_lat: weighted_percentile(&mut samples, 99.0),
        p90_lat: weighted_percentile(&mut samples, 90.0),
        ave_pod,
        max_pod,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig {
            pod_capacity: 10.0,
            target_utilization: 0.5,
            pod_startup_delay: 60,
            scale_interval: 60,
            min_pods: 1,
            max_pods: 50,
            base_latency: 0.05,
            tick: 1,
        }
    }

    fn trace_of(rates: &[f64]) -> TimeSeriesTrace {
        TimeSeriesTrace::from_values(
            0,
            1,
            Tensor::new(rates.len(), 1, rates.to_vec()),
            vec!["qps".into()],
        )
        .unwrap()
    }

    #[test]
    fn predictive_formula() {
        let c = cfg();
        assert_eq!(policy_predictive(&[100.0, 50.0], &c), 20);
        assert_eq!(policy_predictive(&[0.0, 0.0], &c), c.min_pods);
        // above max_pods × capacity
        assert_eq!(policy_predictive(&[1e9], &c), c.max_pods);
    }

    #[test]
    fn naive_formula() {
        let c = cfg();
        // observed = target → unchanged
        assert_eq!(policy_naive(0.5, 10, &c), 10);
        // observed = 2×target → doubles
        assert_eq!(policy_naive(1.0, 10, &c), 20);
        assert_eq!(policy_naive(0.0, 10, &c), c.min_pods);
    }

    #[test]
    fn nearest_rank_percentile_anchor() {
        let mut samples: Vec<(f64, f64)> = (1..=100).map(|i| (i as f64, 1.0)).collect();
        assert_eq!(weighted_percentile(&mut samples, 90.0), 90.0);
        assert_eq!(weighted_percentile(&mut samples, 100.0), 100.0);
        assert_eq!(weighted_percentile(&mut samples, 99.0), 99.0);
    }

    #[test]
    fn constant_covered_load_base_latency_only() {
        let c = SimConfig { min_pods: 4, ..cfg() };
        // 4 pods × 10 rps × 0.5 target; load 15 rps is fully covered
        let trace = trace_of(&vec![15.0; 300]);
        let (report, log) = simulate(Policy::Ideal, &trace, &c, None).unwrap();
        assert!((report.max_lat - c.base_latency).abs() < 1e-12);
        assert!((report.ave_lat - c.base_latency).abs() < 1e-12);
        assert!((report.ave_pod - report.max_pod as f64).abs() < 1e-9);
        for t in &log {
            assert!(t.backlog < 1e-9);
        }
    }

    #[test]
    fn step_burst_naive_queues_through_startup() {
        let c = cfg();
        // quiet, then a step to 100 rps; naive reacts one interval late and
        // then waits out the startup delay
        let mut rates = vec![4.0; 120];
        rates.extend(vec![100.0; 240]);
        let trace = trace_of(&rates);
        let (report, log) = simulate(Policy::Naive, &trace, &c, None).unwrap();
        let backlog_ticks = log.iter().filter(|t| t.backlog > 1e-9).count();
        assert!(backlog_ticks >= 60, "backlog ticks {backlog_ticks}");
        assert!(report.max_lat >= c.base_latency + 60.0, "max lat {}", report.max_lat);
    }

    #[test]
    fn conservation_every_tick() {
        let c = cfg();
        let rates: Vec<f64> = (0..400).map(|i| 30.0 + 25.0 * ((i as f64) * 0.05).sin()).collect();
        let trace = trace_of(&rates);
        for policy in [Policy::Naive, Policy::Ideal] {
            let (_, log) = simulate(policy, &trace, &c, None).unwrap();
            let mut arrived = 0.0;
            let mut served = 0.0;
            for t in &log {
                arrived += t.arrival_rate * c.tick as f64;
                served += t.served;
                assert!(
                    (arrived - served - t.backlog).abs() < 1e-6,
                    "conservation violated at tick {}",
                    t.tick
                );
            }
        }
    }

    #[test]
    fn determinism() {
        let c = cfg();
        let rates: Vec<f64> = (0..300).map(|i| 20.0 + (i % 70) as f64).collect();
        let trace = trace_of(&rates);
        let a = simulate(Policy::Naive, &trace, &c, None).unwrap();
        let b = simulate(Policy::Naive, &trace, &c, None).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn added_capacity_never_hurts() {
        let c = cfg();
        let mut rates = vec![5.0; 100];
        rates.extend(vec![120.0; 200]);
        rates.extend(vec![10.0; 100]);
        let trace = trace_of(&rates);
        let (lo, _) = simulate(Policy::Naive, &trace, &c, None).unwrap();
        let bigger = SimConfig { pod_capacity: c.pod_capacity * 2.0, ..c.clone() };
        let (hi, _) = simulate(Policy::Naive, &trace, &bigger, None).unwrap();
        assert!(hi.max_lat <= lo.max_lat + 1e-9);
        assert!(hi.p999_lat <= lo.p999_lat + 1e-9);
        assert!(hi.p99_lat <= lo.p99_lat + 1e-9);
        assert!(hi.p90_lat <= lo.p90_lat + 1e-9);
    }

    #[test]
    fn ideal_never_queues_on_ramp() {
        let c = cfg();
        let rates: Vec<f64> = (0..360).map(|i| 5.0 + i as f64 * 0.5).collect();
        let trace = trace_of(&rates);
        let (_, log) = simulate(Policy::Ideal, &trace, &c, None).unwrap();
        for t in &log {
            assert!(t.backlog < 1e-9, "ideal queued at tick {}", t.tick);
        }
    }

    #[test]
    fn perfect_zero_delay_predictive_equals_ideal() {
        let c = SimConfig { pod_startup_delay: 0, ..cfg() };
        let rates: Vec<f64> = (0..600)
            .map(|i| if (i / 120) % 2 == 0 { 10.0 } else { 150.0 })
            .collect();
        let trace = trace_of(&rates);
        let (ideal, ilog) = simulate(Policy::Ideal, &trace, &c, None).unwrap();
        let mut pf = PerfectForecast { rates: rates.clone() };
        let (pred, plog) = simulate(Policy::Predictive, &trace, &c, Some(&mut pf)).unwrap();
        assert_eq!(ideal, pred);
        for (a, b) in ilog.iter().zip(&plog) {
            assert_eq!(a.ready_pods, b.ready_pods);
            assert_eq!(a.backlog, b.backlog);
        }
    }

    #[test]
    fn bursty_ordering_ideal_predictive_naive() {
        let c = cfg();
        let rates: Vec<f64> = (0..900)
            .map(|i| if (i / 180) % 2 == 0 { 8.0 } else { 160.0 })
            .collect();
        let trace = trace_of(&rates);
        let (ideal, _) = simulate(Policy::Ideal, &trace, &c, None).unwrap();
        let mut pf = PerfectForecast { rates: rates.clone() };
        let (pred, _) = simulate(Policy::Predictive, &trace, &c, Some(&mut pf)).unwrap();
        let (naive, _) = simulate(Policy::Naive, &trace, &c, None).unwrap();
        assert!(ideal.max_lat <= pred.max_lat + 1e-9);
        assert!(pred.max_lat <= naive.max_lat + 1e-9);
    }

    #[test]
    fn negative_rate_rejected() {
        let c = cfg();
        let trace = trace_of(&[5.0, -1.0, 5.0]);
        assert!(matches!(
            simulate(Policy::Naive, &trace, &c, None),
            Err(Error::MalformedValue { .. })
        ));
    }

    #[test]
    fn predictive_without_provider_rejected() {
        let c = cfg();
        let trace = trace_of(&[5.0; 100]);
        assert!(matches!(
            simulate(Policy::Predictive, &trace, &c, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { pod_capacity: 0.0, ..cfg() }.validate().is_err());
        assert!(SimConfig { target_utilization: 1.5, ..cfg() }.validate().is_err());
        assert!(SimConfig { min_pods: 9, max_pods: 3, ..cfg() }.validate().is_err());
        assert!(SimConfig { scale_interval: 90, tick: 60, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
