//! Seedable simulation of an m-station tandem of single-server FIFO queues
//! with infinite buffers.
//!
//! Customers are pushed through the stations in arrival order. Because every
//! station is FIFO with one server, a customer's departure epoch at station
//! `j` is `max(arrival_j, previous departure_j) + service`; per station, the
//! arrival and departure epochs are each nondecreasing, so occupancy events
//! are processed by merging the two streams (departures first on ties) with
//! a per-station queue of pending departures. Occupancy is a time average over
//! the post-warmup window `[T0, T_end]`, where `T0` is the external arrival
//! epoch of the first post-warmup customer and `T_end` the last external
//! arrival epoch.

mod ci;

pub use ci::{replicate_ci, replicate_ci_with_seeds, CiRow, CiTable};

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phdist::{PhaseSampler, PhaseType};
use crate::rng::stream;

/// Default fraction of arrivals discarded before statistics are collected.
pub const DEFAULT_WARMUP: f64 = 0.1;
/// Smallest accepted run length.
pub const MIN_ARRIVALS: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("arrival mean {0} must be 1")]
    ArrivalMean(f64),
    #[error("station {station}: service mean {mean} gives utilization >= 1")]
    Unstable { station: usize, mean: f64 },
    #[error("tandem needs at least one station")]
    NoStations,
    #[error("warmup fraction {0} outside [0, 1)")]
    Warmup(f64),
    #[error("n_arrivals {0} below the minimum {MIN_ARRIVALS}")]
    TooFewArrivals(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TandemSpec {
    pub arrival: PhaseType,
    pub services: Vec<PhaseType>,
}

impl TandemSpec {
    pub fn new(arrival: PhaseType, services: Vec<PhaseType>) -> Result<Self, SimError> {
        let spec = TandemSpec { arrival, services };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let am = self.arrival.mean();
        if (am - 1.0).abs() > 1e-9 {
            return Err(SimError::ArrivalMean(am));
        }
        if self.services.is_empty() {
            return Err(SimError::NoStations);
        }
        for (j, s) in self.services.iter().enumerate() {
            let mean = s.mean();
            if !(mean < am) {
                return Err(SimError::Unstable { station: j + 1, mean });
            }
        }
        Ok(())
    }

    pub fn stations(&self) -> usize {
        self.services.len()
    }

    /// Per-station utilization; the arrival rate is 1 everywhere.
    pub fn utilizations(&self) -> Vec<f64> {
        self.services.iter().map(PhaseType::mean).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStats {
    /// Post-warmup inter-departure times.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub departures: Vec<f64>,
    /// Sidecar file holding `departures` as little-endian f64 when spilled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub departures_file: Option<String>,
    /// Time spent at each occupancy level inside the window.
    pub pmf_counts: Vec<f64>,
    /// Window time with at least one customer present.
    pub busy_time: f64,
    pub window_arrivals: u64,
    pub window_departures: u64,
    pub occupancy_at_start: u64,
    pub occupancy_at_end: u64,
    /// Post-warmup customers and the sums of their waits and sojourns.
    pub customers: u64,
    pub wait_sum: f64,
    pub sojourn_sum: f64,
}

impl StationStats {
    pub fn mean_occupancy(&self) -> f64 {
        let total: f64 = self.pmf_counts.iter().sum();
        self.pmf_counts.iter().enumerate().map(|(l, c)| l as f64 * c).sum::<f64>() / total
    }

    pub fn mean_wait(&self) -> f64 {
        self.wait_sum / self.customers as f64
    }

    pub fn mean_sojourn(&self) -> f64 {
        self.sojourn_sum / self.customers as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub stations: Vec<StationStats>,
    pub arrivals_seen: u64,
    pub warmup_fraction: f64,
    /// Length of the observation window.
    pub sim_time: f64,
    pub window_start: f64,
    pub seed: u64,
}

struct StationState {
    sampler: PhaseSampler,
    rng: crate::rng::RngStream,
    last_departure: f64,
    pending: VecDeque<f64>,
    count: u64,
    clock: f64,
    started: bool,
    ended: bool,
    stats: StationStats,
}

impl StationState {
    /// Accumulates occupancy time up to `t`, clipped to the window.
    #[inline]
    fn advance(&mut self, t: f64, t0: f64, t_end: f64) {
        if !self.started && t >= t0 {
            self.stats.occupancy_at_start = self.count;
            self.started = true;
        }
        if !self.ended && t > t_end {
            self.stats.occupancy_at_end = self.count;
            self.ended = true;
        }
        let lo = self.clock.max(t0);
        let hi = t.min(t_end);
        if hi > lo {
            let c = self.count as usize;
            if c >= self.stats.pmf_counts.len() {
                self.stats.pmf_counts.resize(c + 1, 0.0);
            }
            self.stats.pmf_counts[c] += hi - lo;
        }
        self.clock = t;
    }

    #[inline]
    fn depart_until(&mut self, t: f64, t0: f64, t_end: f64) {
        while let Some(&d) = self.pending.front() {
            if d > t {
                break;
            }
            self.pending.pop_front();
            self.advance(d, t0, t_end);
            self.count -= 1;
            if d >= t0 && d <= t_end {
                self.stats.window_departures += 1;
            }
        }
    }
}

/// Runs the tandem for `n_arrivals` external arrivals.
pub fn simulate_tandem(spec: &TandemSpec, n_arrivals: u64, warmup_fraction: f64, seed: u64) -> Result<SimResult, SimError> {
    spec.validate()?;
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(SimError::Warmup(warmup_fraction));
    }
    if n_arrivals < MIN_ARRIVALS {
        return Err(SimError::TooFewArrivals(n_arrivals));
    }
    let n = n_arrivals as usize;
    let warm = (warmup_fraction * n as f64).floor() as usize;

    // External arrival epochs are generated up front so the window is known.
    let arrival_sampler = PhaseSampler::new(&spec.arrival);
    let mut arrival_rng = stream(seed, 0);
    let mut epochs = Vec::with_capacity(n);
    let mut t = 0.0;
    for _ in 0..n {
        t += arrival_sampler.sample(&mut arrival_rng);
        epochs.push(t);
    }
    let t0 = if warm == 0 { 0.0 } else { epochs[warm] };
    let t_end = epochs[n - 1];

    let mut stations: Vec<StationState> = spec
        .services
        .iter()
        .enumerate()
        .map(|(j, s)| StationState {
            sampler: PhaseSampler::new(s),
            rng: stream(seed, j as u64 + 1),
            last_departure: 0.0,
            pending: VecDeque::new(),
            count: 0,
            clock: 0.0,
            started: false,
            ended: false,
            stats: StationStats {
                departures: Vec::with_capacity(n - warm),
                departures_file: None,
                pmf_counts: vec![0.0; 16],
                busy_time: 0.0,
                window_arrivals: 0,
                window_departures: 0,
                occupancy_at_start: 0,
                occupancy_at_end: 0,
                customers: 0,
                wait_sum: 0.0,
                sojourn_sum: 0.0,
            },
        })
        .collect();

    for (i, &epoch) in epochs.iter().enumerate() {
        let mut x = epoch;
        for st in stations.iter_mut() {
            st.depart_until(x, t0, t_end);
            st.advance(x, t0, t_end);
            st.count += 1;
            if x >= t0 && x <= t_end {
                st.stats.window_arrivals += 1;
            }
            let service = st.sampler.sample(&mut st.rng);
            let start = x.max(st.last_departure);
            let dep = start + service;
            if i >= warm {
                // built from the service time so tiny gaps survive large clocks
                if i > warm {
                    st.stats.departures.push((x - st.last_departure).max(0.0) + service);
                }
                let wait = start - x;
                st.stats.customers += 1;
                st.stats.wait_sum += wait;
                st.stats.sojourn_sum += wait + service;
            }
            st.last_departure = dep;
            st.pending.push_back(dep);
            x = dep;
        }
    }

    let mut out = Vec::with_capacity(stations.len());
    for mut st in stations {
        st.depart_until(t_end, t0, t_end);
        st.advance(f64::INFINITY, t0, t_end);
        while st.stats.pmf_counts.len() > 1 && st.stats.pmf_counts.last() == Some(&0.0) {
            st.stats.pmf_counts.pop();
        }
        let idle = st.stats.pmf_counts.first().copied().unwrap_or(0.0);
        st.stats.busy_time = (t_end - t0) - idle;
        out.push(st.stats);
    }

    Ok(SimResult {
        stations: out,
        arrivals_seen: n_arrivals,
        warmup_fraction,
        sim_time: t_end - t0,
        window_start: t0,
        seed,
    })
}

/// Simulates many specs in parallel; results are in input order and do not
/// depend on the worker count.
pub fn simulate_batch(
    jobs: &[(TandemSpec, u64)],
    n_arrivals: u64,
    warmup_fraction: f64,
) -> Vec<Result<SimResult, SimError>> {
    jobs.par_iter()
        .map(|(spec, seed)| simulate_tandem(spec, n_arrivals, warmup_fraction, *seed))
        .collect()
}
