//! The scalar Activity signal and the two quantities learned from it during
//! training: the pulse template and the gap-noise level.

use thiserror::Error;

use crate::influx::{InfluxMap, SamplePointSet};
use crate::optflow::{DenseFlowField, SparseFlow};

/// Scale from MAD to the standard deviation of a Gaussian.
pub const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Error, PartialEq)]
pub enum ActivityError {
    #[error("flow has {flow} points, sample set has {set}")]
    PointMismatch { flow: usize, set: usize },
    #[error("series too short: {0} samples")]
    TooShort(usize),
    #[error("found {found} salient maxima, need at least 3; train on a longer sequence with more vehicles")]
    TooFewMaxima { found: usize },
    #[error("every template window runs past the series boundary")]
    AllWindowsDiscarded,
    #[error("no samples remain after excluding pulses; extend training")]
    NoNoiseSamples,
    #[error("noise estimate is zero (constant gap signal); extend training")]
    DegenerateNoise,
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("timestamps must strictly increase ({prev} then {next})")]
    NonMonotonic { prev: f64, next: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivitySample {
    pub index: u64,
    pub timestamp: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivitySeries {
    pub samples: Vec<ActivitySample>,
    /// Nominal samples per second.
    pub rate: f64,
}

impl ActivitySeries {
    pub fn new(rate: f64) -> Self {
        ActivitySeries {
            samples: Vec::new(),
            rate,
        }
    }

    pub fn from_values(values: &[f64], rate: f64) -> Self {
        let samples = values
            .iter()
            .enumerate()
            .map(|(i, &v)| ActivitySample {
                index: i as u64,
                timestamp: i as f64 / rate,
                value: v,
            })
            .collect();
        ActivitySeries { samples, rate }
    }

    pub fn push(&mut self, index: u64, timestamp: f64, value: f64) -> Result<(), ActivityError> {
        if let Some(last) = self.samples.last() {
            if timestamp <= last.timestamp {
                return Err(ActivityError::NonMonotonic {
                    prev: last.timestamp,
                    next: timestamp,
                });
            }
        }
        self.samples.push(ActivitySample {
            index,
            timestamp,
            value,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }
}

/// Canonical Activity waveform of one approaching vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTemplate {
    values: Vec<f64>,
    rate: f64,
    energy: f64,
    peak_offset: usize,
}

impl PulseTemplate {
    /// Validates `N >= 2`, positive energy, and that the peak sits in the
    /// second half of the window.
    pub fn new(values: Vec<f64>, rate: f64) -> Result<Self, ActivityError> {
        if values.len() < 2 {
            return Err(ActivityError::InvalidTemplate(format!("length {} < 2", values.len())));
        }
        if !(rate > 0.0) {
            return Err(ActivityError::InvalidTemplate(format!("rate {rate}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ActivityError::InvalidTemplate("non-finite value".into()));
        }
        let energy = energy(&values);
        if !(energy > 0.0) {
            return Err(ActivityError::InvalidTemplate("zero energy".into()));
        }
        let peak_offset = argmax(&values);
        let n = values.len();
        if peak_offset < n.div_ceil(2) {
            return Err(ActivityError::InvalidTemplate(format!(
                "peak at {peak_offset} of {n}; most of the window must precede the peak"
            )));
        }
        Ok(PulseTemplate {
            values,
            rate,
            energy,
            peak_offset,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Cached `sum s_n^2`.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn peak_offset(&self) -> usize {
        self.peak_offset
    }

    /// Same shape, amplitude multiplied by `k > 0`.
    pub fn scaled(&self, k: f64) -> Result<Self, ActivityError> {
        PulseTemplate::new(self.values.iter().map(|v| v * k).collect(), self.rate)
    }
}

fn energy(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NoiseMethod {
    RobustMad,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub method: NoiseMethod,
    pub sample_count: usize,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self, ActivityError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ActivityError::DegenerateNoise);
        }
        Ok(NoiseModel {
            sigma,
            method: NoiseMethod::RobustMad,
            sample_count: 0,
        })
    }
}

/// `A_n = sum over valid points of (w m)(p) . u(p)`.
pub fn compute_activity(flow: &SparseFlow, points: &SamplePointSet) -> Result<f64, ActivityError> {
    if flow.points.len() != points.points.len() || flow.points != points.points {
        return Err(ActivityError::PointMismatch {
            flow: flow.points.len(),
            set: points.points.len(),
        });
    }
    Ok(flow
        .vectors
        .iter()
        .zip(&flow.valid)
        .zip(&points.projections)
        .filter(|((_, ok), _)| **ok)
        .map(|((u, _), m)| m.dot(*u))
        .sum())
}

/// Dense form of the projection over every valid cell of the map grid.
pub fn compute_activity_dense(flow: &DenseFlowField, map: &InfluxMap) -> Result<f64, ActivityError> {
    if flow.geometry != map.geometry {
        return Err(ActivityError::PointMismatch {
            flow: flow.vectors.len(),
            set: map.vectors.len(),
        });
    }
    let g = map.geometry;
    let mut sum = 0.0;
    for row in 0..g.rows {
        for col in 0..g.cols {
            let i = row * g.cols + col;
            if flow.valid[i] {
                sum += map.projection(col, row).dot(flow.vectors[i]);
            }
        }
    }
    Ok(sum)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median absolute deviation about the median.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

/// Centered running median over `2 * half + 1` samples (truncated at ends).
fn running_median(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    let mut window: Vec<f64> = Vec::with_capacity(2 * half + 2);
    let insert = |w: &mut Vec<f64>, v: f64| {
        let pos = w.partition_point(|x| x.total_cmp(&v).is_lt());
        w.insert(pos, v);
    };
    let remove = |w: &mut Vec<f64>, v: f64| {
        let pos = w.partition_point(|x| x.total_cmp(&v).is_lt());
        w.remove(pos);
    };
    let (mut lo, mut hi) = (0usize, 0usize); // window covers [lo, hi)
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let want_lo = i.saturating_sub(half);
        let want_hi = (i + half + 1).min(n);
        while hi < want_hi {
            insert(&mut window, values[hi]);
            hi += 1;
        }
        while lo < want_lo {
            remove(&mut window, values[lo]);
            lo += 1;
        }
        let k = window.len();
        out.push(if k % 2 == 1 {
            window[k / 2]
        } else {
            0.5 * (window[k / 2 - 1] + window[k / 2])
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SalienceParams {
    /// Robust standard deviations above the running-median baseline.
    pub k_sal: f64,
    /// Maxima closer than this (seconds) keep only the largest.
    pub min_separation: f64,
    /// Span of the running-median baseline, seconds.
    pub baseline_window: f64,
}

impl Default for SalienceParams {
    fn default() -> Self {
        SalienceParams {
            k_sal: 6.0,
            min_separation: 8.0,
            baseline_window: 60.0,
        }
    }
}

/// Indices of salient local maxima, in increasing order.
pub fn find_salient_maxima(series: &ActivitySeries, params: &SalienceParams) -> Result<Vec<usize>, ActivityError> {
    let n = series.len();
    if n < 3 {
        return Err(ActivityError::TooShort(n));
    }
    let values = series.values();
    let robust_std = MAD_TO_SIGMA * mad(&values);
    let half = ((params.baseline_window / 2.0) * series.rate).round().max(0.0) as usize;
    let baseline = running_median(&values, half);

    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| {
            let a = values[i];
            a >= values[i - 1] && a >= values[i + 1] && a > baseline[i] + params.k_sal * robust_std
        })
        .collect();
    candidates.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        let t = series.samples[c].timestamp;
        if kept
            .iter()
            .all(|&k| (series.samples[k].timestamp - t).abs() >= params.min_separation)
        {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemplateParams {
    /// Window length in samples.
    pub len: usize,
    /// Fraction of the window that precedes (and includes) the maximum.
    pub peak_fraction: f64,
}

/// Element-wise median of the windows around each maximum, negative
/// entries floored at zero.
pub fn extract_template(series: &ActivitySeries, maxima: &[usize], params: &TemplateParams) -> Result<PulseTemplate, ActivityError> {
    if params.len < 2 {
        return Err(ActivityError::InvalidParams(format!("template length {} < 2", params.len)));
    }
    if !(params.peak_fraction > 0.5 && params.peak_fraction < 1.0) {
        return Err(ActivityError::InvalidParams(format!(
            "peak_fraction {} outside (0.5, 1)",
            params.peak_fraction
        )));
    }
    if maxima.len() < 3 {
        return Err(ActivityError::TooFewMaxima { found: maxima.len() });
    }
    let n = series.len() as i64;
    let len = params.len as i64;
    let pre = (params.peak_fraction * params.len as f64).round() as i64;
    let windows: Vec<&[ActivitySample]> = maxima
        .iter()
        .filter_map(|&i| {
            let start = i as i64 - pre + 1;
            let end = start + len;
            (start >= 0 && end <= n).then(|| &series.samples[start as usize..end as usize])
        })
        .collect();
    if windows.is_empty() {
        return Err(ActivityError::AllWindowsDiscarded);
    }
    let mut column = Vec::with_capacity(windows.len());
    let values = (0..params.len)
        .map(|k| {
            column.clear();
            column.extend(windows.iter().map(|w| w[k].value));
            median(&column).max(0.0)
        })
        .collect();
    PulseTemplate::new(values, series.rate)
}

/// Robust gap-noise level: `1.4826 * MAD` of the samples farther than
/// `guard` seconds from every maximum.
pub fn estimate_noise(series: &ActivitySeries, maxima: &[usize], guard: f64) -> Result<NoiseModel, ActivityError> {
    let peaks: Vec<f64> = maxima.iter().map(|&i| series.samples[i].timestamp).collect();
    let rest: Vec<f64> = series
        .samples
        .iter()
        .filter(|s| peaks.iter().all(|&t| (s.timestamp - t).abs() > guard))
        .map(|s| s.value)
        .collect();
    if rest.is_empty() {
        return Err(ActivityError::NoNoiseSamples);
    }
    let sigma = MAD_TO_SIGMA * mad(&rest);
    if !(sigma > 0.0) {
        return Err(ActivityError::DegenerateNoise);
    }
    Ok(NoiseModel {
        sigma,
        method: NoiseMethod::RobustMad,
        sample_count: rest.len(),
    })
}

/// Incremental linear-interpolation resampler onto the grid
/// `t0 + k / rate`, where `t0` is the first input timestamp.
#[derive(Debug, Clone)]
pub struct OnlineResampler {
    rate: f64,
    t0: f64,
    next_k: u64,
    last: Option<(f64, f64)>,
}

const GRID_TOL: f64 = 1e-9;

impl OnlineResampler {
    pub fn new(rate: f64) -> Self {
        assert!(rate > 0.0, "resampling rate must be > 0");
        OnlineResampler {
            rate,
            t0: 0.0,
            next_k: 0,
            last: None,
        }
    }

    #[inline]
    fn grid(&self, k: u64) -> f64 {
        self.t0 + k as f64 / self.rate
    }

    /// Feeds one sample; returns the grid points `(k, t_k, value)` that are
    /// now determined.
    pub fn push(&mut self, t: f64, v: f64) -> Vec<(u64, f64, f64)> {
        let mut out = Vec::new();
        match self.last {
            None => {
                self.t0 = t;
                out.push((0, t, v));
                self.next_k = 1;
            }
            Some((ta, va)) => {
                loop {
                    let tk = self.grid(self.next_k);
                    if tk > t + GRID_TOL {
                        break;
                    }
                    let value = if tk >= t {
                        v
                    } else {
                        va + (v - va) * (tk - ta) / (t - ta)
                    };
                    out.push((self.next_k, tk, value));
                    self.next_k += 1;
                }
            }
        }
        self.last = Some((t, v));
        out
    }
}

pub trait Resample: Sized {
    fn resample(&self, target_rate: f64) -> Result<Self, ActivityError>;
}

impl Resample for ActivitySeries {
    fn resample(&self, target_rate: f64) -> Result<Self, ActivityError> {
        if !(target_rate > 0.0 && target_rate.is_finite()) {
            return Err(ActivityError::InvalidParams(format!("target rate {target_rate}")));
        }
        if self.len() < 2 {
            return Err(ActivityError::TooShort(self.len()));
        }
        let mut rs = OnlineResampler::new(target_rate);
        let mut out = ActivitySeries::new(target_rate);
        for s in &self.samples {
            for (k, t, v) in rs.push(s.timestamp, s.value) {
                out.samples.push(ActivitySample {
                    index: k,
                    timestamp: t,
                    value: v,
                });
            }
        }
        Ok(out)
    }
}

impl Resample for PulseTemplate {
    fn resample(&self, target_rate: f64) -> Result<Self, ActivityError> {
        let series = ActivitySeries::from_values(&self.values, self.rate).resample(target_rate)?;
        PulseTemplate::new(series.values(), target_rate)
    }
}
