//! Matched-filter detection of approaching-vehicle pulses with a
//! Neyman–Pearson threshold, plus the TRAFFIC/GAP output state machine.
//!
//! Under the gap hypothesis the windowed Activity is white Gaussian noise
//! with standard deviation `sigma`; under the traffic hypothesis it is the
//! pulse template plus that noise. The correlator `y = sum A_n s_n` is then
//! Gaussian with variance `sigma^2 * E`, `E = sum s_n^2`, which gives
//!
//! * threshold `gamma = Qinv(p_fa) * sigma * sqrt(E)`
//! * detection probability `P_D = Q(Qinv(p_fa) - sqrt(E) / sigma)`.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;

use thiserror::Error;

use crate::activity::{NoiseModel, PulseTemplate};

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate detector inputs: {0}")]
    Degenerate(String),
    #[error("window has {window} samples, template has {template}")]
    LengthMismatch { window: usize, template: usize },
}

/// `erfc(z)` for `z >= 0`.
fn erfc_nonneg(z: f64) -> f64 {
    debug_assert!(z >= 0.0);
    if z < 3.0 {
        // erf(z) = 2/sqrt(pi) exp(-z^2) sum_n 2^n z^(2n+1) / (2n+1)!!
        let z2 = z * z;
        let mut term = z;
        let mut sum = z;
        let mut n = 0.0;
        while term > sum * 1e-17 {
            n += 1.0;
            term *= 2.0 * z2 / (2.0 * n + 1.0);
            sum += term;
        }
        1.0 - 2.0 / PI.sqrt() * (-z2).exp() * sum
    } else {
        // erfc(z) = exp(-z^2)/sqrt(pi) * 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
        // evaluated with the modified Lentz method.
        let tiny = 1e-300;
        let mut f = z;
        let mut c = z;
        let mut d = 0.0;
        for k in 1..200 {
            let a = k as f64 / 2.0;
            d = z + a * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = z + a / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-z * z).exp() / (PI.sqrt() * f)
    }
}

/// Standard normal tail probability `Q(x) = P(Z > x)`.
pub fn q_func(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x >= 0.0 {
        0.5 * erfc_nonneg(x * FRAC_1_SQRT_2)
    } else {
        1.0 - 0.5 * erfc_nonneg(-x * FRAC_1_SQRT_2)
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Inverse tail probability: the `x` with `Q(x) = p`.
pub fn q_inv(p: f64) -> Result<f64, DetectorError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DetectorError::ProbabilityOutOfRange(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // rational starting point, |error| < 4.5e-4
    let tail = p.min(1.0 - p);
    let t = (-2.0 * tail.ln()).sqrt();
    let mut x = t - (2.515517 + 0.802853 * t + 0.010328 * t * t) / (1.0 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t * t * t);
    if p > 0.5 {
        x = -x;
    }
    for _ in 0..50 {
        let step = (q_func(x) - p) / normal_pdf(x);
        if !step.is_finite() {
            break;
        }
        x += step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Indication {
    #[serde(rename = "TRAFFIC")]
    Traffic,
    #[serde(rename = "GAP")]
    Gap,
}

impl fmt::Display for Indication {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Indication::Traffic => "TRAFFIC",
            Indication::Gap => "GAP",
        })
    }
}

impl std::str::FromStr for Indication {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TRAFFIC" => Ok(Indication::Traffic),
            "GAP" => Ok(Indication::Gap),
            other => Err(format!("unknown state '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    /// False-alarm probability per window, in (0, 0.5).
    pub p_fa: f64,
    /// Evaluations per second.
    pub rate: f64,
    /// Release level as a fraction of gamma, in (0, 1].
    pub release_ratio: f64,
    /// Seconds the correlator must stay below the release level.
    pub hold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            p_fa: 1e-3,
            rate: 30.0,
            release_ratio: 0.7,
            hold: 1.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.p_fa > 0.0 && self.p_fa < 0.5) {
            return Err(DetectorError::InvalidConfig(format!("p_fa {} outside (0, 0.5)", self.p_fa)));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(DetectorError::InvalidConfig(format!("rate {}", self.rate)));
        }
        if !(self.release_ratio > 0.0 && self.release_ratio <= 1.0) {
            return Err(DetectorError::InvalidConfig(format!("release ratio {}", self.release_ratio)));
        }
        if !(self.hold >= 0.0 && self.hold.is_finite()) {
            return Err(DetectorError::InvalidConfig(format!("hold {}", self.hold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSpec {
    pub gamma: f64,
    pub sigma: f64,
    pub energy: f64,
    pub p_fa: f64,
    /// `ln(lambda) = (2 gamma - E) / (2 sigma^2)`; informational only.
    pub ln_lambda: f64,
}

impl ThresholdSpec {
    pub fn lambda(&self) -> f64 {
        self.ln_lambda.exp()
    }
}

fn check_inputs(sigma: f64, energy: f64) -> Result<(), DetectorError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DetectorError::Degenerate(format!("sigma {sigma}")));
    }
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(DetectorError::Degenerate(format!("template energy {energy}")));
    }
    Ok(())
}

/// Threshold from the raw quantities. `p_fa` may be anywhere in (0, 1).
pub fn threshold_for(p_fa: f64, sigma: f64, energy: f64) -> Result<ThresholdSpec, DetectorError> {
    check_inputs(sigma, energy)?;
    let gamma = q_inv(p_fa)? * sigma * energy.sqrt();
    Ok(ThresholdSpec {
        gamma,
        sigma,
        energy,
        p_fa,
        ln_lambda: (2.0 * gamma - energy) / (2.0 * sigma * sigma),
    })
}

/// Neyman–Pearson threshold for the configured false-alarm probability.
pub fn np_threshold(cfg: &DetectorConfig, noise: &NoiseModel, template: &PulseTemplate) -> Result<ThresholdSpec, DetectorError> {
    cfg.validate()?;
    threshold_for(cfg.p_fa, noise.sigma, template.energy())
}

/// `sum_n A_n s_n` over equal-length slices.
pub fn correlate(window: &[f64], template: &[f64]) -> Result<f64, DetectorError> {
    if window.len() != template.len() {
        return Err(DetectorError::LengthMismatch {
            window: window.len(),
            template: template.len(),
        });
    }
    Ok(window.iter().zip(template).map(|(a, s)| a * s).sum())
}

/// Closed-form detection probability for energy `E` and noise `sigma`.
/// `energy = 0` degenerates to `p_fa`.
pub fn pd_for(p_fa: f64, sigma: f64, energy: f64) -> Result<f64, DetectorError> {
    if !(sigma > 0.0) || energy < 0.0 {
        return Err(DetectorError::Degenerate(format!("sigma {sigma}, energy {energy}")));
    }
    Ok(q_func(q_inv(p_fa)? - energy.sqrt() / sigma))
}

pub fn predicted_pd(cfg: &DetectorConfig, noise: &NoiseModel, template: &PulseTemplate) -> Result<f64, DetectorError> {
    cfg.validate()?;
    check_inputs(noise.sigma, template.energy())?;
    pd_for(cfg.p_fa, noise.sigma, template.energy())
}

/// Detector output after one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingState {
    pub state: Indication,
    /// Correlator output; `None` during warm-up.
    pub correlator: Option<f64>,
    /// `correlator - gamma`; `None` during warm-up.
    pub margin: Option<f64>,
    pub timestamp: f64,
}

/// Sliding-window matched filter with hysteresis.
///
/// Starts in TRAFFIC and stays there until a full window has been observed.
/// GAP -> TRAFFIC when `y > gamma`; TRAFFIC -> GAP only after `y` has stayed
/// below `release_ratio * gamma` for `hold` seconds.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    template: Vec<f64>,
    threshold: ThresholdSpec,
    window: VecDeque<f64>,
    state: Indication,
    below_since: Option<f64>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, template: &PulseTemplate, threshold: ThresholdSpec) -> Result<Self, DetectorError> {
        cfg.validate()?;
        if (template.rate() - cfg.rate).abs() > 1e-9 * cfg.rate {
            return Err(DetectorError::InvalidConfig(format!(
                "template rate {} differs from detector rate {}",
                template.rate(),
                cfg.rate
            )));
        }
        Ok(Detector {
            cfg,
            template: template.values().to_vec(),
            threshold,
            window: VecDeque::with_capacity(template.len()),
            state: Indication::Traffic,
            below_since: None,
        })
    }

    pub fn threshold(&self) -> &ThresholdSpec {
        &self.threshold
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn warmed_up(&self) -> bool {
        self.window.len() == self.template.len()
    }

    pub fn state(&self) -> Indication {
        self.state
    }

    /// Feeds one Activity sample taken at `timestamp` (detector rate).
    pub fn step(&mut self, timestamp: f64, activity: f64) -> CrossingState {
        if self.window.len() == self.template.len() {
            self.window.pop_front();
        }
        self.window.push_back(activity);
        if !self.warmed_up() {
            return CrossingState {
                state: Indication::Traffic,
                correlator: None,
                margin: None,
                timestamp,
            };
        }
        let (a, b) = self.window.as_slices();
        let y: f64 = a
            .iter()
            .chain(b)
            .zip(&self.template)
            .map(|(x, s)| x * s)
            .sum();
        let gamma = self.threshold.gamma;
        if y > gamma {
            self.state = Indication::Traffic;
            self.below_since = None;
        } else if self.state == Indication::Traffic {
            if y < self.cfg.release_ratio * gamma {
                let since = *self.below_since.get_or_insert(timestamp);
                if timestamp - since >= self.cfg.hold - 1e-9 {
                    self.state = Indication::Gap;
                    self.below_since = None;
                }
            } else {
                self.below_since = None;
            }
        }
        CrossingState {
            state: self.state,
            correlator: Some(y),
            margin: Some(y - gamma),
            timestamp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template(values: Vec<f64>, rate: f64) -> PulseTemplate {
        PulseTemplate::new(values, rate).unwrap()
    }

    #[test]
    fn q_basics() {
        assert_eq!(q_func(0.0), 0.5);
        for x in [0.3, 1.0, 2.7, 4.2, 7.5] {
            assert!((q_func(x) + q_func(-x) - 1.0).abs() < 1e-15);
        }
        assert!(q_func(40.0) >= 0.0 && q_func(40.0) < 1e-300);
        assert!(q_func(f64::NAN).is_nan());
    }

    #[test]
    fn q_inv_basics() {
        assert_eq!(q_inv(0.5).unwrap(), 0.0);
        assert!((q_inv(q_func(2.0)).unwrap() - 2.0).abs() < 1e-6);
        assert!(q_inv(0.0).is_err() && q_inv(1.0).is_err() && q_inv(-0.2).is_err());
        for p in [1e-12, 1e-6, 1e-3, 0.05, 0.3, 0.7, 0.999] {
            assert!((q_func(q_inv(p).unwrap()) - p).abs() <= 1e-7 * p.max(1e-9));
        }
    }

    #[test]
    fn threshold_examples() {
        let cfg = |p_fa| DetectorConfig {
            p_fa,
            ..DetectorConfig::default()
        };
        let unit = template(vec![0.0, 1.0], 30.0);
        let noise = NoiseModel::new(1.0).unwrap();
        assert!((np_threshold(&cfg(0.05), &noise, &unit).unwrap().gamma - 1.6448536).abs() < 1e-6);
        assert_eq!(threshold_for(0.5, 1.0, 1.0).unwrap().gamma, 0.0);

        let t2 = unit.scaled(2.0).unwrap();
        let g1 = np_threshold(&cfg(0.01), &noise, &unit).unwrap().gamma;
        let g2 = np_threshold(&cfg(0.01), &noise, &t2).unwrap().gamma;
        assert!((g2 - 2.0 * g1).abs() < 1e-12);

        assert!(np_threshold(&cfg(0.6), &noise, &unit).is_err());
        assert!(threshold_for(0.01, 0.0, 1.0).is_err());
        assert!(threshold_for(0.01, 1.0, 0.0).is_err());
    }

    #[test]
    fn lambda_is_consistent_with_gamma() {
        let th = threshold_for(0.01, 0.8, 3.0).unwrap();
        // gamma = (2 sigma^2 ln(lambda) + E) / 2
        let back = 0.5 * (2.0 * 0.8 * 0.8 * th.lambda().ln() + 3.0);
        assert!((back - th.gamma).abs() < 1e-12);
    }

    #[test]
    fn correlate_examples() {
        let s = [0.5, 1.0, 2.0, 0.25];
        let e: f64 = s.iter().map(|v| v * v).sum();
        assert_eq!(correlate(&s, &s).unwrap(), e);
        assert_eq!(correlate(&[0.0; 4], &s).unwrap(), 0.0);
        assert!(matches!(correlate(&[1.0; 3], &s), Err(DetectorError::LengthMismatch { .. })));
    }

    #[test]
    fn pd_examples() {
        assert!((pd_for(0.05, 1.0, 0.0).unwrap() - 0.05).abs() < 1e-12);
        // sqrt(E)/sigma = 3
        let pd = pd_for(0.05, 2.0, 36.0).unwrap();
        assert!((pd - 0.9125).abs() < 5e-4, "{pd}");
        assert!(pd_for(0.05, 0.0, 1.0).is_err());
    }

    #[test]
    fn warm_up_is_traffic_then_gap() {
        let t = template(vec![0.0, 1.0, 2.0, 3.0, 1.0], 10.0);
        let cfg = DetectorConfig {
            p_fa: 1e-3,
            rate: 10.0,
            release_ratio: 0.7,
            hold: 0.3,
        };
        let th = np_threshold(&cfg, &NoiseModel::new(0.1).unwrap(), &t).unwrap();
        let mut d = Detector::new(cfg, &t, th).unwrap();
        let mut states = Vec::new();
        for k in 0..20 {
            states.push(d.step(k as f64 / 10.0, 0.0));
        }
        assert!(states[..4].iter().all(|s| s.state == Indication::Traffic && s.correlator.is_none()));
        // release needs 0.3 s below the release level: samples 4..=7
        assert_eq!(states[6].state, Indication::Traffic);
        assert_eq!(states[7].state, Indication::Gap);
        let last = states.last().unwrap();
        assert_eq!(last.state, Indication::Gap);
        assert_eq!(last.margin, Some(-th.gamma));
    }

    #[test]
    fn template_replay_triggers_before_peak() {
        let vals: Vec<f64> = (0..30).map(|i| if i <= 24 { i as f64 / 24.0 } else { 0.5 }).collect();
        let t = template(vals.clone(), 30.0);
        let cfg = DetectorConfig {
            hold: 0.1,
            ..DetectorConfig::default()
        };
        let th = np_threshold(&cfg, &NoiseModel::new(0.01).unwrap(), &t).unwrap();
        let mut d = Detector::new(cfg, &t, th).unwrap();
        let mut k = 0;
        let mut time = || {
            k += 1;
            k as f64 / 30.0
        };
        for _ in 0..60 {
            d.step(time(), 0.0);
        }
        assert_eq!(d.state(), Indication::Gap);
        let mut onset = None;
        for (i, v) in vals.iter().enumerate() {
            if d.step(time(), *v).state == Indication::Traffic && onset.is_none() {
                onset = Some(i);
            }
        }
        assert!(onset.unwrap() <= t.peak_offset());
    }

    #[test]
    fn hysteresis_holds_traffic() {
        let t = template(vec![0.0, 1.0], 30.0);
        let cfg = DetectorConfig::default();
        let th = threshold_for(1e-3, 1.0, 1.0).unwrap();
        let mut d = Detector::new(cfg, &t, th).unwrap();
        // with template [0, 1] the correlator equals the latest sample
        for k in 0..300 {
            let y = if k % 2 == 0 { 1.01 } else { 0.9 } * th.gamma;
            assert_eq!(d.step(k as f64 / 30.0, y).state, Indication::Traffic);
        }
    }

    #[test]
    fn detector_rejects_rate_mismatch() {
        let t = template(vec![0.0, 1.0], 8.0);
        let th = threshold_for(1e-3, 1.0, 1.0).unwrap();
        assert!(Detector::new(DetectorConfig::default(), &t, th).is_err());
    }

    #[test]
    fn indication_text() {
        assert_eq!(Indication::Traffic.to_string(), "TRAFFIC");
        assert_eq!("GAP".parse::<Indication>().unwrap(), Indication::Gap);
        assert!("gap".parse::<Indication>().is_err());
    }
}
