//! Training and online detection over frame streams.

use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{
    compute_activity, estimate_noise, extract_template, find_salient_maxima, ActivityError, ActivitySample, ActivitySeries, OnlineResampler,
    PulseTemplate, Resample, SalienceParams, TemplateParams,
};
use crate::detector::{np_threshold, predicted_pd, CrossingState, Detector, DetectorConfig, DetectorError, Indication, ThresholdSpec};
use crate::frame_io::{Frame, FrameError, FrameStream};
use crate::influx::{locate_pfa, sample_points, InfluxAccumulator, InfluxError, SampleParams, SamplePointSet};
use crate::model::{ConfigEcho, Model, ModelError};
use crate::optflow::{build_pyramid, dense_flow_pyr, sparse_flow_pyr, FlowError, GridGeometry, LkParams, Pyramid};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Influx(#[from] InfluxError),
    #[error(transparent)]
    Activity(#[from] ActivityError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training input spans {seconds:.1} s, at least {required:.1} s required")]
    InsufficientTraining { seconds: f64, required: f64 },
    #[error("model/stream mismatch: {0}")]
    Mismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stride: usize,
    /// Dense flow is computed between frames this many indices apart.
    pub frame_skip: usize,
    pub lk: LkParams,
    /// Nullify outbound (upward) influx vectors.
    pub two_way: bool,
    /// Cells weaker than this fraction of the strongest are dropped.
    pub prune_fraction: f64,
    pub pfa_eps: f64,
    pub alpha: f64,
    /// Intensification radius as a fraction of the image diagonal.
    pub rho_fraction: f64,
    /// Sampling spread as a fraction of the image diagonal.
    pub sigma_s_fraction: f64,
    pub sample_count: usize,
    pub seed: u64,
    /// Detector rate the template is built at.
    pub rate: f64,
    /// Template length in detector samples.
    pub template_len: usize,
    pub peak_fraction: f64,
    pub salience: SalienceParams,
    /// Seconds around each maximum excluded from the noise estimate.
    pub noise_guard: f64,
    /// Minimum training span, seconds.
    pub min_duration: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stride: 8,
            frame_skip: 2,
            lk: LkParams::default(),
            two_way: false,
            prune_fraction: 0.05,
            pfa_eps: 0.05,
            alpha: 4.0,
            rho_fraction: 0.05,
            sigma_s_fraction: 0.2,
            sample_count: 2000,
            seed: 0,
            rate: 30.0,
            template_len: 150,
            peak_fraction: 0.8,
            salience: SalienceParams::default(),
            noise_guard: 10.0,
            min_duration: 600.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.stride == 0 || self.frame_skip == 0 {
            return bad("stride and frame_skip must be >= 1");
        }
        if !(self.rate > 0.0) || self.template_len < 2 {
            return bad("rate must be > 0 and template_len >= 2");
        }
        if !(self.rho_fraction > 0.0 && self.sigma_s_fraction > 0.0) {
            return bad("rho and sigma_s fractions must be > 0");
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return bad("prune_fraction must be in [0, 1)");
        }
        self.lk.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub frames: u64,
    pub duration: f64,
    pub pfa: [f64; 2],
    pub influx_support: usize,
    pub sample_points: usize,
    pub shortfall: bool,
    pub maxima: usize,
    pub template_len: usize,
    pub energy: f64,
    pub sigma: f64,
    /// `sqrt(E) / sigma`.
    pub snr: f64,
    /// Closed-form P_D at the default false-alarm probability.
    pub predicted_pd: f64,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "frames          {} ({:.1} s)", self.frames, self.duration)?;
        writeln!(f, "pfa             ({:.1}, {:.1})", self.pfa[0], self.pfa[1])?;
        writeln!(f, "influx support  {} cells", self.influx_support)?;
        writeln!(
            f,
            "sample points   {}{}",
            self.sample_points,
            if self.shortfall { " (shortfall)" } else { "" }
        )?;
        writeln!(f, "maxima          {}", self.maxima)?;
        writeln!(f, "template        {} samples, energy {:.6e}", self.template_len, self.energy)?;
        writeln!(f, "sigma           {:.6e}", self.sigma)?;
        write!(f, "predicted P_D   {:.4} (snr {:.2})", self.predicted_pd, self.snr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub summary: TrainSummary,
    /// Training activity at the detector rate.
    pub activity: ActivitySeries,
    pub maxima: Vec<usize>,
}

fn diagonal(width: usize, height: usize) -> f64 {
    (width as f64).hypot(height as f64)
}

/// Learns a model from a stream that can be opened twice.
///
/// Pass one accumulates dense flow into the influx map and derives the
/// sample points; pass two measures activity at those points to learn the
/// pulse template and noise level.
pub fn train<F>(mut open: F, cfg: &TrainConfig) -> Result<TrainOutput, PipelineError>
where
    F: FnMut() -> Result<FrameStream, FrameError>,
{
    cfg.validate()?;

    // pass 1: influx map
    let mut acc: Option<InfluxAccumulator> = None;
    let mut geometry: Option<GridGeometry> = None;
    let mut prev: Option<Pyramid> = None;
    let (mut first_ts, mut last_ts, mut count) = (None, 0.0, 0u64);
    for (pos, frame) in open()?.enumerate() {
        let frame = frame?;
        first_ts.get_or_insert(frame.timestamp);
        last_ts = frame.timestamp;
        count += 1;
        if pos % cfg.frame_skip != 0 {
            continue;
        }
        let g = match geometry {
            Some(g) => g,
            None => {
                let g = GridGeometry::new(frame.width, frame.height, cfg.stride, 0)?;
                acc = Some(InfluxAccumulator::new(g));
                *geometry.insert(g)
            }
        };
        if (frame.width, frame.height) != (g.width, g.height) {
            return Err(PipelineError::Mismatch(format!(
                "frame {} is {}x{}, stream started at {}x{}",
                frame.index, frame.width, frame.height, g.width, g.height
            )));
        }
        let pyr = build_pyramid(&frame, cfg.lk.levels, cfg.lk.window())?;
        if let Some(p) = &prev {
            let flow = dense_flow_pyr(p, &pyr, g, &cfg.lk)?;
            acc.as_mut().expect("set with geometry").accumulate(&flow)?;
        }
        prev = Some(pyr);
    }
    let first_ts = first_ts.ok_or_else(|| FrameError::EmptySource("training stream".into()))?;
    let duration = last_ts - first_ts;
    if duration + 1e-9 < cfg.min_duration {
        return Err(PipelineError::InsufficientTraining {
            seconds: duration,
            required: cfg.min_duration,
        });
    }
    let acc = acc.expect("non-empty stream");
    let g = acc.geometry();
    let mut map = acc.to_map()?;
    if cfg.two_way {
        map.nullify_outbound();
    }
    map.prune_support(cfg.prune_fraction);
    let pfa = locate_pfa(&map, cfg.pfa_eps)?;
    let diag = diagonal(g.width, g.height);
    map.intensify(pfa, cfg.alpha, cfg.rho_fraction * diag)?;
    let sample_params = SampleParams {
        count: cfg.sample_count,
        sigma_s: cfg.sigma_s_fraction * diag,
        seed: cfg.seed,
        margin: cfg.lk.margin() as f64,
    };
    let points = sample_points(&map, &sample_params)?;
    info!(
        "influx map: {} frames, support {}, pfa ({:.1}, {:.1}), {} sample points",
        map.frames_trained,
        map.support(),
        pfa[0],
        pfa[1],
        points.len()
    );

    // pass 2: activity, template, noise
    let mut raw = ActivitySeries::new(1.0);
    let mut prev: Option<Pyramid> = None;
    for frame in open()? {
        let frame = frame?;
        let pyr = build_pyramid(&frame, cfg.lk.levels, cfg.lk.window())?;
        if let Some(p) = &prev {
            let flow = sparse_flow_pyr(p, &pyr, &points.points, &cfg.lk)?;
            raw.push(frame.index, frame.timestamp, compute_activity(&flow, &points)?)?;
        }
        prev = Some(pyr);
    }
    let fps = if count > 1 && duration > 0.0 { (count - 1) as f64 / duration } else { 1.0 };
    raw.rate = fps;
    let series = raw.resample(cfg.rate)?;
    let maxima = find_salient_maxima(&series, &cfg.salience)?;
    debug!("salient maxima at {:?}", maxima.iter().map(|&i| series.samples[i].timestamp).collect::<Vec<_>>());
    let template = extract_template(
        &series,
        &maxima,
        &TemplateParams {
            len: cfg.template_len,
            peak_fraction: cfg.peak_fraction,
        },
    )?;
    let noise = estimate_noise(&series, &maxima, cfg.noise_guard)?;

    let echo = ConfigEcho {
        lk: cfg.lk.clone(),
        frame_skip: cfg.frame_skip,
        two_way: cfg.two_way,
        alpha: cfg.alpha,
        rho: cfg.rho_fraction * diag,
        pfa_eps: cfg.pfa_eps,
        sigma_s: sample_params.sigma_s,
        sample_count: cfg.sample_count,
        seed: cfg.seed,
        k_sal: cfg.salience.k_sal,
        peak_fraction: cfg.peak_fraction,
        noise_guard: cfg.noise_guard,
    };
    let model = Model::assemble(&map, &points, &template, &noise, fps, maxima.len(), echo)?;
    let template = model.template()?;
    let noise = model.noise()?;
    let summary = TrainSummary {
        frames: count,
        duration,
        pfa: model.pfa,
        influx_support: map.support(),
        sample_points: points.len(),
        shortfall: points.shortfall,
        maxima: maxima.len(),
        template_len: template.len(),
        energy: template.energy(),
        sigma: noise.sigma,
        snr: template.energy().sqrt() / noise.sigma,
        predicted_pd: predicted_pd(
            &DetectorConfig {
                rate: template.rate(),
                ..DetectorConfig::default()
            },
            &noise,
            &template,
        )?,
    };
    Ok(TrainOutput {
        model,
        summary,
        activity: series,
        maxima,
    })
}

/// Result of feeding one frame to the online detector.
#[derive(Debug, Clone, Default)]
pub struct FrameOutput {
    /// Raw activity for this frame (absent for the first frame).
    pub activity: Option<ActivitySample>,
    /// Detector evaluations completed by this frame, in time order.
    pub states: Vec<CrossingState>,
}

/// Frame-by-frame detector: sparse flow at the model's sample points,
/// activity, resampling to the detector rate, matched filter.
#[derive(Debug)]
pub struct OnlineDetector {
    lk: LkParams,
    points: SamplePointSet,
    width: usize,
    height: usize,
    prev: Option<Pyramid>,
    resampler: OnlineResampler,
    detector: Detector,
}

impl OnlineDetector {
    pub fn new(model: &Model, cfg: DetectorConfig) -> Result<Self, PipelineError> {
        let template = model.template()?;
        let threshold = np_threshold(&cfg, &model.noise()?, &template)?;
        Self::with_parts(model.config.lk.clone(), model.sample_set()?, model.width, model.height, &template, threshold, cfg)
    }

    pub fn with_parts(
        lk: LkParams,
        points: SamplePointSet,
        width: usize,
        height: usize,
        template: &PulseTemplate,
        threshold: ThresholdSpec,
        cfg: DetectorConfig,
    ) -> Result<Self, PipelineError> {
        lk.validate()?;
        Ok(OnlineDetector {
            lk,
            points,
            width,
            height,
            prev: None,
            resampler: OnlineResampler::new(cfg.rate),
            detector: Detector::new(cfg, template, threshold)?,
        })
    }

    pub fn threshold(&self) -> &ThresholdSpec {
        self.detector.threshold()
    }

    pub fn state(&self) -> Indication {
        self.detector.state()
    }

    pub fn push_frame(&mut self, frame: &Frame) -> Result<FrameOutput, PipelineError> {
        if (frame.width, frame.height) != (self.width, self.height) {
            return Err(PipelineError::Mismatch(format!(
                "frame {} is {}x{}, model expects {}x{}",
                frame.index, frame.width, frame.height, self.width, self.height
            )));
        }
        let pyr = build_pyramid(frame, self.lk.levels, self.lk.window())?;
        let mut out = FrameOutput::default();
        if let Some(prev) = &self.prev {
            let flow = sparse_flow_pyr(prev, &pyr, &self.points.points, &self.lk)?;
            let a = compute_activity(&flow, &self.points)?;
            out.activity = Some(ActivitySample {
                index: frame.index,
                timestamp: frame.timestamp,
                value: a,
            });
            for (_, t, v) in self.resampler.push(frame.timestamp, a) {
                out.states.push(self.detector.step(t, v));
            }
        }
        self.prev = Some(pyr);
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DetectRun {
    pub states: Vec<CrossingState>,
    /// `(frame index, timestamp, activity, state after the frame)`.
    pub activity: Vec<(u64, f64, f64, Indication)>,
    pub gamma: f64,
    pub frames: u64,
}

impl DetectRun {
    /// States at which the indication changed, including the first one.
    pub fn changes(&self) -> Vec<CrossingState> {
        let mut out: Vec<CrossingState> = Vec::new();
        for s in &self.states {
            if out.last().is_none_or(|l| l.state != s.state) {
                out.push(*s);
            }
        }
        out
    }

    /// Times of GAP -> TRAFFIC transitions.
    pub fn onsets(&self) -> Vec<f64> {
        self.states
            .windows(2)
            .filter(|w| w[0].state == Indication::Gap && w[1].state == Indication::Traffic)
            .map(|w| w[1].timestamp)
            .collect()
    }

    pub fn write_events<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_events(w, &self.states, self.gamma)
    }

    pub fn write_activity<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "index,timestamp,activity,state")?;
        for (i, t, a, s) in &self.activity {
            writeln!(w, "{i},{t},{a},{s}")?;
        }
        Ok(())
    }
}

pub fn write_events<W: Write>(w: &mut W, states: &[CrossingState], gamma: f64) -> std::io::Result<()> {
    writeln!(w, "timestamp,state,correlator,gamma,margin")?;
    for s in states {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.timestamp,
            s.state,
            s.correlator.unwrap_or(f64::NAN),
            gamma,
            s.margin.unwrap_or(f64::NAN)
        )?;
    }
    Ok(())
}

/// Runs the online detector over a whole stream. `on_change` sees every
/// change of indication as it happens.
pub fn detect<I, C>(frames: I, model: &Model, cfg: DetectorConfig, mut on_change: C) -> Result<DetectRun, PipelineError>
where
    I: IntoIterator<Item = Result<Frame, FrameError>>,
    C: FnMut(&CrossingState),
{
    let mut det = OnlineDetector::new(model, cfg)?;
    let mut run = DetectRun {
        gamma: det.threshold().gamma,
        ..DetectRun::default()
    };
    let mut last: Option<Indication> = None;
    for frame in frames {
        let frame = frame?;
        let out = det.push_frame(&frame)?;
        run.frames += 1;
        for s in &out.states {
            if last != Some(s.state) {
                on_change(s);
                last = Some(s.state);
            }
        }
        if let Some(a) = out.activity {
            run.activity.push((a.index, a.timestamp, a.value, det.state()));
        }
        run.states.extend(out.states);
    }
    Ok(run)
}
