//! `model.json`: everything the online detector needs from training.
//!
//! Floats are rounded to 9 significant digits when the model is built, so
//! the in-memory model and its reloaded copy are identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{ActivityError, NoiseModel, PulseTemplate};
use crate::influx::{InfluxMap, SamplePointSet};
use crate::optflow::{FlowVector, GridGeometry, LkParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed model: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("inconsistent model: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Activity(#[from] ActivityError),
}

/// Rounds to 9 significant decimal digits.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// Training settings echoed into the model for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub lk: LkParams,
    pub frame_skip: usize,
    pub two_way: bool,
    pub alpha: f64,
    pub rho: f64,
    pub pfa_eps: f64,
    pub sigma_s: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub k_sal: f64,
    pub peak_fraction: f64,
    pub noise_guard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub offset: usize,
    /// Frame rate of the training stream.
    pub fps: f64,
    /// Row-major `[dx, dy]` per grid cell.
    pub influx: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub pfa: [f64; 2],
    pub frames_trained: u64,
    pub nullified_outbound: bool,
    pub sample_points: Vec<[f32; 2]>,
    /// `w * m` at each sample point.
    pub projections: Vec<[f64; 2]>,
    pub template: Vec<f64>,
    /// Detector rate the template is sampled at.
    pub rate: f64,
    pub sigma: f64,
    pub noise_samples: usize,
    pub maxima: usize,
    pub config: ConfigEcho,
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        map: &InfluxMap,
        points: &SamplePointSet,
        template: &PulseTemplate,
        noise: &NoiseModel,
        fps: f64,
        maxima: usize,
        config: ConfigEcho,
    ) -> Result<Self, ModelError> {
        let pfa = map
            .pfa
            .ok_or_else(|| ModelError::Inconsistent("influx map has no point of first appearance".into()))?;
        let r = round_sig9;
        let m = Model {
            format_version: FORMAT_VERSION,
            width: map.geometry.width,
            height: map.geometry.height,
            stride: map.geometry.stride,
            offset: map.geometry.offset,
            fps: r(fps),
            influx: map.vectors.iter().map(|v| [r(v.dx), r(v.dy)]).collect(),
            weights: map.weights.iter().map(|&w| r(w)).collect(),
            pfa: [r(pfa[0]), r(pfa[1])],
            frames_trained: map.frames_trained,
            nullified_outbound: map.nullified_outbound,
            sample_points: points.points.clone(),
            projections: points.projections.iter().map(|v| [r(v.dx), r(v.dy)]).collect(),
            template: template.values().iter().map(|&v| r(v)).collect(),
            rate: r(template.rate()),
            sigma: r(noise.sigma),
            noise_samples: noise.sample_count,
            maxima,
            config,
        };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ModelError::Version {
                found: self.format_version,
            });
        }
        let g = self.geometry()?;
        let bad = |m: String| Err(ModelError::Inconsistent(m));
        if self.influx.len() != g.len() || self.weights.len() != g.len() {
            return bad(format!("grid has {} cells, influx {}, weights {}", g.len(), self.influx.len(), self.weights.len()));
        }
        if self.sample_points.is_empty() || self.sample_points.len() != self.projections.len() {
            return bad(format!("{} sample points, {} projections", self.sample_points.len(), self.projections.len()));
        }
        if !(self.sigma > 0.0 && self.fps > 0.0) {
            return bad(format!("sigma {}, fps {}", self.sigma, self.fps));
        }
        self.template()?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<GridGeometry, ModelError> {
        GridGeometry::new(self.width, self.height, self.stride, self.offset).map_err(|e| ModelError::Inconsistent(e.to_string()))
    }

    pub fn influx_map(&self) -> Result<InfluxMap, ModelError> {
        Ok(InfluxMap {
            geometry: self.geometry()?,
            vectors: self.influx.iter().map(|v| FlowVector::new(v[0], v[1])).collect(),
            weights: self.weights.clone(),
            pfa: Some(self.pfa),
            frames_trained: self.frames_trained,
            nullified_outbound: self.nullified_outbound,
        })
    }

    pub fn sample_set(&self) -> Result<SamplePointSet, ModelError> {
        let g = self.geometry()?;
        let cells = self
            .sample_points
            .iter()
            .map(|p| {
                g.cell_of(p[0] as f64, p[1] as f64)
                    .ok_or_else(|| ModelError::Inconsistent(format!("sample point {p:?} outside grid")))
            })
            .collect::<Result<_, _>>()?;
        Ok(SamplePointSet {
            points: self.sample_points.clone(),
            cells,
            projections: self.projections.iter().map(|v| FlowVector::new(v[0], v[1])).collect(),
            requested: self.config.sample_count,
            shortfall: self.sample_points.len() < self.config.sample_count,
        })
    }

    pub fn template(&self) -> Result<PulseTemplate, ModelError> {
        Ok(PulseTemplate::new(self.template.clone(), self.rate)?)
    }

    pub fn noise(&self) -> Result<NoiseModel, ModelError> {
        let mut n = NoiseModel::new(self.sigma)?;
        n.sample_count = self.noise_samples;
        Ok(n)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("models always serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(ModelError::Version {
                found: probe.format_version,
            });
        }
        let m: Model = serde_json::from_str(text)?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
