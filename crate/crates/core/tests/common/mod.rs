#![allow(dead_code)]

use crossgap::activity::{NoiseModel, PulseTemplate};
use crossgap::frame_io::Frame;
use crossgap::influx::{sample_points, InfluxMap, SampleParams};
use crossgap::model::{ConfigEcho, Model};
use crossgap::optflow::{FlowVector, GridGeometry, LkParams};

/// Smooth multi-frequency texture with strong gradients at every scale LK uses.
pub fn texture(x: f64, y: f64) -> f64 {
    0.5 + 0.15 * (0.33 * x + 0.08 * y).sin() + 0.12 * (0.29 * y - 0.12 * x).cos() + 0.08 * (0.41 * x + 0.37 * y).sin()
}

/// Frame whose content is the texture shifted by `(dx, dy)`.
pub fn shifted_frame(width: usize, height: usize, dx: f64, dy: f64, index: u64) -> Frame {
    let mut luma = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            luma.push(texture(x as f64 - dx, y as f64 - dy) as f32);
        }
    }
    Frame::new(width, height, luma, index, index as f64 / 8.0)
}

/// One vehicle's activity shape: a slow cosine rise to a peak at 80% of the
/// window, then a quick fall.
pub fn approach_pulse(len: usize, peak: f64) -> Vec<f64> {
    let top = (0.8 * (len - 1) as f64).round();
    let tail = (len - 1) as f64 - top;
    (0..len)
        .map(|n| {
            let n = n as f64;
            let phase = if n <= top { n / top } else { 1.0 - (n - top) / (tail + 1.0) };
            peak * (0.5 - 0.5 * (std::f64::consts::PI * phase).cos())
        })
        .collect()
}

/// Radial inflow map diverging from `src`, speed growing with distance.
pub fn radial_map(g: GridGeometry, src: [f64; 2], base: f64, gain: f64) -> InfluxMap {
    let vectors = g
        .nodes()
        .map(|p| {
            let (dx, dy) = (p[0] - src[0], p[1] - src[1]);
            let r = dx.hypot(dy);
            if r < 1e-9 {
                FlowVector::ZERO
            } else {
                let mag = base + gain * r;
                FlowVector::new(mag * dx / r, mag * dy / r)
            }
        })
        .collect();
    InfluxMap::from_vectors(g, vectors)
}

/// Hand-built model with wide support below a source near the top of the
/// image. `sigma` sets the detector noise level directly.
pub fn synthetic_model(width: usize, height: usize, count: usize, sigma: f64) -> Model {
    let g = GridGeometry::new(width, height, 8, 0).unwrap();
    let src = [width as f64 / 2.0, height as f64 / 8.0];
    let diag = (width as f64).hypot(height as f64);
    let mut map = radial_map(g, src, 0.2, 1.0 / 200.0);
    map.nullify_outbound();
    map.pfa = Some(src);
    map.intensify(src, 4.0, 0.05 * diag).unwrap();
    let lk = LkParams::default();
    let params = SampleParams {
        count,
        sigma_s: 0.2 * diag,
        seed: 0,
        margin: lk.margin() as f64,
    };
    let points = sample_points(&map, &params).unwrap();
    let template = PulseTemplate::new(approach_pulse(150, 1.0), 30.0).unwrap();
    let echo = ConfigEcho {
        lk,
        frame_skip: 2,
        two_way: false,
        alpha: 4.0,
        rho: 0.05 * diag,
        pfa_eps: 0.05,
        sigma_s: params.sigma_s,
        sample_count: count,
        seed: 0,
        k_sal: 6.0,
        peak_fraction: 0.8,
        noise_guard: 10.0,
    };
    Model::assemble(&map, &points, &template, &NoiseModel::new(sigma).unwrap(), 8.0, 20, echo).unwrap()
}
