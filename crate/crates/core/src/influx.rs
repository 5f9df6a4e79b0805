//! Influx map training and the derived online sampling plan.
//!
//! The map is the per-cell temporal mean of training flow. Image y grows
//! downward, so inbound traffic has `dy > 0` and outbound (upward) motion
//! has `dy < 0`.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::optflow::{DenseFlowField, FlowVector, GridGeometry};

#[derive(Debug, Error, PartialEq)]
pub enum InfluxError {
    #[error("flow grid {got:?} does not match map grid {want:?}")]
    GeometryMismatch { want: GridGeometry, got: GridGeometry },
    #[error("influx map has no training frames")]
    Untrained,
    #[error("influx map is zero everywhere")]
    ZeroSupport,
    #[error("point of first appearance has not been located")]
    NoPfa,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Running per-cell mean of valid flow vectors.
#[derive(Debug, Clone)]
pub struct InfluxAccumulator {
    geometry: GridGeometry,
    sums: Vec<[f64; 2]>,
    counts: Vec<u64>,
    frames: u64,
}

impl InfluxAccumulator {
    pub fn new(geometry: GridGeometry) -> Self {
        InfluxAccumulator {
            geometry,
            sums: vec![[0.0; 2]; geometry.len()],
            counts: vec![0; geometry.len()],
            frames: 0,
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    /// Adds one dense flow observation. Invalid tracks do not count towards
    /// their cell's mean.
    pub fn accumulate(&mut self, flow: &DenseFlowField) -> Result<(), InfluxError> {
        if flow.geometry != self.geometry {
            return Err(InfluxError::GeometryMismatch {
                want: self.geometry,
                got: flow.geometry,
            });
        }
        for (i, (v, ok)) in flow.vectors.iter().zip(&flow.valid).enumerate() {
            if *ok {
                self.sums[i][0] += v.dx;
                self.sums[i][1] += v.dy;
                self.counts[i] += 1;
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn valid_count(&self, col: usize, row: usize) -> u64 {
        self.counts[row * self.geometry.cols + col]
    }

    /// Current mean field as an (unintensified) influx map.
    pub fn to_map(&self) -> Result<InfluxMap, InfluxError> {
        if self.frames == 0 {
            return Err(InfluxError::Untrained);
        }
        let vectors = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &n)| {
                if n == 0 {
                    FlowVector::ZERO
                } else {
                    FlowVector::new(s[0] / n as f64, s[1] / n as f64)
                }
            })
            .collect();
        Ok(InfluxMap {
            geometry: self.geometry,
            vectors,
            weights: vec![1.0; self.geometry.len()],
            pfa: None,
            frames_trained: self.frames,
            nullified_outbound: false,
        })
    }
}

/// Expected inbound motion per grid cell, with intensification weights.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluxMap {
    pub geometry: GridGeometry,
    /// Row-major mean flow `m`, pixels per frame.
    pub vectors: Vec<FlowVector>,
    /// Row-major intensification multipliers `w >= 1`.
    pub weights: Vec<f64>,
    pub pfa: Option<[f64; 2]>,
    pub frames_trained: u64,
    pub nullified_outbound: bool,
}

impl InfluxMap {
    /// Map built directly from a vector field (weights 1, one training frame).
    pub fn from_vectors(geometry: GridGeometry, vectors: Vec<FlowVector>) -> Self {
        assert_eq!(vectors.len(), geometry.len());
        InfluxMap {
            geometry,
            vectors,
            weights: vec![1.0; geometry.len()],
            pfa: None,
            frames_trained: 1,
            nullified_outbound: false,
        }
    }

    #[inline]
    fn idx(&self, col: usize, row: usize) -> usize {
        row * self.geometry.cols + col
    }

    pub fn get(&self, col: usize, row: usize) -> FlowVector {
        self.vectors[self.idx(col, row)]
    }

    pub fn weight(&self, col: usize, row: usize) -> f64 {
        self.weights[self.idx(col, row)]
    }

    /// Effective projection vector `w * m` of a cell.
    pub fn projection(&self, col: usize, row: usize) -> FlowVector {
        let i = self.idx(col, row);
        self.vectors[i].scale(self.weights[i])
    }

    pub fn max_magnitude(&self) -> f64 {
        self.vectors.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn support(&self) -> usize {
        self.vectors.iter().filter(|v| v.norm() > 0.0).count()
    }

    /// Zeroes every cell whose vector points upward (`dy < 0`).
    pub fn nullify_outbound(&mut self) {
        for v in &mut self.vectors {
            if v.dy < 0.0 {
                *v = FlowVector::ZERO;
            }
        }
        self.nullified_outbound = true;
    }

    /// Zeroes cells weaker than `fraction` of the strongest cell, leaving
    /// only consistent motion in the support.
    pub fn prune_support(&mut self, fraction: f64) {
        let floor = fraction * self.max_magnitude();
        for v in &mut self.vectors {
            if v.norm() < floor {
                *v = FlowVector::ZERO;
            }
        }
    }

    /// Bilinear interpolation of `m` between cell centers, clamped at the
    /// outermost centers.
    pub fn interpolate(&self, x: f64, y: f64) -> FlowVector {
        let g = &self.geometry;
        let s = g.stride as f64;
        let fx = ((x - g.center(0)) / s).clamp(0.0, (g.cols - 1) as f64);
        let fy = ((y - g.center(0)) / s).clamp(0.0, (g.rows - 1) as f64);
        let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(g.cols - 1), (r0 + 1).min(g.rows - 1));
        let (ax, ay) = (fx - c0 as f64, fy - r0 as f64);
        let v00 = self.get(c0, r0);
        let v10 = self.get(c1, r0);
        let v01 = self.get(c0, r1);
        let v11 = self.get(c1, r1);
        let wx = [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay];
        FlowVector::new(
            wx[0] * v00.dx + wx[1] * v10.dx + wx[2] * v01.dx + wx[3] * v11.dx,
            wx[0] * v00.dy + wx[1] * v10.dy + wx[2] * v01.dy + wx[3] * v11.dy,
        )
    }

    /// Sets `w(p) = 1 + alpha * exp(-|p - pfa|^2 / (2 rho^2))` per cell center
    /// and records `pfa`.
    pub fn intensify(&mut self, pfa: [f64; 2], alpha: f64, rho: f64) -> Result<(), InfluxError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(InfluxError::InvalidParams(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(InfluxError::InvalidParams(format!("rho must be > 0, got {rho}")));
        }
        let g = self.geometry;
        for row in 0..g.rows {
            for col in 0..g.cols {
                let [x, y] = g.node(col, row);
                let d2 = (x - pfa[0]).powi(2) + (y - pfa[1]).powi(2);
                let i = self.idx(col, row);
                self.weights[i] = 1.0 + alpha * (-d2 / (2.0 * rho * rho)).exp();
            }
        }
        self.pfa = Some(pfa);
        Ok(())
    }
}

/// Locates the point of first appearance by back-tracking the map from its
/// strongest cells.
///
/// Each trace starts at a cell in the top magnitude decile and steps against
/// the interpolated flow direction by half a stride. A trace stops when the
/// local magnitude drops below `eps * max`, when the direction reverses
/// (the trace has passed the source), or at the image edge (the stop point is
/// clamped onto the border). Stop points are clustered single-link with
/// radius `3 * stride`; the centroid of the largest cluster is returned.
pub fn locate_pfa(map: &InfluxMap, eps: f64) -> Result<[f64; 2], InfluxError> {
    let g = map.geometry;
    let max = map.max_magnitude();
    if max <= 0.0 {
        return Err(InfluxError::ZeroSupport);
    }
    let mut cells: Vec<(usize, f64)> = map
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.norm()))
        .filter(|(_, m)| *m > 0.0)
        .collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = cells.len().div_ceil(10).max(1);

    let step = g.stride as f64 / 2.0;
    let (xmax, ymax) = ((g.width - 1) as f64, (g.height - 1) as f64);
    let max_steps = 4 * (g.width + g.height) / g.stride.max(1) + 8;
    let stops: Vec<[f64; 2]> = cells[..top]
        .iter()
        .map(|&(i, _)| {
            let mut p = g.node(i % g.cols, i / g.cols);
            let mut prev_dir: Option<[f64; 2]> = None;
            for _ in 0..max_steps {
                let v = map.interpolate(p[0], p[1]);
                let mag = v.norm();
                if mag < eps * max {
                    break;
                }
                let dir = [-v.dx / mag, -v.dy / mag];
                if let Some(pd) = prev_dir {
                    if dir[0] * pd[0] + dir[1] * pd[1] < 0.0 {
                        break;
                    }
                }
                let next = [p[0] + step * dir[0], p[1] + step * dir[1]];
                if next[0] < 0.0 || next[1] < 0.0 || next[0] > xmax || next[1] > ymax {
                    p = [next[0].clamp(0.0, xmax), next[1].clamp(0.0, ymax)];
                    break;
                }
                p = next;
                prev_dir = Some(dir);
            }
            p
        })
        .collect();

    let clusters = single_link_clusters(&stops, 3.0 * g.stride as f64);
    let best = clusters
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
        .map(|(_, c)| c)
        .expect("at least one stop point");
    let n = best.len() as f64;
    let cx = best.iter().map(|&i| stops[i][0]).sum::<f64>() / n;
    let cy = best.iter().map(|&i| stops[i][1]).sum::<f64>() / n;
    Ok([cx, cy])
}

fn single_link_clusters(points: &[[f64; 2]], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = radius * radius;
    for i in 0..n {
        for j in i + 1..n {
            let d2 = (points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2);
            if d2 <= r2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleParams {
    pub count: usize,
    /// Standard deviation of the Gaussian around the PFA, pixels.
    pub sigma_s: f64,
    pub seed: u64,
    /// Minimum distance of a point from the image border, pixels.
    pub margin: f64,
}

/// Online measurement points and their projection vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePointSet {
    /// Cell centers, pixels.
    pub points: Vec<[f32; 2]>,
    pub cells: Vec<(usize, usize)>,
    /// `w * m` at each point.
    pub projections: Vec<FlowVector>,
    pub requested: usize,
    /// Set when fewer than `requested` points could be drawn.
    pub shortfall: bool,
}

impl SamplePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Draws up to `count` distinct support cells from an isotropic Gaussian
/// centered at the map's PFA. Deterministic for a given seed.
pub fn sample_points(map: &InfluxMap, params: &SampleParams) -> Result<SamplePointSet, InfluxError> {
    if params.count == 0 {
        return Err(InfluxError::InvalidParams("count must be >= 1".into()));
    }
    if !(params.sigma_s > 0.0) {
        return Err(InfluxError::InvalidParams("sigma_s must be > 0".into()));
    }
    let pfa = map.pfa.ok_or(InfluxError::NoPfa)?;
    if map.support() == 0 {
        return Err(InfluxError::ZeroSupport);
    }
    let g = map.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut taken: HashSet<(usize, usize)> = HashSet::new();
    let mut out = SamplePointSet {
        points: Vec::new(),
        cells: Vec::new(),
        projections: Vec::new(),
        requested: params.count,
        shortfall: false,
    };
    let (w, h) = (g.width as f64, g.height as f64);
    let budget = 50 * params.count;
    for _ in 0..budget {
        if out.points.len() == params.count {
            break;
        }
        let zx: f64 = StandardNormal.sample(&mut rng);
        let zy: f64 = StandardNormal.sample(&mut rng);
        let (x, y) = (pfa[0] + params.sigma_s * zx, pfa[1] + params.sigma_s * zy);
        if x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0 {
            continue;
        }
        let Some(cell) = g.cell_of(x, y) else { continue };
        let [cx, cy] = g.node(cell.0, cell.1);
        let m = params.margin;
        if cx < m || cy < m || cx > w - 1.0 - m || cy > h - 1.0 - m {
            continue;
        }
        if map.get(cell.0, cell.1).norm() == 0.0 || !taken.insert(cell) {
            continue;
        }
        out.points.push([cx as f32, cy as f32]);
        out.cells.push(cell);
        out.projections.push(map.projection(cell.0, cell.1));
    }
    out.shortfall = out.points.len() < params.count;
    if out.shortfall {
        log::warn!(
            "sampled {} of {} requested points (support {})",
            out.points.len(),
            params.count,
            map.support()
        );
    }
    if out.points.is_empty() {
        return Err(InfluxError::ZeroSupport);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(w: usize, h: usize, stride: usize) -> GridGeometry {
        GridGeometry::new(w, h, stride, 0).unwrap()
    }

    fn field(g: GridGeometry, f: impl Fn(f64, f64) -> FlowVector) -> DenseFlowField {
        let vectors: Vec<FlowVector> = g.nodes().map(|p| f(p[0], p[1])).collect();
        DenseFlowField {
            geometry: g,
            valid: vec![true; vectors.len()],
            vectors,
            span: (0, 1),
        }
    }

    /// Diverging field with a nonzero pedestal at the source.
    fn radial_map(g: GridGeometry, src: [f64; 2]) -> InfluxMap {
        let vectors = g
            .nodes()
            .map(|p| {
                let (dx, dy) = (p[0] - src[0], p[1] - src[1]);
                let r = dx.hypot(dy);
                if r < 1e-9 {
                    FlowVector::ZERO
                } else {
                    let mag = 0.3 + r / 100.0;
                    FlowVector::new(mag * dx / r, mag * dy / r)
                }
            })
            .collect();
        InfluxMap::from_vectors(g, vectors)
    }

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    #[test]
    fn accumulate_single_and_cancel() {
        let g = geom(64, 48, 8);
        let f = field(g, |x, y| FlowVector::new(x / 10.0, -y / 20.0));
        let mut acc = InfluxAccumulator::new(g);
        acc.accumulate(&f).unwrap();
        assert_eq!(acc.to_map().unwrap().vectors, f.vectors);

        let neg = field(g, |x, y| FlowVector::new(-x / 10.0, y / 20.0));
        acc.accumulate(&neg).unwrap();
        let m = acc.to_map().unwrap();
        assert!(m.vectors.iter().all(|v| v.norm() == 0.0));
        assert_eq!(m.frames_trained, 2);
    }

    #[test]
    fn invalid_tracks_are_excluded() {
        let g = geom(32, 32, 8);
        let mut a = field(g, |_, _| FlowVector::new(1.0, 2.0));
        let mut acc = InfluxAccumulator::new(g);
        acc.accumulate(&a).unwrap();
        a.valid[0] = false;
        a.vectors[0] = FlowVector::ZERO;
        acc.accumulate(&a).unwrap();
        let m = acc.to_map().unwrap();
        assert_eq!(m.get(0, 0), FlowVector::new(1.0, 2.0));
        assert_eq!(acc.valid_count(0, 0), 1);
        assert_eq!(acc.valid_count(1, 0), 2);
    }

    #[test]
    fn accumulate_geometry_mismatch_and_untrained() {
        let acc = InfluxAccumulator::new(geom(64, 48, 8));
        assert_eq!(acc.to_map(), Err(InfluxError::Untrained));
        let mut acc = acc;
        let f = field(geom(64, 48, 4), |_, _| FlowVector::ZERO);
        assert!(matches!(acc.accumulate(&f), Err(InfluxError::GeometryMismatch { .. })));
    }

    #[test]
    fn nullify_cases() {
        let g = geom(24, 8, 8);
        let mut m = InfluxMap::from_vectors(
            g,
            vec![FlowVector::new(3.0, -2.0), FlowVector::new(3.0, 2.0), FlowVector::new(5.0, 0.0)],
        );
        m.nullify_outbound();
        assert_eq!(m.vectors, vec![FlowVector::ZERO, FlowVector::new(3.0, 2.0), FlowVector::new(5.0, 0.0)]);
        assert!(m.nullified_outbound);
        let once = m.clone();
        m.nullify_outbound();
        assert_eq!(m, once);
    }

    #[test]
    fn intensify_closed_forms() {
        let g = geom(200, 200, 4);
        let mut m = InfluxMap::from_vectors(g, vec![FlowVector::new(0.0, 1.0); g.len()]);
        m.intensify([101.5, 101.5], 0.0, 10.0).unwrap();
        assert!(m.weights.iter().all(|&w| w == 1.0));

        let pfa = g.node(25, 25);
        m.intensify(pfa, 4.0, 10.0).unwrap();
        assert_eq!(m.weight(25, 25), 5.0);
        // half-weight radius rho*sqrt(2 ln 2) along a grid line: pick rho so it
        // lands exactly on a node 3 cells away.
        let rho = 12.0 / (2.0 * 2f64.ln()).sqrt();
        m.intensify(pfa, 4.0, rho).unwrap();
        assert!((m.weight(28, 25) - 3.0).abs() < 1e-12);
        assert!(m.weights.iter().all(|&w| w >= 1.0));
        let argmax = m.weights.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 25 * g.cols + 25);

        assert!(m.intensify(pfa, -1.0, 1.0).is_err());
        assert!(m.intensify(pfa, 1.0, 0.0).is_err());
    }

    #[test]
    fn intensify_preserves_direction() {
        let g = geom(120, 90, 6);
        let mut m = radial_map(g, [40.0, 30.0]);
        let before = m.vectors.clone();
        m.intensify([40.0, 30.0], 3.0, 15.0).unwrap();
        for row in 0..g.rows {
            for col in 0..g.cols {
                let i = row * g.cols + col;
                let p = m.projection(col, row);
                let v = before[i];
                assert!((p.dx * v.dy - p.dy * v.dx).abs() < 1e-12);
                assert!(p.dot(v) >= 0.0);
            }
        }
    }

    #[test]
    fn pfa_on_radial_map() {
        let g = geom(320, 240, 8);
        let src = [150.0, 60.0];
        let p = locate_pfa(&radial_map(g, src), 0.05).unwrap();
        assert!(dist(p, src) <= 8.0, "{p:?}");
    }

    #[test]
    fn pfa_uniform_field_hits_upstream_border() {
        let g = geom(160, 120, 8);
        let m = InfluxMap::from_vectors(g, vec![FlowVector::new(0.0, 1.5); g.len()]);
        let p = locate_pfa(&m, 0.05).unwrap();
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn pfa_single_cell() {
        let g = geom(160, 120, 8);
        let mut v = vec![FlowVector::ZERO; g.len()];
        v[7 * g.cols + 9] = FlowVector::new(0.0, 2.0);
        let p = locate_pfa(&InfluxMap::from_vectors(g, v), 0.05).unwrap();
        assert!(dist(p, g.node(9, 7)) <= 8.0 + 1e-9, "{p:?}");
    }

    #[test]
    fn pfa_zero_map_errors() {
        let g = geom(64, 64, 8);
        let m = InfluxMap::from_vectors(g, vec![FlowVector::ZERO; g.len()]);
        assert_eq!(locate_pfa(&m, 0.05), Err(InfluxError::ZeroSupport));
    }

    #[test]
    fn sampling_shortfall_and_determinism() {
        let g = geom(160, 120, 8);
        let mut v = vec![FlowVector::ZERO; g.len()];
        for k in 0..10 {
            v[(4 + k) * g.cols + 10] = FlowVector::new(0.1, 1.0);
        }
        let mut m = InfluxMap::from_vectors(g, v);
        m.intensify(g.node(10, 9), 4.0, 10.0).unwrap();
        let params = SampleParams {
            count: 2000,
            sigma_s: 40.0,
            seed: 3,
            margin: 8.0,
        };
        let s = sample_points(&m, &params).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.shortfall);
        assert_eq!(sample_points(&m, &params).unwrap(), s);
        for (c, p) in s.cells.iter().zip(&s.projections) {
            assert_eq!(*p, m.projection(c.0, c.1));
        }
    }

    #[test]
    fn sampling_requires_pfa_and_support() {
        let g = geom(64, 64, 8);
        let mut m = InfluxMap::from_vectors(g, vec![FlowVector::ZERO; g.len()]);
        let p = SampleParams {
            count: 10,
            sigma_s: 10.0,
            seed: 0,
            margin: 0.0,
        };
        assert_eq!(sample_points(&m, &p), Err(InfluxError::NoPfa));
        m.intensify([32.0, 32.0], 1.0, 5.0).unwrap();
        assert_eq!(sample_points(&m, &p), Err(InfluxError::ZeroSupport));
    }

    #[test]
    fn prune_support_drops_weak_cells() {
        let g = geom(24, 8, 8);
        let mut m = InfluxMap::from_vectors(
            g,
            vec![FlowVector::new(0.0, 1.0), FlowVector::new(0.0, 0.01), FlowVector::new(0.1, 0.0)],
        );
        m.prune_support(0.05);
        assert_eq!(m.support(), 2);
        assert_eq!(m.vectors[1], FlowVector::ZERO);
    }
}
