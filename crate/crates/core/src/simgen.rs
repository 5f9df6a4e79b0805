//! Synthetic road scenes with exact ground truth.
//!
//! A vehicle is a rectangle that appears near the entry point and travels a
//! straight path to the exit baseline at the bottom of the image. Its path
//! fraction `p` grows linearly in time; image position follows
//! `g(p) = p (1 + c p) / (1 + c)` so motion is slow near the entry point and
//! fast near the camera, and its width grows linearly from 4 px to
//! `base_size`. The background is a smooth gradient plus a frozen random
//! texture; per-frame Gaussian noise is drawn from a stream keyed by the
//! frame index, so every frame can be rendered independently.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_io::{quantize, Frame, FrameError, FrameStream};

pub const PRESETS: [&str; 5] = ["single-car", "car-train", "late-appearer", "walker-distractor", "quiet"];

/// Smallest rendered vehicle width, at path fraction 0.
pub const MIN_VEHICLE_SIZE: f64 = 4.0;
const ASPECT: f64 = 0.75;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScript(String),
    #[error("road geometry outside the {width}x{height} image: {what}")]
    GeometryOutsideImage { width: usize, height: usize, what: String },
    #[error("unknown preset '{0}' (expected one of {list})", list = PRESETS.join(", "))]
    UnknownPreset(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

impl SimError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    /// Where vehicles first appear, in pixels.
    pub entry: [f64; 2],
    /// Where the path meets the camera baseline; `exit[1]` is the image height.
    pub exit: [f64; 2],
    /// Perspective curvature `c` of the path parametrization, `>= 0`.
    pub perspective: f64,
}

impl RoadGeometry {
    /// Image-space progress along the path for path fraction `p`.
    pub fn progress(&self, p: f64) -> f64 {
        p * (1.0 + self.perspective * p) / (1.0 + self.perspective)
    }

    pub fn position(&self, p: f64) -> [f64; 2] {
        let g = self.progress(p);
        [
            self.entry[0] + g * (self.exit[0] - self.entry[0]),
            self.entry[1] + g * (self.exit[1] - self.entry[1]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub appear_time: f64,
    /// Path fraction per second.
    pub speed: f64,
    /// Width in pixels at the exit baseline.
    pub base_size: f64,
    /// Additive intensity of the body.
    pub contrast: f64,
    /// Path fraction at which the vehicle becomes visible.
    #[serde(default)]
    pub entry_fraction: f64,
}

impl VehicleSpec {
    pub fn arrival_time(&self) -> f64 {
        self.appear_time + (1.0 - self.entry_fraction) / self.speed
    }

    fn size_at(&self, p: f64) -> f64 {
        MIN_VEHICLE_SIZE + (self.base_size - MIN_VEHICLE_SIZE) * p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Distractor {
    /// A small figure crossing the image horizontally.
    LateralWalker {
        start_time: f64,
        /// Pixels per second; negative walks leftwards.
        speed: f64,
        x0: f64,
        y: f64,
        size: f64,
        contrast: f64,
    },
    /// A disc of background texture swaying sideways.
    FoliagePatch {
        center: [f64; 2],
        radius: f64,
        amplitude: f64,
        period: f64,
    },
    /// A vehicle that enters along the road, stops and stays.
    StoppingCar {
        appear_time: f64,
        speed: f64,
        base_size: f64,
        contrast: f64,
        stop_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub duration: f64,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub road: RoadGeometry,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    pub noise_std: f64,
    /// Seeds the per-frame pixel noise.
    pub seed: u64,
    /// Seeds the static background texture (the "site").
    #[serde(default = "default_texture_seed")]
    pub texture_seed: u64,
}

fn default_texture_seed() -> u64 {
    7
}

impl SceneScript {
    pub fn frame_count(&self) -> u64 {
        (self.duration * self.fps + 1e-9).floor() as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScript(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {}", self.duration));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps {}", self.fps));
        }
        if self.width < 16 || self.height < 16 {
            return bad(format!("image {}x{} too small", self.width, self.height));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {}", self.noise_std));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let outside = |what: &str| {
            Err(SimError::GeometryOutsideImage {
                width: self.width,
                height: self.height,
                what: what.to_string(),
            })
        };
        let [ex, ey] = self.road.entry;
        if !(ex >= 0.0 && ex < w && ey >= 0.0 && ey < h) {
            return outside("entry point");
        }
        let [xx, xy] = self.road.exit;
        if !(xx >= 0.0 && xx <= w && xy > ey && xy <= h) {
            return outside("exit point");
        }
        if !(self.road.perspective >= 0.0 && self.road.perspective.is_finite()) {
            return bad(format!("perspective {}", self.road.perspective));
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if !(v.appear_time >= 0.0 && v.appear_time < self.duration) {
                return bad(format!("vehicle {i}: appear_time {} outside [0, duration)", v.appear_time));
            }
            if !(v.speed > 0.0 && v.speed.is_finite()) {
                return bad(format!("vehicle {i}: speed {}", v.speed));
            }
            if !(v.base_size >= MIN_VEHICLE_SIZE) {
                return bad(format!("vehicle {i}: base_size {}", v.base_size));
            }
            if !(v.entry_fraction >= 0.0 && v.entry_fraction < 1.0) {
                return bad(format!("vehicle {i}: entry_fraction {}", v.entry_fraction));
            }
        }
        for (i, d) in self.distractors.iter().enumerate() {
            let ok = match *d {
                Distractor::LateralWalker { start_time, size, .. } => start_time >= 0.0 && size > 0.0,
                Distractor::FoliagePatch { radius, period, .. } => radius > 0.0 && period > 0.0,
                Distractor::StoppingCar {
                    appear_time,
                    speed,
                    base_size,
                    stop_fraction,
                    ..
                } => appear_time >= 0.0 && speed > 0.0 && base_size >= MIN_VEHICLE_SIZE && (0.0..=1.0).contains(&stop_fraction),
            };
            if !ok {
                return bad(format!("distractor {i}: invalid parameters"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene scripts always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: SceneScript = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTruth {
    pub vehicle_id: usize,
    pub first_visible: f64,
    pub arrival: f64,
    /// Analytic center at every rendered frame while on screen.
    pub path: Vec<TracePoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub vehicles: Vec<VehicleTruth>,
}

impl GroundTruth {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "vehicle_id,first_visible,arrival")?;
        for v in &self.vehicles {
            writeln!(w, "{},{},{}", v.vehicle_id, v.first_visible, v.arrival)?;
        }
        Ok(())
    }

    /// Reads `vehicle_id,first_visible,arrival` rows; paths are left empty.
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, csv::Error> {
        #[derive(Deserialize)]
        struct Row {
            vehicle_id: usize,
            first_visible: f64,
            arrival: f64,
        }
        let mut vehicles = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row?;
            vehicles.push(VehicleTruth {
                vehicle_id: row.vehicle_id,
                first_visible: row.first_visible,
                arrival: row.arrival,
                path: Vec::new(),
            });
        }
        Ok(GroundTruth { vehicles })
    }
}

/// Vehicle placement at time `t`: center and width, or `None` if not present.
fn vehicle_box(road: &RoadGeometry, v: &VehicleSpec, t: f64, height: f64) -> Option<([f64; 2], f64)> {
    if t < v.appear_time {
        return None;
    }
    let p = v.entry_fraction + v.speed * (t - v.appear_time);
    let c = road.position(p);
    let size = v.size_at(p);
    (c[1] - 0.5 * ASPECT * size < height).then_some((c, size))
}

/// Overlap of the pixel footprint `[i - 0.5, i + 0.5]` with `[a, b]`.
#[inline]
fn coverage(i: usize, a: f64, b: f64) -> f64 {
    let lo = (i as f64 - 0.5).max(a);
    let hi = (i as f64 + 0.5).min(b);
    (hi - lo).max(0.0)
}

fn add_box(img: &mut [f32], width: usize, height: usize, center: [f64; 2], w: f64, h: f64, value: f64) {
    let (x0, x1) = (center[0] - 0.5 * w, center[0] + 0.5 * w);
    let (y0, y1) = (center[1] - 0.5 * h, center[1] + 0.5 * h);
    let clampi = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    if x1 < -0.5 || y1 < -0.5 || x0 > width as f64 - 0.5 || y0 > height as f64 - 0.5 {
        return;
    }
    let (ia, ib) = (clampi((x0 + 0.5).floor(), width), clampi((x1 + 0.5).ceil(), width));
    let (ja, jb) = (clampi((y0 + 0.5).floor(), height), clampi((y1 + 0.5).ceil(), height));
    for j in ja..=jb {
        let cy = coverage(j, y0, y1);
        if cy <= 0.0 {
            continue;
        }
        for i in ia..=ib {
            let cx = coverage(i, x0, x1);
            if cx > 0.0 {
                img[j * width + i] += (value * cx * cy) as f32;
            }
        }
    }
}

/// Car body plus a darker concentric cabin.
fn draw_vehicle(img: &mut [f32], width: usize, height: usize, center: [f64; 2], size: f64, contrast: f64) {
    let h = ASPECT * size;
    add_box(img, width, height, center, size, h, contrast);
    add_box(img, width, height, center, 0.5 * size, 0.5 * h, -0.5 * contrast);
}

fn background(script: &SceneScript) -> Vec<f32> {
    let (w, h) = (script.width, script.height);
    const CELL: usize = 4;
    let gw = w / CELL + 2;
    let gh = h / CELL + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(script.texture_seed);
    let coarse: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut fine = ChaCha8Rng::seed_from_u64(script.texture_seed ^ 0x5eed);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / CELL as f64;
            let fy = y as f64 / CELL as f64;
            let (cx, cy) = (fx.floor() as usize, fy.floor() as usize);
            let (ax, ay) = (fx - cx as f64, fy - cy as f64);
            let at = |i: usize, j: usize| coarse[j * gw + i];
            let tex = (1.0 - ay) * ((1.0 - ax) * at(cx, cy) + ax * at(cx + 1, cy)) + ay * ((1.0 - ax) * at(cx, cy + 1) + ax * at(cx + 1, cy + 1));
            let grad = 0.3 + 0.12 * y as f64 / h as f64 + 0.04 * x as f64 / w as f64;
            let grain: f64 = fine.random_range(-1.0..1.0);
            out.push((grad + 0.12 * tex + 0.04 * grain) as f32);
        }
    }
    out
}

fn bilinear(img: &[f32], width: usize, height: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (ax, ay) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let row0 = (1.0 - ax) * img[y0 * width + x0] + ax * img[y0 * width + x1];
    let row1 = (1.0 - ax) * img[y1 * width + x0] + ax * img[y1 * width + x1];
    (1.0 - ay) * row0 + ay * row1
}

/// Deterministic renderer; frames can be produced in any order.
#[derive(Debug, Clone)]
pub struct Renderer {
    script: SceneScript,
    background: Vec<f32>,
}

impl Renderer {
    pub fn new(script: SceneScript) -> Result<Self, SimError> {
        script.validate()?;
        let background = background(&script);
        Ok(Renderer { script, background })
    }

    pub fn script(&self) -> &SceneScript {
        &self.script
    }

    pub fn frame_count(&self) -> u64 {
        self.script.frame_count()
    }

    /// Noise-free, vehicle-free image.
    pub fn background(&self) -> &[f32] {
        &self.background
    }

    pub fn render_frame(&self, index: u64) -> Frame {
        let s = &self.script;
        let (w, h) = (s.width, s.height);
        let t = index as f64 / s.fps;
        let mut img = self.background.clone();

        for d in &s.distractors {
            match *d {
                Distractor::FoliagePatch {
                    center,
                    radius,
                    amplitude,
                    period,
                } => {
                    let shift = amplitude * (2.0 * std::f64::consts::PI * t / period).sin();
                    let (x0, x1) = ((center[0] - radius).max(0.0) as usize, ((center[0] + radius).ceil() as usize).min(w - 1));
                    let (y0, y1) = ((center[1] - radius).max(0.0) as usize, ((center[1] + radius).ceil() as usize).min(h - 1));
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            let (dx, dy) = (x as f64 - center[0], y as f64 - center[1]);
                            if dx * dx + dy * dy <= radius * radius {
                                // mirrored texture so the patch differs from its surroundings
                                let src = bilinear(&self.background, w, h, 2.0 * center[0] - x as f64 - shift, y as f64);
                                img[y * w + x] = src;
                            }
                        }
                    }
                }
                Distractor::LateralWalker {
                    start_time,
                    speed,
                    x0,
                    y,
                    size,
                    contrast,
                } if t >= start_time => {
                    let cx = x0 + speed * (t - start_time);
                    add_box(&mut img, w, h, [cx, y], 0.4 * size, size, contrast);
                }
                Distractor::StoppingCar {
                    appear_time,
                    speed,
                    base_size,
                    contrast,
                    stop_fraction,
                } if t >= appear_time => {
                    let p = (speed * (t - appear_time)).min(stop_fraction);
                    let size = MIN_VEHICLE_SIZE + (base_size - MIN_VEHICLE_SIZE) * p;
                    draw_vehicle(&mut img, w, h, s.road.position(p), size, contrast);
                }
                _ => {}
            }
        }

        for v in &s.vehicles {
            if let Some((c, size)) = vehicle_box(&s.road, v, t, h as f64) {
                draw_vehicle(&mut img, w, h, c, size, v.contrast);
            }
        }

        if s.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            rng.set_stream(index);
            let normal = Normal::new(0.0f32, s.noise_std as f32).expect("noise std validated");
            for px in &mut img {
                *px += normal.sample(&mut rng);
            }
        }
        let bytes: Vec<u8> = img.iter().map(|&v| quantize(v)).collect();
        Frame::from_bytes(w, h, &bytes, index, s.fps)
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.frame_count()).map(move |i| self.render_frame(i))
    }

    pub fn into_frames(self) -> Frames {
        Frames { renderer: self, next: 0 }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let s = &self.script;
        let vehicles = s
            .vehicles
            .iter()
            .enumerate()
            .map(|(id, v)| {
                let path = (0..self.frame_count())
                    .filter_map(|i| {
                        let t = i as f64 / s.fps;
                        vehicle_box(&s.road, v, t, s.height as f64).map(|(c, size)| TracePoint {
                            time: t,
                            x: c[0],
                            y: c[1],
                            size,
                        })
                    })
                    .collect();
                VehicleTruth {
                    vehicle_id: id,
                    first_visible: v.appear_time,
                    arrival: v.arrival_time(),
                    path,
                }
            })
            .collect();
        GroundTruth { vehicles }
    }
}

/// Owning frame iterator.
#[derive(Debug, Clone)]
pub struct Frames {
    renderer: Renderer,
    next: u64,
}

impl Iterator for Frames {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        (self.next < self.renderer.frame_count()).then(|| {
            self.next += 1;
            self.renderer.render_frame(self.next - 1)
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.renderer.frame_count() - self.next) as usize;
        (left, Some(left))
    }
}

impl Frames {
    pub fn into_stream(self) -> FrameStream {
        Box::new(self.map(Ok))
    }
}

/// Renders a script lazily, returning the frames and the analytic truth.
pub fn render(script: &SceneScript) -> Result<(Frames, GroundTruth), SimError> {
    let r = Renderer::new(script.clone())?;
    let truth = r.ground_truth();
    Ok((r.into_frames(), truth))
}

fn base_script(duration: f64, seed: u64) -> SceneScript {
    SceneScript {
        duration,
        fps: 8.0,
        width: 320,
        height: 240,
        road: RoadGeometry {
            entry: [150.0, 60.0],
            exit: [200.0, 240.0],
            perspective: 2.0,
        },
        vehicles: Vec::new(),
        distractors: Vec::new(),
        noise_std: 0.01,
        seed,
        texture_seed: default_texture_seed(),
    }
}

/// Named scenes on a shared 320x240, 8 fps site.
///
/// * `single-car`: one vehicle visible for 12 s, appearing at 10 s.
/// * `car-train`: 20 vehicles about 30 s apart, ~10 min in total.
/// * `late-appearer`: one vehicle entering at 80% of its path, 2 s visibility.
/// * `walker-distractor`: a lateral walker and swaying foliage, no vehicles.
/// * `quiet`: 60 s of noise only.
///
/// `seed` only changes the pixel noise; the scripted traffic is fixed.
pub fn preset(name: &str, seed: u64) -> Result<SceneScript, SimError> {
    let car = |appear_time: f64, speed: f64, base_size: f64, contrast: f64| VehicleSpec {
        appear_time,
        speed,
        base_size,
        contrast,
        entry_fraction: 0.0,
    };
    let script = match name {
        "single-car" => SceneScript {
            vehicles: vec![car(10.0, 1.0 / 12.0, 40.0, 0.3)],
            ..base_script(32.0, seed)
        },
        "car-train" => {
            let mut rng = ChaCha8Rng::seed_from_u64(0xca7);
            let mut t = 10.0;
            let mut vehicles = Vec::new();
            for _ in 0..20 {
                let visibility = rng.random_range(10.0..14.0);
                vehicles.push(car(t, 1.0 / visibility, rng.random_range(32.0..48.0), rng.random_range(0.22..0.32)));
                t += 30.0 + rng.random_range(-3.0..3.0);
            }
            let end = vehicles.iter().map(|v| v.arrival_time()).fold(0.0, f64::max) + 8.0;
            SceneScript {
                vehicles,
                ..base_script(end.max(610.0).ceil(), seed)
            }
        }
        "late-appearer" => SceneScript {
            vehicles: vec![VehicleSpec {
                entry_fraction: 0.8,
                ..car(12.0, 1.0 / 10.0, 40.0, 0.3)
            }],
            ..base_script(24.0, seed)
        },
        "walker-distractor" => SceneScript {
            distractors: vec![
                Distractor::LateralWalker {
                    start_time: 8.0,
                    speed: 12.0,
                    x0: -10.0,
                    y: 200.0,
                    size: 24.0,
                    contrast: 0.25,
                },
                Distractor::FoliagePatch {
                    center: [40.0, 60.0],
                    radius: 25.0,
                    amplitude: 1.5,
                    period: 2.5,
                },
            ],
            ..base_script(40.0, seed)
        },
        "quiet" => base_script(60.0, seed),
        other => return Err(SimError::UnknownPreset(other.to_string())),
    };
    Ok(script)
}

/// Writes frames as a PGM directory plus `truth.csv` and `scene.json`.
pub fn write_scene(script: &SceneScript, dir: &Path) -> Result<(usize, GroundTruth), SimError> {
    let (frames, truth) = render(script)?;
    let n = crate::frame_io::write_pgm_dir(&dir.join("frames"), frames)?;
    let truth_path = dir.join("truth.csv");
    let mut f = fs::File::create(&truth_path).map_err(|e| SimError::io(&truth_path, e))?;
    truth.write_csv(&mut f).map_err(|e| SimError::io(&truth_path, e))?;
    let scene_path = dir.join("scene.json");
    fs::write(&scene_path, script.to_json()).map_err(|e| SimError::io(&scene_path, e))?;
    Ok((n, truth))
}
