//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::io::Write as _;
use std::net::TcpStream;
use std::thread::sleep;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{approach_pulse, radial_map, shifted_frame, synthetic_model};
use crossgap::detector::{correlate, pd_for, q_func, q_inv, threshold_for, DetectorConfig, Indication};
use crossgap::eval::{evaluate, EvalConfig, EvalReport, EventRow};
use crossgap::frame_io::decimate;
use crossgap::influx::{locate_pfa, InfluxAccumulator, InfluxMap};
use crossgap::model::Model;
use crossgap::optflow::{dense_flow, DenseFlowField, FlowVector, GridGeometry, LkParams};
use crossgap::peer::{merge, LinkConfig, LinkRole, Observation, PeerLink, PeerMessage};
use crossgap::pipeline::{detect, train, OnlineDetector, TrainConfig};
use crossgap::simgen::{self, Renderer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit: Option<f64>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let secs = start.elapsed().as_secs_f64();
    o.detail = format!("{}; {secs:.2} s", o.detail);
    if let Some(limit) = limit {
        if secs >= limit {
            o.pass = false;
            o.detail.push_str(&format!(" (limit {limit} s)"));
        }
    }
    o
}

// 1 -----------------------------------------------------------------------

fn neumaier_dot(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (mut sum, mut c, mut abs) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        abs += p.abs();
        let t = sum + p;
        if sum.abs() >= p.abs() {
            c += (sum - t) + p;
        } else {
            c += (p - t) + sum;
        }
        sum = t;
    }
    (sum + c, abs)
}

fn matched_filter_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(2..400);
        let w: Vec<f64> = (0..len).map(|_| n.sample(&mut rng) * 3.0).collect();
        let s: Vec<f64> = (0..len).map(|_| n.sample(&mut rng)).collect();
        let y = correlate(&w, &s).unwrap();
        let (oracle, scale) = neumaier_dot(&w, &s);
        worst = worst.max((y - oracle).abs() / scale.max(f64::MIN_POSITIVE));
    }
    outcome(worst <= 1e-12, format!("max relative error {worst:.2e} (tol 1e-12)"))
}

// 2 -----------------------------------------------------------------------

/// Upper tail of the standard normal by composite Simpson on [x, 14].
fn q_oracle(x: f64) -> f64 {
    let (a, b) = (x, 14.0);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(a) + phi(b);
    for i in 1..n {
        s += phi(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn q_function_accuracy() -> Outcome {
    let mut worst_q: f64 = 0.0;
    let mut worst_inv: f64 = 0.0;
    for i in 0..=1200 {
        let x = -6.0 + 0.01 * i as f64;
        worst_q = worst_q.max((q_func(x) - q_oracle(x)).abs());
        worst_inv = worst_inv.max((q_inv(q_func(x)).unwrap() - x).abs());
    }
    let mut worst_p: f64 = 0.0;
    for k in 0..=400 {
        let p = 10f64.powf(-12.0 + 12.0 * k as f64 / 400.0) * 0.999;
        worst_p = worst_p.max((q_func(q_inv(p).unwrap()) - p).abs() / p);
    }
    outcome(
        worst_q <= 1e-7 && worst_inv <= 1e-6 && worst_p <= 1e-6,
        format!("|Q - oracle| {worst_q:.1e}, |Qinv(Q(x)) - x| {worst_inv:.1e}, rel |Q(Qinv(p)) - p| {worst_p:.1e}"),
    )
}

// 3, 4 --------------------------------------------------------------------

fn false_alarm_calibration() -> Outcome {
    let template = approach_pulse(30, 1.0);
    let energy: f64 = template.iter().map(|v| v * v).sum();
    let (p_fa, sigma) = (1e-2, 0.7);
    let gamma = threshold_for(p_fa, sigma, energy).unwrap().gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = Normal::new(0.0, sigma).unwrap();
    let windows = 100_000;
    let mut buf = vec![0.0; template.len()];
    let mut hits = 0;
    for _ in 0..windows {
        buf.iter_mut().for_each(|v| *v = n.sample(&mut rng));
        hits += (correlate(&buf, &template).unwrap() > gamma) as usize;
    }
    let rate = hits as f64 / windows as f64;
    outcome(
        (p_fa / 3.0..=3.0 * p_fa).contains(&rate),
        format!("empirical {rate:.5} for p_fa {p_fa} over {windows} windows"),
    )
}

fn pd_closed_form() -> Outcome {
    let shape = approach_pulse(30, 1.0);
    let e0: f64 = shape.iter().map(|v| v * v).sum();
    let (p_fa, sigma) = (1e-3, 1.0);
    let n = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut parts = Vec::new();
    let mut pass = true;
    for snr in [1.0, 3.0, 5.0] {
        let k = snr * sigma / e0.sqrt();
        let s: Vec<f64> = shape.iter().map(|v| v * k).collect();
        let energy: f64 = s.iter().map(|v| v * v).sum();
        let gamma = threshold_for(p_fa, sigma, energy).unwrap().gamma;
        let trials = 100_000;
        let mut buf = vec![0.0; s.len()];
        let mut hits = 0;
        for _ in 0..trials {
            buf.iter_mut().zip(&s).for_each(|(b, v)| *b = v + n.sample(&mut rng));
            hits += (correlate(&buf, &s).unwrap() > gamma) as usize;
        }
        let emp = hits as f64 / trials as f64;
        let pred = pd_for(p_fa, sigma, energy).unwrap();
        pass &= (emp - pred).abs() <= 0.01;
        parts.push(format!("snr {snr}: {emp:.4} vs {pred:.4}"));
    }
    outcome(pass, parts.join(", "))
}

// 5, 6, 7 -----------------------------------------------------------------

fn optical_flow_accuracy() -> Outcome {
    let (w, h) = (160, 120);
    let params = LkParams::default();
    let a = shifted_frame(w, h, 0.0, 0.0, 0);
    let mut parts = Vec::new();
    let mut pass = true;
    for (dx, dy) in [(1.0, 0.0), (1.0, 1.0)] {
        let b = shifted_frame(w, h, dx, dy, 1);
        let f = dense_flow(&a, &b, 8, &params).unwrap();
        let g = f.geometry;
        let margin = params.margin() as f64 + 1.0;
        let mut se = 0.0;
        let mut count = 0;
        for row in 0..g.rows {
            for col in 0..g.cols {
                let [x, y] = g.node(col, row);
                let interior = x >= margin && y >= margin && x <= (w - 1) as f64 - margin && y <= (h - 1) as f64 - margin;
                let i = row * g.cols + col;
                if interior && f.valid[i] {
                    let v = f.vectors[i];
                    se += (v.dx - dx).powi(2) + (v.dy - dy).powi(2);
                    count += 1;
                }
            }
        }
        let rms = (se / count.max(1) as f64).sqrt();
        pass &= count > 100 && rms <= 0.2;
        parts.push(format!("({dx},{dy}): rms {rms:.4} px over {count} points"));
    }
    outcome(pass, parts.join(", "))
}

fn influx_training_exactness() -> Outcome {
    let g = GridGeometry::new(320, 240, 8, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vectors: Vec<FlowVector> = (0..g.len())
        .map(|_| FlowVector::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
        .collect();
    let field = DenseFlowField {
        geometry: g,
        vectors: vectors.clone(),
        valid: vec![true; g.len()],
        span: (0, 1),
    };
    let mut acc = InfluxAccumulator::new(g);
    for _ in 0..100 {
        acc.accumulate(&field).unwrap();
    }
    let mut map: InfluxMap = acc.to_map().unwrap();
    let err = map
        .vectors
        .iter()
        .zip(&vectors)
        .map(|(a, b)| (a.dx - b.dx).abs().max((a.dy - b.dy).abs()))
        .fold(0.0, f64::max);
    map.nullify_outbound();
    let upward = map.vectors.iter().filter(|v| v.dy < 0.0).count();
    outcome(
        err <= 1e-9 && upward == 0,
        format!("max deviation {err:.1e} after 100 frames, {upward} cells with dy < 0 after nullification"),
    )
}

fn pfa_localization() -> Outcome {
    let g = GridGeometry::new(320, 240, 8, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let src = [rng.random_range(30.0..290.0), rng.random_range(20.0..200.0)];
        let p = locate_pfa(&radial_map(g, src, 0.3, 0.01), 0.05).unwrap();
        worst = worst.max((p[0] - src[0]).hypot(p[1] - src[1]));
    }
    outcome(worst <= g.stride as f64, format!("worst error {worst:.2} px over 20 sources (stride {})", g.stride))
}

// 8 - 11 ------------------------------------------------------------------

fn trained_model() -> Model {
    let script = simgen::preset("car-train", 0).unwrap();
    let out = train(
        || Ok(Renderer::new(script.clone()).unwrap().into_frames().into_stream()),
        &TrainConfig::default(),
    )
    .expect("training on car-train");
    println!("    trained on car-train: {}", out.summary.to_string().replace('\n', "; "));
    out.model
}

fn detector_cfg(model: &Model) -> DetectorConfig {
    DetectorConfig {
        p_fa: 1e-3,
        rate: model.rate,
        ..DetectorConfig::default()
    }
}

/// Detects on a preset (optionally decimated) and scores it against truth.
fn scored(model: &Model, preset: &str, seed: u64, decimation: usize, duration: Option<f64>) -> EvalReport {
    let mut script = simgen::preset(preset, seed).unwrap();
    if let Some(d) = duration {
        script.duration = d;
    }
    let r = Renderer::new(script).unwrap();
    let truth = r.ground_truth();
    let frames = decimate(r.into_frames().into_stream(), decimation);
    let run = detect(frames, model, detector_cfg(model), |_| {}).unwrap();
    let events: Vec<EventRow> = run
        .states
        .iter()
        .map(|s| EventRow {
            timestamp: s.timestamp,
            state: s.state,
            correlator: s.correlator.unwrap_or(f64::NAN),
            gamma: run.gamma,
            margin: s.margin.unwrap_or(f64::NAN),
        })
        .collect();
    let cfg = EvalConfig {
        allow_empty_truth: true,
        ..EvalConfig::default()
    };
    evaluate(&events, &truth, &cfg).unwrap()
}

fn warning_summary(model: &Model, decimation: usize, runs: u64) -> (usize, usize, Vec<f64>) {
    let (mut good, mut missed, mut warnings) = (0, 0, Vec::new());
    for seed in 0..runs {
        let rep = scored(model, "single-car", seed, decimation, None);
        missed += rep.miss_count();
        if rep.warnings().iter().any(|&w| w >= 7.0) {
            good += 1;
        }
        warnings.extend(rep.warnings());
    }
    (good, missed, warnings)
}

fn spread(v: &[f64]) -> String {
    if v.is_empty() {
        return "no detections".into();
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    format!("warning mean {mean:.2} s, range {lo:.2}..{hi:.2} s")
}

fn end_to_end_warning(model: &Model) -> Outcome {
    let runs = 50;
    let (good, missed, w) = warning_summary(model, 1, runs);
    outcome(
        good as f64 >= 0.9 * runs as f64 && missed == 0,
        format!("{good}/{runs} runs warn >= 7 s, {missed} missed; {}", spread(&w)),
    )
}

fn late_appearer(model: &Model) -> Outcome {
    let runs = 20;
    let mut before = 0;
    let mut w = Vec::new();
    for seed in 0..runs {
        let rep = scored(model, "late-appearer", seed, 1, None);
        before += rep.detection_count();
        w.extend(rep.warnings());
    }
    outcome(
        before as f64 >= 0.8 * runs as f64,
        format!("{before}/{runs} onsets before arrival; {}", spread(&w)),
    )
}

fn quiet_specificity(model: &Model) -> Outcome {
    let rep = scored(model, "quiet", 10, 1, Some(1800.0));
    outcome(
        rep.false_alarms <= 2,
        format!("{} TRAFFIC episodes in {:.0} s of quiet scene", rep.false_alarms, rep.duration),
    )
}

fn throughput(model: &Model) -> Outcome {
    // 1280x720 frames, 2000 sample points, detect loop only
    let hd = synthetic_model(1280, 720, 2000, 1.0);
    let mut script = simgen::preset("single-car", 0).unwrap();
    script.width = 1280;
    script.height = 720;
    script.road.entry = [600.0, 180.0];
    script.road.exit = [800.0, 720.0];
    script.vehicles[0].base_size = 160.0;
    let r = Renderer::new(script).unwrap();
    let frames: Vec<_> = (76..156).map(|i| r.render_frame(i)).collect();
    let mut det = OnlineDetector::new(&hd, detector_cfg(&hd)).unwrap();
    let start = Instant::now();
    for f in &frames {
        det.push_frame(f).unwrap();
    }
    let fps = frames.len() as f64 / start.elapsed().as_secs_f64();

    let runs = 50;
    let (good, missed, w) = warning_summary(model, 4, runs);
    outcome(
        fps >= 8.0 && good as f64 >= 0.85 * runs as f64,
        format!(
            "{fps:.1} fps at 1280x720 with {} points; at 2 fps input {good}/{runs} runs warn >= 7 s, {missed} missed; {}",
            hd.sample_points.len(),
            spread(&w)
        ),
    )
}

// 12 ----------------------------------------------------------------------

fn wait(limit: Duration, mut f: impl FnMut() -> bool) -> Option<Duration> {
    let start = Instant::now();
    while start.elapsed() < limit {
        if f() {
            return Some(start.elapsed());
        }
        sleep(Duration::from_millis(1));
    }
    None
}

fn random_merge_sequences() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let limit = 2.0;
    let mut violations = 0;
    for _ in 0..1000 {
        // (state, time of last update) per side; remote may be disconnected
        let mut local: Option<(Indication, f64)> = None;
        let mut remote: Option<(Indication, f64)> = None;
        let mut t = 0.0;
        for _ in 0..50 {
            t += rng.random_range(0.0..1.5);
            let pick = |rng: &mut ChaCha8Rng| if rng.random_bool(0.6) { Indication::Gap } else { Indication::Traffic };
            match rng.random_range(0..5) {
                0 | 1 => local = Some((pick(&mut rng), t)),
                2 | 3 => remote = Some((pick(&mut rng), t)),
                _ => remote = None,
            }
            let now = t + rng.random_range(0.0..3.0);
            let obs = |s: Option<(Indication, f64)>| s.map(|(state, at)| Observation { state, age: now - at });
            let l = obs(local).unwrap_or(Observation {
                state: Indication::Traffic,
                age: f64::INFINITY,
            });
            let m = merge(l, obs(remote), limit);
            if m.state == Indication::Gap {
                let ok = matches!(local, Some((Indication::Gap, at)) if now - at < limit)
                    && matches!(remote, Some((Indication::Gap, at)) if now - at < limit);
                violations += !ok as usize;
            }
        }
    }
    violations
}

fn peer_fail_safety() -> Outcome {
    let role = LinkRole::listen("127.0.0.1:0").unwrap();
    let LinkRole::Listen(l) = &role else { unreachable!() };
    let addr = l.local_addr().unwrap();
    let a = PeerLink::spawn(role, LinkConfig::default()).unwrap();
    let b = PeerLink::spawn(LinkRole::Connect(addr), LinkConfig::default()).unwrap();
    // let the connection come up with both sides at TRAFFIC
    a.publish(Indication::Traffic, -1.0);
    b.publish(Indication::Traffic, -1.0);
    let connected = wait(Duration::from_secs(3), || a.remote().is_some() && b.remote().is_some()).is_some();

    let start = Instant::now();
    a.publish(Indication::Gap, 1.0);
    b.publish(Indication::Gap, 1.0);
    let gap = wait(Duration::from_secs(2), || {
        a.merged().state == Indication::Gap && b.merged().state == Indication::Gap
    })
    .map(|_| start.elapsed());

    // clean shutdown of the remote
    b.shutdown();
    let died = Instant::now();
    let dead = wait(Duration::from_secs(4), || {
        a.publish(Indication::Gap, 1.0);
        a.merged().state == Indication::Traffic
    })
    .map(|_| died.elapsed());
    a.shutdown();

    // a remote that hangs: connection stays open, messages stop
    let role = LinkRole::listen("127.0.0.1:0").unwrap();
    let LinkRole::Listen(l) = &role else { unreachable!() };
    let addr = l.local_addr().unwrap();
    let a = PeerLink::spawn(role, LinkConfig::default()).unwrap();
    let mut s = TcpStream::connect(addr).unwrap();
    let mut seq = 0;
    let mut send = |s: &mut TcpStream| {
        seq += 1;
        let m = PeerMessage {
            node_id: [5; 16],
            seq,
            state: Indication::Gap,
            margin: 1.0,
            timestamp_ms: 0,
        };
        s.write_all(&m.encode()).unwrap();
    };
    let until = Instant::now() + Duration::from_millis(600);
    while Instant::now() < until {
        a.publish(Indication::Gap, 1.0);
        send(&mut s);
        sleep(Duration::from_millis(100));
    }
    let was_gap = a.merged().state == Indication::Gap;
    let hung = Instant::now();
    let stale = wait(Duration::from_secs(4), || {
        a.publish(Indication::Gap, 1.0);
        a.merged().state == Indication::Traffic
    })
    .map(|_| hung.elapsed());
    drop(s);
    a.shutdown();

    let violations = random_merge_sequences();
    let ms = |d: Option<Duration>| d.map_or("never".to_string(), |d| format!("{} ms", d.as_millis()));
    let pass = connected
        && gap.is_some_and(|d| d <= Duration::from_millis(400))
        && dead.is_some_and(|d| d <= Duration::from_millis(2500))
        && was_gap
        && stale.is_some_and(|d| d <= Duration::from_millis(2500))
        && violations == 0;
    outcome(
        pass,
        format!(
            "merged GAP after {}, TRAFFIC {} after remote shutdown and {} after remote hang; {violations} violations in 1000 sequences",
            ms(gap),
            ms(dead),
            ms(stale)
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n:2} {:4}  {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        std::io::stdout().flush().unwrap();
        failed += !o.pass as usize;
    };
    report(1, "matched-filter exactness", timed(Some(1.0), matched_filter_exactness));
    report(2, "Q-function accuracy", timed(Some(5.0), q_function_accuracy));
    report(3, "false-alarm calibration", timed(Some(30.0), false_alarm_calibration));
    report(4, "P_D closed form", timed(Some(60.0), pd_closed_form));
    report(5, "optical-flow accuracy", timed(Some(10.0), optical_flow_accuracy));
    report(6, "influx training exactness", timed(None, influx_training_exactness));
    report(7, "PFA localization", timed(None, pfa_localization));
    let model = trained_model();
    report(8, "end-to-end warning time", timed(Some(600.0), || end_to_end_warning(&model)));
    report(9, "late-appearer", timed(None, || late_appearer(&model)));
    report(10, "quiet-scene specificity", timed(None, || quiet_specificity(&model)));
    report(11, "throughput and 2 fps input", timed(None, || throughput(&model)));
    report(12, "peer fail-safety", timed(None, peer_fail_safety));
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
