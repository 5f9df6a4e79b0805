use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crossgap::detector::{DetectorConfig, DetectorError, Indication};
use crossgap::eval::{self, EvalConfig, EvalError};
use crossgap::frame_io::{self, FrameError, FrameFormat, FrameStream, Source, StreamConfig};
use crossgap::model::{Model, ModelError};
use crossgap::peer::{LinkConfig, LinkRole, LinkStatus, PeerError, PeerLink};
use crossgap::pipeline::{self, OnlineDetector, PipelineError, TrainConfig};
use crossgap::simgen::{self, GroundTruth, Renderer, SceneScript, SimError};

const QUEUE_CAPACITY: usize = 16;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

fn io_err(what: &Path, e: io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", what.display()))
}

impl From<FrameError> for CliError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::ProbabilityOutOfRange(_) | DetectorError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Frame(e) => e.into(),
            PipelineError::Model(e) => e.into(),
            PipelineError::Detector(e) => e.into(),
            PipelineError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            PipelineError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnknownPreset(_) => CliError::Usage(e.to_string()),
            SimError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PeerError> for CliError {
    fn from(e: PeerError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Traffic-gap detection for a fixed roadside camera.
#[derive(Debug, Parser)]
#[command(name = "crossgap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn an influx map, sample points, pulse template and noise level.
    Train(TrainArgs),
    /// Run the online detector and write an event log.
    Detect(DetectArgs),
    /// Render a synthetic scene to a PGM directory plus ground truth.
    Simulate(SimulateArgs),
    /// Score an event log against ground truth.
    Eval(EvalArgs),
    /// Run the detector and share its indication with a peer node.
    Peer(PeerArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Pgm,
    Y4m,
    Raw8,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// PGM directory, Y4M or RAW8 file, or `-` for stdin.
    #[arg(long, conflicts_with = "preset")]
    input: Option<PathBuf>,
    /// Input format; inferred from the path when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Frame rate of the input.
    #[arg(long, default_value_t = 8.0)]
    fps: f64,
    /// RAW8 frame width.
    #[arg(long)]
    width: Option<usize>,
    /// RAW8 frame height.
    #[arg(long)]
    height: Option<usize>,
    /// Keep every k-th input frame.
    #[arg(long, default_value_t = 1)]
    decimate: usize,
    /// Render a simulator preset in memory instead of reading --input.
    #[arg(long)]
    preset: Option<String>,
    /// Override the preset duration, seconds.
    #[arg(long, requires = "preset")]
    duration: Option<f64>,
    /// Seed for preset rendering and sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Model file to write.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Ignore outbound (upward-moving) traffic.
    #[arg(long)]
    two_way: bool,
    /// Detector rate the template is built at, Hz.
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// Requested number of sample points.
    #[arg(long, default_value_t = 2000)]
    points: usize,
    /// Minimum training duration, seconds.
    #[arg(long, default_value_t = 600.0)]
    min_duration: f64,
    /// Also write the training activity trace as CSV.
    #[arg(long)]
    activity: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectorArgs {
    /// Trained model.
    #[arg(long)]
    model: PathBuf,
    /// False-alarm probability per decision.
    #[arg(long, default_value_t = 1e-3)]
    pfa: f64,
    /// Detector rate, Hz; defaults to the model's template rate.
    #[arg(long)]
    rate: Option<f64>,
    /// TRAFFIC is released once the correlator stays below this fraction of the threshold.
    #[arg(long, default_value_t = 0.7)]
    release: f64,
    /// Seconds the correlator must stay low before GAP.
    #[arg(long, default_value_t = 1.5)]
    hold: f64,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Event log CSV.
    #[arg(long, default_value = "events.csv")]
    out: PathBuf,
    /// Also write the per-frame activity trace as CSV.
    #[arg(long)]
    activity: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Preset name.
    #[arg(long, required_unless_present = "script", conflicts_with = "script")]
    preset: Option<String>,
    /// Scene script JSON.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the scene duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory; frames go to `<out>/frames`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Event log from `detect`.
    #[arg(long)]
    events: PathBuf,
    /// Ground-truth CSV from `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
    /// Onsets may precede first visibility by this many seconds.
    #[arg(long, default_value_t = 2.0)]
    slack: f64,
    /// Histogram bin width, seconds.
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
    /// Accept an empty truth file and only count false alarms.
    #[arg(long)]
    allow_empty_truth: bool,
}

#[derive(Debug, Args)]
struct PeerArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Address to accept the peer on.
    #[arg(long, conflicts_with = "connect", required_unless_present = "connect")]
    listen: Option<String>,
    /// Address of a listening peer.
    #[arg(long)]
    connect: Option<String>,
    /// Seconds to keep the link up after the input ends.
    #[arg(long, default_value_t = 0.0)]
    linger: f64,
    /// Process frames as fast as possible instead of at their timestamps.
    #[arg(long)]
    no_pace: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSGAP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Peer(a) => cmd_peer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crossgap: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Where frames come from: a file or directory, or a preset rendered in memory.
enum Input {
    Stream(StreamConfig),
    Scene(SceneScript, usize),
}

impl Input {
    fn from_args(a: &InputArgs) -> Result<Self, CliError> {
        if a.decimate == 0 {
            return Err(CliError::Usage("--decimate must be >= 1".into()));
        }
        if let Some(name) = &a.preset {
            let mut script = simgen::preset(name, a.seed)?;
            if let Some(d) = a.duration {
                script.duration = d;
            }
            script.validate()?;
            return Ok(Input::Scene(script, a.decimate));
        }
        let Some(path) = &a.input else {
            return Err(CliError::Usage("one of --input or --preset is required".into()));
        };
        let source = if path.as_os_str() == "-" {
            Source::Stdin
        } else {
            Source::Path(path.clone())
        };
        let format = match a.format {
            Some(FormatArg::Pgm) => FrameFormat::PgmDir,
            Some(FormatArg::Y4m) => FrameFormat::Y4m,
            Some(FormatArg::Raw8) => match (a.width, a.height) {
                (Some(width), Some(height)) => FrameFormat::Raw8 { width, height },
                _ => return Err(CliError::Usage("--format raw8 needs --width and --height".into())),
            },
            None if path.is_dir() => FrameFormat::PgmDir,
            None if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m")) => FrameFormat::Y4m,
            None => return Err(CliError::Usage(format!("cannot infer the format of {}; pass --format", path.display()))),
        };
        let mut cfg = StreamConfig::new(source, format, a.fps);
        cfg.decimation = a.decimate;
        cfg.validate()?;
        Ok(Input::Stream(cfg))
    }

    fn open(&self) -> Result<FrameStream, FrameError> {
        match self {
            Input::Stream(cfg) => frame_io::open_stream(cfg),
            Input::Scene(script, k) => {
                let frames = Renderer::new(script.clone())
                    .map_err(|e| FrameError::InvalidConfig(e.to_string()))?
                    .into_frames();
                Ok(frame_io::decimate(frames.into_stream(), *k))
            }
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let input = Input::from_args(&a.input)?;
    let cfg = TrainConfig {
        two_way: a.two_way,
        seed: a.input.seed,
        rate: a.rate,
        sample_count: a.points,
        min_duration: a.min_duration,
        ..TrainConfig::default()
    };
    let out = pipeline::train(|| input.open(), &cfg)?;
    out.model.save(&a.out)?;
    if let Some(path) = &a.activity {
        let mut w = create(path)?;
        writeln!(w, "timestamp,activity").map_err(|e| io_err(path, e))?;
        for s in &out.activity.samples {
            writeln!(w, "{},{}", s.timestamp, s.value).map_err(|e| io_err(path, e))?;
        }
        finish(w, path)?;
    }
    println!("{}", out.summary);
    println!("model           {}", a.out.display());
    Ok(())
}

/// Validates the detector flags; the rate falls back to the model's once it is loaded.
fn detector_config(a: &DetectorArgs, model: Option<&Model>) -> Result<DetectorConfig, CliError> {
    let cfg = DetectorConfig {
        p_fa: a.pfa,
        rate: a.rate.or(model.map(|m| m.rate)).unwrap_or(DetectorConfig::default().rate),
        release_ratio: a.release,
        hold: a.hold,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_state(t: f64, label: &str, s: Indication) {
    println!("t={t:.3} {label}={s}");
}

fn cmd_detect(a: DetectArgs) -> Result<(), CliError> {
    let input = Input::from_args(&a.input)?;
    detector_config(&a.detector, None)?;
    let model = Model::load(&a.detector.model)?;
    let cfg = detector_config(&a.detector, Some(&model))?;
    let (rx, reader) = frame_io::spawn_reader(input.open()?, QUEUE_CAPACITY);
    let started = Instant::now();
    let run = pipeline::detect(rx, &model, cfg, |s| print_state(s.timestamp, "STATE", s.state));
    let _ = reader.join();
    let run = run?;
    let secs = started.elapsed().as_secs_f64();
    info!("{} frames in {secs:.2} s ({:.1} fps)", run.frames, run.frames as f64 / secs.max(1e-9));
    let mut w = create(&a.out)?;
    run.write_events(&mut w).map_err(|e| io_err(&a.out, e))?;
    finish(w, &a.out)?;
    if let Some(path) = &a.activity {
        let mut w = create(path)?;
        run.write_activity(&mut w).map_err(|e| io_err(path, e))?;
        finish(w, path)?;
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut script = match (&a.preset, &a.script) {
        (Some(name), _) => simgen::preset(name, a.seed)?,
        (None, Some(path)) => SceneScript::load(path)?,
        (None, None) => unreachable!("clap requires one of --preset or --script"),
    };
    if let Some(d) = a.duration {
        script.duration = d;
    }
    let (frames, truth) = simgen::write_scene(&script, &a.out)?;
    println!("frames          {frames} ({})", a.out.join("frames").display());
    println!("vehicles        {} ({})", truth.vehicles.len(), a.out.join("truth.csv").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = EvalConfig {
        slack: a.slack,
        bin_width: a.bin_width,
        allow_empty_truth: a.allow_empty_truth,
        ..EvalConfig::default()
    };
    let events = eval::read_events(File::open(&a.events).map_err(|e| io_err(&a.events, e))?)?;
    let truth = GroundTruth::read_csv(File::open(&a.truth).map_err(|e| io_err(&a.truth, e))?)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.truth.display())))?;
    let report = eval::evaluate(&events, &truth, &cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> io::Result<()>| -> Result<(), CliError> {
        let path = a.out.join(name);
        let mut w = create(&path)?;
        f(&mut w).map_err(|e| io_err(&path, e))?;
        finish(w, &path)
    };
    write("histogram.csv", &|w| report.write_histogram(w))?;
    write("roc.csv", &|w| report.write_roc(w))?;
    write("detections.csv", &|w| report.write_detections(w))?;
    write("report.json", &|w| w.write_all(report.to_json().as_bytes()))?;
    println!("{report}");
    Ok(())
}

fn cmd_peer(a: PeerArgs) -> Result<(), CliError> {
    let input = Input::from_args(&a.input)?;
    detector_config(&a.detector, None)?;
    let model = Model::load(&a.detector.model)?;
    let cfg = detector_config(&a.detector, Some(&model))?;
    let mut det = OnlineDetector::new(&model, cfg)?;
    let role = match (&a.listen, &a.connect) {
        (Some(addr), _) => LinkRole::listen(addr)?,
        (None, Some(addr)) => {
            let sa = addr
                .to_socket_addrs()
                .map_err(|e| CliError::Usage(format!("{addr}: {e}")))?
                .next()
                .ok_or_else(|| CliError::Usage(format!("{addr}: no address")))?;
            LinkRole::Connect(sa)
        }
        (None, None) => unreachable!("clap requires one of --listen or --connect"),
    };
    let link = PeerLink::spawn(role, LinkConfig::default())?;
    let (rx, reader) = frame_io::spawn_reader(input.open()?, QUEUE_CAPACITY);

    let started = Instant::now();
    let mut first_ts: Option<f64> = None;
    let mut last_local: Option<Indication> = None;
    let mut last_merged: Option<Indication> = None;
    let mut observe = |link: &PeerLink| -> Result<(), CliError> {
        if let LinkStatus::Failed(why) = link.status() {
            return Err(CliError::Runtime(format!("peer link failed: {why}")));
        }
        let m = link.merged();
        if last_merged != Some(m.state) {
            print_state(started.elapsed().as_secs_f64(), "MERGED", m.state);
            last_merged = Some(m.state);
        }
        Ok(())
    };

    let mut result = Ok(());
    for frame in rx {
        let frame = match frame {
            Ok(f) => f,
            Err(e) => {
                result = Err(e.into());
                break;
            }
        };
        if !a.no_pace {
            let t0 = *first_ts.get_or_insert(frame.timestamp);
            let due = Duration::from_secs_f64((frame.timestamp - t0).max(0.0));
            while started.elapsed() < due {
                if let Err(e) = observe(&link) {
                    result = Err(e);
                    break;
                }
                thread::sleep((due - started.elapsed()).min(Duration::from_millis(50)));
            }
            if result.is_err() {
                break;
            }
        }
        let out = match det.push_frame(&frame) {
            Ok(o) => o,
            Err(e) => {
                result = Err(e.into());
                break;
            }
        };
        for s in &out.states {
            if last_local != Some(s.state) {
                print_state(s.timestamp, "STATE", s.state);
                last_local = Some(s.state);
            }
        }
        if let Some(s) = out.states.last() {
            link.publish(s.state, s.margin.unwrap_or(f64::NAN) as f32);
        }
        if let Err(e) = observe(&link) {
            result = Err(e);
            break;
        }
    }
    if result.is_ok() {
        let end = Instant::now() + Duration::from_secs_f64(a.linger.max(0.0));
        while Instant::now() < end {
            if let Err(e) = observe(&link) {
                result = Err(e);
                break;
            }
            thread::sleep(Duration::from_millis(50));
        }
    }
    if link.resets() > 0 {
        warn!("{} peer connections dropped for protocol violations", link.resets());
    }
    link.shutdown();
    drop(reader);
    let _ = io::stdout().flush();
    result
}
