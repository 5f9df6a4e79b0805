mod common;

use std::fs;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use crossgap::detector::Indication;
use crossgap::peer::{PeerMessage, MESSAGE_LEN, WIRE_VERSION};

fn crossgap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossgap"))
        .args(args)
        .env("CROSSGAP_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_model(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("model.json");
    common::synthetic_model(320, 240, 300, 2.0).save(&path).unwrap();
    path
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = crossgap(&["simulate", "--preset", "motorway", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
    assert_eq!(code(&crossgap(&["simulate"])), 2);
    assert_eq!(code(&crossgap(&["frobnicate"])), 2);
    let o = crossgap(&["detect", "--input", p(dir.path()), "--model", "m.json", "--pfa", "0.9"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_writes_frames_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let quiet = dir.path().join("quiet");
    assert_eq!(code(&crossgap(&["simulate", "--preset", "quiet", "--out", p(&quiet)])), 0);
    assert_eq!(fs::read_dir(quiet.join("frames")).unwrap().count(), 480);
    assert_eq!(fs::read_to_string(quiet.join("truth.csv")).unwrap(), "vehicle_id,first_visible,arrival\n");

    let car = dir.path().join("car");
    assert_eq!(code(&crossgap(&["simulate", "--preset", "single-car", "--seed", "4", "--out", p(&car)])), 0);
    let truth = fs::read_to_string(car.join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 2, "{truth}");

    // a scene script is accepted in place of a preset
    let again = dir.path().join("again");
    let script = car.join("scene.json");
    assert_eq!(code(&crossgap(&["simulate", "--script", p(&script), "--out", p(&again)])), 0);
    assert_eq!(fs::read_to_string(again.join("truth.csv")).unwrap(), truth);
}

#[test]
fn eval_scores_hand_written_logs() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.csv");
    let truth = dir.path().join("truth.csv");
    fs::write(
        &events,
        "timestamp,state,correlator,gamma,margin\n5,GAP,0.1,1,-0.9\n10,TRAFFIC,1.5,1,0.5\n20,GAP,0.1,1,-0.9\n30,GAP,0.1,1,-0.9\n",
    )
    .unwrap();
    fs::write(&truth, "vehicle_id,first_visible,arrival\n0,9,18\n").unwrap();
    let rep = dir.path().join("report");
    let o = crossgap(&["eval", "--events", p(&events), "--truth", p(&truth), "--out", p(&rep)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let det = fs::read_to_string(rep.join("detections.csv")).unwrap();
    assert_eq!(det.lines().nth(1).unwrap().split(',').collect::<Vec<_>>()[..4], ["0", "10", "18", "8"]);
    for f in ["histogram.csv", "roc.csv"] {
        let text = fs::read_to_string(rep.join(f)).unwrap();
        assert!(text.lines().next().unwrap().contains(','), "{f} has a header");
    }

    // no onsets: one miss
    fs::write(&events, "timestamp,state,correlator,gamma,margin\n5,GAP,0.1,1,-0.9\n30,GAP,0.1,1,-0.9\n").unwrap();
    let o = crossgap(&["eval", "--events", p(&events), "--truth", p(&truth), "--out", p(&rep)]);
    assert_eq!(code(&o), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["missed"].as_array().unwrap().len(), 1);

    // empty truth is a data error unless allowed
    fs::write(&truth, "vehicle_id,first_visible,arrival\n").unwrap();
    assert_eq!(code(&crossgap(&["eval", "--events", p(&events), "--truth", p(&truth), "--out", p(&rep)])), 3);
    let o = crossgap(&["eval", "--events", p(&events), "--truth", p(&truth), "--out", p(&rep), "--allow-empty-truth"]);
    assert_eq!(code(&o), 0);

    fs::write(&events, "when,what\n1,2\n").unwrap();
    assert_eq!(code(&crossgap(&["eval", "--events", p(&events), "--truth", p(&truth), "--out", p(&rep)])), 3);
}

#[test]
fn detect_outputs_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("quiet");
    assert_eq!(code(&crossgap(&["simulate", "--preset", "quiet", "--duration", "12", "--out", p(&scene)])), 0);
    let frames = scene.join("frames");
    let model = write_model(dir.path());

    let ev1 = dir.path().join("ev1.csv");
    let o = crossgap(&["detect", "--input", p(&frames), "--model", p(&model), "--out", p(&ev1)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.first().map(|s| s.ends_with("STATE=TRAFFIC")), Some(true), "{lines:?}");
    assert_eq!(lines.last().map(|s| s.ends_with("STATE=GAP")), Some(true), "{lines:?}");
    let log1 = fs::read_to_string(&ev1).unwrap();
    assert!(log1.starts_with("timestamp,state,correlator,gamma,margin\n"));

    let ev2 = dir.path().join("ev2.csv");
    assert_eq!(code(&crossgap(&["detect", "--input", p(&frames), "--model", p(&model), "--out", p(&ev2)])), 0);
    assert_eq!(fs::read_to_string(&ev2).unwrap(), log1);

    // missing model file: runtime; malformed model: data
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&crossgap(&["detect", "--input", p(&frames), "--model", p(&missing)])), 4);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"format_version\": 1, \"width\": 3}").unwrap();
    assert_eq!(code(&crossgap(&["detect", "--input", p(&frames), "--model", p(&bad)])), 3);

    // model for another frame size
    let small = dir.path().join("small.json");
    common::synthetic_model(160, 120, 50, 2.0).save(&small).unwrap();
    let o = crossgap(&["detect", "--input", p(&frames), "--model", p(&small), "--out", p(&ev2)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model expects"));

    // too little training data
    let o = crossgap(&["train", "--input", p(&frames), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn raw8_needs_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("frames.raw");
    fs::write(&raw, vec![128u8; 64 * 48 * 3]).unwrap();
    let model = write_model(dir.path());
    assert_eq!(code(&crossgap(&["detect", "--input", p(&raw), "--format", "raw8", "--model", p(&model)])), 2);
    // dimensions given but the model is 320x240
    let o = crossgap(&[
        "detect", "--input", p(&raw), "--format", "raw8", "--width", "64", "--height", "48", "--model", p(&model),
        "--out", p(&dir.path().join("e.csv")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn two_peers_reach_merged_gap() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path());
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let addr = format!("127.0.0.1:{port}");
    let spawn = |role: &str, linger: &str| {
        Command::new(env!("CARGO_BIN_EXE_crossgap"))
            .args(["peer", role, &addr, "--preset", "quiet", "--duration", "10", "--model", p(&model), "--linger", linger])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap()
    };
    let a = spawn("--listen", "0.5");
    thread::sleep(Duration::from_millis(200));
    let b = spawn("--connect", "0.5");
    let (oa, ob) = (a.wait_with_output().unwrap(), b.wait_with_output().unwrap());
    for o in [&oa, &ob] {
        assert_eq!(code(o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let out = stdout(o);
        assert!(out.contains("MERGED=GAP"), "{out}");
        assert!(out.lines().next().unwrap().ends_with("MERGED=TRAFFIC"), "{out}");
    }
}

#[test]
fn peer_with_wrong_protocol_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let model = write_model(dir.path());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let m = PeerMessage {
            node_id: [1; 16],
            seq: 1,
            state: Indication::Gap,
            margin: 0.0,
            timestamp_ms: 0,
        };
        let _ = s.write_all(&m.encode_with_version(WIRE_VERSION + 1));
        let mut buf = [0u8; MESSAGE_LEN];
        let _ = s.read(&mut buf);
        thread::sleep(Duration::from_millis(500));
    });
    let o = crossgap(&["peer", "--connect", &addr, "--preset", "quiet", "--duration", "10", "--model", p(&model)]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"), "{}", String::from_utf8_lossy(&o.stderr));
    server.join().unwrap();
}
