//! Grayscale frame ingestion: PGM directories, Y4M files and headerless RAW8
//! streams, with decimation and a bounded producer queue.
//!
//! All inputs are 8-bit; luma is stored as `byte / 255` in `[0, 1]`.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread::{self, JoinHandle};

use thiserror::Error;

/// Default capacity of the producer/consumer frame queue.
pub const DEFAULT_QUEUE_CAPACITY: usize = 8;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed header in {0}: {1}")]
    MalformedHeader(String, String),
    #[error("frame {index} is {got_w}x{got_h}, stream is {want_w}x{want_h}")]
    DimensionMismatch {
        index: u64,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("truncated frame data in {0}")]
    Truncated(String),
    #[error("invalid stream configuration: {0}")]
    InvalidConfig(String),
    #[error("source not found or empty: {0}")]
    EmptySource(String),
}

impl FrameError {
    fn io(path: impl Into<String>, source: io::Error) -> Self {
        FrameError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One timestamped luminance image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub luma: Vec<f32>,
    /// Ordinal in the original (undecimated) stream.
    pub index: u64,
    /// Seconds since stream start, `index / fps`.
    pub timestamp: f64,
}

impl Frame {
    pub fn new(width: usize, height: usize, luma: Vec<f32>, index: u64, timestamp: f64) -> Self {
        debug_assert_eq!(luma.len(), width * height);
        Frame {
            width,
            height,
            luma,
            index,
            timestamp,
        }
    }

    /// Builds a frame from 8-bit samples.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8], index: u64, fps: f64) -> Self {
        let luma = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Frame::new(width, height, luma, index, index as f64 / fps)
    }

    /// Quantizes luma back to 8-bit samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.luma.iter().map(|&v| quantize(v)).collect()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.luma[y * self.width + x]
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Path(PathBuf),
    Stdin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    PgmDir,
    Y4m,
    Raw8 { width: usize, height: usize },
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub source: Source,
    pub format: FrameFormat,
    pub fps: f64,
    pub decimation: usize,
}

impl StreamConfig {
    pub fn new(source: Source, format: FrameFormat, fps: f64) -> Self {
        StreamConfig {
            source,
            format,
            fps,
            decimation: 1,
        }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(FrameError::InvalidConfig(format!("fps must be > 0, got {}", self.fps)));
        }
        if self.decimation == 0 {
            return Err(FrameError::InvalidConfig("decimation must be >= 1".into()));
        }
        if let FrameFormat::Raw8 { width, height } = self.format {
            if width == 0 || height == 0 {
                return Err(FrameError::InvalidConfig("RAW8 needs nonzero width and height".into()));
            }
        }
        if self.format == FrameFormat::PgmDir && self.source == Source::Stdin {
            return Err(FrameError::InvalidConfig("PGM directories cannot be read from stdin".into()));
        }
        Ok(())
    }
}

/// A boxed, ordered stream of frames.
pub type FrameStream = Box<dyn Iterator<Item = Result<Frame, FrameError>> + Send>;

/// Opens a frame stream as described by `cfg`, applying its decimation.
pub fn open_stream(cfg: &StreamConfig) -> Result<FrameStream, FrameError> {
    cfg.validate()?;
    let raw: FrameStream = match (&cfg.format, &cfg.source) {
        (FrameFormat::PgmDir, Source::Path(dir)) => Box::new(PgmDirReader::open(dir, cfg.fps)?),
        (FrameFormat::PgmDir, Source::Stdin) => unreachable!("rejected by validate"),
        (FrameFormat::Y4m, src) => {
            let (reader, name) = open_reader(src)?;
            Box::new(Y4mReader::new(reader, name, cfg.fps)?)
        }
        (FrameFormat::Raw8 { width, height }, src) => {
            let (reader, name) = open_reader(src)?;
            Box::new(Raw8Reader::new(reader, name, *width, *height, cfg.fps))
        }
    };
    Ok(decimate(raw, cfg.decimation))
}

fn open_reader(src: &Source) -> Result<(Box<dyn BufRead + Send>, String), FrameError> {
    match src {
        Source::Path(p) => {
            let f = File::open(p).map_err(|e| FrameError::io(p.display().to_string(), e))?;
            Ok((Box::new(BufReader::new(f)), p.display().to_string()))
        }
        Source::Stdin => Ok((Box::new(BufReader::new(io::stdin())), "<stdin>".to_string())),
    }
}

/// Keeps every `k`-th frame of `stream` (positions 0, k, 2k, ...). Retained
/// frames keep their original index and timestamp.
pub fn decimate<I>(stream: I, k: usize) -> FrameStream
where
    I: Iterator<Item = Result<Frame, FrameError>> + Send + 'static,
{
    assert!(k >= 1, "decimation factor must be >= 1");
    if k == 1 {
        return Box::new(stream);
    }
    Box::new(Decimate {
        inner: stream,
        k,
        pos: 0,
    })
}

struct Decimate<I> {
    inner: I,
    k: usize,
    pos: usize,
}

impl<I: Iterator<Item = Result<Frame, FrameError>>> Iterator for Decimate<I> {
    type Item = Result<Frame, FrameError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let item = self.inner.next()?;
            let keep = self.pos.is_multiple_of(self.k);
            self.pos += 1;
            // errors always surface
            if keep || item.is_err() {
                return Some(item);
            }
        }
    }
}

/// Guards a stream so that every frame shares the first frame's dimensions.
struct DimensionGuard {
    dims: Option<(usize, usize)>,
}

impl DimensionGuard {
    fn check(&mut self, f: &Frame) -> Result<(), FrameError> {
        match self.dims {
            None => {
                self.dims = Some((f.width, f.height));
                Ok(())
            }
            Some((w, h)) if (w, h) == (f.width, f.height) => Ok(()),
            Some((w, h)) => Err(FrameError::DimensionMismatch {
                index: f.index,
                want_w: w,
                want_h: h,
                got_w: f.width,
                got_h: f.height,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

fn read_token<R: BufRead>(r: &mut R, name: &str) -> Result<String, FrameError> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte).map_err(|e| FrameError::io(name, e))?;
        if n == 0 {
            break;
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line).map_err(|e| FrameError::io(name, e))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(FrameError::MalformedHeader(name.into(), "unexpected end of header".into()));
    }
    String::from_utf8(tok).map_err(|_| FrameError::MalformedHeader(name.into(), "non-ascii header".into()))
}

fn parse_dim(tok: &str, name: &str, what: &str) -> Result<usize, FrameError> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| FrameError::MalformedHeader(name.into(), format!("bad {what} '{tok}'")))
}

/// Reads one binary (P5) PGM image with maxval 255.
pub fn read_pgm<R: BufRead>(r: &mut R, name: &str) -> Result<(usize, usize, Vec<u8>), FrameError> {
    let magic = read_token(r, name)?;
    if magic != "P5" {
        return Err(FrameError::MalformedHeader(name.into(), format!("expected P5, got '{magic}'")));
    }
    let w = parse_dim(&read_token(r, name)?, name, "width")?;
    let h = parse_dim(&read_token(r, name)?, name, "height")?;
    let maxval = read_token(r, name)?;
    if maxval != "255" {
        return Err(FrameError::MalformedHeader(
            name.into(),
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    let mut data = vec![0u8; w * h];
    r.read_exact(&mut data).map_err(|_| FrameError::Truncated(name.into()))?;
    Ok((w, h, data))
}

pub fn write_pgm<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", frame.width, frame.height)?;
    w.write_all(&frame.to_bytes())
}

pub fn write_pgm_file(path: &Path, frame: &Frame) -> Result<(), FrameError> {
    let name = path.display().to_string();
    let f = File::create(path).map_err(|e| FrameError::io(&name, e))?;
    let mut w = BufWriter::new(f);
    write_pgm(&mut w, frame).and_then(|_| w.flush()).map_err(|e| FrameError::io(name, e))
}

/// Writes frames as `frame_000000.pgm`, `frame_000001.pgm`, ... so that
/// lexicographic order equals stream order. Returns the number written.
pub fn write_pgm_dir<I>(dir: &Path, frames: I) -> Result<usize, FrameError>
where
    I: IntoIterator<Item = Frame>,
{
    fs::create_dir_all(dir).map_err(|e| FrameError::io(dir.display().to_string(), e))?;
    let mut n = 0;
    for frame in frames {
        write_pgm_file(&dir.join(format!("frame_{n:06}.pgm")), &frame)?;
        n += 1;
    }
    Ok(n)
}

struct PgmDirReader {
    files: std::vec::IntoIter<PathBuf>,
    next_index: u64,
    fps: f64,
    guard: DimensionGuard,
}

impl PgmDirReader {
    fn open(dir: &Path, fps: f64) -> Result<Self, FrameError> {
        let name = dir.display().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| FrameError::io(&name, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        if files.is_empty() {
            return Err(FrameError::EmptySource(name));
        }
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        Ok(PgmDirReader {
            files: files.into_iter(),
            next_index: 0,
            fps,
            guard: DimensionGuard { dims: None },
        })
    }
}

impl Iterator for PgmDirReader {
    type Item = Result<Frame, FrameError>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.files.next()?;
        let name = path.display().to_string();
        let result = File::open(&path)
            .map_err(|e| FrameError::io(&name, e))
            .and_then(|f| read_pgm(&mut BufReader::new(f), &name))
            .and_then(|(w, h, data)| {
                let frame = Frame::from_bytes(w, h, &data, self.next_index, self.fps);
                self.guard.check(&frame)?;
                Ok(frame)
            });
        self.next_index += 1;
        Some(result)
    }
}

// ---------------------------------------------------------------------------
// Y4M
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Chroma {
    C420,
    Mono,
}

struct Y4mReader {
    reader: Box<dyn BufRead + Send>,
    name: String,
    width: usize,
    height: usize,
    chroma: Chroma,
    fps: f64,
    next_index: u64,
    done: bool,
}

impl Y4mReader {
    fn new(mut reader: Box<dyn BufRead + Send>, name: String, fps: f64) -> Result<Self, FrameError> {
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| FrameError::io(&name, e))?;
        let header = String::from_utf8_lossy(&line).trim_end().to_string();
        let mut parts = header.split(' ');
        if parts.next() != Some("YUV4MPEG2") {
            return Err(FrameError::MalformedHeader(name, "missing YUV4MPEG2 signature".into()));
        }
        let (mut width, mut height, mut chroma) = (0, 0, Chroma::C420);
        for p in parts.filter(|p| !p.is_empty()) {
            let (tag, val) = p.split_at(1);
            match tag {
                "W" => width = parse_dim(val, &name, "width")?,
                "H" => height = parse_dim(val, &name, "height")?,
                "C" => {
                    chroma = match val {
                        "420" | "420jpeg" | "420paldv" | "420mpeg2" => Chroma::C420,
                        "mono" => Chroma::Mono,
                        other => {
                            return Err(FrameError::MalformedHeader(
                                name,
                                format!("unsupported colorspace C{other}"),
                            ))
                        }
                    }
                }
                _ => {}
            }
        }
        if width == 0 || height == 0 {
            return Err(FrameError::MalformedHeader(name, "missing W or H".into()));
        }
        Ok(Y4mReader {
            reader,
            name,
            width,
            height,
            chroma,
            fps,
            next_index: 0,
            done: false,
        })
    }

    fn chroma_bytes(&self) -> usize {
        match self.chroma {
            Chroma::Mono => 0,
            Chroma::C420 => 2 * self.width.div_ceil(2) * self.height.div_ceil(2),
        }
    }

    fn read_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        let mut line = Vec::new();
        let n = self
            .reader
            .read_until(b'\n', &mut line)
            .map_err(|e| FrameError::io(&self.name, e))?;
        if n == 0 {
            return Ok(None);
        }
        if !line.starts_with(b"FRAME") {
            return Err(FrameError::MalformedHeader(self.name.clone(), "expected FRAME marker".into()));
        }
        let mut luma = vec![0u8; self.width * self.height];
        self.reader
            .read_exact(&mut luma)
            .map_err(|_| FrameError::Truncated(self.name.clone()))?;
        let skip = self.chroma_bytes() as u64;
        let skipped = io::copy(&mut (&mut self.reader).take(skip), &mut io::sink())
            .map_err(|e| FrameError::io(&self.name, e))?;
        if skipped != skip {
            return Err(FrameError::Truncated(self.name.clone()));
        }
        let frame = Frame::from_bytes(self.width, self.height, &luma, self.next_index, self.fps);
        self.next_index += 1;
        Ok(Some(frame))
    }
}

impl Iterator for Y4mReader {
    type Item = Result<Frame, FrameError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_frame() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Writes a monochrome Y4M stream. `fps` is written as a rational with
/// denominator 1000.
pub fn write_y4m<W: Write, I: IntoIterator<Item = Frame>>(w: &mut W, fps: f64, frames: I) -> io::Result<usize> {
    let mut n = 0;
    for frame in frames {
        if n == 0 {
            let num = (fps * 1000.0).round() as u64;
            writeln!(w, "YUV4MPEG2 W{} H{} F{}:1000 Ip A1:1 Cmono", frame.width, frame.height, num)?;
        }
        w.write_all(b"FRAME\n")?;
        w.write_all(&frame.to_bytes())?;
        n += 1;
    }
    Ok(n)
}

// ---------------------------------------------------------------------------
// RAW8
// ---------------------------------------------------------------------------

struct Raw8Reader {
    reader: Box<dyn BufRead + Send>,
    name: String,
    width: usize,
    height: usize,
    fps: f64,
    next_index: u64,
    done: bool,
}

impl Raw8Reader {
    fn new(reader: Box<dyn BufRead + Send>, name: String, width: usize, height: usize, fps: f64) -> Self {
        Raw8Reader {
            reader,
            name,
            width,
            height,
            fps,
            next_index: 0,
            done: false,
        }
    }
}

impl Iterator for Raw8Reader {
    type Item = Result<Frame, FrameError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut buf = vec![0u8; self.width * self.height];
        let mut filled = 0;
        while filled < buf.len() {
            match self.reader.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.done = true;
                    return Some(Err(FrameError::io(&self.name, e)));
                }
            }
        }
        if filled == 0 {
            self.done = true;
            return None;
        }
        if filled < buf.len() {
            self.done = true;
            return Some(Err(FrameError::Truncated(self.name.clone())));
        }
        let f = Frame::from_bytes(self.width, self.height, &buf, self.next_index, self.fps);
        self.next_index += 1;
        Some(Ok(f))
    }
}

// ---------------------------------------------------------------------------
// Bounded queue
// ---------------------------------------------------------------------------

/// Runs `stream` on a dedicated producer thread feeding a bounded queue.
/// The producer blocks when the queue is full; nothing is dropped.
pub fn spawn_reader(stream: FrameStream, capacity: usize) -> (Receiver<Result<Frame, FrameError>>, JoinHandle<()>) {
    let (tx, rx): (SyncSender<_>, _) = mpsc::sync_channel(capacity.max(1));
    let handle = thread::Builder::new()
        .name("frame-reader".into())
        .spawn(move || {
            for item in stream {
                let stop = item.is_err();
                if tx.send(item).is_err() || stop {
                    break;
                }
            }
        })
        .expect("spawn frame reader thread");
    (rx, handle)
}
