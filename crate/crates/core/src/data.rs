//! Synthetic paired audio/video event clips with exact onset ground truth,
//! the invertible toy encoders, and the on-disk dataset container.
//!
//! Every event is a flash (or bounce) in the video and a click (or thud) in
//! the audio at the same instant. Event times sit on the video frame grid so
//! that both modalities represent them exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify_video, unpatchify_video, Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{substream, Stream};

/// Raw audio samples folded into one audio token.
pub const AUDIO_SAMPLES_PER_TOKEN: usize = 4;

pub const TOKEN_FLASH: usize = 0;
pub const TOKEN_CLICK: usize = 1;
pub const TOKEN_BOUNCE: usize = 2;
pub const TOKEN_THUD: usize = 3;
pub const TOKEN_STILL: usize = 4;
pub const TOKEN_SILENCE: usize = 5;
pub const VOCAB_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    /// Short bright disc on the left, sharp click.
    FlashClick,
    /// Disc on the right with a fading afterimage, ringing thud.
    BounceThud,
}

impl EventClass {
    pub const ALL: [EventClass; 2] = [EventClass::FlashClick, EventClass::BounceThud];

    fn code(self) -> u8 {
        match self {
            EventClass::FlashClick => 0,
            EventClass::BounceThud => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(EventClass::FlashClick),
            1 => Ok(EventClass::BounceThud),
            _ => Err(Error::Format(format!("unknown event class code {c}"))),
        }
    }

    pub fn audio_token(self) -> usize {
        match self {
            EventClass::FlashClick => TOKEN_CLICK,
            EventClass::BounceThud => TOKEN_THUD,
        }
    }

    pub fn video_token(self) -> usize {
        match self {
            EventClass::FlashClick => TOKEN_FLASH,
            EventClass::BounceThud => TOKEN_BOUNCE,
        }
    }

    /// Audio signature starting at the onset sample; `|a(0)| = 1` and every
    /// later sample stays below 0.5 in magnitude.
    pub fn impulse(self) -> Vec<f64> {
        match self {
            EventClass::FlashClick => (0..8).map(|n| (-(n as f64) / 1.0).exp() * if n == 0 { 1.0 } else { 0.9 }).collect(),
            EventClass::BounceThud => (0..12)
                .map(|n| (-(n as f64) / 3.0).exp() * (std::f64::consts::PI * n as f64 / 3.0).cos())
                .collect(),
        }
    }

    /// Disc centre as fractions of (height, width).
    fn disc_centre(self) -> (f64, f64) {
        match self {
            EventClass::FlashClick => (0.5, 0.3),
            EventClass::BounceThud => (0.5, 0.7),
        }
    }

    /// Intensity of the disc on the event frame and the frames after it.
    fn visual_envelope(self) -> &'static [f64] {
        match self {
            EventClass::FlashClick => &[1.0],
            EventClass::BounceThud => &[1.0, 0.35],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    /// Clip length in seconds.
    pub duration: f64,
    /// Video frames per second.
    pub fps: f64,
    /// Audio tokens per second.
    pub audio_rate: f64,
    pub samples_per_token: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_events: usize,
    pub max_events: usize,
    /// Minimum distance between event frames.
    pub min_separation_frames: usize,
    pub classes: Vec<EventClass>,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            duration: 5.16,
            fps: 6.0,
            audio_rate: 24.0,
            samples_per_token: AUDIO_SAMPLES_PER_TOKEN,
            height: 12,
            width: 16,
            channels: 1,
            min_events: 1,
            max_events: 3,
            min_separation_frames: 3,
            classes: EventClass::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.fps > 0.0 && self.audio_rate > 0.0) {
            return Err(Error::Config("duration, fps and audio_rate must be > 0".into()));
        }
        if self.samples_per_token == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("samples_per_token and frame dims must be >= 1".into()));
        }
        if self.min_events > self.max_events || self.classes.is_empty() || self.min_separation_frames == 0 {
            return Err(Error::Config("invalid event range, class list or separation".into()));
        }
        let need = self.max_events.saturating_sub(1) * self.min_separation_frames + 1;
        if need > self.frames() {
            return Err(Error::Config(format!("{} events need {need} frames, clip has {}", self.max_events, self.frames())));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn audio_tokens(&self) -> usize {
        (self.duration * self.audio_rate).round() as usize
    }

    pub fn audio_samples(&self) -> usize {
        self.audio_tokens() * self.samples_per_token
    }

    /// Raw audio samples per second.
    pub fn sample_rate(&self) -> f64 {
        self.audio_rate * self.samples_per_token as f64
    }

    /// Onset tolerance of one audio token.
    pub fn audio_frame_seconds(&self) -> f64 {
        1.0 / self.audio_rate
    }

    pub fn digest(&self) -> String {
        crate::config::digest_of(self)
    }
}

/// One paired clip with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AVSample {
    pub audio: Array1<f32>,
    /// `[frames, height, width, channels]`, intensities in `[0, 1]`.
    pub video: Array4<f32>,
    /// Event onsets in seconds.
    pub events: Vec<f64>,
    pub class: EventClass,
    pub audio_prompt: Option<Vec<usize>>,
    pub video_prompt: Option<Vec<usize>>,
    pub duration: f64,
}

impl AVSample {
    pub fn prompt(&self, m: Modality) -> Option<&[usize]> {
        match m {
            Modality::Audio => self.audio_prompt.as_deref(),
            Modality::Video => self.video_prompt.as_deref(),
        }
    }
}

fn background(cfg: &DataGenConfig) -> Array4<f32> {
    Array4::from_shape_fn((1, cfg.height, cfg.width, cfg.channels), |(_, _, w, _)| {
        (0.1 + 0.1 * w as f64 / cfg.width as f64) as f32
    })
}

/// Renders a clip for the given class and event frames.
pub fn render(cfg: &DataGenConfig, class: EventClass, event_frames: &[usize]) -> AVSample {
    let f = cfg.frames();
    let bg = background(cfg);
    let mut video = Array4::from_shape_fn((f, cfg.height, cfg.width, cfg.channels), |(_, h, w, c)| bg[[0, h, w, c]]);
    let (cy, cx) = class.disc_centre();
    let (cy, cx) = (cy * cfg.height as f64 - 0.5, cx * cfg.width as f64 - 0.5);
    let radius = 0.25 * cfg.height.min(cfg.width) as f64;
    for &ef in event_frames {
        for (k, &amp) in class.visual_envelope().iter().enumerate() {
            let fi = ef + k;
            if fi >= f {
                break;
            }
            for h in 0..cfg.height {
                for w in 0..cfg.width {
                    if (h as f64 - cy).hypot(w as f64 - cx) <= radius {
                        for c in 0..cfg.channels {
                            video[[fi, h, w, c]] = amp as f32;
                        }
                    }
                }
            }
        }
    }

    let n = cfg.audio_samples();
    let mut audio = Array1::<f32>::zeros(n);
    let sr = cfg.sample_rate();
    let impulse = class.impulse();
    let mut events = Vec::with_capacity(event_frames.len());
    for &ef in event_frames {
        let t = ef as f64 / cfg.fps;
        events.push(t);
        let start = (t * sr).round() as usize;
        for (k, &a) in impulse.iter().enumerate() {
            if start + k < n {
                audio[start + k] += a as f32;
            }
        }
    }

    let silent = event_frames.is_empty();
    AVSample {
        audio,
        video,
        events,
        class,
        audio_prompt: Some(vec![if silent { TOKEN_SILENCE } else { class.audio_token() }]),
        video_prompt: Some(vec![if silent { TOKEN_STILL } else { class.video_token() }]),
        duration: cfg.duration,
    }
}

/// Draws `n_events` frames with the configured separation (rejection sampling).
fn draw_event_frames<R: Rng>(cfg: &DataGenConfig, rng: &mut R) -> Vec<usize> {
    let n = rng.gen_range(cfg.min_events..=cfg.max_events);
    let frames: Vec<usize> = (0..cfg.frames()).collect();
    loop {
        let mut pick: Vec<usize> = frames.choose_multiple(rng, n).copied().collect();
        pick.sort_unstable();
        if pick.windows(2).all(|w| w[1] - w[0] >= cfg.min_separation_frames) {
            return pick;
        }
    }
}

/// Generates one clip; deterministic for a given RNG state.
pub fn gen_sample<R: Rng>(cfg: &DataGenConfig, rng: &mut R) -> AVSample {
    let class = *cfg.classes.choose(rng).expect("non-empty class list");
    let frames = draw_event_frames(cfg, rng);
    render(cfg, class, &frames)
}

/// Seed of sample `index` derived from the dataset seed.
pub fn sample_seed(cfg: &DataGenConfig, index: usize) -> u64 {
    substream(cfg.seed, Stream::Data, index as u64).gen()
}

/// Generates samples `start..start + n` in parallel with per-sample seeds.
pub fn gen_dataset(cfg: &DataGenConfig, start: usize, n: usize) -> Result<Vec<AVSample>> {
    cfg.validate()?;
    Ok((start..start + n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(sample_seed(cfg, i), Stream::Data, 0);
            gen_sample(cfg, &mut rng)
        })
        .collect())
}

/// Folds a waveform into tokens of `samples_per_token` consecutive samples,
/// right-padding with zeros. Returns the tokens and the padding length.
pub fn encode_audio<T: Real>(wave: &Array1<f32>, cfg: &DataGenConfig) -> Result<(TokenSequence<T>, usize)> {
    let k = cfg.samples_per_token;
    let tokens = wave.len().div_ceil(k).max(1);
    let padding = tokens * k - wave.len();
    let mut data = Array2::zeros((tokens, k));
    for (i, &v) in wave.iter().enumerate() {
        data[[i / k, i % k]] = T::of(v as f64);
    }
    Ok((TokenSequence::new(data, Modality::Audio, cfg.audio_rate, None)?, padding))
}

/// Inverse of [`encode_audio`].
pub fn decode_audio<T: Real>(tokens: &TokenSequence<T>, padding: usize) -> Array1<f32> {
    let flat: Vec<f32> = tokens.data.iter().map(|v| v.f64() as f32).collect();
    Array1::from(flat[..flat.len() - padding.min(flat.len())].to_vec())
}

pub fn encode_video<T: Real>(frames: &Array4<f32>, cfg: &DataGenConfig, patch: usize) -> Result<TokenSequence<T>> {
    patchify_video(&frames.mapv(|v| T::of(v as f64)), patch, cfg.fps)
}

pub fn decode_video<T: Real>(tokens: &TokenSequence<T>, patch: usize) -> Result<Array4<f32>> {
    Ok(unpatchify_video(tokens, patch)?.mapv(|v| v.f64() as f32))
}

// ---------------------------------------------------------------------------
// Container format
//
//   magic    b"AVLDATA\0"
//   u32      version
//   u32      header length, then DataGenConfig as JSON
//   u64      record count
//   records: u32 payload length, then payload:
//     u64 audio length, f32 samples
//     u32 F, H, W, C, f32 pixels (row-major)
//     u32 event count, f64 timestamps
//     u8  class code
//     2x prompt: u32 length (u32::MAX = absent), u32 ids
//     f64 duration
//
// All integers and floats are little-endian.
// ---------------------------------------------------------------------------

pub const DATA_MAGIC: &[u8; 8] = b"AVLDATA\0";
pub const DATA_VERSION: u32 = 1;
const MAX_RECORD: usize = 1 << 30;

fn encode_record(s: &AVSample) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + 4 * (s.audio.len() + s.video.len()));
    b.extend((s.audio.len() as u64).to_le_bytes());
    for v in s.audio.iter() {
        b.extend(v.to_le_bytes());
    }
    let (f, h, w, c) = s.video.dim();
    for d in [f, h, w, c] {
        b.extend((d as u32).to_le_bytes());
    }
    for v in s.video.iter() {
        b.extend(v.to_le_bytes());
    }
    b.extend((s.events.len() as u32).to_le_bytes());
    for e in &s.events {
        b.extend(e.to_le_bytes());
    }
    b.push(s.class.code());
    for p in [&s.audio_prompt, &s.video_prompt] {
        match p {
            None => b.extend(u32::MAX.to_le_bytes()),
            Some(ids) => {
                b.extend((ids.len() as u32).to_le_bytes());
                for &id in ids {
                    b.extend((id as u32).to_le_bytes());
                }
            }
        }
    }
    b.extend(s.duration.to_le_bytes());
    b
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("record truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_record(buf: &[u8]) -> Result<AVSample> {
    let mut c = Cursor { buf, pos: 0 };
    let n = c.u64()? as usize;
    let audio = Array1::from(c.f32s(n)?);
    let dims = [c.u32()?, c.u32()?, c.u32()?, c.u32()?].map(|d| d as usize);
    let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("video dims overflow".into()))?;
    let video = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), c.f32s(len)?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let ne = c.u32()? as usize;
    let events = (0..ne).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let class = EventClass::from_code(c.u8()?)?;
    let mut prompts = [None, None];
    for p in &mut prompts {
        let l = c.u32()?;
        if l != u32::MAX {
            *p = Some((0..l).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
        }
    }
    let duration = c.f64()?;
    if c.pos != buf.len() {
        return Err(Error::Format(format!("record has {} trailing bytes", buf.len() - c.pos)));
    }
    let [audio_prompt, video_prompt] = prompts;
    Ok(AVSample { audio, video, events, class, audio_prompt, video_prompt, duration })
}

/// Streams records to disk; the file appears atomically on [`DatasetWriter::finish`].
pub struct DatasetWriter {
    out: BufWriter<File>,
    tmp: PathBuf,
    path: PathBuf,
    count: u64,
    count_offset: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, cfg: &DataGenConfig) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = BufWriter::new(file);
        let header = serde_json::to_vec(cfg)?;
        let mut head = Vec::new();
        head.extend(DATA_MAGIC);
        head.extend(DATA_VERSION.to_le_bytes());
        head.extend((header.len() as u32).to_le_bytes());
        head.extend(&header);
        let count_offset = head.len() as u64;
        head.extend(0u64.to_le_bytes());
        out.write_all(&head).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self { out, tmp, path, count: 0, count_offset })
    }

    pub fn write(&mut self, s: &AVSample) -> Result<()> {
        let rec = encode_record(s);
        self.out.write_all(&(rec.len() as u32).to_le_bytes()).map_err(|e| Error::io(&self.tmp, e))?;
        self.out.write_all(&rec).map_err(|e| Error::io(&self.tmp, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        let io = |e| Error::io(&self.tmp, e);
        self.out.seek(SeekFrom::Start(self.count_offset)).map_err(io)?;
        self.out.write_all(&self.count.to_le_bytes()).map_err(|e| Error::io(&self.tmp, e))?;
        self.out.flush().map_err(|e| Error::io(&self.tmp, e))?;
        drop(self.out);
        std::fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.count)
    }
}

/// Reads records one at a time.
pub struct DatasetReader {
    input: BufReader<File>,
    path: PathBuf,
    pub config: DataGenConfig,
    pub count: u64,
    read: u64,
    buf: Vec<u8>,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut input = BufReader::new(file);
        let mut head = [0u8; 16];
        read_exact(&mut input, &mut head, &path, "header")?;
        if &head[..8] != DATA_MAGIC {
            return Err(Error::Format(format!("{}: not a dataset file", path.display())));
        }
        let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
        if version != DATA_VERSION {
            return Err(Error::Format(format!("dataset version {version}, expected {DATA_VERSION}")));
        }
        let hlen = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
        if hlen > MAX_RECORD {
            return Err(Error::Format(format!("header length {hlen} too large")));
        }
        let mut header = vec![0u8; hlen];
        read_exact(&mut input, &mut header, &path, "header")?;
        let config: DataGenConfig = serde_json::from_slice(&header)?;
        let mut cnt = [0u8; 8];
        read_exact(&mut input, &mut cnt, &path, "record count")?;
        Ok(Self { input, path, config, count: u64::from_le_bytes(cnt), read: 0, buf: Vec::new() })
    }

    /// Size of the reusable record buffer (one record at most).
    pub fn buffer_capacity(&self) -> usize {
        self.buf.capacity()
    }

    pub fn next_sample(&mut self) -> Option<Result<AVSample>> {
        if self.read >= self.count {
            return None;
        }
        self.read += 1;
        let mut len = [0u8; 4];
        if let Err(e) = read_exact(&mut self.input, &mut len, &self.path, "record length") {
            return Some(Err(e));
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_RECORD {
            return Some(Err(Error::Format(format!("record {} length {len} is implausible", self.read - 1))));
        }
        self.buf.clear();
        self.buf.reserve_exact(len);
        self.buf.resize(len, 0);
        let mut buf = std::mem::take(&mut self.buf);
        let r = read_exact(&mut self.input, &mut buf, &self.path, "record").and_then(|_| decode_record(&buf));
        self.buf = buf;
        Some(r)
    }

    pub fn read_all(mut self) -> Result<Vec<AVSample>> {
        let mut v = Vec::with_capacity(self.count as usize);
        while let Some(s) = self.next_sample() {
            v.push(s?);
        }
        Ok(v)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<AVSample>;
    fn next(&mut self) -> Option<Self::Item> {
        self.next_sample()
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated while reading {what}", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

/// Writes samples plus a `.manifest` text file listing seeds and config digest.
pub fn write_dataset(path: impl AsRef<Path>, cfg: &DataGenConfig, samples: &[AVSample]) -> Result<()> {
    let path = path.as_ref();
    let mut w = DatasetWriter::create(path, cfg)?;
    for s in samples {
        w.write(s)?;
    }
    w.finish()?;
    let mut manifest = format!("config_digest {}\nseed {}\nsamples {}\n", cfg.digest(), cfg.seed, samples.len());
    for i in 0..samples.len() {
        manifest.push_str(&format!("sample {i} seed {}\n", sample_seed(cfg, i)));
    }
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DataGenConfig, Vec<AVSample>)> {
    let r = DatasetReader::open(path)?;
    let cfg = r.config.clone();
    Ok((cfg, r.read_all()?))
}
