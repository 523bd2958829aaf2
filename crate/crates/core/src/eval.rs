//! Temporal-alignment metrics, the gradient-check harness and CSV/plot
//! reporting.

use std::path::Path;

use ndarray::{Array1, Array4, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::data::{AVSample, DataGenConfig};
use crate::error::{Error, Result};
use crate::fusion::{Direction, LinkedModel};
use crate::infer::{generate_clips, InferConfig};
use crate::params::ParamStore;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Re-trigger suppression window in seconds.
pub const DEFAULT_REFRACTORY: f64 = 0.25;
/// Fraction of brightest pixels averaged by [`frame_signature`].
pub const SIGNATURE_FRACTION: f64 = 0.125;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: f64,
    pub refractory: f64,
    /// Onset tolerance in seconds; `None` means one audio token.
    pub tolerance: Option<f64>,
    pub video_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, refractory: DEFAULT_REFRACTORY, tolerance: None, video_threshold: 0.5 }
    }
}

/// Rising-edge crossings of `|amplitude| > threshold`, at most one per
/// refractory window. Timestamps are `sample_index / sample_rate`.
pub fn detect_onsets(wave: &Array1<f32>, sample_rate: f64, threshold: f64, refractory: f64) -> Vec<f64> {
    let min_gap = refractory * sample_rate;
    let mut out = Vec::new();
    let mut prev_above = false;
    let mut last: Option<usize> = None;
    for (i, &v) in wave.iter().enumerate() {
        let above = (v as f64).abs() > threshold;
        if above && !prev_above && last.map_or(true, |l| ((i - l) as f64) >= min_gap) {
            out.push(i as f64 / sample_rate);
            last = Some(i);
        }
        prev_above = above;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnsetReport {
    pub detected: Vec<f64>,
    pub reference: Vec<f64>,
    pub tolerance: f64,
    pub accuracy: f64,
    /// `(reference, detected)` pairs.
    pub matched: Vec<(f64, f64)>,
    pub false_positives: usize,
}

/// Slack added to the tolerance so that sample-quantized timestamps exactly
/// one window away still match.
const TOLERANCE_SLACK: f64 = 1e-9;

/// Greedy matching in time order: each reference takes the earliest unmatched
/// detection within `±tolerance`.
pub fn onset_accuracy(detected: &[f64], reference: &[f64], tolerance: f64) -> OnsetReport {
    let mut det: Vec<f64> = detected.to_vec();
    let mut refs: Vec<f64> = reference.to_vec();
    det.sort_by(f64::total_cmp);
    refs.sort_by(f64::total_cmp);
    let mut used = vec![false; det.len()];
    let mut matched = Vec::new();
    let mut start = 0;
    let tol = tolerance + TOLERANCE_SLACK;
    for &r in &refs {
        while start < det.len() && (used[start] || det[start] < r - tol) {
            start += 1;
        }
        if let Some(j) = (start..det.len()).find(|&j| !used[j] && (det[j] - r).abs() <= tol) {
            used[j] = true;
            matched.push((r, det[j]));
        }
    }
    let accuracy = matched.len() as f64 / refs.len().max(1) as f64;
    OnsetReport {
        false_positives: det.len() - matched.len(),
        detected: det,
        reference: refs,
        tolerance,
        accuracy,
        matched,
    }
}

/// Mean of the brightest [`SIGNATURE_FRACTION`] of a frame's pixels.
pub fn frame_signature(frames: &Array4<f32>, f: usize) -> f64 {
    let mut px: Vec<f32> = frames.index_axis(Axis(0), f).iter().copied().collect();
    px.sort_by(|a, b| b.total_cmp(a));
    let k = ((px.len() as f64 * SIGNATURE_FRACTION).ceil() as usize).clamp(1, px.len());
    px[..k].iter().map(|&v| v as f64).sum::<f64>() / k as f64
}

/// Fraction of reference events whose frame shows the visual signature
/// above `threshold`.
pub fn alignment_score_video(frames: &Array4<f32>, events: &[f64], fps: f64, threshold: f64) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    let hits = events
        .iter()
        .filter(|&&t| {
            let f = (t * fps).round() as usize;
            f < frames.dim().0 && frame_signature(frames, f) > threshold
        })
        .count();
    hits as f64 / events.len() as f64
}

/// Frames whose signature exceeds `threshold`.
pub fn lit_frames(frames: &Array4<f32>, threshold: f64) -> Vec<usize> {
    (0..frames.dim().0).filter(|&f| frame_signature(frames, f) > threshold).collect()
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many entries, sampled uniformly (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Relative errors use `max(|num|, |ana|, floor)` as denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_entries: None, seed: 0, floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares `f`'s analytic gradients against central differences.
///
/// `f` evaluates the scalar loss and its gradients for the current parameter
/// values of `store`; the store must be trainable.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, Gradients<f64>)>,
{
    let (_, grads) = f(store)?;
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for p in 0..store.len() {
        for j in 0..store.get(p).len() {
            entries.push((p, j));
        }
    }
    if let Some(n) = opts.max_entries {
        if n < entries.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, entries.len(), n).into_vec();
            idx.sort_unstable();
            entries = idx.into_iter().map(|i| entries[i]).collect();
        }
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (p, j) in entries {
        let key = store.key(p);
        let ana = grads.get(key).map_or(0.0, |g| g.as_slice().expect("contiguous")[j]);
        let orig = store.get(p).as_slice().expect("contiguous")[j];
        let mut eval_at = |v: f64| -> Result<f64> {
            store.get_mut(p)?.as_slice_mut().expect("contiguous")[j] = v;
            Ok(f(store)?.0)
        };
        let plus = eval_at(orig + opts.eps)?;
        let minus = eval_at(orig - opts.eps)?;
        eval_at(orig)?;
        let num = (plus - minus) / (2.0 * opts.eps);
        let err = (num - ana).abs() / num.abs().max(ana.abs()).max(opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((store.name(p).to_string(), j));
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// End-to-end scoring
// ---------------------------------------------------------------------------

/// Zero samples appended by `encode_audio` for clips of `cfg`.
pub fn audio_padding(cfg: &DataGenConfig) -> usize {
    let k = cfg.samples_per_token;
    cfg.audio_samples().div_ceil(k) * k - cfg.audio_samples()
}

impl EvalConfig {
    pub fn tolerance_for(&self, data: &DataGenConfig) -> f64 {
        self.tolerance.unwrap_or_else(|| data.audio_frame_seconds())
    }
}

/// Onset report of a clip's audio against its own event list.
pub fn score_audio(clip: &AVSample, data: &DataGenConfig, cfg: &EvalConfig) -> OnsetReport {
    let det = detect_onsets(&clip.audio, data.sample_rate(), cfg.threshold, cfg.refractory);
    onset_accuracy(&det, &clip.events, cfg.tolerance_for(data))
}

/// Per-clip score of the generated modality: onset accuracy for V2A, video
/// alignment for A2V. Clips carry generated media and reference events.
pub fn score_clips(dir: Direction, clips: &[AVSample], data: &DataGenConfig, cfg: &EvalConfig) -> Vec<f64> {
    clips
        .par_iter()
        .map(|c| match dir {
            Direction::V2A => score_audio(c, data, cfg).accuracy,
            Direction::A2V => alignment_score_video(&c.video, &c.events, data.fps, cfg.video_threshold),
        })
        .collect()
}

/// Predictions of the generated modality that land on a reference event,
/// and all predictions: matched onsets for V2A, lit event frames for A2V.
pub fn true_and_predicted(dir: Direction, clip: &AVSample, data: &DataGenConfig, cfg: &EvalConfig) -> (usize, usize) {
    match dir {
        Direction::V2A => {
            let r = score_audio(clip, data, cfg);
            (r.matched.len(), r.detected.len())
        }
        Direction::A2V => {
            let lit = lit_frames(&clip.video, cfg.video_threshold);
            let events: Vec<usize> = clip.events.iter().map(|t| (t * data.fps).round() as usize).collect();
            (lit.iter().filter(|f| events.contains(f)).count(), lit.len())
        }
    }
}

pub fn metric_name(dir: Direction) -> &'static str {
    match dir {
        Direction::V2A => "onset_acc",
        Direction::A2V => "video_alignment",
    }
}

/// Expected onset accuracy when each clip's onsets are placed uniformly at
/// random over the clip, estimated from `trials` draws per clip.
pub fn random_onset_baseline(clips: &[AVSample], data: &DataGenConfig, cfg: &EvalConfig, trials: usize, seed: u64) -> f64 {
    let tol = cfg.tolerance_for(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for c in clips {
        for _ in 0..trials {
            let det: Vec<f64> = (0..c.events.len()).map(|_| rng.gen_range(0.0..c.duration)).collect();
            total += onset_accuracy(&det, &c.events, tol).accuracy;
        }
    }
    total / (clips.len() * trials).max(1) as f64
}

/// Expected video alignment when as many frames as there are events light
/// up at random positions.
pub fn random_frame_baseline(clips: &[AVSample], data: &DataGenConfig, trials: usize, seed: u64) -> f64 {
    let frames = data.frames();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for c in clips {
        for _ in 0..trials {
            let lit = sample(&mut rng, frames, c.events.len().min(frames)).into_vec();
            let hits = c.events.iter().filter(|&&t| lit.contains(&((t * data.fps).round() as usize))).count();
            total += hits as f64 / c.events.len().max(1) as f64;
        }
    }
    total / (clips.len() * trials).max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub direction: Direction,
    pub metric: String,
    pub score: f64,
    pub baseline: f64,
    /// Pooled fraction of predictions that land on a reference event; the
    /// score alone does not penalize extra onsets or lit frames.
    pub precision: f64,
    pub per_sample: Vec<f64>,
}

pub const BASELINE_TRIALS: usize = 200;

impl EvalSummary {
    /// Scores already generated clips against the random baseline of `dir`.
    pub fn of_clips(dir: Direction, generated: &[AVSample], data: &DataGenConfig, cfg: &EvalConfig, seed: u64) -> Result<Self> {
        if generated.is_empty() {
            return Err(Error::contract("eval", "no clips to score"));
        }
        let per_sample = score_clips(dir, generated, data, cfg);
        let baseline = match dir {
            Direction::V2A => random_onset_baseline(generated, data, cfg, BASELINE_TRIALS, seed),
            Direction::A2V => random_frame_baseline(generated, data, BASELINE_TRIALS, seed),
        };
        let score = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        let (hit, predicted) = generated
            .par_iter()
            .map(|c| true_and_predicted(dir, c, data, cfg))
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let precision = if predicted == 0 { 0.0 } else { hit as f64 / predicted as f64 };
        Ok(Self { direction: dir, metric: metric_name(dir).into(), score, baseline, precision, per_sample })
    }
}

/// Generates for every clip and scores the result with the direction's
/// metric, alongside its Monte Carlo random baseline.
pub fn evaluate(
    model: &LinkedModel<f32>,
    dir: Direction,
    clips: &[AVSample],
    data: &DataGenConfig,
    infer: &InferConfig,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    let generated = generate_clips(model, dir, clips, data, infer)?;
    EvalSummary::of_clips(dir, &generated, data, cfg, infer.seed)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Column schema of the ablation table.
pub const ABLATION_COLUMNS: [&str; 7] =
    ["group", "variant", "direction", "metric", "score", "baseline", "samples"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub direction: String,
    pub metric: String,
    pub score: f64,
    pub baseline: f64,
    pub samples: usize,
}

/// Column schema of the conditioning-time sweep.
pub const SWEEP_COLUMNS: [&str; 3] = ["t_cond", "score", "samples"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t_cond: f64,
    pub score: f64,
    pub samples: usize,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Writes the sweep CSV plus a line-plot PNG next to it.
pub fn write_sweep(path: &Path, points: &[SweepPoint]) -> Result<()> {
    write_rows(path, points)?;
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.t_cond, p.score)).collect();
    plot_line(&path.with_extension("png"), &xy)
}

/// Renders a minimal line chart (axes box plus polyline) on [0,1]x[0,1].
pub fn plot_line(path: &Path, xy: &[(f64, f64)]) -> Result<()> {
    const W: u32 = 320;
    const H: u32 = 200;
    const M: f64 = 16.0;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (M + x.clamp(0.0, 1.0) * (W as f64 - 2.0 * M), H as f64 - M - y.clamp(0.0, 1.0) * (H as f64 - 2.0 * M))
    };
    let mut line = |a: (f64, f64), b: (f64, f64), c: [u8; 3]| {
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let s = i as f64 / n as f64;
            let (x, y) = (a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1));
            if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
                img.put_pixel(x as u32, y as u32, image::Rgb(c));
            }
        }
    };
    let grey = [160, 160, 160];
    line(to_px(0.0, 0.0), to_px(1.0, 0.0), grey);
    line(to_px(0.0, 0.0), to_px(0.0, 1.0), grey);
    line(to_px(1.0, 0.0), to_px(1.0, 1.0), grey);
    line(to_px(0.0, 1.0), to_px(1.0, 1.0), grey);
    for w in xy.windows(2) {
        line(to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), [200, 30, 30]);
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, ParamKey};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn detector_examples() {
        assert!(detect_onsets(&Array1::zeros(50), 96.0, 0.5, 0.25).is_empty());
        let mut w = Array1::<f32>::zeros(96);
        w[10] = 1.0;
        w[14] = 1.0; // within 0.25 s of the first
        w[60] = -0.9;
        assert_eq!(detect_onsets(&w, 96.0, 0.5, 0.25), vec![10.0 / 96.0, 60.0 / 96.0]);
    }

    #[test]
    fn accuracy_examples() {
        let r = [1.0, 2.0];
        assert_eq!(onset_accuracy(&r, &r, 0.05).accuracy, 1.0);
        assert_eq!(onset_accuracy(&r, &r, 0.0).accuracy, 1.0);
        assert_eq!(onset_accuracy(&[], &r, 0.05).accuracy, 0.0);
        let rep = onset_accuracy(&[1.03], &r, 0.05);
        assert_eq!(rep.accuracy, 0.5);
        assert_eq!(rep.matched, vec![(1.0, 1.03)]);
        let rep = onset_accuracy(&[1.0, 1.01, 3.0], &r, 0.05);
        assert_eq!(rep.false_positives, 2);
    }

    proptest! {
        #[test]
        fn accuracy_bounded_and_monotone_in_tolerance(
            det in proptest::collection::vec(0.0f64..5.0, 0..8),
            refs in proptest::collection::vec(0.0f64..5.0, 0..8),
            tol in 0.0f64..0.5,
            extra in 0.0f64..0.5,
        ) {
            let a = onset_accuracy(&det, &refs, tol);
            let b = onset_accuracy(&det, &refs, tol + extra);
            prop_assert!((0.0..=1.0).contains(&a.accuracy));
            prop_assert!(b.accuracy >= a.accuracy);
            let mut seen = std::collections::HashSet::new();
            for (r, _) in &a.matched {
                prop_assert!(seen.insert(r.to_bits()) || refs.iter().filter(|&&x| x == *r).count() > 1);
            }
        }
    }

    #[test]
    fn video_score_examples() {
        let cfg = crate::data::DataGenConfig::default();
        let s = crate::data::render(&cfg, crate::data::EventClass::FlashClick, &[4, 20]);
        assert_eq!(alignment_score_video(&s.video, &s.events, cfg.fps, 0.5), 1.0);
        let black = Array4::<f32>::zeros(s.video.dim());
        assert_eq!(alignment_score_video(&black, &s.events, cfg.fps, 0.5), 0.0);
        let one = crate::data::render(&cfg, crate::data::EventClass::FlashClick, &[4]);
        assert_eq!(alignment_score_video(&one.video, &s.events, cfg.fps, 0.5), 0.5);
        assert_eq!(lit_frames(&s.video, 0.5), vec![4, 20]);
    }

    fn linear_loss(store: &ParamStore<f64>) -> Result<(f64, Gradients<f64>)> {
        let mut g = Graph::new();
        let w = store.var(&mut g, 0);
        let x = g.constant(array![[1.0, -2.0], [0.5, 3.0]]);
        let y = g.matmul(x, w);
        let l = g.weighted_sum(y, array![[1.0, 2.0], [-1.0, 0.5]]);
        Ok((g.value(l)[[0, 0]], g.backward(l)))
    }

    #[test]
    fn grad_check_linear_and_fault_injection() {
        let mut store = ParamStore::<f64>::new(0);
        store.add("w", Array2::from_shape_fn((2, 2), |(i, j)| (i + 2 * j) as f64 * 0.3));
        let rep = grad_check(&mut store, linear_loss, &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error <= 1e-10, "{}", rep.max_rel_error);
        assert_eq!(rep.checked, 4);

        let corrupted = |s: &ParamStore<f64>| {
            let (l, mut g) = linear_loss(s)?;
            let mut bad = Gradients::default();
            bad.accumulate(&g);
            let key = ParamKey { store: 0, index: 0 };
            let mut arr = g.get(key).unwrap().clone();
            arr[[1, 0]] += 1.0;
            g = Gradients::default();
            let mut fake = Graph::<f64>::new();
            let v = fake.input(key, arr.clone());
            let o = fake.weighted_sum(v, Array2::ones((2, 2)));
            let _ = bad;
            g.accumulate(&scale_to(fake.backward(o), &arr));
            Ok((l, g))
        };
        let rep = grad_check(&mut store, corrupted, &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error >= 0.1);
        assert_eq!(rep.worst.unwrap(), ("w".to_string(), 2));
    }

    /// Builds gradients whose only entry equals `arr` under the same key.
    fn scale_to(template: Gradients<f64>, arr: &Array2<f64>) -> Gradients<f64> {
        let key = *template.keys().next().unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.input(key, Array2::zeros(arr.dim()));
        let o = g.weighted_sum(v, arr.clone());
        g.backward(o)
    }

    #[test]
    fn ground_truth_clips_score_perfectly() {
        let data = DataGenConfig::default();
        let clips = crate::data::gen_dataset(&data, 0, 6).unwrap();
        let cfg = EvalConfig::default();
        for dir in [Direction::V2A, Direction::A2V] {
            assert!(score_clips(dir, &clips, &data, &cfg).iter().all(|&s| s == 1.0));
            let sum = EvalSummary::of_clips(dir, &clips, &data, &cfg, 0).unwrap();
            assert_eq!((sum.score, sum.precision), (1.0, 1.0));
            assert!(sum.baseline < 0.5);
        }
        let mut all_lit = clips.clone();
        for c in &mut all_lit {
            c.video.fill(1.0);
        }
        let sum = EvalSummary::of_clips(Direction::A2V, &all_lit, &data, &cfg, 0).unwrap();
        assert_eq!(sum.score, 1.0);
        assert!(sum.precision < 0.2, "{}", sum.precision);
        assert!(EvalSummary::of_clips(Direction::V2A, &[], &data, &cfg, 0).is_err());
    }

    #[test]
    fn random_baselines_match_closed_form() {
        let data = DataGenConfig::default();
        let clips = crate::data::gen_dataset(&data, 0, 32).unwrap();
        let cfg = EvalConfig::default();
        // A uniform onset lands within one token of a given event with
        // probability about 2 * tol / duration; each event sees one chance per
        // placed onset.
        let p = 2.0 * cfg.tolerance_for(&data) / data.duration;
        let b = random_onset_baseline(&clips, &data, &cfg, 400, 1);
        let mean_events = clips.iter().map(|c| c.events.len() as f64).sum::<f64>() / clips.len() as f64;
        assert!(b > 0.5 * p && b < 1.5 * p * mean_events, "{b} vs {p}");
        let f = random_frame_baseline(&clips, &data, 400, 1);
        let expect = mean_events / data.frames() as f64;
        assert!((f - expect).abs() < 0.02, "{f} vs {expect}");
        assert_eq!(b, random_onset_baseline(&clips, &data, &cfg, 400, 1));
    }

    #[test]
    fn csv_schema_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sweep.csv");
        let pts = vec![SweepPoint { t_cond: 0.8, score: 0.5, samples: 4 }, SweepPoint { t_cond: 1.0, score: 0.25, samples: 4 }];
        write_sweep(&p, &pts).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), SWEEP_COLUMNS.join(","));
        assert_eq!(read_rows::<SweepPoint>(&p).unwrap(), pts);
        assert!(p.with_extension("png").exists());
        let a = dir.path().join("abl.csv");
        write_rows(&a, &[AblationRow {
            group: "g".into(),
            variant: "v".into(),
            direction: "v2a".into(),
            metric: "onset_acc".into(),
            score: 1.0,
            baseline: 0.2,
            samples: 1,
        }])
        .unwrap();
        let header = std::fs::read_to_string(&a).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, ABLATION_COLUMNS.join(","));
    }
}
