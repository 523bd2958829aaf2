//! V2A / A2V generation: fixed-noise conditioning, Euler sampling with
//! classifier-free guidance, decoding to media space.

use log::debug;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Modality, TokenSequence};
use crate::eval::SweepPoint;
use crate::error::{Error, Result};
use crate::flowmatch::{cfg_combine, euler_sample, interpolate, GuidanceConfig};
use crate::fusion::{Direction, LinkedInputs, LinkedModel, TimestepPair};
use crate::real::norm;
use crate::rng::{substream, Stream};
use crate::data::{decode_audio, decode_video, AVSample, DataGenConfig};
use crate::eval::audio_padding;
use crate::train::{encode_samples, Encoded};

/// What the unconditional guidance pass sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unconditional {
    /// The linked model with both prompts nulled; conditioning media stay in.
    NullPrompts,
    /// The frozen generating backbone alone with a null prompt, so the
    /// conditioning modality is dropped along with the prompts.
    #[default]
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub unconditional: Unconditional,
    /// Conditioning time; `None` uses the direction's default.
    pub t_cond: Option<f64>,
    /// Draw a fresh conditioning noise at every step instead of reusing one.
    pub resample_cond_noise: bool,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { guidance: GuidanceConfig::default(), unconditional: Unconditional::default(), t_cond: None, resample_cond_noise: false, seed: 0 }
    }
}

/// Shape of the sequence to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub modality: Modality,
    pub tokens: usize,
    pub channels: usize,
    pub eta: f64,
    pub grid: Option<(usize, usize, usize)>,
}

impl Layout {
    pub fn of<T: crate::real::Real>(seq: &TokenSequence<T>) -> Self {
        Self { modality: seq.modality, tokens: seq.len(), channels: seq.channels(), eta: seq.eta, grid: seq.grid }
    }
}

/// Per-step norms for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiag {
    pub step: usize,
    pub t: f64,
    pub state_norm: f64,
    pub velocity_norm: f64,
}

fn digest(a: &Array2<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in a.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

fn gaussian(rng: &mut impl Rng, dim: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_simple_fn(dim, || rng.sample::<f32, _>(StandardNormal))
}

/// Generates the other modality from clean conditioning media.
///
/// Both the conditioning noise and the initial state come from `seed`.
/// Each step evaluates a conditional pass (prompts as given) and, unless
/// the guidance weight is 1, an unconditional pass chosen by
/// `cfg.unconditional`.
pub fn generate(
    model: &LinkedModel<f32>,
    dir: Direction,
    cond: &TokenSequence<f32>,
    gen: &Layout,
    prompts: (Option<&[usize]>, Option<&[usize]>),
    cfg: &InferConfig,
    seed: u64,
    mut diag: Option<&mut Vec<StepDiag>>,
) -> Result<TokenSequence<f32>> {
    cfg.guidance.validate()?;
    if cond.modality != dir.conditioning() || gen.modality != dir.generated() {
        return Err(Error::contract(
            "infer",
            format!("{dir} needs {} conditioning and {} output, got {} and {}", dir.conditioning(), dir.generated(), cond.modality, gen.modality),
        ));
    }
    model.stack(dir)?;
    let t_cond = cfg.t_cond.unwrap_or(dir.default_t_cond());
    if !(0.0..=1.0).contains(&t_cond) {
        return Err(Error::Config(format!("t_cond {t_cond} outside [0, 1]")));
    }
    let mut rng = substream(seed, Stream::Inference, 0);
    let x0 = gaussian(&mut rng, (gen.tokens, gen.channels));
    let mut eps = gaussian(&mut rng, cond.data.dim());
    let mut cond_t = cond.with_data(interpolate(&eps, &cond.data, t_cond)?);
    let cond_hash = digest(&cond_t.data);
    let template = TokenSequence::new(Array2::zeros((gen.tokens, gen.channels)), gen.modality, gen.eta, gen.grid)?;
    let (audio_prompt, video_prompt) = prompts;
    let w = cfg.guidance.weight;
    let mut step = 0usize;
    let out = euler_sample(
        |x: &Array2<f32>, t: f64| {
            if cfg.resample_cond_noise && step > 0 {
                eps = gaussian(&mut rng, cond.data.dim());
                cond_t = cond.with_data(interpolate(&eps, &cond.data, t_cond)?);
            } else if cfg!(debug_assertions) && !cfg.resample_cond_noise {
                assert_eq!(digest(&cond_t.data), cond_hash, "noised conditioning changed at step {step}");
            }
            let g_seq = template.with_data(x.clone());
            let (a, v) = match dir {
                Direction::V2A => (&g_seq, &cond_t),
                Direction::A2V => (&cond_t, &g_seq),
            };
            let ts = TimestepPair::for_direction(dir, t, t_cond)?;
            let inp = LinkedInputs { audio: a, video: v, ts, audio_prompt, video_prompt };
            let vc = model.forward(dir, &inp)?;
            let vel = if w == 1.0 {
                vc
            } else {
                let vu = match cfg.unconditional {
                    Unconditional::NullPrompts => {
                        let un = LinkedInputs { audio_prompt: None, video_prompt: None, ..inp };
                        model.forward(dir, &un)?
                    }
                    Unconditional::Backbone => model.backbone(dir.generated()).forward(&g_seq, t, None, false)?.0,
                };
                cfg_combine(&vc, &vu, w)?
            };
            if let Some(d) = diag.as_deref_mut() {
                d.push(StepDiag { step, t, state_norm: norm(x), velocity_norm: norm(&vel) });
            }
            debug!("{dir} step {step} t={t:.4} |v|={:.4}", norm(&vel));
            step += 1;
            Ok(vel)
        },
        &x0,
        cfg.guidance.steps,
    )
    .map_err(|e| match e {
        Error::NonFinite { location, norm, .. } => Error::NonFinite { module: "infer", location, norm },
        e => e,
    })?;
    let seq = template.with_data(out);
    seq.validate()?;
    Ok(seq)
}

/// Generates for a batch of encoded samples in parallel; sample `i` uses
/// seed `substream(cfg.seed, Inference, i)`.
pub fn generate_batch(
    model: &LinkedModel<f32>,
    dir: Direction,
    samples: &[Encoded],
    cfg: &InferConfig,
) -> Result<Vec<TokenSequence<f32>>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let gen = Layout::of(s.tokens(dir.generated()));
            let seed = substream(cfg.seed, Stream::Inference, i as u64).gen();
            let prompts = (s.audio_prompt.as_deref(), s.video_prompt.as_deref());
            generate(model, dir, s.tokens(dir.conditioning()), &gen, prompts, cfg, seed, None)
        })
        .collect()
}

/// Generates for each clip and returns copies whose generated modality is
/// replaced by the decoded output.
pub fn generate_clips(
    model: &LinkedModel<f32>,
    dir: Direction,
    clips: &[AVSample],
    data: &DataGenConfig,
    cfg: &InferConfig,
) -> Result<Vec<AVSample>> {
    let patch = model.video.config.patch;
    let enc = encode_samples(clips, data, patch)?;
    let out = generate_batch(model, dir, &enc, cfg)?;
    clips.iter().zip(out).map(|(c, o)| decode_into(c, &o, data, patch)).collect()
}

/// `clip` with the modality of `generated` replaced by its decoded media.
pub fn decode_into(clip: &AVSample, generated: &TokenSequence<f32>, data: &DataGenConfig, patch: usize) -> Result<AVSample> {
    let mut out = clip.clone();
    match generated.modality {
        Modality::Audio => out.audio = decode_audio(generated, audio_padding(data)),
        Modality::Video => out.video = decode_video(generated, patch)?,
    }
    Ok(out)
}

/// Scores generation at each conditioning time of `grid` with `eval_fn`,
/// which returns `(score, samples)`.
pub fn sweep_t_cond(grid: &[f64], mut eval_fn: impl FnMut(f64) -> Result<(f64, usize)>) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep: empty t_cond grid".into()));
    }
    grid.iter()
        .map(|&t| {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("sweep: t_cond {t} outside [0, 1]")));
            }
            let (score, samples) = eval_fn(t)?;
            Ok(SweepPoint { t_cond: t, score, samples })
        })
        .collect()
}

/// The conditioning times of the reference sweep.
pub const SWEEP_GRID: [f64; 9] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.96, 0.99, 1.0];
