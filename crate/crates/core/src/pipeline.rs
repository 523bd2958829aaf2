//! Stage functions shared by the CLI, the examples and the acceptance tests.

use ndarray::Array2;
use rand::Rng;
use serde_json::json;

use crate::autograd::Graph;
use crate::backbone::{Backbone, BackboneConfig, Modality, TokenSequence};
use crate::config::RunConfig;
use crate::data::{gen_dataset, AVSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, grad_check, EvalSummary, GradCheckOptions, GradCheckReport, SweepPoint};
use crate::fusion::{Direction, FusionConfig, LinkedInputs, LinkedModel, TimestepPair};
use crate::infer::{sweep_t_cond, InferConfig};
use crate::params::ParamStore;
use crate::rng::{stream, Stream};
use crate::train::{encode_samples, train_base, train_fusion, Progress, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Clips of a split; evaluation clips follow the training indices so the
/// two never overlap.
pub fn clips(cfg: &RunConfig, split: Split) -> Result<Vec<AVSample>> {
    match split {
        Split::Train => gen_dataset(&cfg.data, 0, cfg.dataset.train),
        Split::Eval => gen_dataset(&cfg.data, cfg.dataset.train, cfg.dataset.eval),
    }
}

pub fn train_backbone(cfg: &RunConfig, m: Modality, clips: &[AVSample], progress: Progress<'_>) -> Result<(Backbone<f32>, TrainLog)> {
    let enc = encode_samples(clips, &cfg.data, cfg.video.patch)?;
    train_base(m, &enc, cfg.backbone(m), &cfg.base_train(), progress)
}

/// Builds the linked model around the frozen backbones and trains its
/// fusion blocks. `expected` holds the audio and video parameter digests
/// the backbones must match.
pub fn train_linked(
    cfg: &RunConfig,
    audio: Backbone<f32>,
    video: Backbone<f32>,
    clips: &[AVSample],
    expected: Option<(&str, &str)>,
    progress: Progress<'_>,
) -> Result<(LinkedModel<f32>, TrainLog)> {
    let mut model = LinkedModel::new(audio, video, cfg.fusion.clone(), &mut stream(cfg.seed, Stream::Init))?;
    let enc = encode_samples(clips, &cfg.data, cfg.video.patch)?;
    let log = train_fusion(&mut model, &enc, &cfg.fusion_train(), expected, progress)?;
    Ok((model, log))
}

pub fn infer_config(cfg: &RunConfig) -> InferConfig {
    InferConfig { seed: cfg.seed, ..cfg.infer.clone() }
}

pub fn evaluate_linked(cfg: &RunConfig, model: &LinkedModel<f32>, dir: Direction, clips: &[AVSample]) -> Result<EvalSummary> {
    evaluate(model, dir, clips, &cfg.data, &infer_config(cfg), &cfg.eval)
}

/// Mean score over `clips` at every conditioning time of the run's grid.
pub fn sweep(cfg: &RunConfig, model: &LinkedModel<f32>, dir: Direction, clips: &[AVSample]) -> Result<Vec<SweepPoint>> {
    sweep_t_cond(&cfg.sweep_grid, |t| {
        let ic = InferConfig { t_cond: Some(t), ..infer_config(cfg) };
        let s = evaluate(model, dir, clips, &cfg.data, &ic, &cfg.eval)?;
        log::info!("sweep t_cond={t}: {} = {:.4}", s.metric, s.score);
        Ok((s.score, clips.len()))
    })
}

pub fn stage_meta(cfg: &RunConfig, stage: &str, log: &TrainLog) -> serde_json::Value {
    let (head, tail) = log.head_tail_means(0.1);
    json!({ "stage": stage, "seed": cfg.seed, "run_config_digest": cfg.digest(), "loss_head": head, "loss_tail": tail })
}

fn open_gates(store: &mut ParamStore<f64>, rng: &mut impl Rng, amp: f64) {
    for i in 0..store.len() {
        if let Ok(p) = store.get_mut(i) {
            p.mapv_inplace(|v| v + rng.gen_range(-amp..amp));
        }
    }
}

fn random_tokens(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

fn short_sequence(m: Modality, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<TokenSequence<f64>> {
    match m {
        Modality::Audio => TokenSequence::new(random_tokens(rng, 8, cfg.in_channels), m, 24.0, None),
        Modality::Video => TokenSequence::new(random_tokens(rng, 8, cfg.in_channels), m, 6.0, Some((2, 2, 2))),
    }
}

/// Central differences against autodiff for every parameter of a one-block
/// backbone of width and heads `bcfg`, in 64-bit with perturbed weights so no
/// gate is zero.
pub fn grad_check_dit_block(bcfg: &BackboneConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = stream(seed, Stream::Init);
    let cfg = BackboneConfig { n_blocks: 1, ..bcfg.clone() };
    let mut bb = Backbone::<f64>::new(cfg.clone(), 0, &mut rng)?;
    open_gates(&mut bb.store, &mut rng, 0.1);
    let x = short_sequence(cfg.modality, &cfg, &mut rng)?;
    let target = random_tokens(&mut rng, x.len(), x.channels());
    let mut store = bb.store.clone();
    grad_check(
        &mut store,
        |s| {
            let mut model = bb.clone();
            model.store = s.clone();
            let mut g = Graph::new();
            let v = model.forward_graph(&mut g, &x, 0.37, Some(&[1, 2]), true, None)?;
            let l = g.mse(v, target.clone());
            Ok((g.value(l)[[0, 0]], g.backward(l)))
        },
        opts,
    )
}

/// The same check for the parameters of one fusion block of `fcfg`'s
/// widths, linked to two perturbed one-block backbones.
pub fn grad_check_fusion_block(
    fcfg: &FusionConfig,
    audio: &BackboneConfig,
    video: &BackboneConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = stream(seed, Stream::Init);
    let a_cfg = BackboneConfig { n_blocks: 1, ..audio.clone() };
    let v_cfg = BackboneConfig { n_blocks: 1, ..video.clone() };
    let mut a = Backbone::<f64>::new(a_cfg.clone(), 0, &mut rng)?;
    let mut v = Backbone::<f64>::new(v_cfg.clone(), 1, &mut rng)?;
    open_gates(&mut a.store, &mut rng, 0.1);
    open_gates(&mut v.store, &mut rng, 0.1);
    let cfg = FusionConfig { n_fusion: 1, ..fcfg.clone() };
    let mut model = LinkedModel::new(a, v, cfg, &mut rng)?;
    open_gates(&mut model.fusion.store, &mut rng, 0.1);
    let xa = short_sequence(Modality::Audio, &a_cfg, &mut rng)?;
    let xv = short_sequence(Modality::Video, &v_cfg, &mut rng)?;
    let dir = fcfg.direction;
    let gen = if dir.generated() == Modality::Audio { &xa } else { &xv };
    let target = random_tokens(&mut rng, gen.len(), gen.channels());
    let ts = TimestepPair::for_direction(dir, 0.31, fcfg.t_cond)?;
    let mut store = model.fusion.store.clone();
    if store.is_frozen() {
        return Err(Error::contract("eval", "fusion store is frozen"));
    }
    grad_check(
        &mut store,
        |s| {
            let mut m = model.clone();
            m.fusion.store = s.clone();
            let mut g = Graph::new();
            let inp = LinkedInputs { audio: &xa, video: &xv, ts, audio_prompt: Some(&[1]), video_prompt: Some(&[0]) };
            let out = m.forward_graph(&mut g, dir, &inp, None)?;
            let l = g.mse(out, target.clone());
            Ok((g.value(l)[[0, 0]], g.backward(l)))
        },
        opts,
    )
}
