//! Training loops for the base backbones and for fusion blocks over frozen
//! backbones.

use std::path::Path;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients};
use crate::backbone::{Backbone, BackboneConfig, Modality, TokenSequence};
use crate::data::{encode_audio, encode_video, AVSample, DataGenConfig};
use crate::error::{Error, Result};
use crate::flowmatch::{interpolate, sample_t, LogitNormalParams};
use crate::fusion::{Direction, LinkedInputs, LinkedModel, TimestepPair};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch: usize,
    pub t_dist_base: LogitNormalParams,
    pub t_dist_fusion: LogitNormalParams,
    pub drop_text_base: f64,
    pub drop_gen_prompt: f64,
    pub drop_cond_prompt: f64,
    /// Overrides the fusion config's conditioning time.
    pub t_cond_fixed: Option<f64>,
    /// Draw the conditioning time from U(0, 1) per sample instead.
    pub t_cond_uniform: bool,
    pub seed: u64,
    /// Worker threads for the batch (0: rayon default).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            betas: (0.9, 0.99),
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 200,
            total_steps: 3000,
            batch: 16,
            t_dist_base: LogitNormalParams::STANDARD,
            t_dist_fusion: LogitNormalParams::SHIFTED,
            drop_text_base: 0.10,
            drop_gen_prompt: 0.50,
            drop_cond_prompt: 0.20,
            t_cond_fixed: None,
            t_cond_uniform: false,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale step budgets: 50k (video base), 100k (audio base), 250k (fusion).
    pub fn full_scale(total_steps: usize) -> Self {
        Self { warmup_steps: 10_000, total_steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        for (n, p) in [
            ("drop_text_base", self.drop_text_base),
            ("drop_gen_prompt", self.drop_gen_prompt),
            ("drop_cond_prompt", self.drop_cond_prompt),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{n} = {p} is not a probability"));
            }
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup {} exceeds total {}", self.warmup_steps, self.total_steps));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if let Some(t) = self.t_cond_fixed {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("t_cond_fixed {t} outside [0, 1]"));
            }
        }
        self.t_dist_base.validate()?;
        self.t_dist_fusion.validate()
    }
}

/// Linear warmup from 0 to `lr`, then constant.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let z: Vec<Array2<T>> = store.values().iter().map(|a| Array2::zeros(a.dim())).collect();
        Self { m: z.clone(), v: z, step: 0 }
    }
}

/// One AdamW update with decoupled weight decay. Returns `false` (and leaves
/// everything untouched) when a gradient is non-finite.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<bool> {
    if store.is_frozen() {
        return Err(Error::contract("train", "optimizer was handed a frozen parameter store"));
    }
    if !grads.all_finite() {
        return Ok(false);
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let (lr_t, c1t, c2t, eps) = (T::of(lr), T::of(c1), T::of(c2), T::of(cfg.eps));
    for i in 0..store.len() {
        let key = store.key(i);
        let p = store.get_mut(i)?;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        match grads.get(key) {
            Some(g) => ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1t * *m + ob1 * g;
                *v = b2t * *v + ob2 * g * g;
                let upd = (*m / c1t) / ((*v / c2t).sqrt() + eps);
                *p = *p * decay - lr_t * upd;
            }),
            None => ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                *m = b1t * *m;
                *v = b2t * *v;
                let upd = (*m / c1t) / ((*v / c2t).sqrt() + eps);
                *p = *p * decay - lr_t * upd;
            }),
        }
    }
    Ok(true)
}

/// A sample encoded to token space once, up front.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub audio: TokenSequence<f32>,
    pub video: TokenSequence<f32>,
    pub audio_prompt: Option<Vec<usize>>,
    pub video_prompt: Option<Vec<usize>>,
}

impl Encoded {
    pub fn tokens(&self, m: Modality) -> &TokenSequence<f32> {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn prompt(&self, m: Modality) -> Option<&[usize]> {
        match m {
            Modality::Audio => self.audio_prompt.as_deref(),
            Modality::Video => self.video_prompt.as_deref(),
        }
    }
}

pub fn encode_samples(samples: &[AVSample], cfg: &DataGenConfig, patch: usize) -> Result<Vec<Encoded>> {
    samples
        .iter()
        .map(|s| {
            Ok(Encoded {
                audio: encode_audio(&s.audio, cfg)?.0,
                video: encode_video(&s.video, cfg, patch)?,
                audio_prompt: s.audio_prompt.clone(),
                video_prompt: s.video_prompt.clone(),
            })
        })
        .collect()
}

/// One row of the loss CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Samples whose (generated-side) prompt was dropped.
    pub dropped_gen: usize,
    pub dropped_cond: usize,
    /// Samples with every prompt dropped (the unconditional branch).
    pub dropped_both: usize,
    pub mean_t_cond: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LossRow>,
    /// Every conditioning time used, in draw order.
    pub t_cond_draws: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::eval::write_rows(path, &self.rows)
    }

    /// Mean loss of the first and last `frac` of the steps.
    pub fn head_tail_means(&self, frac: f64) -> (f64, f64) {
        let n = ((self.rows.len() as f64 * frac).ceil() as usize).max(1).min(self.rows.len());
        let mean = |r: &[LossRow]| r.iter().map(|x| x.loss).sum::<f64>() / r.len().max(1) as f64;
        (mean(&self.rows[..n]), mean(&self.rows[self.rows.len() - n..]))
    }
}

/// Epoch-wise reshuffled index stream.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self { order: (0..n).collect(), pos: 0, rng: stream(seed, Stream::Shuffle) };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn gaussian_like(rng: &mut ChaCha8Rng, dim: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_simple_fn(dim, || rng.sample::<f32, _>(StandardNormal))
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Sums per-sample gradients in batch order and divides by the batch size.
fn reduce(parts: Vec<(f64, Gradients<f32>)>) -> (f64, Gradients<f32>) {
    let n = parts.len() as f64;
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.accumulate(g);
    }
    total.scale(1.0 / n as f32);
    (loss / n, total)
}

/// Per-step progress callback: `(step, loss)`.
pub type Progress<'a> = Option<&'a mut dyn FnMut(usize, f64)>;

struct BaseItem {
    idx: usize,
    t: f64,
    x0: Array2<f32>,
    drop: bool,
}

/// Trains one backbone from scratch with flow matching.
pub fn train_base(
    modality: Modality,
    data: &[Encoded],
    bcfg: &BackboneConfig,
    cfg: &TrainConfig,
    mut progress: Progress<'_>,
) -> Result<(Backbone<f32>, TrainLog)> {
    cfg.validate()?;
    if bcfg.modality != modality {
        return Err(Error::Config(format!("train_base: {modality} run got a {} backbone config", bcfg.modality)));
    }
    if data.is_empty() {
        return Err(Error::Config("train_base: empty dataset".into()));
    }
    let mut model = Backbone::<f32>::new(bcfg.clone(), 0, &mut stream(cfg.seed, Stream::Init))?;
    let mut state = AdamState::new(&model.store);
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut t_rng = stream(cfg.seed, Stream::Timestep);
    let mut n_rng = stream(cfg.seed, Stream::Noise);
    let mut d_rng = stream(cfg.seed, Stream::Dropout);
    let mut log = TrainLog::default();
    for step in 0..cfg.total_steps {
        let items: Vec<BaseItem> = (0..cfg.batch)
            .map(|_| {
                let idx = batcher.next();
                let t = sample_t(&cfg.t_dist_base, &mut t_rng);
                let x0 = gaussian_like(&mut n_rng, data[idx].tokens(modality).data.dim());
                let drop = d_rng.gen_bool(cfg.drop_text_base);
                BaseItem { idx, t, x0, drop }
            })
            .collect();
        let m = &model;
        let parts = with_pool(cfg.threads, || {
            items
                .par_iter()
                .map(|it| -> Result<(f64, Gradients<f32>)> {
                    let x1 = data[it.idx].tokens(modality);
                    let xt = x1.with_data(interpolate(&it.x0, &x1.data, it.t)?);
                    let prompt = if it.drop { None } else { data[it.idx].prompt(modality) };
                    let mut g = Graph::new();
                    let v = m.forward_graph(&mut g, &xt, it.t, prompt, true, None)?;
                    let loss = g.mse(v, &x1.data - &it.x0);
                    Ok((g.value(loss)[[0, 0]] as f64, g.backward(loss)))
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let (loss, grads) = reduce(parts);
        let lr = lr_schedule(step, cfg);
        let ok = adamw_step(&mut model.store, &grads, &mut state, cfg, lr)?;
        if !ok {
            warn!("{modality} step {step}: non-finite gradient, update skipped");
        }
        let dropped = items.iter().filter(|i| i.drop).count();
        log.rows.push(LossRow {
            step,
            loss,
            lr,
            dropped_gen: dropped,
            dropped_cond: 0,
            dropped_both: dropped,
            mean_t_cond: f64::NAN,
            skipped: !ok,
        });
        if let Some(p) = progress.as_deref_mut() {
            p(step, loss);
        }
        if step % 100 == 0 {
            info!("{modality} base step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    Ok((model, log))
}

struct FusionItem {
    idx: usize,
    dir: Direction,
    t_gen: f64,
    t_cond: f64,
    x0: Array2<f32>,
    eps: Array2<f32>,
    drop_gen: bool,
    drop_cond: bool,
}

/// Conditioning time used for `dir` when not drawn uniformly.
pub fn effective_t_cond(model: &LinkedModel<f32>, cfg: &TrainConfig, dir: Direction) -> f64 {
    cfg.t_cond_fixed.unwrap_or(if model.config.shared_params_across_tasks {
        dir.default_t_cond()
    } else {
        model.config.t_cond
    })
}

/// Builds the noised inputs of one linked forward pass.
pub fn noised_pair(
    sample: &Encoded,
    dir: Direction,
    t_gen: f64,
    t_cond: f64,
    x0: &Array2<f32>,
    eps: &Array2<f32>,
) -> Result<(TokenSequence<f32>, TokenSequence<f32>, TimestepPair)> {
    let gen = sample.tokens(dir.generated());
    let cond = sample.tokens(dir.conditioning());
    let g = gen.with_data(interpolate(x0, &gen.data, t_gen)?);
    let c = cond.with_data(interpolate(eps, &cond.data, t_cond)?);
    let ts = TimestepPair::for_direction(dir, t_gen, t_cond)?;
    Ok(match dir {
        Direction::V2A => (g, c, ts),
        Direction::A2V => (c, g, ts),
    })
}

/// Trains the fusion blocks of `model` with both backbones frozen.
///
/// `expected` holds the backbone parameter digests recorded in their
/// checkpoints; training refuses to start when they differ.
pub fn train_fusion(
    model: &mut LinkedModel<f32>,
    data: &[Encoded],
    cfg: &TrainConfig,
    expected: Option<(&str, &str)>,
    mut progress: Progress<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    model.config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("train_fusion: empty dataset".into()));
    }
    if !model.audio.is_frozen() || !model.video.is_frozen() {
        return Err(Error::contract("train", "backbones must be frozen for fusion training"));
    }
    let before = (model.audio.store.digest(), model.video.store.digest());
    if let Some((a, v)) = expected {
        for (what, want, have) in [("audio backbone", a, &before.0), ("video backbone", v, &before.1)] {
            if want != have {
                return Err(Error::DigestMismatch { what: what.into(), expected: want.into(), found: have.clone() });
            }
        }
    }
    let shared = model.config.shared_params_across_tasks;
    let mut state = AdamState::new(&model.fusion.store);
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut t_rng = stream(cfg.seed, Stream::Timestep);
    let mut n_rng = stream(cfg.seed, Stream::Noise);
    let mut d_rng = stream(cfg.seed, Stream::Dropout);
    let mut log = TrainLog::default();
    let mut counter = 0usize;
    for step in 0..cfg.total_steps {
        let items: Vec<FusionItem> = (0..cfg.batch)
            .map(|_| {
                let idx = batcher.next();
                let dir = if shared && counter % 2 == 1 { model.config.direction.other() } else { model.config.direction };
                counter += 1;
                let t_gen = sample_t(&cfg.t_dist_fusion, &mut t_rng);
                let t_cond = if cfg.t_cond_uniform { t_rng.gen::<f64>() } else { effective_t_cond(model, cfg, dir) };
                let s = &data[idx];
                let x0 = gaussian_like(&mut n_rng, s.tokens(dir.generated()).data.dim());
                let eps = gaussian_like(&mut n_rng, s.tokens(dir.conditioning()).data.dim());
                let drop_gen = d_rng.gen_bool(cfg.drop_gen_prompt);
                let drop_cond = d_rng.gen_bool(cfg.drop_cond_prompt);
                FusionItem { idx, dir, t_gen, t_cond, x0, eps, drop_gen, drop_cond }
            })
            .collect();
        let m = &*model;
        let parts = with_pool(cfg.threads, || {
            items
                .par_iter()
                .map(|it| -> Result<(f64, Gradients<f32>)> {
                    let s = &data[it.idx];
                    let (a, v, ts) = noised_pair(s, it.dir, it.t_gen, it.t_cond, &it.x0, &it.eps)?;
                    let gen_m = it.dir.generated();
                    let keep = |mm: Modality| {
                        let dropped = if mm == gen_m { it.drop_gen } else { it.drop_cond };
                        if dropped { None } else { s.prompt(mm) }
                    };
                    let inp = LinkedInputs {
                        audio: &a,
                        video: &v,
                        ts,
                        audio_prompt: keep(Modality::Audio),
                        video_prompt: keep(Modality::Video),
                    };
                    let mut g = Graph::new();
                    let out = m.forward_graph(&mut g, it.dir, &inp, None)?;
                    let target = &s.tokens(gen_m).data - &it.x0;
                    let loss = g.mse(out, target);
                    Ok((g.value(loss)[[0, 0]] as f64, g.backward(loss)))
                })
                .collect::<Result<Vec<_>>>()
        })??;
        let (loss, grads) = reduce(parts);
        if grads.keys().any(|k| k.store != model.fusion.store.id()) {
            return Err(Error::contract("train", "gradient registered on a frozen backbone parameter"));
        }
        let lr = lr_schedule(step, cfg);
        let ok = adamw_step(&mut model.fusion.store, &grads, &mut state, cfg, lr)?;
        if !ok {
            warn!("fusion step {step}: non-finite gradient, update skipped");
        }
        log.t_cond_draws.extend(items.iter().map(|i| i.t_cond));
        log.rows.push(LossRow {
            step,
            loss,
            lr,
            dropped_gen: items.iter().filter(|i| i.drop_gen).count(),
            dropped_cond: items.iter().filter(|i| i.drop_cond).count(),
            dropped_both: items.iter().filter(|i| i.drop_gen && i.drop_cond).count(),
            mean_t_cond: items.iter().map(|i| i.t_cond).sum::<f64>() / items.len() as f64,
            skipped: !ok,
        });
        if let Some(p) = progress.as_deref_mut() {
            p(step, loss);
        }
        if step % 100 == 0 {
            info!("fusion step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    let after = (model.audio.store.digest(), model.video.store.digest());
    if after != before {
        return Err(Error::contract("train", "frozen backbone parameters changed during fusion training"));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamKey;
    use crate::data::gen_dataset;
    use crate::flowmatch::sigmoid;
    use crate::fusion::FusionConfig;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig { warmup_steps: 100, ..Default::default() };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(100, &cfg), cfg.lr);
        assert_eq!(lr_schedule(50, &cfg), cfg.lr / 2.0);
        assert_eq!(lr_schedule(5000, &cfg), cfg.lr);
    }

    fn one_param(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.add("w", Array2::from_shape_vec((1, vals.len()), vals.to_vec()).unwrap());
        s
    }

    fn grads_of(store: &ParamStore<f64>, g: Array2<f64>) -> Gradients<f64> {
        let mut gr = Graph::<f64>::new();
        let v = gr.input(store.key(0), Array2::zeros(g.dim()));
        let o = gr.weighted_sum(v, g);
        gr.backward(o)
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop_and_descends_on_square() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut s = one_param(&[1.0, -2.0]);
        let mut st = AdamState::new(&s);
        let z = grads_of(&s, Array2::zeros((1, 2)));
        adamw_step(&mut s, &z, &mut st, &cfg, 1e-2).unwrap();
        assert_eq!(s.get(0), &ndarray::array![[1.0, -2.0]]);

        let mut s = one_param(&[1.0]);
        let mut st = AdamState::new(&s);
        let w = s.get(0)[[0, 0]];
        let g = grads_of(&s, ndarray::array![[2.0 * w]]);
        adamw_step(&mut s, &g, &mut st, &cfg, 1e-2).unwrap();
        assert!(s.get(0)[[0, 0]] < 1.0 && s.get(0)[[0, 0]] > 0.0);
    }

    #[test]
    fn adamw_matches_reference_recurrence() {
        let cfg = TrainConfig { weight_decay: 0.05, ..Default::default() };
        let lr = 1e-2;
        let mut s = one_param(&[0.5, -1.5, 2.0]);
        let mut st = AdamState::new(&s);
        let (mut p, mut m, mut v) = ([0.5f64, -1.5, 2.0], [0.0f64; 3], [0.0f64; 3]);
        for t in 1..=5 {
            let g: Vec<f64> = p.iter().map(|x| 3.0 * x * x - 1.0).collect();
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.99f64.powi(t));
                p[i] = p[i] - lr * 0.05 * p[i] - lr * mh / (vh.sqrt() + 1e-8);
            }
            let cur = s.get(0).clone();
            let gr = grads_of(&s, cur.mapv(|x| 3.0 * x * x - 1.0));
            adamw_step(&mut s, &gr, &mut st, &cfg, lr).unwrap();
            for i in 0..3 {
                assert!((s.get(0)[[0, i]] - p[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adamw_refuses_frozen_and_skips_non_finite() {
        let cfg = TrainConfig::default();
        let mut s = one_param(&[1.0]);
        let mut st = AdamState::new(&s);
        let bad = grads_of(&s, ndarray::array![[f64::NAN]]);
        assert!(!adamw_step(&mut s, &bad, &mut st, &cfg, 1e-3).unwrap());
        assert_eq!(st.step, 0);
        s.freeze();
        let ok = grads_of(&s, ndarray::array![[1.0]]);
        assert!(adamw_step(&mut s, &ok, &mut st, &cfg, 1e-3).is_err());
        let _ = ParamKey::input(0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { drop_gen_prompt: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: 10, total_steps: 5, ..Default::default() }.validate().is_err());
    }

    fn micro_data(n: usize) -> (DataGenConfig, Vec<Encoded>) {
        let cfg = DataGenConfig::default();
        let samples = gen_dataset(&cfg, 0, n).unwrap();
        let enc = encode_samples(&samples, &cfg, 4).unwrap();
        (cfg, enc)
    }

    fn micro_audio() -> BackboneConfig {
        BackboneConfig { n_blocks: 1, hidden: 8, heads: 2, mlp_hidden: 8, text_dim: 4, time_freq_dim: 8, ..BackboneConfig::toy_audio() }
    }

    fn micro_video() -> BackboneConfig {
        BackboneConfig { n_blocks: 1, hidden: 6, heads: 1, mlp_hidden: 8, text_dim: 4, time_freq_dim: 8, ..BackboneConfig::toy_video() }
    }

    #[test]
    fn null_text_path_is_exercised_at_the_configured_rate() {
        let (_, data) = micro_data(4);
        let cfg = TrainConfig { total_steps: 1000, warmup_steps: 10, batch: 1, ..Default::default() };
        let (_, log) = train_base(Modality::Audio, &data, &micro_audio(), &cfg, None).unwrap();
        let dropped: usize = log.rows.iter().map(|r| r.dropped_gen).sum();
        let (n, p) = (1000.0, 0.1);
        let sd = (n * p * (1.0 - p) as f64).sqrt();
        assert!((dropped as f64 - n * p).abs() <= 3.0 * sd, "dropped {dropped}");
    }

    #[test]
    fn base_loss_starts_near_data_scale_and_decreases() {
        let (_, data) = micro_data(8);
        let cfg = TrainConfig { total_steps: 300, warmup_steps: 20, batch: 4, lr: 3e-3, ..Default::default() };
        let (_, log) = train_base(Modality::Audio, &data, &micro_audio(), &cfg, None).unwrap();
        // E|x1 - x0|^2 per element = E[x1^2] + 1
        let ex2: f64 = data.iter().map(|d| d.audio.data.mapv(|v| (v * v) as f64).mean().unwrap()).sum::<f64>() / 8.0;
        let first = log.rows[0].loss;
        assert!(first > 0.7 * (ex2 + 1.0) && first < 1.4 * (ex2 + 1.0), "first {first} vs {}", ex2 + 1.0);
        let (head, tail) = log.head_tail_means(0.1);
        assert!(tail < head, "{head} -> {tail}");
    }

    fn micro_linked(dir: Direction) -> (LinkedModel<f32>, Vec<Encoded>) {
        let (_, data) = micro_data(4);
        let mut rng = stream(1, Stream::Init);
        let a = Backbone::<f32>::new(micro_audio(), 0, &mut rng).unwrap();
        let v = Backbone::<f32>::new(micro_video(), 1, &mut rng).unwrap();
        let fc = FusionConfig { n_fusion: 1, common_dim: 8, heads: 2, mlp_hidden: 8, time_freq_dim: 8, ..FusionConfig::toy(dir) };
        (LinkedModel::new(a, v, fc, &mut rng).unwrap(), data)
    }

    #[test]
    fn fusion_training_keeps_backbones_and_uses_point_mass_t_cond() {
        let (mut m, data) = micro_linked(Direction::V2A);
        let before = (m.audio.store.digest(), m.video.store.digest(), m.fusion.store.digest());
        let cfg = TrainConfig { total_steps: 5, warmup_steps: 1, batch: 2, ..Default::default() };
        let log = train_fusion(&mut m, &data, &cfg, Some((&before.0, &before.1)), None).unwrap();
        assert_eq!((m.audio.store.digest(), m.video.store.digest()), (before.0.clone(), before.1.clone()));
        assert_ne!(m.fusion.store.digest(), before.2);
        assert!(log.t_cond_draws.iter().all(|&t| t == 0.96));
        assert!(matches!(
            train_fusion(&mut m, &data, &cfg, Some(("x", &before.1)), None),
            Err(Error::DigestMismatch { .. })
        ));
    }

    #[test]
    fn shifted_timesteps_have_low_median() {
        let mut rng = stream(3, Stream::Timestep);
        let mut ts: Vec<f64> = (0..20_000).map(|_| sample_t(&LogitNormalParams::SHIFTED, &mut rng)).collect();
        ts.sort_by(f64::total_cmp);
        let mean = ts.iter().sum::<f64>() / ts.len() as f64;
        assert!(mean < 0.5);
        assert!((ts[10_000] - sigmoid(-1.0)).abs() < 0.01, "median {}", ts[10_000]);
    }

    #[test]
    fn training_is_bit_reproducible_across_thread_counts() {
        let run = |threads| {
            let (mut m, data) = micro_linked(Direction::A2V);
            let cfg = TrainConfig { total_steps: 3, warmup_steps: 1, batch: 3, threads, ..Default::default() };
            let log = train_fusion(&mut m, &data, &cfg, None, None).unwrap();
            (m.fusion.store.digest(), log.rows.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn both_cfg_branches_are_trained() {
        let (mut m, data) = micro_linked(Direction::V2A);
        let cfg = TrainConfig { total_steps: 20, warmup_steps: 1, batch: 4, ..Default::default() };
        let log = train_fusion(&mut m, &data, &cfg, None, None).unwrap();
        let both: usize = log.rows.iter().map(|r| r.dropped_both).sum();
        let none: usize = log.rows.iter().map(|r| r.batch_kept()).sum();
        assert!(both > 0 && none > 0);
    }

    impl LossRow {
        fn batch_kept(&self) -> usize {
            // rows record 4 samples each in this test
            4 - (self.dropped_gen + self.dropped_cond - self.dropped_both)
        }
    }
}
