//! Fusion blocks linking a frozen audio backbone to a frozen video backbone.
//!
//! Both backbones run block by block in lockstep. At each placement point a
//! fusion block projects the two streams to a common width, mixes them with
//! joint self attention whose rotary angles come from [`tau`] (so audio and
//! video tokens of the same media instant rotate identically), and writes
//! gated residual updates back into the streams.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RopeTable, Var};
use crate::backbone::{
    adaln_modulate, rope_angles_1d, timestep_sinusoid, AdaLn, AttentionParams, Backbone, BackboneConfig, Modality,
    Stream, TokenSequence,
};
use crate::error::{Error, Result};
use crate::params::{Linear, Mlp, ParamStore};
use crate::real::{all_finite, cast, norm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// Evenly spread over the depth, the last one after the final block.
    Interleaved,
    /// All fusion blocks stacked after backbone block `k` (1-based; 0 means
    /// before the first block).
    AfterBlock(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    FusionBlock,
    ConcatToText,
    DirectAlignment,
    SymmetricCrossAttention,
    NoReinjection,
}

impl Injection {
    pub const ALL: [Injection; 5] = [
        Injection::FusionBlock,
        Injection::ConcatToText,
        Injection::DirectAlignment,
        Injection::SymmetricCrossAttention,
        Injection::NoReinjection,
    ];

    fn uses_branches(self) -> bool {
        matches!(self, Injection::FusionBlock | Injection::SymmetricCrossAttention | Injection::NoReinjection)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    V2A,
    A2V,
}

impl Direction {
    pub fn generated(self) -> Modality {
        match self {
            Direction::V2A => Modality::Audio,
            Direction::A2V => Modality::Video,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Direction::V2A => Direction::A2V,
            Direction::A2V => Direction::V2A,
        }
    }

    pub fn conditioning(self) -> Modality {
        self.generated().other()
    }

    /// Default conditioning time: 0.96 for V2A, 0.8 for A2V.
    pub fn default_t_cond(self) -> f64 {
        match self {
            Direction::V2A => 0.96,
            Direction::A2V => 0.8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v2a" => Ok(Direction::V2A),
            "a2v" => Ok(Direction::A2V),
            _ => Err(Error::Config(format!("unknown direction {s:?} (expected v2a or a2v)"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::V2A => "v2a",
            Direction::A2V => "a2v",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_fusion: usize,
    pub common_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub arrangement: Arrangement,
    pub injection: Injection,
    pub direction: Direction,
    pub shared_params_across_tasks: bool,
    pub t_cond: f64,
    pub rope_theta_base: f64,
    /// Width of each of the two sinusoidal timestep feature vectors.
    pub time_freq_dim: usize,
}

impl FusionConfig {
    pub fn toy(direction: Direction) -> Self {
        Self {
            n_fusion: 3,
            common_dim: 48,
            heads: 4,
            mlp_hidden: 96,
            arrangement: Arrangement::Interleaved,
            injection: Injection::FusionBlock,
            direction,
            shared_params_across_tasks: false,
            t_cond: direction.default_t_cond(),
            rope_theta_base: 10_000.0,
            time_freq_dim: 32,
        }
    }

    /// Eight interleaved blocks at width 1024.
    pub fn full_scale(direction: Direction) -> Self {
        Self { n_fusion: 8, common_dim: 1024, heads: 16, mlp_hidden: 4096, time_freq_dim: 256, ..Self::toy(direction) }
    }

    pub fn head_dim(&self) -> usize {
        self.common_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("fusion: {m}")));
        if self.n_fusion == 0 || self.heads == 0 || self.common_dim == 0 || self.mlp_hidden == 0 {
            return bad("n_fusion, heads, common_dim and mlp_hidden must be >= 1".into());
        }
        if self.common_dim % self.heads != 0 || self.head_dim() % 2 != 0 {
            return bad(format!("common_dim {} must split into {} heads of even width", self.common_dim, self.heads));
        }
        if !(0.0..=1.0).contains(&self.t_cond) {
            return bad(format!("t_cond {} outside [0, 1]", self.t_cond));
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad("time_freq_dim must be even and >= 2".into());
        }
        Ok(())
    }

    /// 1-based backbone block numbers after which each fusion block runs.
    pub fn placement(&self, depth: usize) -> Result<Vec<usize>> {
        match self.arrangement {
            Arrangement::Interleaved => {
                if self.n_fusion > depth {
                    return Err(Error::Config(format!(
                        "fusion: {} interleaved blocks do not fit a depth of {depth}",
                        self.n_fusion
                    )));
                }
                Ok((1..=self.n_fusion).map(|i| (i * depth + self.n_fusion / 2) / self.n_fusion).collect())
            }
            Arrangement::AfterBlock(k) if k <= depth => Ok(vec![k; self.n_fusion]),
            Arrangement::AfterBlock(k) => Err(Error::Config(format!("fusion: after_block({k}) beyond depth {depth}"))),
        }
    }

    pub fn digest(&self) -> String {
        crate::config::digest_of(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepPair {
    pub t_a: f64,
    pub t_v: f64,
}

impl TimestepPair {
    pub fn new(t_a: f64, t_v: f64) -> Result<Self> {
        for (n, t) in [("t_a", t_a), ("t_v", t_v)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::contract("fusion", format!("{n} = {t} outside [0, 1]")));
            }
        }
        Ok(Self { t_a, t_v })
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Audio => self.t_a,
            Modality::Video => self.t_v,
        }
    }

    /// Pair for a direction given the generated and conditioning times.
    pub fn for_direction(dir: Direction, t_gen: f64, t_cond: f64) -> Result<Self> {
        match dir {
            Direction::V2A => Self::new(t_gen, t_cond),
            Direction::A2V => Self::new(t_cond, t_gen),
        }
    }
}

/// Shared temporal coordinate: video temporal index `n` maps to `n`, audio
/// index `n` to `n * eta_v / eta_a`.
pub fn tau(n: usize, modality: Modality, eta_a: f64, eta_v: f64) -> f64 {
    match modality {
        Modality::Video => n as f64,
        Modality::Audio => n as f64 * eta_v / eta_a,
    }
}

/// [`tau`] of every token; all spatial tokens of a frame share its index.
pub fn tau_positions<T: Real>(seq: &TokenSequence<T>, eta_a: f64, eta_v: f64) -> Vec<f64> {
    seq.temporal_index().into_iter().map(|n| tau(n, seq.modality, eta_a, eta_v)).collect()
}

/// `[temporal_len, len]` matrix averaging the spatial tokens of each
/// temporal position.
pub fn temporal_pool_matrix<T: Real>(seq: &TokenSequence<T>) -> Array2<f64> {
    let idx = seq.temporal_index();
    let mult = seq.spatial_multiplicity() as f64;
    let mut m = Array2::zeros((seq.temporal_len(), seq.len()));
    for (tok, &p) in idx.iter().enumerate() {
        m[[p, tok]] = 1.0 / mult;
    }
    m
}

/// `[gen.len, cond.len]` matrix carrying pooled conditioning features onto
/// generated tokens. A generated temporal position covering media time
/// `[p / eta_g, (p + 1) / eta_g)` averages the conditioning positions that
/// start inside that interval, or repeats the one containing it when none do.
pub fn alignment_matrix<T: Real>(gen: &TokenSequence<T>, cond: &TokenSequence<T>) -> Array2<f64> {
    const EPS: f64 = 1e-9;
    let (eg, ec) = (gen.eta, cond.eta);
    let tc = cond.temporal_len();
    let mut per_pos = Array2::<f64>::zeros((gen.temporal_len(), tc));
    for p in 0..gen.temporal_len() {
        let lo = p as f64 * ec;
        let hi = (p + 1) as f64 * ec;
        let hits: Vec<usize> =
            (0..tc).filter(|&q| q as f64 * eg >= lo - EPS && (q as f64 * eg) < hi - EPS).collect();
        if hits.is_empty() {
            let q = ((p as f64 * ec / eg + EPS).floor() as usize).min(tc - 1);
            per_pos[[p, q]] = 1.0;
        } else {
            for &q in &hits {
                per_pos[[p, q]] = 1.0 / hits.len() as f64;
            }
        }
    }
    let pooled = per_pos.dot(&temporal_pool_matrix(cond));
    let gidx = gen.temporal_index();
    Array2::from_shape_fn((gen.len(), cond.len()), |(i, j)| pooled[[gidx[i], j]])
}

/// Per-modality half of a fusion block.
#[derive(Clone, Copy, Debug)]
pub struct ModalityBranch {
    /// Input normalization; its gate scales the final residual (backbone width).
    pub ada_in: AdaLn,
    pub proj_in: Linear,
    pub attn: AttentionParams,
    /// Pre-MLP normalization; its gate scales the attention residual (common width).
    pub ada_mid: AdaLn,
    pub mlp: Mlp,
}

impl ModalityBranch {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize, cfg: &FusionConfig) -> Self {
        let d = cfg.common_dim;
        Self {
            ada_in: AdaLn::new(store, rng, &format!("{name}.ada_in"), d, width, 1),
            proj_in: Linear::new(store, rng, &format!("{name}.proj_in"), width, d),
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), d, d, d, d, cfg.heads),
            ada_mid: AdaLn::new(store, rng, &format!("{name}.ada_mid"), d, d, 1),
            mlp: Mlp {
                fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, cfg.mlp_hidden),
                fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), cfg.mlp_hidden, width),
                silu: false,
            },
        }
    }
}

/// Parameters of one fusion block. Which fields exist depends on the
/// injection variant.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub index: usize,
    pub injection: Injection,
    pub cond_mlp: Mlp,
    pub audio: Option<ModalityBranch>,
    pub video: Option<ModalityBranch>,
    /// Direct alignment: conditioning width to generated width, zero-init.
    /// Indexed by generated modality (audio, video).
    pub align: Option<(Linear, Linear)>,
    /// Concat-to-text: pooled conditioning features to generated text width.
    pub to_text: Option<(Linear, Linear)>,
}

/// Queries/keys/values of one modality inside the joint attention.
struct Qkv {
    q: Var,
    k: Var,
    v: Var,
}

impl FusionBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        index: usize,
        cfg: &FusionConfig,
        audio: &BackboneConfig,
        video: &BackboneConfig,
    ) -> Self {
        let name = format!("fusion.{index}");
        let f = cfg.time_freq_dim;
        let d = cfg.common_dim;
        let cond_mlp = Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.t_embed.fc1"), 2 * f, d),
            fc2: Linear::new(store, rng, &format!("{name}.t_embed.fc2"), d, d),
            silu: true,
        };
        let (mut a, mut v, mut align, mut to_text) = (None, None, None, None);
        match cfg.injection {
            i if i.uses_branches() => {
                a = Some(ModalityBranch::new(store, rng, &format!("{name}.audio"), audio.hidden, cfg));
                v = Some(ModalityBranch::new(store, rng, &format!("{name}.video"), video.hidden, cfg));
            }
            Injection::DirectAlignment => {
                align = Some((
                    Linear::zeros(store, &format!("{name}.align_to_audio"), video.hidden, audio.hidden),
                    Linear::zeros(store, &format!("{name}.align_to_video"), audio.hidden, video.hidden),
                ));
            }
            _ => {
                to_text = Some((
                    Linear::new(store, rng, &format!("{name}.to_audio_text"), video.hidden, audio.text_dim),
                    Linear::new(store, rng, &format!("{name}.to_video_text"), audio.hidden, video.text_dim),
                ));
            }
        }
        Self { index, injection: cfg.injection, cond_mlp, audio: a, video: v, align, to_text }
    }

    /// SiLU-activated conditioning row from both flow times.
    pub fn cond_act<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, ts: TimestepPair, f: usize) -> Var {
        let ea = g.constant(timestep_sinusoid(ts.t_a, f));
        let ev = g.constant(timestep_sinusoid(ts.t_v, f));
        let e = g.concat_cols(&[ea, ev]);
        let c = self.cond_mlp.forward(g, store, e);
        g.silu(c)
    }

    fn project<'p, T: Real>(
        br: &ModalityBranch,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
        cond: Var,
        rope: &Arc<RopeTable<T>>,
    ) -> (Var, Qkv, [crate::backbone::Modulation; 2]) {
        let m_in = br.ada_in.compute(g, store, cond)[0];
        let m_mid = br.ada_mid.compute(g, store, cond)[0];
        let h = adaln_modulate(g, x, &m_in);
        let z = br.proj_in.forward(g, store, h);
        let q = br.attn.project_qk(g, store, z, true, Some(rope));
        let k = br.attn.project_qk(g, store, z, false, Some(rope));
        let v = br.attn.v.forward(g, store, z);
        (z, Qkv { q, k, v }, [m_in, m_mid])
    }

    fn finish_branch<'p, T: Real>(
        br: &ModalityBranch,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
        z: Var,
        attn: Var,
        m: &[crate::backbone::Modulation; 2],
    ) -> Var {
        let o = br.attn.out.forward(g, store, attn);
        let u = g.add_gated(z, m[1].gate, o);
        let h = adaln_modulate(g, u, &m[1]);
        let y = br.mlp.forward(g, store, h);
        g.add_gated(x, m[0].gate, y)
    }

    /// Joint (or, for the symmetric-cross-attention variant, crossed)
    /// attention block on both streams. Returns `(x̂_a, x̂_v)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        xa: Var,
        xv: Var,
        ts: TimestepPair,
        rope_a: &Arc<RopeTable<T>>,
        rope_v: &Arc<RopeTable<T>>,
        cfg: &FusionConfig,
    ) -> Result<(Var, Var)> {
        let (Some(ba), Some(bv)) = (&self.audio, &self.video) else {
            return Err(Error::contract("fusion", format!("{:?} block has no attention branches", self.injection)));
        };
        let (wa, wv) = (g.value(xa).ncols(), g.value(xv).ncols());
        if wa != ba.proj_in.fan_in || wv != bv.proj_in.fan_in {
            return Err(Error::contract(
                "fusion",
                format!("stream widths ({wa}, {wv}) do not match ({}, {})", ba.proj_in.fan_in, bv.proj_in.fan_in),
            ));
        }
        let cond = self.cond_act(g, store, ts, cfg.time_freq_dim);
        let (za, qa, ma) = Self::project(ba, g, store, xa, cond, rope_a);
        let (zv, qv, mv) = Self::project(bv, g, store, xv, cond, rope_v);
        let scale = ba.attn.logit_scale::<T>();
        let heads = cfg.heads;
        let (oa, ov) = if self.injection == Injection::SymmetricCrossAttention {
            (g.attention(qa.q, qv.k, qv.v, heads, scale), g.attention(qv.q, qa.k, qa.v, heads, scale))
        } else {
            let ta = g.value(xa).nrows();
            let q = g.concat_rows(&[qa.q, qv.q]);
            let k = g.concat_rows(&[qa.k, qv.k]);
            let v = g.concat_rows(&[qa.v, qv.v]);
            let o = g.attention(q, k, v, heads, scale);
            let n = g.value(o).nrows();
            (g.slice_rows(o, 0, ta), g.slice_rows(o, ta, n))
        };
        let ya = Self::finish_branch(ba, g, store, xa, za, oa, &ma);
        let yv = Self::finish_branch(bv, g, store, xv, zv, ov, &mv);
        for (y, m) in [(ya, Modality::Audio), (yv, Modality::Video)] {
            let val = g.value(y);
            if !all_finite(val) {
                return Err(Error::NonFinite {
                    module: "fusion",
                    location: format!("fusion block {} ({m} output)", self.index),
                    norm: norm(val),
                });
            }
        }
        Ok((ya, yv))
    }
}

/// The trainable part of a linked model.
#[derive(Clone, Debug)]
pub struct FusionStack<T> {
    pub store: ParamStore<T>,
    pub blocks: Vec<FusionBlock>,
    pub placement: Vec<usize>,
}

impl<T: Real> FusionStack<T> {
    pub fn new<R: Rng>(
        cfg: &FusionConfig,
        audio: &BackboneConfig,
        video: &BackboneConfig,
        store_id: u32,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if audio.n_blocks != video.n_blocks {
            return Err(Error::Config(format!(
                "fusion: backbone depths differ ({} audio vs {} video blocks)",
                audio.n_blocks, video.n_blocks
            )));
        }
        let placement = cfg.placement(audio.n_blocks)?;
        let mut store = ParamStore::new(store_id);
        let blocks = (0..cfg.n_fusion).map(|i| FusionBlock::new(&mut store, rng, i, cfg, audio, video)).collect();
        Ok(Self { store, blocks, placement })
    }

    pub fn cast<U: Real>(&self) -> FusionStack<U> {
        FusionStack { store: self.store.cast(), blocks: self.blocks.clone(), placement: self.placement.clone() }
    }
}

/// Inputs of one linked forward pass. Both sequences are already noised.
#[derive(Clone, Copy, Debug)]
pub struct LinkedInputs<'a, T> {
    pub audio: &'a TokenSequence<T>,
    pub video: &'a TokenSequence<T>,
    pub ts: TimestepPair,
    pub audio_prompt: Option<&'a [usize]>,
    pub video_prompt: Option<&'a [usize]>,
}

/// Stream activations recorded at every block boundary (inputs of block
/// `k + 1`, after any fusion placed there).
#[derive(Clone, Debug, Default)]
pub struct LinkedTaps {
    pub audio: Vec<Var>,
    pub video: Vec<Var>,
    /// Generated-side text token count seen by each block.
    pub text_tokens: Vec<usize>,
}

/// Two frozen backbones plus a fusion stack.
#[derive(Clone, Debug)]
pub struct LinkedModel<T> {
    pub audio: Backbone<T>,
    pub video: Backbone<T>,
    pub config: FusionConfig,
    pub fusion: FusionStack<T>,
}

impl<T: Real> LinkedModel<T> {
    /// Links two backbones (frozen here) with freshly initialized fusion
    /// blocks.
    pub fn new<R: Rng>(mut audio: Backbone<T>, mut video: Backbone<T>, config: FusionConfig, rng: &mut R) -> Result<Self> {
        if audio.config.modality != Modality::Audio || video.config.modality != Modality::Video {
            return Err(Error::Config("fusion: expected (audio, video) backbones".into()));
        }
        audio.store.set_id(0);
        video.store.set_id(1);
        audio.freeze();
        video.freeze();
        let fusion = FusionStack::new(&config, &audio.config, &video.config, 2, rng)?;
        Ok(Self { audio, video, config, fusion })
    }

    pub fn from_parts(mut audio: Backbone<T>, mut video: Backbone<T>, config: FusionConfig, fusion: FusionStack<T>) -> Result<Self> {
        audio.freeze();
        video.freeze();
        let placement = config.placement(audio.n_blocks())?;
        if placement != fusion.placement || audio.n_blocks() != video.n_blocks() {
            return Err(Error::Config("fusion: stack placement does not match configuration".into()));
        }
        Ok(Self { audio, video, config, fusion })
    }

    pub fn backbone(&self, m: Modality) -> &Backbone<T> {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Fusion parameters serving `dir`. With shared task parameters both
    /// directions resolve to the same storage.
    pub fn stack(&self, dir: Direction) -> Result<&FusionStack<T>> {
        if self.config.shared_params_across_tasks || dir == self.config.direction {
            Ok(&self.fusion)
        } else {
            Err(Error::Config(format!("model was trained for {} only, not {dir}", self.config.direction)))
        }
    }

    fn text<'p>(&'p self, g: &mut Graph<'p, T>, m: Modality, prompt: Option<&[usize]>) -> Result<Var> {
        self.backbone(m).text_tokens(g, prompt)
    }

    /// Lockstep forward; returns the generated modality's velocity node.
    pub fn forward_graph<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        dir: Direction,
        inp: &LinkedInputs<'_, T>,
        mut taps: Option<&mut LinkedTaps>,
    ) -> Result<Var> {
        let stack = self.stack(dir)?;
        let cfg = &self.config;
        let gen_m = dir.generated();
        let mut sa = self.audio.begin(g, inp.audio, inp.ts.t_a)?;
        let mut sv = self.video.begin(g, inp.video, inp.ts.t_v)?;
        let text_a = self.text(g, Modality::Audio, inp.audio_prompt)?;
        let text_v = self.text(g, Modality::Video, inp.video_prompt)?;
        let mut gen_text = if gen_m == Modality::Audio { text_a } else { text_v };

        let (eta_a, eta_v) = (inp.audio.eta, inp.video.eta);
        let fusion_rope = |seq: &TokenSequence<T>| -> Result<Arc<RopeTable<T>>> {
            let pos = tau_positions(seq, eta_a, eta_v);
            Ok(Arc::new(RopeTable::from_angles(&rope_angles_1d(&pos, cfg.rope_theta_base, cfg.head_dim())?)))
        };
        let (rope_a, rope_v) = if cfg.injection.uses_branches() {
            (Some(fusion_rope(inp.audio)?), Some(fusion_rope(inp.video)?))
        } else {
            (None, None)
        };
        let (gen_seq, cond_seq) = match gen_m {
            Modality::Audio => (inp.audio, inp.video),
            Modality::Video => (inp.video, inp.audio),
        };
        let aux = match cfg.injection {
            Injection::DirectAlignment => Some(g.constant(cast(&alignment_matrix(gen_seq, cond_seq)))),
            Injection::ConcatToText => Some(g.constant(cast(&temporal_pool_matrix(cond_seq)))),
            _ => None,
        };
        let base_text = gen_text;
        let depth = self.audio.n_blocks();
        // the conditioning stream is dead after the last placement
        let cond_needed = stack.placement.iter().copied().max().unwrap_or(0);

        let apply = |g: &mut Graph<'p, T>, after: usize, sa: &mut Stream<T>, sv: &mut Stream<T>, gen_text: &mut Var| -> Result<()> {
            for (fb, _) in stack.blocks.iter().zip(&stack.placement).filter(|(_, &p)| p == after) {
                let (gen_s, cond_s) = match gen_m {
                    Modality::Audio => (&mut *sa, &mut *sv),
                    Modality::Video => (&mut *sv, &mut *sa),
                };
                match cfg.injection {
                    Injection::DirectAlignment => {
                        let (to_a, to_v) = fb.align.expect("alignment params");
                        let lin = if gen_m == Modality::Audio { to_a } else { to_v };
                        let moved = g.matmul(aux.expect("alignment matrix"), cond_s.h);
                        let delta = lin.forward(g, &stack.store, moved);
                        gen_s.h = g.add(gen_s.h, delta);
                    }
                    Injection::ConcatToText => {
                        let (to_a, to_v) = fb.to_text.expect("text projection");
                        let lin = if gen_m == Modality::Audio { to_a } else { to_v };
                        let pooled = g.matmul(aux.expect("pool matrix"), cond_s.h);
                        let extra = lin.forward(g, &stack.store, pooled);
                        *gen_text = g.concat_rows(&[base_text, extra]);
                    }
                    inj => {
                        let (ya, yv) = fb.forward(
                            g,
                            &stack.store,
                            sa.h,
                            sv.h,
                            inp.ts,
                            rope_a.as_ref().expect("rope"),
                            rope_v.as_ref().expect("rope"),
                            cfg,
                        )?;
                        let reinject_cond = inj != Injection::NoReinjection;
                        match gen_m {
                            Modality::Audio => {
                                sa.h = ya;
                                if reinject_cond {
                                    sv.h = yv;
                                }
                            }
                            Modality::Video => {
                                sv.h = yv;
                                if reinject_cond {
                                    sa.h = ya;
                                }
                            }
                        }
                    }
                }
            }
            Ok(())
        };

        apply(g, 0, &mut sa, &mut sv, &mut gen_text)?;
        for k in 0..depth {
            let (ta, tv) = match gen_m {
                Modality::Audio => (gen_text, text_v),
                Modality::Video => (text_a, gen_text),
            };
            let run_cond = k < cond_needed;
            if gen_m == Modality::Audio || run_cond {
                self.audio.block(g, k, &mut sa, Some(ta))?;
            }
            if gen_m == Modality::Video || run_cond {
                self.video.block(g, k, &mut sv, Some(tv))?;
            }
            if let Some(t) = taps.as_deref_mut() {
                t.text_tokens.push(g.value(gen_text).nrows());
            }
            apply(g, k + 1, &mut sa, &mut sv, &mut gen_text)?;
            if let Some(t) = taps.as_deref_mut() {
                t.audio.push(sa.h);
                t.video.push(sv.h);
            }
        }
        let out = match gen_m {
            Modality::Audio => self.audio.finish(g, &sa),
            Modality::Video => self.video.finish(g, &sv),
        };
        Ok(out)
    }

    /// Velocity of the generated modality.
    pub fn forward(&self, dir: Direction, inp: &LinkedInputs<'_, T>) -> Result<Array2<T>> {
        let mut g = Graph::new();
        let v = self.forward_graph(&mut g, dir, inp, None)?;
        Ok(g.value(v).clone())
    }

    pub fn cast<U: Real>(&self) -> LinkedModel<U> {
        LinkedModel {
            audio: self.audio.cast(),
            video: self.video.cast(),
            config: self.config.clone(),
            fusion: self.fusion.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::rotate;
    use crate::backbone::patchify_video;
    use ndarray::{Array4, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_backbones(rng: &mut ChaCha8Rng) -> (Backbone<f64>, Backbone<f64>) {
        let a = BackboneConfig { n_blocks: 2, hidden: 16, heads: 2, mlp_hidden: 32, text_dim: 8, time_freq_dim: 16, ..BackboneConfig::toy_audio() };
        let v = BackboneConfig { n_blocks: 2, hidden: 12, heads: 1, mlp_hidden: 24, text_dim: 8, time_freq_dim: 16, ..BackboneConfig::toy_video() };
        let (mut a, mut v) = (Backbone::new(a, 0, rng).unwrap(), Backbone::new(v, 1, rng).unwrap());
        // stand-in for training: open the zero-initialized gates
        randomize(&mut a.store, rng, 0.1);
        randomize(&mut v.store, rng, 0.1);
        (a, v)
    }

    fn tiny_fusion(dir: Direction) -> FusionConfig {
        FusionConfig { n_fusion: 2, common_dim: 8, heads: 2, mlp_hidden: 16, time_freq_dim: 8, ..FusionConfig::toy(dir) }
    }

    /// Audio: 8 tokens at 24/s; video: 2 frames of 2x2 patches at 6 fps.
    fn tiny_inputs(rng: &mut ChaCha8Rng) -> (TokenSequence<f64>, TokenSequence<f64>) {
        let a = TokenSequence::new(Array2::from_shape_simple_fn((8, 4), || rng.gen_range(-1.0..1.0)), Modality::Audio, 24.0, None).unwrap();
        let frames = Array4::from_shape_simple_fn((2, 8, 8, 1), || rng.gen_range(-1.0..1.0));
        (a, patchify_video(&frames, 4, 6.0).unwrap())
    }

    fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amp: f64) {
        for i in 0..store.len() {
            store.get_mut(i).unwrap().mapv_inplace(|v| v + rng.gen_range(-amp..amp));
        }
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau(5, Modality::Video, 24.0, 6.0), 5.0);
        assert_eq!(tau(24, Modality::Audio, 24.0, 6.0), 6.0);
        assert_eq!(tau(0, Modality::Audio, 24.0, 6.0), 0.0);
        assert_eq!(tau(0, Modality::Video, 24.0, 6.0), 0.0);
    }

    #[test]
    fn tau_agrees_on_shared_media_grid() {
        let (eta_a, eta_v) = (24.0, 6.0);
        // every multiple of 1/6 s inside 5.16 s is integer on both grids
        for i in 0..=30 {
            let s = i as f64 / 6.0;
            let na = (s * eta_a).round() as usize;
            let nv = (s * eta_v).round() as usize;
            assert!((tau(na, Modality::Audio, eta_a, eta_v) - tau(nv, Modality::Video, eta_a, eta_v)).abs() <= 1e-9);
        }
    }

    #[test]
    fn interleaved_placement() {
        let c = FusionConfig::toy(Direction::V2A);
        assert_eq!(c.placement(6).unwrap(), vec![2, 4, 6]);
        assert_eq!(FusionConfig::full_scale(Direction::V2A).placement(24).unwrap(), vec![3, 6, 9, 12, 15, 18, 21, 24]);
        assert_eq!(FusionConfig { arrangement: Arrangement::AfterBlock(1), ..c.clone() }.placement(6).unwrap(), vec![1, 1, 1]);
        assert!(FusionConfig { n_fusion: 7, ..c.clone() }.placement(6).is_err());
        assert!(FusionConfig { arrangement: Arrangement::AfterBlock(7), ..c }.placement(6).is_err());
    }

    proptest! {
        #[test]
        fn interleaved_positions_increase_and_end_at_depth(depth in 1usize..40, n in 1usize..40) {
            prop_assume!(n <= depth);
            let c = FusionConfig { n_fusion: n, ..FusionConfig::toy(Direction::V2A) };
            let p = c.placement(depth).unwrap();
            prop_assert_eq!(p.len(), n);
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(*p.last().unwrap(), depth);
            prop_assert!(p[0] >= 1);
        }

        #[test]
        fn shared_time_gets_shared_angle(frame in 0usize..31, shift in -50.0f64..50.0) {
            let na = frame * 4;
            let a = rope_angles_1d(&[tau(na, Modality::Audio, 24.0, 6.0) + shift], 10_000.0, 8).unwrap();
            let v = rope_angles_1d(&[tau(frame, Modality::Video, 24.0, 6.0) + shift], 10_000.0, 8).unwrap();
            for k in 0..4 {
                prop_assert!((a[[0, k]] - v[[0, k]]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn aligned_logits_are_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (hd, t) = (8, 16);
        let q = Array2::from_shape_simple_fn((t, hd), || rng.gen_range(-1.0..1.0));
        let k = Array2::from_shape_simple_fn((t, hd), || rng.gen_range(-1.0..1.0));
        // audio queries at 24/s, video keys at 6 fps, both covering the same span
        let pa: Vec<f64> = (0..t).map(|n| tau(n, Modality::Audio, 24.0, 6.0)).collect();
        let pv: Vec<f64> = (0..t).map(|n| tau(n / 4, Modality::Video, 24.0, 6.0)).collect();
        let logits = |shift: f64| {
            let ra = RopeTable::from_angles(&rope_angles_1d(&pa.iter().map(|p| p + shift).collect::<Vec<_>>(), 10_000.0, hd).unwrap());
            let rv = RopeTable::from_angles(&rope_angles_1d(&pv.iter().map(|p| p + shift).collect::<Vec<_>>(), 10_000.0, hd).unwrap());
            rotate(&q, &ra, hd, false).dot(&rotate(&k, &rv, hd, false).t())
        };
        let base = logits(0.0);
        for shift in [1.0, 7.25, 31.0, -3.5] {
            let d = (&logits(shift) - &base).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(d <= 1e-6, "shift {shift}: {d}");
        }
    }

    #[test]
    fn fusion_block_identity_at_init_and_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ab, vb) = tiny_backbones(&mut rng);
        let cfg = tiny_fusion(Direction::V2A);
        let stack = FusionStack::<f64>::new(&cfg, &ab.config, &vb.config, 2, &mut rng).unwrap();
        let (a, v) = tiny_inputs(&mut rng);
        let mut g = Graph::new();
        let xa = g.constant(Array2::from_shape_simple_fn((8, 16), || rng.gen_range(-1.0..1.0)));
        let xv = g.constant(Array2::from_shape_simple_fn((8, 12), || rng.gen_range(-1.0..1.0)));
        let ra = Arc::new(RopeTable::from_angles(&rope_angles_1d(&tau_positions(&a, 24.0, 6.0), 1e4, 4).unwrap()));
        let rv = Arc::new(RopeTable::from_angles(&rope_angles_1d(&tau_positions(&v, 24.0, 6.0), 1e4, 4).unwrap()));
        let ts = TimestepPair::new(0.3, 0.96).unwrap();
        let (ya, yv) = stack.blocks[0].forward(&mut g, &stack.store, xa, xv, ts, &ra, &rv, &cfg).unwrap();
        assert_eq!(g.value(ya), g.value(xa));
        assert_eq!(g.value(yv), g.value(xv));
        let att = g.attention_nodes()[0];
        for h in 0..2 {
            let p = g.attention_probs(att, h).unwrap();
            assert_eq!(p.ncols(), 16);
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
        let bad = g.constant(Array2::zeros((8, 5)));
        assert!(stack.blocks[0].forward(&mut g, &stack.store, bad, xv, ts, &ra, &rv, &cfg).is_err());
    }

    #[test]
    fn degenerate_joint_attention_reduces_to_scaled_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ab, vb) = tiny_backbones(&mut rng);
        let cfg = tiny_fusion(Direction::V2A);
        let mut stack = FusionStack::<f64>::new(&cfg, &ab.config, &vb.config, 2, &mut rng).unwrap();
        randomize(&mut stack.store, &mut rng, 0.3);
        let bv = stack.blocks[0].video.unwrap();
        for p in [bv.attn.v.w, bv.attn.v.b] {
            stack.store.get_mut(p).unwrap().fill(0.0);
        }
        let ba = stack.blocks[0].audio.unwrap();
        let (a, v) = tiny_inputs(&mut rng);
        let ra = Arc::new(RopeTable::from_angles(&rope_angles_1d(&tau_positions(&a, 24.0, 6.0), 1e4, 4).unwrap()));
        let rv = Arc::new(RopeTable::from_angles(&rope_angles_1d(&tau_positions(&v, 24.0, 6.0), 1e4, 4).unwrap()));
        let ts = TimestepPair::new(0.3, 0.96).unwrap();
        let x_a = Array2::from_shape_simple_fn((8, 16), || rng.gen_range(-1.0..1.0));
        let x_v = Array2::from_shape_simple_fn((8, 12), || rng.gen_range(-1.0..1.0));

        let mut g = Graph::new();
        let xa = g.constant(x_a);
        let xv = g.constant(x_v);
        let cond = stack.blocks[0].cond_act(&mut g, &stack.store, ts, cfg.time_freq_dim);
        let (_, qa, _) = FusionBlock::project(&ba, &mut g, &stack.store, xa, cond, &ra);
        let (_, qv, _) = FusionBlock::project(&bv, &mut g, &stack.store, xv, cond, &rv);
        let sc = ba.attn.logit_scale::<f64>();
        let q = g.concat_rows(&[qa.q, qv.q]);
        let k = g.concat_rows(&[qa.k, qv.k]);
        let vv = g.concat_rows(&[qa.v, qv.v]);
        let joint = g.attention(q, k, vv, 2, sc);
        let joint_a = g.slice_rows(joint, 0, 8);
        let own = g.attention(qa.q, qa.k, qa.v, 2, sc);
        for h in 0..2 {
            let p = g.attention_probs(joint, h).unwrap();
            let mass: Vec<f64> = (0..8).map(|i| p.row(i).slice(ndarray::s![..8]).sum()).collect();
            for i in 0..8 {
                for c in h * 4..(h + 1) * 4 {
                    let expect = g.value(own)[[i, c]] * mass[i];
                    assert!((g.value(joint_a)[[i, c]] - expect).abs() <= 1e-6);
                }
            }
        }
    }

    fn all_variant_models(rng: &mut ChaCha8Rng, dir: Direction) -> Vec<LinkedModel<f64>> {
        let (ab, vb) = tiny_backbones(rng);
        let mut out = Vec::new();
        for arr in [Arrangement::Interleaved, Arrangement::AfterBlock(0), Arrangement::AfterBlock(1), Arrangement::AfterBlock(2)] {
            for inj in Injection::ALL {
                let cfg = FusionConfig { arrangement: arr, injection: inj, ..tiny_fusion(dir) };
                out.push(LinkedModel::new(ab.clone(), vb.clone(), cfg, rng).unwrap());
            }
        }
        out
    }

    #[test]
    fn identity_at_init_for_every_arrangement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, v) = tiny_inputs(&mut rng);
        for dir in [Direction::V2A, Direction::A2V] {
            for m in all_variant_models(&mut rng, dir) {
                let inp = LinkedInputs { audio: &a, video: &v, ts: TimestepPair::new(0.4, 0.9).unwrap(), audio_prompt: Some(&[1]), video_prompt: Some(&[0, 4]) };
                let out = m.forward(dir, &inp).unwrap();
                let gen = dir.generated();
                let (seq, t, prompt) = match gen {
                    Modality::Audio => (&a, 0.4, inp.audio_prompt),
                    Modality::Video => (&v, 0.9, inp.video_prompt),
                };
                assert_eq!(out.dim(), seq.data.dim());
                if m.config.injection == Injection::ConcatToText {
                    continue;
                }
                let (alone, _) = m.backbone(gen).forward(seq, t, prompt, false).unwrap();
                let d = (&out - &alone).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
                assert!(d <= 1e-6, "{:?} {:?} {dir}: {d}", m.config.arrangement, m.config.injection);
            }
        }
    }

    #[test]
    fn reinjection_changes_conditioning_stream_only_when_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ab, vb) = tiny_backbones(&mut rng);
        let (a, v) = tiny_inputs(&mut rng);
        let inp = LinkedInputs { audio: &a, video: &v, ts: TimestepPair::new(0.4, 0.96).unwrap(), audio_prompt: None, video_prompt: Some(&[0]) };
        let cond_stream = |inj: Injection, rng: &mut ChaCha8Rng| {
            let cfg = FusionConfig { injection: inj, arrangement: Arrangement::AfterBlock(1), ..tiny_fusion(Direction::V2A) };
            let mut m = LinkedModel::new(ab.clone(), vb.clone(), cfg, rng).unwrap();
            randomize(&mut m.fusion.store, rng, 0.2);
            let mut g = Graph::new();
            let mut taps = LinkedTaps::default();
            m.forward_graph(&mut g, Direction::V2A, &inp, Some(&mut taps)).unwrap();
            (g.value(taps.video[0]).clone(), g.value(taps.audio[0]).clone())
        };
        let mut g = Graph::new();
        let mut trace = Vec::new();
        vb.forward_graph(&mut g, &v, 0.96, Some(&[0]), true, Some(&mut trace)).unwrap();
        let frozen_v = g.value(trace[0]).clone();
        let (v_fb, _) = cond_stream(Injection::FusionBlock, &mut rng);
        let (v_nr, _) = cond_stream(Injection::NoReinjection, &mut rng);
        assert_ne!(v_fb, frozen_v);
        assert_eq!(v_nr, frozen_v);
    }

    #[test]
    fn concat_to_text_adds_one_token_per_conditioning_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ab, vb) = tiny_backbones(&mut rng);
        let (a, v) = tiny_inputs(&mut rng);
        let cfg = FusionConfig { injection: Injection::ConcatToText, arrangement: Arrangement::AfterBlock(1), ..tiny_fusion(Direction::V2A) };
        let m = LinkedModel::new(ab, vb, cfg, &mut rng).unwrap();
        let inp = LinkedInputs { audio: &a, video: &v, ts: TimestepPair::new(0.4, 0.96).unwrap(), audio_prompt: Some(&[1, 5]), video_prompt: None };
        let mut g = Graph::new();
        let mut taps = LinkedTaps::default();
        m.forward_graph(&mut g, Direction::V2A, &inp, Some(&mut taps)).unwrap();
        assert_eq!(taps.text_tokens, vec![2, 2 + v.temporal_len()]);
    }

    #[test]
    fn alignment_matrix_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, v) = tiny_inputs(&mut rng);
        // equal rates: identity
        assert_eq!(alignment_matrix(&a, &a), Array2::<f64>::eye(8));
        // audio from video: each audio token repeats its frame's pooled patches
        let m = alignment_matrix(&a, &v);
        assert_eq!(m.dim(), (8, 8));
        for i in 0..8 {
            for j in 0..8 {
                let expect = if j / 4 == i / 4 { 0.25 } else { 0.0 };
                assert_eq!(m[[i, j]], expect);
            }
        }
        // video from audio: a frame averages its 4 audio tokens
        let m = alignment_matrix(&v, &a);
        for i in 0..8 {
            for j in 0..8 {
                let expect = if j / 4 == i / 4 { 0.25 } else { 0.0 };
                assert_eq!(m[[i, j]], expect);
            }
        }
        for row in m.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_backbones_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, v) = tiny_inputs(&mut rng);
        for dir in [Direction::V2A, Direction::A2V] {
            for mut m in all_variant_models(&mut rng, dir) {
                randomize(&mut m.fusion.store, &mut rng, 0.05);
                let inp = LinkedInputs { audio: &a, video: &v, ts: TimestepPair::new(0.5, 0.5).unwrap(), audio_prompt: Some(&[1]), video_prompt: Some(&[0]) };
                let mut g = Graph::new();
                let out = m.forward_graph(&mut g, dir, &inp, None).unwrap();
                let n = g.value(out).dim();
                let loss = g.mse(out, Array2::zeros(n));
                let grads = g.backward(loss);
                assert!(grads.keys().all(|k| k.store == 2), "{:?}", m.config.injection);
                // text appended after the final block is never read
                let dead = m.config.injection == Injection::ConcatToText && m.fusion.placement[0] == 2;
                assert_eq!(!dead, grads.for_store(2).any(|(_, gr)| gr.iter().any(|&x| x != 0.0)), "{:?}", m.config);
                assert_eq!(grads.for_store(0).count() + grads.for_store(1).count(), 0);
            }
        }
    }

    #[test]
    fn shared_parameters_are_the_same_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ab, vb) = tiny_backbones(&mut rng);
        let shared = LinkedModel::new(ab.clone(), vb.clone(), FusionConfig { shared_params_across_tasks: true, ..tiny_fusion(Direction::V2A) }, &mut rng).unwrap();
        assert!(std::ptr::eq(shared.stack(Direction::V2A).unwrap(), shared.stack(Direction::A2V).unwrap()));
        let single = LinkedModel::new(ab, vb, tiny_fusion(Direction::V2A), &mut rng).unwrap();
        assert!(single.stack(Direction::A2V).is_err());
    }

    #[test]
    fn unequal_depths_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (ab, vb) = tiny_backbones(&mut rng);
        let mut cfg = vb.config.clone();
        cfg.n_blocks = 3;
        let vb3 = Backbone::new(cfg, 1, &mut rng).unwrap();
        assert!(LinkedModel::new(ab, vb3, tiny_fusion(Direction::V2A), &mut rng).is_err());
        let _ = vb;
    }
}
