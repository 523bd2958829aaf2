//! Modality-generic diffusion transformer.
//!
//! Tokens are embedded to the hidden width, pass through `n_blocks` DiT
//! blocks (adaLN-modulated self attention with QK normalization and RoPE,
//! text cross attention, MLP; every branch behind a zero-initialized gate)
//! and a final adaLN + linear head that predicts the flow velocity.
//!
//! The forward pass is split into [`Backbone::begin`], [`Backbone::block`]
//! and [`Backbone::finish`] so that two backbones can be stepped in lockstep
//! with fusion blocks in between.

use std::sync::Arc;

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RopeTable, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Linear, Mlp, ParamStore, INIT_STD};
use crate::real::{all_finite, norm, Real};

pub const LN_EPS: f64 = 1e-6;
/// Flow time is multiplied by this before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Audio => Modality::Video,
            Modality::Video => Modality::Audio,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// A timed token sequence for one modality.
///
/// `eta` counts temporal positions per second of media time (audio tokens
/// per second, video frames per second). Video sequences additionally carry
/// their `(frames, rows, cols)` grid; all tokens of one frame share a
/// temporal position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub data: Array2<T>,
    pub modality: Modality,
    pub eta: f64,
    pub grid: Option<(usize, usize, usize)>,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(data: Array2<T>, modality: Modality, eta: f64, grid: Option<(usize, usize, usize)>) -> Result<Self> {
        let seq = Self { data, modality, eta, grid };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = self.data.dim();
        if t == 0 || d == 0 {
            return Err(Error::contract("backbone", format!("empty token sequence {t}x{d}")));
        }
        if !(self.eta > 0.0) {
            return Err(Error::contract("backbone", format!("eta must be > 0, got {}", self.eta)));
        }
        if let Some((f, h, w)) = self.grid {
            if f * h * w != t {
                return Err(Error::contract("backbone", format!("grid {f}x{h}x{w} does not match {t} tokens")));
            }
        }
        if self.modality == Modality::Video && self.grid.is_none() {
            return Err(Error::contract("backbone", "video tokens need a grid"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Number of temporal positions (frames for video).
    pub fn temporal_len(&self) -> usize {
        match self.grid {
            Some((f, _, _)) => f,
            None => self.len(),
        }
    }

    /// Tokens sharing one temporal position.
    pub fn spatial_multiplicity(&self) -> usize {
        match self.grid {
            Some((_, h, w)) => h * w,
            None => 1,
        }
    }

    /// Temporal index of every token.
    pub fn temporal_index(&self) -> Vec<usize> {
        let m = self.spatial_multiplicity();
        (0..self.len()).map(|n| n / m).collect()
    }

    pub fn tokens_per_second(&self) -> f64 {
        self.eta * self.spatial_multiplicity() as f64
    }

    pub fn with_data(&self, data: Array2<T>) -> Self {
        Self { data, modality: self.modality, eta: self.eta, grid: self.grid }
    }
}

/// Splits `[F, H, W, C]` frames into `patch x patch` tokens, frame-major then
/// row-major then column-major. Channels inside a token are ordered
/// `(dy, dx, c)`.
pub fn patchify_video<T: Real>(frames: &Array4<T>, patch: usize, fps: f64) -> Result<TokenSequence<T>> {
    let (f, h, w, c) = frames.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::contract("backbone", format!("frame {h}x{w} not divisible by patch {patch}")));
    }
    let (hp, wp) = (h / patch, w / patch);
    let mut data = Array2::zeros((f * hp * wp, c * patch * patch));
    for fi in 0..f {
        for r in 0..hp {
            for col in 0..wp {
                let tok = fi * hp * wp + r * wp + col;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            data[[tok, (dy * patch + dx) * c + ch]] = frames[[fi, r * patch + dy, col * patch + dx, ch]];
                        }
                    }
                }
            }
        }
    }
    TokenSequence::new(data, Modality::Video, fps, Some((f, hp, wp)))
}

/// Inverse of [`patchify_video`].
pub fn unpatchify_video<T: Real>(tokens: &TokenSequence<T>, patch: usize) -> Result<Array4<T>> {
    let (f, hp, wp) = tokens
        .grid
        .ok_or_else(|| Error::contract("backbone", "unpatchify needs a grid"))?;
    let d = tokens.channels();
    if patch == 0 || d % (patch * patch) != 0 {
        return Err(Error::contract("backbone", format!("{d} channels not divisible by patch area")));
    }
    let c = d / (patch * patch);
    let mut frames = Array4::zeros((f, hp * patch, wp * patch, c));
    for fi in 0..f {
        for r in 0..hp {
            for col in 0..wp {
                let tok = fi * hp * wp + r * wp + col;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            frames[[fi, r * patch + dy, col * patch + dx, ch]] = tokens.data[[tok, (dy * patch + dx) * c + ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(frames)
}

/// Rotary angles `position(n) * theta_base^(-2k / head_dim)`, shape `[T, head_dim / 2]`.
pub fn rope_angles_1d(positions: &[f64], theta_base: f64, head_dim: usize) -> Result<Array2<f64>> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::contract("backbone", format!("rope head_dim must be even, got {head_dim}")));
    }
    let pairs = head_dim / 2;
    let freqs: Vec<f64> = (0..pairs)
        .map(|k| theta_base.powf(-2.0 * k as f64 / head_dim as f64))
        .collect();
    Ok(Array2::from_shape_fn((positions.len(), pairs), |(n, k)| positions[n] * freqs[k]))
}

/// 3-D rotary angles: channel pairs split into three equal contiguous groups
/// for (frame, row, column), each laddered like [`rope_angles_1d`].
pub fn rope_angles_3d(grid: (usize, usize, usize), theta_base: f64, head_dim: usize) -> Result<Array2<f64>> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::contract("backbone", format!("rope head_dim must be even, got {head_dim}")));
    }
    let pairs = head_dim / 2;
    if pairs % 3 != 0 {
        let need = pairs.div_ceil(3) * 3 * 2;
        return Err(Error::contract(
            "backbone",
            format!("3-D RoPE needs head_dim/2 divisible by 3; head_dim {head_dim} must be padded to {need}"),
        ));
    }
    let group = pairs / 3;
    let (f, hp, wp) = grid;
    let n = f * hp * wp;
    let mut out = Array2::zeros((n, pairs));
    let unit = rope_angles_1d(&[1.0], theta_base, group * 2)?;
    for fi in 0..f {
        for r in 0..hp {
            for c in 0..wp {
                let tok = fi * hp * wp + r * wp + c;
                for (axis, coord) in [fi, r, c].into_iter().enumerate() {
                    for k in 0..group {
                        out[[tok, axis * group + k]] = coord as f64 * unit[[0, k]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sinusoidal features of `t * TIME_SCALE` over log-spaced frequencies, `[1, dim]`.
pub fn timestep_sinusoid<T: Real>(t: f64, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = t * TIME_SCALE * freq;
        out[[0, i]] = T::of(a.cos());
        out[[0, half + i]] = T::of(a.sin());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub modality: Modality,
    pub n_blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Video spatial patch edge; unused for audio.
    pub patch: usize,
    pub rope_theta_base: f64,
    pub text_vocab: usize,
    pub text_dim: usize,
    /// Channels of one input token.
    pub in_channels: usize,
    /// Width of the sinusoidal timestep features.
    pub time_freq_dim: usize,
}

impl BackboneConfig {
    /// Desk-scale audio backbone.
    pub fn toy_audio() -> Self {
        Self {
            modality: Modality::Audio,
            n_blocks: 6,
            hidden: 64,
            heads: 4,
            mlp_hidden: 256,
            patch: 1,
            rope_theta_base: 10_000.0,
            text_vocab: crate::data::VOCAB_SIZE,
            text_dim: 16,
            in_channels: crate::data::AUDIO_SAMPLES_PER_TOKEN,
            time_freq_dim: 64,
        }
    }

    /// Desk-scale video backbone. 3-D RoPE needs `head_dim / 2` divisible by
    /// three, hence 2 heads of width 24.
    pub fn toy_video() -> Self {
        Self {
            modality: Modality::Video,
            n_blocks: 6,
            hidden: 48,
            heads: 2,
            mlp_hidden: 192,
            patch: 4,
            rope_theta_base: 10_000.0,
            text_vocab: crate::data::VOCAB_SIZE,
            text_dim: 16,
            in_channels: 16,
            time_freq_dim: 64,
        }
    }

    /// Full-size layout (24 blocks, width 1024, 16 heads, MLP 4096, 2x2 patches).
    pub fn full_scale(modality: Modality) -> Self {
        Self {
            modality,
            n_blocks: 24,
            hidden: 1024,
            heads: 16,
            mlp_hidden: 4096,
            patch: 2,
            rope_theta_base: 10_000.0,
            text_vocab: 32_128,
            text_dim: 4096,
            in_channels: match modality {
                Modality::Audio => 64,
                Modality::Video => 12,
            },
            time_freq_dim: 256,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone ({}): {m}", self.modality)));
        if self.n_blocks == 0 || self.patch == 0 || self.heads == 0 || self.in_channels == 0 {
            return bad("n_blocks, patch, heads and in_channels must be >= 1".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even", self.head_dim()));
        }
        if self.modality == Modality::Video && (self.head_dim() / 2) % 3 != 0 {
            return bad(format!("3-D RoPE needs head_dim/2 divisible by 3, head_dim is {}", self.head_dim()));
        }
        if self.text_vocab == 0 || self.text_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad("text_vocab/text_dim must be >= 1 and time_freq_dim even".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        crate::config::digest_of(self)
    }
}

/// Per-block DiT outputs recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct ActivationTrace<T> {
    pub per_block: Vec<Array2<T>>,
}

/// Modulation parameters for one adaLN-conditioned branch.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift: Var,
    pub scale: Var,
    pub gate: Var,
}

/// Computes `sets` (shift, scale, gate) triples from a conditioning vector;
/// the gate projection is zero-initialized.
#[derive(Clone, Copy, Debug)]
pub struct AdaLn {
    pub modulation: Linear,
    pub gate: Linear,
    pub width: usize,
    pub sets: usize,
}

impl AdaLn {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cond: usize, width: usize, sets: usize) -> Self {
        Self {
            modulation: Linear::new(store, rng, &format!("{name}.mod"), cond, 2 * width * sets),
            gate: Linear::zeros(store, &format!("{name}.gate"), cond, width * sets),
            width,
            sets,
        }
    }

    /// `cond_act` is the already SiLU-activated conditioning row.
    pub fn compute<'p, T: Real>(&self, g: &mut Graph<'p, T>, store: &'p ParamStore<T>, cond_act: Var) -> Vec<Modulation> {
        let m = self.modulation.forward(g, store, cond_act);
        let gt = self.gate.forward(g, store, cond_act);
        let w = self.width;
        (0..self.sets)
            .map(|i| Modulation {
                shift: g.slice_cols(m, 2 * i * w, (2 * i + 1) * w),
                scale: g.slice_cols(m, (2 * i + 1) * w, (2 * i + 2) * w),
                gate: g.slice_cols(gt, i * w, (i + 1) * w),
            })
            .collect()
    }
}

/// Layer norm followed by `x (1 + scale) + shift`.
pub fn adaln_modulate<T: Real>(g: &mut Graph<'_, T>, x: Var, m: &Modulation) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    g.modulate(n, m.shift, m.scale)
}

/// Multi-head attention projections with per-head QK normalization.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub q_scale: usize,
    pub k_scale: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        q_in: usize,
        kv_in: usize,
        width: usize,
        out: usize,
        heads: usize,
    ) -> Self {
        let head_dim = width / heads;
        let init = Array2::from_elem((1, heads), T::of((head_dim as f64).sqrt()));
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), q_in, width),
            k: Linear::new(store, rng, &format!("{name}.k"), kv_in, width),
            v: Linear::new(store, rng, &format!("{name}.v"), kv_in, width),
            out: Linear::new(store, rng, &format!("{name}.out"), width, out),
            q_scale: store.add(format!("{name}.q_scale"), init.clone()),
            k_scale: store.add(format!("{name}.k_scale"), init),
            heads,
            head_dim,
        }
    }

    /// Normalized, scaled and optionally rotated queries (or keys).
    pub fn project_qk<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
        query: bool,
        rope: Option<&Arc<RopeTable<T>>>,
    ) -> Var {
        let (lin, sc) = if query { (self.q, self.q_scale) } else { (self.k, self.k_scale) };
        let y = lin.forward(g, store, x);
        let y = g.l2_norm_heads(y, self.head_dim);
        let y = match rope {
            Some(t) => g.rope(y, t.clone(), self.head_dim),
            None => y,
        };
        let s = store.var(g, sc);
        g.head_scale(y, s, self.head_dim)
    }

    pub fn logit_scale<T: Real>(&self) -> T {
        T::of(1.0 / (self.head_dim as f64).sqrt())
    }

    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
        ctx: Var,
        q_rope: Option<&Arc<RopeTable<T>>>,
        k_rope: Option<&Arc<RopeTable<T>>>,
    ) -> Var {
        let q = self.project_qk(g, store, x, true, q_rope);
        let k = self.project_qk(g, store, ctx, false, k_rope);
        let v = self.v.forward(g, store, ctx);
        let a = g.attention(q, k, v, self.heads, self.logit_scale());
        self.out.forward(g, store, a)
    }
}

/// One DiT block.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub ada: AdaLn,
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub mlp: Mlp,
}

const SA: usize = 0;
const CA: usize = 1;
const FF: usize = 2;

impl DitBlock {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &BackboneConfig) -> Self {
        let h = cfg.hidden;
        Self {
            ada: AdaLn::new(store, rng, &format!("{name}.ada"), h, h, 3),
            self_attn: AttentionParams::new(store, rng, &format!("{name}.sa"), h, h, h, h, cfg.heads),
            cross_attn: AttentionParams::new(store, rng, &format!("{name}.ca"), h, cfg.text_dim, h, h, cfg.heads),
            mlp: Mlp {
                fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), h, cfg.mlp_hidden),
                fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), cfg.mlp_hidden, h),
                silu: false,
            },
        }
    }

    /// `x + g1 * SA(mod1 x) + g2 * CA(mod2 x, text) + g3 * MLP(mod3 x)`, applied
    /// sequentially; cross attention is skipped without text.
    pub fn forward<'p, T: Real>(
        &self,
        g: &mut Graph<'p, T>,
        store: &'p ParamStore<T>,
        x: Var,
        cond_act: Var,
        text: Option<Var>,
        rope: &Arc<RopeTable<T>>,
    ) -> Var {
        let m = self.ada.compute(g, store, cond_act);
        let h = adaln_modulate(g, x, &m[SA]);
        let a = self.self_attn.forward(g, store, h, h, Some(rope), Some(rope));
        let mut x = g.add_gated(x, m[SA].gate, a);
        if let Some(text) = text {
            let h = adaln_modulate(g, x, &m[CA]);
            let a = self.cross_attn.forward(g, store, h, text, None, None);
            x = g.add_gated(x, m[CA].gate, a);
        }
        let h = adaln_modulate(g, x, &m[FF]);
        let f = self.mlp.forward(g, store, h);
        g.add_gated(x, m[FF].gate, f)
    }
}

/// Running state of one backbone during a (possibly lockstep) forward pass.
#[derive(Clone, Debug)]
pub struct Stream<T> {
    pub h: Var,
    pub cond_act: Var,
    pub rope: Arc<RopeTable<T>>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub store: ParamStore<T>,
    x_embed: Linear,
    t_mlp: Mlp,
    text_table: usize,
    null_text: usize,
    blocks: Vec<DitBlock>,
    final_mod: Linear,
    final_proj: Linear,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng>(config: BackboneConfig, store_id: u32, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(store_id);
        let h = config.hidden;
        let x_embed = Linear::new(&mut store, rng, "x_embed", config.in_channels, h);
        let t_mlp = Mlp {
            fc1: Linear::new(&mut store, rng, "t_embed.fc1", config.time_freq_dim, h),
            fc2: Linear::new(&mut store, rng, "t_embed.fc2", h, h),
            silu: true,
        };
        let text_table = store.add("text.table", trunc_normal(rng, config.text_vocab, config.text_dim, 1.0));
        let null_text = store.add("text.null", trunc_normal(rng, 1, config.text_dim, 1.0));
        let blocks = (0..config.n_blocks)
            .map(|i| DitBlock::new(&mut store, rng, &format!("blocks.{i}"), &config))
            .collect();
        let final_mod = Linear::new(&mut store, rng, "final.mod", h, 2 * h);
        let final_proj = Linear::new(&mut store, rng, "final.proj", h, config.in_channels);
        Ok(Self { config, store, x_embed, t_mlp, text_table, null_text, blocks, final_mod, final_proj })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn check_input(&self, x: &TokenSequence<T>) -> Result<()> {
        x.validate()?;
        if x.modality != self.config.modality {
            return Err(Error::contract("backbone", format!("{} backbone got {} tokens", self.config.modality, x.modality)));
        }
        if x.channels() != self.config.in_channels {
            return Err(Error::contract(
                "backbone",
                format!("expected {} channels per token, got {}", self.config.in_channels, x.channels()),
            ));
        }
        Ok(())
    }

    /// Rotary table for a token layout: 1-D over token index for audio,
    /// 3-D over the grid for video.
    pub fn rope_table(&self, x: &TokenSequence<T>) -> Result<Arc<RopeTable<T>>> {
        let hd = self.config.head_dim();
        let angles = match (self.config.modality, x.grid) {
            (Modality::Video, Some(grid)) => rope_angles_3d(grid, self.config.rope_theta_base, hd)?,
            _ => {
                let pos: Vec<f64> = (0..x.len()).map(|n| n as f64).collect();
                rope_angles_1d(&pos, self.config.rope_theta_base, hd)?
            }
        };
        Ok(Arc::new(RopeTable::from_angles(&angles)))
    }

    /// Learned time conditioning row `[1, hidden]` (before SiLU).
    pub fn timestep_embed<'p>(&'p self, g: &mut Graph<'p, T>, t: f64) -> Var {
        let f = g.constant(timestep_sinusoid(t, self.config.time_freq_dim));
        self.t_mlp.forward(g, &self.store, f)
    }

    /// Text tokens for a prompt; `None` selects the learned null token.
    pub fn text_tokens<'p>(&'p self, g: &mut Graph<'p, T>, prompt: Option<&[usize]>) -> Result<Var> {
        match prompt {
            Some(ids) if !ids.is_empty() => {
                if let Some(bad) = ids.iter().find(|&&i| i >= self.config.text_vocab) {
                    return Err(Error::contract("backbone", format!("token id {bad} outside vocab")));
                }
                let table = self.store.var(g, self.text_table);
                Ok(g.gather(table, ids))
            }
            _ => Ok(self.store.var(g, self.null_text)),
        }
    }

    pub fn begin<'p>(&'p self, g: &mut Graph<'p, T>, x: &TokenSequence<T>, t: f64) -> Result<Stream<T>> {
        self.check_input(x)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract("backbone", format!("flow time {t} outside [0, 1]")));
        }
        let rope = self.rope_table(x)?;
        let xin = g.constant(x.data.clone());
        let h = self.x_embed.forward(g, &self.store, xin);
        let c = self.timestep_embed(g, t);
        let cond_act = g.silu(c);
        Ok(Stream { h, cond_act, rope })
    }

    /// Runs block `k` (0-based) on the stream.
    pub fn block<'p>(&'p self, g: &mut Graph<'p, T>, k: usize, s: &mut Stream<T>, text: Option<Var>) -> Result<()> {
        let out = self.blocks[k].forward(g, &self.store, s.h, s.cond_act, text, &s.rope);
        let v = g.value(out);
        if !all_finite(v) {
            return Err(Error::NonFinite {
                module: "backbone",
                location: format!("{} block {k}", self.config.modality),
                norm: norm(v),
            });
        }
        s.h = out;
        Ok(())
    }

    /// Final adaLN + projection to the input channel count.
    pub fn finish<'p>(&'p self, g: &mut Graph<'p, T>, s: &Stream<T>) -> Var {
        let m = self.final_mod.forward(g, &self.store, s.cond_act);
        let h = self.config.hidden;
        let shift = g.slice_cols(m, 0, h);
        let scale = g.slice_cols(m, h, 2 * h);
        let n = g.layer_norm(s.h, LN_EPS);
        let n = g.modulate(n, shift, scale);
        self.final_proj.forward(g, &self.store, n)
    }

    /// Whole forward pass on an existing graph; returns the velocity node.
    pub fn forward_graph<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        x: &TokenSequence<T>,
        t: f64,
        prompt: Option<&[usize]>,
        use_text: bool,
        mut taps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut s = self.begin(g, x, t)?;
        let text = if use_text { Some(self.text_tokens(g, prompt)?) } else { None };
        for k in 0..self.blocks.len() {
            self.block(g, k, &mut s, text)?;
            if let Some(t) = taps.as_deref_mut() {
                t.push(s.h);
            }
        }
        Ok(self.finish(g, &s))
    }

    /// Velocity estimate for `x_t` at flow time `t`, plus per-block outputs
    /// when `taps` is set. `prompt = None` uses the null text token.
    pub fn forward(
        &self,
        x: &TokenSequence<T>,
        t: f64,
        prompt: Option<&[usize]>,
        taps: bool,
    ) -> Result<(Array2<T>, Option<ActivationTrace<T>>)> {
        let mut g = Graph::new();
        let mut tap_vars = Vec::new();
        let v = self.forward_graph(&mut g, x, t, prompt, true, taps.then_some(&mut tap_vars))?;
        let trace = taps.then(|| ActivationTrace { per_block: tap_vars.iter().map(|&v| g.value(v).clone()).collect() });
        Ok((g.value(v).clone(), trace))
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            store: self.store.cast(),
            x_embed: self.x_embed,
            t_mlp: self.t_mlp,
            text_table: self.text_table,
            null_text: self.null_text,
            blocks: self.blocks.clone(),
            final_mod: self.final_mod,
            final_proj: self.final_proj,
        }
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.blocks
    }

    /// Velocity with every residual branch removed: final head applied to the
    /// embedded input. Equals [`Backbone::forward`] at initialization.
    pub fn forward_without_branches(&self, x: &TokenSequence<T>, t: f64) -> Result<Array2<T>> {
        let mut g = Graph::new();
        let s = self.begin(&mut g, x, t)?;
        let v = self.finish(&mut g, &s);
        Ok(g.value(v).clone())
    }
}

/// Weights are drawn truncated-normal with this std; exported for tests.
pub const WEIGHT_INIT_STD: f64 = INIT_STD;
