//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is printed by
//! `cargo test`. Soft criteria print WARN instead of failing. The heavy
//! end-to-end criteria share one pair of trained backbones.
//!
//! `AVLINK_ACCEPT_ONLY=1,2,5` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avlink::autograd::{rotate, Graph, RopeTable};
use avlink::backbone::{patchify_video, rope_angles_1d, Backbone, BackboneConfig, Modality, TokenSequence};
use avlink::checkpoint::{save_backbone, save_linked};
use avlink::config::RunConfig;
use avlink::data::{write_dataset, AVSample};
use avlink::eval::{EvalSummary, GradCheckOptions};
use avlink::flowmatch::{euler_sample, fm_loss, fm_loss_grad, interpolate};
use avlink::fusion::{tau, tau_positions, Arrangement, Direction, Injection, LinkedInputs, LinkedModel, TimestepPair};
use avlink::infer::generate_clips;
use avlink::params::ParamStore;
use avlink::pipeline::{self, Split};
use avlink::rng::{stream, Stream};
use avlink::train::encode_samples;

const ONSET_TARGET: f64 = 0.8;
const VIDEO_TARGET: f64 = 0.7;
/// Both metrics count recall only; a model that lights every frame or
/// emits onsets everywhere must not pass on recall alone.
const MIN_PRECISION: f64 = 0.5;

#[derive(PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Warn,
}

struct Report {
    lines: Vec<(usize, Verdict, String)>,
}

impl Report {
    fn record(&mut self, n: usize, verdict: Verdict, detail: String, took: Duration, budget: Option<Duration>) {
        let over = budget.is_some_and(|b| took > b);
        let verdict = if over && verdict == Verdict::Pass { Verdict::Fail } else { verdict };
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Warn => "WARN",
        };
        let budget = budget.map_or(String::new(), |b| format!(" / budget {:.0}s", b.as_secs_f64()));
        println!("criterion {n:2}: {tag} {detail} [{:.1}s{budget}]", took.as_secs_f64());
        self.lines.push((n, verdict, detail));
    }
}

fn hard(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn soft(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Warn
    }
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn criterion_1() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(-2.0..2.0));
    let x1 = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(-2.0..2.0));
    let ends = interpolate(&x0, &x1, 0.0).unwrap() == x0 && interpolate(&x0, &x1, 1.0).unwrap() == x1;

    let c = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(-2.0..2.0));
    let mut const_err = 0.0f64;
    for steps in [1, 7, 64] {
        let out = euler_sample(|_, _| Ok(c.clone()), &x0, steps).unwrap();
        let exact = &x0 + &c;
        const_err = const_err.max(max_abs(&out, &exact) / exact.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    let lam = -1.3;
    let start = Array1::from(vec![1.0f64, -0.5]);
    let err = |steps: usize| {
        let out = euler_sample(|x, _| Ok(x * lam), &start, steps).unwrap();
        (&out - &(&start * lam.exp())).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let ratio = err(32) / err(128);
    let first_order = (2.0..=8.0).contains(&ratio);

    let pred = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(-2.0..2.0));
    let ana = fm_loss_grad(&pred, &x0, &x1).unwrap();
    let eps = 1e-6;
    let mut grad_err = 0.0f64;
    for idx in [(0, 0), (2, 3), (5, 4)] {
        let mut p = pred.clone();
        p[idx] += eps;
        let up = fm_loss(&p, &x0, &x1).unwrap();
        p[idx] -= 2.0 * eps;
        let down = fm_loss(&p, &x0, &x1).unwrap();
        let num = (up - down) / (2.0 * eps);
        grad_err = grad_err.max((num - ana[idx]).abs() / num.abs().max(ana[idx].abs()).max(1e-12));
    }
    let ok = ends && const_err <= 1e-12 && first_order && grad_err <= 1e-4;
    (ok, format!("flow math: endpoints exact {ends}, constant-field err {const_err:.1e}, error ratio {ratio:.2} for 4x steps, fm_loss grad err {grad_err:.1e}"))
}

fn criterion_2() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hd = 16;
    let positions: Vec<f64> = (0..40).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let table = RopeTable::from_angles(&rope_angles_1d(&positions, 10_000.0, hd).unwrap());
    let x = Array2::from_shape_simple_fn((40, 2 * hd), || rng.gen_range(-1.0f64..1.0));
    let y = rotate(&x, &table, hd, false);
    let mut norm_err = 0.0f64;
    for r in 0..40 {
        for p in 0..hd {
            let n0 = x[[r, 2 * p]].hypot(x[[r, 2 * p + 1]]);
            let n1 = y[[r, 2 * p]].hypot(y[[r, 2 * p + 1]]);
            norm_err = norm_err.max((n0 - n1).abs());
        }
    }

    // 5.16 s at 24 audio tokens/s and 6 fps: frame f and token 4f are the same instant.
    let (eta_a, eta_v) = (24.0, 6.0);
    let frames = (5.16f64 * eta_v).round() as usize;
    let tau_err = (0..frames)
        .map(|f| (tau(4 * f, Modality::Audio, eta_a, eta_v) - tau(f, Modality::Video, eta_a, eta_v)).abs())
        .fold(0.0f64, f64::max);
    let audio = TokenSequence::new(Array2::<f64>::zeros((124, 4)), Modality::Audio, eta_a, None).unwrap();
    let video = patchify_video(&Array4::<f64>::zeros((frames, 8, 8, 1)), 4, eta_v).unwrap();
    let (pa, pv) = (tau_positions(&audio, eta_a, eta_v), tau_positions(&video, eta_a, eta_v));
    let seq_err = (0..frames).map(|f| (pa[4 * f] - pv[4 * f]).abs()).fold(0.0f64, f64::max);

    let q = Array2::from_shape_simple_fn((pa.len(), hd), || rng.gen_range(-1.0..1.0));
    let k = Array2::from_shape_simple_fn((pv.len(), hd), || rng.gen_range(-1.0..1.0));
    let logits = |shift: f64| {
        let shifted = |p: &[f64]| p.iter().map(|v| v + shift).collect::<Vec<_>>();
        let ra = RopeTable::from_angles(&rope_angles_1d(&shifted(&pa), 10_000.0, hd).unwrap());
        let rv = RopeTable::from_angles(&rope_angles_1d(&shifted(&pv), 10_000.0, hd).unwrap());
        rotate(&q, &ra, hd, false).dot(&rotate(&k, &rv, hd, false).t())
    };
    let base = logits(0.0);
    let shift_err = [1.0, 4.5, 17.0, -9.25].iter().map(|&s| max_abs(&logits(s), &base)).fold(0.0f64, f64::max);
    let ok = norm_err <= 1e-12 && tau_err <= 1e-9 && seq_err <= 1e-9 && shift_err <= 1e-6;
    (ok, format!("rope/tau: pair-norm err {norm_err:.1e}, tau err {:.1e}, logit shift err {shift_err:.1e}", tau_err.max(seq_err)))
}

fn open_gates(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for i in 0..store.len() {
        store.get_mut(i).unwrap().mapv_inplace(|v| v + rng.gen_range(-0.1..0.1));
    }
}

fn random_inputs(rng: &mut ChaCha8Rng, cfg: &RunConfig) -> (TokenSequence<f64>, TokenSequence<f64>) {
    let d = &cfg.data;
    let audio = Array2::from_shape_simple_fn((d.audio_tokens(), d.samples_per_token), || rng.gen_range(-1.0..1.0));
    let frames = Array4::from_shape_simple_fn((d.frames(), d.height, d.width, d.channels), || rng.gen_range(-1.0..1.0));
    (
        TokenSequence::new(audio, Modality::Audio, d.audio_rate, None).unwrap(),
        patchify_video(&frames, cfg.video.patch, d.fps).unwrap(),
    )
}

fn criterion_3() -> (bool, String) {
    let cfg = RunConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = Backbone::<f64>::new(cfg.audio.clone(), 0, &mut rng).unwrap();
    let mut v = Backbone::<f64>::new(cfg.video.clone(), 1, &mut rng).unwrap();
    open_gates(&mut a.store, &mut rng);
    open_gates(&mut v.store, &mut rng);
    let (xa, xv) = random_inputs(&mut rng, &cfg);
    let depth = cfg.audio.n_blocks;
    let arrangements = [Arrangement::Interleaved, Arrangement::AfterBlock(0), Arrangement::AfterBlock(depth / 2), Arrangement::AfterBlock(depth)];
    let injections = [Injection::FusionBlock, Injection::SymmetricCrossAttention, Injection::DirectAlignment];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for dir in [Direction::V2A, Direction::A2V] {
        let ts = TimestepPair::for_direction(dir, 0.42, dir.default_t_cond()).unwrap();
        let (gen_bb, gen_x, gen_t, prompt) = match dir {
            Direction::V2A => (&a, &xa, ts.t_a, [1usize]),
            Direction::A2V => (&v, &xv, ts.t_v, [0usize]),
        };
        let mut g = Graph::new();
        let out = gen_bb.forward_graph(&mut g, gen_x, gen_t, Some(&prompt), true, None).unwrap();
        let alone = g.value(out).clone();
        for arrangement in arrangements {
            for injection in injections {
                let mut fc = cfg.fusion.clone();
                fc.direction = dir;
                fc.arrangement = arrangement;
                fc.injection = injection;
                let model = LinkedModel::new(a.clone(), v.clone(), fc, &mut rng).unwrap();
                let (ap, vp) = match dir {
                    Direction::V2A => (Some(&prompt[..]), Some(&[0usize][..])),
                    Direction::A2V => (Some(&[1usize][..]), Some(&prompt[..])),
                };
                let inp = LinkedInputs { audio: &xa, video: &xv, ts, audio_prompt: ap, video_prompt: vp };
                worst = worst.max(max_abs(&model.forward(dir, &inp).unwrap(), &alone));
                cases += 1;
            }
        }
    }
    (worst <= 1e-6, format!("identity at init: max deviation {worst:.1e} over {cases} (direction, arrangement, injection) cases"))
}

fn criterion_4() -> (bool, String) {
    let mut cfg = RunConfig::desk();
    cfg.train_fusion.total_steps = 200;
    cfg.train_fusion.warmup_steps = 20;
    cfg.dataset.train = 32;
    let clips = pipeline::clips(&cfg, Split::Train).unwrap();
    let mut rng = stream(4, Stream::Init);
    let a = Backbone::<f32>::new(cfg.audio.clone(), 0, &mut rng).unwrap();
    let v = Backbone::<f32>::new(cfg.video.clone(), 1, &mut rng).unwrap();
    let before = (a.store.digest(), v.store.digest());
    let (model, log) = pipeline::train_linked(&cfg, a, v, &clips, Some((&before.0, &before.1)), None).unwrap();
    let after = (model.audio.store.digest(), model.video.store.digest());
    let fusion_moved = model.fusion.store.digest() != LinkedModel::new(model.audio.clone(), model.video.clone(), cfg.fusion.clone(), &mut stream(cfg.seed, Stream::Init)).unwrap().fusion.store.digest();

    // audit: every gradient the tape registers belongs to the fusion store
    let enc = encode_samples(&clips[..1], &cfg.data, cfg.video.patch).unwrap();
    let mut g = Graph::new();
    let ts = TimestepPair::for_direction(Direction::V2A, 0.5, 0.96).unwrap();
    let inp = LinkedInputs { audio: &enc[0].audio, video: &enc[0].video, ts, audio_prompt: Some(&[1]), video_prompt: Some(&[0]) };
    let out = model.forward_graph(&mut g, Direction::V2A, &inp, None).unwrap();
    let target = Array2::zeros(enc[0].audio.data.dim());
    let l = g.mse(out, target);
    let grads = g.backward(l);
    let foreign = grads.keys().filter(|k| k.store != model.fusion.store.id()).count();
    let ok = before == after && foreign == 0 && fusion_moved && log.rows.len() == 200;
    (ok, format!("frozen invariance: backbone hashes identical {} after {} steps, fusion updated {fusion_moved}, gradients on frozen params {foreign}", before == after, log.rows.len()))
}

fn criterion_5() -> (bool, String) {
    let opts = GradCheckOptions { max_entries: Some(1200), ..Default::default() };
    let (ac, vc) = (BackboneConfig::toy_audio(), BackboneConfig::toy_video());
    let dit_a = pipeline::grad_check_dit_block(&ac, 5, &opts).unwrap();
    let dit_v = pipeline::grad_check_dit_block(&vc, 5, &opts).unwrap();
    let fus = pipeline::grad_check_fusion_block(&avlink::fusion::FusionConfig::toy(Direction::V2A), &ac, &vc, 5, &opts).unwrap();
    let worst = dit_a.max_rel_error.max(dit_v.max_rel_error).max(fus.max_rel_error);
    (
        worst <= 1e-4,
        format!(
            "grad check (f64): DiT audio {:.1e}, DiT video {:.1e}, fusion {:.1e} over {} entries",
            dit_a.max_rel_error,
            dit_v.max_rel_error,
            fus.max_rel_error,
            dit_a.checked + dit_v.checked + fus.checked
        ),
    )
}

/// Configuration of the end-to-end criteria.
fn e2e_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.dataset.train = 512;
    cfg.dataset.eval = 64;
    cfg.train_base.total_steps = 3000;
    cfg.train_fusion.total_steps = 3000;
    cfg.train_base.warmup_steps = 200;
    cfg.train_fusion.warmup_steps = 200;
    cfg
}

struct Shared {
    cfg: RunConfig,
    train: Vec<AVSample>,
    held_out: Vec<AVSample>,
    audio: Backbone<f32>,
    video: Backbone<f32>,
    setup: Duration,
}

impl Shared {
    fn build() -> Self {
        let t0 = Instant::now();
        let cfg = e2e_config();
        let train = pipeline::clips(&cfg, Split::Train).unwrap();
        let held_out = pipeline::clips(&cfg, Split::Eval).unwrap();
        let (audio, la) = pipeline::train_backbone(&cfg, Modality::Audio, &train, None).unwrap();
        let (video, lv) = pipeline::train_backbone(&cfg, Modality::Video, &train, None).unwrap();
        let setup = t0.elapsed();
        println!(
            "      backbones: audio loss {:.4} -> {:.4}, video loss {:.4} -> {:.4} ({:.0}s)",
            la.head_tail_means(0.1).0,
            la.head_tail_means(0.1).1,
            lv.head_tail_means(0.1).0,
            lv.head_tail_means(0.1).1,
            setup.as_secs_f64()
        );
        Self { cfg, train, held_out, audio, video, setup }
    }

    fn variant(&self, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
        let mut c = self.cfg.clone();
        f(&mut c);
        c
    }

    fn fusion(&self, cfg: &RunConfig) -> LinkedModel<f32> {
        pipeline::train_linked(cfg, self.audio.clone(), self.video.clone(), &self.train, None, None).unwrap().0
    }

    fn score(&self, cfg: &RunConfig, model: &LinkedModel<f32>, dir: Direction) -> EvalSummary {
        pipeline::evaluate_linked(cfg, model, dir, &self.held_out).unwrap()
    }
}

fn v2a_config(s: &Shared) -> RunConfig {
    s.variant(|c| {
        c.fusion.direction = Direction::V2A;
        c.fusion.t_cond = 0.96;
    })
}

fn criterion_6(s: &Shared) -> (bool, String, EvalSummary) {
    let cfg = v2a_config(s);
    let model = s.fusion(&cfg);
    let r = s.score(&cfg, &model, Direction::V2A);
    let msg = format!(
        "V2A onset acc {:.3} (target {ONSET_TARGET}) vs random placement {:.3}, onset precision {:.3} (min {MIN_PRECISION}), {} held-out clips, {} fusion steps",
        r.score,
        r.baseline,
        r.precision,
        r.per_sample.len(),
        cfg.train_fusion.total_steps
    );
    (r.score >= ONSET_TARGET && r.precision >= MIN_PRECISION, msg, r)
}

fn criterion_7(s: &Shared) -> (bool, String) {
    let cfg = s.variant(|c| {
        c.fusion.direction = Direction::A2V;
        c.fusion.t_cond = 0.8;
    });
    let model = s.fusion(&cfg);
    let r = s.score(&cfg, &model, Direction::A2V);
    (
        r.score >= VIDEO_TARGET && r.precision >= MIN_PRECISION,
        format!(
            "A2V video alignment {:.3} (target {VIDEO_TARGET}) vs random frames {:.3}, lit-frame precision {:.3} (min {MIN_PRECISION}), {} held-out clips",
            r.score,
            r.baseline,
            r.precision,
            r.per_sample.len()
        ),
    )
}

fn criterion_8(s: &Shared) -> (bool, String) {
    let mut cfg = v2a_config(s);
    cfg.train_fusion.t_cond_uniform = true;
    let model = s.fusion(&cfg);
    let clips = &s.held_out[..16];
    let points = pipeline::sweep(&cfg, &model, Direction::V2A, clips).unwrap();
    let best = points.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
    // a saturated metric can tie; every maximizer is reported
    let argmax: Vec<f64> = points.iter().filter(|p| p.score == best).map(|p| p.t_cond).collect();
    let at_one = points.iter().find(|p| p.t_cond == 1.0).map_or(f64::NAN, |p| p.score);
    let ok = argmax.iter().any(|t| (0.8..=0.98).contains(t)) && at_one <= best;
    let curve: Vec<String> = points.iter().map(|p| format!("{}:{:.2}", p.t_cond, p.score)).collect();
    (ok, format!("t_cond sweep argmax {argmax:?} (want one in [0.8, 0.98]), score(1.0) {at_one:.3} <= best {best:.3}; curve {}", curve.join(" ")))
}

fn criterion_10(s: &Shared, reference: &EvalSummary) -> (bool, String) {
    let cfg = v2a_config(s);
    let mut no_re = cfg.clone();
    no_re.fusion.injection = Injection::NoReinjection;
    let r_no = s.score(&no_re, &s.fusion(&no_re), Direction::V2A);
    let mut shared = cfg.clone();
    shared.fusion.shared_params_across_tasks = true;
    let joint = s.fusion(&shared);
    let r_sv = s.score(&shared, &joint, Direction::V2A);
    let margin = reference.score - r_no.score;
    let ok = margin > 0.0 && r_sv.score >= ONSET_TARGET && reference.score >= ONSET_TARGET;
    (
        ok,
        format!(
            "ablations: fusion_block {:.3} vs no_reinjection {:.3} (margin {margin:+.3}); shared-params V2A {:.3}, separate {:.3}",
            reference.score, r_no.score, r_sv.score, reference.score
        ),
    )
}

/// Reduced pipeline twice in single-threaded mode; compares loss CSVs,
/// checkpoints and generated clips byte for byte.
fn criterion_9() -> (bool, String) {
    let run = |dir: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut cfg = RunConfig::desk();
        cfg.dataset.train = 16;
        cfg.dataset.eval = 2;
        for t in [&mut cfg.train_base, &mut cfg.train_fusion] {
            t.total_steps = 12;
            t.warmup_steps = 2;
            t.batch = 4;
            t.threads = 1;
        }
        cfg.infer.guidance.steps = 8;
        let train = pipeline::clips(&cfg, Split::Train).unwrap();
        let held = pipeline::clips(&cfg, Split::Eval).unwrap();
        write_dataset(dir.join("train.avd"), &cfg.data, &train).unwrap();
        let (a, la) = pipeline::train_backbone(&cfg, Modality::Audio, &train, None).unwrap();
        let (v, lv) = pipeline::train_backbone(&cfg, Modality::Video, &train, None).unwrap();
        save_backbone(dir.join("audio.ckpt"), &a, serde_json::Value::Null).unwrap();
        save_backbone(dir.join("video.ckpt"), &v, serde_json::Value::Null).unwrap();
        let (m, lf) = pipeline::train_linked(&cfg, a, v, &train, None, None).unwrap();
        save_linked(dir.join("fusion.ckpt"), &m, serde_json::Value::Null).unwrap();
        la.write_csv(&dir.join("audio.csv")).unwrap();
        lv.write_csv(&dir.join("video.csv")).unwrap();
        lf.write_csv(&dir.join("fusion.csv")).unwrap();
        let out = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| generate_clips(&m, Direction::V2A, &held, &cfg.data, &pipeline::infer_config(&cfg)).unwrap());
        write_dataset(dir.join("generated.avd"), &cfg.data, &out).unwrap();
        ["train.avd", "audio.ckpt", "video.ckpt", "fusion.ckpt", "audio.csv", "video.csv", "fusion.csv", "generated.avd"]
            .iter()
            .map(|n| (n.to_string(), std::fs::read(dir.join(n)).unwrap()))
            .collect()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (r1, r2) = (run(d1.path()), run(d2.path()));
    let differing: Vec<&str> = r1.iter().zip(&r2).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0.as_str()).collect();
    (
        differing.is_empty(),
        format!("determinism: {} artifacts compared byte for byte, differing: {:?}", r1.len(), differing),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("AVLINK_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut report = Report { lines: Vec::new() };
    let secs = Duration::from_secs;

    type Quick = fn() -> (bool, String);
    let quick: [(usize, Quick, u64); 4] = [(1, criterion_1, 10), (2, criterion_2, 10), (3, criterion_3, 30), (5, criterion_5, 120)];
    for (n, f, budget) in quick.iter().copied().chain(std::iter::once((4, criterion_4 as Quick, 300))) {
        if want(n) {
            let t = Instant::now();
            let (ok, msg) = f();
            report.record(n, hard(ok), msg, t.elapsed(), Some(secs(budget)));
        }
    }

    if [6, 7, 8, 10].iter().any(|&n| want(n)) {
        let t = Instant::now();
        let shared = Shared::build();
        let mut total = shared.setup;
        let mut reference = None;
        if want(6) || want(10) {
            let t = Instant::now();
            let (ok, msg, r) = criterion_6(&shared);
            total += t.elapsed();
            if want(6) {
                report.record(6, hard(ok), msg, shared.setup + t.elapsed(), None);
            }
            reference = Some(r);
        }
        if want(7) {
            let t = Instant::now();
            let (ok, msg) = criterion_7(&shared);
            total += t.elapsed();
            report.record(7, hard(ok), msg, shared.setup + t.elapsed(), None);
        }
        if want(8) {
            let t = Instant::now();
            let (ok, msg) = criterion_8(&shared);
            report.record(8, soft(ok), msg, t.elapsed(), None);
        }
        if want(10) {
            let t = Instant::now();
            let (ok, msg) = criterion_10(&shared, reference.as_ref().unwrap());
            report.record(10, soft(ok), msg, t.elapsed(), None);
        }
        println!("      end-to-end wall time {:.0}s (criteria 6+7 pipeline {:.0}s)", t.elapsed().as_secs_f64(), total.as_secs_f64());
    }

    if want(9) {
        let t = Instant::now();
        let (ok, msg) = criterion_9();
        report.record(9, hard(ok), msg, t.elapsed(), None);
    }

    report.lines.sort_by_key(|l| l.0);
    let failed: Vec<usize> = report.lines.iter().filter(|l| l.1 == Verdict::Fail).map(|l| l.0).collect();
    let warned: Vec<usize> = report.lines.iter().filter(|l| l.1 == Verdict::Warn).map(|l| l.0).collect();
    println!("acceptance: {} run, failed {:?}, warnings {:?}", report.lines.len(), failed, warned);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
