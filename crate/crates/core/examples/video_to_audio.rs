//! The full V2A pipeline at desk scale: train audio and video backbones,
//! freeze them, train fusion blocks, then generate audio for held-out
//! videos and score onset accuracy against a random-placement baseline.
//!
//!     cargo run --release --example video_to_audio -- train_fusion.total_steps=3000

use avlink::backbone::Modality;
use avlink::config::RunConfig;
use avlink::eval::detect_onsets;
use avlink::fusion::Direction;
use avlink::infer::generate_clips;
use avlink::pipeline::{self, Split};

fn main() -> avlink::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::desk();
    cfg.fusion.direction = Direction::V2A;
    cfg.fusion.t_cond = Direction::V2A.default_t_cond();
    let cfg = cfg.with_overrides(std::env::args().skip(1))?;

    let train = pipeline::clips(&cfg, Split::Train)?;
    let held_out = pipeline::clips(&cfg, Split::Eval)?;
    let t0 = std::time::Instant::now();
    let (audio, _) = pipeline::train_backbone(&cfg, Modality::Audio, &train, None)?;
    let (video, _) = pipeline::train_backbone(&cfg, Modality::Video, &train, None)?;
    println!("backbones trained in {:.0}s", t0.elapsed().as_secs_f64());
    let (model, log) = pipeline::train_linked(&cfg, audio, video, &train, None, None)?;
    let (head, tail) = log.head_tail_means(0.1);
    println!("fusion loss {head:.4} -> {tail:.4} ({:.0}s total)", t0.elapsed().as_secs_f64());

    let ic = pipeline::infer_config(&cfg);
    let generated = generate_clips(&model, Direction::V2A, &held_out, &cfg.data, &ic)?;
    for clip in generated.iter().take(4) {
        let det = detect_onsets(&clip.audio, cfg.data.sample_rate(), cfg.eval.threshold, cfg.eval.refractory);
        println!("reference {:?}\n  detected {:?}", clip.events, det);
    }
    let s = avlink::eval::EvalSummary::of_clips(Direction::V2A, &generated, &cfg.data, &cfg.eval, cfg.seed)?;
    println!("onset accuracy {:.3} over {} clips (random placement {:.3}), onset precision {:.3}", s.score, s.per_sample.len(), s.baseline, s.precision);
    Ok(())
}
