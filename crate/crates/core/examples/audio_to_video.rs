//! A2V at desk scale: the same frozen backbones, fusion blocks trained in
//! the other direction (conditioning audio noised to t = 0.8), scored by
//! whether the generated frames light up at the reference events.
//!
//!     cargo run --release --example audio_to_video -- train_fusion.total_steps=3000

use avlink::backbone::Modality;
use avlink::config::RunConfig;
use avlink::eval::{lit_frames, EvalSummary};
use avlink::fusion::Direction;
use avlink::infer::generate_clips;
use avlink::pipeline::{self, Split};

fn main() -> avlink::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::desk();
    cfg.fusion.direction = Direction::A2V;
    cfg.fusion.t_cond = Direction::A2V.default_t_cond();
    let cfg = cfg.with_overrides(std::env::args().skip(1))?;

    let train = pipeline::clips(&cfg, Split::Train)?;
    let held_out = pipeline::clips(&cfg, Split::Eval)?;
    let (audio, _) = pipeline::train_backbone(&cfg, Modality::Audio, &train, None)?;
    let (video, _) = pipeline::train_backbone(&cfg, Modality::Video, &train, None)?;
    let (model, _) = pipeline::train_linked(&cfg, audio, video, &train, None, None)?;

    let generated = generate_clips(&model, Direction::A2V, &held_out, &cfg.data, &pipeline::infer_config(&cfg))?;
    for clip in generated.iter().take(4) {
        let frames: Vec<usize> = clip.events.iter().map(|t| (t * cfg.data.fps).round() as usize).collect();
        println!("event frames {frames:?}, lit frames {:?}", lit_frames(&clip.video, cfg.eval.video_threshold));
    }
    let s = EvalSummary::of_clips(Direction::A2V, &generated, &cfg.data, &cfg.eval, cfg.seed)?;
    println!("video alignment {:.3} over {} clips (random frames {:.3}), lit-frame precision {:.3}", s.score, s.per_sample.len(), s.baseline, s.precision);
    Ok(())
}
