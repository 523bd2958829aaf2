//! Trains one single-modality backbone on synthetic clips and saves it.
//!
//!     cargo run --release --example train_backbone -- audio train_base.total_steps=800

use avlink::backbone::Modality;
use avlink::checkpoint::{load_backbone, save_backbone};
use avlink::config::RunConfig;
use avlink::pipeline::{self, Split};

fn main() -> avlink::Result<()> {
    env_logger::init();
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let m = match args.first().map(String::as_str) {
        Some("video") => Modality::Video,
        Some("audio") | None => Modality::Audio,
        Some(_) => Modality::Audio,
    };
    args.retain(|a| a.contains('='));
    let mut cfg = RunConfig::desk();
    cfg.train_base.total_steps = 400;
    cfg.dataset.train = 128;
    let cfg = cfg.with_overrides(args)?;

    let clips = pipeline::clips(&cfg, Split::Train)?;
    let t0 = std::time::Instant::now();
    let mut report = |step: usize, loss: f64| {
        if step % 50 == 0 {
            println!("step {step:4} loss {loss:.5}");
        }
    };
    let (bb, log) = pipeline::train_backbone(&cfg, m, &clips, Some(&mut report))?;
    let (head, tail) = log.head_tail_means(0.1);
    println!("{m} backbone: loss {head:.4} -> {tail:.4} in {:.1}s", t0.elapsed().as_secs_f64());

    let path = std::env::temp_dir().join(format!("avlink-{m}.ckpt"));
    save_backbone(&path, &bb, pipeline::stage_meta(&cfg, "example", &log))?;
    let (back, header) = load_backbone(&path)?;
    println!("saved {} (param digest {}), reload matches: {}", path.display(), &header.param_digest[..12], back.store.digest() == bb.store.digest());
    Ok(())
}
