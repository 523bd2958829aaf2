//! Trains V2A fusion blocks with the conditioning time drawn uniformly per
//! sample, then scores generation across conditioning times. Writes the
//! curve as CSV and PNG.
//!
//!     cargo run --release --example t_cond_sweep -- dataset.eval=16

use avlink::backbone::Modality;
use avlink::config::RunConfig;
use avlink::eval::write_sweep;
use avlink::fusion::Direction;
use avlink::pipeline::{self, Split};

fn main() -> avlink::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::desk();
    cfg.train_fusion.t_cond_uniform = true;
    cfg.dataset.eval = 16;
    let cfg = cfg.with_overrides(std::env::args().skip(1))?;

    let train = pipeline::clips(&cfg, Split::Train)?;
    let held_out = pipeline::clips(&cfg, Split::Eval)?;
    let (audio, _) = pipeline::train_backbone(&cfg, Modality::Audio, &train, None)?;
    let (video, _) = pipeline::train_backbone(&cfg, Modality::Video, &train, None)?;
    let (model, log) = pipeline::train_linked(&cfg, audio, video, &train, None, None)?;
    let mean_t = log.t_cond_draws.iter().sum::<f64>() / log.t_cond_draws.len().max(1) as f64;
    println!("trained with uniform t_cond (mean draw {mean_t:.3})");

    let points = pipeline::sweep(&cfg, &model, Direction::V2A, &held_out)?;
    for p in &points {
        println!("t_cond {:.2}  onset acc {:.3}  {}", p.t_cond, p.score, "#".repeat((p.score * 40.0) as usize));
    }
    let path = std::env::temp_dir().join("avlink-sweep.csv");
    write_sweep(&path, &points)?;
    println!("wrote {} and {}", path.display(), path.with_extension("png").display());
    Ok(())
}
