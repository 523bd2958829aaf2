//! Synthetic paired clips: write a dataset container, stream it back and
//! check that the reference onset detector recovers every event.

use avlink::data::{gen_dataset, read_dataset, write_dataset, DataGenConfig, DatasetReader};
use avlink::eval::{alignment_score_video, score_audio, EvalConfig};

fn main() -> avlink::Result<()> {
    let cfg = DataGenConfig::default();
    let clips = gen_dataset(&cfg, 0, 8)?;
    let dir = std::env::temp_dir().join("avlink-dataset-example");
    std::fs::create_dir_all(&dir).map_err(|e| avlink::Error::io(&dir, e))?;
    let path = dir.join("clips.avd");
    write_dataset(&path, &cfg, &clips)?;

    let reader = DatasetReader::open(&path)?;
    println!("{}: {} records, config digest {}", path.display(), reader.count, &cfg.digest()[..12]);
    for (i, clip) in reader.enumerate() {
        let clip = clip?;
        let onset = score_audio(&clip, &cfg, &EvalConfig::default());
        let video = alignment_score_video(&clip.video, &clip.events, cfg.fps, 0.5);
        println!(
            "clip {i}: {:?} events at {:?} s -> onset acc {} video alignment {}",
            clip.class, clip.events, onset.accuracy, video
        );
    }
    let (_, back) = read_dataset(&path)?;
    println!("round trip identical: {}", back == clips);
    Ok(())
}
