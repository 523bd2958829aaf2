//! Central differences against the tape autodiff in 64-bit: a full DiT
//! block of each toy backbone and a full fusion block.

use avlink::backbone::BackboneConfig;
use avlink::eval::GradCheckOptions;
use avlink::fusion::{Direction, FusionConfig};
use avlink::pipeline::{grad_check_dit_block, grad_check_fusion_block};

fn main() -> avlink::Result<()> {
    let opts = GradCheckOptions { max_entries: Some(1500), ..Default::default() };
    let (audio, video) = (BackboneConfig::toy_audio(), BackboneConfig::toy_video());
    for cfg in [&audio, &video] {
        let r = grad_check_dit_block(cfg, 0, &opts)?;
        println!("{} DiT block: max rel error {:.2e} over {} entries, worst {:?}", cfg.modality, r.max_rel_error, r.checked, r.worst);
    }
    for dir in [Direction::V2A, Direction::A2V] {
        let r = grad_check_fusion_block(&FusionConfig::toy(dir), &audio, &video, 0, &opts)?;
        println!("{dir} fusion block: max rel error {:.2e} over {} entries, worst {:?}", r.max_rel_error, r.checked, r.worst);
    }
    Ok(())
}
