//! Temporal alignment between modalities: audio tokens (24/s) and video
//! frames (6/s) are mapped to a shared time axis before rotary embedding,
//! so tokens describing the same instant get the same rotary phase.

use avlink::backbone::{patchify_video, rope_angles_1d, Modality, TokenSequence};
use avlink::fusion::{alignment_matrix, tau, tau_positions};
use ndarray::{Array2, Array4};

fn main() -> avlink::Result<()> {
    let (eta_a, eta_v) = (24.0, 6.0);
    println!("second 2.0: audio token 48 -> {}, video frame 12 -> {}", tau(48, Modality::Audio, eta_a, eta_v), tau(12, Modality::Video, eta_a, eta_v));

    let audio = TokenSequence::new(Array2::<f32>::zeros((124, 4)), Modality::Audio, eta_a, None)?;
    let video = patchify_video(&Array4::<f32>::zeros((31, 8, 8, 1)), 4, eta_v)?;
    let pa = tau_positions(&audio, eta_a, eta_v);
    let pv = tau_positions(&video, eta_a, eta_v);
    println!("audio positions {:?} ...", &pa[..6]);
    println!("video positions {:?} ... ({} patches per frame)", &pv[..6], video.spatial_multiplicity());

    let head_dim = 16;
    let ra = rope_angles_1d(&pa, 10_000.0, head_dim)?;
    let rv = rope_angles_1d(&pv, 10_000.0, head_dim)?;
    let same = (0..31).all(|f| ra.row(4 * f) == rv.row(4 * f));
    println!("audio token 4f and video frame f share rotary angles: {same}");

    let m = alignment_matrix(&audio, &video);
    let row: Vec<usize> = (0..m.ncols()).filter(|&j| m[[9, j]] > 0.0).collect();
    println!("audio token 9 (t = 0.375 s) averages video tokens {row:?}");
    Ok(())
}
