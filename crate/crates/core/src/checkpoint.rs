//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "AVLCKPT\0" | u32 version | u8 section | u32 header_len | header JSON
//! u32 n_params | n x (u32 name_len | name | u32 rows | u32 cols | rows*cols f32)
//! ```
//!
//! The header carries the section's configuration, its digest, the digest
//! of the stored parameters and, for fusion sections, the parameter digests
//! of the two frozen backbones the blocks were trained against.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Modality};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionStack, LinkedModel};
use crate::params::ParamStore;

pub const CKPT_MAGIC: &[u8; 8] = b"AVLCKPT\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Backbone = 1,
    Fusion = 2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub modality: Modality,
    pub param_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub section: Section,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub param_digest: String,
    #[serde(default)]
    pub references: Vec<Reference>,
    /// Free-form run information (steps, final loss, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct FusionSectionConfig {
    fusion: FusionConfig,
    audio: BackboneConfig,
    video: BackboneConfig,
}

fn write_file(path: &Path, header: &CheckpointHeader, store: &ParamStore<f32>) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let io = |e| Error::io(&tmp, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        let head = serde_json::to_vec(header)?;
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&[header.section as u8]).map_err(io)?;
        w.write_all(&(head.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&head).map_err(io)?;
        w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, v) in store.names().iter().zip(store.values()) {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(v.nrows() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(v.ncols() as u32).to_le_bytes()).map_err(io)?;
            for x in v.iter() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Raw {
    header: CheckpointHeader,
    params: Vec<(String, Array2<f32>)>,
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("{}: truncated {what}: {e}", path.display())))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize, path: &Path, what: &str) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b).map_err(|e| Error::io(path, e))?;
    if b.len() != n {
        return Err(Error::Format(format!("{}: truncated {what}", path.display())));
    }
    Ok(b)
}

fn read_head(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let magic = read_bytes(r, 8, path, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = read_u32(r, path, "version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("{}: checkpoint version {version}, expected {CKPT_VERSION}", path.display())));
    }
    let tag = read_bytes(r, 1, path, "section tag")?[0];
    let len = read_u32(r, path, "header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&read_bytes(r, len, path, "header")?)?;
    if header.section as u8 != tag {
        return Err(Error::Format(format!("{}: section tag {tag} disagrees with header", path.display())));
    }
    Ok(header)
}

fn read_file(path: &Path) -> Result<Raw> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_head(&mut r, path)?;
    let n = read_u32(&mut r, path, "parameter count")? as usize;
    let mut params = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let nl = read_u32(&mut r, path, "name length")? as usize;
        let name = String::from_utf8(read_bytes(&mut r, nl, path, "name")?)
            .map_err(|_| Error::Format(format!("{}: parameter name is not utf-8", path.display())))?;
        let rows = read_u32(&mut r, path, "rows")? as usize;
        let cols = read_u32(&mut r, path, "cols")? as usize;
        let bytes = read_bytes(&mut r, rows * cols * 4, path, &name)?;
        let vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let arr = Array2::from_shape_vec((rows, cols), vals).map_err(|e| Error::Format(e.to_string()))?;
        params.push((name, arr));
    }
    Ok(Raw { header, params })
}

fn check_params(store: &ParamStore<f32>, header: &CheckpointHeader, path: &Path) -> Result<()> {
    let found = store.digest();
    if found != header.param_digest {
        return Err(Error::DigestMismatch {
            what: format!("checkpoint {}", path.display()),
            expected: header.param_digest.clone(),
            found,
        });
    }
    Ok(())
}

/// Header only (for inspection).
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_head(&mut r, path)
}

pub fn save_backbone(path: impl AsRef<Path>, bb: &Backbone<f32>, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        section: Section::Backbone,
        config: serde_json::to_value(&bb.config)?,
        config_digest: bb.config.digest(),
        param_digest: bb.store.digest(),
        references: Vec::new(),
        meta,
    };
    write_file(path.as_ref(), &header, &bb.store)
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<(Backbone<f32>, CheckpointHeader)> {
    let path = path.as_ref();
    let raw = read_file(path)?;
    if raw.header.section != Section::Backbone {
        return Err(Error::Format(format!("{}: expected a backbone checkpoint", path.display())));
    }
    let config: BackboneConfig = serde_json::from_value(raw.header.config.clone())?;
    let id = match config.modality {
        Modality::Audio => 0,
        Modality::Video => 1,
    };
    let mut bb = Backbone::<f32>::new(config, id, &mut ChaCha8Rng::seed_from_u64(0))?;
    bb.store.load_named(&raw.params)?;
    check_params(&bb.store, &raw.header, path)?;
    Ok((bb, raw.header))
}

/// Writes the fusion section of a linked model, referencing both backbones.
pub fn save_linked(path: impl AsRef<Path>, model: &LinkedModel<f32>, meta: serde_json::Value) -> Result<()> {
    let cfg = FusionSectionConfig {
        fusion: model.config.clone(),
        audio: model.audio.config.clone(),
        video: model.video.config.clone(),
    };
    let header = CheckpointHeader {
        section: Section::Fusion,
        config: serde_json::to_value(&cfg)?,
        config_digest: model.config.digest(),
        param_digest: model.fusion.store.digest(),
        references: vec![
            Reference { modality: Modality::Audio, param_digest: model.audio.store.digest() },
            Reference { modality: Modality::Video, param_digest: model.video.store.digest() },
        ],
        meta,
    };
    write_file(path.as_ref(), &header, &model.fusion.store)
}

/// Verifies that `bb` is the backbone a fusion header was trained against.
pub fn check_reference(header: &CheckpointHeader, bb: &Backbone<f32>) -> Result<()> {
    let m = bb.config.modality;
    let want = header
        .references
        .iter()
        .find(|r| r.modality == m)
        .ok_or_else(|| Error::Format(format!("fusion checkpoint has no {m} reference")))?;
    let found = bb.store.digest();
    if want.param_digest != found {
        return Err(Error::DigestMismatch { what: format!("{m} backbone"), expected: want.param_digest.clone(), found });
    }
    Ok(())
}

/// Loads a linked model from its fusion checkpoint and the two backbones;
/// fails when either backbone differs from the one recorded at training.
pub fn load_linked(fusion: impl AsRef<Path>, audio: Backbone<f32>, video: Backbone<f32>) -> Result<LinkedModel<f32>> {
    let path = fusion.as_ref();
    let raw = read_file(path)?;
    if raw.header.section != Section::Fusion {
        return Err(Error::Format(format!("{}: expected a fusion checkpoint", path.display())));
    }
    check_reference(&raw.header, &audio)?;
    check_reference(&raw.header, &video)?;
    let cfg: FusionSectionConfig = serde_json::from_value(raw.header.config.clone())?;
    if cfg.audio != audio.config || cfg.video != video.config {
        return Err(Error::Config("fusion checkpoint was built for different backbone configurations".into()));
    }
    let mut stack = FusionStack::<f32>::new(&cfg.fusion, &audio.config, &video.config, 2, &mut ChaCha8Rng::seed_from_u64(0))?;
    stack.store.load_named(&raw.params)?;
    check_params(&stack.store, &raw.header, path)?;
    LinkedModel::from_parts(audio, video, cfg.fusion, stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Direction;

    fn small(m: Modality, seed: u64) -> Backbone<f32> {
        let cfg = match m {
            Modality::Audio => BackboneConfig { n_blocks: 2, hidden: 16, heads: 2, mlp_hidden: 16, ..BackboneConfig::toy_audio() },
            Modality::Video => BackboneConfig { n_blocks: 2, hidden: 12, heads: 1, mlp_hidden: 16, ..BackboneConfig::toy_video() },
        };
        Backbone::new(cfg, 0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn backbone_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let bb = small(Modality::Audio, 1);
        save_backbone(&p, &bb, serde_json::json!({"steps": 3})).unwrap();
        let (back, head) = load_backbone(&p).unwrap();
        assert_eq!(back.store.digest(), bb.store.digest());
        assert_eq!(head.meta["steps"], 3);
        assert_eq!(read_header(&p).unwrap(), head);

        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 2] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_backbone(&p), Err(Error::DigestMismatch { .. })));
        std::fs::write(&p, &bytes[..n / 2]).unwrap();
        assert!(matches!(load_backbone(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(load_backbone(&p).is_err());
    }

    #[test]
    fn linked_round_trip_requires_matching_backbones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        let (a, v) = (small(Modality::Audio, 1), small(Modality::Video, 2));
        let cfg = FusionConfig { n_fusion: 2, common_dim: 8, heads: 2, mlp_hidden: 8, ..FusionConfig::toy(Direction::V2A) };
        let m = LinkedModel::new(a.clone(), v.clone(), cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        save_linked(&p, &m, serde_json::Value::Null).unwrap();
        let back = load_linked(&p, a.clone(), v.clone()).unwrap();
        assert_eq!(back.fusion.store.digest(), m.fusion.store.digest());
        assert!(back.audio.is_frozen() && back.video.is_frozen());
        let other = small(Modality::Audio, 9);
        assert!(matches!(load_linked(&p, other, v), Err(Error::DigestMismatch { .. })));
        assert_eq!(read_header(&p).unwrap().section, Section::Fusion);
    }
}
