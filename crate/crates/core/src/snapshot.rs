//! On-disk container for model snapshots ("XMCL" format).
//!
//! Layout: magic `XMCL`, format version u16, kind u8, then a kind-specific
//! payload of u32 header fields and raw little-endian f64 arrays.
//!
//! Kinds 0 and 1 are model snapshots (the kind byte doubles as the sharing
//! mode: 0 = no-sharing, 1 = share-top). Payload: task index u32, then dims
//! (image input, image hidden, text input, text hidden, embed; u32 each),
//! then the parameter arrays in canonical flat order: image-hidden W, b;
//! image-top W, b; text-hidden W, b; text-top W, b. The top arrays appear
//! once in share-top mode.
//!
//! Kind 2 is an importance map section; see [`crate::reg`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::byteio::*;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelSnapshot, ParamLayout, SharingMode};

pub const MAGIC: [u8; 4] = *b"XMCL";
pub const FORMAT_VERSION: u16 = 1;

pub(crate) const KIND_MODEL_NO_SHARING: u8 = 0;
pub(crate) const KIND_MODEL_SHARE_TOP: u8 = 1;
pub(crate) const KIND_IMPORTANCE: u8 = 2;

pub fn write_model_snapshot<W: Write>(w: &mut W, snap: &ModelSnapshot) -> Result<()> {
    w.write_all(&MAGIC)?;
    write_u16(w, FORMAT_VERSION)?;
    let kind = match snap.config.sharing {
        SharingMode::NoSharing => KIND_MODEL_NO_SHARING,
        SharingMode::ShareTop => KIND_MODEL_SHARE_TOP,
    };
    w.write_all(&[kind])?;
    write_u32(w, snap.task_index)?;
    write_u32(w, snap.config.image.input_dim as u32)?;
    write_u32(w, snap.config.image.hidden_dim as u32)?;
    write_u32(w, snap.config.text.input_dim as u32)?;
    write_u32(w, snap.config.text.hidden_dim as u32)?;
    write_u32(w, snap.config.image.embed_dim as u32)?;
    write_f64_slice(w, &snap.params)?;
    Ok(())
}

pub fn read_model_snapshot<R: Read>(r: &mut R) -> Result<ModelSnapshot> {
    read_magic(r, MAGIC)?;
    let version = read_u16(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let kind = read_u8(r, "kind")?;
    let sharing = match kind {
        KIND_MODEL_NO_SHARING => SharingMode::NoSharing,
        KIND_MODEL_SHARE_TOP => SharingMode::ShareTop,
        other => {
            return Err(Error::InvalidField {
                field: "kind",
                value: other as u64,
            })
        }
    };
    let task_index = read_u32(r, "task index")?;
    let image_input = read_u32(r, "image input dim")? as usize;
    let image_hidden = read_u32(r, "image hidden dim")? as usize;
    let text_input = read_u32(r, "text input dim")? as usize;
    let text_hidden = read_u32(r, "text hidden dim")? as usize;
    let embed = read_u32(r, "embed dim")? as usize;
    let config = ModelConfig {
        image: crate::model::BranchConfig {
            input_dim: image_input,
            hidden_dim: image_hidden,
            embed_dim: embed,
        },
        text: crate::model::BranchConfig {
            input_dim: text_input,
            hidden_dim: text_hidden,
            embed_dim: embed,
        },
        sharing,
    };
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let params = read_f64_vec(r, layout.total, "parameter arrays")?;
    expect_eof(r, "trailing bytes after parameter arrays")?;
    Ok(ModelSnapshot {
        task_index,
        config,
        params,
    })
}

pub fn save_model_snapshot(path: &Path, snap: &ModelSnapshot) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model_snapshot(&mut w, snap)?;
    w.flush()?;
    Ok(())
}

pub fn load_model_snapshot(path: &Path) -> Result<ModelSnapshot> {
    let mut r = BufReader::new(File::open(path)?);
    read_model_snapshot(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TwoBranchModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use sha2::{Digest, Sha256};

    fn snapshot(seed: u64, sharing: SharingMode) -> ModelSnapshot {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let config = ModelConfig::new(6, 5, 4, 3, sharing);
        TwoBranchModel::init(config, &mut rng).unwrap().snapshot(2)
    }

    fn to_bytes(snap: &ModelSnapshot) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model_snapshot(&mut buf, snap).unwrap();
        buf
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        for sharing in [SharingMode::NoSharing, SharingMode::ShareTop] {
            let snap = snapshot(7, sharing);
            let bytes = to_bytes(&snap);
            let back = read_model_snapshot(&mut bytes.as_slice()).unwrap();
            assert_eq!(back, snap);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn snapshot_bytes_hash_is_stable_across_writes() {
        let snap = snapshot(8, SharingMode::ShareTop);
        let h1 = Sha256::digest(to_bytes(&snap));
        let h2 = Sha256::digest(to_bytes(&snap));
        assert_eq!(h1, h2);
    }

    #[test]
    fn truncated_file_is_clean_error() {
        let snap = snapshot(9, SharingMode::NoSharing);
        let bytes = to_bytes(&snap);
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            read_model_snapshot(&mut &cut[..]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn bad_magic_and_version_are_errors() {
        let snap = snapshot(10, SharingMode::NoSharing);
        let mut bytes = to_bytes(&snap);
        bytes[0] = b'Y';
        assert!(matches!(
            read_model_snapshot(&mut bytes.as_slice()),
            Err(Error::BadMagic { .. })
        ));
        let mut bytes = to_bytes(&snap);
        bytes[4] = 9; // version -> 9
        assert!(matches!(
            read_model_snapshot(&mut bytes.as_slice()),
            Err(Error::BadVersion(9))
        ));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let snap = snapshot(11, SharingMode::NoSharing);
        let mut bytes = to_bytes(&snap);
        bytes.push(0);
        assert!(matches!(
            read_model_snapshot(&mut bytes.as_slice()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn restore_from_disk_matches_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xmcl");
        let snap = snapshot(12, SharingMode::ShareTop);
        save_model_snapshot(&path, &snap).unwrap();
        let loaded = load_model_snapshot(&path).unwrap();
        let model = TwoBranchModel::restore(&loaded).unwrap();
        assert_eq!(model.flatten(), snap.params);
    }
}
