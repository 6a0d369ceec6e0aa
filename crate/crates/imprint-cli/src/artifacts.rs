//! Shared artifact plumbing: loading template sets with their sidecars,
//! rebuilding an encoder from a bare weights file, and the provenance hash
//! every command embeds in its outputs.

use std::path::Path;

use imprint_core::networks::{EncoderDesc, ParamStore, RecoveryEncoder};
use imprint_core::template::{sidecar_path, TemplateSet};
use sha2::{Digest, Sha256};

use crate::CliError;

/// File names every training command writes into its output directory.
pub const TEMPLATES_FILE: &str = "templates.pimd";
pub const ENCODER_FILE: &str = "encoder.pimw";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

pub fn load_templates(path: &Path) -> Result<TemplateSet<f32>, CliError> {
    TemplateSet::load(path)
        .map_err(|e| CliError::Runtime(format!("template set {}: {e}", path.display())))
}

/// The sidecar written next to a template set, when present and readable.
pub fn load_sidecar(set_path: &Path) -> Option<serde_json::Value> {
    let text = std::fs::read_to_string(sidecar_path(set_path)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Provenance hash for outputs: the training config hash from the sidecar
/// when one exists, else a digest of the artifact bytes themselves.
pub fn provenance_hash(set_path: &Path) -> Result<String, CliError> {
    if let Some(meta) = load_sidecar(set_path) {
        if let Some(hash) = meta.get("config_hash").and_then(|v| v.as_str()) {
            return Ok(hash.to_string());
        }
    }
    file_digest(set_path)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Rebuilds an encoder from a weights file alone. The layer widths are
/// read off the stored tensor shapes, so weights from any config load
/// without that config being present.
pub fn load_encoder(path: &Path) -> Result<RecoveryEncoder<f32>, CliError> {
    let store = ParamStore::<f32>::load(path)
        .map_err(|e| CliError::Runtime(format!("weights {}: {e}", path.display())))?;
    let desc = infer_encoder_desc(&store, path)?;
    RecoveryEncoder::from_store(desc, store)
        .map_err(|e| CliError::Runtime(format!("weights {}: {e}", path.display())))
}

fn infer_encoder_desc(store: &ParamStore<f32>, path: &Path) -> Result<EncoderDesc, CliError> {
    let shape_of = |name: &str| -> Result<Vec<usize>, CliError> {
        if !store.names().any(|n| n == name) {
            return Err(CliError::Runtime(format!(
                "weights {}: missing tensor {name}",
                path.display()
            )));
        }
        Ok(store.get(name).shape().to_vec())
    };
    let stem1 = shape_of("stem1.w")?;
    let stem2 = shape_of("stem2.w")?;
    if stem1.len() != 4 || stem2.len() != 4 {
        return Err(CliError::Runtime(format!(
            "weights {}: stem tensors are not conv kernels",
            path.display()
        )));
    }
    let blocks = store
        .names()
        .filter(|n| n.starts_with("block") && n.ends_with(".conv.w"))
        .count();
    Ok(EncoderDesc {
        stem: (stem1[0], stem2[0]),
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use imprint_core::networks::EncoderDesc;

    #[test]
    fn encoder_desc_round_trips_through_a_bare_store() {
        let desc = EncoderDesc { stem: (2, 3), blocks: 2 };
        let enc = RecoveryEncoder::<f32>::init(desc, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pimw");
        enc.store.save(&path).unwrap();
        let back = load_encoder(&path).unwrap();
        assert_eq!(back.desc, desc);
        assert_eq!(back.store.checksum(), enc.store.checksum());
    }

    #[test]
    fn provenance_prefers_the_sidecar_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pimd");
        let set = TemplateSet::<f32>::init_uniform(
            2,
            8,
            &mut imprint_core::rng::RngStream::new(3),
        )
        .unwrap();
        set.save(&path, Some(&serde_json::json!({ "config_hash": "abc123" })))
            .unwrap();
        assert_eq!(provenance_hash(&path).unwrap(), "abc123");

        let bare = dir.path().join("bare.pimd");
        set.save(&bare, None).unwrap();
        let digest = provenance_hash(&bare).unwrap();
        assert_eq!(digest.len(), 64);
        assert_eq!(digest, file_digest(&bare).unwrap());
    }
}
