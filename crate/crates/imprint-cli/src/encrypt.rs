//! `imprint encrypt`: adds a template plane to each input image and exports
//! 8-bit PNGs plus a manifest recording which template went where.

use std::path::PathBuf;

use clap::Args;
use imprint_core::corpus;
use imprint_core::detection::random_picks;
use imprint_core::plane::Image;
use imprint_core::template::EncryptConfig;

use crate::artifacts::{load_templates, provenance_hash};
use crate::{prepare_out_dir, CliError, CmdResult};

/// Default additive strength; matches the training default.
const DEFAULT_STRENGTH: f64 = 0.30;

#[derive(Args)]
pub struct EncryptArgs {
    /// Template set artifact.
    #[arg(long)]
    pub set: PathBuf,
    /// One image file or a folder of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for PNGs and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed template index for every image; omitted means a seeded
    /// uniform pick per file.
    #[arg(long)]
    pub index: Option<usize>,
    /// Additive strength factor.
    #[arg(long, default_value_t = DEFAULT_STRENGTH)]
    pub strength: f64,
    /// Seed for the per-file template picks.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn run(args: EncryptArgs) -> CmdResult {
    if !(args.strength.is_finite() && args.strength >= 0.0) {
        return Err(CliError::Usage("--strength must be finite and >= 0".into()));
    }
    let set = load_templates(&args.set)?;
    if let Some(i) = args.index {
        if i >= set.len() {
            return Err(CliError::Usage(format!(
                "--index {i} out of range for a set of {}",
                set.len()
            )));
        }
    }

    let (images, paths): (Vec<Image<f32>>, Vec<PathBuf>) = if args.input.is_dir() {
        corpus::load_folder(&args.input)?
    } else {
        (vec![corpus::load_image(&args.input)?], vec![args.input.clone()])
    };

    let out_dir = prepare_out_dir(&args.out)?;
    let picks: Vec<usize> = match args.index {
        Some(i) => vec![i; images.len()],
        None => random_picks(args.seed, images.len(), set.len()),
    };

    let cfg = EncryptConfig { strength: args.strength, clamp_on_export: true };
    let mut rows = Vec::with_capacity(images.len());
    for ((img, path), &pick) in images.iter().zip(&paths).zip(&picks) {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Usage(format!("unusable file name {}", path.display())))?;
        let out_path = out_dir.join(format!("{stem}.png"));
        if rows.iter().any(|r: &serde_json::Value| r["output"] == out_path.display().to_string()) {
            return Err(CliError::Usage(format!(
                "two inputs map to the same output name {stem}.png"
            )));
        }
        let encrypted = set.encrypt(img, pick, cfg)?;
        corpus::save_png(&encrypted, &out_path)?;
        rows.push(serde_json::json!({
            "input": path.display().to_string(),
            "output": out_path.display().to_string(),
            "index": pick,
        }));
    }

    let manifest = serde_json::json!({
        "config_hash": provenance_hash(&args.set)?,
        "set": args.set.display().to_string(),
        "strength": args.strength,
        "rows": rows,
    });
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("serializes"))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", manifest_path.display())))?;

    println!("encrypted {} images at strength {}", images.len(), args.strength);
    println!("wrote {}", manifest_path.display());
    Ok(())
}
