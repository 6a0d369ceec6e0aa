//! `imprint train`: one config in, three artifacts out. Reruns of the same
//! config produce byte-identical files; wall time goes to stdout only.

use std::path::PathBuf;

use clap::Args;
use imprint_core::training;

use crate::artifacts::{ENCODER_FILE, TEMPLATES_FILE, TRAIN_LOG_FILE};
use crate::runspec::RunSpec;
use crate::{prepare_out_dir, CliError, CmdResult};

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run config (corpus plus training knobs).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the three artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: TrainArgs) -> CmdResult {
    let spec = RunSpec::load(&args.config)?;
    let out_dir = prepare_out_dir(&args.out)?;
    let (train_imgs, _) = spec.corpora()?;

    let started = std::time::Instant::now();
    let outcome = training::train::<f32>(&spec.train, &train_imgs)?;
    let wall = started.elapsed().as_secs_f64();

    let sidecar = serde_json::json!({
        "config_hash": spec.train.hash(),
        "train_config": spec.train,
    });
    let templates_path = out_dir.join(TEMPLATES_FILE);
    outcome
        .templates
        .save(&templates_path, Some(&sidecar))
        .map_err(CliError::from)?;
    let encoder_path = out_dir.join(ENCODER_FILE);
    outcome.encoder.store.save(&encoder_path).map_err(CliError::from)?;
    // The log artifact is the deterministic trace; timing stays out of it
    // so reruns stay byte-identical.
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    std::fs::write(&log_path, outcome.log.deterministic_jsonl())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", log_path.display())))?;

    let last_epoch = outcome.log.epochs.last();
    println!("config_hash {}", spec.train.hash());
    println!(
        "trained {} templates, encoder {:?}x{} in {wall:.1}s",
        outcome.templates.len(),
        outcome.encoder.desc.stem,
        outcome.encoder.desc.blocks,
    );
    if let Some(e) = last_epoch {
        println!(
            "last epoch: mean recovery {:.4}, pairwise cosine mean {:.4}",
            e.mean_recovery, e.pairwise_mean
        );
    }
    for name in [TEMPLATES_FILE, ENCODER_FILE, TRAIN_LOG_FILE] {
        println!("wrote {}", out_dir.join(name).display());
    }
    Ok(())
}
