//! `imprint detect`: scores a labeled folder (real/ and fake/ subfolders)
//! against trained artifacts and writes the report pair plus best-effort
//! plots.

use std::path::{Path, PathBuf};

use clap::Args;
use imprint_core::corpus;
use imprint_core::detection::{score_dataset, DetectionReport, ReportRow};
use imprint_core::plane::Image;

use crate::artifacts::{load_encoder, load_templates, provenance_hash};
use crate::{plots, prepare_out_dir, CliError, CmdResult};

#[derive(Args)]
pub struct DetectArgs {
    /// Template set artifact.
    #[arg(long)]
    pub set: PathBuf,
    /// Encoder weights artifact.
    #[arg(long)]
    pub weights: PathBuf,
    /// Folder holding real/ and fake/ image subfolders.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for report files.
    #[arg(long)]
    pub out: PathBuf,
    /// False-alarm budget the decision threshold is calibrated to.
    #[arg(long, default_value_t = 0.005)]
    pub calibrate_far: f64,
    /// Fixed decision threshold reported alongside the calibrated one.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Skip PNG plot emission.
    #[arg(long)]
    pub no_plots: bool,
}

/// Loads one labeled subfolder, tagging rows with folder-relative paths.
fn labeled_folder(
    root: &Path,
    sub: &str,
) -> Result<(Vec<Image<f32>>, Vec<String>), CliError> {
    let dir = root.join(sub);
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "{} needs a {sub}/ subfolder of images",
            root.display()
        )));
    }
    let (images, paths) = corpus::load_folder(&dir).map_err(|e| match e {
        imprint_core::Error::Argument { .. } => {
            CliError::Usage(format!("no images in {}", dir.display()))
        }
        other => CliError::from(other),
    })?;
    let rel = paths
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
            format!("{sub}/{}", name.unwrap_or_default())
        })
        .collect();
    Ok((images, rel))
}

pub fn run(args: DetectArgs) -> CmdResult {
    if !(args.calibrate_far > 0.0 && args.calibrate_far < 1.0) {
        return Err(CliError::Usage("--calibrate-far must lie in (0, 1)".into()));
    }
    let set = load_templates(&args.set)?;
    let encoder = load_encoder(&args.weights)?;
    let (real_imgs, real_names) = labeled_folder(&args.input, "real")?;
    let (fake_imgs, fake_names) = labeled_folder(&args.input, "fake")?;

    let out_dir = prepare_out_dir(&args.out)?;
    let mut rows = Vec::with_capacity(real_imgs.len() + fake_imgs.len());
    for (images, names, label) in [(real_imgs, real_names, 1u8), (fake_imgs, fake_names, 0u8)] {
        let scores = score_dataset(&encoder, &set, &images)?;
        for (s, name) in scores.iter().zip(names) {
            rows.push(ReportRow {
                path: name,
                score: s.score,
                argmax: s.argmax,
                label,
                // Which template the producer added is unknown here.
                encryption_index: None,
            });
        }
    }

    let report =
        DetectionReport::from_rows(provenance_hash(&args.set)?, rows, args.calibrate_far)?;
    let json_path = out_dir.join("report.json");
    let csv_path = out_dir.join("report.csv");
    report.write_files(&json_path, &csv_path)?;
    if let Some(t) = args.threshold {
        append_threshold_fields(&json_path, &report, t)?;
    }

    println!("config_hash {}", report.config_hash);
    println!(
        "scored {} real, {} fake: AP {:.4}, TDR@{} {:.4} (threshold {:.4})",
        report.aggregates.real_count,
        report.aggregates.fake_count,
        report.aggregates.average_precision,
        report.aggregates.far_target,
        report.aggregates.tdr_at_far,
        report.aggregates.threshold,
    );
    println!("wrote {}", json_path.display());
    println!("wrote {}", csv_path.display());

    if !args.no_plots {
        plots::emit_report_plots(&out_dir, &report);
    }
    Ok(())
}

/// Adds the fixed-threshold numbers as extra keys on the report JSON. The
/// standard fields stay untouched, so the file still reads back as a
/// [`DetectionReport`] header.
fn append_threshold_fields(
    json_path: &Path,
    report: &DetectionReport,
    threshold: f64,
) -> CmdResult {
    let reals: Vec<f64> =
        report.rows.iter().filter(|r| r.label == 1).map(|r| r.score).collect();
    let fakes: Vec<f64> =
        report.rows.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
    let tdr = fakes.iter().filter(|&&s| s < threshold).count() as f64 / fakes.len() as f64;
    let far = reals.iter().filter(|&&s| s < threshold).count() as f64 / reals.len() as f64;
    let text = std::fs::read_to_string(json_path).map_err(imprint_core::Error::from)?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(imprint_core::Error::from)?;
    let obj = doc.as_object_mut().expect("report header is an object");
    obj.insert("threshold_override".into(), serde_json::json!(threshold));
    obj.insert("tdr_at_threshold".into(), serde_json::json!(tdr));
    obj.insert("far_at_threshold".into(), serde_json::json!(far));
    std::fs::write(json_path, serde_json::to_string_pretty(&doc).expect("serializes"))
        .map_err(imprint_core::Error::from)?;
    Ok(())
}
