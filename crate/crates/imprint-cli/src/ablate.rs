//! `imprint ablate`: the named experiment grids. Each study trains what it
//! needs from one base config, evaluates on the held-out split, and writes
//! a consolidated JSON table plus best-effort plots.

use std::path::{Path, PathBuf};

use clap::Args;
use imprint_core::augment::{augment_image_value, AugmentKind, Recipe, RecipeStep};
use imprint_core::config::TrainConfig;
use imprint_core::detection::{
    evaluate_corpus, evaluate_passive_corpus, random_picks, scored_pairs_prepared,
    selection_best_worst_oracle, selection_bias_one, DetectionReport, ReportRow,
};
use imprint_core::manipulate::{Manipulator, ManipulatorKind};
use imprint_core::metrics::psnr;
use imprint_core::plane::Image;
use imprint_core::rng::RngStream;
use imprint_core::template::EncryptConfig;
use imprint_core::training::{
    self, train, train_adversarial_baseline, train_fixed_template, train_passive_classifier,
    TrainOutcome,
};

use crate::runspec::RunSpec;
use crate::{plots, prepare_out_dir, CliError, CmdResult};

/// False-alarm budget every study reports TDR against.
const STUDY_FAR: f64 = 0.005;

const SET_SIZE_GRID: [usize; 3] = [1, 3, 10];
const STRENGTH_GRID: [f64; 4] = [0.1, 0.3, 0.5, 1.0];
const DROPPABLE: [&str; 5] = ["magnitude", "recovery", "lowpass", "fake_similarity", "pairwise"];

/// Stream tag for the augmented-evaluation randomness.
const EVAL_AUG_TAG: u64 = 0x455641;

const STUDIES: [&str; 7] = [
    "set_size",
    "strength",
    "loss_removal",
    "selection",
    "augmentation",
    "adversarial_baseline",
    "passive_baseline",
];

#[derive(Args)]
pub struct AblateArgs {
    /// Study name; `list` prints the registry and exits.
    pub study: String,
    /// JSON run config the grid starts from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the study table and plots.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Attack budget for the adversarial baseline study.
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    /// Iteration count for the projected-gradient attack.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
}

pub fn run(args: AblateArgs) -> CmdResult {
    if args.study == "list" {
        for s in STUDIES {
            println!("{s}");
        }
        return Ok(());
    }
    if !STUDIES.contains(&args.study.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown study {:?}; valid names: {} (or `list`)",
            args.study,
            STUDIES.join(", ")
        )));
    }
    let config = args
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required for a study run".into()))?;
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("--out is required for a study run".into()))?;
    let spec = RunSpec::load(config)?;
    let out_dir = prepare_out_dir(out)?;
    let (train_imgs, test_imgs) = spec.corpora()?;
    let ctx = Ctx {
        base: spec.train.clone(),
        train_imgs,
        test_imgs,
        out_dir,
    };

    let rows = match args.study.as_str() {
        "set_size" => set_size_study(&ctx)?,
        "strength" => strength_study(&ctx)?,
        "loss_removal" => loss_removal_study(&ctx)?,
        "selection" => selection_study(&ctx)?,
        "augmentation" => augmentation_study(&ctx)?,
        "adversarial_baseline" => adversarial_study(&ctx, args.epsilon, args.steps)?,
        "passive_baseline" => passive_study(&ctx)?,
        _ => unreachable!("registry checked above"),
    };

    let table = serde_json::json!({
        "study": args.study,
        "config_hash": ctx.base.hash(),
        "far_target": STUDY_FAR,
        "rows": rows,
    });
    let table_path = ctx.out_dir.join(format!("{}.json", args.study));
    std::fs::write(&table_path, serde_json::to_string_pretty(&table).expect("serializes"))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", table_path.display())))?;
    println!("wrote {}", table_path.display());
    Ok(())
}

struct Ctx {
    base: TrainConfig,
    train_imgs: Vec<Image<f32>>,
    test_imgs: Vec<Image<f32>>,
    out_dir: PathBuf,
}

impl Ctx {
    fn side(&self) -> usize {
        self.test_imgs.first().map_or(imprint_core::SIDE, |img| img.dim().1)
    }

    fn manipulator(&self, cfg: &TrainConfig) -> Manipulator<f32> {
        Manipulator::with_side(cfg.manipulator.kind, cfg.manipulator.seed, self.side())
    }

    /// Held-out evaluation under the config's own manipulator.
    fn seen_eval(
        &self,
        outcome: &TrainOutcome<f32>,
        cfg: &TrainConfig,
    ) -> Result<DetectionReport, CliError> {
        let manip = self.manipulator(cfg);
        evaluate_corpus(
            &outcome.encoder,
            &outcome.templates,
            &manip,
            &self.test_imgs,
            cfg,
            STUDY_FAR,
        )
        .map_err(CliError::from)
    }
}

fn row_line(row: &serde_json::Value) {
    println!("{row}");
}

fn set_size_study(ctx: &Ctx) -> Result<Vec<serde_json::Value>, CliError> {
    let mut rows = Vec::new();
    let (mut aps, mut tdrs) = (Vec::new(), Vec::new());
    for n in SET_SIZE_GRID {
        let mut cfg = ctx.base.clone();
        cfg.set_size = n;
        let outcome = train(&cfg, &ctx.train_imgs)?;
        let rep = ctx.seen_eval(&outcome, &cfg)?;
        let stats = outcome.templates.pairwise_cosine_stats();
        let row = serde_json::json!({
            "set_size": n,
            "average_precision": rep.aggregates.average_precision,
            "tdr_at_far": rep.aggregates.tdr_at_far,
            "pairwise_mean": stats.mean,
            "pairwise_min": stats.min,
            "pairwise_max": stats.max,
        });
        row_line(&row);
        aps.push(rep.aggregates.average_precision);
        tdrs.push(rep.aggregates.tdr_at_far);
        rows.push(row);
    }
    emit_line_plot(
        &ctx.out_dir.join("set_size.png"),
        &SET_SIZE_GRID.map(|n| n as f64),
        &[("average_precision", aps), ("tdr_at_far", tdrs)],
    );
    Ok(rows)
}

fn strength_study(ctx: &Ctx) -> Result<Vec<serde_json::Value>, CliError> {
    let mut rows = Vec::new();
    let (mut aps, mut psnrs) = (Vec::new(), Vec::new());
    for m in STRENGTH_GRID {
        let mut cfg = ctx.base.clone();
        cfg.strength = m;
        let outcome = train(&cfg, &ctx.train_imgs)?;
        let rep = ctx.seen_eval(&outcome, &cfg)?;
        let mean_psnr = mean_export_psnr(&outcome, &cfg, &ctx.test_imgs)?;
        let row = serde_json::json!({
            "strength": m,
            "average_precision": rep.aggregates.average_precision,
            "tdr_at_far": rep.aggregates.tdr_at_far,
            "mean_psnr_db": mean_psnr,
        });
        row_line(&row);
        aps.push(rep.aggregates.average_precision);
        psnrs.push(mean_psnr);
        rows.push(row);
    }
    emit_line_plot(
        &ctx.out_dir.join("strength_ap.png"),
        &STRENGTH_GRID,
        &[("average_precision", aps)],
    );
    emit_line_plot(
        &ctx.out_dir.join("strength_psnr.png"),
        &STRENGTH_GRID,
        &[("mean_psnr_db", psnrs)],
    );
    Ok(rows)
}

/// Mean PSNR between originals and their exported encrypted versions,
/// under the same per-image template schedule the evaluation uses.
fn mean_export_psnr(
    outcome: &TrainOutcome<f32>,
    cfg: &TrainConfig,
    images: &[Image<f32>],
) -> Result<f64, CliError> {
    let picks = random_picks(cfg.seed, images.len(), outcome.templates.len());
    let export = EncryptConfig { strength: cfg.strength, clamp_on_export: true };
    let mut total = 0.0;
    for (img, &pick) in images.iter().zip(&picks) {
        let enc = outcome.templates.encrypt(img, pick, export)?;
        total += psnr(&img.view().into_dyn(), &enc.view().into_dyn())?;
    }
    Ok(total / images.len() as f64)
}

fn loss_removal_study(ctx: &Ctx) -> Result<Vec<serde_json::Value>, CliError> {
    let mut rows = Vec::new();
    let full = train(&ctx.base, &ctx.train_imgs)?;
    let full_rep = ctx.seen_eval(&full, &ctx.base)?;
    let mut push = |variant: &str, outcome: &TrainOutcome<f32>, rep: &DetectionReport| {
        let row = serde_json::json!({
            "variant": variant,
            "average_precision": rep.aggregates.average_precision,
            "tdr_at_far": rep.aggregates.tdr_at_far,
            "final_mean_recovery": outcome.log.epochs.last().map(|e| e.mean_recovery),
        });
        row_line(&row);
        rows.push(row);
    };
    push("full", &full, &full_rep);
    for dropped in DROPPABLE {
        let outcome = training::remove_loss_variant(&ctx.base, &ctx.train_imgs, dropped)?;
        let rep = ctx.seen_eval(&outcome, &ctx.base)?;
        push(&format!("drop_{dropped}"), &outcome, &rep);
    }
    Ok(rows)
}

fn selection_study(ctx: &Ctx) -> Result<Vec<serde_json::Value>, CliError> {
    let outcome = train(&ctx.base, &ctx.train_imgs)?;
    let manip = ctx.manipulator(&ctx.base);
    let oracle = selection_best_worst_oracle(
        &outcome.encoder,
        &outcome.templates,
        &manip,
        &ctx.test_imgs,
        &ctx.base,
    )?;
    let bias = selection_bias_one(
        &outcome.encoder,
        &outcome.templates,
        &manip,
        &ctx.test_imgs,
        &ctx.base,
    )?;
    let rows = vec![
        serde_json::json!({ "scheme": "oracle_best", "average_precision": oracle.ap_best }),
        serde_json::json!({ "scheme": "random", "average_precision": oracle.ap_random }),
        serde_json::json!({ "scheme": "oracle_worst", "average_precision": oracle.ap_worst }),
        serde_json::json!({
            "scheme": "bias_one",
            "average_precision_mean": bias.mean,
            "average_precision_min": bias.min,
            "average_precision_max": bias.max,
            "per_template": bias.per_template,
        }),
    ];
    for row in &rows {
        row_line(row);
    }
    Ok(rows)
}

/// Fallback recipe when the base config trains without augmentation.
fn default_recipe() -> Recipe {
    Recipe {
        steps: vec![
            RecipeStep { op: AugmentKind::GaussianBlur, probability: 0.5 },
            RecipeStep { op: AugmentKind::Jpeg, probability: 0.5 },
        ],
    }
}

fn augmentation_study(ctx: &Ctx) -> Result<Vec<serde_json::Value>, CliError> {
    let recipe = if ctx.base.augmentation.steps.is_empty() {
        default_recipe()
    } else {
        ctx.base.augmentation.clone()
    };
    let mut plain_cfg = ctx.base.clone();
    plain_cfg.augmentation = Recipe::none();
    let mut aug_cfg = ctx.base.clone();
    aug_cfg.augmentation = recipe.clone();

    let mut rows = Vec::new();
    for (trained_on, cfg) in [("plain", &plain_cfg), ("augmented", &aug_cfg)] {
        let outcome = train(cfg, &ctx.train_imgs)?;
        let clean = ctx.seen_eval(&outcome, cfg)?;
        let augmented = augmented_eval(ctx, &outcome, cfg, &recipe)?;
        for (eval_kind, rep) in [("clean", clean), ("augmented", augmented)] {
            let row = serde_json::json!({
                "trained_on": trained_on,
                "evaluated_on": eval_kind,
                "average_precision": rep.aggregates.average_precision,
                "tdr_at_far": rep.aggregates.tdr_at_far,
            });
            row_line(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Evaluation with the recipe applied to each encrypted image before the
/// manipulate-and-score pipeline; the real/fake pairing and template
/// schedule match the clean evaluation.
fn augmented_eval(
    ctx: &Ctx,
    outcome: &TrainOutcome<f32>,
    cfg: &TrainConfig,
    recipe: &Recipe,
) -> Result<DetectionReport, CliError> {
    let picks = random_picks(cfg.seed, ctx.test_imgs.len(), outcome.templates.len());
    let mut rng = RngStream::new(cfg.seed).derive(EVAL_AUG_TAG);
    let mut prepared = Vec::with_capacity(ctx.test_imgs.len());
    for (img, &pick) in ctx.test_imgs.iter().zip(&picks) {
        let enc = outcome
            .templates
            .encrypt(img, pick, EncryptConfig::training(cfg.strength))?;
        prepared.push(augment_image_value(&enc, recipe, &mut rng));
    }
    let manip = ctx.manipulator(cfg);
    let pairs = scored_pairs_prepared(&outcome.encoder, &outcome.templates, &manip, &prepared)?;
    let mut rows = Vec::with_capacity(pairs.len() * 2);
    for (i, (real, _)) in pairs.iter().enumerate() {
        rows.push(ReportRow {
            path: format!("real/{i:05}"),
            score: real.score,
            argmax: real.argmax,
            label: 1,
            encryption_index: Some(picks[i]),
        });
    }
    for (i, (_, fake)) in pairs.iter().enumerate() {
        rows.push(ReportRow {
            path: format!("fake/{i:05}"),
            score: fake.score,
            argmax: fake.argmax,
            label: 0,
            encryption_index: Some(picks[i]),
        });
    }
    DetectionReport::from_rows(cfg.hash(), rows, STUDY_FAR).map_err(CliError::from)
}

fn adversarial_study(
    ctx: &Ctx,
    epsilon: f64,
    steps: usize,
) -> Result<Vec<serde_json::Value>, CliError> {
    let mut rows = Vec::new();
    let mut push = |variant: String, rep: &DetectionReport| {
        let row = serde_json::json!({
            "variant": variant,
            "average_precision": rep.aggregates.average_precision,
            "tdr_at_far": rep.aggregates.tdr_at_far,
        });
        row_line(&row);
        rows.push(row);
    };
    let full = train(&ctx.base, &ctx.train_imgs)?;
    push("full".into(), &ctx.seen_eval(&full, &ctx.base)?);
    for (attack, steps) in [
        (training::AttackKind::Fgsm, 1),
        (training::AttackKind::Pgd, steps),
    ] {
        let outcome =
            train_adversarial_baseline(&ctx.base, &ctx.train_imgs, attack, epsilon, steps)?;
        push(outcome.log.variant.clone(), &ctx.seen_eval(&outcome, &ctx.base)?);
    }
    Ok(rows)
}

fn passive_study(ctx: &Ctx) -> Result<Vec<serde_json::Value>, CliError> {
    let all_kinds = [
        ManipulatorKind::FixedConv,
        ManipulatorKind::MaskedInpaint,
        ManipulatorKind::ColorWarp,
    ];
    let full = train(&ctx.base, &ctx.train_imgs)?;
    let fixed = train_fixed_template(&ctx.base, &ctx.train_imgs)?;
    let (passive, _) = train_passive_classifier(&ctx.base, &ctx.train_imgs)?;
    let passive_templates = training::initial_templates::<f32>(&ctx.base, ctx.side())?;

    let mut rows = Vec::new();
    for kind in all_kinds {
        let manip = Manipulator::with_side(kind, ctx.base.manipulator.seed, ctx.side());
        let seen = kind == ctx.base.manipulator.kind;
        for (model, rep) in [
            (
                "full",
                evaluate_corpus(
                    &full.encoder,
                    &full.templates,
                    &manip,
                    &ctx.test_imgs,
                    &ctx.base,
                    STUDY_FAR,
                )?,
            ),
            (
                "fixed_template",
                evaluate_corpus(
                    &fixed.encoder,
                    &fixed.templates,
                    &manip,
                    &ctx.test_imgs,
                    &ctx.base,
                    STUDY_FAR,
                )?,
            ),
            (
                "passive",
                evaluate_passive_corpus(
                    &passive,
                    &passive_templates,
                    &manip,
                    &ctx.test_imgs,
                    &ctx.base,
                    STUDY_FAR,
                )?,
            ),
        ] {
            let row = serde_json::json!({
                "model": model,
                "manipulator": kind.to_string(),
                "seen_in_training": seen,
                "average_precision": rep.aggregates.average_precision,
                "tdr_at_far": rep.aggregates.tdr_at_far,
            });
            row_line(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn emit_line_plot(path: &Path, xs: &[f64], series: &[(&str, Vec<f64>)]) {
    match plots::line_plot(path, xs, series) {
        Ok(()) => println!("wrote {}", path.display()),
        Err(e) => eprintln!("plot skipped: {e}"),
    }
}
