//! Inference-time scoring and evaluation: recover a noise plane from an
//! image, score it by max cosine similarity against the learned template
//! set, and aggregate labeled scores into exportable reports.
//!
//! Encrypted-real images score high; manipulated images are flagged when
//! their score falls strictly below a threshold calibrated at a fixed
//! false-alarm rate. Scoring never looks at which template an image was
//! encrypted with; the index is carried only as a diagnostic.

use std::path::Path;

use ndarray::{Axis, Ix4};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::manipulate::Manipulator;
use crate::metrics;
pub use crate::metrics::calibrate_threshold;
use crate::networks::{Mode, PassiveClassifier, RecoveryEncoder};
use crate::plane::{Image, Plane};
use crate::real::Real;
use crate::rng::RngStream;
use crate::template::{EncryptConfig, TemplateSet};
use crate::{Error, Result};

/// Images scored per forward pass. Results do not depend on this: every
/// network op treats batch items independently in eval mode.
const SCORE_CHUNK: usize = 16;

/// Stream tag for per-image template assignment, shared by the evaluation
/// pipeline and the random-selection baseline so both draw the same picks.
const SELECT_TAG: u64 = 0x53454c;

/// Max cosine similarity against the template set plus the winning index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub score: f64,
    /// 0-based index of the best-matching template; ties take the lowest.
    pub argmax: usize,
}

/// Cosine similarity of two planes in f64; either input having zero norm
/// yields 0 rather than a division error.
fn cosine<T: Real>(a: &Plane<T>, b: &Plane<T>) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Scores an already-recovered plane against the raw template planes.
pub fn score_recovered<T: Real>(recovered: &Plane<T>, set: &TemplateSet<T>) -> Result<ImageScore> {
    let side = set.side();
    if recovered.dim() != (side, side) {
        return Err(Error::shape(
            "score_recovered",
            format!("({side}, {side})"),
            format!("{:?}", recovered.dim()),
        ));
    }
    let mut best = f64::NEG_INFINITY;
    let mut argmax = 0usize;
    for (i, plane) in set.planes().iter().enumerate() {
        let c = cosine(recovered, plane);
        if c > best {
            best = c;
            argmax = i;
        }
    }
    Ok(ImageScore { score: best, argmax })
}

fn check_corpus<T: Real>(
    images: &[Image<T>],
    side: usize,
    context: &'static str,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::argument(context, "image list must be nonempty"));
    }
    for img in images {
        if img.dim() != (3, side, side) {
            return Err(Error::shape(
                context,
                format!("(3, {side}, {side})"),
                format!("{:?}", img.dim()),
            ));
        }
    }
    Ok(())
}

/// Runs the encoder in eval mode over `items` (each a (3, s, s) var) and
/// returns one recovered plane per item.
fn forward_planes<T: Real>(
    g: &Graph<T>,
    enc: &RecoveryEncoder<T>,
    items: &[Var],
) -> Vec<Plane<T>> {
    let input = g.stack0(items);
    let pass = enc.forward(g, input, Mode::Eval, false);
    let v = g.value(pass.out);
    let v4 = v.view().into_dimensionality::<Ix4>().expect("encoder output rank");
    (0..items.len())
        .map(|i| {
            v4.index_axis(Axis(0), i)
                .index_axis(Axis(0), 0)
                .to_owned()
        })
        .collect()
}

/// Recovers and scores one image. See [`score_dataset`] for batches.
pub fn score_image<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    image: &Image<T>,
) -> Result<ImageScore> {
    let scores = score_dataset(enc, set, std::slice::from_ref(image))?;
    Ok(scores[0])
}

/// Scores a corpus in input order. Images are batched through the encoder
/// in chunks; per-item results are identical to scoring one at a time.
pub fn score_dataset<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    images: &[Image<T>],
) -> Result<Vec<ImageScore>> {
    check_corpus(images, set.side(), "score_dataset")?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(SCORE_CHUNK) {
        let g = Graph::<T>::new();
        let items: Vec<Var> = chunk
            .iter()
            .map(|img| g.constant(img.clone().into_dyn()))
            .collect();
        for plane in forward_planes(&g, enc, &items) {
            out.push(score_recovered(&plane, set)?);
        }
    }
    Ok(out)
}

// ---- labeled reports ----

/// One scored image in a report. `label` is 1 for encrypted-real and 0 for
/// manipulated; `encryption_index` is the template used to encrypt, when
/// the pipeline knows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub path: String,
    pub score: f64,
    pub argmax: usize,
    pub label: u8,
    pub encryption_index: Option<usize>,
}

/// Corpus-level numbers, all recomputable from the rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregates {
    pub real_count: usize,
    pub fake_count: usize,
    pub average_precision: f64,
    pub far_target: f64,
    pub threshold: f64,
    pub tdr_at_far: f64,
}

/// Full evaluation artifact: JSON carries the hash and aggregates, CSV the
/// per-image rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config_hash: String,
    pub aggregates: ReportAggregates,
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    config_hash: String,
    aggregates: ReportAggregates,
}

/// Recomputes the aggregate block from labeled rows.
pub fn compute_aggregates(rows: &[ReportRow], far: f64) -> Result<ReportAggregates> {
    if rows.is_empty() {
        return Err(Error::argument("rows", "report needs at least one row"));
    }
    for r in rows {
        if r.label > 1 {
            return Err(Error::argument(
                "rows",
                format!("label must be 0 or 1, got {} for {}", r.label, r.path),
            ));
        }
        if !r.score.is_finite() {
            return Err(Error::NonFinite("report row score"));
        }
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
    let reals: Vec<f64> = rows.iter().filter(|r| r.label == 1).map(|r| r.score).collect();
    let fakes: Vec<f64> = rows.iter().filter(|r| r.label == 0).map(|r| r.score).collect();
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::argument("rows", "report needs both real and fake rows"));
    }
    let average_precision = metrics::average_precision(&scores, &labels)?;
    let threshold = metrics::calibrate_threshold(&reals, far)?;
    let tdr = metrics::tdr_at_far(&reals, &fakes, far)?;
    Ok(ReportAggregates {
        real_count: reals.len(),
        fake_count: fakes.len(),
        average_precision,
        far_target: far,
        threshold,
        tdr_at_far: tdr,
    })
}

impl DetectionReport {
    /// Builds a report by computing aggregates over the rows.
    pub fn from_rows(config_hash: String, rows: Vec<ReportRow>, far: f64) -> Result<Self> {
        let aggregates = compute_aggregates(&rows, far)?;
        Ok(DetectionReport {
            config_hash,
            aggregates,
            rows,
        })
    }

    /// Errors unless the stored aggregates match a fresh recomputation from
    /// the rows bit for bit.
    pub fn verify_consistent(&self) -> Result<()> {
        let fresh = compute_aggregates(&self.rows, self.aggregates.far_target)?;
        if fresh != self.aggregates {
            return Err(Error::Mismatch(format!(
                "stored aggregates {:?} do not match rows ({fresh:?})",
                self.aggregates
            )));
        }
        Ok(())
    }

    /// Writes the JSON header (hash + aggregates) and the CSV rows.
    pub fn write_files(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let header = ReportHeader {
            config_hash: self.config_hash.clone(),
            aggregates: self.aggregates,
        };
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Format {
            path: json_path.display().to_string(),
            reason: e.to_string(),
        })?;
        std::fs::write(json_path, text)?;
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::Format {
            path: csv_path.display().to_string(),
            reason: e.to_string(),
        })?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format {
                path: csv_path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a report back from its two files. Call [`verify_consistent`]
    /// to check the aggregates against the rows.
    ///
    /// [`verify_consistent`]: DetectionReport::verify_consistent
    pub fn read_files(json_path: &Path, csv_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path)?;
        let header: ReportHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: json_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Format {
            path: csv_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut rows = Vec::new();
        for rec in reader.deserialize() {
            let row: ReportRow = rec.map_err(|e| Error::Format {
                path: csv_path.display().to_string(),
                reason: e.to_string(),
            })?;
            rows.push(row);
        }
        Ok(DetectionReport {
            config_hash: header.config_hash,
            aggregates: header.aggregates,
            rows,
        })
    }
}

// ---- evaluation pipelines ----

/// Encrypts each image with its assigned template, manipulates a copy, and
/// scores both. Returns (real score, fake score) per image in order.
fn encrypt_all<T: Real>(
    set: &TemplateSet<T>,
    images: &[Image<T>],
    picks: &[usize],
    strength: f64,
) -> Result<Vec<Image<T>>> {
    debug_assert_eq!(images.len(), picks.len());
    images
        .iter()
        .zip(picks)
        .map(|(img, &pick)| set.encrypt(img, pick, EncryptConfig::training(strength)))
        .collect()
}

/// Scores already-encrypted (and possibly edited) images and their
/// manipulated counterparts. Each prepared image yields one (real, fake)
/// score pair, independent of how the list is chunked internally.
pub fn scored_pairs_prepared<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    manip: &Manipulator<T>,
    prepared: &[Image<T>],
) -> Result<Vec<(ImageScore, ImageScore)>> {
    let pair_chunk = SCORE_CHUNK / 2;
    let mut out = Vec::with_capacity(prepared.len());
    for chunk in prepared.chunks(pair_chunk) {
        let g = Graph::<T>::new();
        let mut items: Vec<Var> = Vec::with_capacity(chunk.len() * 2);
        for img in chunk {
            items.push(g.constant(img.clone().into_dyn()));
        }
        let stacked = g.stack0(&items);
        let faked = manip.apply(&g, stacked);
        for i in 0..chunk.len() {
            items.push(g.select0(faked, i));
        }
        let planes = forward_planes(&g, enc, &items);
        for i in 0..chunk.len() {
            let real = score_recovered(&planes[i], set)?;
            let fake = score_recovered(&planes[chunk.len() + i], set)?;
            out.push((real, fake));
        }
    }
    Ok(out)
}

fn scored_pairs<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    manip: &Manipulator<T>,
    images: &[Image<T>],
    picks: &[usize],
    strength: f64,
) -> Result<Vec<(ImageScore, ImageScore)>> {
    let prepared = encrypt_all(set, images, picks, strength)?;
    scored_pairs_prepared(enc, set, manip, &prepared)
}

/// Classifier probabilities of the encrypted-real class for prepared
/// images and their manipulated counterparts, paired per image.
pub fn passive_pairs_prepared<T: Real>(
    clf: &PassiveClassifier<T>,
    manip: &Manipulator<T>,
    prepared: &[Image<T>],
) -> Result<Vec<(f64, f64)>> {
    if prepared.is_empty() {
        return Err(Error::argument("passive_pairs", "image list must be nonempty"));
    }
    let pair_chunk = SCORE_CHUNK / 2;
    let mut out = Vec::with_capacity(prepared.len());
    for chunk in prepared.chunks(pair_chunk) {
        let g = Graph::<T>::new();
        let mut items: Vec<Var> = Vec::with_capacity(chunk.len() * 2);
        for img in chunk {
            items.push(g.constant(img.clone().into_dyn()));
        }
        let stacked = g.stack0(&items);
        let faked = manip.apply(&g, stacked);
        for i in 0..chunk.len() {
            items.push(g.select0(faked, i));
        }
        let input = g.stack0(&items);
        let pass = clf.forward(&g, input, Mode::Eval, false);
        let logits = g.value(pass.out);
        let prob = |i: usize| {
            let l0 = logits[[i, 0]].to_f64();
            let l1 = logits[[i, 1]].to_f64();
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            e1 / (e0 + e1)
        };
        for i in 0..chunk.len() {
            out.push((prob(i), prob(chunk.len() + i)));
        }
    }
    Ok(out)
}

fn assignment_ap<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    manip: &Manipulator<T>,
    images: &[Image<T>],
    picks: &[usize],
    strength: f64,
) -> Result<f64> {
    let pairs = scored_pairs(enc, set, manip, images, picks, strength)?;
    let mut scores = Vec::with_capacity(pairs.len() * 2);
    let mut labels = Vec::with_capacity(pairs.len() * 2);
    for (real, fake) in &pairs {
        scores.push(real.score);
        labels.push(true);
        scores.push(fake.score);
        labels.push(false);
    }
    metrics::average_precision(&scores, &labels)
}

/// The uniform per-image template assignment every evaluation pipeline
/// shares: callers that prepare images outside these entry points use this
/// to reproduce the exact schedule.
pub fn random_picks(seed: u64, count: usize, n: usize) -> Vec<usize> {
    let mut rng = RngStream::new(seed).derive(SELECT_TAG);
    (0..count).map(|_| rng.index(n)).collect()
}

/// End-to-end evaluation on a held-out corpus: encrypt each image with a
/// seeded uniform template pick, manipulate a copy, score everything, and
/// assemble the labeled report.
pub fn evaluate_corpus<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    manip: &Manipulator<T>,
    images: &[Image<T>],
    cfg: &TrainConfig,
    far: f64,
) -> Result<DetectionReport> {
    check_corpus(images, set.side(), "evaluate_corpus")?;
    let picks = random_picks(cfg.seed, images.len(), set.len());
    let pairs = scored_pairs(enc, set, manip, images, &picks, cfg.strength)?;
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
    DetectionReport::from_rows(cfg.hash(), rows, far)
}

/// Baseline counterpart of [`evaluate_corpus`]: the same encryption and
/// manipulation schedule, scored by the passive classifier's probability of
/// the encrypted-real class. Argmax columns are zero; no template is ever
/// matched on this path.
pub fn evaluate_passive_corpus<T: Real>(
    clf: &PassiveClassifier<T>,
    set: &TemplateSet<T>,
    manip: &Manipulator<T>,
    images: &[Image<T>],
    cfg: &TrainConfig,
    far: f64,
) -> Result<DetectionReport> {
    check_corpus(images, set.side(), "evaluate_passive_corpus")?;
    let picks = random_picks(cfg.seed, images.len(), set.len());
    let prepared = encrypt_all(set, images, &picks, cfg.strength)?;
    let pairs = passive_pairs_prepared(clf, manip, &prepared)?;
    let mut rows = Vec::with_capacity(pairs.len() * 2);
    for (i, (real, _)) in pairs.iter().enumerate() {
        rows.push(ReportRow {
            path: format!("real/{i:05}"),
            score: *real,
            argmax: 0,
            label: 1,
            encryption_index: Some(picks[i]),
        });
    }
    for (i, (_, fake)) in pairs.iter().enumerate() {
        rows.push(ReportRow {
            path: format!("fake/{i:05}"),
            score: *fake,
            argmax: 0,
            label: 0,
            encryption_index: Some(picks[i]),
        });
    }
    DetectionReport::from_rows(cfg.hash(), rows, far)
}

// ---- template selection studies ----

/// Per-image best/worst template choices and the APs they produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStudy {
    pub best: Vec<usize>,
    pub worst: Vec<usize>,
    pub ap_best: f64,
    pub ap_random: f64,
    pub ap_worst: f64,
}

/// For every image and template i, encrypts with i, manipulates, and takes
/// d_i = cos(S_i, recovered real) - cos(S_i, recovered fake). The best
/// choice maximizes d_i, the worst minimizes it; APs are then evaluated
/// under each per-image assignment plus the seeded random baseline.
pub fn selection_best_worst_oracle<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    manip: &Manipulator<T>,
    images: &[Image<T>],
    cfg: &TrainConfig,
) -> Result<SelectionStudy> {
    check_corpus(images, set.side(), "selection_best_worst_oracle")?;
    let n = set.len();
    let mut best = Vec::with_capacity(images.len());
    let mut worst = Vec::with_capacity(images.len());
    for img in images {
        let g = Graph::<T>::new();
        let mut items: Vec<Var> = Vec::with_capacity(2 * n);
        for i in 0..n {
            let encrypted = set.encrypt(img, i, EncryptConfig::training(cfg.strength))?;
            items.push(g.constant(encrypted.into_dyn()));
        }
        let stacked = g.stack0(&items);
        let faked = manip.apply(&g, stacked);
        for i in 0..n {
            items.push(g.select0(faked, i));
        }
        let planes = forward_planes(&g, enc, &items);
        let mut d_best = f64::NEG_INFINITY;
        let mut d_worst = f64::INFINITY;
        let (mut arg_best, mut arg_worst) = (0usize, 0usize);
        for i in 0..n {
            let d = cosine(set.plane(i), &planes[i]) - cosine(set.plane(i), &planes[n + i]);
            if d > d_best {
                d_best = d;
                arg_best = i;
            }
            if d < d_worst {
                d_worst = d;
                arg_worst = i;
            }
        }
        best.push(arg_best);
        worst.push(arg_worst);
    }
    let ap_best = assignment_ap(enc, set, manip, images, &best, cfg.strength)?;
    let ap_worst = assignment_ap(enc, set, manip, images, &worst, cfg.strength)?;
    let picks = random_picks(cfg.seed, images.len(), n);
    let ap_random = assignment_ap(enc, set, manip, images, &picks, cfg.strength)?;
    Ok(SelectionStudy {
        best,
        worst,
        ap_best,
        ap_random,
        ap_worst,
    })
}

/// AP distribution when every image is encrypted with the same single
/// template, once per template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOneStudy {
    pub per_template: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Evaluates the corpus once per template with that template forced for
/// every image.
pub fn selection_bias_one<T: Real>(
    enc: &RecoveryEncoder<T>,
    set: &TemplateSet<T>,
    manip: &Manipulator<T>,
    images: &[Image<T>],
    cfg: &TrainConfig,
) -> Result<BiasOneStudy> {
    check_corpus(images, set.side(), "selection_bias_one")?;
    let mut per_template = Vec::with_capacity(set.len());
    for j in 0..set.len() {
        let picks = vec![j; images.len()];
        per_template.push(assignment_ap(enc, set, manip, images, &picks, cfg.strength)?);
    }
    let min = per_template.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_template.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = per_template.iter().sum::<f64>() / per_template.len() as f64;
    Ok(BiasOneStudy {
        per_template,
        min,
        max,
        mean,
    })
}

// ---- passive baseline scoring ----

/// Probability of the encrypted-real class from the passive classifier,
/// one value per image, computed with a numerically stable softmax.
pub fn passive_scores<T: Real>(
    clf: &PassiveClassifier<T>,
    images: &[Image<T>],
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::argument("passive_scores", "image list must be nonempty"));
    }
    let side = images[0].dim().1;
    check_corpus(images, side, "passive_scores")?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(SCORE_CHUNK) {
        let g = Graph::<T>::new();
        let items: Vec<Var> = chunk
            .iter()
            .map(|img| g.constant(img.clone().into_dyn()))
            .collect();
        let input = g.stack0(&items);
        let pass = clf.forward(&g, input, Mode::Eval, false);
        let logits = g.value(pass.out);
        for i in 0..chunk.len() {
            let l0 = logits[[i, 0]].to_f64();
            let l1 = logits[[i, 1]].to_f64();
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            out.push(e1 / (e0 + e1));
        }
    }
    Ok(out)
}
