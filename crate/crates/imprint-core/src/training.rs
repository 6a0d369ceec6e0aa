//! Joint optimization of the template set and the recovery encoder, plus
//! the baseline variants: frozen templates, a passive classifier, and
//! sign-step adversarial templates.
//!
//! One training step builds a single graph: every batch item is encrypted
//! with a uniformly selected template, optionally augmented, pushed through
//! the frozen manipulator for its fake branch, and both branches run
//! through the encoder in one batch so normalization statistics are shared.
//! The combined template objective and the detection objective are summed
//! into one scalar and a single backward pass feeds one optimizer step over
//! the templates and encoder together.
//!
//! Every random draw comes from streams derived off the config seed, and
//! all draws happen in f64, so reruns are bit-identical and the schedule
//! does not depend on the scalar type.

use std::collections::HashMap;
use std::io::{BufRead, Write as _};
use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::autograd::{Graph, Var};
use crate::config::TrainConfig;
use crate::losses::{self, LossBreakdown};
use crate::manipulate::Manipulator;
use crate::networks::{
    apply_bn_updates, BnUpdate, Mode, PassiveClassifier, RecoveryEncoder,
};
use crate::plane::{Image, Plane};
use crate::real::Real;
use crate::rng::RngStream;
use crate::template::TemplateSet;
use crate::{Error, Result};

/// Stream tags separating the independent random schedules.
const TEMPLATE_TAG: u64 = 0x54504c;
const LOOP_TAG: u64 = 0x4c4f4f50;

/// Adaptive-moment defaults.
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Sign-step sizes for the adversarial baseline: the one-shot attack jumps
/// by the full radius, the iterated attack uses the usual oversized
/// per-iteration step that projection reins in.
const PGD_STEP_FACTOR: f64 = 2.5;

/// First-order optimizer with per-tensor moment state, keyed by parameter
/// name. Moments accumulate in f64 regardless of the training scalar type.
pub struct Adam {
    pub learning_rate: f64,
    t: u64,
    moments: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Opens one optimizer step; every tensor updated afterwards shares the
    /// same bias-correction count.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update to subtract from the named parameter.
    pub fn delta(&mut self, name: &str, grad: &ArrayD<f64>) -> ArrayD<f64> {
        assert!(self.t > 0, "delta before begin_step");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
        m.zip_mut_with(grad, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
        v.zip_mut_with(grad, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let lr = self.learning_rate;
        let mut out = m.clone();
        out.zip_mut_with(v, |o, &v| {
            let mh = *o / c1;
            let vh = v / c2;
            *o = lr * mh / (vh.sqrt() + ADAM_EPS);
        });
        out
    }
}

/// One optimutation step as logged: the five objective terms (batch means),
/// the detection objective, and the scalar actually minimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub detection: f64,
    pub objective: f64,
}

/// End-of-epoch template-set summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pairwise_mean: f64,
    pub pairwise_min: f64,
    pub pairwise_max: f64,
    /// Mean recovery mismatch over the epoch's steps; the headline training
    /// curve.
    pub mean_recovery: f64,
}

/// Full training trace. Everything except `wall_seconds` is deterministic
/// given the config, and rerun identity is defined over that part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub variant: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
}

/// One JSON-lines record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord {
    Meta { config_hash: String, variant: String },
    Step(StepRecord),
    Epoch(EpochRecord),
    Timing { wall_seconds: f64 },
}

impl TrainLog {
    fn new(config_hash: String, variant: &str) -> Self {
        TrainLog {
            config_hash,
            variant: variant.to_string(),
            steps: Vec::new(),
            epochs: Vec::new(),
            wall_seconds: 0.0,
        }
    }

    /// The JSON-lines serialization minus the timing record; two runs of
    /// one config must agree on this byte-for-byte.
    pub fn deterministic_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &LogRecord| {
            out.push_str(&serde_json::to_string(r).expect("log serializes"));
            out.push('\n');
        };
        push(&LogRecord::Meta {
            config_hash: self.config_hash.clone(),
            variant: self.variant.clone(),
        });
        for s in &self.steps {
            push(&LogRecord::Step(s.clone()));
        }
        for e in &self.epochs {
            push(&LogRecord::Epoch(e.clone()));
        }
        out
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.deterministic_jsonl().as_bytes())?;
        let timing = LogRecord::Timing {
            wall_seconds: self.wall_seconds,
        };
        writeln!(f, "{}", serde_json::to_string(&timing)?)?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let show = path.display().to_string();
        let f = std::fs::File::open(path)?;
        let mut log: Option<TrainLog> = None;
        for line in std::io::BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LogRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(show.clone(), e.to_string()))?;
            match record {
                LogRecord::Meta {
                    config_hash,
                    variant,
                } => log = Some(TrainLog::new(config_hash, &variant)),
                LogRecord::Step(s) => log
                    .as_mut()
                    .ok_or_else(|| Error::format(show.clone(), "step before meta"))?
                    .steps
                    .push(s),
                LogRecord::Epoch(e) => log
                    .as_mut()
                    .ok_or_else(|| Error::format(show.clone(), "epoch before meta"))?
                    .epochs
                    .push(e),
                LogRecord::Timing { wall_seconds } => {
                    if let Some(l) = log.as_mut() {
                        l.wall_seconds = wall_seconds;
                    }
                }
            }
        }
        log.ok_or_else(|| Error::format(show, "no meta record"))
    }
}

/// Artifacts of a template-learning run.
pub struct TrainOutcome<T: Real> {
    pub templates: TemplateSet<T>,
    pub encoder: RecoveryEncoder<T>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::argument("attack", format!("unknown attack {other:?}"))),
        }
    }
}

/// How template planes move each step.
enum TemplateMode {
    /// Shared first-order step with the encoder.
    Joint,
    /// Planes stay at initialization.
    Frozen,
    /// Sign-gradient steps projected onto the max-norm ball of radius
    /// `epsilon` around initialization.
    Adversarial {
        epsilon: f64,
        step_size: f64,
        iterations: usize,
    },
}

impl TemplateMode {
    fn iterations(&self) -> usize {
        match self {
            TemplateMode::Adversarial { iterations, .. } => *iterations,
            _ => 1,
        }
    }
}

/// The template set every run starts from, reproducible from the config
/// alone so evaluation code can rebuild it.
pub fn initial_templates<T: Real>(cfg: &TrainConfig, side: usize) -> Result<TemplateSet<T>> {
    let mut rng = RngStream::new(cfg.seed).derive(TEMPLATE_TAG);
    TemplateSet::init_uniform(cfg.set_size, side, &mut rng)
}

/// Validates the corpus and returns the shared square side.
fn corpus_side<T: Real>(data: &[Image<T>]) -> Result<usize> {
    let Some(first) = data.first() else {
        return Err(Error::argument("corpus", "no images to train on"));
    };
    let (c, h, w) = first.dim();
    if c != crate::CHANNELS || h != w || h < 2 {
        return Err(Error::shape(
            "corpus",
            "3 x side x side with side >= 2",
            format!("{c}x{h}x{w}"),
        ));
    }
    for img in data {
        if img.dim() != (c, h, w) {
            let (ic, ih, iw) = img.dim();
            return Err(Error::shape("corpus", format!("{c}x{h}x{w}"), format!("{ic}x{ih}x{iw}")));
        }
    }
    Ok(h)
}

/// Full joint training: templates and encoder, one optimizer.
pub fn train<T: Real>(cfg: &TrainConfig, data: &[Image<T>]) -> Result<TrainOutcome<T>> {
    run_template_training(cfg, data, TemplateMode::Joint, "full")
}

/// Ablation: identical loop but the template planes never move.
pub fn train_fixed_template<T: Real>(
    cfg: &TrainConfig,
    data: &[Image<T>],
) -> Result<TrainOutcome<T>> {
    run_template_training(cfg, data, TemplateMode::Frozen, "fixed_template")
}

/// Baseline: replaces template learning with sign-gradient noise bounded in
/// max norm around initialization. The magnitude, spectral, and overlap
/// terms are dropped; the encoder still trains normally.
pub fn train_adversarial_baseline<T: Real>(
    cfg: &TrainConfig,
    data: &[Image<T>],
    attack: AttackKind,
    epsilon: f64,
    steps: usize,
) -> Result<TrainOutcome<T>> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::argument("epsilon", "must be positive and finite"));
    }
    if steps == 0 {
        return Err(Error::argument("steps", "must be at least 1"));
    }
    if attack == AttackKind::Fgsm && steps > 1 {
        return Err(Error::argument("steps", "the one-shot attack takes exactly 1 step"));
    }
    let mut effective = cfg.clone();
    effective.weights.magnitude = 0.0;
    effective.weights.lowpass = 0.0;
    effective.weights.pairwise = 0.0;
    let (step_size, iterations) = match attack {
        AttackKind::Fgsm => (epsilon, 1),
        AttackKind::Pgd => (PGD_STEP_FACTOR * epsilon / steps as f64, steps),
    };
    let variant = match attack {
        AttackKind::Fgsm => format!("adversarial_fgsm_eps{epsilon}"),
        AttackKind::Pgd => format!("adversarial_pgd_eps{epsilon}_steps{steps}"),
    };
    run_template_training(
        &effective,
        data,
        TemplateMode::Adversarial {
            epsilon,
            step_size,
            iterations,
        },
        &variant,
    )
}

/// Ablation: full training with one objective term's weight forced to 0.
/// `dropped` takes the `LossWeights` field names.
pub fn remove_loss_variant<T: Real>(
    cfg: &TrainConfig,
    data: &[Image<T>],
    dropped: &str,
) -> Result<TrainOutcome<T>> {
    let effective = cfg.drop_loss(dropped)?;
    run_template_training(
        &effective,
        data,
        TemplateMode::Joint,
        &format!("drop_{dropped}"),
    )
}

/// Handles to everything a step graph exposes for one optimizer update.
struct StepGraph<T: Real> {
    g: Graph<T>,
    template_vars: Vec<Var>,
    encoder_params: Vec<(String, Var)>,
    bn: Vec<BnUpdate>,
    j_m: Var,
    j_r: Var,
    j_c: Var,
    j_s: Var,
    j_p: Var,
    detect: Var,
    root: Var,
}

/// Builds the whole step: encrypt, augment, manipulate, encode both
/// branches together, and assemble the summed objective.
fn build_step<T: Real>(
    cfg: &TrainConfig,
    templates: &TemplateSet<T>,
    encoder: &RecoveryEncoder<T>,
    manipulator: &Manipulator<T>,
    batch: &[&Image<T>],
    rng: &mut RngStream,
    train_templates: bool,
) -> StepGraph<T> {
    let g = Graph::<T>::new();
    let side = templates.side();
    let template_vars: Vec<Var> = templates
        .planes()
        .iter()
        .map(|p| {
            let v = p.clone().into_dyn();
            if train_templates {
                g.leaf(v)
            } else {
                g.constant(v)
            }
        })
        .collect();

    let mut selected = Vec::with_capacity(batch.len());
    let mut real_items = Vec::with_capacity(batch.len());
    for img in batch {
        let idx = rng.index(template_vars.len());
        selected.push(idx);
        let x = g.constant((*img).clone().into_dyn());
        let enc = g.broadcast_add_plane(x, template_vars[idx], T::of(cfg.strength));
        real_items.push(augment::apply_recipe(&g, enc, &cfg.augmentation, rng));
    }

    let real_batch = g.stack0(&real_items);
    let fake_batch = manipulator.apply(&g, real_batch);
    let mut all_items = real_items.clone();
    for i in 0..batch.len() {
        all_items.push(g.select0(fake_batch, i));
    }
    let input = g.stack0(&all_items);
    let pass = encoder.forward(&g, input, Mode::Train, true);

    let normalized = losses::normalized_set(&g, &template_vars);
    let mut j_m_items = Vec::new();
    let mut j_r_items = Vec::new();
    let mut j_c_items = Vec::new();
    let mut j_s_items = Vec::new();
    let mut scores = Vec::new();
    for (i, &idx) in selected.iter().enumerate() {
        let s_r = g.reshape(g.select0(pass.out, i), &[side, side]);
        let s_f = g.reshape(g.select0(pass.out, batch.len() + i), &[side, side]);
        j_m_items.push(losses::magnitude_term(&g, template_vars[idx]));
        j_r_items.push(losses::recovery_term(&g, template_vars[idx], s_r));
        j_c_items.push(losses::lowpass_term(&g, template_vars[idx], cfg.lowpass_k));
        j_s_items.push(losses::fake_similarity_term(&g, &normalized, s_f));
        let real_cos: Vec<Var> = template_vars.iter().map(|&t| g.cos_flat(s_r, t)).collect();
        let fake_cos: Vec<Var> = template_vars.iter().map(|&t| g.cos_flat(s_f, t)).collect();
        scores.push((g.max_of(&real_cos).0, true));
        scores.push((g.max_of(&fake_cos).0, false));
    }
    let j_m = g.mean_of(&j_m_items);
    let j_r = g.mean_of(&j_r_items);
    let j_c = g.mean_of(&j_c_items);
    let j_s = g.mean_of(&j_s_items);
    let j_p = losses::pairwise_term(&g, &normalized);
    let detect = losses::detection_term(&g, &scores);

    // Zero-weight terms contribute nothing to either the value or the
    // gradient, so they stay out of the optimized sum; their values are
    // still logged.
    let w = cfg.weights;
    let mut terms = Vec::new();
    for (var, weight) in [
        (j_m, w.magnitude),
        (j_r, w.recovery),
        (j_c, w.lowpass),
        (j_s, w.fake_similarity),
        (j_p, w.pairwise),
    ] {
        if weight != 0.0 {
            terms.push((var, T::of(weight)));
        }
    }
    let root = if terms.is_empty() {
        detect
    } else {
        let eq_total = g.weighted_sum(&terms);
        g.add(eq_total, detect)
    };

    StepGraph {
        g,
        template_vars,
        encoder_params: pass.params,
        bn: pass.bn,
        j_m,
        j_r,
        j_c,
        j_s,
        j_p,
        detect,
        root,
    }
}

fn grad_to_f64<T: Real>(grad: Option<ArrayD<T>>, shape: &[usize]) -> ArrayD<f64> {
    match grad {
        Some(a) => a.mapv(|v| v.to_f64()),
        None => ArrayD::zeros(ndarray::IxDyn(shape)),
    }
}

fn apply_delta<T: Real>(param: &mut ArrayD<T>, delta: &ArrayD<f64>) {
    param.zip_mut_with(delta, |p, &d| *p = T::of(p.to_f64() - d));
}

fn run_template_training<T: Real>(
    cfg: &TrainConfig,
    data: &[Image<T>],
    mode: TemplateMode,
    variant: &str,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let side = corpus_side(data)?;
    if cfg.lowpass_k > side {
        return Err(Error::argument(
            "lowpass_k",
            format!("window {} exceeds image side {side}", cfg.lowpass_k),
        ));
    }
    let manipulator: Manipulator<T> =
        Manipulator::with_side(cfg.manipulator.kind, cfg.manipulator.seed, side);
    let frozen_checksum = manipulator.checksum();

    let mut templates = initial_templates::<T>(cfg, side)?;
    let init_planes: Vec<Plane<T>> = match mode {
        TemplateMode::Adversarial { .. } => templates.planes().to_vec(),
        _ => Vec::new(),
    };
    let mut encoder = RecoveryEncoder::<T>::init(cfg.encoder, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let train_templates = !matches!(mode, TemplateMode::Frozen);

    let loop_rng = RngStream::new(cfg.seed).derive(LOOP_TAG);
    let mut log = TrainLog::new(cfg.hash(), variant);
    let start = Instant::now();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut ep_rng = loop_rng.derive(epoch as u64);
        let order = ep_rng.permutation(data.len());
        let mut epoch_recovery = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Image<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let snap = ep_rng.state();
            let mut record = None;
            let mut encoder_grads: Vec<(String, ArrayD<f64>)> = Vec::new();
            let mut template_grads: Vec<ArrayD<f64>> = Vec::new();
            let mut bn_updates = Vec::new();
            let iterations = mode.iterations();
            for iter in 0..iterations {
                if iter > 0 {
                    ep_rng = RngStream::restore(snap);
                }
                let sg = build_step(
                    cfg,
                    &templates,
                    &encoder,
                    &manipulator,
                    &batch,
                    &mut ep_rng,
                    train_templates,
                );
                let objective = sg.g.scalar(sg.root).to_f64();
                if !objective.is_finite() || objective > cfg.divergence_limit {
                    return Err(Error::Diverged {
                        step,
                        value: objective,
                    });
                }
                let losses = LossBreakdown {
                    j_m: sg.g.scalar(sg.j_m).to_f64(),
                    j_r: sg.g.scalar(sg.j_r).to_f64(),
                    j_c: sg.g.scalar(sg.j_c).to_f64(),
                    j_s: sg.g.scalar(sg.j_s).to_f64(),
                    j_p: sg.g.scalar(sg.j_p).to_f64(),
                    total: 0.0,
                    weights: cfg.weights,
                };
                let losses = LossBreakdown {
                    total: losses.readd(),
                    ..losses
                };
                let detection = sg.g.scalar(sg.detect).to_f64();

                let mut sg = sg;
                let mut grads = sg.g.backward(sg.root);
                let raw_template_grads: Vec<ArrayD<f64>> = sg
                    .template_vars
                    .iter()
                    .map(|&v| grad_to_f64(grads.take(v), &[side, side]))
                    .collect();
                let last = iter + 1 == iterations;
                if last {
                    encoder_grads = sg
                        .encoder_params
                        .iter()
                        .map(|(name, var)| {
                            let shape = encoder.store.get(name).shape().to_vec();
                            (name.clone(), grad_to_f64(grads.take(*var), &shape))
                        })
                        .collect();
                    bn_updates = std::mem::take(&mut sg.bn);
                    record = Some(StepRecord {
                        step,
                        epoch,
                        losses,
                        detection,
                        objective,
                    });
                }
                drop(grads);
                drop(sg);

                match &mode {
                    TemplateMode::Adversarial {
                        epsilon, step_size, ..
                    } => {
                        // Sign step applied immediately so the next attack
                        // iteration sees the moved template.
                        for (i, grad) in raw_template_grads.iter().enumerate() {
                            let init = &init_planes[i];
                            let plane = &mut templates.planes_mut()[i];
                            let g2 = grad.view().into_dimensionality::<Ix2>().expect("plane grad");
                            ndarray::Zip::from(&mut *plane)
                                .and(init)
                                .and(&g2)
                                .for_each(|p, &p0, &gv| {
                                    let moved = p.to_f64() - step_size * gv.signum();
                                    let lo = p0.to_f64() - epsilon;
                                    let hi = p0.to_f64() + epsilon;
                                    *p = T::of(moved.clamp(lo, hi));
                                });
                        }
                    }
                    TemplateMode::Joint if last => template_grads = raw_template_grads,
                    _ => {}
                }
            }
            let record = record.expect("at least one iteration ran");
            epoch_recovery.push(record.losses.j_r);

            adam.begin_step();
            if matches!(mode, TemplateMode::Joint) {
                for (i, grad) in template_grads.iter().enumerate() {
                    let delta = adam.delta(&format!("template.{i}"), grad);
                    let plane = &mut templates.planes_mut()[i];
                    let d2 = delta.into_dimensionality::<Ix2>().expect("plane delta");
                    ndarray::Zip::from(&mut *plane).and(&d2).for_each(|p, &d| {
                        *p = T::of(p.to_f64() - d);
                    });
                }
            }
            for (name, grad) in &encoder_grads {
                let delta = adam.delta(name, grad);
                encoder.store.update_in_place(name, |arr| apply_delta(arr, &delta));
            }
            apply_bn_updates(&mut encoder.store, &bn_updates);

            log.steps.push(record);
            step += 1;
        }

        if manipulator.checksum() != frozen_checksum {
            return Err(Error::FrozenDrift(format!(
                "manipulator parameters changed during epoch {epoch}"
            )));
        }
        let stats = templates.pairwise_cosine_stats();
        let mean_recovery = if epoch_recovery.is_empty() {
            0.0
        } else {
            epoch_recovery.iter().sum::<f64>() / epoch_recovery.len() as f64
        };
        log.epochs.push(EpochRecord {
            epoch,
            pairwise_mean: stats.mean,
            pairwise_min: stats.min,
            pairwise_max: stats.max,
            mean_recovery,
        });
    }

    if !encoder.store.all_finite() {
        return Err(Error::NonFinite("encoder parameters"));
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        templates,
        encoder,
        log,
    })
}

/// Baseline without template learning: a plain binary classifier trained
/// with cross entropy on encrypted-real vs manipulated pairs. The template
/// set stays at initialization and is used for encryption only. Class
/// index 1 is encrypted-real, matching the positive label elsewhere.
pub fn train_passive_classifier<T: Real>(
    cfg: &TrainConfig,
    data: &[Image<T>],
) -> Result<(PassiveClassifier<T>, TrainLog)> {
    cfg.validate()?;
    let side = corpus_side(data)?;
    let manipulator: Manipulator<T> =
        Manipulator::with_side(cfg.manipulator.kind, cfg.manipulator.seed, side);
    let frozen_checksum = manipulator.checksum();
    let templates = initial_templates::<T>(cfg, side)?;
    let encrypt_cfg = crate::template::EncryptConfig::training(cfg.strength);
    let mut classifier = PassiveClassifier::<T>::init(cfg.classifier, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);

    let loop_rng = RngStream::new(cfg.seed).derive(LOOP_TAG);
    let mut log = TrainLog::new(cfg.hash(), "passive");
    let start = Instant::now();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut ep_rng = loop_rng.derive(epoch as u64);
        let order = ep_rng.permutation(data.len());
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut reals = Vec::with_capacity(b);
            for &i in chunk {
                let sel = ep_rng.index(templates.len());
                let enc = templates.encrypt(&data[i], sel, encrypt_cfg)?;
                reals.push(augment::augment_image_value(&enc, &cfg.augmentation, &mut ep_rng));
            }

            let g = Graph::<T>::new();
            let real_items: Vec<Var> =
                reals.iter().map(|r| g.constant(r.clone().into_dyn())).collect();
            let real_batch = g.stack0(&real_items);
            let fake_batch = manipulator.apply(&g, real_batch);
            let mut all_items = real_items.clone();
            for i in 0..b {
                all_items.push(g.select0(fake_batch, i));
            }
            let input = g.stack0(&all_items);
            let pass = classifier.forward(&g, input, Mode::Train, true);
            let mut labels = vec![1usize; b];
            labels.extend(std::iter::repeat(0usize).take(b));
            let ce = losses::passive_ce_term(&g, pass.out, &labels);

            let objective = g.scalar(ce).to_f64();
            if !objective.is_finite() || objective > cfg.divergence_limit {
                return Err(Error::Diverged {
                    step,
                    value: objective,
                });
            }
            let mut grads = g.backward(ce);
            let param_grads: Vec<(String, ArrayD<f64>)> = pass
                .params
                .iter()
                .map(|(name, var)| {
                    let shape = classifier.store.get(name).shape().to_vec();
                    (name.clone(), grad_to_f64(grads.take(*var), &shape))
                })
                .collect();
            let bn_updates = pass.bn;
            drop(grads);
            drop(g);

            adam.begin_step();
            for (name, grad) in &param_grads {
                let delta = adam.delta(name, grad);
                classifier
                    .store
                    .update_in_place(name, |arr| apply_delta(arr, &delta));
            }
            apply_bn_updates(&mut classifier.store, &bn_updates);

            log.steps.push(StepRecord {
                step,
                epoch,
                losses: LossBreakdown {
                    j_m: 0.0,
                    j_r: 0.0,
                    j_c: 0.0,
                    j_s: 0.0,
                    j_p: 0.0,
                    total: 0.0,
                    weights: cfg.weights,
                },
                detection: objective,
                objective,
            });
            step += 1;
        }

        if manipulator.checksum() != frozen_checksum {
            return Err(Error::FrozenDrift(format!(
                "manipulator parameters changed during epoch {epoch}"
            )));
        }
        let stats = templates.pairwise_cosine_stats();
        log.epochs.push(EpochRecord {
            epoch,
            pairwise_mean: stats.mean,
            pairwise_min: stats.min,
            pairwise_max: stats.max,
            mean_recovery: 0.0,
        });
    }

    if !classifier.store.all_finite() {
        return Err(Error::NonFinite("classifier parameters"));
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((classifier, log))
}
