//! The template-recovery encoder and the passive baseline classifier.
//!
//! Both models are plain parameter stores plus a forward function that
//! records onto a [`Graph`]. Parameters live behind `Arc`s so binding them
//! into a step's graph costs nothing; the optimizer mutates them through
//! [`ParamStore::update_in_place`] after the graph is dropped.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::autograd::{BatchStats, Graph, Var};
use crate::real::Real;
use crate::rng::RngStream;
use crate::{Error, Result};

const WEIGHTS_MAGIC: &[u8; 4] = b"PIMW";
const WEIGHTS_VERSION: u16 = 1;

/// Batch-norm epsilon used by every normalization layer.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the current batch folded into running statistics per step.
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a forward pass normalizes with batch statistics (`Train`) or the
/// stored running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One named tensor. Non-trainable entries carry batch-norm running
/// statistics; they ride along in the container but never receive gradient.
struct Entry<T: Real> {
    name: String,
    value: Arc<ArrayD<T>>,
    trainable: bool,
}

/// Ordered, named parameter collection with a binary container format.
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value: Arc::new(value),
            trainable,
        });
    }

    pub fn arc(&self, name: &str) -> Arc<ArrayD<T>> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.entries[i].value.clone()
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].value
    }

    /// Mutates one tensor in place. Clones the allocation only if a graph
    /// from a previous step still holds it, so callers drop graphs first.
    pub fn update_in_place(&mut self, name: &str, f: impl FnOnce(&mut ArrayD<T>)) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        f(Arc::make_mut(&mut self.entries[i].value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    /// Total element count across trainable tensors.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Hex digest over names, shapes and 32-bit payloads; stable across
    /// precisions up to f32 rounding, used for freeze and determinism checks.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([u8::from(e.trainable)]);
            for &d in e.value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in e.value.iter() {
                h.update((v.to_f64() as f32).to_le_bytes());
            }
        }
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Writes the container: magic, version, tensor count, then a manifest
    /// of (name, trainable, shape) records, then all payloads as row-major
    /// little-endian f32 in manifest order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let nb = e.name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(u8::from(e.trainable));
            buf.push(e.value.ndim() as u8);
            for &d in e.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for e in &self.entries {
            for v in e.value.iter() {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |reason: &str| Error::format(path.display().to_string(), reason);
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad("truncated container"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != WEIGHTS_MAGIC {
            return Err(bad("not a weights container"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(bad("unsupported container version"));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut manifest: Vec<(String, bool, Vec<usize>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(nlen)?)
                .map_err(|_| bad("non-utf8 tensor name"))?
                .to_string();
            let trainable = match take(1)?[0] {
                0 => false,
                1 => true,
                _ => return Err(bad("bad trainable flag")),
            };
            let ndim = take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            if dims.iter().product::<usize>() == 0 {
                return Err(bad("zero-sized tensor"));
            }
            manifest.push((name, trainable, dims));
        }
        let mut store = ParamStore::new();
        for (name, trainable, dims) in manifest {
            let n = dims.iter().product::<usize>();
            let raw = take(n * 4)?;
            let mut data = Vec::with_capacity(n);
            for ch in raw.chunks_exact(4) {
                let v = f32::from_le_bytes(ch.try_into().unwrap());
                if !v.is_finite() {
                    return Err(bad("non-finite parameter"));
                }
                data.push(T::of(v as f64));
            }
            if store.index.contains_key(&name) {
                return Err(bad("duplicate tensor name"));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|_| bad("shape/payload mismatch"))?;
            store.insert(&name, arr, trainable);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(store)
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch statistics produced by one train-mode forward, to be folded into
/// the named layer's running statistics after the optimizer step.
pub struct BnUpdate {
    pub name: String,
    pub stats: BatchStats,
}

/// Everything a training step needs back from a forward pass.
pub struct ForwardPass {
    pub out: Var,
    pub bn: Vec<BnUpdate>,
    /// Bound (name, var) pairs for trainable tensors; empty when bound
    /// frozen.
    pub params: Vec<(String, Var)>,
}

// ---- shared layer plumbing ----

struct Binder<'a, T: Real> {
    g: &'a Graph<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl<'a, T: Real> Binder<'a, T> {
    fn new(g: &'a Graph<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binder {
            g,
            store,
            trainable,
            bound: Vec::new(),
        }
    }

    fn param(&mut self, name: &str) -> Var {
        let arc = self.store.arc(name);
        if self.trainable {
            let v = self.g.leaf_shared(arc);
            self.bound.push((name.to_string(), v));
            v
        } else {
            self.g.constant_shared(arc)
        }
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.g.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, x: Var, prefix: &str, mode: Mode, updates: &mut Vec<BnUpdate>) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        match mode {
            Mode::Train => {
                let (y, stats) = self.g.batchnorm_train(x, gamma, beta, BN_EPS);
                updates.push(BnUpdate {
                    name: prefix.to_string(),
                    stats,
                });
                y
            }
            Mode::Eval => {
                let rm: Vec<f64> = self
                    .store
                    .get(&format!("{prefix}.mean"))
                    .iter()
                    .map(|v| v.to_f64())
                    .collect();
                let rv: Vec<f64> = self
                    .store
                    .get(&format!("{prefix}.var"))
                    .iter()
                    .map(|v| v.to_f64())
                    .collect();
                self.g.batchnorm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.g.linear(x, w, b)
    }
}

fn he_conv<T: Real>(rng: &mut RngStream, out_c: usize, in_c: usize, k: usize) -> ArrayD<T> {
    let fan_in = (in_c * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[out_c, in_c, k, k]), || {
        T::of(rng.normal_f64() * std)
    })
}

fn he_fc<T: Real>(rng: &mut RngStream, out_f: usize, in_f: usize) -> ArrayD<T> {
    let std = (2.0 / in_f as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[out_f, in_f]), || T::of(rng.normal_f64() * std))
}

fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::ZERO)
}

fn ones<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::ONE)
}

fn insert_bn<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(&format!("{prefix}.gamma"), ones(&[c]), true);
    store.insert(&format!("{prefix}.beta"), zeros(&[c]), true);
    store.insert(&format!("{prefix}.mean"), zeros(&[c]), false);
    store.insert(&format!("{prefix}.var"), ones(&[c]), false);
}

/// Folds the batch statistics from a train-mode forward into the store's
/// running statistics: running <- (1 - momentum) * running + momentum * batch.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate]) {
    for u in updates {
        store.update_in_place(&format!("{}.mean", u.name), |arr| {
            for (slot, &m) in arr.iter_mut().zip(u.stats.mean.iter()) {
                *slot = T::of((1.0 - BN_MOMENTUM) * slot.to_f64() + BN_MOMENTUM * m);
            }
        });
        store.update_in_place(&format!("{}.var", u.name), |arr| {
            for (slot, &v) in arr.iter_mut().zip(u.stats.var.iter()) {
                *slot = T::of((1.0 - BN_MOMENTUM) * slot.to_f64() + BN_MOMENTUM * v);
            }
        });
    }
}

fn check_image_input<T: Real>(g: &Graph<T>, x: Var) {
    let v = g.value(x);
    assert_eq!(v.ndim(), 4, "model input must be (N, C, H, W)");
    assert_eq!(v.shape()[1], 3, "model input must have 3 channels");
}

// ---- recovery encoder ----

/// Architecture knobs for the encoder: stem widths and trunk block count.
/// The layout (two stem convolutions, then conv+norm+relu blocks, then a
/// 1x1 head) is fixed; widths trade accuracy against desk-scale run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderDesc {
    pub stem: (usize, usize),
    pub blocks: usize,
}

impl Default for EncoderDesc {
    fn default() -> Self {
        EncoderDesc {
            stem: (16, 32),
            blocks: 10,
        }
    }
}

impl EncoderDesc {
    /// Narrow widths sized for single-core CPU experiments; same layout.
    pub fn desk() -> Self {
        EncoderDesc {
            stem: (4, 8),
            blocks: 10,
        }
    }
}

/// Shallow fully convolutional net mapping an image batch (N, 3, H, W) to
/// recovered template planes (N, 1, H, W). Stride 1 throughout, so forward
/// cost does not depend on how many templates the detector compares
/// against.
pub struct RecoveryEncoder<T: Real> {
    pub desc: EncoderDesc,
    pub store: ParamStore<T>,
}

impl<T: Real> RecoveryEncoder<T> {
    pub fn init(desc: EncoderDesc, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).derive(0x454e43);
        let (w1, w2) = desc.stem;
        let mut store = ParamStore::new();
        store.insert("stem1.w", he_conv(&mut rng, w1, 3, 3), true);
        store.insert("stem1.b", zeros(&[w1]), true);
        store.insert("stem2.w", he_conv(&mut rng, w2, w1, 3), true);
        store.insert("stem2.b", zeros(&[w2]), true);
        for i in 0..desc.blocks {
            store.insert(&format!("block{i}.conv.w"), he_conv(&mut rng, w2, w2, 3), true);
            store.insert(&format!("block{i}.conv.b"), zeros(&[w2]), true);
            insert_bn(&mut store, &format!("block{i}.bn"), w2);
        }
        store.insert("head.w", he_conv(&mut rng, 1, w2, 1), true);
        store.insert("head.b", zeros(&[1]), true);
        RecoveryEncoder { desc, store }
    }

    /// Rebuilds a model from a loaded store, validating the manifest against
    /// the descriptor.
    pub fn from_store(desc: EncoderDesc, store: ParamStore<T>) -> Result<Self> {
        let fresh = Self::init(desc, 0);
        validate_manifest(&fresh.store, &store)?;
        Ok(RecoveryEncoder { desc, store })
    }

    /// Records the forward pass onto `g`. `trainable` binds parameters as
    /// leaves so backward reaches them; bind frozen for scoring and for
    /// input-gradient work.
    pub fn forward(&self, g: &Graph<T>, x: Var, mode: Mode, trainable: bool) -> ForwardPass {
        check_image_input(g, x);
        let mut b = Binder::new(g, &self.store, trainable);
        let mut bn = Vec::new();
        let mut h = g.relu(b.conv(x, "stem1", 1, 1));
        h = g.relu(b.conv(h, "stem2", 1, 1));
        for i in 0..self.desc.blocks {
            let c = b.conv(h, &format!("block{i}.conv"), 1, 1);
            let n = b.bn(c, &format!("block{i}.bn"), mode, &mut bn);
            h = g.relu(n);
        }
        let out = b.conv(h, "head", 1, 0);
        ForwardPass {
            out,
            bn,
            params: b.bound,
        }
    }
}

// ---- passive classifier ----

/// Architecture knobs for the baseline classifier: the 8 block widths and
/// the two hidden fully connected widths. Blocks 2, 4, 6 and 8 downsample
/// by stride 2; head is global average pooling plus three fully connected
/// layers ending in 2 logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierDesc {
    pub channels: [usize; 8],
    pub fc: [usize; 2],
}

impl Default for ClassifierDesc {
    fn default() -> Self {
        ClassifierDesc {
            channels: [16, 16, 32, 32, 64, 64, 128, 128],
            fc: [64, 32],
        }
    }
}

impl ClassifierDesc {
    /// Narrow widths sized for single-core CPU experiments; same layout.
    pub fn desk() -> Self {
        ClassifierDesc {
            channels: [4, 4, 8, 8, 16, 16, 32, 32],
            fc: [16, 8],
        }
    }
}

/// Binary manipulated-vs-encrypted classifier: (N, 3, H, W) -> (N, 2).
pub struct PassiveClassifier<T: Real> {
    pub desc: ClassifierDesc,
    pub store: ParamStore<T>,
}

impl<T: Real> PassiveClassifier<T> {
    pub fn init(desc: ClassifierDesc, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).derive(0x434c46);
        let mut store = ParamStore::new();
        let mut in_c = 3;
        for (i, &out_c) in desc.channels.iter().enumerate() {
            store.insert(
                &format!("block{i}.conv.w"),
                he_conv(&mut rng, out_c, in_c, 3),
                true,
            );
            store.insert(&format!("block{i}.conv.b"), zeros(&[out_c]), true);
            insert_bn(&mut store, &format!("block{i}.bn"), out_c);
            in_c = out_c;
        }
        let feat = desc.channels[7];
        store.insert("fc1.w", he_fc(&mut rng, desc.fc[0], feat), true);
        store.insert("fc1.b", zeros(&[desc.fc[0]]), true);
        store.insert("fc2.w", he_fc(&mut rng, desc.fc[1], desc.fc[0]), true);
        store.insert("fc2.b", zeros(&[desc.fc[1]]), true);
        store.insert("fc3.w", he_fc(&mut rng, 2, desc.fc[1]), true);
        store.insert("fc3.b", zeros(&[2]), true);
        PassiveClassifier { desc, store }
    }

    pub fn from_store(desc: ClassifierDesc, store: ParamStore<T>) -> Result<Self> {
        let fresh = Self::init(desc, 0);
        validate_manifest(&fresh.store, &store)?;
        Ok(PassiveClassifier { desc, store })
    }

    pub fn forward(&self, g: &Graph<T>, x: Var, mode: Mode, trainable: bool) -> ForwardPass {
        check_image_input(g, x);
        let mut b = Binder::new(g, &self.store, trainable);
        let mut bn = Vec::new();
        let mut h = x;
        for i in 0..8 {
            let stride = if i % 2 == 1 { 2 } else { 1 };
            let c = b.conv(h, &format!("block{i}.conv"), stride, 1);
            let n = b.bn(c, &format!("block{i}.bn"), mode, &mut bn);
            h = g.relu(n);
        }
        let feat = g.global_avg_pool(h);
        let f1 = g.relu(b.linear(feat, "fc1"));
        let f2 = g.relu(b.linear(f1, "fc2"));
        let out = b.linear(f2, "fc3");
        ForwardPass {
            out,
            bn,
            params: b.bound,
        }
    }
}

fn validate_manifest<T: Real>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    let exp: Vec<(String, Vec<usize>)> = expected
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.value.shape().to_vec()))
        .collect();
    let act: Vec<(String, Vec<usize>)> = got
        .entries
        .iter()
        .map(|e| (e.name.clone(), e.value.shape().to_vec()))
        .collect();
    if exp != act {
        return Err(Error::Mismatch(
            "weights manifest does not match the architecture descriptor".to_string(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::grad_check;
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    fn small_batch(seed: u64, n: usize, side: usize) -> ArrayD<f64> {
        let mut rng = RngStream::new(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[n, 3, side, side]), || rng.unit_f64())
    }

    fn eval_encoder(enc: &RecoveryEncoder<f64>, x: &ArrayD<f64>) -> ArrayD<f64> {
        let g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let pass = enc.forward(&g, xv, Mode::Eval, false);
        g.value(pass.out).as_ref().clone()
    }

    #[test]
    fn encoder_maps_images_to_planes() {
        let enc = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 7);
        let x = small_batch(1, 2, 32);
        let out = eval_encoder(&enc, &x);
        assert_eq!(out.shape(), &[2, 1, 32, 32]);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_eval_forward_is_deterministic() {
        let enc = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 9);
        let x = small_batch(2, 1, 16);
        let a = eval_encoder(&enc, &x);
        let b = eval_encoder(&enc, &x);
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_parameters_different_seed_differs() {
        let a = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 5);
        let b = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 5);
        let c = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 6);
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_ne!(a.store.checksum(), c.store.checksum());
        assert!(a.store.all_finite());
    }

    #[test]
    fn desk_encoder_parameter_count_is_fixed_by_descriptor() {
        // stem: 4*3*9+4 + 8*4*9+8 = 112 + 296; ten blocks of
        // 8*8*9+8+8+8 = 600; head 8+1.
        let enc = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 1);
        assert_eq!(enc.store.trainable_len(), 112 + 296 + 10 * 600 + 9);
    }

    #[test]
    fn encoder_input_gradient_matches_finite_differences() {
        let enc = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 11);
        let x = small_batch(3, 1, 16);
        let r = grad_check(&[x], 1e-6, |g, vars| {
            let pass = enc.forward(g, vars[0], Mode::Eval, false);
            g.sum(pass.out)
        });
        assert!(r.max_rel <= 1e-3, "rel {}", r.max_rel);
    }

    #[test]
    fn encoder_parameter_gradients_flow_when_trainable() {
        let enc = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 13);
        let x = small_batch(4, 2, 8);
        let g = Graph::<f64>::new();
        let xv = g.constant(x);
        let pass = enc.forward(&g, xv, Mode::Train, true);
        let root = g.sum_sq(pass.out);
        let mut grads = g.backward(root);
        assert!(!pass.params.is_empty());
        let mut nonzero = 0usize;
        for (name, var) in &pass.params {
            let gr = grads
                .take(*var)
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            if gr.iter().any(|&v| v != 0.0) {
                nonzero += 1;
            }
        }
        assert!(nonzero > pass.params.len() / 2);
    }

    #[test]
    fn classifier_emits_two_logits_and_softmax_normalizes() {
        let clf = PassiveClassifier::<f64>::init(ClassifierDesc::desk(), 3);
        let x = small_batch(5, 2, 128);
        let g = Graph::<f64>::new();
        let xv = g.constant(x);
        let pass = clf.forward(&g, xv, Mode::Eval, false);
        let out = g.value(pass.out);
        assert_eq!(out.shape(), &[2, 2]);
        for i in 0..2 {
            let (a, b) = (out[IxDyn(&[i, 0])], out[IxDyn(&[i, 1])]);
            let m = a.max(b);
            let z = (a - m).exp() + (b - m).exp();
            let sum = (a - m).exp() / z + (b - m).exp() / z;
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn classifier_default_widths_follow_the_plan() {
        let clf = PassiveClassifier::<f64>::init(ClassifierDesc::default(), 4);
        assert_eq!(clf.store.get("block0.conv.w").shape(), &[16, 3, 3, 3]);
        assert_eq!(clf.store.get("block7.conv.w").shape(), &[128, 128, 3, 3]);
        assert_eq!(clf.store.get("fc1.w").shape(), &[64, 128]);
        assert_eq!(clf.store.get("fc3.w").shape(), &[2, 32]);
    }

    #[test]
    fn classifier_downsamples_to_eight_by_eight_before_pooling() {
        // Indirectly: a 128 input with 4 stride-2 blocks pools over 8x8 and
        // still produces finite logits at 16x16 input (fully convolutional
        // until the pool).
        let clf = PassiveClassifier::<f64>::init(ClassifierDesc::desk(), 8);
        let x = small_batch(6, 1, 16);
        let g = Graph::<f64>::new();
        let xv = g.constant(x);
        let pass = clf.forward(&g, xv, Mode::Eval, false);
        assert_eq!(g.value(pass.out).shape(), &[1, 2]);
    }

    #[test]
    fn classifier_input_gradient_matches_finite_differences() {
        let clf = PassiveClassifier::<f64>::init(ClassifierDesc::desk(), 15);
        let x = small_batch(7, 1, 16);
        let r = grad_check(&[x], 1e-6, |g, vars| {
            let pass = clf.forward(g, vars[0], Mode::Eval, false);
            g.sum(pass.out)
        });
        assert!(r.max_rel <= 1e-3, "rel {}", r.max_rel);
    }

    #[test]
    fn weights_container_round_trips_bit_exact() {
        let enc = RecoveryEncoder::<f32>::init(EncoderDesc::desk(), 21);
        let dir = tempdir().unwrap();
        let path = dir.path().join("enc.pimw");
        enc.store.save(&path).unwrap();
        let loaded = ParamStore::<f32>::load(&path).unwrap();
        let rebuilt = RecoveryEncoder::from_store(EncoderDesc::desk(), loaded).unwrap();
        assert_eq!(enc.store.checksum(), rebuilt.store.checksum());
        for name in enc.store.names() {
            assert_eq!(enc.store.get(name), rebuilt.store.get(name), "{name}");
        }
    }

    #[test]
    fn loader_rejects_corrupt_weights() {
        let enc = RecoveryEncoder::<f32>::init(EncoderDesc::desk(), 22);
        let dir = tempdir().unwrap();
        let path = dir.path().join("enc.pimw");
        enc.store.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(ParamStore::<f32>::load(&path).is_err());

        let truncated = &good[..good.len() - 5];
        std::fs::write(&path, truncated).unwrap();
        assert!(ParamStore::<f32>::load(&path).is_err());

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, &trailing).unwrap();
        assert!(ParamStore::<f32>::load(&path).is_err());
    }

    #[test]
    fn from_store_rejects_wrong_architecture() {
        let enc = RecoveryEncoder::<f32>::init(EncoderDesc::desk(), 23);
        let dir = tempdir().unwrap();
        let path = dir.path().join("enc.pimw");
        enc.store.save(&path).unwrap();
        let loaded = ParamStore::<f32>::load(&path).unwrap();
        let err = RecoveryEncoder::from_store(EncoderDesc::default(), loaded);
        assert!(err.is_err());
    }

    #[test]
    fn running_statistics_converge_to_a_repeated_batch() {
        let mut enc = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 31);
        let x = small_batch(8, 4, 8);
        let train_out = {
            let g = Graph::<f64>::new();
            let xv = g.constant(x.clone());
            let pass = enc.forward(&g, xv, Mode::Train, false);
            let out = g.value(pass.out).as_ref().clone();
            apply_bn_updates(&mut enc.store, &pass.bn);
            out
        };
        // Folding the same batch repeatedly saturates the running stats.
        for _ in 0..200 {
            let g = Graph::<f64>::new();
            let xv = g.constant(x.clone());
            let pass = enc.forward(&g, xv, Mode::Train, false);
            apply_bn_updates(&mut enc.store, &pass.bn);
        }
        let eval_out = eval_encoder(&enc, &x);
        let diff = (&eval_out - &train_out).mapv(f64::abs);
        let max = diff.iter().cloned().fold(0.0, f64::max);
        assert!(max < 1e-6, "eval/train divergence after saturation: {max}");
    }

    #[test]
    fn checksum_tracks_parameter_edits() {
        let mut enc = RecoveryEncoder::<f64>::init(EncoderDesc::desk(), 41);
        let before = enc.store.checksum();
        enc.store.update_in_place("stem1.w", |w| {
            w[IxDyn(&[0, 0, 0, 0])] += 0.25;
        });
        assert_ne!(before, enc.store.checksum());
    }
}
