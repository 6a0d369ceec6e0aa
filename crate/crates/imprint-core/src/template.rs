//! The learned template set: initialization, random selection, addition to
//! images, pairwise similarity statistics, and the on-disk container.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::plane::{self, Image, Plane};
use crate::real::Real;
use crate::rng::RngStream;
use crate::{Result, CHANNELS};

const MAGIC: &[u8; 4] = b"PIMD";
const VERSION: u16 = 1;

/// How a template is added to an image.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncryptConfig {
    /// Strength factor applied to the template before addition.
    pub strength: f64,
    /// Clamp the sum into [0,1]; export paths set this, training never does.
    pub clamp_on_export: bool,
}

impl EncryptConfig {
    pub fn training(strength: f64) -> Self {
        EncryptConfig {
            strength,
            clamp_on_export: false,
        }
    }
}

/// Pairwise similarity summary over normalized templates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseStats {
    /// Upper-triangular entries (i, j, cosine) with i < j.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// An ordered set of single-channel noise templates plus the seed that
/// produced it. Immutable outside the training loop.
#[derive(Debug, Clone)]
pub struct TemplateSet<T: Real> {
    planes: Vec<Plane<T>>,
    side: usize,
    seed: u64,
}

impl<T: Real> TemplateSet<T> {
    /// Fresh set of i.i.d. U[0,1) planes. Deterministic in the stream.
    pub fn init_uniform(n: usize, side: usize, rng: &mut RngStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::argument("n", "need at least one template"));
        }
        if side < 2 {
            return Err(Error::argument("side", "side must be at least 2"));
        }
        let planes = (0..n)
            .map(|_| Array2::from_shape_simple_fn((side, side), || T::of(rng.unit_f64())))
            .collect();
        Ok(TemplateSet {
            planes,
            side,
            seed: rng.seed(),
        })
    }

    /// Wraps existing planes; all must be square and share one side length.
    pub fn from_planes(planes: Vec<Plane<T>>, seed: u64) -> Result<Self> {
        let Some(first) = planes.first() else {
            return Err(Error::argument("planes", "need at least one template"));
        };
        let (h, w) = first.dim();
        if h != w || h < 2 {
            return Err(Error::shape("template", "square side >= 2", format!("{h}x{w}")));
        }
        for p in &planes {
            if p.dim() != (h, w) {
                return Err(Error::shape(
                    "template",
                    format!("{h}x{w}"),
                    format!("{}x{}", p.dim().0, p.dim().1),
                ));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("template"));
            }
        }
        Ok(TemplateSet {
            planes,
            side: h,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn plane(&self, i: usize) -> &Plane<T> {
        &self.planes[i]
    }

    pub fn planes(&self) -> &[Plane<T>] {
        &self.planes
    }

    pub(crate) fn planes_mut(&mut self) -> &mut [Plane<T>] {
        &mut self.planes
    }

    /// Uniform template choice for one image; the index is recorded next to
    /// the image for diagnostics.
    pub fn select(&self, rng: &mut RngStream) -> (usize, &Plane<T>) {
        let i = rng.index(self.planes.len());
        (i, &self.planes[i])
    }

    /// X + m*S with S broadcast across channels. Clamps only when the config
    /// says this is an export.
    pub fn encrypt(&self, image: &Image<T>, index: usize, cfg: EncryptConfig) -> Result<Image<T>> {
        if index >= self.planes.len() {
            return Err(Error::argument("index", format!("no template {index}")));
        }
        let (c, h, w) = image.dim();
        if c != CHANNELS || h != self.side || w != self.side {
            return Err(Error::shape(
                "encrypt",
                format!("{CHANNELS}x{}x{}", self.side, self.side),
                format!("{c}x{h}x{w}"),
            ));
        }
        let m = T::of(cfg.strength);
        let s = &self.planes[index];
        let mut out = image.clone();
        for mut ch in out.outer_iter_mut() {
            ch.zip_mut_with(&s.view(), |o, &p| *o = *o + m * p);
        }
        if cfg.clamp_on_export {
            plane::clamp01(&mut out);
        }
        Ok(out)
    }

    /// Cosine similarities between min-max normalized template pairs.
    /// A singleton set has no pairs and reports mean 0.
    pub fn pairwise_cosine_stats(&self) -> PairwiseStats {
        let normalized: Vec<Plane<T>> = self
            .planes
            .iter()
            .map(|p| plane::minmax_normalize(&p.view()))
            .collect();
        let mut pairs = Vec::new();
        for i in 0..normalized.len() {
            for j in i + 1..normalized.len() {
                let c = plane::cosine_flat(
                    normalized[i].view().into_dyn(),
                    normalized[j].view().into_dyn(),
                );
                pairs.push((i, j, c));
            }
        }
        let (mut mean, mut min, mut max) = (0.0, 0.0, 0.0);
        if !pairs.is_empty() {
            mean = pairs.iter().map(|&(_, _, c)| c).sum::<f64>() / pairs.len() as f64;
            min = pairs.iter().map(|&(_, _, c)| c).fold(f64::INFINITY, f64::min);
            max = pairs
                .iter()
                .map(|&(_, _, c)| c)
                .fold(f64::NEG_INFINITY, f64::max);
        }
        PairwiseStats {
            pairs,
            mean,
            min,
            max,
        }
    }

    /// Writes the binary container and, when given, a JSON sidecar with the
    /// same basename.
    pub fn save(&self, path: &Path, sidecar: Option<&serde_json::Value>) -> Result<()> {
        let mut buf = Vec::with_capacity(18 + self.planes.len() * self.side * self.side * 4 + 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.planes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.side as u32).to_le_bytes());
        buf.extend_from_slice(&(self.side as u32).to_le_bytes());
        for p in &self.planes {
            for v in p.iter() {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        if let Some(meta) = sidecar {
            fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
        }
        Ok(())
    }

    /// Reads a container written by [`TemplateSet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let show = path.display().to_string();
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 18 + 8 {
            return Err(Error::format(show, "file too short for header and footer"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format(show, "bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format(show, format!("unsupported version {version}")));
        }
        let rd = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let n = rd(6) as usize;
        let h = rd(10) as usize;
        let w = rd(14) as usize;
        if n == 0 || h != w || h < 2 {
            return Err(Error::format(show, format!("bad geometry {n}x{h}x{w}")));
        }
        let payload = n * h * w * 4;
        if bytes.len() != 18 + payload + 8 {
            return Err(Error::format(
                show,
                format!("expected {} bytes, found {}", 18 + payload + 8, bytes.len()),
            ));
        }
        let mut planes = Vec::with_capacity(n);
        let mut off = 18;
        for _ in 0..n {
            let mut p = Array2::from_elem((h, w), T::ZERO);
            for v in p.iter_mut() {
                let raw = f32::from_le_bytes([
                    bytes[off],
                    bytes[off + 1],
                    bytes[off + 2],
                    bytes[off + 3],
                ]);
                if !raw.is_finite() {
                    return Err(Error::format(show, "non-finite template value"));
                }
                *v = T::of(raw as f64);
                off += 4;
            }
            planes.push(p);
        }
        let seed = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        Ok(TemplateSet {
            planes,
            side: h,
            seed,
        })
    }
}

/// Sidecar path: same location with ".json" appended to the file name.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;

    fn small_set(seed: u64, n: usize, side: usize) -> TemplateSet<f64> {
        let mut rng = RngStream::new(seed);
        TemplateSet::init_uniform(n, side, &mut rng).unwrap()
    }

    #[test]
    fn init_draws_live_in_unit_interval() {
        let set = small_set(1, 3, 128);
        for p in set.planes() {
            let (_, _, lo, hi) = plane::min_max_argpos(&p.view());
            assert!(lo >= 0.0 && hi < 1.0);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = small_set(9, 2, 16);
        let b = small_set(9, 2, 16);
        for (pa, pb) in a.planes().iter().zip(b.planes().iter()) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn init_rejects_degenerate_requests() {
        let mut rng = RngStream::new(0);
        assert!(TemplateSet::<f64>::init_uniform(0, 16, &mut rng).is_err());
        assert!(TemplateSet::<f64>::init_uniform(2, 1, &mut rng).is_err());
    }

    #[test]
    fn selection_is_uniform_within_three_sigma() {
        let set = small_set(5, 3, 8);
        let mut rng = RngStream::new(77);
        let draws = 30_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[set.select(&mut rng).0] += 1;
        }
        let expect = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() <= 3.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn encrypt_zero_strength_is_identity() {
        let set = small_set(2, 2, 128);
        let img = Array3::<f64>::from_elem((3, 128, 128), 0.4);
        let out = set.encrypt(&img, 0, EncryptConfig::training(0.0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn encrypt_adds_scaled_plane() {
        let planes = vec![Array2::<f64>::from_elem((128, 128), 1.0)];
        let set = TemplateSet::from_planes(planes, 0).unwrap();
        let img = Array3::<f64>::zeros((3, 128, 128));
        let out = set.encrypt(&img, 0, EncryptConfig::training(0.3)).unwrap();
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn encrypt_only_clamps_on_export() {
        let planes = vec![Array2::<f64>::from_elem((128, 128), 1.0)];
        let set = TemplateSet::from_planes(planes, 0).unwrap();
        let img = Array3::<f64>::from_elem((3, 128, 128), 0.9);
        let raw = set.encrypt(&img, 0, EncryptConfig::training(0.5)).unwrap();
        assert!(raw.iter().all(|&v| (v - 1.4).abs() < 1e-12));
        let clamped = set
            .encrypt(
                &img,
                0,
                EncryptConfig {
                    strength: 0.5,
                    clamp_on_export: true,
                },
            )
            .unwrap();
        assert!(clamped.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn encrypt_rejects_wrong_shapes() {
        let set = small_set(2, 1, 128);
        let img = Array3::<f64>::zeros((3, 64, 64));
        assert!(set.encrypt(&img, 0, EncryptConfig::training(0.3)).is_err());
        let ok = Array3::<f64>::zeros((3, 128, 128));
        assert!(set.encrypt(&ok, 5, EncryptConfig::training(0.3)).is_err());
    }

    #[test]
    fn pairwise_stats_for_singleton_are_empty() {
        let set = small_set(3, 1, 16);
        let stats = set.pairwise_cosine_stats();
        assert!(stats.pairs.is_empty());
        assert_eq!(stats.mean, 0.0);
    }

    #[test]
    fn pairwise_stats_for_duplicates_hit_one() {
        let p = small_set(4, 1, 16).plane(0).clone();
        let set = TemplateSet::from_planes(vec![p.clone(), p], 0).unwrap();
        let stats = set.pairwise_cosine_stats();
        assert_eq!(stats.pairs.len(), 1);
        assert_abs_diff_eq!(stats.pairs[0].2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_stats_orthogonal_hand_case() {
        let a = arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let b = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let set = TemplateSet::from_planes(vec![a, b], 0).unwrap();
        let stats = set.pairwise_cosine_stats();
        assert_abs_diff_eq!(stats.pairs[0].2, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn container_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.pimd");
        let mut rng = RngStream::new(21);
        let set = TemplateSet::<f32>::init_uniform(3, 32, &mut rng).unwrap();
        set.save(&path, Some(&serde_json::json!({"note": "test"})))
            .unwrap();
        let back = TemplateSet::<f32>::load(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.side(), 32);
        assert_eq!(back.seed(), set.seed());
        for (a, b) in set.planes().iter().zip(back.planes().iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn loader_rejects_corrupt_containers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.pimd");
        let mut rng = RngStream::new(2);
        let set = TemplateSet::<f32>::init_uniform(1, 8, &mut rng).unwrap();
        set.save(&path, None).unwrap();

        let good = fs::read(&path).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(TemplateSet::<f32>::load(&path).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        fs::write(&path, &bad_version).unwrap();
        assert!(TemplateSet::<f32>::load(&path).is_err());

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(TemplateSet::<f32>::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn encrypt_is_linear_in_the_template(
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            m in 0.01f64..1.0,
        ) {
            let s1 = small_set(11, 1, 128).plane(0).clone();
            let s2 = small_set(12, 1, 128).plane(0).clone();
            let combo = s1.mapv(|v| a * v) + &s2.mapv(|v| b * v);
            let img = Array3::<f64>::from_elem((3, 128, 128), 0.25);
            let set = TemplateSet::from_planes(vec![combo.clone()], 0).unwrap();
            let enc = set.encrypt(&img, 0, EncryptConfig::training(m)).unwrap();
            for ch in 0..3 {
                for y in [0usize, 17, 127] {
                    for x in [0usize, 5, 127] {
                        let expect = 0.25 + m * combo[[y, x]];
                        prop_assert!((enc[[ch, y, x]] - expect).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
