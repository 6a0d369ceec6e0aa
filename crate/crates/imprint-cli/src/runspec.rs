//! One JSON document describes a full run: where the images come from and
//! every training knob. Commands that train read this; commands that only
//! consume artifacts do not.

use std::path::{Path, PathBuf};

use imprint_core::config::TrainConfig;
use imprint_core::corpus;
use imprint_core::plane::Image;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Offset tagging held-out procedural images; keeps the test stream
/// disjoint from any train index regardless of corpus sizes.
const TEST_INDEX_OFFSET: u64 = 1 << 32;

fn default_train_count() -> usize {
    corpus::TRAIN_COUNT
}

fn default_test_count() -> usize {
    corpus::TEST_COUNT
}

fn default_corpus_seed() -> u64 {
    1
}

/// Data source for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    /// Seeded procedural images at the working resolution.
    Synthetic {
        #[serde(default = "default_train_count")]
        train: usize,
        #[serde(default = "default_test_count")]
        test: usize,
        #[serde(default = "default_corpus_seed")]
        seed: u64,
    },
    /// Two folders of PNG/JPEG files, resized to the working resolution.
    Folder { train: PathBuf, test: PathBuf },
}

/// Everything a training command needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
}

impl RunSpec {
    /// Parses and validates a config file. All failures here are usage
    /// errors: the run never started.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let spec: RunSpec = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        spec.train
            .validate()
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if let CorpusSpec::Synthetic { train, test, .. } = &spec.corpus {
            if *train == 0 || *test == 0 {
                return Err(CliError::Usage(format!(
                    "config {}: synthetic corpus needs train and test counts >= 1",
                    path.display()
                )));
            }
        }
        Ok(spec)
    }

    /// Materializes the (train, test) image lists.
    pub fn corpora(&self) -> Result<(Vec<Image<f32>>, Vec<Image<f32>>), CliError> {
        match &self.corpus {
            CorpusSpec::Synthetic { train, test, seed } => {
                let train_imgs = corpus::synthetic_corpus(*train, *seed);
                let seed = *seed;
                let test_imgs: Vec<Image<f32>> = (0..*test as u64)
                    .map(|i| corpus::synthetic_image(seed, TEST_INDEX_OFFSET + i))
                    .collect();
                Ok((train_imgs, test_imgs))
            }
            CorpusSpec::Folder { train, test } => {
                let (train_imgs, _) = corpus::load_folder(train)?;
                let (test_imgs, _) = corpus::load_folder(test)?;
                Ok((train_imgs, test_imgs))
            }
        }
    }
}
