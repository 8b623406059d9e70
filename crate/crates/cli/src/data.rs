//! Datasets named by the `data.*` keys of a config file.
//!
//! ```text
//! data.train_manifest = train.tsv   # relative to the config file
//! data.test_manifest = test.tsv
//! ```
//!
//! Without manifests a synthetic task is generated: `data.train_size`
//! (default 200) and `data.test_size` (default 80) samples, seeded by
//! `data.seed` (default 7) for training and `data.seed + 1000` for testing.

use std::path::{Path, PathBuf};

use agcn_core::config::{config_from_kv, KvFile};
use agcn_core::input::load_input;
use agcn_core::synth::synth_dataset_for;
use agcn_core::train::Dataset;
use agcn_core::AgcnConfig;
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::manifest::{labelled, read_manifest};

pub const DEFAULT_TRAIN_SIZE: usize = 200;
pub const DEFAULT_TEST_SIZE: usize = 80;
pub const DEFAULT_DATA_SEED: u64 = 7;
/// Offset between the synthetic train and test seeds.
pub const TEST_SEED_OFFSET: u64 = 1000;

const DATA_KEYS: &[&str] = &["data.train_manifest", "data.test_manifest", "data.train_size", "data.test_size", "data.seed"];

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Manifest(PathBuf),
    Synthetic { size: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub train: Source,
    pub test: Source,
}

impl DataSpec {
    pub fn from_kv(kv: &KvFile, base: &Path) -> CliResult<Self> {
        if let Some(bad) = kv.keys().find(|k| k.starts_with("data.") && !DATA_KEYS.contains(k)) {
            return Err(CliError::usage(format!("unknown config key {bad:?}")));
        }
        let seed = kv.parsed("data.seed")?.unwrap_or(DEFAULT_DATA_SEED);
        let pick = |key: &str, size_key: &str, default: usize, seed: u64| -> CliResult<Source> {
            Ok(match kv.get(key) {
                Some(p) => Source::Manifest(base.join(p)),
                None => Source::Synthetic { size: kv.parsed(size_key)?.unwrap_or(default), seed },
            })
        };
        Ok(DataSpec {
            train: pick("data.train_manifest", "data.train_size", DEFAULT_TRAIN_SIZE, seed)?,
            test: pick("data.test_manifest", "data.test_size", DEFAULT_TEST_SIZE, seed.wrapping_add(TEST_SEED_OFFSET))?,
        })
    }
}

/// Parsed config file plus its directory, for resolving data paths.
pub struct ConfigFile {
    pub kv: KvFile,
    pub dir: PathBuf,
    pub config: AgcnConfig,
}

pub fn read_config_file(path: &Path) -> CliResult<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let kv = KvFile::parse(&text)?;
    let config = config_from_kv(&kv)?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(ConfigFile { kv, dir, config })
}

/// Labelled manifest loaded in manifest order; files are decoded in parallel.
pub fn load_manifest_dataset(path: &Path, config: &AgcnConfig) -> CliResult<Dataset> {
    let rows = labelled(&read_manifest(path)?, config.num_classes)?;
    let inputs = rows
        .par_iter()
        .map(|(p, _)| load_input(p, config).map_err(|e| CliError::failed(format!("{}: {e}", p.display()))))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Dataset::new(inputs, rows.iter().map(|(_, l)| *l).collect(), config.num_classes)?)
}

pub fn load_source(source: &Source, config: &AgcnConfig) -> CliResult<Dataset> {
    match source {
        Source::Manifest(p) => load_manifest_dataset(p, config),
        Source::Synthetic { size, seed } => Ok(synth_dataset_for(config, *size, *seed)?),
    }
}
