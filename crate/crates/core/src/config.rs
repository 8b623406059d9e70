//! Flat `key = value` configuration files.
//!
//! ```text
//! # comment
//! model.preset = tiny
//! model.k_nodes = 8
//! train.lr0 = 0.01
//! ```
//!
//! `model.preset` (tiny, full) and `model.modality` are applied first, then
//! every other key overrides a field. Keys under `data.` are left to the
//! caller; anything else unknown is an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BlockKind;
use crate::error::{Error, Result};
use crate::model::{AgcnConfig, Modality};

/// File name of the config manifest inside a checkpoint directory.
pub const MANIFEST_FILE: &str = "config.txt";

/// Parsed entries in file order, with 1-based line numbers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed lookup; the error names the key and line.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("line {line}: cannot parse {key} = {v:?}"))),
        }
    }
}

fn parse_list<const N: usize>(kv: &KvFile, key: &str) -> Result<Option<[usize; N]>> {
    let Some(v) = kv.get(key) else { return Ok(None) };
    let items: Vec<usize> = v
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("{key}: expected {N} comma-separated integers, got {v:?}")))?;
    items
        .try_into()
        .map(Some)
        .map_err(|_| Error::config(format!("{key}: expected {N} comma-separated integers, got {v:?}")))
}

fn set<T: FromStr>(kv: &KvFile, key: &str, field: &mut T) -> Result<()> {
    if let Some(v) = kv.parsed(key)? {
        *field = v;
    }
    Ok(())
}

const KNOWN_KEYS: &[&str] = &[
    "model.preset",
    "model.modality",
    "model.num_classes",
    "model.input_h",
    "model.input_w",
    "model.k_nodes",
    "model.allow_any_k",
    "model.gcn_out_channels",
    "model.gcn_layers",
    "model.gcn_enabled",
    "backbone.stage_channels",
    "backbone.blocks_per_stage",
    "backbone.block",
    "backbone.zero_init_residual",
    "train.lr0",
    "train.momentum",
    "train.lr_decay_factor",
    "train.lr_decay_every",
    "train.epochs",
    "train.batch_size",
    "train.seed",
];

/// Build and validate a config from parsed entries.
pub fn config_from_kv(kv: &KvFile) -> Result<AgcnConfig> {
    if let Some(bad) = kv.keys().find(|k| !k.starts_with("data.") && !KNOWN_KEYS.contains(k)) {
        return Err(Error::config(format!("unknown config key {bad:?}")));
    }
    let modality = Modality::parse(kv.get("model.modality").unwrap_or("visual"))?;
    let classes = kv.parsed("model.num_classes")?.unwrap_or(2);
    let mut c = match kv.get("model.preset").unwrap_or("tiny") {
        "tiny" => AgcnConfig::tiny(modality, classes),
        "full" => match modality {
            Modality::Visual => AgcnConfig::full_visual(classes),
            Modality::Audio => AgcnConfig::full_audio(classes),
        },
        other => return Err(Error::config(format!("unknown preset {other:?} (expected tiny or full)"))),
    };
    set(kv, "model.input_h", &mut c.input_h)?;
    set(kv, "model.input_w", &mut c.input_w)?;
    set(kv, "model.k_nodes", &mut c.k_nodes)?;
    set(kv, "model.allow_any_k", &mut c.allow_any_k)?;
    set(kv, "model.gcn_out_channels", &mut c.gcn_out_channels)?;
    set(kv, "model.gcn_layers", &mut c.gcn_layers)?;
    set(kv, "model.gcn_enabled", &mut c.gcn_enabled)?;
    if let Some(v) = parse_list::<5>(kv, "backbone.stage_channels")? {
        c.backbone.stage_channels = v;
    }
    if let Some(v) = parse_list::<4>(kv, "backbone.blocks_per_stage")? {
        c.backbone.blocks_per_stage = v;
    }
    if let Some(v) = kv.get("backbone.block") {
        c.backbone.block = BlockKind::parse(v)?;
    }
    set(kv, "backbone.zero_init_residual", &mut c.backbone.zero_init_residual)?;
    set(kv, "train.lr0", &mut c.lr0)?;
    set(kv, "train.momentum", &mut c.momentum)?;
    set(kv, "train.lr_decay_factor", &mut c.lr_decay_factor)?;
    set(kv, "train.lr_decay_every", &mut c.lr_decay_every)?;
    set(kv, "train.epochs", &mut c.epochs)?;
    set(kv, "train.batch_size", &mut c.batch_size)?;
    set(kv, "train.seed", &mut c.seed)?;
    c.validate()?;
    Ok(c)
}

pub fn parse_config(text: &str) -> Result<AgcnConfig> {
    config_from_kv(&KvFile::parse(text)?)
}

/// Read a config file. A missing file is a configuration error.
pub fn load_config(path: &Path) -> Result<AgcnConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn join<const N: usize>(v: [usize; N]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Every field written out explicitly; parses back to an equal config.
pub fn to_kv_string(c: &AgcnConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("model.preset", "tiny".into());
    put("model.modality", c.modality.as_str().into());
    put("model.num_classes", c.num_classes.to_string());
    put("model.input_h", c.input_h.to_string());
    put("model.input_w", c.input_w.to_string());
    put("model.k_nodes", c.k_nodes.to_string());
    put("model.allow_any_k", c.allow_any_k.to_string());
    put("model.gcn_out_channels", c.gcn_out_channels.to_string());
    put("model.gcn_layers", c.gcn_layers.to_string());
    put("model.gcn_enabled", c.gcn_enabled.to_string());
    put("backbone.stage_channels", join(c.backbone.stage_channels));
    put("backbone.blocks_per_stage", join(c.backbone.blocks_per_stage));
    put("backbone.block", c.backbone.block.as_str().into());
    put("backbone.zero_init_residual", c.backbone.zero_init_residual.to_string());
    put("train.lr0", c.lr0.to_string());
    put("train.momentum", c.momentum.to_string());
    put("train.lr_decay_factor", c.lr_decay_factor.to_string());
    put("train.lr_decay_every", c.lr_decay_every.to_string());
    put("train.epochs", c.epochs.to_string());
    put("train.batch_size", c.batch_size.to_string());
    put("train.seed", c.seed.to_string());
    s
}
