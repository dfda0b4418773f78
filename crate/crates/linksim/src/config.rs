//! Layered run configuration.
//!
//! Settings resolve in three layers — built-in defaults, then a config file,
//! then command-line overrides — and the merged result is both echoed into
//! every output (provenance) and hashed into checkpoints. Files may be JSON
//! (`{...}`) or a flat key-value dialect:
//!
//! ```text
//! # dotted paths into the same tree the JSON form uses
//! train.lr       = 0.0005
//! train.orders   = [2, 4]
//! eval.profile   = cdlc-like
//! shape.channels = 32
//! ```
//!
//! Values parse as JSON fragments where possible; anything else is a string.
//! Unknown keys are rejected with the offending field named.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::phy::PilotLayout;
use crate::receiver::{RxShape, BLOCK_SCHEDULE};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Receiver geometry as configured; `blocks` counts entries taken from the
/// published block schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeCfg {
    pub n_r: usize,
    pub n_sym: usize,
    pub n_sc: usize,
    pub m_max: usize,
    pub channels: usize,
    pub blocks: usize,
    pub reduction: usize,
    pub adapter_kernel: usize,
    pub af_hidden: usize,
}

impl Default for ShapeCfg {
    fn default() -> Self {
        let d = RxShape::desk();
        ShapeCfg {
            n_r: d.n_r,
            n_sym: d.n_sym,
            n_sc: d.n_sc,
            m_max: d.m_max,
            channels: d.channels,
            blocks: d.blocks.len(),
            reduction: d.reduction,
            adapter_kernel: d.adapter_kernel,
            af_hidden: d.af_hidden,
        }
    }
}

impl ShapeCfg {
    pub fn to_shape(&self) -> Result<RxShape, ConfigError> {
        if self.blocks == 0 || self.blocks > BLOCK_SCHEDULE.len() {
            return Err(ConfigError::Invalid(format!(
                "shape.blocks: {} outside 1..={}",
                self.blocks,
                BLOCK_SCHEDULE.len()
            )));
        }
        if self.n_sc % 2 != 0 {
            return Err(ConfigError::Invalid(format!(
                "shape.n_sc: {} must be even",
                self.n_sc
            )));
        }
        if self.channels == 0 || self.channels % self.reduction != 0 {
            return Err(ConfigError::Invalid(format!(
                "shape.channels: {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.m_max == 0 || self.m_max > 16 {
            return Err(ConfigError::Invalid(format!(
                "shape.m_max: {} outside 1..=16",
                self.m_max
            )));
        }
        Ok(RxShape {
            n_r: self.n_r,
            n_sym: self.n_sym,
            n_sc: self.n_sc,
            m_max: self.m_max,
            channels: self.channels,
            blocks: BLOCK_SCHEDULE[..self.blocks].to_vec(),
            reduction: self.reduction,
            adapter_kernel: self.adapter_kernel,
            af_hidden: self.af_hidden,
        })
    }
}

/// Evaluation-side settings: sweep grid, Monte-Carlo budget, code, layout,
/// channel, and receiver-robustness knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCfg {
    pub seed: u64,
    pub ebno_db: Vec<f64>,
    /// Slots simulated per sweep point (upper bound; error-count stopping
    /// may end a point earlier).
    pub slots: usize,
    /// Stop a point once this many bit errors have been seen.
    pub min_errors: usize,
    pub code_n: usize,
    pub code_seed: u64,
    /// Modulation order for evaluate/papr runs.
    pub order: usize,
    /// Candidate orders for link adaptation.
    pub orders: Vec<usize>,
    pub bler_target: f64,
    pub pilot_layout: String,
    pub cp_len: usize,
    pub profile: String,
    pub speed_kmh: f64,
    pub carrier_hz: f64,
    pub delay_spread_s: f64,
    /// dB offset applied to the N0 the receiver is told (channel unchanged).
    pub noise_mismatch_db: f64,
    /// Amplitude clipping threshold relative to RMS, in dB, if any.
    pub clip_rate: Option<f64>,
    /// Slots measured by the papr command.
    pub papr_slots: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            seed: 0,
            ebno_db: vec![0.0, 2.0, 4.0, 6.0, 8.0],
            slots: 200,
            min_errors: 100,
            code_n: 1008,
            code_seed: 17,
            order: 2,
            orders: vec![2, 4, 6, 8],
            bler_target: 0.1,
            pilot_layout: "none".into(),
            cp_len: 0,
            profile: "cdlb-like".into(),
            speed_kmh: 3.0,
            carrier_hz: 3.5e9,
            delay_spread_s: 100e-9,
            noise_mismatch_db: 0.0,
            clip_rate: None,
            papr_slots: 1000,
        }
    }
}

impl EvalCfg {
    pub fn layout(&self) -> Result<PilotLayout, ConfigError> {
        PilotLayout::parse(&self.pilot_layout).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "eval.pilot_layout: {:?} is not one of \"none\", \"2sym\"",
                self.pilot_layout
            ))
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub shape: ShapeCfg,
    pub train: TrainConfig,
    pub eval: EvalCfg,
}

impl Settings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let shape = self.shape.to_shape()?;
        for &m in self.train.orders.iter().chain(&self.eval.orders) {
            if m == 0 || m > shape.m_max {
                return Err(ConfigError::Invalid(format!(
                    "modulation order {m} outside 1..={}",
                    shape.m_max
                )));
            }
        }
        if self.eval.order == 0 || self.eval.order > shape.m_max {
            return Err(ConfigError::Invalid(format!(
                "eval.order: {} outside 1..={}",
                self.eval.order,
                shape.m_max
            )));
        }
        if self.eval.cp_len >= shape.n_sc || self.train.cp_len >= shape.n_sc {
            return Err(ConfigError::Invalid("cp_len must be below n_sc".into()));
        }
        self.eval.layout()?;
        Ok(())
    }
}

/// The built-in defaults as a JSON tree (the bottom layer).
pub fn defaults() -> Value {
    serde_json::to_value(Settings::default()).expect("default settings serialize")
}

/// Parses a config file: JSON if it looks like JSON, the key-value dialect
/// otherwise. Returns a partial tree to merge over the defaults.
pub fn parse_file(text: &str) -> Result<Value, ConfigError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return serde_json::from_str(text)
            .map_err(|e| ConfigError::Syntax { line: e.line(), msg: e.to_string() });
    }
    let mut tree = Value::Object(serde_json::Map::new());
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, msg: "empty key".into() });
        }
        set_path(&mut tree, key, parse_value(value.trim()));
    }
    Ok(tree)
}

/// A value is whatever JSON makes of it, else a bare string.
pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Writes `value` at a dotted path, creating intermediate objects.
pub fn set_path(tree: &mut Value, dotted: &str, value: Value) {
    let mut node = tree;
    let mut parts = dotted.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = match node {
            Value::Object(map) => map,
            other => {
                *other = Value::Object(serde_json::Map::new());
                other.as_object_mut().unwrap()
            }
        };
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return;
        }
        node = obj.entry(part.to_string()).or_insert(Value::Object(serde_json::Map::new()));
    }
}

/// Recursive overlay: objects merge key-wise, everything else replaces.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Types and validates a fully merged tree. Unknown or ill-typed fields are
/// reported by name.
pub fn finalize(tree: &Value) -> Result<Settings, ConfigError> {
    let settings: Settings = serde_path_to_error::deserialize(tree.clone()).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ConfigError::Invalid(e.inner().to_string())
        } else {
            ConfigError::Invalid(format!("{path}: {}", e.inner()))
        }
    })?;
    settings.validate()?;
    Ok(settings)
}

/// SHA-256 of the canonical (sorted-key) JSON encoding, as lowercase hex.
pub fn config_hash(tree: &Value) -> String {
    let canon = serde_json::to_string(tree).expect("config serializes");
    let digest = Sha256::digest(canon.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Full resolution pipeline: defaults ← optional base tree (e.g. the config
/// a checkpoint was trained with) ← optional file ← dotted overrides.
/// Returns the typed settings plus the effective tree and its hash.
pub fn resolve_layers(
    base: Option<&Value>,
    file_text: Option<&str>,
    overrides: &[(String, Value)],
) -> Result<(Settings, Value, String), ConfigError> {
    let mut tree = defaults();
    if let Some(base) = base {
        merge(&mut tree, base);
    }
    if let Some(text) = file_text {
        let layer = parse_file(text)?;
        merge(&mut tree, &layer);
    }
    for (path, value) in overrides {
        set_path(&mut tree, path, value.clone());
    }
    let settings = finalize(&tree)?;
    // Echo the *effective* config, not the sparse layers: re-serialize the
    // typed settings so defaults appear explicitly in outputs.
    let effective = serde_json::to_value(&settings).expect("settings serialize");
    let hash = config_hash(&effective);
    Ok((settings, effective, hash))
}

/// [`resolve_layers`] without a base tree: defaults ← file ← overrides.
pub fn resolve(
    file_text: Option<&str>,
    overrides: &[(String, Value)],
) -> Result<(Settings, Value, String), ConfigError> {
    resolve_layers(None, file_text, overrides)
}
