//! Config-file loading: TOML with an `extends` key for layering shared
//! definitions, canonical digests for run manifests, and the per-command
//! schemas.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use dephasim::bath::{CollisionConfig, TrapConfig};
use dephasim::noise::SyntheticNoise;
use dephasim::waveform::{SequenceKind, SequenceSpec};

use crate::CliError;

const MAX_EXTENDS_DEPTH: u8 = 8;

/// Load a TOML config, resolving `extends` chains. A child table overrides
/// its parent key-by-key; nested tables merge recursively, everything else
/// (including arrays) replaces the inherited value outright.
pub fn load_resolved(path: &Path) -> Result<toml::Table, CliError> {
    load_recursive(path, 0)
}

fn load_recursive(path: &Path, depth: u8) -> Result<toml::Table, CliError> {
    if depth > MAX_EXTENDS_DEPTH {
        return Err(CliError::Config(format!(
            "extends chain deeper than {MAX_EXTENDS_DEPTH} at {}; is there a cycle?",
            path.display()
        )));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(parent) = table.remove("extends") {
        let rel = parent.as_str().ok_or_else(|| {
            CliError::Config(format!("{}: extends must be a path string", path.display()))
        })?;
        let parent_path = path.parent().unwrap_or(Path::new(".")).join(rel);
        let base = load_recursive(&parent_path, depth + 1)?;
        table = deep_merge(base, table);
    }
    Ok(table)
}

fn deep_merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = deep_merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}

/// SHA-256 of the canonical serialization of the resolved config. TOML
/// tables serialize with sorted keys, so the digest is independent of key
/// order in the source file.
pub fn digest(table: &toml::Table) -> String {
    let canonical = toml::to_string(table).expect("resolved config is serializable");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deserialize the resolved table into a command schema with field-path
/// diagnostics on mismatch.
pub fn parse<T: serde::de::DeserializeOwned>(table: toml::Table) -> Result<T, CliError> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("config field error: {e}")))
}

fn default_seed() -> u64 {
    0
}

/// Seed handling shared by all commands: config `seed` key, overridable by
/// the `--seed` flag.
pub fn effective_seed(table: &mut toml::Table, flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
        return Ok(s);
    }
    match table.get("seed") {
        None => Ok(0),
        Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
        Some(other) => Err(CliError::Config(format!(
            "seed must be a nonnegative integer, got {other}"
        ))),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleCfg {
    pub n_atoms: usize,
    pub duration_s: f64,
    pub dt_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub points: usize,
    #[serde(default = "default_scale")]
    pub scale: GridScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridScale {
    Linear,
    Log,
}

fn default_scale() -> GridScale {
    GridScale::Linear
}

/// Where the detuning noise of a pipeline run comes from.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceCfg {
    Trapped {
        trap: TrapConfig,
        collisions: CollisionConfig,
        ensemble: EnsembleCfg,
    },
    Synthetic {
        noise: SyntheticNoise,
        dt_s: f64,
        n_realizations: usize,
    },
    Quiet,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBathCfg {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub trap: TrapConfig,
    pub collisions: CollisionConfig,
    pub ensemble: EnsembleCfg,
    pub spectrum_grid: GridCfg,
    #[serde(default)]
    pub traces: TracesCfg,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracesCfg {
    /// How many atoms' detuning traces to write (capped at the ensemble
    /// size). Traces are bulky; the spectrum never needs them on disk.
    pub atoms_to_write: usize,
}

impl Default for TracesCfg {
    fn default() -> Self {
        TracesCfg { atoms_to_write: 8 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterCfg {
    /// Accepted so every command is a pure function of (config, seed); the
    /// filter function is deterministic and never consumes it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub sequence: SequenceSpec,
    pub grid: GridCfg,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorentzianCfg {
    pub g0_per_s: f64,
    pub corner_hz: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveCfg {
    pub rabi_hz: f64,
}

/// A sequence family for coherence-curve prediction: the train layout is
/// rescaled to each observation time, so no total time is given here.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceFamilyCfg {
    pub kind: SequenceKind,
    #[serde(default)]
    pub n_pulses: Option<usize>,
    #[serde(default)]
    pub cdd_order: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictCfg {
    /// Accepted for interface uniformity; predictions are deterministic and
    /// never consume it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Tabulated spectrum file (CSV or JSON), relative to the config file.
    pub spectrum_file: Option<PathBuf>,
    /// Alternatively, an analytic Lorentzian spectrum. Omitting both models
    /// a quiet bath: the curve is then pure amplitude damping.
    pub spectrum: Option<LorentzianCfg>,
    /// Pulse-train family to predict; mutually exclusive with `drive`.
    pub sequence: Option<SequenceFamilyCfg>,
    /// Constant-drive waveform to predict. Omitting both means free evolution.
    pub drive: Option<DriveCfg>,
    pub times_s: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub t1_s: Option<f64>,
}

fn default_alpha() -> f64 {
    0.25
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolCfg {
    pub f0_grid_hz: Vec<f64>,
    pub durations_s: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples_per_point: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub t1_s: Option<f64>,
    #[serde(default)]
    pub dressing_kappa_per_hz: Option<f64>,
}

fn default_samples() -> usize {
    30
}

fn default_noise_sigma() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpectrumCfg {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub source: SourceCfg,
    pub protocol: ProtocolCfg,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckCfg {
    /// Drive strengths at which prediction and Monte-Carlo are compared.
    pub f0_grid_hz: Vec<f64>,
    /// Durations for the Monte-Carlo decay-rate fit per drive strength.
    pub durations_s: Vec<f64>,
    /// Dense grid on which the direct spectrum entering the prediction is
    /// computed. Required for trapped sources: the probe grid alone cannot
    /// resolve their spectral structure, and the overlap integral needs all
    /// of it (peaks and tails included).
    #[serde(default)]
    pub spectrum_grid: Option<GridCfg>,
    /// Maximum relative deviation counted as agreement.
    #[serde(default = "default_threshold")]
    pub pass_threshold_rel: f64,
    /// Points below this frequency that exceed the threshold are flagged as
    /// expected divergence (strong-coupling breakdown) rather than failures.
    #[serde(default)]
    pub expected_divergence_below_hz: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_threshold() -> f64 {
    0.10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyCfg {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub source: SourceCfg,
    pub check: CheckCfg,
}
