//! JSON run configuration: schema-versioned, unknown keys rejected, comments
//! allowed as `"_comment*"` keys (stripped before parsing).
//!
//! A config file has four sections:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "run":     { "algorithm": "practical", "n_particles": 32, ... },
//!   "model":   { "energy": {"kind": "mlp", ...}, "decoder": {...}, "init_seed": 1 },
//!   "dataset": { "path": "swiss.bin" }            // or { "swiss_roll": {...} }
//!   "sweep":   { "grid": [...], "seeds": [...] }  // optional, sweep runs only
//! }
//! ```

use crate::data::{load_dataset, sample_swiss_roll, Dataset, SwissRollSpec};
use crate::error::{Error, Result};
use crate::model::{
    Decoder, EnergyModel, GaussianLocationModel, GaussianScaleModel, IdentityDecoder, Theta,
};
use crate::neural::{init_mlp_values, Activation, LinearDecoder, MlpEnergy, MlpSpec};
use crate::rng::split_seed;
use crate::theory::gaussian_location_theta_star;
use crate::trainer::RunConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyConfig {
    /// MLP energy network on a `input_dim`-dimensional latent.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// Quadratic location testbed `U_alpha(x) = ||x - alpha||^2 / 2`.
    GaussianLocation { dim: usize },
    /// Scale testbed `U(x) = a ||x||^2 / 2`, `alpha = log a`.
    GaussianScale { dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderConfig {
    Linear {
        d_x: usize,
        d_y: usize,
        sigma: f64,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Identity { dim: usize, sigma: f64 },
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub energy: EnergyConfig,
    pub decoder: DecoderConfig,
    /// Seed for network/generator weight initialization.
    #[serde(default)]
    pub init_seed: u64,
    /// Explicit initial parameters, overriding the seeded initialization.
    #[serde(default)]
    pub alpha0: Option<Vec<f64>>,
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
}

/// Exactly one of `path` (a file written by `gen-data` / [`crate::data::save_dataset`])
/// or `swiss_roll` (generate in memory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub swiss_roll: Option<SwissRollSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the config, e.g. `run.n_particles`.
    pub path: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub grid: Vec<SweepAxis>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(|a| a.values.is_empty()) {
            return Err(Error::Config("sweep grid must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid.iter().map(|a| a.values.len()).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub run: RunConfig,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

/// Remove `"_comment*"` keys recursively; everything else must match the
/// schema exactly.
fn strip_comments(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !k.starts_with("_comment"));
            for v in map.values_mut() {
                strip_comments(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                strip_comments(v);
            }
        }
        _ => {}
    }
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    strip_comments(&mut value);
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Config("config is missing schema_version".into()))?;
    if version != CONFIG_SCHEMA_VERSION as u64 {
        return Err(Error::Config(format!(
            "config schema_version {version} unsupported (expected {CONFIG_SCHEMA_VERSION})"
        )));
    }
    let cfg: ConfigFile = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("config does not match the schema: {e}")))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

/// Set a dotted path inside a config JSON value (used by sweeps).
pub fn set_config_path(
    value: &mut serde_json::Value,
    path: &str,
    new_value: serde_json::Value,
) -> Result<()> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("sweep path `{path}`: `{part}` is not an object"))
        })?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new_value);
            return Ok(());
        }
        cursor = map
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("sweep path `{path}`: missing key `{part}`")))?;
    }
    Err(Error::Config(format!("sweep path `{path}` is empty")))
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

impl EnergyConfig {
    pub fn mlp_spec(&self) -> Option<MlpSpec> {
        match self {
            EnergyConfig::Mlp {
                input_dim,
                hidden,
                activation,
            } => {
                let mut sizes = Vec::with_capacity(hidden.len() + 2);
                sizes.push(*input_dim);
                sizes.extend_from_slice(hidden);
                sizes.push(1);
                MlpSpec::new(sizes, *activation).ok()
            }
            _ => None,
        }
    }
}

pub fn build_energy(cfg: &EnergyConfig) -> Result<Box<dyn EnergyModel>> {
    match cfg {
        EnergyConfig::Mlp { .. } => {
            let spec = cfg
                .mlp_spec()
                .ok_or_else(|| Error::Config("invalid mlp spec".into()))?;
            Ok(Box::new(MlpEnergy::new(spec)))
        }
        EnergyConfig::GaussianLocation { dim } => Ok(Box::new(GaussianLocationModel::new(*dim))),
        EnergyConfig::GaussianScale { dim } => Ok(Box::new(GaussianScaleModel::new(*dim))),
    }
}

pub fn build_decoder(cfg: &DecoderConfig) -> Result<Box<dyn Decoder>> {
    match cfg {
        DecoderConfig::Linear {
            d_x,
            d_y,
            sigma,
            bias,
        } => {
            if *sigma <= 0.0 {
                return Err(Error::Config("decoder sigma must be positive".into()));
            }
            Ok(Box::new(LinearDecoder::new(*d_x, *d_y, *sigma, *bias)))
        }
        DecoderConfig::Identity { dim, sigma } => {
            if *sigma <= 0.0 {
                return Err(Error::Config("decoder sigma must be positive".into()));
            }
            Ok(Box::new(IdentityDecoder::new(*dim, *sigma)))
        }
    }
}

/// Initial parameters: explicit overrides when given, otherwise seeded
/// fan-based init for networks and zeros for the testbeds.
pub fn init_theta(
    model_cfg: &ModelConfig,
    energy: &dyn EnergyModel,
    decoder: &dyn Decoder,
) -> Result<Theta> {
    let alpha = match &model_cfg.alpha0 {
        Some(a) => a.clone(),
        None => match &model_cfg.energy {
            EnergyConfig::Mlp { .. } => {
                let spec = model_cfg
                    .energy
                    .mlp_spec()
                    .ok_or_else(|| Error::Config("invalid mlp spec".into()))?;
                init_mlp_values(&spec, model_cfg.init_seed)
            }
            EnergyConfig::GaussianLocation { dim } => vec![0.0; *dim],
            EnergyConfig::GaussianScale { .. } => vec![0.0],
        },
    };
    let beta = match &model_cfg.beta0 {
        Some(b) => b.clone(),
        None => match &model_cfg.decoder {
            DecoderConfig::Linear {
                d_x,
                d_y,
                sigma,
                bias,
            } => LinearDecoder::new(*d_x, *d_y, *sigma, *bias)
                .init_beta(split_seed(model_cfg.init_seed, 1)),
            DecoderConfig::Identity { .. } => Vec::new(),
        },
    };
    if alpha.len() != energy.dim_alpha() {
        return Err(Error::Dimension {
            axis: "alpha0",
            expected: energy.dim_alpha(),
            got: alpha.len(),
        });
    }
    if beta.len() != decoder.dim_beta() {
        return Err(Error::Dimension {
            axis: "beta0",
            expected: decoder.dim_beta(),
            got: beta.len(),
        });
    }
    Theta::new(alpha, beta)
}

/// Known maximizer when the configuration is the conjugate location testbed.
pub fn theta_star_for(model_cfg: &ModelConfig, data: &Dataset) -> Option<Theta> {
    match (&model_cfg.energy, &model_cfg.decoder) {
        (EnergyConfig::GaussianLocation { dim }, DecoderConfig::Identity { dim: ddim, .. })
            if dim == ddim && *dim == data.dim() =>
        {
            Some(gaussian_location_theta_star(data))
        }
        _ => None,
    }
}

/// Load the dataset from disk or generate it in memory.
pub fn resolve_dataset(cfg: &DatasetConfig, base_dir: Option<&Path>) -> Result<Dataset> {
    match (&cfg.path, &cfg.swiss_roll) {
        (Some(path), None) => {
            let p = Path::new(path);
            let full = match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.to_path_buf(),
            };
            load_dataset(&full)
        }
        (None, Some(spec)) => sample_swiss_roll(spec),
        _ => Err(Error::Config(
            "dataset section needs exactly one of `path` or `swiss_roll`".into(),
        )),
    }
}

/// Layout echo stored in checkpoint headers.
pub fn layout_json(model_cfg: &ModelConfig) -> serde_json::Value {
    serde_json::json!({
        "energy": model_cfg.energy,
        "decoder": model_cfg.decoder,
    })
}
