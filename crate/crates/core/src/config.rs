// Run configuration file: one TOML document with a section per module.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline_diff::DiffLossConfig;
use crate::error::{FluxError, Result};
use crate::evalcmp::EvalConfig;
use crate::hashgrid::HashGridConfig;
use crate::integral_loss::LossConfig;
use crate::net::{FieldModel, MaterialChannel, MlpConfig};
use crate::refsolver::FdConfig;
use crate::scene::{DomainBounds, MaterialRegion, SceneConfig, WireSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Defaults to 3% of the domain width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singularity_radius: Option<f64>,
    #[serde(default = "one")]
    pub background_mu: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialsSection {
    /// Painter's order: later regions override earlier ones.
    pub regions: Vec<MaterialRegion>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WiresSection {
    pub sources: Vec<WireSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub append_raw_coords: bool,
    /// Feed a permeable/air indicator to the network next to the encoding.
    pub material_channel: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let h = HashGridConfig::default();
        Self {
            levels: h.levels,
            features_per_level: h.features_per_level,
            log2_table_size: h.log2_table_size,
            base_resolution: h.base_resolution,
            growth_factor: h.growth_factor,
            append_raw_coords: h.append_raw_coords,
            material_channel: false,
        }
    }
}

impl EncoderSection {
    pub fn hash_config(&self) -> HashGridConfig {
        HashGridConfig {
            levels: self.levels,
            features_per_level: self.features_per_level,
            log2_table_size: self.log2_table_size,
            base_resolution: self.base_resolution,
            growth_factor: self.growth_factor,
            append_raw_coords: self.append_raw_coords,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSection {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Start the output layer at zero so the initial field is exactly zero.
    pub zero_output_init: bool,
}

impl Default for MlpSection {
    fn default() -> Self {
        let m = MlpConfig::default();
        Self { hidden_layers: m.hidden_layers, hidden_width: m.hidden_width, zero_output_init: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSection,
    #[serde(default)]
    pub materials: MaterialsSection,
    #[serde(default)]
    pub wires: WiresSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub mlp: MlpSection,
    #[serde(default)]
    pub training: LossConfig,
    #[serde(default)]
    pub baseline: DiffLossConfig,
    #[serde(default)]
    pub fd: FdConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Random stream for network initialization (the training streams use
/// 0..=2 of the same seed).
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

fn is_manifest(text: &str) -> bool {
    toml::from_str::<toml::Table>(text).is_ok_and(|t| t.contains_key("run") && t.contains_key("config"))
}

impl RunConfig {
    /// Parses and validates a TOML document. Syntax errors and unknown
    /// fields are reported with their line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FluxError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or the configuration embedded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FluxError::Config(format!("cannot read {}: {e}", path.display())))?;
        let parsed = if is_manifest(&text) { Self::from_manifest(&text) } else { Self::from_toml(&text) };
        parsed.map_err(|e| match e {
            FluxError::Config(msg) => FluxError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FluxError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let scene = self.scene()?;
        self.encoder.hash_config().validate()?;
        if self.mlp.hidden_layers > 0 && self.mlp.hidden_width == 0 {
            return Err(FluxError::Config("mlp.hidden_width must be positive".into()));
        }
        self.training.validate()?;
        self.baseline.validate(&scene)?;
        self.fd.validate()?;
        self.eval.validate()
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let d = &self.domain;
        let bounds = DomainBounds::new(d.x_min, d.x_max, d.y_min, d.y_max)?;
        let radius = d.singularity_radius.unwrap_or_else(|| SceneConfig::default_singularity_radius(&bounds));
        SceneConfig::new(bounds, self.materials.regions.clone(), d.background_mu, self.wires.sources.clone(), radius)
    }

    /// Replaces the seed of every random stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.training.seed
    }

    /// Everything needed to repeat a run: the command, the resolved
    /// configuration (seed included) and the software version.
    pub fn manifest(&self, command: &str, threads: usize, deterministic: bool) -> Result<String> {
        let mut run = toml::Table::new();
        run.insert("command".into(), command.into());
        run.insert("seed".into(), toml::Value::Integer(self.seed() as i64));
        run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        run.insert("threads".into(), toml::Value::Integer(threads as i64));
        run.insert("deterministic".into(), deterministic.into());
        let config = toml::Table::try_from(self).map_err(|e| FluxError::Config(format!("cannot serialize config: {e}")))?;
        let mut doc = toml::Table::new();
        doc.insert("run".into(), toml::Value::Table(run));
        doc.insert("config".into(), toml::Value::Table(config));
        toml::to_string(&doc).map_err(|e| FluxError::Config(format!("cannot serialize manifest: {e}")))
    }

    /// Reads back the configuration embedded in a manifest.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| FluxError::Config(e.to_string()))?;
        let config = doc.get("config").ok_or_else(|| FluxError::Config("manifest has no [config] table".into()))?;
        let cfg: RunConfig = config.clone().try_into().map_err(|e: toml::de::Error| FluxError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A freshly initialized network for this configuration.
    pub fn build_model(&self) -> Result<FieldModel> {
        let scene = self.scene()?;
        let mlp = MlpConfig { input_dim: 0, hidden_layers: self.mlp.hidden_layers, hidden_width: self.mlp.hidden_width };
        let material = self.encoder.material_channel.then(|| MaterialChannel::from_scene(&scene));
        let mut rng = init_rng(self.seed());
        let mut model = FieldModel::with_material(scene.bounds, self.encoder.hash_config(), mlp, material, &mut rng)?;
        if self.mlp.zero_output_init {
            if let Some(last) = model.mlp_mut().layers.last_mut() {
                last.weight.fill(0.0);
                last.bias.fill(0.0);
            }
        }
        Ok(model)
    }
}
