use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::dynamics::{ModelParams, System};
use crate::egformer::NetConfig;
use crate::learn::{LearnContext, TrainConfig};
use crate::safectrl::{HandcraftedCbf, NominalGains, QpSettings};
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub system: System,
    /// Full physical parameters; the system's defaults when absent.
    pub params: Option<ModelParams<f64>>,
    pub gains: NominalGains,
    pub barrier: HandcraftedCbf,
    pub qp: QpSettings,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            system: System::DoubleIntegrator,
            params: None,
            gains: NominalGains::default(),
            barrier: HandcraftedCbf::default(),
            qp: QpSettings::default(),
        }
    }
}

impl ModelSection {
    pub fn model(&self) -> ModelParams<f64> {
        match &self.params {
            Some(p) => p.clone(),
            None => match self.system {
                System::DoubleIntegrator => ModelParams::double_integrator(),
                System::Quadrotor => ModelParams::quadrotor(),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Learned,
    Ccbf,
    Dcbf,
    Nominal,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Learned => "learned",
            Method::Ccbf => "ccbf",
            Method::Dcbf => "dcbf",
            Method::Nominal => "nominal",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(Method::Learned),
            "ccbf" => Ok(Method::Ccbf),
            "dcbf" => Ok(Method::Dcbf),
            "nominal" => Ok(Method::Nominal),
            _ => Err(format!("unknown method `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub sizes: Vec<usize>,
    /// Arena side for sweeps; `[world].side_length` when absent.
    pub side_length: Option<f64>,
    pub obstacles: Option<usize>,
    pub seed_base: u64,
    pub methods: Vec<Method>,
    pub checkpoint: Option<PathBuf>,
    /// Name written to the `method` column for the learned policy.
    pub label: String,
    pub plot: bool,
    /// Worker threads for episodes; 0 picks the available parallelism.
    pub workers: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 50,
            sizes: vec![8, 16, 32],
            side_length: None,
            obstacles: None,
            seed_base: 1000,
            methods: vec![Method::Learned, Method::Ccbf, Method::Dcbf, Method::Nominal],
            checkpoint: None,
            label: "egcbf".into(),
            plot: false,
            workers: 0,
        }
    }
}

/// The whole experiment file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelSection,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.world.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.model.model().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.model.model().system != self.model.system {
            return Err(HarnessError::Config("model.params.system differs from model.system".into()));
        }
        if self.eval.episodes == 0 {
            return Err(HarnessError::Config("eval.episodes must be at least 1".into()));
        }
        if self.train.hdot_step <= 0.0 {
            return Err(HarnessError::Config("train.hdot_step must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn learn_context(&self) -> LearnContext {
        LearnContext {
            model: self.model.model(),
            world: self.world.clone(),
            gains: self.model.gains.clone(),
            qp: self.model.qp.clone(),
            train: self.train.clone(),
        }
    }

    pub fn eval_context(&self) -> super::EvalContext {
        super::EvalContext {
            model: self.model.model(),
            world: self.world.clone(),
            gains: self.model.gains.clone(),
            qp: self.model.qp.clone(),
            barrier: self.model.barrier.clone(),
        }
    }
}

/// `section.key=value` with a TOML value; bare words are taken as strings.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), HarnessError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| HarnessError::Config(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = root;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry.as_table_mut().ok_or_else(|| HarnessError::Config(format!("`{k}` in `{path}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn round_trip_and_overrides() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, back);
        let o = ExperimentConfig::from_toml(
            "[world]\nnum_agents = 4\n",
            &["train.iterations=7".into(), "eval.methods=[\"ccbf\"]".into(), "eval.label=mine".into()],
        )
        .unwrap();
        assert_eq!(o.world.num_agents, 4);
        assert_eq!(o.train.iterations, 7);
        assert_eq!(o.eval.methods, vec![Method::Ccbf]);
        assert_eq!(o.eval.label, "mine");
        assert_ne!(o.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[world]\nbogus = 1\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["eval.episodes=0".into()]).is_err());
    }
}
