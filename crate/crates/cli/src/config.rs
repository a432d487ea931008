//! Run configuration: TOML on disk, unknown keys rejected, hashed through
//! its canonical JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hoi_core::diffusion::{DenoiserConfig, ScheduleKind};
use hoi_core::memory::{Fusion, MemoryConfig, MemoryVariant};
use hoi_core::metrics::{DivMode, ExtractorConfig};
use hoi_core::percept::{BackboneConfig, PerceptConfig};
use hoi_core::seq::{Mode, ModelKind, StackConfig};
use hoi_core::synth::{SynthGenSpec, SynthPcdSpec, OBJECT_POSE_DIM};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Generation,
    Perception,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Generation => "generation",
            Task::Perception => "perception",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to a tenth over `steps`.
    #[serde(default)]
    pub decay: bool,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDims {
    pub model_dim: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub expansion: usize,
    pub heads: usize,
    /// Denoiser encoder/decoder depth.
    #[serde(default = "one")]
    pub depth: usize,
    /// Heads of the denoiser's condition attention.
    #[serde(default = "two")]
    pub cond_heads: usize,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub data: SynthGenSpec,
    pub train_count: usize,
    pub val_count: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub extractor: ExtractorConfig,
    pub div_pairs: usize,
    #[serde(default)]
    pub div_mode: DivMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptSection {
    pub data: SynthPcdSpec,
    pub train_count: usize,
    pub val_count: usize,
    pub backbone: BackboneConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by `datagen`; generated in memory when unset.
    #[serde(default)]
    pub data: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory name under the output root.
    pub name: String,
    pub task: Task,
    pub mode: Mode,
    pub memory: MemoryVariant,
    pub fusion: Fusion,
    pub model: ModelKind,
    /// Short-term memory capacity `S`.
    pub short_capacity: usize,
    /// Long-term memory capacity.
    pub long_capacity: usize,
    pub seeds: Vec<u64>,
    pub train: TrainBudget,
    pub net: NetDims,
    #[serde(default)]
    pub generation: Option<GenSection>,
    #[serde(default)]
    pub perception: Option<PerceptSection>,
    #[serde(default)]
    pub paths: Paths,
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key such as `train.steps` inside `table`.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in override {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{p} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> CliResult<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
        set_dotted(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn read_table(path: &Path) -> CliResult<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> CliResult<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let mut table = read_table(path)?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.name.is_empty() || self.name.contains("..") || Path::new(&self.name).is_absolute() {
            return bad("name must be a non-empty relative path");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.train.steps == 0 || self.train.batch == 0 || self.train.checkpoint_every == 0 {
            return bad("train.steps, train.batch and train.checkpoint_every must be >= 1");
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if self.short_capacity == 0 || self.long_capacity == 0 {
            return bad("short_capacity and long_capacity must be >= 1");
        }
        match (self.task, &self.generation, &self.perception) {
            (Task::Generation, Some(g), None) => {
                g.data.validate()?;
                if g.train_count == 0 || g.val_count < 2 || g.div_pairs == 0 {
                    return bad("generation needs train_count >= 1, val_count >= 2, div_pairs >= 1");
                }
                self.denoiser_config()?.validate()?;
            }
            (Task::Perception, None, Some(p)) => {
                p.data.validate()?;
                if p.train_count == 0 || p.val_count == 0 {
                    return bad("perception needs train_count and val_count >= 1");
                }
                self.percept_config()?.validate()?;
                for l in &p.backbone.levels {
                    l.validate()?;
                }
            }
            (t, _, _) => {
                return Err(CliError::Config(format!(
                    "task {} needs exactly its own [{}] section",
                    t.as_str(),
                    t.as_str()
                )))
            }
        }
        Ok(())
    }

    pub fn stack(&self) -> StackConfig {
        StackConfig {
            kind: self.model,
            model_dim: self.net.model_dim,
            state_dim: self.net.state_dim,
            conv_width: self.net.conv_width,
            expansion: self.net.expansion,
            heads: self.net.heads,
            eq1_literal: false,
        }
    }

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            short_capacity: self.short_capacity,
            long_capacity: self.long_capacity,
            ..MemoryConfig::default()
        }
    }

    pub fn gen(&self) -> CliResult<&GenSection> {
        self.generation
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [generation] section".into()))
    }

    pub fn pcd(&self) -> CliResult<&PerceptSection> {
        self.perception
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [perception] section".into()))
    }

    pub fn denoiser_config(&self) -> CliResult<DenoiserConfig> {
        let g = self.gen()?;
        Ok(DenoiserConfig {
            pose_dim: g.data.pose_dim,
            actor_dim: g.data.actor_dim(),
            object_pose_dim: OBJECT_POSE_DIM,
            depth: self.net.depth,
            cond_heads: self.net.cond_heads,
            stack: self.stack(),
            mode: self.mode,
            memory: self.memory_config(),
            memory_variant: self.memory,
            fusion: self.fusion,
        })
    }

    pub fn percept_config(&self) -> CliResult<PerceptConfig> {
        let p = self.pcd()?;
        Ok(PerceptConfig {
            backbone: p.backbone.clone(),
            stack: self.stack(),
            num_classes: p.data.label_count(),
            conv_window: self.mode,
            temporal_mode: self.mode,
            memory: self.memory_config(),
            memory_variant: self.memory,
            fusion: self.fusion,
            per_point: false,
        })
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&serde_json::to_value(self).expect("config serialises")).expect("value serialises")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = include_str!("../../../configs/gen_smoke.toml");

    fn smoke() -> toml::Table {
        toml::from_str(SMOKE).unwrap()
    }

    #[test]
    fn shipped_smoke_config_parses() {
        let cfg = RunConfig::from_table(smoke()).unwrap();
        assert_eq!(cfg.task, Task::Generation);
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for key in ["memroy", "train.stpes", "generation.data.lagg"] {
            let mut t = smoke();
            set_dotted(&mut t, key, toml::Value::Integer(1)).unwrap();
            assert!(matches!(RunConfig::from_table(t), Err(CliError::Config(_))), "{key}");
        }
    }

    #[test]
    fn overrides_change_the_hash() {
        let base = RunConfig::from_table(smoke()).unwrap();
        let mut t = smoke();
        apply_overrides(&mut t, &["memory=off".into(), "train.steps=7".into()]).unwrap();
        let cfg = RunConfig::from_table(t).unwrap();
        assert_eq!((cfg.memory, cfg.train.steps), (MemoryVariant::Off, 7));
        assert_ne!(cfg.hash(), base.hash());
        let again = RunConfig::from_table(toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap()).unwrap();
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn task_section_must_match() {
        let mut t = smoke();
        set_dotted(&mut t, "task", toml::Value::String("perception".into())).unwrap();
        assert!(matches!(RunConfig::from_table(t), Err(CliError::Config(_))));
        assert!(matches!(apply_overrides(&mut smoke(), &["novalue".into()]), Err(CliError::Config(_))));
    }
}
