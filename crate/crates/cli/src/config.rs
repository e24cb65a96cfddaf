//! Experiment configuration file.

use std::fmt;
use std::path::{Path, PathBuf};

use cetsim_core::calibration::CalibrationError;
use cetsim_core::netmodel::TEXT_FRAME_BYTES;
use cetsim_core::protocols::{payloads_for, DefenseConfig};
use cetsim_core::semantics::{AttackSpec, CodecSet, CodecSpec};
use cetsim_core::{
    plan_flow, CalibrationTable, LinkClass, LinkSpec, ModeVariant, Node, NodeId, NodeKind,
    Payloads, Scenario, Topology,
};
use serde::de::{self, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const BUILTIN_CALIBRATION: &str = "builtin";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
}

impl ConfigError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ConfigError::Calibration(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds_per_point: u32,
    /// `"builtin"` or a path relative to the config file.
    #[serde(default = "builtin")]
    pub calibration: String,
    /// When set, the loaded calibration must hash to this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sample_outcomes: bool,
    #[serde(default)]
    pub topology: TopologySection,
    #[serde(default)]
    pub payloads: PayloadSection,
    /// Per-modality overrides of the default codecs.
    #[serde(default)]
    pub codecs: Vec<CodecSpec>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub defenses: DefenseConfig,
    #[serde(default)]
    pub controller: ControllerSection,
    pub sweep: Vec<SweepEntry>,
}

fn builtin() -> String {
    BUILTIN_CALIBRATION.to_string()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    /// Only `"default"` exists. Leave unset when listing nodes explicitly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Link classes forced down for the whole run.
    pub disabled_classes: Vec<LinkClass>,
    pub nodes: Vec<Node>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayloadSection {
    pub directive_bytes: u64,
    pub alert_bytes: u64,
}

impl Default for PayloadSection {
    fn default() -> Self {
        PayloadSection {
            directive_bytes: TEXT_FRAME_BYTES,
            alert_bytes: TEXT_FRAME_BYTES,
        }
    }
}

/// Used by sweeps with `variants = "auto"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub terminal: NodeId,
    pub latency_budget_s: f64,
    pub min_accuracy: f64,
    /// Re-run selection every this many rounds.
    pub reselect_every: u32,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            terminal: NodeId(2),
            latency_budget_s: 1.0,
            min_accuracy: 0.0,
            reselect_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Variants {
    Auto,
    List(Vec<ModeVariant>),
}

impl Serialize for Variants {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Variants::Auto => s.serialize_str("auto"),
            Variants::List(vs) => vs.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Variants {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Variants;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"auto\" or a list of variant names")
            }

            fn visit_str<E: de::Error>(self, s: &str) -> Result<Variants, E> {
                if s == "auto" {
                    Ok(Variants::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(s), &self))
                }
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Variants, A::Error> {
                let mut out = Vec::new();
                while let Some(v) = seq.next_element::<ModeVariant>()? {
                    out.push(v);
                }
                Ok(Variants::List(out))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub scenario: Scenario,
    pub snr_db: Vec<f64>,
    pub variants: Variants,
}

/// A validated config with everything it refers to loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub topology: Topology,
    pub table: CalibrationTable,
    pub codecs: CodecSet,
    pub payloads: Payloads,
    /// Absolute calibration path, `None` for the builtin table.
    pub calibration_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string().trim_end().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Experiment, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: origin.clone(),
            message: e.to_string(),
        })?;
        let config = Self::parse(&text, &origin)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base, &origin)
    }

    /// Validates the config and loads the topology and calibration it
    /// names; relative calibration paths are taken from `base`.
    pub fn resolve(self, base: &Path, origin: &str) -> Result<Experiment, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid {
            path: origin.to_string(),
            message,
        };
        if self.rounds_per_point == 0 {
            return Err(invalid("rounds_per_point must be positive".into()));
        }
        if self.sweep.is_empty() {
            return Err(invalid("sweep must list at least one entry".into()));
        }
        for (i, s) in self.sweep.iter().enumerate() {
            if s.snr_db.is_empty() || s.snr_db.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("sweep[{i}].snr_db must be a non-empty list of finite values")));
            }
            if let Variants::List(vs) = &s.variants {
                if vs.is_empty() {
                    return Err(invalid(format!("sweep[{i}].variants is empty")));
                }
                let mut seen = vs.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != vs.len() {
                    return Err(invalid(format!("sweep[{i}].variants lists a variant twice")));
                }
            }
        }
        for a in &self.attacks {
            a.validate().map_err(|e| invalid(format!("attacks: {e}")))?;
        }
        let mut kinds: Vec<_> = self.attacks.iter().map(|a| a.kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.attacks.len() {
            return Err(invalid("attacks: each kind may appear once".into()));
        }
        self.defenses.validate().map_err(|e| invalid(format!("defenses: {e}")))?;
        let c = &self.controller;
        if !(c.latency_budget_s.is_finite() && c.latency_budget_s > 0.0) {
            return Err(invalid("controller.latency_budget_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&c.min_accuracy) {
            return Err(invalid("controller.min_accuracy must lie in [0, 1]".into()));
        }
        if c.reselect_every == 0 {
            return Err(invalid("controller.reselect_every must be positive".into()));
        }

        let mut codecs = CodecSet::defaults();
        for spec in &self.codecs {
            codecs = codecs.with(spec.clone()).map_err(|e| invalid(format!("codecs: {e}")))?;
        }
        let p = &self.payloads;
        if p.directive_bytes == 0 || p.alert_bytes == 0 {
            return Err(invalid("payloads: frame sizes must be positive".into()));
        }
        let payloads = payloads_for(&codecs, p.directive_bytes, p.alert_bytes);

        let topology = self.build_topology().map_err(invalid)?;
        if self.sweep.iter().any(|s| s.variants == Variants::Auto)
            && topology.kind(c.terminal) != Some(NodeKind::Terminal)
        {
            return Err(invalid(format!("controller.terminal {} is not a terminal", c.terminal)));
        }
        for s in &self.sweep {
            if let Variants::List(vs) = &s.variants {
                for v in vs {
                    plan_flow(*v, &topology, None, &payloads)
                        .map_err(|e| invalid(format!("sweep lists {v}, which this topology cannot run: {e}")))?;
                }
            }
        }

        let (table, calibration_path) = if self.calibration == BUILTIN_CALIBRATION {
            (CalibrationTable::builtin(), None)
        } else {
            let path = base.join(&self.calibration);
            let path = path.canonicalize().unwrap_or(path);
            (CalibrationTable::load(&path)?, Some(path))
        };
        if let Some(want) = &self.calibration_sha256 {
            let got = &table.source().sha256;
            if want != got {
                return Err(CalibrationError::Violation {
                    constraint: "content-hash",
                    line: None,
                    detail: format!("expected sha256 {want}, file hashes to {got}"),
                }
                .into());
            }
        }
        Ok(Experiment {
            config: self,
            topology,
            table,
            codecs,
            payloads,
            calibration_path,
        })
    }

    fn build_topology(&self) -> Result<Topology, String> {
        let t = &self.topology;
        let mut topo = if t.nodes.is_empty() && t.links.is_empty() {
            match t.preset.as_deref() {
                None | Some("default") => Topology::default_cet(),
                Some(other) => return Err(format!("topology.preset: unknown preset `{other}`")),
            }
        } else {
            if t.preset.is_some() {
                return Err("topology: give either a preset or nodes and links, not both".into());
            }
            Topology::new(t.nodes.clone(), t.links.clone()).map_err(|e| format!("topology: {e}"))?
        };
        for class in &t.disabled_classes {
            topo.set_class_up(*class, false);
        }
        Ok(topo)
    }
}

impl Experiment {
    /// The config as it was actually run, suitable for re-running.
    pub fn manifest(&self, seed: u64, sample_outcomes: bool) -> ExperimentConfig {
        let mut m = self.config.clone();
        m.seed = seed;
        m.sample_outcomes = sample_outcomes;
        m.output_dir = None;
        m.calibration = match &self.calibration_path {
            Some(p) => p.display().to_string(),
            None => BUILTIN_CALIBRATION.to_string(),
        };
        m.calibration_sha256 = Some(self.table.source().sha256.clone());
        m
    }

    pub fn manifest_toml(&self, seed: u64, sample_outcomes: bool) -> String {
        let body = toml::to_string(&self.manifest(seed, sample_outcomes)).expect("config serializes");
        format!(
            "# cetsim {} run manifest; re-run with `cetsim simulate --config <this file>`\n{body}",
            env!("CARGO_PKG_VERSION")
        )
    }
}
