//! Scenario files: one TOML document per run.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use wbft_core::components::BatchMode;
use wbft_core::consensus::component::ComponentKind;
use wbft_core::consensus::{Behavior, Protocol, Registry};
use wbft_core::netsim::AdversaryPolicy;
use wbft_core::run::RunSetup;
use wbft_core::{fault_threshold, NodeId, SystemConfig, Tick};

use crate::BenchError;

pub const PROTOCOLS: [&str; 5] = ["hbbft-lc", "hbbft-sc", "beat", "dumbo-lc", "dumbo-sc"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    #[default]
    Batcher,
    Baseline,
}

impl Batching {
    pub fn mode(self) -> BatchMode {
        match self {
            Batching::Batcher => BatchMode::Batched,
            Batching::Baseline => BatchMode::Baseline,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Batching::Batcher => "batcher",
            Batching::Baseline => "baseline",
        }
    }

    pub fn from_name(s: &str) -> Option<Batching> {
        [Batching::Batcher, Batching::Baseline]
            .into_iter()
            .find(|b| b.name() == s)
    }
}

/// `{ single = 4 }` or `{ multi = [4, 4, 4, 4] }`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologySpec {
    Single(usize),
    Multi(Vec<usize>),
}

impl TopologySpec {
    pub fn total(&self) -> usize {
        match self {
            TopologySpec::Single(n) => *n,
            TopologySpec::Multi(s) => s.iter().sum(),
        }
    }
}

impl fmt::Display for TopologySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologySpec::Single(n) => write!(f, "single:{n}"),
            TopologySpec::Multi(s) => {
                let parts: Vec<String> = s.iter().map(|x| x.to_string()).collect();
                write!(f, "multi:{}", parts.join("x"))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSpec {
    pub node: u8,
    pub behavior: String,
}

fn default_proposal_bytes() -> usize {
    32
}

fn default_epochs() -> u16 {
    1
}

fn default_max_ticks() -> Tick {
    1_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(default)]
    pub batching: Batching,
    pub topology: TopologySpec,
    #[serde(default)]
    pub byzantine: Vec<ByzantineSpec>,
    #[serde(default)]
    pub loss_rate: f64,
    /// Probability that a delivery is held back, reordering it.
    #[serde(default)]
    pub delay_prob: f64,
    #[serde(default)]
    pub max_extra_delay: Tick,
    #[serde(default = "default_proposal_bytes")]
    pub proposal_bytes: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u16,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encrypt: Option<bool>,
    /// Overrides for the per-cluster system configuration, same keys as
    /// a standalone config file except `n_nodes` and `f`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<toml::Table>,
}

impl ScenarioSpec {
    pub fn new(protocol: &str, topology: TopologySpec) -> ScenarioSpec {
        ScenarioSpec {
            name: protocol.to_string(),
            protocol: Some(protocol.to_string()),
            component: None,
            batching: Batching::Batcher,
            topology,
            byzantine: Vec::new(),
            loss_rate: 0.0,
            delay_prob: 0.0,
            max_extra_delay: 0,
            proposal_bytes: default_proposal_bytes(),
            epochs: default_epochs(),
            seed: 0,
            max_ticks: default_max_ticks(),
            encrypt: None,
            system: None,
        }
    }

    pub fn component(kind: &str, n: usize) -> ScenarioSpec {
        ScenarioSpec {
            protocol: None,
            component: Some(kind.to_string()),
            ..ScenarioSpec::new(kind, TopologySpec::Single(n))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<ScenarioSpec, BenchError> {
        let spec: ScenarioSpec =
            toml::from_str(s).map_err(|e| BenchError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<ScenarioSpec, BenchError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        let mut spec = Self::from_toml_str(&s).map_err(|e| match e {
            BenchError::Config(m) => BenchError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if spec.name.is_empty() {
            spec.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Registry key of the protocol or component under test.
    pub fn target(&self) -> Result<&str, BenchError> {
        match (&self.protocol, &self.component) {
            (Some(p), None) => {
                if !PROTOCOLS.contains(&p.as_str()) {
                    return Err(BenchError::Config(format!("unknown protocol {p:?}")));
                }
                Ok(p)
            }
            (None, Some(c)) => {
                if ComponentKind::from_name(c).is_none() {
                    return Err(BenchError::Config(format!("unknown component {c:?}")));
                }
                Ok(c)
            }
            _ => Err(BenchError::Config(
                "exactly one of protocol and component must be set".into(),
            )),
        }
    }

    pub fn behaviors(&self) -> Result<Vec<(NodeId, Behavior)>, BenchError> {
        self.byzantine
            .iter()
            .map(|b| {
                let beh = b.behavior.parse::<Behavior>().map_err(|_| {
                    BenchError::Config(format!("unknown behavior {:?}", b.behavior))
                })?;
                Ok((NodeId(b.node), beh))
            })
            .collect()
    }

    /// System configuration for a channel of `n` nodes.
    pub fn system_config(&self, n: usize) -> Result<SystemConfig, BenchError> {
        let mut cfg = SystemConfig::for_nodes(n)?;
        if let Some(over) = &self.system {
            if over.contains_key("n_nodes") || over.contains_key("f") {
                return Err(BenchError::Config(
                    "system overrides may not set n_nodes or f".into(),
                ));
            }
            let mut table =
                toml::Table::try_from(&cfg).map_err(|e| BenchError::Config(e.to_string()))?;
            table.extend(over.iter().map(|(k, v)| (k.clone(), v.clone())));
            cfg = table
                .try_into()
                .map_err(|e: toml::de::Error| BenchError::Config(e.to_string()))?;
            cfg.validate()?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let target = self.target()?;
        if self.component.is_some() && matches!(self.topology, TopologySpec::Multi(_)) {
            return Err(BenchError::Config(format!(
                "component {target} runs single-hop only"
            )));
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(BenchError::Config(format!(
                "loss_rate {} outside [0, 1)",
                self.loss_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.delay_prob) {
            return Err(BenchError::Config(format!(
                "delay_prob {} outside [0, 1]",
                self.delay_prob
            )));
        }
        if self.epochs == 0 {
            return Err(BenchError::Config("epochs must be at least 1".into()));
        }
        let total = self.topology.total();
        fault_threshold(total)?;
        let byz = self.behaviors()?;
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in &byz {
            if id.idx() >= total {
                return Err(BenchError::Config(format!(
                    "byzantine node {} out of range",
                    id.0
                )));
            }
            if !seen.insert(*id) {
                return Err(BenchError::Config(format!(
                    "byzantine node {} listed twice",
                    id.0
                )));
            }
        }
        match &self.topology {
            TopologySpec::Single(n) => {
                let f = fault_threshold(*n)?;
                if byz.len() > f {
                    return Err(BenchError::Config(format!(
                        "{} byzantine nodes exceed f = {f}",
                        byz.len()
                    )));
                }
                self.system_config(*n)?;
            }
            TopologySpec::Multi(sizes) => {
                let mut start = 0;
                for (c, &n) in sizes.iter().enumerate() {
                    let f = fault_threshold(n)?;
                    let bad = byz
                        .iter()
                        .filter(|(id, _)| (start..start + n).contains(&id.idx()))
                        .count();
                    if bad > f {
                        return Err(BenchError::Config(format!(
                            "{bad} byzantine nodes in cluster {c} exceed f = {f}"
                        )));
                    }
                    self.system_config(n)?;
                    start += n;
                }
            }
        }
        Ok(())
    }

    pub fn setup(&self, registry: &Registry) -> Result<RunSetup, BenchError> {
        self.validate()?;
        let target = self.target()?;
        let protocol: Arc<dyn Protocol> = registry
            .get(target)
            .ok_or_else(|| BenchError::Config(format!("{target} is not registered")))?;
        let n = match &self.topology {
            TopologySpec::Single(n) => *n,
            TopologySpec::Multi(s) => s[0],
        };
        let mut setup = RunSetup::new(self.system_config(n)?, protocol);
        setup.mode = self.batching.mode();
        setup.epochs = self.epochs;
        setup.byzantine = self.behaviors()?;
        setup.policy = AdversaryPolicy {
            loss_rate: self.loss_rate,
            delay_prob: self.delay_prob,
            max_extra_delay: self.max_extra_delay,
        };
        setup.proposal_bytes = self.proposal_bytes;
        setup.seed = self.seed;
        setup.max_ticks = self.max_ticks;
        setup.encrypt = self.encrypt;
        Ok(setup)
    }

    /// Fails unless `self` and `other` differ at most in name and batching.
    pub fn check_comparable(&self, other: &ScenarioSpec) -> Result<(), BenchError> {
        let strip = |s: &ScenarioSpec| ScenarioSpec {
            name: String::new(),
            batching: Batching::Batcher,
            ..s.clone()
        };
        if strip(self) != strip(other) {
            return Err(BenchError::Config(format!(
                "scenarios {:?} and {:?} differ in more than batching",
                self.name, other.name
            )));
        }
        Ok(())
    }
}
