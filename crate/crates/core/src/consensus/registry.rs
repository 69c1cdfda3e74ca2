//! Protocols registered by name and selected at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::component::{ComponentKind, ComponentMachine};
use super::dumbo::DumboProtocol;
use super::hbbft::HbbftProtocol;
use super::{EpochMachine, NodeEnv};
use crate::types::{hash_parts, NodeId};

pub trait Protocol: Send + Sync {
    fn name(&self) -> &str;
    fn machine(&self, env: &NodeEnv, epoch: u16) -> Box<dyn EpochMachine>;
}

/// Agreement inputs used when a binary agreement runs on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbaInput {
    Ones,
    Zeros,
    /// Pseudo-random per node, instance and epoch.
    Seeded,
}

impl AbaInput {
    pub fn bits(self, seed: u64, me: NodeId, epoch: u16, k: usize) -> Vec<bool> {
        (0..k)
            .map(|i| match self {
                AbaInput::Ones => true,
                AbaInput::Zeros => false,
                AbaInput::Seeded => {
                    let h = hash_parts(
                        &[
                            b"input",
                            &seed.to_le_bytes(),
                            &[me.0, i as u8],
                            &epoch.to_le_bytes(),
                        ],
                        32,
                    );
                    h.as_bytes()[0] & 1 == 1
                }
            })
            .collect()
    }
}

pub struct ComponentProtocol {
    pub kind: ComponentKind,
    pub input: AbaInput,
}

impl Protocol for ComponentProtocol {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn machine(&self, env: &NodeEnv, epoch: u16) -> Box<dyn EpochMachine> {
        let inputs = self.input.bits(env.seed, env.me, epoch, env.cfg.n_nodes);
        Box::new(ComponentMachine::new(self.kind, env.clone(), epoch, inputs))
    }
}

#[derive(Clone, Default)]
pub struct Registry {
    map: BTreeMap<String, Arc<dyn Protocol>>,
}

impl Registry {
    pub fn empty() -> Registry {
        Registry::default()
    }

    /// Every protocol and component shipped with the crate.
    pub fn builtin() -> Registry {
        let mut r = Registry::empty();
        for kind in ComponentKind::ALL {
            r.register(Arc::new(ComponentProtocol {
                kind,
                input: AbaInput::Ones,
            }));
        }
        for p in HbbftProtocol::ALL {
            r.register(Arc::new(p));
        }
        for p in DumboProtocol::ALL {
            r.register(Arc::new(p));
        }
        r
    }

    pub fn register(&mut self, p: Arc<dyn Protocol>) {
        self.map.insert(p.name().to_string(), p);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Protocol>> {
        self.map.get(name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.map.keys().map(|s| s.as_str()).collect()
    }
}
