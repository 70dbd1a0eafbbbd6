//! Management engine health tracking: heartbeats, failure detection and the
//! remediation decision log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::HealthConfig;
use crate::discovery::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthState {
    Alive,
    Suspect,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    /// Worker hosting data provider handlers.
    Handler,
    QueryInstance,
    Master,
    Slave,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleLoad {
    pub providers: u64,
    pub subscriptions: u64,
    pub cpu_hint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleHealth {
    pub module: String,
    pub kind: ModuleKind,
    pub role: Role,
    pub node: String,
    pub last_heartbeat_us: u64,
    pub state: HealthState,
    pub load: ModuleLoad,
    /// Providers routed to this module (handlers only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hosted_providers: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HealthError {
    #[error("unknown module {0}")]
    UnknownModule(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Remediation {
    ReassignProvider { provider: String },
    TeardownConnection { module: String },
    PromoteSlave { role: Role, slave: String },
    RoleUnavailable { role: Role },
    RespawnSlave { role: Role },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub module: String,
    pub kind: ModuleKind,
    pub role: Role,
    pub actions: Vec<Remediation>,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub time_us: u64,
    pub module: String,
    #[serde(flatten)]
    pub action: Remediation,
}

/// Health table. Each module moves `alive -> suspect -> failed`; a suspect
/// module that heartbeats again returns to alive, a failed one never does
/// (it is replaced under a new id).
#[derive(Debug, Clone)]
pub struct HealthMonitor {
    interval_us: u64,
    suspect_after: u64,
    failed_after: u64,
    modules: BTreeMap<String, ModuleHealth>,
    log: Vec<Decision>,
}

impl HealthMonitor {
    pub fn new(cfg: &HealthConfig) -> Self {
        Self {
            interval_us: cfg.heartbeat_interval_ms.max(1) * 1000,
            suspect_after: u64::from(cfg.suspect_after.max(1)),
            failed_after: u64::from(cfg.failed_after.max(cfg.suspect_after).max(1)),
            modules: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn interval_us(&self) -> u64 {
        self.interval_us
    }

    pub fn register(&mut self, module: &str, kind: ModuleKind, role: Role, node: &str, now_us: u64) {
        self.modules.insert(
            module.to_owned(),
            ModuleHealth {
                module: module.to_owned(),
                kind,
                role,
                node: node.to_owned(),
                last_heartbeat_us: now_us,
                state: HealthState::Alive,
                load: ModuleLoad::default(),
                hosted_providers: Vec::new(),
            },
        );
    }

    pub fn deregister(&mut self, module: &str) {
        self.modules.remove(module);
    }

    pub fn set_hosted_providers(&mut self, module: &str, mut providers: Vec<String>) -> Result<(), HealthError> {
        let m = self.modules.get_mut(module).ok_or_else(|| HealthError::UnknownModule(module.to_owned()))?;
        providers.sort();
        m.load.providers = providers.len() as u64;
        m.hosted_providers = providers;
        Ok(())
    }

    pub fn set_load(&mut self, module: &str, load: ModuleLoad) -> Result<(), HealthError> {
        let m = self.modules.get_mut(module).ok_or_else(|| HealthError::UnknownModule(module.to_owned()))?;
        m.load = load;
        Ok(())
    }

    fn state_for_silence(&self, silence_us: u64) -> HealthState {
        if silence_us > self.failed_after * self.interval_us {
            HealthState::Failed
        } else if silence_us > self.suspect_after * self.interval_us {
            HealthState::Suspect
        } else {
            HealthState::Alive
        }
    }

    pub fn process_heartbeat(&mut self, module: &str, now_us: u64) -> Result<ModuleHealth, HealthError> {
        let m = self.modules.get_mut(module).ok_or_else(|| HealthError::UnknownModule(module.to_owned()))?;
        if m.state != HealthState::Failed {
            m.last_heartbeat_us = m.last_heartbeat_us.max(now_us);
            m.state = HealthState::Alive;
        }
        Ok(m.clone())
    }

    pub fn module(&self, module: &str) -> Option<&ModuleHealth> {
        self.modules.get(module)
    }

    pub fn modules(&self) -> impl Iterator<Item = &ModuleHealth> {
        self.modules.values()
    }

    /// Recomputes states at `now_us` without emitting remediation.
    pub fn refresh(&mut self, now_us: u64) {
        let states: Vec<(String, HealthState)> = self
            .modules
            .values()
            .filter(|m| m.state != HealthState::Failed)
            .map(|m| (m.module.clone(), self.state_for_silence(now_us.saturating_sub(m.last_heartbeat_us))))
            .collect();
        for (id, s) in states {
            if s != HealthState::Failed {
                self.modules.get_mut(&id).expect("listed").state = s;
            }
        }
    }

    /// Marks newly failed modules and returns their remediation, in module
    /// id order. The result depends only on the health table and `now_us`.
    pub fn detect_failures(&mut self, now_us: u64) -> Vec<FailureReport> {
        self.refresh(now_us);
        let newly: Vec<String> = self
            .modules
            .values()
            .filter(|m| {
                m.state != HealthState::Failed
                    && self.state_for_silence(now_us.saturating_sub(m.last_heartbeat_us)) == HealthState::Failed
            })
            .map(|m| m.module.clone())
            .collect();
        for id in &newly {
            self.modules.get_mut(id).expect("listed").state = HealthState::Failed;
        }
        let mut reports = Vec::new();
        for id in newly {
            let m = &self.modules[&id];
            let actions = match m.kind {
                ModuleKind::Handler => m
                    .hosted_providers
                    .iter()
                    .map(|p| Remediation::ReassignProvider { provider: p.clone() })
                    .collect(),
                ModuleKind::QueryInstance => vec![Remediation::TeardownConnection { module: id.clone() }],
                ModuleKind::Master => {
                    let slave = self
                        .modules
                        .values()
                        .find(|s| s.kind == ModuleKind::Slave && s.role == m.role && s.state == HealthState::Alive);
                    match slave {
                        Some(s) => vec![Remediation::PromoteSlave { role: m.role, slave: s.module.clone() }],
                        None => vec![Remediation::RoleUnavailable { role: m.role }],
                    }
                }
                ModuleKind::Slave => vec![Remediation::RespawnSlave { role: m.role }],
            };
            for a in &actions {
                self.log.push(Decision { time_us: now_us, module: id.clone(), action: a.clone() });
            }
            reports.push(FailureReport { module: id, kind: m.kind, role: m.role, actions });
        }
        reports
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.log
    }

    /// The decision log as line-delimited JSON.
    pub fn decision_log_lines(&self) -> String {
        self.log.iter().map(|d| crate::canonical_json(d) + "\n").collect()
    }

    pub fn append_decision_log(&self, path: &Path, from: usize) -> std::io::Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        for d in self.log.iter().skip(from) {
            writeln!(f, "{}", crate::canonical_json(d))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1000;

    fn monitor() -> HealthMonitor {
        HealthMonitor::new(&HealthConfig::default())
    }

    #[test]
    fn thresholds() {
        let mut h = monitor();
        h.register("w0", ModuleKind::Handler, Role::Ingest, "n1", 0);
        assert_eq!(h.process_heartbeat("w0", 400 * MS).unwrap().state, HealthState::Alive);
        h.refresh(400 * MS + 600 * MS);
        assert_eq!(h.module("w0").unwrap().state, HealthState::Suspect);
        assert!(h.detect_failures(400 * MS + 1450 * MS).is_empty());
        assert_eq!(h.detect_failures(400 * MS + 1550 * MS).len(), 1);
        assert!(h.detect_failures(400 * MS + 1600 * MS).is_empty());
        assert_eq!(h.module("w0").unwrap().state, HealthState::Failed);
        assert_eq!(h.process_heartbeat("w0", 10_000 * MS).unwrap().state, HealthState::Failed);
        assert_eq!(h.process_heartbeat("nope", 0), Err(HealthError::UnknownModule("nope".into())));
    }

    #[test]
    fn handler_failure_reassigns_each_provider() {
        let mut h = monitor();
        h.register("w1", ModuleKind::Handler, Role::Ingest, "n1", 0);
        h.set_hosted_providers("w1", (0..5).map(|i| format!("p{i}")).collect()).unwrap();
        let r = h.detect_failures(2_000 * MS);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].actions.len(), 5);
        assert!(r[0].actions.iter().all(|a| matches!(a, Remediation::ReassignProvider { .. })));
    }

    #[test]
    fn master_failure_promotes_or_marks_unavailable() {
        let mut h = monitor();
        h.register("m", ModuleKind::Master, Role::Query, "n1", 0);
        h.register("s", ModuleKind::Slave, Role::Query, "n2", 0);
        h.process_heartbeat("s", 1_900 * MS).unwrap();
        let r = h.detect_failures(2_000 * MS);
        assert_eq!(r[0].actions, vec![Remediation::PromoteSlave { role: Role::Query, slave: "s".into() }]);

        let mut h = monitor();
        h.register("m", ModuleKind::Master, Role::Query, "n1", 0);
        h.register("s", ModuleKind::Slave, Role::Query, "n2", 0);
        let r = h.detect_failures(2_000 * MS);
        assert_eq!(r[0].actions, vec![Remediation::RoleUnavailable { role: Role::Query }]);
        assert_eq!(r[1].actions, vec![Remediation::RespawnSlave { role: Role::Query }]);
    }

    #[test]
    fn identical_tables_give_identical_logs() {
        let run = || {
            let mut h = monitor();
            for i in 0..4 {
                h.register(&format!("w{i}"), ModuleKind::Handler, Role::Ingest, "n1", 0);
                h.set_hosted_providers(&format!("w{i}"), vec![format!("p{i}"), format!("q{i}")]).unwrap();
            }
            h.process_heartbeat("w2", 1_000 * MS).unwrap();
            h.detect_failures(2_000 * MS);
            h.decision_log_lines()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 6);
    }
}
