//! Mode selection: a feasibility filter followed by a constrained argmax.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::calibration::{sensing_accuracy, total_latency_for, CalibrationTable};
use crate::model::{LinkClass, ModalitySet, Mode, ModeVariant, NodeId, Scenario};
use crate::netmodel::{Payloads, Topology};

/// What a terminal can currently reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkState {
    pub cloud_reachable: bool,
    pub edge_reachable: bool,
    pub peers_reachable: bool,
    /// Modalities held by terminals under the same edge (self included).
    pub borrowable: ModalitySet,
    /// Modalities held by one-hop D2D peers.
    pub peer_modalities: ModalitySet,
}

impl LinkState {
    pub fn of_terminal(topo: &Topology, t: NodeId) -> Self {
        let edge = topo.serving_edge(t);
        let borrowable = edge.map_or(ModalitySet::EMPTY, |e| {
            topo.neighbours(e, LinkClass::EdgeLocal)
                .into_iter()
                .fold(ModalitySet::EMPTY, |acc, n| acc.union(topo.sensors(n)))
        });
        let peers = topo.neighbours(t, LinkClass::PeerD2D);
        LinkState {
            cloud_reachable: topo.cloud_reachable(t),
            edge_reachable: edge.is_some(),
            peers_reachable: !peers.is_empty(),
            borrowable,
            peer_modalities: peers
                .into_iter()
                .fold(ModalitySet::EMPTY, |acc, p| acc.union(topo.sensors(p))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRequest {
    pub latency_budget_s: f64,
    pub min_accuracy: f64,
    pub scenario: Scenario,
    pub snr_db: f64,
    pub local_sensors: ModalitySet,
    pub link_state: LinkState,
    /// Terminal asking; latency is planned on its behalf when set.
    pub terminal: Option<NodeId>,
}

impl SelectionRequest {
    pub fn for_terminal(
        topo: &Topology,
        t: NodeId,
        latency_budget_s: f64,
        min_accuracy: f64,
        scenario: Scenario,
        snr_db: f64,
    ) -> Self {
        SelectionRequest {
            latency_budget_s,
            min_accuracy,
            scenario,
            snr_db,
            local_sensors: topo.sensors(t),
            link_state: LinkState::of_terminal(topo, t),
            terminal: Some(t),
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.local_sensors.is_empty() {
            return Err(ControllerError::InvalidRequest("no local sensors".into()));
        }
        if !self.latency_budget_s.is_finite() || self.latency_budget_s <= 0.0 {
            return Err(ControllerError::InvalidRequest(format!(
                "latency budget must be positive and finite, got {}",
                self.latency_budget_s
            )));
        }
        if !(0.0..=1.0).contains(&self.min_accuracy) {
            return Err(ControllerError::InvalidRequest(format!(
                "accuracy floor must lie in [0, 1], got {}",
                self.min_accuracy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("no variant fits a {budget_s} s latency budget")]
    NoFeasibleMode { budget_s: f64 },
    #[error("invalid selection request: {0}")]
    InvalidRequest(String),
}

/// One scored candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub variant: ModeVariant,
    pub predicted_accuracy: f64,
    pub total_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub variant: ModeVariant,
    pub predicted_accuracy: f64,
    pub total_latency_s: f64,
    /// The accuracy floor had to be dropped.
    pub degraded: bool,
    /// Every latency-feasible candidate, best first.
    pub ranking: Vec<Candidate>,
}

impl Selection {
    /// `selected=..|degraded=0|ranking=V:acc:lat;V:acc:lat`
    pub fn detail(&self) -> String {
        let mut s = format!(
            "selected={}|degraded={}|ranking=",
            self.variant,
            u8::from(self.degraded)
        );
        for (i, c) in self.ranking.iter().enumerate() {
            if i > 0 {
                s.push(';');
            }
            let _ = write!(s, "{}:{:.6}:{:.6}", c.variant, c.predicted_accuracy, c.total_latency_s);
        }
        s
    }
}

pub fn feasible_variants(req: &SelectionRequest) -> BTreeSet<ModeVariant> {
    let ls = &req.link_state;
    ModeVariant::ALL
        .into_iter()
        .filter(|v| match v.mode() {
            Mode::Gfm => ls.cloud_reachable,
            Mode::Crm => {
                ls.edge_reachable && v.modalities().is_subset(req.local_sensors.union(ls.borrowable))
            }
            Mode::Pim => {
                ls.peers_reachable
                    && v.modalities().is_subset(req.local_sensors.union(ls.peer_modalities))
            }
        })
        .collect()
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.predicted_accuracy
        .total_cmp(&a.predicted_accuracy)
        .then(a.variant.communication_load_rank().cmp(&b.variant.communication_load_rank()))
        .then(a.total_latency_s.total_cmp(&b.total_latency_s))
        .then(a.variant.cmp(&b.variant))
}

/// Picks the most accurate feasible variant within the latency budget.
/// Variants whose flow cannot be planned on this topology are skipped.
pub fn select_mode(
    req: &SelectionRequest,
    topo: &Topology,
    table: &CalibrationTable,
    payloads: &Payloads,
) -> Result<Selection, ControllerError> {
    req.validate()?;
    let mut ranking: Vec<Candidate> = feasible_variants(req)
        .into_iter()
        .filter_map(|v| {
            let lat = total_latency_for(v, topo, table, payloads, req.terminal).ok()?;
            let acc = sensing_accuracy(v, req.scenario, req.snr_db, table).ok()?;
            (lat.total_s <= req.latency_budget_s).then_some(Candidate {
                variant: v,
                predicted_accuracy: acc,
                total_latency_s: lat.total_s,
            })
        })
        .collect();
    ranking.sort_by(rank);
    let best = ranking
        .iter()
        .find(|c| c.predicted_accuracy >= req.min_accuracy)
        .map(|c| (*c, false))
        .or_else(|| ranking.first().map(|c| (*c, true)));
    let Some((chosen, degraded)) = best else {
        return Err(ControllerError::NoFeasibleMode {
            budget_s: req.latency_budget_s,
        });
    };
    Ok(Selection {
        variant: chosen.variant,
        predicted_accuracy: chosen.predicted_accuracy,
        total_latency_s: chosen.total_latency_s,
        degraded,
        ranking,
    })
}
