//! Placement of env, rollout and actor components onto device slots.
//!
//! * `Colocated`: every slot runs all three components; every slot is both a
//!   rollout worker and an actor rank.
//! * `Hybrid`: env and rollout share the rollout partition, the actor owns
//!   its own partition.
//! * `Disaggregated`: env, rollout (inference) and actor each get their own
//!   slots. The rollout partition is split evenly into env slots and
//!   inference slots, paired one to one.
//!
//! Slots that share work time-share the device: a component's effective cost
//! is its nominal cost times the number of resident components active at the
//! same time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("ratio {ratio} does not divide {slots} slots; nearest feasible split is {suggest}")]
    Indivisible {
        ratio: Ratio,
        slots: u32,
        suggest: String,
    },
    #[error("disaggregated placement needs an even rollout partition to pair env and inference slots, got {0}")]
    OddRollout(u32),
    #[error("invalid placement: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Colocated,
    Disaggregated,
    Hybrid,
}

impl FromStr for Strategy {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "colocated" => Ok(Self::Colocated),
            "disaggregated" => Ok(Self::Disaggregated),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(PlacementError::Invalid(format!(
                "unknown strategy {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Colocated => "colocated",
            Self::Disaggregated => "disaggregated",
            Self::Hybrid => "hybrid",
        })
    }
}

/// Rollout:actor resource ratio, written `R:A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub rollout: u32,
    pub actor: u32,
}

impl Ratio {
    pub fn new(rollout: u32, actor: u32) -> Self {
        Self { rollout, actor }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.rollout, self.actor)
    }
}

impl FromStr for Ratio {
    type Err = PlacementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlacementError::Invalid(format!("ratio {s:?} is not of the form R:A"));
        let (r, a) = s.split_once(':').ok_or_else(bad)?;
        let rollout = r.trim().parse().map_err(|_| bad())?;
        let actor = a.trim().parse().map_err(|_| bad())?;
        if rollout == 0 || actor == 0 {
            return Err(PlacementError::Invalid("ratio terms must be >= 1".into()));
        }
        Ok(Self { rollout, actor })
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Env,
    Rollout,
    Actor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// Handle passing inside one address space.
    InProc,
    /// Serialized over a byte stream.
    Wire,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSlot {
    pub id: u32,
    pub node: u32,
    /// Slot group; components in one group share memory.
    pub group: u32,
    pub residents: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementPlan {
    pub strategy: Strategy,
    pub slots_total: u32,
    pub ratio: Option<Ratio>,
    /// Slots in the rollout partition (env+inference for disaggregated).
    pub rollout_slots: u32,
    pub actor_slots: u32,
    pub env_collocated_with_rollout: bool,
    pub slots: Vec<DeviceSlot>,
}

fn nearest_split(slots: u32, ratio: Ratio) -> (u32, u32) {
    let exact = slots as f64 * ratio.rollout as f64 / (ratio.rollout + ratio.actor) as f64;
    let r = (exact.round() as u32).clamp(1, slots.saturating_sub(1).max(1));
    (r, slots - r)
}

/// Builds the slot assignment. `ratio` is ignored for `Colocated`.
pub fn plan_build(
    strategy: Strategy,
    slots_total: u32,
    ratio: Ratio,
) -> Result<PlacementPlan, PlacementError> {
    if slots_total == 0 {
        return Err(PlacementError::Invalid("slots_total must be >= 1".into()));
    }
    if strategy == Strategy::Colocated {
        let slots = (0..slots_total)
            .map(|id| DeviceSlot {
                id,
                node: 0,
                group: 0,
                residents: vec![Component::Env, Component::Rollout, Component::Actor],
            })
            .collect();
        return Ok(PlacementPlan {
            strategy,
            slots_total,
            ratio: None,
            rollout_slots: slots_total,
            actor_slots: slots_total,
            env_collocated_with_rollout: true,
            slots,
        });
    }
    let parts = ratio.rollout + ratio.actor;
    if ratio.rollout == 0 || ratio.actor == 0 || !slots_total.is_multiple_of(parts) {
        let (r, a) = nearest_split(slots_total, ratio);
        return Err(PlacementError::Indivisible {
            ratio,
            slots: slots_total,
            suggest: format!("{r}:{a} ({r} rollout, {a} actor slots)"),
        });
    }
    let rollout_slots = slots_total / parts * ratio.rollout;
    let actor_slots = slots_total - rollout_slots;
    let mut slots = Vec::with_capacity(slots_total as usize);
    match strategy {
        Strategy::Hybrid => {
            for id in 0..rollout_slots {
                slots.push(DeviceSlot {
                    id,
                    node: 0,
                    group: 0,
                    residents: vec![Component::Env, Component::Rollout],
                });
            }
        }
        Strategy::Disaggregated => {
            if !rollout_slots.is_multiple_of(2) {
                return Err(PlacementError::OddRollout(rollout_slots));
            }
            let half = rollout_slots / 2;
            for id in 0..rollout_slots {
                let (group, comp) = if id < half {
                    (0, Component::Env)
                } else {
                    (1, Component::Rollout)
                };
                slots.push(DeviceSlot {
                    id,
                    node: 0,
                    group,
                    residents: vec![comp],
                });
            }
        }
        Strategy::Colocated => unreachable!(),
    }
    let actor_group = if strategy == Strategy::Hybrid { 1 } else { 2 };
    for id in rollout_slots..slots_total {
        slots.push(DeviceSlot {
            id,
            node: 0,
            group: actor_group,
            residents: vec![Component::Actor],
        });
    }
    Ok(PlacementPlan {
        strategy,
        slots_total,
        ratio: Some(ratio),
        rollout_slots,
        actor_slots,
        env_collocated_with_rollout: strategy == Strategy::Hybrid,
        slots,
    })
}

impl PlacementPlan {
    /// Independent sampling loops (one env shard + one inference stream each).
    pub fn rollout_workers(&self) -> u32 {
        match self.strategy {
            Strategy::Disaggregated => self.rollout_slots / 2,
            _ => self.rollout_slots,
        }
    }

    /// Data-parallel learner ranks.
    pub fn actor_workers(&self) -> u32 {
        self.actor_slots
    }

    fn group_of(&self, c: Component) -> u32 {
        self.slots
            .iter()
            .find(|s| s.residents.contains(&c))
            .map(|s| s.group)
            .unwrap_or(0)
    }

    /// InProc iff both endpoints live in the same slot group.
    pub fn transport(&self, a: Component, b: Component) -> TransportKind {
        if self.group_of(a) == self.group_of(b) {
            TransportKind::InProc
        } else {
            TransportKind::Wire
        }
    }

    /// Number of resident components busy at the same time as `c`.
    ///
    /// `overlapping` is true when sampling and training run concurrently
    /// (pipelined mode); false for lock-step alternation.
    pub fn contention_factor(&self, c: Component, overlapping: bool) -> u32 {
        match self.strategy {
            Strategy::Colocated => match (overlapping, c) {
                (true, _) => 3,
                (false, Component::Actor) => 1,
                (false, _) => 2,
            },
            Strategy::Hybrid => match c {
                Component::Actor => 1,
                _ => 2,
            },
            Strategy::Disaggregated => 1,
        }
    }

    /// Slot ids per partition, for tests and the printable table.
    pub fn slots_with(&self, c: Component) -> Vec<u32> {
        self.slots
            .iter()
            .filter(|s| s.residents.contains(&c))
            .map(|s| s.id)
            .collect()
    }
}

/// `nominal × factor`.
pub fn contention_cost(nominal: f64, factor: u32) -> f64 {
    nominal * factor as f64
}

impl fmt::Display for PlacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = self
            .ratio
            .map(|r| r.to_string())
            .unwrap_or_else(|| "-".into());
        writeln!(
            f,
            "strategy {}  slots {}  ratio {}  rollout workers {}  actor ranks {}",
            self.strategy,
            self.slots_total,
            ratio,
            self.rollout_workers(),
            self.actor_workers()
        )?;
        writeln!(f, "{:>4}  {:>4}  {:>5}  residents", "slot", "node", "group")?;
        for s in &self.slots {
            let names: Vec<&str> = s
                .residents
                .iter()
                .map(|c| match c {
                    Component::Env => "env",
                    Component::Rollout => "rollout",
                    Component::Actor => "actor",
                })
                .collect();
            writeln!(
                f,
                "{:>4}  {:>4}  {:>5}  {}",
                s.id,
                s.node,
                s.group,
                names.join("+")
            )?;
        }
        let edges = [
            ("env-rollout", Component::Env, Component::Rollout),
            ("rollout-actor", Component::Rollout, Component::Actor),
        ];
        for (name, a, b) in edges {
            writeln!(f, "edge {name}: {:?}", self.transport(a, b))?;
        }
        Ok(())
    }
}

/// Latency/bandwidth of a link. `bandwidth_bps = None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkProfile {
    pub latency_us: f64,
    pub bandwidth_bps: Option<f64>,
}

impl LinkProfile {
    pub fn unlimited() -> Self {
        Self::default()
    }

    /// Delivery delay `latency + bytes / bandwidth`, rounded up to whole ns.
    pub fn delay_ns(&self, bytes: u64) -> u64 {
        let transfer = match self.bandwidth_bps {
            Some(bw) if bw > 0.0 => bytes as f64 * 1e9 / bw,
            _ => 0.0,
        };
        (self.latency_us * 1e3 + transfer).ceil() as u64
    }
}

/// Per-node plans replicated across nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: u32,
    pub plan: PlacementPlan,
    pub link: LinkProfile,
}

impl Topology {
    /// Slot list of node `n`.
    pub fn node_slots(&self, n: u32) -> Vec<DeviceSlot> {
        self.plan
            .slots
            .iter()
            .map(|s| DeviceSlot {
                node: n,
                ..s.clone()
            })
            .collect()
    }
}

pub fn replicate(
    plan: &PlacementPlan,
    nodes: u32,
    link: LinkProfile,
) -> Result<Topology, PlacementError> {
    if nodes == 0 {
        return Err(PlacementError::Invalid("nodes must be >= 1".into()));
    }
    if link.latency_us < 0.0 || matches!(link.bandwidth_bps, Some(b) if b < 0.0) {
        return Err(PlacementError::Invalid(
            "link profile values must be >= 0".into(),
        ));
    }
    Ok(Topology {
        nodes,
        plan: plan.clone(),
        link,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hybrid_one_to_one() {
        let p = plan_build(Strategy::Hybrid, 8, Ratio::new(1, 1)).unwrap();
        assert_eq!((p.rollout_slots, p.actor_slots), (4, 4));
        assert_eq!(
            p.transport(Component::Rollout, Component::Actor),
            TransportKind::Wire
        );
        assert_eq!(
            p.transport(Component::Env, Component::Rollout),
            TransportKind::InProc
        );
        assert_eq!(p.slots_with(Component::Env), vec![0, 1, 2, 3]);
        assert_eq!(p.slots_with(Component::Actor), vec![4, 5, 6, 7]);
    }

    #[test]
    fn disaggregated_three_to_one() {
        let p = plan_build(Strategy::Disaggregated, 8, Ratio::new(3, 1)).unwrap();
        assert_eq!((p.rollout_slots, p.actor_slots), (6, 2));
        assert_eq!(p.rollout_workers(), 3);
        assert_eq!(
            p.transport(Component::Env, Component::Rollout),
            TransportKind::Wire
        );
    }

    #[test]
    fn colocated_is_all_inproc() {
        let p = plan_build(Strategy::Colocated, 8, Ratio::new(1, 1)).unwrap();
        assert!(p.slots.iter().all(|s| s.residents.len() == 3));
        for (a, b) in [
            (Component::Env, Component::Rollout),
            (Component::Rollout, Component::Actor),
        ] {
            assert_eq!(p.transport(a, b), TransportKind::InProc);
        }
        assert_eq!(p.contention_factor(Component::Actor, true), 3);
    }

    #[test]
    fn indivisible_ratio_suggests_split() {
        let err = plan_build(Strategy::Hybrid, 8, Ratio::new(2, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("5:3"), "{msg}");
    }

    #[test]
    fn contention_examples() {
        let h = plan_build(Strategy::Hybrid, 8, Ratio::new(1, 1)).unwrap();
        assert_eq!(
            contention_cost(5.0, h.contention_factor(Component::Rollout, true)),
            10.0
        );
        assert_eq!(
            contention_cost(5.0, h.contention_factor(Component::Actor, true)),
            5.0
        );
        assert_eq!(contention_cost(5.0, 1), 5.0);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("3:1".parse::<Ratio>().unwrap(), Ratio::new(3, 1));
        assert!("3-1".parse::<Ratio>().is_err());
        assert!("0:1".parse::<Ratio>().is_err());
    }

    #[test]
    fn link_delay_is_exact() {
        let l = LinkProfile {
            latency_us: 100.0,
            bandwidth_bps: Some(100e6),
        };
        assert_eq!(l.delay_ns(1_000_000), 10_100_000);
        assert_eq!(LinkProfile::unlimited().delay_ns(1 << 30), 0);
    }

    #[test]
    fn replicate_single_node_is_the_plan() {
        let p = plan_build(Strategy::Hybrid, 4, Ratio::new(1, 1)).unwrap();
        let t = replicate(&p, 1, LinkProfile::unlimited()).unwrap();
        assert_eq!(t.plan, p);
        assert_eq!(t.node_slots(0), p.slots);
        let t4 = replicate(&p, 4, LinkProfile::unlimited()).unwrap();
        assert!(t4.node_slots(3).iter().all(|s| s.node == 3));
        assert!(replicate(&p, 0, LinkProfile::unlimited()).is_err());
    }
}
