//! Seeded random scenarios for property checks.

use rand::Rng;

use crate::protocol::ProtocolId;
use crate::sim::run::stream;
use crate::sim::scenario::{Layout, Scenario, ScriptEvent};

const STREAM_SCRIPT: u64 = 7;

/// Bounds for [`random_scenario`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceShape {
    pub max_n: usize,
    pub max_events: usize,
    pub max_batch: usize,
}

impl Default for TraceShape {
    fn default() -> Self {
        Self {
            max_n: 64,
            max_events: 8,
            max_batch: 24,
        }
    }
}

/// A valid script for any protocol: group size stays within `1..=max_n`,
/// leaves never empty the group, and best-half is only used where it is
/// feasible for ternary trees too (`m <= n / 3`).
pub fn random_scenario(protocol: ProtocolId, seed: u64, shape: TraceShape) -> Scenario {
    let mut rng = stream(seed, STREAM_SCRIPT);
    let mut n = rng.gen_range(1..=shape.max_n);
    let mut s = Scenario::new(protocol, n, seed);
    let events = rng.gen_range(1..=shape.max_events);
    for _ in 0..events {
        let can_join = n < shape.max_n;
        let can_leave = n > 1;
        let join = can_join && (!can_leave || rng.gen_bool(0.5));
        if join {
            let m = rng.gen_range(1..=shape.max_batch.min(shape.max_n - n));
            s.events.push(ScriptEvent::Join(m));
            n += m;
        } else if can_leave {
            let m = rng.gen_range(1..=shape.max_batch.min(n - 1));
            let layout = match rng.gen_range(0..3) {
                0 if m <= n / 3 => Layout::BestHalf,
                1 => Layout::WorstSpread,
                _ => Layout::Random,
            };
            s.events.push(ScriptEvent::Leave { m, layout });
            n -= m;
        }
    }
    s
}

/// `count` scripts, each run under every protocol: `count * 4` scenarios.
pub fn corpus(count: usize, base_seed: u64, shape: TraceShape) -> Vec<Scenario> {
    (0..count as u64)
        .flat_map(|i| {
            let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(i);
            ProtocolId::ALL.map(|p| random_scenario(p, seed, shape))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripts_stay_in_bounds() {
        let shape = TraceShape::default();
        for seed in 0..300 {
            let s = random_scenario(ProtocolId::Okd, seed, shape);
            let mut n = s.n0;
            assert!((1..=64).contains(&n));
            assert!(!s.events.is_empty() && s.events.len() <= 8);
            for e in &s.events {
                match e {
                    ScriptEvent::Join(m) => n += m,
                    ScriptEvent::Leave { m, layout } => {
                        assert!(*m < n);
                        if *layout == Layout::BestHalf {
                            assert!(*m <= n / 3);
                        }
                        n -= m;
                    }
                    ScriptEvent::LeaveIds(_) => unreachable!(),
                }
                assert!((1..=64).contains(&n));
            }
        }
    }

    #[test]
    fn corpus_shares_scripts_across_protocols() {
        let c = corpus(3, 7, TraceShape::default());
        assert_eq!(c.len(), 12);
        assert_eq!(c[0].events, c[3].events);
        assert_ne!(c[0].protocol, c[1].protocol);
    }
}
