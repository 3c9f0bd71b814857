use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ckcs_core::crypto::{self, KeyRole};
use ckcs_core::protocol::ProtocolId;
use ckcs_core::security::{audit_trace, AuditOptions};
use ckcs_core::sim::{self, random_scenario, Scenario, TraceShape};
use ckcs_core::tree::{Arity, KeyTree, MemberId, NodeCode, NodeId};

fn ids(n: u32) -> Vec<MemberId> {
    (1..=n).map(MemberId).collect()
}

fn protocol() -> impl Strategy<Value = ProtocolId> {
    prop::sample::select(ProtocolId::ALL.to_vec())
}

/// Subtree roots whose leaves are all staying and whose parent's are not.
fn brute_cover(tree: &KeyTree, leavers: &BTreeSet<MemberId>) -> BTreeSet<NodeId> {
    let clean = |id: NodeId| tree.leaves_under(id).iter().all(|m| !leavers.contains(m));
    tree.preorder()
        .into_iter()
        .filter(|&id| clean(id) && tree.parent(id).is_none_or(|p| !clean(p)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inserts_and_removals_keep_the_tree_consistent(
        n in 2u32..40,
        ternary in any::<bool>(),
        ops in prop::collection::vec((any::<bool>(), 1usize..6, any::<u64>()), 1..12),
        seed in any::<u64>(),
    ) {
        let arity = if ternary { Arity::Ternary } else { Arity::Binary };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut t = KeyTree::build_balanced(&ids(n), arity, None, &mut rng).unwrap();
        let mut next = n + 1;
        for (join, k, pick) in ops {
            if join {
                for _ in 0..k {
                    let at = t.insertion_point();
                    t.insert_member(at, MemberId(next), None).unwrap();
                    next += 1;
                }
            } else {
                let members: Vec<MemberId> = t.members().collect();
                let k = k.min(members.len() - 1);
                let leavers: Vec<MemberId> = (0..k).map(|i| members[(pick as usize + i * 7) % members.len()]).collect::<BTreeSet<_>>().into_iter().collect();
                t.remove_leaves(&leavers).unwrap();
            }
            prop_assert_eq!(t.check_structure(), Ok(()));
        }
    }

    #[test]
    fn cover_is_the_set_of_maximal_clean_subtrees(
        n in 2u32..48,
        ternary in any::<bool>(),
        mask in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let arity = if ternary { Arity::Ternary } else { Arity::Binary };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let t = KeyTree::build_balanced(&ids(n), arity, None, &mut rng).unwrap();
        let leavers: BTreeSet<MemberId> = t.members().filter(|m| mask >> (m.0 % 64) & 1 == 1).collect();
        prop_assume!(leavers.len() < n as usize);
        let cover = t.compute_cover(&leavers.iter().copied().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(cover.iter().copied().collect::<BTreeSet<_>>(), brute_cover(&t, &leavers));
        // the cover partitions the staying members
        let mut covered: Vec<MemberId> = cover.iter().flat_map(|&c| t.leaves_under(c)).collect();
        covered.sort();
        let staying: Vec<MemberId> = t.members().filter(|m| !leavers.contains(m)).collect::<BTreeSet<_>>().into_iter().collect();
        prop_assert_eq!(covered, staying);
    }

    #[test]
    fn attached_subtrees_extend_the_new_root_code(
        a in 1u32..20,
        b in 1u32..20,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let code = NodeCode::random(&mut rng, 8);
        let mut t = KeyTree::build_balanced(&ids(a), Arity::Binary, Some(code.clone()), &mut rng).unwrap();
        let inc: Vec<MemberId> = (a + 1..=a + b).map(MemberId).collect();
        let incoming = KeyTree::build_balanced(&inc, Arity::Binary, None, &mut rng).unwrap();
        t.attach_subtree(incoming, &mut rng).unwrap();
        prop_assert_eq!(t.check_structure(), Ok(()));
        let root_code = t.code(t.root()).cloned().unwrap();
        prop_assert!(root_code.is_prefix_of(&code));
        prop_assert_eq!(root_code.len() + 1, code.len());
        for id in t.preorder() {
            if let (Some(c), Some(p)) = (t.code(id), t.parent(id)) {
                let pc = t.code(p).unwrap();
                prop_assert!(pc.is_prefix_of(c) && pc.len() + 1 == c.len(), "{} under {}", c, pc);
            }
        }
    }

    #[test]
    fn wrap_round_trips_and_rejects_other_keys(a in any::<[u8; 32]>(), b in any::<[u8; 32]>(), c in any::<[u8; 32]>()) {
        prop_assume!(a != c);
        let (kek, payload, other) = (
            crypto::SymKey::new(a, KeyRole::Middle),
            crypto::SymKey::new(b, KeyRole::Group),
            crypto::SymKey::new(c, KeyRole::Middle),
        );
        let ct = crypto::wrap_bytes(&kek, &payload);
        prop_assert_eq!(crypto::unwrap_bytes(&kek, &ct, KeyRole::Group).unwrap(), payload);
        prop_assert!(crypto::unwrap_bytes(&other, &ct, KeyRole::Group).is_err());
    }

    #[test]
    fn scripts_round_trip(p in protocol(), seed in any::<u64>()) {
        let s = random_scenario(p, seed, TraceShape::default());
        prop_assert_eq!(Scenario::parse(&s.to_script()).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_traces_agree_probe_and_stay_secret(p in protocol(), seed in any::<u64>()) {
        let shape = TraceShape { max_n: 24, max_events: 5, max_batch: 8 };
        let s = random_scenario(p, seed, shape);
        let t = sim::run(&s).map_err(|e| TestCaseError::fail(format!("{}\n{e}", s.to_script())))?;
        prop_assert_eq!(t.events.len(), s.events.len());
        for f in audit_trace(&t, AuditOptions::default()) {
            prop_assert!(f.verdict.is_secure(), "{}\n{}", s.to_script(), f);
        }
        // fixed seed, same bytes
        prop_assert_eq!(sim::run(&s).unwrap().digest(), t.digest());
    }
}
