//! Secrecy checking by knowledge closure.
//!
//! An adversary starts from every key and code some member ever held, sees
//! the full transcript of wrapped keys, and applies the protocol's public
//! derivations until nothing new appears. Forward secrecy fails if a leaver
//! reaches a later group key, backward secrecy if a joiner reaches an
//! earlier one. There is no rule that inverts `derive`, `blind` or `mix`.

pub mod audit;
pub mod closure;
pub mod naive;
pub mod witness;

pub use audit::{
    audit_many, audit_scenarios, audit_trace, check_backward_secrecy, check_forward_secrecy, Adversary, AuditOptions,
    AuditSummary, Breach, CodeMode, Finding, Secrecy, Verdict,
};
pub use closure::{Closure, Rule, Transcript};
pub use naive::naive_closure;
pub use witness::{Witness, WitnessStep};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ProtocolId;
    use crate::sim::{run, Layout, Scenario, ScriptEvent};
    use crate::tree::MemberId;

    fn churn(p: ProtocolId) -> Scenario {
        Scenario::new(p, 10, 3)
            .with(ScriptEvent::Leave { m: 3, layout: Layout::WorstSpread })
            .with(ScriptEvent::Join(5))
            .with(ScriptEvent::Leave { m: 4, layout: Layout::Random })
            .with(ScriptEvent::Join(2))
    }

    #[test]
    fn every_protocol_is_secure_by_default() {
        for p in ProtocolId::ALL {
            let t = run(&churn(p)).unwrap();
            let findings = audit_trace(&t, AuditOptions::default());
            assert_eq!(findings.len(), 7 + 7, "{p}");
            for f in &findings {
                assert!(f.verdict.is_secure(), "{p}: {f}");
            }
        }
    }

    #[test]
    fn public_codes_break_ckcs_forward_secrecy() {
        let t = run(&churn(ProtocolId::Ckcs)).unwrap();
        let opts = AuditOptions {
            codes: CodeMode::Public,
            ..Default::default()
        };
        let breaches: Vec<_> = audit_trace(&t, opts)
            .into_iter()
            .filter_map(|f| match f.verdict {
                Verdict::Breach(b) => Some((f.kind, b)),
                Verdict::Secure => None,
            })
            .collect();
        assert!(!breaches.is_empty());
        for (kind, b) in &breaches {
            assert_eq!(*kind, Secrecy::Forward);
            assert!(b.replayed);
            assert!(b.witness.steps.iter().any(|s| s.rule == Rule::CodeDerive));
        }
    }

    #[test]
    fn naive_oracle_agrees_on_small_traces() {
        for p in ProtocolId::ALL {
            let t = run(&churn(p)).unwrap();
            let pruned = Transcript::of(&t);
            let mut full = pruned.clone();
            full.real_keys = None;
            for m in t.members.keys() {
                let a = Adversary::of(&t, &[*m]);
                let codes: Vec<_> = a.codes.iter().cloned().collect();
                let fast = Closure::compute(a.keys.iter().copied(), &codes, &full).key_set();
                let slow = naive_closure(a.keys.iter().copied(), &codes, &full);
                assert_eq!(fast, slow, "{p} {m}");
                if let Some(real) = &pruned.real_keys {
                    let kept = Closure::compute(a.keys.iter().copied(), &codes, &pruned).key_set();
                    assert!(kept.is_subset(&slow));
                    let lost: Vec<_> = slow.intersection(real).filter(|k| !kept.contains(*k)).collect();
                    assert!(lost.is_empty(), "{p} {m}: pruning lost {} real keys", lost.len());
                }
            }
        }
    }

    #[test]
    fn single_epoch_is_vacuously_secure() {
        let t = run(&Scenario::new(ProtocolId::Ckcs, 4, 1)).unwrap();
        assert!(audit_trace(&t, AuditOptions::default()).is_empty());
        assert!(check_backward_secrecy(&t, MemberId(1), CodeMode::Secret).is_secure());
    }

    #[test]
    fn collusion_mode_adds_coalition_checks() {
        let t = run(&churn(ProtocolId::Ckcs)).unwrap();
        let opts = AuditOptions {
            collusion: true,
            ..Default::default()
        };
        let f = audit_trace(&t, opts);
        assert_eq!(f.len(), 14 + 2);
        assert!(f.iter().all(|f| f.verdict.is_secure()));
    }
}
