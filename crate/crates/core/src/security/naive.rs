//! Brute-force reference closure for small traces.
//!
//! Applies every rule to every known fact in rounds until nothing changes.
//! Unlike [`Closure`](super::Closure) it ignores labels when unwrapping:
//! every known key is tried against every payload.

use std::collections::{HashMap, HashSet};

use crate::crypto::{self, SymKey};
use crate::protocol::Label;
use crate::security::closure::{Rule, Transcript};
use crate::tree::{NodeCode, NodeId};

pub fn naive_closure(
    held: impl IntoIterator<Item = (Label, SymKey)>,
    codes: &[(NodeId, NodeCode)],
    t: &Transcript,
) -> HashSet<SymKey> {
    let rules = Rule::for_protocol(t.protocol);
    let has = |r| rules.contains(&r);
    // (label, key) -> shortest derive chain seen
    let mut facts: HashMap<(Label, SymKey), u32> = held.into_iter().map(|f| (f, 0)).collect();
    loop {
        let mut new: Vec<((Label, SymKey), u32)> = Vec::new();
        for (&(label, key), &chain) in &facts {
            if has(Rule::Unwrap) {
                for p in &t.payloads {
                    if let Ok(k) = p.open(&key) {
                        new.push(((p.target, k), 0));
                    }
                }
            }
            if label == Label::Group && has(Rule::HashForward) && chain < t.chain_cap {
                new.push(((Label::Group, crypto::derive(&key)), chain + 1));
            }
            if label == Label::Group && has(Rule::CodeDerive) {
                for (id, code) in codes {
                    if let Ok(k) = crypto::derive_with_code(&key, code) {
                        new.push(((Label::Node(*id), k), 0));
                    }
                }
            }
            if let Label::Node(id) = label {
                if has(Rule::OftBlind) {
                    new.push(((Label::Blinded(id), crypto::blind(&key)), 0));
                }
                if has(Rule::OkdDerive) && chain < t.chain_cap {
                    for &(target, source) in &t.derive_pairs {
                        if source == id {
                            new.push(((Label::Node(target), crypto::derive(&key)), chain + 1));
                        }
                    }
                }
            }
        }
        if has(Rule::OftMix) {
            for &(p, l, r) in &t.triples {
                for (&(la, a), _) in facts.iter().filter(|((lab, _), _)| *lab == Label::Blinded(l)) {
                    for (&(_, b), _) in facts.iter().filter(|((lab, _), _)| *lab == Label::Blinded(r)) {
                        debug_assert_eq!(la, Label::Blinded(l));
                        new.push(((Label::Node(p), crypto::mix(&a, &b)), 0));
                    }
                }
            }
        }
        let mut changed = false;
        for (f, chain) in new {
            match facts.get_mut(&f) {
                Some(c) if *c <= chain => {}
                Some(c) => {
                    *c = chain;
                    changed = true;
                }
                None => {
                    facts.insert(f, chain);
                    changed = true;
                }
            }
        }
        if !changed {
            return facts.into_keys().map(|(_, k)| k).collect();
        }
    }
}
