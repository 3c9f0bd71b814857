//! Knowledge closure under the protocol's derivation rules.
//!
//! Facts are `(label, key bytes)` pairs. The closure is computed with a
//! worklist: each new fact is pushed through every rule once. Chains of
//! `derive` (CKCS hash-forward, OKD derive) are capped because epochs are
//! finite; a fact rediscovered by a shorter chain is processed again.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use crate::crypto::{self, SymKey};
use crate::protocol::{Label, Notice, ProtocolId, WrappedKey};
use crate::sim::TraceRecord;
use crate::tree::{NodeCode, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    Unwrap,
    HashForward,
    CodeDerive,
    OftBlind,
    OftMix,
    OkdDerive,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::Unwrap => "unwrap",
            Rule::HashForward => "hash-forward",
            Rule::CodeDerive => "code-derive",
            Rule::OftBlind => "oft-blind",
            Rule::OftMix => "oft-mix",
            Rule::OkdDerive => "okd-derive",
        }
    }

    pub fn for_protocol(p: ProtocolId) -> &'static [Rule] {
        match p {
            ProtocolId::Ckcs => &[Rule::Unwrap, Rule::HashForward, Rule::CodeDerive],
            ProtocolId::Lkh => &[Rule::Unwrap],
            ProtocolId::Oft => &[Rule::Unwrap, Rule::OftBlind, Rule::OftMix],
            ProtocolId::Okd => &[Rule::Unwrap, Rule::OkdDerive],
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Rule input that is not a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Aux {
    None,
    Payload(usize),
    Code(NodeCode),
}

/// Everything public about a trace plus the rule set to apply.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub protocol: ProtocolId,
    pub payloads: Vec<WrappedKey>,
    pub by_kek: HashMap<Label, Vec<usize>>,
    /// `(parent, left, right)` of every binary node in any published shape.
    pub triples: BTreeSet<(NodeId, NodeId, NodeId)>,
    /// `(target, source)` of every OKD derive notice.
    pub derive_pairs: BTreeSet<(NodeId, NodeId)>,
    /// Longest useful `derive` chain.
    pub chain_cap: u32,
    /// Node keys that existed during the run. When set, `oft-mix` outputs
    /// outside it are dropped: mixing versions from different epochs gives
    /// values that open nothing, and their number grows with every level.
    pub real_keys: Option<HashSet<SymKey>>,
    unwraps: RefCell<UnwrapCache>,
}

/// Trial-decryption results shared by every closure over one transcript.
/// A payload has exactly one key that opens it, so once that key is found
/// other keys are rejected by comparison.
#[derive(Debug, Clone, Default)]
struct UnwrapCache {
    opener: HashMap<usize, (SymKey, SymKey)>,
    failed: HashSet<(usize, SymKey)>,
}

impl Transcript {
    pub fn empty(protocol: ProtocolId) -> Self {
        Self {
            protocol,
            payloads: Vec::new(),
            by_kek: HashMap::new(),
            triples: BTreeSet::new(),
            derive_pairs: BTreeSet::new(),
            chain_cap: 0,
            real_keys: None,
            unwraps: RefCell::default(),
        }
    }

    /// Adds a payload to the transcript.
    pub fn push(&mut self, p: WrappedKey) {
        self.by_kek.entry(p.kek).or_default().push(self.payloads.len());
        self.payloads.push(p);
    }

    /// `payloads[p].open(key)`, memoised.
    pub fn open(&self, p: usize, key: &SymKey) -> Option<SymKey> {
        let mut cache = self.unwraps.borrow_mut();
        if let Some((kek, out)) = cache.opener.get(&p) {
            return (kek == key).then_some(*out);
        }
        if cache.failed.contains(&(p, *key)) {
            return None;
        }
        match self.payloads[p].open(key) {
            Ok(out) => {
                cache.opener.insert(p, (*key, out));
                cache.failed.retain(|(q, _)| *q != p);
                Some(out)
            }
            Err(_) => {
                cache.failed.insert((p, *key));
                None
            }
        }
    }

    pub fn of(trace: &TraceRecord) -> Self {
        let mut t = Self::empty(trace.scenario.protocol);
        t.triples.extend(trace.triples.iter().copied());
        if trace.scenario.protocol == ProtocolId::Oft {
            let mut real: HashSet<SymKey> = trace.epoch_keys().into_iter().collect();
            for h in trace.members.values() {
                real.extend(h.keys.iter().filter(|(l, _)| matches!(l, Label::Node(_))).map(|(_, k)| *k));
            }
            t.real_keys = Some(real);
        }
        let mut derive_notices = 0;
        for step in trace.steps() {
            for p in step.payloads() {
                t.push(p.clone());
            }
            if let Some(Notice::Derive { pairs }) = &step.notice {
                derive_notices += 1;
                t.derive_pairs.extend(pairs.iter().copied());
            }
        }
        t.chain_cap = match t.protocol {
            ProtocolId::Okd => derive_notices,
            _ => trace.events.len() as u32,
        };
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Held,
    Derived { rule: Rule, inputs: Vec<usize>, aux: Aux },
}

#[derive(Debug, Clone)]
pub struct Fact {
    pub label: Label,
    pub key: SymKey,
    /// Consecutive `derive` applications that produced this fact.
    pub chain: u32,
    pub origin: Origin,
}

/// A closed knowledge set.
#[derive(Debug, Clone)]
pub struct Closure {
    pub facts: Vec<Fact>,
    index: HashMap<(Label, SymKey), usize>,
    by_label: HashMap<Label, Vec<usize>>,
}

struct Engine<'a> {
    t: &'a Transcript,
    codes: &'a [(NodeId, NodeCode)],
    rules: &'a [Rule],
    triples_by_child: HashMap<NodeId, Vec<(NodeId, NodeId, NodeId)>>,
    pairs_by_source: HashMap<NodeId, Vec<NodeId>>,
    c: Closure,
    work: Vec<usize>,
}

impl Engine<'_> {
    fn add(&mut self, label: Label, key: SymKey, chain: u32, origin: Origin) {
        match self.c.index.get(&(label, key)).copied() {
            Some(i) => {
                if chain < self.c.facts[i].chain {
                    self.c.facts[i].chain = chain;
                    self.c.facts[i].origin = origin;
                    self.work.push(i);
                }
            }
            None => {
                let i = self.c.facts.len();
                self.c.facts.push(Fact {
                    label,
                    key,
                    chain,
                    origin,
                });
                self.c.index.insert((label, key), i);
                self.c.by_label.entry(label).or_default().push(i);
                self.work.push(i);
            }
        }
    }

    fn has(&self, r: Rule) -> bool {
        self.rules.contains(&r)
    }

    fn step(&mut self, i: usize) {
        let Fact { label, key, chain, .. } = self.c.facts[i].clone();
        let (t, codes) = (self.t, self.codes);
        let derived = |rule, aux| Origin::Derived {
            rule,
            inputs: vec![i],
            aux,
        };

        if self.has(Rule::Unwrap) {
            for &p in t.by_kek.get(&label).map(Vec::as_slice).unwrap_or(&[]) {
                if let Some(k) = t.open(p, &key) {
                    self.add(t.payloads[p].target, k, 0, derived(Rule::Unwrap, Aux::Payload(p)));
                }
            }
        }
        if label == Label::Group && self.has(Rule::HashForward) && chain < self.t.chain_cap {
            self.add(Label::Group, crypto::derive(&key), chain + 1, derived(Rule::HashForward, Aux::None));
        }
        if label == Label::Group && self.has(Rule::CodeDerive) {
            for (id, code) in codes {
                if let Ok(k) = crypto::derive_with_code(&key, code) {
                    self.add(Label::Node(*id), k, 0, derived(Rule::CodeDerive, Aux::Code(code.clone())));
                }
            }
        }
        if let Label::Node(id) = label {
            if self.has(Rule::OftBlind) {
                self.add(Label::Blinded(id), crypto::blind(&key), 0, derived(Rule::OftBlind, Aux::None));
            }
            if self.has(Rule::OkdDerive) && chain < self.t.chain_cap {
                for &target in self.pairs_by_source.get(&id).cloned().unwrap_or_default().iter() {
                    self.add(Label::Node(target), crypto::derive(&key), chain + 1, derived(Rule::OkdDerive, Aux::None));
                }
            }
        }
        if let (Label::Blinded(x), true) = (label, self.has(Rule::OftMix)) {
            for (p, l, r) in self.triples_by_child.get(&x).cloned().unwrap_or_default() {
                let other = if l == x { r } else { l };
                let partners = self.c.by_label.get(&Label::Blinded(other)).cloned().unwrap_or_default();
                for j in partners {
                    let (li, ri) = if l == x { (i, j) } else { (j, i) };
                    let k = crypto::mix(&self.c.facts[li].key, &self.c.facts[ri].key);
                    if t.real_keys.as_ref().is_some_and(|real| !real.contains(&k)) {
                        continue;
                    }
                    self.add(
                        Label::Node(p),
                        k,
                        0,
                        Origin::Derived {
                            rule: Rule::OftMix,
                            inputs: vec![li, ri],
                            aux: Aux::None,
                        },
                    );
                }
            }
        }
    }
}

impl Closure {
    /// Least fixed point of `held` under the protocol's rules and `t`.
    /// `codes` are the node codes the adversary knows.
    pub fn compute(
        held: impl IntoIterator<Item = (Label, SymKey)>,
        codes: &[(NodeId, NodeCode)],
        t: &Transcript,
    ) -> Closure {
        Self::compute_with(held, codes, t, Rule::for_protocol(t.protocol))
    }

    pub fn compute_with(
        held: impl IntoIterator<Item = (Label, SymKey)>,
        codes: &[(NodeId, NodeCode)],
        t: &Transcript,
        rules: &[Rule],
    ) -> Closure {
        let mut triples_by_child: HashMap<NodeId, Vec<_>> = HashMap::new();
        for &(p, l, r) in &t.triples {
            triples_by_child.entry(l).or_default().push((p, l, r));
            triples_by_child.entry(r).or_default().push((p, l, r));
        }
        let mut pairs_by_source: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for &(target, source) in &t.derive_pairs {
            pairs_by_source.entry(source).or_default().push(target);
        }
        let mut e = Engine {
            t,
            codes,
            rules,
            triples_by_child,
            pairs_by_source,
            c: Closure {
                facts: Vec::new(),
                index: HashMap::new(),
                by_label: HashMap::new(),
            },
            work: Vec::new(),
        };
        for (label, key) in held {
            e.add(label, key, 0, Origin::Held);
        }
        while let Some(i) = e.work.pop() {
            e.step(i);
        }
        e.c
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn contains(&self, label: Label, key: &SymKey) -> bool {
        self.index.contains_key(&(label, *key))
    }

    /// First fact whose bytes equal `key`, under any label.
    pub fn find_bytes(&self, key: &SymKey) -> Option<usize> {
        self.facts.iter().position(|f| f.key == *key)
    }

    pub fn key_set(&self) -> HashSet<SymKey> {
        self.facts.iter().map(|f| f.key).collect()
    }
}
