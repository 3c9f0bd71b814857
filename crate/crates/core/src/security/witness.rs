//! Derivation chains that explain how a key entered a closure, and their
//! re-execution with real crypto.

use std::collections::HashSet;
use std::fmt;

use crate::crypto::{self, KeyRole, SymKey};
use crate::error::{Error, Result};
use crate::protocol::{Label, WrappedKey};
use crate::security::closure::{Aux, Closure, Origin, Rule, Transcript};
use crate::tree::NodeCode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepInput {
    None,
    Payload(WrappedKey),
    Code(NodeCode),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WitnessStep {
    pub rule: Rule,
    pub inputs: Vec<SymKey>,
    pub extra: StepInput,
    pub output: SymKey,
    pub output_label: Label,
}

impl WitnessStep {
    /// Recomputes the output from the inputs.
    pub fn execute(&self) -> Result<SymKey> {
        let first = || self.inputs.first().copied().ok_or(Error::UnwrapFailed);
        Ok(match (self.rule, &self.extra) {
            (Rule::Unwrap, StepInput::Payload(p)) => p.open(&first()?)?,
            (Rule::HashForward | Rule::OkdDerive, _) => crypto::derive(&first()?),
            (Rule::CodeDerive, StepInput::Code(c)) => crypto::derive_with_code(&first()?, c)?,
            (Rule::OftBlind, _) => crypto::blind(&first()?),
            (Rule::OftMix, _) => match self.inputs.as_slice() {
                [l, r] => crypto::mix(l, r),
                _ => return Err(Error::UnwrapFailed),
            },
            _ => return Err(Error::UnwrapFailed),
        })
    }
}

impl fmt::Display for WitnessStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<_> = self.inputs.iter().map(|k| k.fingerprint()).collect();
        write!(f, "{}({}) -> {}", self.rule, ins.join(","), self.output.fingerprint())?;
        match &self.extra {
            StepInput::Payload(p) => write!(f, "  # {} from payload under {}", self.output_label, p.kek),
            StepInput::Code(c) => write!(f, "  # {} with code {c}", self.output_label),
            StepInput::None => write!(f, "  # {}", self.output_label),
        }
    }
}

/// Held keys the chain starts from, then rule applications in dependency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    pub held: Vec<(Label, SymKey)>,
    pub steps: Vec<WitnessStep>,
}

impl Witness {
    /// The chain that produced fact `target` of `closure`.
    pub fn extract(closure: &Closure, transcript: &Transcript, target: usize) -> Witness {
        let mut held = Vec::new();
        let mut steps = Vec::new();
        let mut seen = HashSet::new();
        visit(closure, transcript, target, &mut seen, &mut held, &mut steps);
        Witness { held, steps }
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .held
            .iter()
            .map(|(l, k)| format!("held() -> {}  # {l}", k.fingerprint()))
            .collect();
        out.extend(self.steps.iter().map(|s| s.to_string()));
        out
    }

    /// Re-executes every step. Inputs must be held keys (all of which must be
    /// in `knowledge`) or outputs of earlier steps. Returns the final key.
    pub fn replay(&self, knowledge: &HashSet<SymKey>) -> Result<SymKey> {
        let mut known: HashSet<SymKey> = HashSet::new();
        for (i, (l, k)) in self.held.iter().enumerate() {
            if !knowledge.contains(k) {
                return Err(Error::WitnessReplay {
                    step: i,
                    detail: format!("{l} = {} was never held", k.fingerprint()),
                });
            }
            known.insert(*k);
        }
        let mut last = self.held.last().map(|(_, k)| *k);
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(k) = s.inputs.iter().find(|k| !known.contains(k)) {
                return Err(Error::WitnessReplay {
                    step: i,
                    detail: format!("input {} is not known yet", k.fingerprint()),
                });
            }
            let out = s.execute().map_err(|e| Error::WitnessReplay {
                step: i,
                detail: e.to_string(),
            })?;
            if out != s.output {
                return Err(Error::WitnessReplay {
                    step: i,
                    detail: format!("recomputed {} but the chain says {}", out.fingerprint(), s.output.fingerprint()),
                });
            }
            known.insert(out);
            last = Some(out);
        }
        last.ok_or(Error::WitnessReplay {
            step: 0,
            detail: "empty witness".into(),
        })
    }
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in self.lines() {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

fn visit(
    c: &Closure,
    t: &Transcript,
    i: usize,
    seen: &mut HashSet<usize>,
    held: &mut Vec<(Label, SymKey)>,
    steps: &mut Vec<WitnessStep>,
) {
    if !seen.insert(i) {
        return;
    }
    let fact = &c.facts[i];
    match &fact.origin {
        Origin::Held => held.push((fact.label, fact.key)),
        Origin::Derived { rule, inputs, aux } => {
            for &j in inputs {
                visit(c, t, j, seen, held, steps);
            }
            let extra = match aux {
                Aux::None => StepInput::None,
                Aux::Payload(p) => StepInput::Payload(t.payloads[*p].clone()),
                Aux::Code(code) => StepInput::Code(code.clone()),
            };
            steps.push(WitnessStep {
                rule: *rule,
                inputs: inputs.iter().map(|&j| c.facts[j].key.with_role(KeyRole::Middle)).collect(),
                extra,
                output: fact.key,
                output_label: fact.label,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ProtocolId;
    use crate::tree::NodeId;

    #[test]
    fn chain_replays_and_detects_tampering() {
        let mut t = Transcript::empty(ProtocolId::Ckcs);
        t.chain_cap = 1;
        let gk = SymKey::new([5; 32], KeyRole::Group);
        let code: NodeCode = "2781".parse().unwrap();
        let cover = crypto::derive_with_code(&gk, &code).unwrap();
        let new_gk = SymKey::new([9; 32], KeyRole::Group);
        t.push(WrappedKey {
            kek: Label::Node(NodeId(4)),
            target: Label::Group,
            ciphertext: crypto::wrap_bytes(&cover, &new_gk),
        });
        let c = Closure::compute([(Label::Group, gk)], &[(NodeId(4), code)], &t);
        let target = c.find_bytes(&new_gk).expect("reachable");
        let w = Witness::extract(&c, &t, target);
        let lines = w.lines();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("code-derive("), "{lines:?}");
        assert!(lines[2].starts_with("unwrap("), "{lines:?}");
        let knowledge: HashSet<SymKey> = [gk].into();
        assert_eq!(w.replay(&knowledge).unwrap(), new_gk);

        assert!(w.replay(&HashSet::new()).is_err());
        let mut bad = w.clone();
        bad.steps[0].output = SymKey::new([1; 32], KeyRole::Middle);
        assert!(matches!(bad.replay(&knowledge), Err(Error::WitnessReplay { step: 0, .. })));
    }
}
