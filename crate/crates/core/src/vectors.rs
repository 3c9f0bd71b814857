//! Known-answer tests for the crypto primitives.
//!
//! The shipped file was produced with an independent implementation
//! (Python `hashlib` and an RFC 3394 key wrap). Line format:
//! `function, input..., output`, all hex except the digit code of
//! `derive_with_code`.

use crate::crypto::{self, KeyRole, SymKey};
use crate::error::{Error, Result};
use crate::tree::NodeCode;

pub const GOLDEN: &str = include_str!("../data/golden_vectors.txt");

/// Checks every vector in `text`; returns how many were checked.
pub fn verify(text: &str) -> Result<usize> {
    let mut checked = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        let function = fields[0].to_string();
        let fail = |detail: String| Error::Vector {
            line,
            function: function.clone(),
            detail,
        };
        let key = |s: &str| SymKey::from_hex(s, KeyRole::Middle).map_err(|e| fail(e.to_string()));
        let (got, want) = match (function.as_str(), &fields[1..]) {
            ("derive", [k, out]) => (crypto::derive(&key(k)?).to_hex(), *out),
            ("blind", [k, out]) => (crypto::blind(&key(k)?).to_hex(), *out),
            ("mix", [l, r, out]) => (crypto::mix(&key(l)?, &key(r)?).to_hex(), *out),
            ("derive_with_code", [k, code, out]) => {
                let code: NodeCode = code.parse().map_err(|e: Error| fail(e.to_string()))?;
                let k = crypto::derive_with_code(&key(k)?, &code).map_err(|e| fail(e.to_string()))?;
                (k.to_hex(), *out)
            }
            ("wrap", [kek, payload, out]) => {
                let ct = crypto::wrap_bytes(&key(kek)?, &key(payload)?);
                let back = crypto::unwrap_bytes(&key(kek)?, &ct, KeyRole::Middle).map_err(|e| fail(e.to_string()))?;
                if back != key(payload)? {
                    return Err(fail("unwrap does not invert wrap".into()));
                }
                (hex::encode(ct), *out)
            }
            _ => return Err(fail(format!("unrecognised line with {} fields", fields.len()))),
        };
        if !got.eq_ignore_ascii_case(want) {
            return Err(fail(format!("expected {want}, computed {got}")));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Checks the shipped vectors.
pub fn verify_golden() -> Result<usize> {
    verify(GOLDEN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_vectors_pass() {
        assert_eq!(verify_golden().unwrap(), 9);
    }

    #[test]
    fn corrupted_vector_is_reported_with_its_line() {
        let bad = GOLDEN.replacen("1a7dfdea", "1a7dfdeb", 1);
        match verify(&bad) {
            Err(Error::Vector { line, function, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(function, "derive");
            }
            other => panic!("{other:?}"),
        }
        assert!(verify("frobnicate, 00\n").is_err());
    }
}
