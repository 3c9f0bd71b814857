//! Scenario scripts.
//!
//! ```text
//! # comment
//! init n=8 protocol=ckcs seed=1 [root_code=278]
//! join 3
//! leave 2 layout=worst-spread
//! leave ids=u1,u4,u8
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::protocol::ProtocolId;
use crate::tree::{MemberId, NodeCode};

/// How leavers are picked for `leave <m>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layout {
    /// Uniform without replacement.
    Random,
    /// All leavers under one child of the root: the smallest possible cover.
    BestHalf,
    /// Leavers evenly strided across the leaves: a large cover.
    WorstSpread,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Random, Layout::BestHalf, Layout::WorstSpread];

    pub fn as_str(self) -> &'static str {
        match self {
            Layout::Random => "random",
            Layout::BestHalf => "best-half",
            Layout::WorstSpread => "worst-spread",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "random" => Ok(Layout::Random),
            "best-half" => Ok(Layout::BestHalf),
            "worst-spread" => Ok(Layout::WorstSpread),
            other => Err(format!("unknown layout {other:?} (expected random, best-half or worst-spread)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptEvent {
    Join(usize),
    Leave { m: usize, layout: Layout },
    LeaveIds(Vec<MemberId>),
}

impl fmt::Display for ScriptEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptEvent::Join(m) => write!(f, "join {m}"),
            ScriptEvent::Leave { m, layout } => write!(f, "leave {m} layout={layout}"),
            ScriptEvent::LeaveIds(ids) => {
                let ids: Vec<_> = ids.iter().map(|m| m.to_string()).collect();
                write!(f, "leave ids={}", ids.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub protocol: ProtocolId,
    pub n0: usize,
    pub seed: u64,
    pub root_code: Option<NodeCode>,
    pub events: Vec<ScriptEvent>,
}

impl Scenario {
    pub fn new(protocol: ProtocolId, n0: usize, seed: u64) -> Self {
        Self {
            protocol,
            n0,
            seed,
            root_code: None,
            events: Vec::new(),
        }
    }

    pub fn with(mut self, event: ScriptEvent) -> Self {
        self.events.push(event);
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scenario: Option<Scenario> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |msg: String| Error::Scenario { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let head = words.next().expect("non-empty line");
            let rest: Vec<&str> = words.collect();
            match (head, scenario.as_mut()) {
                ("init", None) => scenario = Some(parse_init(&rest).map_err(err)?),
                ("init", Some(_)) => return Err(err("duplicate init line".into())),
                (_, None) => return Err(err("the first line must be `init`".into())),
                ("join", Some(s)) => {
                    let m = match rest.as_slice() {
                        [m] => parse_count(m).map_err(err)?,
                        _ => return Err(err("expected `join <m>`".into())),
                    };
                    s.events.push(ScriptEvent::Join(m));
                }
                ("leave", Some(s)) => s.events.push(parse_leave(&rest).map_err(err)?),
                (other, Some(_)) => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        scenario.ok_or(Error::Scenario {
            line: 0,
            msg: "missing `init` line".into(),
        })
    }

    /// Canonical script text; parses back to `self`.
    pub fn to_script(&self) -> String {
        let mut s = format!("init n={} protocol={} seed={}", self.n0, self.protocol, self.seed);
        if let Some(c) = &self.root_code {
            s.push_str(&format!(" root_code={c}"));
        }
        s.push('\n');
        for e in &self.events {
            s.push_str(&e.to_string());
            s.push('\n');
        }
        s
    }
}

fn key_values<'a>(words: &[&'a str]) -> std::result::Result<Vec<(&'a str, &'a str)>, String> {
    words
        .iter()
        .map(|w| w.split_once('=').ok_or_else(|| format!("expected key=value, got {w:?}")))
        .collect()
}

fn parse_count(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("batch size must be at least 1".into()),
        Ok(m) => Ok(m),
        Err(_) => Err(format!("bad count {s:?}")),
    }
}

fn parse_init(words: &[&str]) -> std::result::Result<Scenario, String> {
    let (mut n, mut protocol, mut seed, mut root_code) = (None, None, None, None);
    for (k, v) in key_values(words)? {
        match k {
            "n" => n = Some(parse_count(v)?),
            "protocol" => protocol = Some(v.parse::<ProtocolId>()?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| format!("bad seed {v:?}"))?),
            "root_code" => root_code = Some(v.parse::<NodeCode>().map_err(|e| e.to_string())?),
            other => return Err(format!("unknown init key {other:?}")),
        }
    }
    Ok(Scenario {
        n0: n.ok_or("init needs n=")?,
        protocol: protocol.ok_or("init needs protocol=")?,
        seed: seed.ok_or("init needs seed=")?,
        root_code,
        events: Vec::new(),
    })
}

fn parse_leave(words: &[&str]) -> std::result::Result<ScriptEvent, String> {
    match words {
        [single] if single.starts_with("ids=") => {
            let ids = single["ids=".len()..]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<MemberId>().map_err(|_| format!("bad member id {s:?}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if ids.is_empty() {
                return Err("ids= must list at least one member".into());
            }
            Ok(ScriptEvent::LeaveIds(ids))
        }
        [m, rest @ ..] => {
            let m = parse_count(m)?;
            let mut layout = Layout::Random;
            for (k, v) in key_values(rest)? {
                match k {
                    "layout" => layout = v.parse()?,
                    other => return Err(format!("unknown leave key {other:?}")),
                }
            }
            Ok(ScriptEvent::Leave { m, layout })
        }
        [] => Err("expected `leave <m> [layout=..]` or `leave ids=..`".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_form() {
        let s = Scenario::parse(
            "# demo\ninit n=8 protocol=ckcs seed=1 root_code=278\njoin 3\nleave 2 layout=worst-spread\nleave 1\nleave ids=u1,u4,8\n",
        )
        .unwrap();
        assert_eq!(s.n0, 8);
        assert_eq!(s.root_code.as_ref().unwrap().to_string(), "278");
        assert_eq!(
            s.events,
            vec![
                ScriptEvent::Join(3),
                ScriptEvent::Leave { m: 2, layout: Layout::WorstSpread },
                ScriptEvent::Leave { m: 1, layout: Layout::Random },
                ScriptEvent::LeaveIds(vec![MemberId(1), MemberId(4), MemberId(8)]),
            ]
        );
        assert_eq!(Scenario::parse(&s.to_script()).unwrap(), s);
    }

    #[test]
    fn reports_line_numbers() {
        let e = Scenario::parse("init n=4 protocol=lkh seed=1\n\njoin 0\n").unwrap_err();
        assert!(matches!(e, Error::Scenario { line: 3, .. }), "{e}");
        assert!(Scenario::parse("join 1\n").is_err());
        assert!(Scenario::parse("init n=4 protocol=abc seed=1\n").is_err());
        assert!(Scenario::parse("init n=4 protocol=lkh\n").is_err());
        assert!(Scenario::parse("init n=4 protocol=lkh seed=1\nleave 2 layout=sideways\n").is_err());
        assert!(Scenario::parse("").is_err());
    }
}
