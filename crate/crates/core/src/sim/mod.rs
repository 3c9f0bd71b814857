//! Deterministic scenario runner, random traces and the cost sweep.

pub mod layout;
pub mod random;
pub mod run;
pub mod scenario;
pub mod sweep;

pub use layout::leaver_layout;
pub use random::{corpus, random_scenario, TraceShape};
pub use run::{run, EventRecord, MemberHistory, ProbeResult, TraceRecord};
pub use scenario::{Layout, Scenario, ScriptEvent};
pub use sweep::{sweep, Cell, Grid, SweepReport, SweepRow, CSV_HEADER};
