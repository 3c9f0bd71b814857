//! Cost grid over protocols, group sizes, batch sizes and operations.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::protocol::{KeyServer, MembershipEvent, Meter, Op, ProtocolId, RekeyContext};
use crate::schemes;
use crate::sim::layout::leaver_layout;
use crate::sim::run::stream;
use crate::sim::scenario::Layout;
use crate::tree::MemberId;

pub const CSV_HEADER: [&str; 13] = [
    "protocol",
    "n",
    "m",
    "op",
    "keygen",
    "encrypt",
    "unicast",
    "multicast",
    "msg_size_keys",
    "member_derivations",
    "layout",
    "keygen_dedup",
    "wall_us",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub protocols: Vec<ProtocolId>,
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub ops: Vec<Op>,
    pub layouts: Vec<Layout>,
    pub seed: u64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            protocols: ProtocolId::ALL.to_vec(),
            ns: vec![256, 1024, 4096, 8192],
            ms: vec![16, 64, 256, 1024],
            ops: vec![Op::Join, Op::Leave],
            layouts: vec![Layout::Random],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub protocol: ProtocolId,
    pub n: usize,
    pub m: usize,
    pub op: Op,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    pub cell: Cell,
    pub keygen: u64,
    pub encrypt: u64,
    pub unicast: u64,
    pub multicast: u64,
    pub msg_size_keys: u64,
    pub member_derivations: u64,
    pub keygen_dedup: u64,
    pub wall_us: u64,
}

impl SweepRow {
    pub fn computational(&self) -> u64 {
        self.keygen + self.encrypt
    }

    fn record(&self) -> [String; 13] {
        let c = &self.cell;
        [
            c.protocol.to_string(),
            c.n.to_string(),
            c.m.to_string(),
            c.op.to_string(),
            self.keygen.to_string(),
            self.encrypt.to_string(),
            self.unicast.to_string(),
            self.multicast.to_string(),
            self.msg_size_keys.to_string(),
            self.member_derivations.to_string(),
            c.layout.to_string(),
            self.keygen_dedup.to_string(),
            self.wall_us.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Skipped cells and counts worth a remark.
    pub notes: Vec<String>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record(r.record())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn row(&self, protocol: ProtocolId, n: usize, m: usize, op: Op) -> Option<&SweepRow> {
        self.rows.iter().find(|r| {
            r.cell.protocol == protocol && r.cell.n == n && r.cell.m == m && r.cell.op == op
        })
    }

    /// `(min, max)` of `keygen / (m * log2 n)` per protocol and operation,
    /// with `n` the group size before the event.
    pub fn fit_constants(&self) -> BTreeMap<(ProtocolId, Op), (f64, f64)> {
        let mut out: BTreeMap<(ProtocolId, Op), (f64, f64)> = BTreeMap::new();
        for r in &self.rows {
            let c = r.keygen as f64 / (r.cell.m as f64 * (r.cell.n as f64).log2());
            let e = out.entry((r.cell.protocol, r.cell.op)).or_insert((c, c));
            e.0 = e.0.min(c);
            e.1 = e.1.max(c);
        }
        out
    }
}

fn setup(protocol: ProtocolId, n: usize, seed: u64) -> Result<Box<dyn KeyServer>> {
    let members: Vec<MemberId> = (1..=n as u32).map(MemberId).collect();
    let mut rng = stream(seed ^ n as u64, protocol as u64);
    schemes::new_server(protocol, &members, None, &mut rng)
}

/// The event a cell applies to a fresh group of `n`.
pub fn cell_event(base: &dyn KeyServer, cell: &Cell, seed: u64) -> Result<MembershipEvent> {
    Ok(match cell.op {
        Op::Join => {
            let first = cell.n as u32 + 1;
            MembershipEvent::join(1, (first..first + cell.m as u32).map(MemberId).collect())
        }
        Op::Leave => {
            let mut rng = stream(seed ^ ((cell.n as u64) << 20 | cell.m as u64), 100);
            MembershipEvent::leave(1, leaver_layout(base.tree(), cell.m, cell.layout, &mut rng)?)
        }
    })
}

/// Clones `base`, applies `event` and returns the metered row. Only `handle`
/// is timed.
pub fn measure(base: &dyn KeyServer, cell: Cell, event: &MembershipEvent, seed: u64) -> Result<SweepRow> {
    let mut server = base.clone_box();
    let mut rng = stream(seed, 200 + cell.m as u64);
    let mut meter = Meter::new();
    let mut ctx = RekeyContext::new(&mut rng, &mut meter, event.seq);
    let start = Instant::now();
    let outcome = server.handle(event, &mut ctx);
    let wall = start.elapsed();
    outcome?;
    let c = ctx.finish();
    Ok(SweepRow {
        cell,
        keygen: c.keygen,
        encrypt: c.encrypt,
        unicast: c.unicast,
        multicast: c.multicast,
        msg_size_keys: c.payload_keys,
        member_derivations: c.member_derivations,
        keygen_dedup: c.keygen_dedup,
        wall_us: wall.as_micros() as u64,
    })
}

/// Runs every cell of `grid`. Cells are independent; with
/// [`Execution::Parallel`] they run concurrently, which skews `wall_us`.
pub fn sweep(grid: &Grid, exec: Execution) -> Result<SweepReport> {
    let mut notes = Vec::new();
    let mut cells = Vec::new();
    for &protocol in &grid.protocols {
        for &n in &grid.ns {
            for &m in &grid.ms {
                for &op in &grid.ops {
                    for &layout in &grid.layouts {
                        let cell = Cell { protocol, n, m, op, layout };
                        if op == Op::Leave && m >= n {
                            if protocol == grid.protocols[0] && layout == grid.layouts[0] {
                                notes.push(format!(
                                    "skipped leave cells with n={n} m={m}: a batch leave needs m < n"
                                ));
                            }
                            continue;
                        }
                        cells.push(cell);
                    }
                }
            }
        }
    }

    let keys: Vec<(ProtocolId, usize)> = {
        let mut k: Vec<_> = cells.iter().map(|c| (c.protocol, c.n)).collect();
        k.dedup();
        k.sort();
        k.dedup();
        k
    };
    let seed = grid.seed;
    let bases: BTreeMap<(ProtocolId, usize), Box<dyn KeyServer>> = keys
        .iter()
        .copied()
        .zip(exec::map(exec, &keys, |&(p, n)| setup(p, n, seed)))
        .map(|(k, s)| s.map(|s| (k, s)))
        .collect::<Result<_>>()?;

    let measured = exec::map(exec, &cells, |cell| {
        let base = bases[&(cell.protocol, cell.n)].as_ref();
        match cell_event(base, cell, seed) {
            Ok(event) => measure(base, *cell, &event, seed).map(Some),
            Err(Error::InfeasibleLayout { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, r) in cells.iter().zip(measured) {
        match r? {
            Some(row) => rows.push(row),
            None => notes.push(format!(
                "skipped {} leave n={} m={} layout={}: no root child holds m leaves",
                cell.protocol, cell.n, cell.m, cell.layout
            )),
        }
    }

    notes.extend(discrepancy_notes(&rows));
    Ok(SweepReport { rows, notes })
}

/// Counts whose closed forms are commonly quoted differently, with a measured example.
fn discrepancy_notes(rows: &[SweepRow]) -> Vec<String> {
    let mut notes = Vec::new();
    let first = |p: ProtocolId, op: Op| rows.iter().find(|r| r.cell.protocol == p && r.cell.op == op);
    if let Some(r) = first(ProtocolId::Okd, Op::Join) {
        notes.push(format!(
            "okd join unicast: each joiner receives its path keys by unicast, and a split leaf's owner the new parent key, so the count is not 0 (n={} m={}: unicast={})",
            r.cell.n, r.cell.m, r.unicast
        ));
    }
    if let Some(r) = first(ProtocolId::Ckcs, Op::Leave) {
        notes.push(format!(
            "ckcs leave message size: one key per cover subtree, not m (n={} m={} layout={}: msg_size_keys={})",
            r.cell.n, r.cell.m, r.cell.layout, r.msg_size_keys
        ));
        notes.push(format!(
            "ckcs leave encryptions: equal to the cover size, which depends on where leavers sit rather than on log2 n (n={} m={} layout={}: encrypt={}); best-half gives 1",
            r.cell.n, r.cell.m, r.cell.layout, r.encrypt
        ));
    }
    notes
}
