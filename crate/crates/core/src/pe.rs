//! Matrix processing engine: linear PE arrays and the multi-array run loop.
//!
//! `P_m` base arrays of `P` PEs sit in a row. The multiplexer between base
//! arrays `k` and `k+1` either isolates them or chains them into one longer
//! array that shares a single memory interface.
//!
//! A block `SA_i × SB_j` runs on one array in three phases:
//!
//! * prefetch, `S_i` cycles: column 0 of `SA_i` streams down the chain and PE
//!   `p` latches element `p` into its `Ra` register;
//! * compute, `K` iterations of `max(S_i, S_j)` cycles: row `k` of `SB_j`
//!   streams past every PE, which multiplies it by its held `Ra` value and
//!   accumulates into `Mc`, while column `k+1` of `SA_i` is latched into the
//!   other half of `Ra`. When `S_i > S_j` the phase synchronization unit pads
//!   the B stream with `S_i − S_j` stall cycles so both streams stay aligned;
//! * a `Stage_fmac`-cycle pipeline drain.
//!
//! Results leave through `fifo_c` during the next block and are not charged
//! to the block.
//!
//! Between blocks, [`run_mpe`] advances an event loop in which every array
//! double-buffers its inputs, pulls tasks from the [`Wqm`] and moves data
//! through a memory port timed by the [`BandwidthModel`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blockmm::{partition, scatter_tile, transpose_a, Matrix, Tile, TileGrid};
use crate::error::{invalid, Error, Result};
use crate::mac::{make_transfer_plan, BandwidthModel, BufferDescriptor, MemoryMap, TransferPlan};
use crate::scalar::Scalar;
use crate::wqm::{StealEvent, WorkItem, Wqm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EffectiveArray {
    pub id: usize,
    /// First base array in this chain.
    pub first_base: usize,
    pub bases: usize,
    pub pe_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MpeLayout {
    pub p_m: usize,
    pub p: usize,
    /// `mux[k]` joins base arrays `k` and `k+1`.
    pub mux: Vec<bool>,
    pub arrays: Vec<EffectiveArray>,
}

pub fn configure_mpe(p_m: usize, p: usize, mux: &[bool]) -> Result<MpeLayout> {
    if p_m == 0 || p == 0 {
        return Err(invalid(format!("P_m and P must be >= 1, got {p_m}, {p}")));
    }
    if mux.len() != p_m - 1 {
        return Err(invalid(format!(
            "mux needs {} entries for P_m={p_m}, got {}",
            p_m - 1,
            mux.len()
        )));
    }
    let mut arrays = Vec::new();
    let mut first = 0;
    for base in 0..p_m {
        let joined_to_next = mux.get(base).copied().unwrap_or(false);
        if !joined_to_next {
            let bases = base + 1 - first;
            arrays.push(EffectiveArray {
                id: arrays.len(),
                first_base: first,
                bases,
                pe_count: bases * p,
            });
            first = base + 1;
        }
    }
    Ok(MpeLayout {
        p_m,
        p,
        mux: mux.to_vec(),
        arrays,
    })
}

impl MpeLayout {
    /// Splits the base arrays into `n_p` equal chains of `⌊P_m/N_p⌋` bases;
    /// leftover base arrays stay isolated and unscheduled.
    pub fn for_arrays(p_m: usize, p: usize, n_p: usize) -> Result<Self> {
        if n_p == 0 || n_p > p_m {
            return Err(invalid(format!("n_p must be in 1..={p_m}, got {n_p}")));
        }
        let group = p_m / n_p;
        let mux: Vec<bool> = (0..p_m.saturating_sub(1))
            .map(|k| k + 1 < n_p * group && (k + 1) % group != 0)
            .collect();
        configure_mpe(p_m, p, &mux)
    }

    /// The first `n_p` chains, which receive work.
    pub fn scheduled(&self, n_p: usize) -> &[EffectiveArray] {
        &self.arrays[..n_p.min(self.arrays.len())]
    }

    pub fn total_pes(&self) -> usize {
        self.arrays.iter().map(|a| a.pe_count).sum()
    }
}

/// Stall cycles the PSU inserts into each iteration's B stream.
pub fn psu_stall_plan(s_i: usize, s_j: usize) -> usize {
    s_i.max(s_j) - s_j
}

/// Cycles charged to one block: `S_i + max(S_i, S_j)·K + Stage_fmac`.
pub fn block_cycles(s_i: usize, s_j: usize, k: usize, stage_fmac: usize) -> u64 {
    (s_i + s_i.max(s_j) * k + stage_fmac) as u64
}

/// Per-block cycle breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BlockTiming {
    pub prefetch: u64,
    /// Cycles in which the B stream delivers an element, `S_j·K`.
    pub mac: u64,
    /// PSU stall cycles, `(max(S_i,S_j) − S_j)·K`.
    pub stall: u64,
    pub pipeline: u64,
    /// Cycles to drain the finished tile through `fifo_c`; overlapped with
    /// the following block, so not part of `total`.
    pub drain: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PeEventKind {
    /// Element latched into `Ra` during prefetch.
    Prefetch,
    /// Element of the next column latched into the idle half of `Ra`.
    LoadShadow,
    /// One multiply-accumulate against element `index` of the B row.
    Mac,
    Stall,
    /// Final sum pushed into `fifo_c`.
    WriteFifo,
}

/// Cycle-stamped PE activity for one block, emitted only on request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PeEvent {
    pub cycle: u64,
    pub pid: usize,
    pub kind: PeEventKind,
    /// Inner iteration the operand belongs to.
    pub k: usize,
    /// Row of the A element (prefetch, shadow load) or B column (MAC, write).
    pub index: usize,
    /// `Ra` half involved.
    pub slot: usize,
}

#[derive(Debug, Clone)]
pub struct PeState<T> {
    pub pid: usize,
    ra: [T; 2],
    /// Which column of the A block each `Ra` half holds.
    ra_tag: [Option<usize>; 2],
    active: usize,
    mc: Vec<T>,
    fifo_c: Vec<T>,
}

impl<T: Scalar> PeState<T> {
    fn new(pid: usize) -> Self {
        Self {
            pid,
            ra: [T::zero(); 2],
            ra_tag: [None; 2],
            active: 0,
            mc: Vec::new(),
            fifo_c: Vec::new(),
        }
    }

    fn reset(&mut self, s_j: usize) {
        self.ra_tag = [None; 2];
        self.active = 0;
        self.mc.clear();
        self.mc.resize(s_j, T::zero());
        self.fifo_c.clear();
    }

    pub fn held(&self) -> (T, Option<usize>) {
        (self.ra[self.active], self.ra_tag[self.active])
    }
}

/// What to run on an array. Without a tile only timing is produced.
#[derive(Debug, Clone, Copy)]
pub struct BlockJob<'a, T> {
    pub s_i: usize,
    pub s_j: usize,
    pub k: usize,
    pub tile: Option<Tile<'a, T>>,
}

#[derive(Debug, Clone)]
pub struct BlockOutcome<T> {
    pub tile: Option<Matrix<T>>,
    pub timing: BlockTiming,
    pub trace: Vec<PeEvent>,
}

/// One effective linear array.
#[derive(Debug, Clone)]
pub struct LinearArray<T> {
    pub id: usize,
    pub pe_count: usize,
    pub mc_depth: usize,
    pub stage_fmac: usize,
    /// Result drain rate into the memory controller, elements per cycle.
    pub drain_width: usize,
    pes: Vec<PeState<T>>,
}

impl<T: Scalar> LinearArray<T> {
    pub fn new(id: usize, pe_count: usize, mc_depth: usize, stage_fmac: usize) -> Self {
        Self {
            id,
            pe_count,
            mc_depth,
            stage_fmac,
            drain_width: 1,
            pes: Vec::new(),
        }
    }

    pub fn with_drain_width(mut self, width: usize) -> Self {
        self.drain_width = width.max(1);
        self
    }

    pub fn pes(&self) -> &[PeState<T>] {
        &self.pes
    }

    pub fn check(&self, s_i: usize, s_j: usize, k: usize) -> Result<()> {
        if s_i == 0 || s_j == 0 || k == 0 {
            return Err(invalid(format!(
                "block dims must be >= 1, got S_i={s_i} S_j={s_j} K={k}"
            )));
        }
        if s_i > self.pe_count {
            return Err(Error::InfeasibleBlock(format!(
                "S_i={s_i} exceeds the {} PEs of array {}",
                self.pe_count, self.id
            )));
        }
        if s_j > self.mc_depth {
            return Err(Error::InfeasibleBlock(format!(
                "S_j={s_j} exceeds Mc depth {}",
                self.mc_depth
            )));
        }
        Ok(())
    }

    pub fn timing(&self, s_i: usize, s_j: usize, k: usize) -> BlockTiming {
        let (si, sj, kk) = (s_i as u64, s_j as u64, k as u64);
        let stall = psu_stall_plan(s_i, s_j) as u64 * kk;
        let pipeline = self.stage_fmac as u64;
        BlockTiming {
            prefetch: si,
            mac: sj * kk,
            stall,
            pipeline,
            drain: (si * sj).div_ceil(self.drain_width as u64),
            total: si + sj * kk + stall + pipeline,
        }
    }

    pub fn simulate_block(
        &mut self,
        job: &BlockJob<'_, T>,
        trace: bool,
    ) -> Result<BlockOutcome<T>> {
        let (s_i, s_j, k) = (job.s_i, job.s_j, job.k);
        self.check(s_i, s_j, k)?;
        let timing = self.timing(s_i, s_j, k);
        let Some(tile) = job.tile else {
            return Ok(BlockOutcome {
                tile: None,
                timing,
                trace: Vec::new(),
            });
        };
        if tile.s_i != s_i || tile.s_j != s_j || tile.k() != k {
            return Err(Error::DimensionMismatch(format!(
                "job is {s_i}x{s_j}x{k}, tile is {}x{}x{}",
                tile.s_i,
                tile.s_j,
                tile.k()
            )));
        }

        while self.pes.len() < s_i {
            let pid = self.pes.len();
            self.pes.push(PeState::new(pid));
        }
        for pe in &mut self.pes[..s_i] {
            pe.reset(s_j);
        }
        let mut events = Vec::new();
        let mut log = |e: PeEvent| {
            if trace {
                events.push(e);
            }
        };

        for pe in &mut self.pes[..s_i] {
            let p = pe.pid;
            pe.ra[0] = tile.sa(p, 0);
            pe.ra_tag[0] = Some(0);
            log(PeEvent {
                cycle: p as u64,
                pid: p,
                kind: PeEventKind::Prefetch,
                k: 0,
                index: p,
                slot: 0,
            });
        }
        let mut cycle = s_i as u64;

        let period = s_i.max(s_j) as u64;
        let mut b_row = vec![T::zero(); s_j];
        for kk in 0..k {
            for (c, b) in b_row.iter_mut().enumerate() {
                *b = tile.sb(kk, c);
            }
            let last = kk + 1 == k;
            for pe in &mut self.pes[..s_i] {
                let p = pe.pid;
                let slot = pe.active;
                debug_assert_eq!(pe.ra_tag[slot], Some(kk), "Ra overwritten before use");
                if !last {
                    let shadow = 1 - slot;
                    pe.ra[shadow] = tile.sa(p, kk + 1);
                    pe.ra_tag[shadow] = Some(kk + 1);
                    log(PeEvent {
                        cycle: cycle + p as u64,
                        pid: p,
                        kind: PeEventKind::LoadShadow,
                        k: kk + 1,
                        index: p,
                        slot: shadow,
                    });
                }
                let a = pe.ra[slot];
                if last {
                    for (c, (&m, &b)) in pe.mc.iter().zip(&b_row).enumerate() {
                        pe.fifo_c.push(m + a * b);
                        log(PeEvent {
                            cycle: cycle + c as u64,
                            pid: p,
                            kind: PeEventKind::Mac,
                            k: kk,
                            index: c,
                            slot,
                        });
                    }
                } else {
                    for (c, (m, &b)) in pe.mc.iter_mut().zip(&b_row).enumerate() {
                        *m = *m + a * b;
                        log(PeEvent {
                            cycle: cycle + c as u64,
                            pid: p,
                            kind: PeEventKind::Mac,
                            k: kk,
                            index: c,
                            slot,
                        });
                    }
                }
            }
            for s in s_j as u64..period {
                log(PeEvent {
                    cycle: cycle + s,
                    pid: 0,
                    kind: PeEventKind::Stall,
                    k: kk,
                    index: 0,
                    slot: 0,
                });
            }
            if !last {
                for pe in &mut self.pes[..s_i] {
                    pe.active = 1 - pe.active;
                }
            }
            cycle += period;
        }
        cycle += self.stage_fmac as u64;
        debug_assert_eq!(cycle, timing.total);

        let mut out = Vec::with_capacity(s_i * s_j);
        for pe in &self.pes[..s_i] {
            for c in 0..s_j {
                log(PeEvent {
                    cycle: cycle + (pe.pid * s_j + c) as u64,
                    pid: pe.pid,
                    kind: PeEventKind::WriteFifo,
                    k,
                    index: c,
                    slot: 0,
                });
            }
            out.extend_from_slice(&pe.fifo_c);
        }
        events.sort_by_key(|e| (e.cycle, e.pid));
        Ok(BlockOutcome {
            tile: Some(Matrix::new(s_i, s_j, out)?),
            timing,
            trace: events,
        })
    }
}

/// How arrays reach external memory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortMode {
    /// Each array has its own port running at `f(N_p, S_i)`.
    #[default]
    PerArray,
    /// One port at `f(1, S_i)` granted round-robin between arrays.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub stage_fmac: usize,
    pub mc_depth: usize,
    pub drain_width: usize,
    pub f_acc: f64,
    pub port: PortMode,
    pub stealing: bool,
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            stage_fmac: 8,
            mc_depth: 256,
            drain_width: 1,
            f_acc: 2e8,
            port: PortMode::PerArray,
            stealing: true,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ArrayRunStats {
    pub array: usize,
    pub pe_count: usize,
    pub blocks_executed: u64,
    /// MAC-issue plus pipeline cycles.
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub prefetch_cycles: u64,
    /// Cycles spent waiting for operands before the last block finished.
    pub idle_cycles: f64,
    pub transfer_cycles: f64,
    pub bytes_transferred: u64,
    pub steals: u64,
    /// Drain of the final tile, reported but not charged.
    pub final_drain_cycles: u64,
    pub finish_cycle: f64,
}

impl ArrayRunStats {
    pub fn busy_cycles(&self) -> u64 {
        self.compute_cycles + self.stall_cycles + self.prefetch_cycles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockRecord {
    pub array: usize,
    pub item: WorkItem,
    pub start: f64,
    pub end: f64,
    pub timing: BlockTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayEventKind {
    ReadA,
    ReadB,
    InputDone,
    ComputeStart,
    ComputeDone,
    WritebackStart,
    WritebackDone,
    Steal,
}

/// One row of the run trace. Transfer rows carry their descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArrayEvent {
    pub cycle: f64,
    pub array: usize,
    pub kind: ArrayEventKind,
    pub block: usize,
    pub addr: Option<u64>,
    pub stride: Option<u64>,
    pub burst_len: Option<u64>,
    pub bursts: Option<u64>,
}

impl ArrayEvent {
    fn new(cycle: f64, array: usize, kind: ArrayEventKind, block: usize) -> Self {
        Self {
            cycle,
            array,
            kind,
            block,
            addr: None,
            stride: None,
            burst_len: None,
            bursts: None,
        }
    }

    fn with_descriptor(mut self, d: &BufferDescriptor) -> Self {
        self.addr = Some(d.addr);
        self.stride = Some(d.stride);
        self.burst_len = Some(d.burst_len);
        self.bursts = Some(d.bursts);
        self
    }
}

pub fn write_trace_csv<W: Write>(events: &[ArrayEvent], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record([
        "cycle",
        "array",
        "kind",
        "block",
        "addr",
        "stride",
        "burst_len",
        "bursts",
    ])?;
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport<T> {
    pub output: Option<Matrix<T>>,
    pub n_p: usize,
    pub tiles: usize,
    pub total_cycles: f64,
    pub total_time_s: f64,
    pub gflops: f64,
    pub arrays: Vec<ArrayRunStats>,
    pub blocks: Vec<BlockRecord>,
    pub steals: Vec<StealEvent>,
    pub trace: Vec<ArrayEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TransferKind {
    Input,
    Writeback,
}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    array: usize,
    item: WorkItem,
    kind: TransferKind,
    cycles: f64,
}

#[derive(Debug)]
struct Port {
    waiting: Vec<VecDeque<Transfer>>,
    rr: usize,
    busy: bool,
}

impl Port {
    fn new(arrays: usize) -> Self {
        Self {
            waiting: vec![VecDeque::new(); arrays],
            rr: 0,
            busy: false,
        }
    }

    fn next(&mut self) -> Option<Transfer> {
        let n = self.waiting.len();
        let a = (0..n)
            .map(|off| (self.rr + off) % n)
            .find(|&a| !self.waiting[a].is_empty())?;
        self.rr = (a + 1) % n;
        self.waiting[a].pop_front()
    }
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    TransferDone { port: usize, transfer: Transfer },
    ComputeDone { array: usize },
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct ArraySlot<T> {
    hw: LinearArray<T>,
    /// Tasks holding an input buffer: loading, loaded, or computing.
    in_flight: usize,
    staged: VecDeque<WorkItem>,
    computing: Option<(WorkItem, f64)>,
    last_compute_end: f64,
    retired: bool,
    stats: ArrayRunStats,
}

/// Runs a whole problem on the scheduled arrays of `layout`.
///
/// `operands`, when given, are `(A, B)` and produce a numerically exact
/// output; without them only timing is simulated.
pub fn run_mpe<T: Scalar>(
    layout: &MpeLayout,
    n_p: usize,
    grid: &TileGrid,
    mut wqm: Wqm,
    operands: Option<(&Matrix<T>, &Matrix<T>)>,
    bandwidth: &BandwidthModel,
    cfg: &SimConfig,
) -> Result<SimReport<T>> {
    let scheduled = layout.scheduled(n_p);
    if scheduled.len() != n_p || wqm.len() != n_p {
        return Err(invalid(format!(
            "n_p={n_p} but layout offers {} arrays and WQM has {} queues",
            scheduled.len(),
            wqm.len()
        )));
    }
    if cfg.f_acc.is_nan() || cfg.f_acc <= 0.0 {
        return Err(invalid(format!(
            "F_acc must be positive, got {}",
            cfg.f_acc
        )));
    }
    if let Some((a, b)) = operands {
        if a.rows() != grid.m || a.cols() != grid.k || b.rows() != grid.k || b.cols() != grid.n {
            return Err(Error::DimensionMismatch(format!(
                "grid is M={} K={} N={}, A is {}x{}, B is {}x{}",
                grid.m,
                grid.k,
                grid.n,
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
    }
    let a_t = operands.map(|(a, _)| transpose_a(a));
    let b = operands.map(|(_, b)| b);
    let mut output = match operands {
        Some(_) => Some(Matrix::<T>::zeros(grid.m, grid.n)?),
        None => None,
    };

    let mut arrays: Vec<ArraySlot<T>> = scheduled
        .iter()
        .enumerate()
        .map(|(idx, ea)| {
            let hw = LinearArray::new(ea.id, ea.pe_count, cfg.mc_depth, cfg.stage_fmac)
                .with_drain_width(cfg.drain_width);
            hw.check(grid.s_i, grid.s_j, grid.k)?;
            Ok(ArraySlot {
                hw,
                in_flight: 0,
                staged: VecDeque::new(),
                computing: None,
                last_compute_end: 0.0,
                retired: false,
                stats: ArrayRunStats {
                    array: idx,
                    pe_count: ea.pe_count,
                    ..Default::default()
                },
            })
        })
        .collect::<Result<_>>()?;

    let map = MemoryMap::for_grid(grid);
    let port_bw_arrays = match cfg.port {
        PortMode::PerArray => n_p,
        PortMode::Shared => 1,
    };
    let cycles_for = |bytes: u64| -> Result<f64> {
        Ok(bandwidth.seconds_for(bytes, port_bw_arrays, grid.s_i)? * cfg.f_acc)
    };
    let mut ports: Vec<Port> = match cfg.port {
        PortMode::PerArray => (0..n_p).map(|_| Port::new(1)).collect(),
        PortMode::Shared => vec![Port::new(n_p)],
    };
    let port_of = |array: usize| match cfg.port {
        PortMode::PerArray => (array, 0),
        PortMode::Shared => (0, array),
    };

    let mut plans: BTreeMap<usize, TransferPlan> = BTreeMap::new();
    let mut pending_tiles: BTreeMap<usize, Matrix<T>> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut blocks = Vec::new();
    let mut trace = Vec::new();
    let mut tiles_done = 0usize;
    let mut steals_seen = 0usize;
    let mut now = 0.0f64;

    loop {
        // Settle everything that happens at `now`, including zero-length
        // transfers and follow-on actions.
        loop {
            let mut progressed = false;
            while heap.peek().is_some_and(|e: &Event| e.time <= now) {
                let ev = heap.pop().expect("peeked");
                progressed = true;
                match ev.kind {
                    EventKind::TransferDone { port, transfer } => {
                        ports[port].busy = false;
                        let slot = &mut arrays[transfer.array];
                        match transfer.kind {
                            TransferKind::Input => {
                                slot.staged.push_back(transfer.item);
                                if cfg.trace {
                                    trace.push(ArrayEvent::new(
                                        now,
                                        transfer.array,
                                        ArrayEventKind::InputDone,
                                        transfer.item.id,
                                    ));
                                }
                            }
                            TransferKind::Writeback => {
                                tiles_done += 1;
                                slot.stats.finish_cycle = slot.stats.finish_cycle.max(now);
                                if let (Some(out), Some(tile)) =
                                    (output.as_mut(), pending_tiles.remove(&transfer.item.id))
                                {
                                    scatter_tile(
                                        out,
                                        grid,
                                        transfer.item.i,
                                        transfer.item.j,
                                        &tile,
                                    );
                                }
                                if cfg.trace {
                                    trace.push(ArrayEvent::new(
                                        now,
                                        transfer.array,
                                        ArrayEventKind::WritebackDone,
                                        transfer.item.id,
                                    ));
                                }
                            }
                        }
                    }
                    EventKind::ComputeDone { array } => {
                        let slot = &mut arrays[array];
                        let (item, _) = slot.computing.take().expect("compute in progress");
                        slot.in_flight -= 1;
                        slot.last_compute_end = now;
                        let plan = plans.remove(&item.id).expect("plan exists");
                        let cycles = cycles_for(plan.writeback_bytes())?;
                        slot.stats.bytes_transferred += plan.writeback_bytes();
                        slot.stats.transfer_cycles += cycles;
                        let (port, lane) = port_of(array);
                        ports[port].waiting[lane].push_back(Transfer {
                            array,
                            item,
                            kind: TransferKind::Writeback,
                            cycles,
                        });
                        if cfg.trace {
                            trace.push(ArrayEvent::new(
                                now,
                                array,
                                ArrayEventKind::ComputeDone,
                                item.id,
                            ));
                        }
                    }
                }
            }

            // Start compute on any idle array with staged operands.
            for (idx, slot) in arrays.iter_mut().enumerate() {
                if slot.computing.is_some() {
                    continue;
                }
                let Some(item) = slot.staged.pop_front() else {
                    continue;
                };
                progressed = true;
                let tile = match (&a_t, b) {
                    (Some(a_t), Some(b)) => Some(Tile::new(grid, item.i, item.j, a_t, b)?),
                    _ => None,
                };
                let outcome = slot.hw.simulate_block(
                    &BlockJob {
                        s_i: item.s_i,
                        s_j: item.s_j,
                        k: item.k,
                        tile,
                    },
                    false,
                )?;
                let t = outcome.timing;
                if t.total != block_cycles(item.s_i, item.s_j, item.k, cfg.stage_fmac) {
                    return Err(Error::Deadlock(format!(
                        "block {} charged {} cycles",
                        item.id, t.total
                    )));
                }
                if let Some(tile) = outcome.tile {
                    pending_tiles.insert(item.id, tile);
                }
                slot.stats.idle_cycles += now - slot.last_compute_end;
                slot.stats.blocks_executed += 1;
                slot.stats.prefetch_cycles += t.prefetch;
                slot.stats.compute_cycles += t.mac + t.pipeline;
                slot.stats.stall_cycles += t.stall;
                slot.stats.final_drain_cycles = t.drain;
                let end = now + t.total as f64;
                slot.computing = Some((item, now));
                blocks.push(BlockRecord {
                    array: idx,
                    item,
                    start: now,
                    end,
                    timing: t,
                });
                heap.push(Event {
                    time: end,
                    seq,
                    kind: EventKind::ComputeDone { array: idx },
                });
                seq += 1;
                if cfg.trace {
                    trace.push(ArrayEvent::new(
                        now,
                        idx,
                        ArrayEventKind::ComputeStart,
                        item.id,
                    ));
                }
            }

            // Arrays with a free input buffer ask the WQM for work.
            let requesters: Vec<usize> = arrays
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.retired && s.in_flight < 2)
                .map(|(i, _)| i)
                .collect();
            if !requesters.is_empty() {
                progressed = true;
                for (array, grant) in wqm.arbitrate(now / cfg.f_acc, &requesters) {
                    let Some(item) = grant else {
                        arrays[array].retired = true;
                        continue;
                    };
                    let slot = &mut arrays[array];
                    slot.in_flight += 1;
                    let plan = make_transfer_plan(&item, &map);
                    let cycles = cycles_for(plan.input_bytes())?;
                    slot.stats.bytes_transferred += plan.input_bytes();
                    slot.stats.transfer_cycles += cycles;
                    plans.insert(item.id, plan);
                    let (port, lane) = port_of(array);
                    ports[port].waiting[lane].push_back(Transfer {
                        array,
                        item,
                        kind: TransferKind::Input,
                        cycles,
                    });
                }
                let log = wqm.steal_log();
                for s in &log[steals_seen..] {
                    arrays[s.thief].stats.steals += 1;
                    if cfg.trace {
                        trace.push(ArrayEvent::new(now, s.thief, ArrayEventKind::Steal, s.item));
                    }
                }
                steals_seen = log.len();
            }

            // Grant idle ports.
            for (p, port) in ports.iter_mut().enumerate() {
                if port.busy {
                    continue;
                }
                let Some(tr) = port.next() else { continue };
                progressed = true;
                port.busy = true;
                if cfg.trace {
                    match tr.kind {
                        TransferKind::Input => {
                            let plan = &plans[&tr.item.id];
                            trace.push(
                                ArrayEvent::new(now, tr.array, ArrayEventKind::ReadA, tr.item.id)
                                    .with_descriptor(&plan.a),
                            );
                            trace.push(
                                ArrayEvent::new(now, tr.array, ArrayEventKind::ReadB, tr.item.id)
                                    .with_descriptor(&plan.b),
                            );
                        }
                        TransferKind::Writeback => {
                            let c = make_transfer_plan(&tr.item, &map).c;
                            trace.push(
                                ArrayEvent::new(
                                    now,
                                    tr.array,
                                    ArrayEventKind::WritebackStart,
                                    tr.item.id,
                                )
                                .with_descriptor(&c),
                            );
                        }
                    }
                }
                heap.push(Event {
                    time: now + tr.cycles,
                    seq,
                    kind: EventKind::TransferDone {
                        port: p,
                        transfer: tr,
                    },
                });
                seq += 1;
            }

            if !progressed {
                break;
            }
        }

        match heap.peek() {
            Some(e) => now = e.time,
            None => break,
        }
    }

    if tiles_done != grid.tiles() || wqm.pending_total() != 0 {
        return Err(Error::Deadlock(format!(
            "{tiles_done} of {} tiles written back, {} still queued",
            grid.tiles(),
            wqm.pending_total()
        )));
    }

    let total_cycles = arrays
        .iter()
        .map(|s| s.stats.finish_cycle)
        .fold(0.0, f64::max);
    let total_time_s = total_cycles / cfg.f_acc;
    let flops = 2.0 * grid.m as f64 * grid.k as f64 * grid.n as f64;
    Ok(SimReport {
        output,
        n_p,
        tiles: grid.tiles(),
        total_cycles,
        total_time_s,
        gflops: if total_time_s > 0.0 {
            flops / total_time_s / 1e9
        } else {
            f64::INFINITY
        },
        arrays: arrays.into_iter().map(|s| s.stats).collect(),
        blocks,
        steals: wqm.into_steal_log(),
        trace,
    })
}

/// Convenience wrapper: lays out `n_p` arrays, partitions the problem
/// round-robin and runs it.
#[allow(clippy::too_many_arguments)]
pub fn simulate_gemm<T: Scalar>(
    shape: (usize, usize, usize),
    block: (usize, usize),
    n_p: usize,
    p: usize,
    p_m: usize,
    operands: Option<(&Matrix<T>, &Matrix<T>)>,
    bandwidth: &BandwidthModel,
    cfg: &SimConfig,
) -> Result<SimReport<T>> {
    let (m, k, n) = shape;
    let grid = partition(m, n, k, block.0, block.1)?;
    let layout = MpeLayout::for_arrays(p_m, p, n_p)?;
    let queues = crate::wqm::partition_workload(&grid, n_p, Default::default())?;
    run_mpe(
        &layout,
        n_p,
        &grid,
        Wqm::new(queues, cfg.stealing),
        operands,
        bandwidth,
        cfg,
    )
}
