//! Workload queue management.
//!
//! One FIFO queue per array, each with a task counter. When an array asks
//! for work and its own queue is empty, the controller steals one task from
//! the tail of the queue with the largest counter. Concurrent requests are
//! served in round-robin order, and equal counters are also broken by the
//! round-robin pointer.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blockmm::TileGrid;
use crate::error::{Error, Result};

/// One sub-block product `C[i][j] = SA_i × SB_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct WorkItem {
    pub id: usize,
    pub i: usize,
    pub j: usize,
    pub s_i: usize,
    pub s_j: usize,
    pub k: usize,
}

/// All tiles of a grid, ids assigned in row-major order.
pub fn work_items(grid: &TileGrid) -> Vec<WorkItem> {
    grid.coords()
        .enumerate()
        .map(|(id, (i, j))| WorkItem {
            id,
            i,
            j,
            s_i: grid.s_i,
            s_j: grid.s_j,
            k: grid.k,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPolicy {
    /// Tile `t` goes to queue `t mod N_p`.
    #[default]
    RoundRobin,
    /// Consecutive runs of tiles per queue.
    Contiguous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkQueue {
    pub array_id: usize,
    pending: VecDeque<WorkItem>,
    counter: usize,
}

impl WorkQueue {
    pub fn new(array_id: usize) -> Self {
        Self {
            array_id,
            pending: VecDeque::new(),
            counter: 0,
        }
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn pending(&self) -> impl Iterator<Item = &WorkItem> {
        self.pending.iter()
    }

    pub fn push(&mut self, item: WorkItem) {
        self.pending.push_back(item);
        self.counter += 1;
    }

    /// Next task to run.
    pub fn pop_front(&mut self) -> Option<WorkItem> {
        let item = self.pending.pop_front()?;
        self.counter -= 1;
        Some(item)
    }

    /// Last-to-run task; the steal end.
    pub fn pop_back(&mut self) -> Option<WorkItem> {
        let item = self.pending.pop_back()?;
        self.counter -= 1;
        Some(item)
    }

    pub fn is_coherent(&self) -> bool {
        self.counter == self.pending.len()
    }
}

pub fn partition_workload(
    grid: &TileGrid,
    n_p: usize,
    policy: PartitionPolicy,
) -> Result<Vec<WorkQueue>> {
    if n_p == 0 {
        return Err(Error::InvalidArgument("n_p must be >= 1".into()));
    }
    let items = work_items(grid);
    let mut queues: Vec<WorkQueue> = (0..n_p).map(WorkQueue::new).collect();
    match policy {
        PartitionPolicy::RoundRobin => {
            for (t, item) in items.into_iter().enumerate() {
                queues[t % n_p].push(item);
            }
        }
        PartitionPolicy::Contiguous => {
            let (base, extra) = (items.len() / n_p, items.len() % n_p);
            let mut it = items.into_iter();
            for (q, queue) in queues.iter_mut().enumerate() {
                for item in it.by_ref().take(base + usize::from(q < extra)) {
                    queue.push(item);
                }
            }
        }
    }
    Ok(queues)
}

/// Picks the queue with the most pending tasks, excluding `thief`.
///
/// Equal maxima go to the first candidate at or after `rr` in cyclic order.
pub fn select_victim(counters: &[usize], thief: usize, rr: usize) -> Option<usize> {
    let n = counters.len();
    let max = counters
        .iter()
        .enumerate()
        .filter(|&(q, &c)| q != thief && c > 0)
        .map(|(_, &c)| c)
        .max()?;
    (0..n)
        .map(|off| (rr + off) % n)
        .find(|&q| q != thief && counters[q] == max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StealEvent {
    pub time: f64,
    pub thief: usize,
    pub victim: usize,
    pub item: usize,
    /// Victim counter just before the steal.
    pub victim_counter: usize,
}

/// The queue controller: counters, stealing and the round-robin arbiter.
#[derive(Debug, Clone)]
pub struct Wqm {
    queues: Vec<WorkQueue>,
    rr: usize,
    stealing: bool,
    log: Vec<StealEvent>,
}

impl Wqm {
    pub fn new(queues: Vec<WorkQueue>, stealing: bool) -> Self {
        Self {
            queues,
            rr: 0,
            stealing,
            log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.queues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }

    pub fn queues(&self) -> &[WorkQueue] {
        &self.queues
    }

    pub fn counters(&self) -> Vec<usize> {
        self.queues.iter().map(WorkQueue::counter).collect()
    }

    pub fn pending_total(&self) -> usize {
        self.queues.iter().map(WorkQueue::counter).sum()
    }

    pub fn rr_pointer(&self) -> usize {
        self.rr
    }

    pub fn steal_log(&self) -> &[StealEvent] {
        &self.log
    }

    pub fn into_steal_log(self) -> Vec<StealEvent> {
        self.log
    }

    /// Moves the victim's tail task into the thief's queue.
    pub fn steal(&mut self, time: f64, thief: usize, victim: usize) -> Result<WorkItem> {
        let victim_counter = self.queues[victim].counter();
        let item = self.queues[victim]
            .pop_back()
            .ok_or(Error::VictimEmpty { victim })?;
        self.queues[thief].push(item);
        self.log.push(StealEvent {
            time,
            thief,
            victim,
            item: item.id,
            victim_counter,
        });
        Ok(item)
    }

    /// Serves simultaneous requests for the next task, one task per requester.
    ///
    /// Requesters are visited cyclically from the round-robin pointer. Each
    /// takes the head of its own queue, or steals when that queue is empty.
    /// `None` means no work is left anywhere the requester may take it from.
    pub fn arbitrate(&mut self, time: f64, requesters: &[usize]) -> Vec<(usize, Option<WorkItem>)> {
        let n = self.queues.len();
        let mut order: Vec<usize> = requesters.to_vec();
        order.sort_by_key(|&r| (r + n - self.rr % n) % n);
        order.dedup();

        let mut grants = Vec::with_capacity(order.len());
        for thief in order {
            if self.queues[thief].counter() == 0 && self.stealing {
                for _ in 0..n {
                    let Some(victim) = select_victim(&self.counters(), thief, self.rr) else {
                        break;
                    };
                    match self.steal(time, thief, victim) {
                        Ok(_) => {
                            self.rr = (thief + 1) % n;
                            break;
                        }
                        Err(Error::VictimEmpty { .. }) => continue,
                        Err(e) => unreachable!("steal only fails with VictimEmpty: {e}"),
                    }
                }
            }
            grants.push((thief, self.queues[thief].pop_front()));
        }
        grants
    }
}

pub fn write_steal_csv<W: Write>(log: &[StealEvent], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(["time", "thief", "victim", "item", "victim_counter"])?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of [`simulate_service`].
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceOutcome {
    pub makespan: f64,
    /// Item ids in execution order, per array.
    pub executed: Vec<Vec<usize>>,
    pub finish: Vec<f64>,
    pub steals: Vec<StealEvent>,
    /// Arbitration rounds in which a requester was left without work while
    /// some queue still held at least two pending tasks.
    pub starved_rounds: usize,
}

/// Discrete-event run of the queues alone, with `service(array, item)`
/// giving each task's execution time on an array.
///
/// A task leaves its queue when it starts; requests that arrive at the same
/// instant form one arbitration round.
pub fn simulate_service(
    queues: Vec<WorkQueue>,
    stealing: bool,
    mut service: impl FnMut(usize, &WorkItem) -> f64,
) -> ServiceOutcome {
    let n = queues.len();
    let mut wqm = Wqm::new(queues, stealing);
    let mut executed = vec![Vec::new(); n];
    let mut finish = vec![0.0f64; n];
    let mut busy_until: Vec<Option<f64>> = vec![None; n];
    let mut starved_rounds = 0;

    let mut now = 0.0;
    let mut requesters: Vec<usize> = (0..n).collect();
    loop {
        let grants = wqm.arbitrate(now, &requesters);
        if grants.iter().any(|(_, g)| g.is_none()) && wqm.queues().iter().any(|q| q.counter() >= 2)
        {
            starved_rounds += 1;
        }
        for (array, grant) in grants {
            match grant {
                Some(item) => {
                    executed[array].push(item.id);
                    let end = now + service(array, &item);
                    busy_until[array] = Some(end);
                    finish[array] = end;
                }
                None => busy_until[array] = None,
            }
        }
        let Some(next) = busy_until.iter().flatten().copied().reduce(f64::min) else {
            break;
        };
        now = next;
        requesters = (0..n).filter(|&a| busy_until[a] == Some(now)).collect();
    }
    ServiceOutcome {
        makespan: finish.iter().copied().fold(0.0, f64::max),
        executed,
        finish,
        steals: wqm.into_steal_log(),
        starved_rounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmm::partition;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sizes(qs: &[WorkQueue]) -> Vec<usize> {
        qs.iter().map(WorkQueue::counter).collect()
    }

    fn grid_of(tiles: usize) -> TileGrid {
        partition(1, tiles, 1, 1, 1).unwrap()
    }

    #[test]
    fn partition_examples() {
        let conv1 = partition(96, 3025, 363, 128, 128).unwrap();
        assert_eq!(
            sizes(&partition_workload(&conv1, 2, PartitionPolicy::RoundRobin).unwrap()),
            vec![12, 12]
        );
        assert_eq!(
            sizes(&partition_workload(&grid_of(1), 4, PartitionPolicy::RoundRobin).unwrap()),
            vec![1, 0, 0, 0]
        );
        assert_eq!(
            sizes(&partition_workload(&grid_of(7), 3, PartitionPolicy::RoundRobin).unwrap()),
            vec![3, 2, 2]
        );
        assert_eq!(
            sizes(&partition_workload(&grid_of(7), 3, PartitionPolicy::Contiguous).unwrap()),
            vec![3, 2, 2]
        );
        assert!(partition_workload(&grid_of(7), 0, PartitionPolicy::RoundRobin).is_err());
    }

    #[test]
    fn round_robin_assignment_order() {
        let qs = partition_workload(&grid_of(7), 3, PartitionPolicy::RoundRobin).unwrap();
        let ids: Vec<Vec<usize>> = qs
            .iter()
            .map(|q| q.pending().map(|w| w.id).collect())
            .collect();
        assert_eq!(ids, vec![vec![0, 3, 6], vec![1, 4], vec![2, 5]]);
    }

    #[test]
    fn victim_selection() {
        assert_eq!(select_victim(&[0, 5, 3, 2], 0, 0), Some(1));
        assert_eq!(select_victim(&[0, 0, 0, 0], 0, 0), None);
        assert_eq!(select_victim(&[3, 0], 0, 0), None);
        assert_eq!(select_victim(&[0, 4, 4, 0], 0, 2), Some(2));
        assert_eq!(select_victim(&[0, 4, 4, 0], 3, 0), Some(1));
    }

    #[test]
    fn concurrent_thieves_split_tied_victims() {
        let mut qs: Vec<WorkQueue> = (0..4).map(WorkQueue::new).collect();
        let mut id = 0;
        for q in [1, 2] {
            for _ in 0..4 {
                qs[q].push(WorkItem {
                    id,
                    i: 0,
                    j: id,
                    s_i: 1,
                    s_j: 1,
                    k: 1,
                });
                id += 1;
            }
        }
        let mut wqm = Wqm::new(qs.clone(), true);
        wqm.arbitrate(0.0, &[3, 0]);
        let victims: Vec<(usize, usize)> = wqm
            .steal_log()
            .iter()
            .map(|e| (e.thief, e.victim))
            .collect();
        assert_eq!(victims, vec![(0, 1), (3, 2)]);

        // Same requests, pointer starting elsewhere: order flips, still one each.
        let mut wqm = Wqm::new(qs, true);
        wqm.rr = 2;
        wqm.arbitrate(0.0, &[0, 3]);
        let victims: Vec<(usize, usize)> = wqm
            .steal_log()
            .iter()
            .map(|e| (e.thief, e.victim))
            .collect();
        assert_eq!(victims, vec![(3, 2), (0, 1)]);
    }

    #[test]
    fn steal_takes_tail() {
        let mut qs: Vec<WorkQueue> = (0..2).map(WorkQueue::new).collect();
        for id in 1..=3 {
            qs[1].push(WorkItem {
                id,
                i: 0,
                j: id,
                s_i: 1,
                s_j: 1,
                k: 1,
            });
        }
        let mut wqm = Wqm::new(qs, true);
        assert_eq!(wqm.steal(0.0, 0, 1).unwrap().id, 3);
        assert_eq!(
            wqm.queues()[1].pending().map(|w| w.id).collect::<Vec<_>>(),
            vec![1, 2]
        );
        assert_eq!(wqm.counters(), vec![1, 2]);
        assert!(wqm.queues().iter().all(WorkQueue::is_coherent));

        let mut qs: Vec<WorkQueue> = (0..2).map(WorkQueue::new).collect();
        qs[1].push(WorkItem {
            id: 9,
            i: 0,
            j: 0,
            s_i: 1,
            s_j: 1,
            k: 1,
        });
        let mut wqm = Wqm::new(qs, true);
        assert_eq!(wqm.steal(0.0, 0, 1).unwrap().id, 9);
        assert_eq!(wqm.counters(), vec![1, 0]);
        assert!(matches!(
            wqm.steal(0.0, 0, 1),
            Err(Error::VictimEmpty { victim: 1 })
        ));
    }

    #[test]
    fn stealing_helps_slow_array() {
        // Array 1 runs every task in 2 time units, array 0 in 1.
        let qs = partition_workload(&grid_of(8), 2, PartitionPolicy::RoundRobin).unwrap();
        let rate = |a: usize, _: &WorkItem| if a == 1 { 2.0 } else { 1.0 };
        let no_steal = simulate_service(qs.clone(), false, rate);
        let steal = simulate_service(qs, true, rate);
        assert_eq!(no_steal.makespan, 8.0);
        assert_eq!(steal.makespan, 6.0);
        assert_eq!(steal.steals.len(), 1);
        assert_eq!(steal.executed[0].len() + steal.executed[1].len(), 8);
    }

    #[test]
    fn steal_log_csv() {
        let qs = partition_workload(&grid_of(8), 2, PartitionPolicy::RoundRobin).unwrap();
        let out = simulate_service(qs, true, |a, _| if a == 1 { 2.0 } else { 1.0 });
        let mut buf = Vec::new();
        write_steal_csv(&out.steals, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "time,thief,victim,item,victim_counter\n4.0,0,1,7,2\n");
    }

    proptest! {
        #[test]
        fn exactly_once_and_coherent(
            tiles in 1usize..200, n_p in 1usize..6, seed in any::<u64>(), contiguous in any::<bool>(),
        ) {
            let policy = if contiguous { PartitionPolicy::Contiguous } else { PartitionPolicy::RoundRobin };
            let qs = partition_workload(&grid_of(tiles), n_p, policy).unwrap();
            let c = sizes(&qs);
            prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = simulate_service(qs, true, |_, _| rng.gen_range(0.1..5.0));
            let mut all: Vec<usize> = out.executed.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..tiles).collect::<Vec<_>>());
            prop_assert_eq!(out.starved_rounds, 0);
        }

        #[test]
        fn stealing_never_hurts(tiles in 1usize..120, n_p in 2usize..5, slow in 1u32..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rates: Vec<f64> = (0..n_p).map(|_| rng.gen_range(1..=slow) as f64).collect();
            let qs = partition_workload(&grid_of(tiles), n_p, PartitionPolicy::RoundRobin).unwrap();
            let with = simulate_service(qs.clone(), true, |a, _| rates[a]);
            let without = simulate_service(qs, false, |a, _| rates[a]);
            prop_assert!(with.makespan <= without.makespan);
        }
    }
}
