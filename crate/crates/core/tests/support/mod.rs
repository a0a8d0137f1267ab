//! Independent oracles and random schedule drivers shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use irsim_core::datamgr::{CommitOutcome, DataConfig, DataManager, StorageMode, ValidationMode, ValidationStats};
use irsim_core::memory::{Memory, MemoryConfig};
use irsim_core::sim::{CrashInjector, CrashPoint, CrashSite};
use irsim_core::{fold_read, write_value, Action, FinishedTask, ObjectId, SimError, TaskId, Workload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A committed transaction as the oracles see it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Committed {
    pub task: TaskId,
    pub seq: u64,
    pub begin: i64,
    pub reads: Vec<(ObjectId, Option<TaskId>)>,
    pub writes: Vec<ObjectId>,
}

impl From<&FinishedTask> for Committed {
    fn from(f: &FinishedTask) -> Self {
        Self {
            task: f.task,
            seq: f.commit_seq,
            begin: f.interval.begin,
            reads: f.reads.clone(),
            writes: f.writes.iter().map(|(o, _)| *o).collect(),
        }
    }
}

/// Builds the conflict graph (write-read, write-write, read-write edges)
/// from the recorded versions and looks for a cycle.
pub fn precedence_cycle(history: &[Committed]) -> Option<Vec<TaskId>> {
    let mut by_seq: Vec<&Committed> = history.iter().collect();
    by_seq.sort_by_key(|c| c.seq);
    // version chain per object in installation order
    let mut chain: BTreeMap<ObjectId, Vec<TaskId>> = BTreeMap::new();
    for c in &by_seq {
        for o in &c.writes {
            chain.entry(*o).or_default().push(c.task);
        }
    }
    let mut edges: BTreeMap<TaskId, BTreeSet<TaskId>> = BTreeMap::new();
    let mut add = |a: TaskId, b: TaskId| {
        if a != b {
            edges.entry(a).or_default().insert(b);
        }
    };
    for writers in chain.values() {
        for w in writers.windows(2) {
            add(w[0], w[1]);
        }
    }
    for c in history {
        for (o, version) in &c.reads {
            let writers = chain.get(o).map(Vec::as_slice).unwrap_or(&[]);
            let next = match version {
                Some(w) => {
                    add(*w, c.task);
                    writers.iter().position(|x| x == w).map(|i| i + 1)
                }
                None => Some(0),
            };
            if let Some(&k) = next.and_then(|i| writers.get(i)) {
                add(c.task, k);
            }
        }
    }
    // depth-first search for a back edge
    let nodes: Vec<TaskId> = history.iter().map(|c| c.task).collect();
    let mut state: BTreeMap<TaskId, u8> = BTreeMap::new();
    fn visit(
        n: TaskId,
        edges: &BTreeMap<TaskId, BTreeSet<TaskId>>,
        state: &mut BTreeMap<TaskId, u8>,
        path: &mut Vec<TaskId>,
    ) -> Option<Vec<TaskId>> {
        match state.get(&n) {
            Some(2) => return None,
            Some(1) => {
                let i = path.iter().position(|x| *x == n).unwrap();
                return Some(path[i..].to_vec());
            }
            _ => {}
        }
        state.insert(n, 1);
        path.push(n);
        for m in edges.get(&n).into_iter().flatten() {
            if let Some(c) = visit(*m, edges, state, path) {
                return Some(c);
            }
        }
        path.pop();
        state.insert(n, 2);
        None
    }
    for n in nodes {
        if let Some(c) = visit(n, &edges, &mut state, &mut Vec::new()) {
            return Some(c);
        }
    }
    None
}

/// Whether executing the tasks one at a time in `order` reproduces every
/// recorded read and the final installed versions.
pub fn serial_order_matches(history: &[Committed], order: &[usize]) -> bool {
    let mut last: BTreeMap<ObjectId, TaskId> = BTreeMap::new();
    for &i in order {
        let c = &history[i];
        for (o, version) in &c.reads {
            if last.get(o).copied() != *version {
                return false;
            }
        }
        for o in &c.writes {
            last.insert(*o, c.task);
        }
    }
    let mut installed: BTreeMap<ObjectId, (u64, TaskId)> = BTreeMap::new();
    for c in history {
        for o in &c.writes {
            let e = installed.entry(*o).or_insert((c.seq, c.task));
            if c.seq > e.0 {
                *e = (c.seq, c.task);
            }
        }
    }
    installed.into_iter().all(|(o, (_, t))| last.get(&o) == Some(&t))
}

/// Tries every permutation; feasible for the handful of tasks a schedule
/// commits.
pub fn brute_force_serial_order(history: &[Committed]) -> Option<Vec<TaskId>> {
    fn go(history: &[Committed], order: &mut Vec<usize>, used: &mut Vec<bool>) -> bool {
        if order.len() == history.len() {
            return serial_order_matches(history, order);
        }
        for i in 0..history.len() {
            if !used[i] {
                used[i] = true;
                order.push(i);
                if go(history, order, used) {
                    return true;
                }
                order.pop();
                used[i] = false;
            }
        }
        false
    }
    let mut order = Vec::new();
    let mut used = vec![false; history.len()];
    go(history, &mut order, &mut used).then(|| order.into_iter().map(|i| history[i].task).collect())
}

/// The order the runtime claims: interval begin, ties by commit order.
pub fn interval_order(history: &[Committed]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..history.len()).collect();
    idx.sort_by_key(|&i| (history[i].begin, history[i].seq));
    idx
}

/// Re-executes finished tasks one after another in interval order from
/// the initial values. Also checks every task wrote what the replay did.
pub fn serial_replay(
    initial: &[Vec<u8>],
    workloads: &[Workload],
    finished: &[FinishedTask],
) -> Result<Vec<Vec<u8>>, String> {
    let size = initial.first().map_or(0, Vec::len);
    let mut order: Vec<&FinishedTask> = finished.iter().collect();
    order.sort_by_key(|f| (f.interval.begin, f.commit_seq));
    let mut state = initial.to_vec();
    for f in order {
        let mut digest = [0u8; 32];
        let mut own: BTreeMap<ObjectId, Vec<u8>> = BTreeMap::new();
        let mut writes = 0u32;
        for step in &workloads[f.workload].script {
            match step.action {
                Action::Read(o) => {
                    let v = own.get(&o).unwrap_or(&state[o as usize]);
                    digest = fold_read(&digest, o, v);
                }
                Action::Write(o) => {
                    own.insert(o, write_value(f.task, o, writes, &digest, size));
                    writes += 1;
                }
                Action::Commit => {}
            }
        }
        let recorded: BTreeMap<ObjectId, &Vec<u8>> = f.writes.iter().map(|(o, v)| (*o, v)).collect();
        let replayed: BTreeMap<ObjectId, &Vec<u8>> = own.iter().map(|(o, v)| (*o, v)).collect();
        if recorded != replayed {
            return Err(format!("{} wrote different values than its serial replay", f.task));
        }
        for (o, v) in own {
            state[o as usize] = v;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub history: Vec<Committed>,
    pub commit_stats: ValidationStats,
    pub full_stats: ValidationStats,
    pub cross_check_mismatches: u64,
    pub aborts: u64,
    pub failures: u64,
    pub tasks: usize,
}

struct Script {
    id: TaskId,
    steps: Vec<Action>,
    pc: usize,
    lengthy: bool,
    done: bool,
    digest: [u8; 32],
    writes: u32,
}

impl Script {
    fn restart(&mut self) {
        self.pc = 0;
        self.digest = [0; 32];
        self.writes = 0;
    }
}

/// Drives the data manager directly through a random interleaving of up
/// to six tasks over up to five objects, with random power failures and
/// crashes inside commits.
pub fn random_schedule(seed: u64, mode: ValidationMode) -> Result<ScheduleOutcome, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects: u16 = rng.gen_range(1..=5);
    let n_tasks = rng.gen_range(1..=6);
    let cfg = DataConfig {
        object_count: objects,
        object_size: 8,
        validation: mode,
        cross_check: true,
        ..DataConfig::default()
    };
    let mut mem = Memory::new(&MemoryConfig::default());
    let mut dm = DataManager::new(&mut mem, &cfg, StorageMode::Shadow)?;
    let sites = [CrashSite::ShadowCopy, CrashSite::AddressMapWrite, CrashSite::BitmapToggle];
    let mut crash = CrashInjector::new(
        (0..rng.gen_range(0..=3)).map(|_| CrashPoint::new(sites[rng.gen_range(0..3)], rng.gen_range(1..=6))),
    );
    let mut tasks: Vec<Script> = (0..n_tasks)
        .map(|i| {
            let mut steps: Vec<Action> = (0..rng.gen_range(1..=5))
                .map(|_| {
                    let o = rng.gen_range(0..objects);
                    if rng.gen_bool(0.5) {
                        Action::Read(o)
                    } else {
                        Action::Write(o)
                    }
                })
                .collect();
            steps.push(Action::Commit);
            Script {
                id: TaskId(i as u32 + 1),
                steps,
                pc: 0,
                lengthy: rng.gen_bool(0.3),
                done: false,
                digest: [0; 32],
                writes: 0,
            }
        })
        .collect();
    for t in &tasks {
        dm.begin(&mut mem, t.id, t.lengthy);
    }
    let mut out = ScheduleOutcome {
        history: Vec::new(),
        commit_stats: ValidationStats::default(),
        full_stats: ValidationStats::default(),
        cross_check_mismatches: 0,
        aborts: 0,
        failures: 0,
        tasks: n_tasks,
    };
    let mut ctx: u64 = 0;
    for _ in 0..400 {
        let live: Vec<usize> = (0..tasks.len()).filter(|&i| !tasks[i].done).collect();
        if live.is_empty() {
            break;
        }
        ctx += 1;
        let i = live[rng.gen_range(0..live.len())];
        let failure = rng.gen_bool(0.03);
        if failure {
            power_failure(&mut mem, &mut dm, &mut tasks, None, &mut rng);
            out.failures += 1;
            continue;
        }
        let t = &mut tasks[i];
        match t.steps[t.pc] {
            Action::Read(o) => {
                let r = dm.read(&mut mem, t.id, o)?;
                t.digest = fold_read(&t.digest, o, &r.value);
                t.pc += 1;
                if r.early_abort {
                    out.aborts += 1;
                    dm.begin(&mut mem, t.id, t.lengthy);
                    t.restart();
                }
            }
            Action::Write(o) => {
                let v = write_value(t.id, o, t.writes, &t.digest, 8);
                t.writes += 1;
                dm.write(&mut mem, t.id, o, &v)?;
                t.pc += 1;
            }
            Action::Commit => match dm.commit(&mut mem, t.id, ctx, &mut crash) {
                Ok(CommitOutcome::Committed(rec)) => {
                    t.done = true;
                    out.history.push(Committed {
                        task: rec.task,
                        seq: rec.commit_seq,
                        begin: rec.interval.begin,
                        reads: rec.reads.clone(),
                        writes: rec.writes.iter().map(|(o, _)| *o).collect(),
                    });
                    for other in rec.early_aborted {
                        let s = tasks.iter_mut().find(|s| s.id == other).expect("known task");
                        out.aborts += 1;
                        dm.begin(&mut mem, s.id, s.lengthy);
                        s.restart();
                    }
                }
                Ok(CommitOutcome::Aborted { .. }) => {
                    out.aborts += 1;
                    dm.begin(&mut mem, t.id, t.lengthy);
                    t.restart();
                }
                Err(SimError::Crash(_)) => {
                    power_failure(&mut mem, &mut dm, &mut tasks, Some(i), &mut rng);
                    out.failures += 1;
                }
                Err(e) => return Err(e),
            },
        }
    }
    out.commit_stats = dm.commit_stats;
    out.full_stats = dm.full_stats;
    out.cross_check_mismatches = dm.cross_check_mismatches;
    Ok(out)
}

/// VM is lost: short tasks restart, lengthy ones keep their progress
/// unless they were running.
fn power_failure(
    mem: &mut Memory,
    dm: &mut DataManager,
    tasks: &mut [Script],
    running: Option<usize>,
    rng: &mut ChaCha8Rng,
) {
    mem.on_power_failure();
    let lost: Vec<TaskId> = tasks.iter().filter(|t| !t.done && !t.lengthy).map(|t| t.id).collect();
    dm.on_power_failure(&lost);
    for (i, t) in tasks.iter_mut().enumerate() {
        if t.done {
            continue;
        }
        let context_lost = !t.lengthy || running == Some(i) || rng.gen_bool(0.2);
        if context_lost {
            dm.begin(mem, t.id, t.lengthy);
            t.restart();
        }
    }
}
