//! Dependency-ordered execution of a task plan over a run store.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::CommitMarker;
use crate::graph::Dendrogram;
use crate::octree::{run_leaf_task, run_stitch_task, ChunkAddress, LeafSource, TaskPlan};
use crate::store::{write_dendrogram, RunConfig, RunStore};

/// Rough in-memory cost of one residual edge (map entry, adjacency, queue slot).
const BYTES_PER_EDGE: u64 = 160;

/// Runs one task and commits its output. Children must already be committed.
pub fn execute_task(
    source: &dyn LeafSource,
    run: &RunStore,
    plan: &TaskPlan,
    cfg: &RunConfig,
    addr: ChunkAddress,
) -> Result<CommitMarker> {
    let out = if plan.is_leaf_task(&addr) {
        run_leaf_task(plan, addr, source, cfg.kind, cfg.threshold)?
    } else {
        let frozen = plan
            .children(&addr)
            .iter()
            .map(|c| run.get_frozen(c, cfg.kind))
            .collect::<Result<Vec<_>>>()?;
        run_stitch_task(plan, addr, frozen, cfg.kind, cfg.threshold)?
    };
    run.put_output(&addr, &out)
}

/// Executes a single task somewhere (a thread here, a process elsewhere).
pub trait TaskRunner: Sync {
    fn run_task(&self, addr: ChunkAddress) -> Result<()>;
}

/// Runs tasks on the calling worker thread.
pub struct InProcessRunner<'a> {
    pub source: &'a dyn LeafSource,
    pub run: &'a RunStore,
    pub plan: &'a TaskPlan,
    pub cfg: RunConfig,
}

impl TaskRunner for InProcessRunner<'_> {
    fn run_task(&self, addr: ChunkAddress) -> Result<()> {
        execute_task(self.source, self.run, self.plan, &self.cfg, addr).map(|_| ())
    }
}

/// Decides whether attempt `n` (1-based) of a task fails artificially.
pub type FaultHook = Arc<dyn Fn(&ChunkAddress, u32) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct ExecOptions {
    pub workers: usize,
    pub max_attempts: u32,
    /// Stop dispatching after this many commits, as if the run were killed.
    pub stop_after: Option<usize>,
    pub fault: Option<FaultHook>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            workers: 1,
            max_attempts: 3,
            stop_after: None,
            fault: None,
        }
    }
}

impl std::fmt::Debug for ExecOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecOptions")
            .field("workers", &self.workers)
            .field("max_attempts", &self.max_attempts)
            .field("stop_after", &self.stop_after)
            .field("fault", &self.fault.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: u8,
    pub tasks: u64,
    pub merges: u64,
    /// Largest graph (edges) clustered by one task at this level.
    pub residual_edges_peak: u64,
    /// Memory estimate of that largest task.
    pub est_task_bytes: u64,
    /// Summed task time at this level during this invocation.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub linkage: String,
    pub threshold: String,
    pub depth: Option<u8>,
    pub leaf_threshold: u64,
    pub workers: usize,
    pub tasks: u64,
    pub tasks_run: u64,
    pub tasks_skipped: u64,
    pub retries: u64,
    pub merges: u64,
    pub levels: Vec<LevelReport>,
    pub peak_rss_kb: Option<u64>,
    pub wall_ms: u64,
}

impl RunReport {
    /// Line-oriented text form: a config line, one line per level, a total line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "config linkage={} threshold={} depth={} leaf_threshold={} workers={}\n",
            self.linkage,
            self.threshold,
            self.depth.map_or("full".to_string(), |d| d.to_string()),
            self.leaf_threshold,
            self.workers
        );
        for l in &self.levels {
            s += &format!(
                "level={} tasks={} merges={} residual_edges={} est_task_bytes={} wall_ms={}\n",
                l.level, l.tasks, l.merges, l.residual_edges_peak, l.est_task_bytes, l.wall_ms
            );
        }
        s += &format!(
            "total tasks={} run={} skipped={} retries={} merges={} peak_rss_kb={} wall_ms={}\n",
            self.tasks,
            self.tasks_run,
            self.tasks_skipped,
            self.retries,
            self.merges,
            self.peak_rss_kb.map_or("n/a".to_string(), |k| k.to_string()),
            self.wall_ms
        );
        s
    }
}

/// Peak resident set size of this process in KiB (Linux only).
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dendrogram: Dendrogram,
    /// Octree level of every dendrogram row.
    pub levels: Vec<u8>,
    pub report: RunReport,
}

enum Msg {
    Done(ChunkAddress, Duration),
    Failed(ChunkAddress, Error),
}

/// Runs every task of `plan` not yet committed in `run`, then assembles the
/// global dendrogram from the committed fragments in post order.
pub fn run_distributed(
    runner: &dyn TaskRunner,
    run: &RunStore,
    plan: &TaskPlan,
    cfg: &RunConfig,
    opts: &ExecOptions,
) -> Result<RunOutcome> {
    let started = Instant::now();
    run.init(cfg)?;
    let order = plan.post_order();
    let mut waiting: FxHashMap<ChunkAddress, usize> = FxHashMap::default();
    let mut parent_of: FxHashMap<ChunkAddress, ChunkAddress> = FxHashMap::default();
    let mut ready: VecDeque<ChunkAddress> = VecDeque::new();
    let mut skipped = 0u64;
    for addr in order {
        if run.marker(addr)?.is_some() {
            skipped += 1;
            continue;
        }
        let kids = plan.children(addr);
        for c in &kids {
            parent_of.insert(*c, *addr);
        }
        let open = kids.iter().filter(|c| !run.is_committed(c)).count();
        if open == 0 {
            ready.push_back(*addr);
        } else {
            waiting.insert(*addr, open);
        }
    }
    let remaining_at_start = order.len() as u64 - skipped;
    info!("{} tasks, {} already committed", order.len(), skipped);

    let mut wall_by_level: BTreeMap<u8, Duration> = BTreeMap::new();
    let mut attempts: FxHashMap<ChunkAddress, u32> = FxHashMap::default();
    let mut retries = 0u64;
    let mut committed = 0usize;
    let mut failure: Option<Error> = None;
    let workers = opts.workers.max(1);

    std::thread::scope(|scope| {
        let (job_tx, job_rx) = mpsc::channel::<(ChunkAddress, u32)>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let (msg_tx, msg_rx) = mpsc::channel::<Msg>();
        for _ in 0..workers {
            let job_rx = Arc::clone(&job_rx);
            let msg_tx = msg_tx.clone();
            let fault = opts.fault.clone();
            scope.spawn(move || loop {
                let job = job_rx.lock().unwrap().recv();
                let Ok((addr, attempt)) = job else { break };
                let t = Instant::now();
                let res = if fault.as_ref().is_some_and(|f| f(&addr, attempt)) {
                    Err(Error::TaskFailed {
                        address: addr,
                        reason: "injected fault".into(),
                    })
                } else {
                    panic::catch_unwind(AssertUnwindSafe(|| runner.run_task(addr)))
                        .unwrap_or_else(|p| {
                            let what = p
                                .downcast_ref::<String>()
                                .cloned()
                                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                                .unwrap_or_default();
                            Err(Error::TaskFailed {
                                address: addr,
                                reason: format!("worker panicked: {what}"),
                            })
                        })
                };
                let msg = match res {
                    Ok(()) => Msg::Done(addr, t.elapsed()),
                    Err(e) => Msg::Failed(addr, e),
                };
                if msg_tx.send(msg).is_err() {
                    break;
                }
            });
        }
        drop(msg_tx);

        let mut in_flight = 0usize;
        loop {
            let stopping = failure.is_some() || opts.stop_after.is_some_and(|n| committed >= n);
            while !stopping && in_flight < workers {
                let Some(addr) = ready.pop_front() else { break };
                let attempt = attempts.entry(addr).or_default();
                *attempt += 1;
                debug!("dispatch {addr} attempt {attempt}");
                job_tx.send((addr, *attempt)).expect("workers alive");
                in_flight += 1;
            }
            if in_flight == 0 {
                break;
            }
            match msg_rx.recv().expect("workers alive") {
                Msg::Done(addr, dt) => {
                    in_flight -= 1;
                    committed += 1;
                    *wall_by_level.entry(addr.level).or_default() += dt;
                    if let Some(p) = parent_of.get(&addr) {
                        let n = waiting.get_mut(p).expect("parent waits");
                        *n -= 1;
                        if *n == 0 {
                            waiting.remove(p);
                            ready.push_back(*p);
                        }
                    }
                }
                Msg::Failed(addr, e) => {
                    in_flight -= 1;
                    let n = attempts[&addr];
                    if e.is_retriable() && n < opts.max_attempts {
                        warn!("task {addr} attempt {n} failed: {e}; retrying");
                        retries += 1;
                        ready.push_front(addr);
                    } else if failure.is_none() {
                        failure = Some(if e.is_retriable() {
                            Error::Poisoned {
                                address: addr,
                                attempts: n,
                                last: e.to_string(),
                            }
                        } else {
                            e
                        });
                    }
                }
            }
        }
        drop(job_tx);
    });

    if let Some(e) = failure {
        return Err(e);
    }
    if (committed as u64) < remaining_at_start {
        return Err(Error::Interrupted(committed));
    }

    let mut dendrogram = Dendrogram::new(cfg.kind, cfg.threshold);
    let mut levels = Vec::new();
    let mut per_level: BTreeMap<u8, LevelReport> = BTreeMap::new();
    for addr in order {
        let marker = run
            .marker(addr)?
            .ok_or_else(|| Error::MissingDependency(*addr, "uncommitted after run".into()))?;
        let part = run.get_dendrogram(addr)?;
        levels.extend(std::iter::repeat(addr.level).take(part.len()));
        dendrogram.rows.extend(part.rows);
        let l = per_level.entry(addr.level).or_insert_with(|| LevelReport {
            level: addr.level,
            ..Default::default()
        });
        l.tasks += 1;
        l.merges += marker.rows;
        l.residual_edges_peak = l.residual_edges_peak.max(marker.input_edges);
        l.est_task_bytes = l.residual_edges_peak * BYTES_PER_EDGE;
    }
    let root_frozen = run.get_frozen(&plan.root(), cfg.kind)?;
    if !root_frozen.graph.is_empty() {
        return Err(Error::Malformed(format!(
            "root chunk left {} frozen segments",
            root_frozen.graph.node_count()
        )));
    }
    write_dendrogram(&run.final_dendrogram_path(), &dendrogram)?;

    for (lvl, dt) in wall_by_level {
        if let Some(l) = per_level.get_mut(&lvl) {
            l.wall_ms = dt.as_millis() as u64;
        }
    }
    let report = RunReport {
        linkage: cfg.kind.to_string(),
        threshold: cfg.threshold.to_string(),
        depth: cfg.plan.depth,
        leaf_threshold: cfg.plan.leaf_threshold,
        workers,
        tasks: order.len() as u64,
        tasks_run: committed as u64,
        tasks_skipped: skipped,
        retries,
        merges: dendrogram.len() as u64,
        levels: per_level.into_values().collect(),
        peak_rss_kb: peak_rss_kb(),
        wall_ms: started.elapsed().as_millis() as u64,
    };
    Ok(RunOutcome {
        dendrogram,
        levels,
        report,
    })
}
