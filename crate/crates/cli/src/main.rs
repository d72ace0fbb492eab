use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ragglom::agglomerate::agglomerate_generic;
use ragglom::datagen::{self, AffinityModel, BoxLayout, ObjectModel, SyntheticSpec};
use ragglom::executor::{self, ExecOptions, InProcessRunner, RunReport, TaskRunner};
use ragglom::octree::{load_global, ChunkAddress, LeafSource, PlanParams, TaskPlan, DEFAULT_LEAF_THRESHOLD};
use ragglom::segmentation::{self, RowDiff, Verdict};
use ragglom::store::{self, ChunkStore, RunConfig, DEFAULT_RUN};
use ragglom::{Error, FixedAffinity, LinkageKind};

const EXIT_DIFFERENT: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CORRUPT: u8 = 3;
const EXIT_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "ragglom", version, about = "Chunked agglomeration of region adjacency graphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic pre-chunked dataset.
    Generate(GenerateArgs),
    /// Cluster the whole dataset in one graph.
    Run(RunArgs),
    /// Cluster chunk by chunk over the octree.
    RunDist(RunDistArgs),
    /// Execute a single task of a started run (used by --processes).
    Worker(WorkerArgs),
    /// Turn a dendrogram into a flat segmentation.
    Flatten(FlattenArgs),
    /// Compare two dendrograms.
    Verify(VerifyArgs),
    /// Per-level merge statistics of a finished run.
    Stats(StatsArgs),
    /// Score a segmentation against the planted objects.
    Score(ScoreArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Uniform,
    Grid,
    Bricks,
}

#[derive(Clone, Copy, ValueEnum)]
enum Planting {
    Grown,
    LeafAligned,
    Singletons,
}

#[derive(Args)]
struct GenerateArgs {
    /// Lattice size in voxels, X,Y,Z.
    #[arg(long, value_parser = parse_triple)]
    dims: [u32; 3],
    /// Leaf chunk size in voxels.
    #[arg(long, value_parser = parse_triple)]
    leaf: [u32; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "bricks")]
    layout: Layout,
    /// Boxes per axis (grid, bricks); default is a quarter of --dims.
    #[arg(long, value_parser = parse_triple)]
    cells: Option<[u32; 3]>,
    /// Box size in voxels (uniform).
    #[arg(long, value_parser = parse_triple, default_value = "1,1,1")]
    box_size: [u32; 3],
    #[arg(long, value_enum, default_value = "grown")]
    planting: Planting,
    /// Planted objects (grown).
    #[arg(long, default_value_t = 32)]
    objects: u32,
    /// Intra-object affinity window, LO,HI.
    #[arg(long, value_parser = parse_window, default_value = "0.25,1")]
    intra: (FixedAffinity, FixedAffinity),
    /// Inter-object affinity window, LO,HI.
    #[arg(long, value_parser = parse_window, default_value = "0,0.25")]
    inter: (FixedAffinity, FixedAffinity),
    /// Probability a sample comes from the other window.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args)]
struct Common {
    #[arg(long, env = "RAGGLOM_STORE")]
    store: PathBuf,
    #[arg(long, default_value = "mean")]
    linkage: LinkageKind,
    /// Decimal in [0, 1] with at most six places.
    #[arg(long, value_parser = parse_threshold)]
    threshold: FixedAffinity,
    /// Emit the report as JSON lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Output dendrogram (default: <store>/global.dend).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunDistArgs {
    #[command(flatten)]
    common: Common,
    /// Stitching levels above the task leaves (default: full octree).
    #[arg(long)]
    depth: Option<u8>,
    /// Chunks whose leaves hold at most this many edges run as one task.
    #[arg(long, default_value_t = DEFAULT_LEAF_THRESHOLD)]
    leaf_threshold: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Run directory name inside the store.
    #[arg(long, default_value = DEFAULT_RUN)]
    run: String,
    /// Run each task in a child `ragglom worker` process.
    #[arg(long)]
    processes: bool,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, env = "RAGGLOM_STORE")]
    store: PathBuf,
    #[arg(long, default_value = DEFAULT_RUN)]
    run: String,
    /// Task address, LEVEL/X_Y_Z.
    #[arg(long)]
    task: ChunkAddress,
}

#[derive(Args)]
struct FlattenArgs {
    dendrogram: PathBuf,
    /// Store whose supervoxels are mapped.
    #[arg(long, env = "RAGGLOM_STORE")]
    store: PathBuf,
    /// Apply only rows at or above this threshold.
    #[arg(long, value_parser = parse_threshold)]
    threshold: Option<FixedAffinity>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, env = "RAGGLOM_STORE")]
    store: PathBuf,
    #[arg(long, default_value = DEFAULT_RUN)]
    run: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ScoreArgs {
    segmentation: PathBuf,
    #[arg(long, env = "RAGGLOM_STORE")]
    store: PathBuf,
}

fn parse_triple(s: &str) -> Result<[u32; 3], String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected X,Y,Z, got {s:?}"))
}

fn parse_threshold(s: &str) -> Result<FixedAffinity, String> {
    FixedAffinity::parse_decimal(s).map_err(|e| e.to_string())
}

fn parse_window(s: &str) -> Result<(FixedAffinity, FixedAffinity), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    Ok((parse_threshold(lo.trim())?, parse_threshold(hi.trim())?))
}

fn open_store(path: &Path) -> Result<ChunkStore> {
    ChunkStore::open(path).with_context(|| format!("opening store {}", path.display()))
}

fn emit(json: bool, records: &[serde_json::Value], text: &str) {
    let mut out = std::io::stdout().lock();
    if json {
        for r in records {
            let _ = writeln!(out, "{r}");
        }
    } else {
        let _ = write!(out, "{text}");
    }
}

fn report_records(store: &Path, run: &str, seed: u64, r: &RunReport) -> Vec<serde_json::Value> {
    let mut v = vec![json!({
        "record": "config",
        "store": store.display().to_string(),
        "run": run,
        "seed": seed,
        "linkage": r.linkage,
        "threshold": r.threshold,
        "depth": r.depth,
        "leaf_threshold": r.leaf_threshold,
        "workers": r.workers,
    })];
    for l in &r.levels {
        let mut rec = serde_json::to_value(l).unwrap();
        rec["record"] = json!("level");
        v.push(rec);
    }
    v.push(json!({
        "record": "total",
        "tasks": r.tasks,
        "tasks_run": r.tasks_run,
        "tasks_skipped": r.tasks_skipped,
        "retries": r.retries,
        "merges": r.merges,
        "peak_rss_kb": r.peak_rss_kb,
        "wall_ms": r.wall_ms,
    }));
    v
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    // Boxes average four voxels per side unless told otherwise.
    let cells = a.cells.unwrap_or(a.dims.map(|d| (d / 4).max(1)));
    let layout = match a.layout {
        Layout::Uniform => BoxLayout::Uniform { size: a.box_size },
        Layout::Grid => BoxLayout::Grid { cells },
        Layout::Bricks => BoxLayout::Bricks { cells },
    };
    let mut spec = SyntheticSpec::new(a.dims, a.leaf, layout, a.seed);
    spec.objects = match a.planting {
        Planting::Grown => ObjectModel::Grown { objects: a.objects },
        Planting::LeafAligned => ObjectModel::LeafAligned,
        Planting::Singletons => ObjectModel::Singletons,
    };
    spec.affinity = AffinityModel::windows(
        (a.intra.0.get(), a.intra.1.get()),
        (a.inter.0.get(), a.inter.1.get()),
        a.noise,
    )?;
    let ds = datagen::generate(&spec)?;
    let mut store = ChunkStore::create(&a.out)?;
    ds.write_to(&mut store)?;
    let m = &ds.meta;
    println!(
        "segments={} edges={} voxel_pairs={} leaves={} distinct_affinities={}",
        m.segments,
        m.edges,
        m.voxel_pairs,
        ds.leaves.len(),
        m.distinct_affinities
    );
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let c = &a.common;
    let store = open_store(&c.store)?;
    let t = Instant::now();
    let mut g = load_global(&store, c.linkage)?;
    let edges = g.edge_count();
    let d = agglomerate_generic(&mut g, c.linkage, c.threshold);
    let out = a.out.unwrap_or_else(|| c.store.join("global.dend"));
    store::write_dendrogram(&out, &d)?;
    let ms = t.elapsed().as_millis() as u64;
    let rss = executor::peak_rss_kb();
    let rec = json!({
        "record": "global",
        "store": c.store.display().to_string(),
        "linkage": c.linkage.to_string(),
        "threshold": c.threshold.to_string(),
        "edges": edges,
        "merges": d.len(),
        "peak_rss_kb": rss,
        "wall_ms": ms,
        "dendrogram": out.display().to_string(),
    });
    let text = format!(
        "config linkage={} threshold={}\ntotal edges={} merges={} peak_rss_kb={} wall_ms={}\ndendrogram {}\n",
        c.linkage,
        c.threshold,
        edges,
        d.len(),
        rss.map_or("n/a".into(), |k| k.to_string()),
        ms,
        out.display()
    );
    emit(c.json, &[rec], &text);
    Ok(())
}

struct ProcessRunner {
    exe: PathBuf,
    store: PathBuf,
    run: String,
}

impl TaskRunner for ProcessRunner {
    fn run_task(&self, addr: ChunkAddress) -> ragglom::Result<()> {
        let status = Command::new(&self.exe)
            .arg("worker")
            .arg("--store")
            .arg(&self.store)
            .args(["--run", &self.run, "--task", &addr.to_string()])
            .status()
            .map_err(|e| Error::TaskFailed {
                address: addr,
                reason: format!("spawning worker: {e}"),
            })?;
        if status.success() {
            Ok(())
        } else {
            Err(Error::TaskFailed {
                address: addr,
                reason: format!("worker exited with {status}"),
            })
        }
    }
}

fn cmd_run_dist(a: RunDistArgs) -> Result<()> {
    let c = &a.common;
    let store = open_store(&c.store)?;
    let cfg = RunConfig {
        kind: c.linkage,
        threshold: c.threshold,
        plan: PlanParams {
            depth: a.depth,
            leaf_threshold: a.leaf_threshold,
        },
    };
    let plan = TaskPlan::new(&store, cfg.plan)?;
    let run = store.run(&a.run);
    let opts = ExecOptions {
        workers: a.workers,
        ..Default::default()
    };
    let outcome = if a.processes {
        let runner = ProcessRunner {
            exe: std::env::current_exe()?,
            store: c.store.clone(),
            run: a.run.clone(),
        };
        executor::run_distributed(&runner, &run, &plan, &cfg, &opts)?
    } else {
        let runner = InProcessRunner {
            source: &store,
            run: &run,
            plan: &plan,
            cfg,
        };
        executor::run_distributed(&runner, &run, &plan, &cfg, &opts)?
    };
    let records = report_records(&c.store, &a.run, store.meta()?.seed, &outcome.report);
    let lines: String = records.iter().map(|r| format!("{r}\n")).collect();
    store::write_atomic(&run.dir().join("report.jsonl"), lines.as_bytes())?;
    let text = format!(
        "{}dendrogram {}\n",
        outcome.report.to_text(),
        run.final_dendrogram_path().display()
    );
    emit(c.json, &records, &text);
    Ok(())
}

fn cmd_worker(a: WorkerArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let run = store.run(&a.run);
    let cfg = run.config()?;
    let plan = TaskPlan::new(&store, cfg.plan)?;
    if !plan.post_order().contains(&a.task) {
        bail!(Error::Config(format!("{} is not a task of this run", a.task)));
    }
    executor::execute_task(&store, &run, &plan, &cfg, a.task)?;
    Ok(())
}

fn store_segment_ids(store: &ChunkStore) -> Result<Vec<u64>> {
    let geom = store.geometry();
    let mut ids = Vec::new();
    for leaf in geom.leaves_under(&geom.root()) {
        ids.extend(store.get_leaf(leaf)?.nodes.iter().map(|(id, _)| id.get()));
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

fn cmd_flatten(a: FlattenArgs) -> Result<()> {
    let mut d = store::read_dendrogram(&a.dendrogram)?;
    if let Some(t) = a.threshold {
        if t < d.threshold {
            bail!(Error::Config(format!(
                "dendrogram was truncated at {}; cannot flatten at {t}",
                d.threshold
            )));
        }
        let kind = d.kind;
        d.rows.retain(|r| r.stat.reaches(kind, t));
    }
    let store = open_store(&a.store)?;
    let map = segmentation::flatten(&d, store_segment_ids(&store)?)?;
    store::write_segmentation(&a.out, &map)?;
    let segments = map.iter().filter(|(s, r)| s == r).count();
    println!("supervoxels={} segments={} rows_applied={}", map.len(), segments, d.len());
    Ok(())
}

fn describe(r: &RowDiff) -> String {
    let (tag, row) = match r {
        RowDiff::OnlyInFirst(row) => ("-", row),
        RowDiff::OnlyInSecond(row) => ("+", row),
    };
    format!(
        "{tag} {} {} sum={} count={}",
        row.survivor,
        row.absorbed,
        row.stat.sum(),
        row.stat.count()
    )
}

fn cmd_verify(a: VerifyArgs) -> Result<Verdict> {
    let da = store::read_dendrogram(&a.a)?;
    let db = store::read_dendrogram(&a.b)?;
    let c = segmentation::compare(&da, &db)?;
    println!("{}", c.verdict);
    if c.verdict != Verdict::Equal {
        println!("differing rows: {}", c.differing_rows);
        for r in &c.sample {
            println!("{}", describe(r));
        }
    }
    Ok(c.verdict)
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let path = a.store.join(&a.run).join("report.jsonl");
    let file = std::fs::File::open(&path)
        .with_context(|| format!("no report at {}; run run-dist first", path.display()))?;
    let mut levels = Vec::new();
    let mut total = None;
    for line in std::io::BufReader::new(file).lines() {
        let v: serde_json::Value = serde_json::from_str(&line?)?;
        match v["record"].as_str() {
            Some("level") => levels.push(v),
            Some("total") => total = Some(v),
            _ => {}
        }
    }
    let merges: u64 = levels.iter().map(|l| l["merges"].as_u64().unwrap_or(0)).sum();
    let fraction = |m: u64| if merges == 0 { 0.0 } else { m as f64 / merges as f64 };
    if a.json {
        for l in &levels {
            let m = l["merges"].as_u64().unwrap_or(0);
            println!(
                "{}",
                json!({
                    "record": "stats",
                    "level": l["level"],
                    "tasks": l["tasks"],
                    "merges": m,
                    "fraction": fraction(m),
                    "residual_edges_peak": l["residual_edges_peak"],
                    "wall_ms": l["wall_ms"],
                })
            );
        }
        return Ok(());
    }
    println!("{:>5} {:>7} {:>10} {:>9} {:>14} {:>9}", "level", "tasks", "merges", "fraction", "residual_edges", "wall_ms");
    for l in &levels {
        let m = l["merges"].as_u64().unwrap_or(0);
        println!(
            "{:>5} {:>7} {:>10} {:>8.2}% {:>14} {:>9}",
            l["level"],
            l["tasks"],
            m,
            100.0 * fraction(m),
            l["residual_edges_peak"],
            l["wall_ms"]
        );
    }
    if let Some(t) = total {
        println!("total merges={} peak_rss_kb={} wall_ms={}", merges, t["peak_rss_kb"], t["wall_ms"]);
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let truth = store.get_truth()?;
    let seg = store::read_segmentation(&a.segmentation)?;
    let s = datagen::score_against_truth(&seg, &truth);
    println!("splits={} merges={} rand_index={:.6}", s.splits, s.merges, s.rand_index);
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_corruption() => EXIT_CORRUPT,
        Some(Error::Io { .. }) => EXIT_CORRUPT,
        Some(Error::Malformed(_)) => EXIT_CORRUPT,
        Some(Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::RunDist(a) => cmd_run_dist(a),
        Cmd::Worker(a) => cmd_worker(a),
        Cmd::Flatten(a) => cmd_flatten(a),
        Cmd::Verify(a) => match cmd_verify(a) {
            Ok(Verdict::Equal) => Ok(()),
            Ok(_) => return ExitCode::from(EXIT_DIFFERENT),
            Err(e) => Err(e),
        },
        Cmd::Stats(a) => cmd_stats(a),
        Cmd::Score(a) => cmd_score(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
