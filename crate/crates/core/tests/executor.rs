use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use ragglom::datagen::{generate, BoxLayout, SyntheticSpec};
use ragglom::executor::{run_distributed, ExecOptions, InProcessRunner};
use ragglom::octree::{agglomerate_recursive, ChunkAddress, PlanParams, TaskPlan};
use ragglom::store::{ChunkStore, RunConfig};
use ragglom::{Error, FixedAffinity, LinkageKind};

fn dataset(dir: &std::path::Path, seed: u64) -> ChunkStore {
    let spec = SyntheticSpec::new([32, 32, 32], [8, 8, 8], BoxLayout::Bricks { cells: [8, 8, 8] }, seed);
    let ds = generate(&spec).unwrap();
    let mut store = ChunkStore::create(dir).unwrap();
    ds.write_to(&mut store).unwrap();
    ChunkStore::open(dir).unwrap()
}

fn config() -> RunConfig {
    RunConfig {
        kind: LinkageKind::Mean,
        threshold: FixedAffinity::new(300_000).unwrap(),
        plan: PlanParams { depth: None, leaf_threshold: 0 },
    }
}

fn run(store: &ChunkStore, name: &str, opts: &ExecOptions) -> Result<Vec<u8>, Error> {
    let cfg = config();
    let plan = TaskPlan::new(store, cfg.plan)?;
    let rs = store.run(name);
    let runner = InProcessRunner { source: store, run: &rs, plan: &plan, cfg };
    let out = run_distributed(&runner, &rs, &plan, &cfg, opts)?;
    assert_eq!(out.levels.len(), out.dendrogram.len());
    Ok(std::fs::read(rs.final_dendrogram_path()).unwrap())
}

#[test]
fn worker_count_and_resume_do_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let store = dataset(dir.path(), 3);
    let one = run(&store, "w1", &ExecOptions::default()).unwrap();
    let eight = run(&store, "w8", &ExecOptions { workers: 8, ..Default::default() }).unwrap();
    assert_eq!(one, eight);

    let stop = ExecOptions { workers: 3, stop_after: Some(20), ..Default::default() };
    assert!(matches!(run(&store, "resume", &stop), Err(Error::Interrupted(n)) if n >= 20));
    let resumed = run(&store, "resume", &ExecOptions { workers: 2, ..Default::default() }).unwrap();
    assert_eq!(one, resumed);

    // In-process recursion agrees with the executor.
    let plan = TaskPlan::new(&store, config().plan).unwrap();
    let rec = agglomerate_recursive(&plan, plan.root(), &store, LinkageKind::Mean, config().threshold).unwrap();
    assert_eq!(ragglom::format::encode_dendrogram(&rec.dendrogram), one);
}

#[test]
fn transient_faults_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let store = dataset(dir.path(), 4);
    let clean = run(&store, "clean", &ExecOptions::default()).unwrap();
    let fault = Arc::new(|a: &ChunkAddress, attempt: u32| a.level == 1 && attempt < 3);
    let faulty = run(&store, "faulty", &ExecOptions { workers: 4, fault: Some(fault), ..Default::default() }).unwrap();
    assert_eq!(clean, faulty);
}

#[test]
fn repeatedly_failing_task_poisons_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = dataset(dir.path(), 5);
    let calls = Arc::new(AtomicU32::new(0));
    let c = calls.clone();
    let target = ChunkAddress::new(1, [1, 0, 1]);
    let fault = Arc::new(move |a: &ChunkAddress, _| {
        if *a == target {
            c.fetch_add(1, Ordering::SeqCst);
            true
        } else {
            false
        }
    });
    let err = run(&store, "p", &ExecOptions { workers: 2, fault: Some(fault), ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::Poisoned { address, attempts: 3, .. } if address == target), "{err}");
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn changed_parameters_refuse_to_resume() {
    let dir = tempfile::tempdir().unwrap();
    let store = dataset(dir.path(), 6);
    run(&store, "r", &ExecOptions::default()).unwrap();
    let cfg = RunConfig { threshold: FixedAffinity::new(400_000).unwrap(), ..config() };
    let plan = TaskPlan::new(&store, cfg.plan).unwrap();
    let rs = store.run("r");
    let runner = InProcessRunner { source: &store, run: &rs, plan: &plan, cfg };
    assert!(matches!(
        run_distributed(&runner, &rs, &plan, &cfg, &ExecOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn corrupted_leaf_is_reported_not_retried_forever() {
    let dir = tempfile::tempdir().unwrap();
    let store = dataset(dir.path(), 7);
    let p = store.leaf_path([1, 2, 3]);
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    let err = run(&store, "c", &ExecOptions::default()).unwrap_err();
    assert!(err.is_corruption(), "{err}");
}
