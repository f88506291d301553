//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cbt_core::container::Container;
use cbt_core::continual::{
    advance_snapshot, train_epochs, CbtConfig, TaskSnapshot, TrainLog, TrainState, UnlabeledSet,
};
use cbt_core::eval::{forgetting_report, metrics_from_csv, metrics_to_csv, train_probe, MetricsRow, StepRecord};
use cbt_core::model::{embed, init_params, Checkpoint, EncoderConfig};
use cbt_core::numerics::AdamState;
use cbt_core::ssl_bt::bt_loss_on_batch;
use cbt_core::taskgen::{generate_task, load_dataset, save_dataset, sha256_hex, verify_dataset, TaskDataset};
use cbt_core::{kvtext, Error, Result};

use crate::config::{Baseline, RunConfig};
use crate::rundir::{open_run, verify_if_managed, verify_run, ActiveRun, Opened, RunLock, RunManifest, MANIFEST};

const PROGRESS: &str = "progress.cbt";
const PARTIAL_LOG: &str = "trainlog.partial.csv";

/// Options shared by the training commands.
#[derive(Clone, Debug, Default)]
pub struct TrainOpts {
    pub resume: bool,
    /// Stop after this many epochs, leaving a resumable run behind.
    pub interrupt_after: Option<usize>,
}

/// What a command reports back to the caller.
#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub run_dir: Option<PathBuf>,
}

impl Outcome {
    fn push(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub workdir: PathBuf,
}

fn short(hash: &str) -> &str {
    &hash[..12]
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Self {
        let workdir = cfg.workdir.clone();
        Self { cfg, workdir }
    }

    pub fn data_dir(&self, task: &str) -> PathBuf {
        let c = &self.cfg.counts;
        let key = format!("{task}|{}|{}|{c:?}", self.cfg.seed, self.cfg.tile_size);
        self.workdir.join("data").join(format!(
            "{task}-s{}-{}",
            self.cfg.seed,
            short(&sha256_hex(key.as_bytes()))
        ))
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.workdir.join("runs")
    }

    fn run_dir(&self, label: &str, inputs: &str) -> PathBuf {
        let key = format!("{}|{label}|{inputs}", self.cfg.hash());
        self.runs_dir()
            .join(format!("{label}-{}", short(&sha256_hex(key.as_bytes()))))
    }

    pub fn load_task(&self, task: &str) -> Result<TaskDataset> {
        let dir = self.data_dir(task);
        if !dir.join(MANIFEST).exists() {
            return Err(Error::Data(format!(
                "no dataset for task `{task}` at {}; run gen-tasks first",
                dir.display()
            )));
        }
        load_dataset(&dir)
    }
}

pub fn gen_tasks(ctx: &Ctx) -> Result<Outcome> {
    let mut out = Outcome::default();
    for task in &ctx.cfg.tasks {
        let dir = ctx.data_dir(task);
        if dir.join(MANIFEST).exists() {
            verify_dataset(&dir)?;
            out.push(format!("{task}: verified, no regeneration ({})", dir.display()));
            continue;
        }
        let _lock = RunLock::acquire(&dir)?;
        let ds = generate_task(&ctx.cfg.domain(task)?, ctx.cfg.counts, ctx.cfg.tile_size)?;
        save_dataset(&ds, &dir)?;
        out.push(format!("{task}: generated ({})", dir.display()));
    }
    Ok(out)
}

fn method_label(method: &str, lambda: Option<f64>) -> String {
    match lambda {
        Some(l) => format!("{method}(lambda={l})"),
        None => method.to_string(),
    }
}

/// Trains one task inside `run`, checkpointing progress after every epoch so
/// the run can be resumed.
fn train_in_run(
    run: &mut ActiveRun,
    model_cfg: &EncoderConfig,
    start: &cbt_core::numerics::ParameterVector,
    data: &UnlabeledSet,
    cfg: &CbtConfig,
    snapshot: Option<&TaskSnapshot>,
    opts: &TrainOpts,
) -> Result<Option<(cbt_core::numerics::ParameterVector, TrainLog)>> {
    let progress = run.dir.join(PROGRESS);
    let (mut state, mut log) = if opts.resume && progress.exists() {
        let ck = Checkpoint::from_container(&Container::load(&progress)?)?;
        let adam = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::Format(format!("{} lacks optimizer state", progress.display())))?;
        let epochs_done: usize = kvtext::get_parsed(&ck.extra, "epochs_done")?;
        let log = TrainLog::from_csv(&fs::read_to_string(run.dir.join(PARTIAL_LOG))?)?;
        if log.epochs.len() != epochs_done {
            return Err(Error::Format(
                "partial train log disagrees with progress checkpoint".into(),
            ));
        }
        (
            TrainState {
                params: ck.params,
                adam,
                epochs_done,
            },
            log,
        )
    } else {
        (
            TrainState {
                params: start.clone(),
                adam: AdamState::new(cfg.adam, start),
                epochs_done: 0,
            },
            TrainLog::new(&data.name, model_cfg.embed_dim),
        )
    };
    while state.epochs_done < cfg.epochs {
        if opts.interrupt_after.is_some_and(|n| state.epochs_done >= n) {
            return Ok(None);
        }
        let next = state.epochs_done + 1;
        train_epochs(&mut state, model_cfg, data, cfg, snapshot, next, &mut log)?;
        let mut ck = Checkpoint::new(state.params.clone(), model_cfg.clone(), vec![data.name.clone()]);
        ck.optimizer = Some(state.adam.clone());
        ck.extra.insert("epochs_done".into(), state.epochs_done.to_string());
        run.write_scratch(PROGRESS, &ck.to_container().to_bytes())?;
        run.write_scratch(PARTIAL_LOG, log.to_csv().as_bytes())?;
    }
    Ok(Some((state.params, log)))
}

fn clear_progress(run: &ActiveRun) -> Result<()> {
    for f in [PROGRESS, PARTIAL_LOG] {
        let p = run.dir.join(f);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    Ok(())
}

fn already_complete(out: &mut Outcome, dir: &Path, m: &RunManifest) {
    out.push(format!("run already complete, artifacts verified ({})", dir.display()));
    for (name, (file, _)) in &m.artifacts {
        out.push(format!("{name}: {}", dir.join(file).display()));
    }
    out.run_dir = Some(dir.to_path_buf());
}

/// Shared tail of the continual steps: train, freeze the snapshot, persist.
fn continual_step(
    ctx: &Ctx,
    label: &str,
    inputs: &str,
    start: &cbt_core::numerics::ParameterVector,
    prior: Option<&TaskSnapshot>,
    provenance: Vec<String>,
    opts: &TrainOpts,
) -> Result<Outcome> {
    let mut out = Outcome::default();
    let dir = ctx.run_dir(label, inputs);
    let mut run = match open_run(&dir, label, &ctx.cfg.hash(), opts.resume)? {
        Opened::Complete(d, m) => {
            already_complete(&mut out, &d, &m);
            return Ok(out);
        }
        Opened::Active(run) => run,
    };
    run.write("config", "config.txt", ctx.cfg.echo().as_bytes())?;
    let task = provenance.last().expect("non-empty provenance").clone();
    let data = ctx.load_task(&task)?.unlabeled_set()?;
    let cfg = &ctx.cfg.cbt;
    let Some((params, log)) = train_in_run(&mut run, &ctx.cfg.encoder, start, &data, cfg, prior, opts)? else {
        out.push(format!("interrupted; resume with --resume ({})", dir.display()));
        out.run_dir = Some(dir);
        return Ok(out);
    };
    let snapshot = advance_snapshot(&params, &ctx.cfg.encoder, &data, cfg)?;
    let mut ck = Checkpoint::new(params, ctx.cfg.encoder.clone(), provenance.clone());
    ck.extra.insert("method".into(), "cbt".into());
    ck.extra.insert("lambda".into(), cfg.lambda.to_string());
    let ck_path = run.write("checkpoint", "checkpoint.cbt", &ck.to_container().to_bytes())?;
    let snap_path = run.write("snapshot", "snapshot.cbt", &snapshot.to_container().to_bytes())?;
    run.write("trainlog", "trainlog.csv", log.to_csv().as_bytes())?;
    clear_progress(&run)?;
    run.manifest.samples = vec![log.processed_sample_count];
    run.manifest.info.insert("method".into(), "cbt".into());
    run.manifest.info.insert("lambda".into(), cfg.lambda.to_string());
    run.manifest.info.insert("provenance".into(), provenance.join(","));
    run.manifest
        .info
        .insert("wall_seconds".into(), format!("{:.3}", log.wall_seconds));
    run.finish()?;
    out.push(format!("task: {task}"));
    out.push(format!("processed_samples: {}", log.processed_sample_count));
    out.push(format!("checkpoint: {}", ck_path.display()));
    out.push(format!("snapshot: {}", snap_path.display()));
    out.run_dir = Some(dir);
    Ok(out)
}

pub fn pretrain(ctx: &Ctx, opts: &TrainOpts) -> Result<Outcome> {
    let task = ctx.cfg.tasks[0].clone();
    let init = init_params(&ctx.cfg.encoder)?;
    continual_step(ctx, &format!("pretrain-{task}"), "", &init, None, vec![task], opts)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("{} does not exist", path.display())),
        _ => Error::Io(e),
    })?;
    Ok(sha256_hex(&bytes))
}

pub fn continue_task(ctx: &Ctx, snapshot_path: &Path, checkpoint: Option<&Path>, opts: &TrainOpts) -> Result<Outcome> {
    let ck_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => snapshot_path.with_file_name("checkpoint.cbt"),
    };
    verify_if_managed(snapshot_path)?;
    verify_if_managed(&ck_path)?;
    let snapshot = TaskSnapshot::from_container(&Container::load(snapshot_path)?)?;
    let ck = Checkpoint::from_container(&Container::load(&ck_path)?)?;
    if ck.encoder_config != ctx.cfg.encoder {
        return Err(Error::Config(format!(
            "{} was trained with a different model configuration",
            ck_path.display()
        )));
    }
    if ck.provenance.last() != Some(&snapshot.task_name) {
        return Err(Error::Data(format!(
            "snapshot task `{}` is not the last task of checkpoint provenance {:?}",
            snapshot.task_name, ck.provenance
        )));
    }
    let k = ck.provenance.len();
    if ck.provenance[..] != ctx.cfg.tasks[..k.min(ctx.cfg.tasks.len())] || k >= ctx.cfg.tasks.len() {
        return Err(Error::Config(format!(
            "checkpoint provenance {:?} does not lead to a further task of {:?}",
            ck.provenance, ctx.cfg.tasks
        )));
    }
    let task = ctx.cfg.tasks[k].clone();
    let inputs = format!("{}|{}", file_digest(&ck_path)?, file_digest(snapshot_path)?);
    let mut provenance = ck.provenance.clone();
    provenance.push(task.clone());
    continual_step(
        ctx,
        &format!("continue-{task}"),
        &inputs,
        &ck.params,
        Some(&snapshot),
        provenance,
        opts,
    )
}

pub fn joint_baseline(ctx: &Ctx, k: usize, opts: &TrainOpts) -> Result<Outcome> {
    let tasks = &ctx.cfg.tasks;
    if k == 0 || k > tasks.len() {
        return Err(Error::Config(format!("--k must lie in 1..={}", tasks.len())));
    }
    let mut out = Outcome::default();
    let label = format!("joint-k{k}");
    let dir = ctx.run_dir(&label, "");
    let mut run = match open_run(&dir, &label, &ctx.cfg.hash(), opts.resume)? {
        Opened::Complete(d, m) => {
            already_complete(&mut out, &d, &m);
            return Ok(out);
        }
        Opened::Active(run) => run,
    };
    run.write("config", "config.txt", ctx.cfg.echo().as_bytes())?;
    let sets = tasks[..k]
        .iter()
        .map(|t| ctx.load_task(t)?.unlabeled_set())
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&UnlabeledSet> = sets.iter().collect();
    let union = UnlabeledSet::union(tasks[..k].join("+"), &refs)?;
    let init = init_params(&ctx.cfg.encoder)?;
    let cfg = &ctx.cfg.cbt;
    let Some((params, log)) = train_in_run(&mut run, &ctx.cfg.encoder, &init, &union, cfg, None, opts)? else {
        out.push(format!("interrupted; resume with --resume ({})", dir.display()));
        out.run_dir = Some(dir);
        return Ok(out);
    };
    let mut ck = Checkpoint::new(params, ctx.cfg.encoder.clone(), tasks[..k].to_vec());
    ck.extra.insert("method".into(), "bt_joint".into());
    let ck_path = run.write("checkpoint", "checkpoint.cbt", &ck.to_container().to_bytes())?;
    run.write("trainlog", "trainlog.csv", log.to_csv().as_bytes())?;
    clear_progress(&run)?;
    run.manifest.samples = vec![log.processed_sample_count];
    run.manifest.info.insert("method".into(), "bt_joint".into());
    run.manifest.info.insert("provenance".into(), tasks[..k].join(","));
    run.manifest
        .info
        .insert("wall_seconds".into(), format!("{:.3}", log.wall_seconds));
    run.finish()?;
    out.push(format!("tasks: {}", tasks[..k].join(",")));
    out.push(format!("processed_samples: {}", log.processed_sample_count));
    out.push(format!("checkpoint: {}", ck_path.display()));
    out.run_dir = Some(dir);
    Ok(out)
}

/// Barlow Twins loss of `params` on a task's validation images under a fixed
/// augmentation draw.
pub fn val_bt_loss(params: &cbt_core::numerics::ParameterVector, cfg: &RunConfig, ds: &TaskDataset) -> Result<f64> {
    let val = ds.val_set()?;
    Ok(bt_loss_on_batch(
        params,
        &cfg.encoder,
        &val.images,
        &val.ids,
        &cfg.cbt.augment,
        &cfg.cbt.bt,
        0,
    )?
    .total)
}

pub fn probe(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<Outcome> {
    let mut out = Outcome::default();
    let (ck, encoder_label, inputs) = match checkpoint {
        Some(p) => {
            verify_if_managed(p)?;
            let ck = Checkpoint::from_container(&Container::load(p)?)?;
            let method = ck.extra.get("method").cloned().unwrap_or_else(|| "cbt".into());
            let lambda = ck.extra.get("lambda").and_then(|l| l.parse().ok());
            let label = format!("{}:{}", method_label(&method, lambda), ck.provenance.join(">"));
            (ck, label, file_digest(p)?)
        }
        None => {
            if ctx.cfg.baseline != Baseline::NonePretrain {
                return Err(Error::Config(
                    "probe needs --checkpoint unless baseline=none_pretrain".into(),
                ));
            }
            let mut ck = Checkpoint::new(init_params(&ctx.cfg.encoder)?, ctx.cfg.encoder.clone(), Vec::new());
            ck.extra.insert("method".into(), "none_pretrain".into());
            (ck, "none_pretrain".to_string(), "random".to_string())
        }
    };
    let dir = ctx.run_dir("probe", &inputs);
    let mut run = match open_run(&dir, "probe", &ctx.cfg.hash(), false)? {
        Opened::Complete(d, m) => {
            already_complete(&mut out, &d, &m);
            return Ok(out);
        }
        Opened::Active(run) => run,
    };
    run.write("config", "config.txt", ctx.cfg.echo().as_bytes())?;
    let mut rows = Vec::new();
    let mut bt_rows = String::from("task,val_bt_loss\n");
    for task in &ctx.cfg.tasks {
        let ds = ctx.load_task(task)?;
        for &fraction in &ctx.cfg.fractions {
            for &seed in &ctx.cfg.probe_seeds {
                let pcfg = cbt_core::eval::ProbeConfig {
                    seed,
                    ..ctx.cfg.probe.clone()
                };
                let r = train_probe(&ck, &ds, fraction, &pcfg)?;
                rows.push(MetricsRow {
                    encoder: encoder_label.clone(),
                    task: task.clone(),
                    fraction,
                    seed,
                    metrics: r.metrics,
                });
            }
        }
        bt_rows.push_str(&format!("{task},{}\n", val_bt_loss(&ck.params, &ctx.cfg, &ds)?));
    }
    let csv = metrics_to_csv(&rows)?;
    let path = run.write("metrics", "metrics.csv", csv.as_bytes())?;
    run.write("bt_val", "bt_val.csv", bt_rows.as_bytes())?;
    run.manifest.info.insert("encoder".into(), encoder_label.clone());
    run.manifest.info.insert("provenance".into(), ck.provenance.join(","));
    run.manifest
        .info
        .insert("method".into(), ck.extra.get("method").cloned().unwrap_or_default());
    if let Some(l) = ck.extra.get("lambda") {
        run.manifest.info.insert("lambda".into(), l.clone());
    }
    if let Some(p) = checkpoint {
        run.manifest.info.insert("checkpoint".into(), p.display().to_string());
    }
    run.finish()?;
    out.push(format!("rows: {}", rows.len()));
    out.push(format!("metrics: {}", path.display()));
    out.run_dir = Some(dir);
    Ok(out)
}

/// A completed run found under `runs/`.
struct FoundRun {
    dir: PathBuf,
    manifest: RunManifest,
}

fn completed_runs(ctx: &Ctx) -> Result<Vec<FoundRun>> {
    let mut found = Vec::new();
    let root = ctx.runs_dir();
    if !root.exists() {
        return Ok(found);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.sort();
    for dir in dirs {
        if dir.join(MANIFEST).exists() {
            let manifest = verify_run(&dir)?;
            found.push(FoundRun { dir, manifest });
        }
    }
    Ok(found)
}

fn provenance_of(m: &RunManifest) -> Vec<String> {
    m.info
        .get("provenance")
        .map(|p| p.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default()
}

pub fn report(ctx: &Ctx) -> Result<Outcome> {
    let runs = completed_runs(ctx)?;
    let mut out = Outcome::default();
    let mut summary = String::from("# Run summary\n\n");

    // compute accounting: one total per λ over distinct continual steps
    let mut cbt_steps: BTreeMap<String, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut joint_steps: BTreeMap<usize, u64> = BTreeMap::new();
    for r in &runs {
        let m = &r.manifest;
        let steps = provenance_of(m).len();
        match m.command.split('-').next() {
            Some("pretrain") | Some("continue") => {
                let lambda = m.info.get("lambda").cloned().unwrap_or_default();
                cbt_steps
                    .entry(lambda)
                    .or_default()
                    .insert(steps, m.samples.iter().sum());
            }
            Some("joint") => {
                joint_steps.insert(steps, m.samples.iter().sum());
            }
            _ => {}
        }
    }
    summary.push_str("## Compute\n\n");
    let joint_total: u64 = joint_steps.values().sum();
    for (lambda, steps) in &cbt_steps {
        let cbt_total: u64 = steps.values().sum();
        let comparable: u64 = steps
            .keys()
            .filter(|k| joint_steps.contains_key(k))
            .map(|k| steps[k])
            .sum();
        let joint: u64 = steps.keys().filter_map(|k| joint_steps.get(k)).sum();
        summary.push_str(&format!(
            "cbt lambda={lambda}: {cbt_total} samples over {} steps\n",
            steps.len()
        ));
        if joint > 0 {
            let line = format!(
                "compute savings (lambda={lambda}): cbt/joint = {comparable}/{joint} = {}",
                comparable as f64 / joint as f64
            );
            summary.push_str(&line);
            summary.push('\n');
            out.push(line);
        }
    }
    summary.push_str(&format!(
        "joint baseline: {joint_total} samples over {} steps\n\n",
        joint_steps.len()
    ));

    // probe results
    let mut probe_rows: Vec<(RunManifest, Vec<MetricsRow>, BTreeMap<String, f64>)> = Vec::new();
    for r in runs.iter().filter(|r| r.manifest.command == "probe") {
        let rows = metrics_from_csv(&fs::read_to_string(r.manifest.path_of(&r.dir, "metrics")?)?)?;
        let bt_text = fs::read_to_string(r.manifest.path_of(&r.dir, "bt_val")?)?;
        let bt = bt_text
            .lines()
            .skip(1)
            .filter_map(|l| l.split_once(','))
            .map(|(t, v)| {
                Ok((
                    t.to_string(),
                    v.parse()
                        .map_err(|_| Error::Format(format!("bad bt_val line `{l}`", l = v)))?,
                ))
            })
            .collect::<Result<BTreeMap<String, f64>>>()?;
        probe_rows.push((r.manifest.clone(), rows, bt));
    }
    summary.push_str("## Probe mIoU (mean over seeds)\n\n| encoder | task | fraction | mIoU | OA | F1 |\n|---|---|---|---|---|---|\n");
    for (_, rows, _) in &probe_rows {
        let mut groups: BTreeMap<(String, String, String), Vec<&MetricsRow>> = BTreeMap::new();
        for row in rows {
            groups
                .entry((row.encoder.clone(), row.task.clone(), row.fraction.to_string()))
                .or_default()
                .push(row);
        }
        for ((enc, task, frac), g) in groups {
            let mean = |f: &dyn Fn(&MetricsRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / g.len() as f64;
            summary.push_str(&format!(
                "| {enc} | {task} | {frac} | {:.4} | {:.4} | {:.4} |\n",
                mean(&|r| r.metrics.miou),
                mean(&|r| r.metrics.oa),
                mean(&|r| r.metrics.f1)
            ));
        }
    }

    // forgetting per λ, using the largest label fraction
    let mut forgetting_csv = String::from("lambda,task,miou_at_own_end,miou_after_final,forgetting,bt_drift\n");
    let mut by_lambda: BTreeMap<String, Vec<StepRecord>> = BTreeMap::new();
    let mut orders: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (m, rows, bt) in &probe_rows {
        if m.info.get("method").map(String::as_str) != Some("cbt") {
            continue;
        }
        let lambda = m.info.get("lambda").cloned().unwrap_or_default();
        let prov = provenance_of(m);
        let Some(step) = prov.len().checked_sub(1) else {
            continue;
        };
        let order = orders.entry(lambda.clone()).or_default();
        if prov.len() > order.len() {
            *order = prov.clone();
        }
        let max_fraction = rows.iter().map(|r| r.fraction).fold(0.0, f64::max);
        for task in &prov {
            let sel: Vec<f64> = rows
                .iter()
                .filter(|r| &r.task == task && r.fraction == max_fraction)
                .map(|r| r.metrics.miou)
                .collect();
            if sel.is_empty() {
                continue;
            }
            by_lambda.entry(lambda.clone()).or_default().push(StepRecord {
                step,
                task: task.clone(),
                miou: sel.iter().sum::<f64>() / sel.len() as f64,
                val_bt_loss: bt.get(task).copied().unwrap_or(f64::NAN),
            });
        }
    }
    summary.push_str("\n## Forgetting (largest label fraction)\n\n| lambda | task | at own end | after final | forgetting | BT drift |\n|---|---|---|---|---|---|\n");
    for (lambda, records) in &by_lambda {
        let order = &orders[lambda];
        match forgetting_report(order, records) {
            Ok(rep) => {
                for row in rep.rows {
                    forgetting_csv.push_str(&format!(
                        "{lambda},{},{},{},{},{}\n",
                        row.task, row.miou_at_own_end, row.miou_after_final, row.forgetting, row.bt_drift
                    ));
                    summary.push_str(&format!(
                        "| {lambda} | {} | {:.4} | {:.4} | {:+.4} | {:+.4} |\n",
                        row.task, row.miou_at_own_end, row.miou_after_final, row.forgetting, row.bt_drift
                    ));
                }
            }
            Err(e) => summary.push_str(&format!("| {lambda} | incomplete: {e} | | | | |\n")),
        }
    }

    // embeddings of the longest continual chain
    let latest = runs
        .iter()
        .filter(|r| r.manifest.info.get("method").map(String::as_str) == Some("cbt") && r.manifest.command != "probe")
        .max_by_key(|r| provenance_of(&r.manifest).len());
    let mut embeddings = String::new();
    if let Some(r) = latest {
        let ck = Checkpoint::from_container(&Container::load(&r.manifest.path_of(&r.dir, "checkpoint")?)?)?;
        let d = ck.encoder_config.embed_dim;
        embeddings.push_str("domain,tile");
        for i in 0..d {
            embeddings.push_str(&format!(",e{i}"));
        }
        embeddings.push('\n');
        for task in &ctx.cfg.tasks {
            let set = ctx.load_task(task)?.unlabeled_set()?;
            let z = embed(&ck.params, &ck.encoder_config, &set.images)?;
            for (i, row) in z.data().chunks_exact(d).enumerate() {
                embeddings.push_str(&format!("{task},{i}"));
                for v in row {
                    embeddings.push_str(&format!(",{v}"));
                }
                embeddings.push('\n');
            }
        }
        summary.push_str(&format!("\nembeddings from {}\n", r.dir.display()));
    }

    let inputs: Vec<String> = runs.iter().map(|r| r.manifest.render()).collect();
    let dir = ctx.run_dir("report", &sha256_hex(inputs.concat().as_bytes()));
    let mut run = match open_run(&dir, "report", &ctx.cfg.hash(), false)? {
        Opened::Complete(d, m) => {
            already_complete(&mut out, &d, &m);
            return Ok(out);
        }
        Opened::Active(run) => run,
    };
    let s = run.write("summary", "summary.md", summary.as_bytes())?;
    run.write("forgetting", "forgetting.csv", forgetting_csv.as_bytes())?;
    if !embeddings.is_empty() {
        run.write("embeddings", "embeddings.csv", embeddings.as_bytes())?;
    }
    run.finish()?;
    out.push(format!("summary: {}", s.display()));
    out.run_dir = Some(dir);
    Ok(out)
}
