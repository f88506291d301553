//! Sequential-task training with an elastic-weight-consolidation penalty.
//!
//! After each task the end-of-task weights `θ*` and a diagonal Fisher estimate
//! `F_i = (1/B_T)·Σ_X (∂L_BT(X)/∂θ_i)²` over that task's minibatches are frozen
//! into a [`TaskSnapshot`]. Training on the next task minimizes
//! `L_BT(X) + Σ_i (λ/2)·F_i·(θ_i − θ*_i)²`. The snapshot is replaced, never
//! accumulated, when the next task finishes.

use std::time::Instant;

use crate::augment::{epoch_batches, make_view_pair_with_ids, AugmentConfig, ViewPair};
use crate::container::Container;
use crate::error::{config_err, Error, Result};
use crate::kvtext;
use crate::model::{init_params, Checkpoint, EncoderConfig};
use crate::numerics::{self, AdamConfig, AdamState, ParamVars, ParameterVector, Tape, Tensor, Var};
use crate::ssl_bt::{bt_graph_on_views, terms_of, BtLossConfig, BtTerms};

/// λ read literally from "10e-2".
pub const LAMBDA_PRESET_LITERAL: f64 = 0.1;
/// λ read as 10⁻².
pub const LAMBDA_PRESET_POWER: f64 = 0.01;

/// Shuffle key used by the Fisher pass, disjoint from training epochs.
pub const FISHER_EPOCH_KEY: u64 = u64::MAX;
/// First augmentation draw index used by the Fisher pass.
pub const FISHER_DRAW_BASE: u64 = 1 << 48;

/// Unlabeled images of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub name: String,
    /// `N×C×H×W`
    pub images: Tensor,
    /// Per-image identifiers keying the augmentation streams.
    pub ids: Vec<u64>,
}

impl UnlabeledSet {
    pub fn new(name: impl Into<String>, images: Tensor) -> Result<Self> {
        let n = images.dims4()?.0 as u64;
        Ok(Self {
            name: name.into(),
            images,
            ids: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Union of several sets, re-keying ids as `(set index << 32) | id`.
    pub fn union(name: impl Into<String>, sets: &[&UnlabeledSet]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::Data("union of no tasks".into()))?;
        let (_, c, h, w) = first.images.dims4()?;
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for (k, s) in sets.iter().enumerate() {
            let (_, sc, sh, sw) = s.images.dims4()?;
            if (sc, sh, sw) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "task `{}` images are {sc}x{sh}x{sw}, expected {c}x{h}x{w}",
                    s.name
                )));
            }
            data.extend_from_slice(s.images.data());
            ids.extend(s.ids.iter().map(|&id| ((k as u64) << 32) | id));
        }
        Ok(Self {
            name: name.into(),
            images: Tensor::new(vec![ids.len(), c, h, w], data)?,
            ids,
        })
    }
}

/// Hyperparameters of one continual step.
#[derive(Clone, Debug, PartialEq)]
pub struct CbtConfig {
    pub lambda: f64,
    pub bt: BtLossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    /// Batch shuffling seed.
    pub seed: u64,
}

impl Default for CbtConfig {
    fn default() -> Self {
        Self {
            lambda: LAMBDA_PRESET_POWER,
            bt: BtLossConfig::default(),
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl CbtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return config_err(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.epochs < 1 {
            return config_err("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return config_err(format!("batch size {} < 2", self.batch_size));
        }
        self.bt.validate()?;
        self.adam.validate()?;
        self.augment.validate()
    }
}

/// Diagonal Fisher estimate over one task's minibatches.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    pub values: ParameterVector,
    pub source_task: String,
    pub num_batches: usize,
}

/// Averages squared per-batch gradients in the given order.
pub fn fisher_from_gradients(grads: &[ParameterVector], source_task: &str) -> Result<FisherDiag> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Data("Fisher estimate needs at least one batch".into()))?;
    let mut acc = first.zeros_like();
    for g in grads {
        acc = acc.zip_map(g, |a, gi| a + gi * gi)?;
    }
    let n = grads.len() as f64;
    Ok(FisherDiag {
        values: acc.map(|v| v / n),
        source_task: source_task.to_string(),
        num_batches: grads.len(),
    })
}

/// Frozen end-of-task weights and their Fisher importance.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSnapshot {
    pub theta_star: ParameterVector,
    pub fisher: FisherDiag,
    pub task_name: String,
}

const FISHER_SUFFIX: &str = ".fisher";

impl TaskSnapshot {
    pub fn new(theta_star: ParameterVector, fisher: FisherDiag) -> Result<Self> {
        theta_star.expect_same_layout(&fisher.values)?;
        if fisher.values.values().any(|v| !(v >= 0.0)) {
            return Err(Error::Data("Fisher entries must be non-negative".into()));
        }
        let task_name = fisher.source_task.clone();
        Ok(Self {
            theta_star,
            fisher,
            task_name,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_params(&self.theta_star, "");
        c.push_params(&self.fisher.values, FISHER_SUFFIX);
        c.provenance = vec![self.task_name.clone()];
        c.metadata.insert("kind".into(), "snapshot".into());
        c.metadata
            .insert("fisher.num_batches".into(), self.fisher.num_batches.to_string());
        c.metadata
            .insert("fisher.source_task".into(), self.fisher.source_task.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind").map(String::as_str) != Some("snapshot") {
            return Err(Error::Format("container is not a snapshot".into()));
        }
        let mut theta = ParameterVector::new();
        let mut fisher = ParameterVector::new();
        for (name, _) in &c.entries {
            if let Some(base) = name.strip_suffix(FISHER_SUFFIX) {
                fisher.push(base, c.tensor(name)?.clone())?;
            } else {
                theta.push(name.clone(), c.tensor(name)?.clone())?;
            }
        }
        let [task_name] = &c.provenance[..] else {
            return Err(Error::Format("snapshot must name exactly one task".into()));
        };
        let fisher = FisherDiag {
            values: fisher,
            source_task: kvtext::get(&c.metadata, "fisher.source_task")?.to_string(),
            num_batches: kvtext::get_parsed(&c.metadata, "fisher.num_batches")?,
        };
        let mut snap = Self::new(theta, fisher).map_err(|e| Error::Format(format!("snapshot: {e}")))?;
        snap.task_name = task_name.clone();
        Ok(snap)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// `Σ_i (λ/2)·F_i·(θ_i − θ*_i)²`
pub fn ewc_penalty(params: &ParameterVector, snapshot: &TaskSnapshot, lambda: f64) -> Result<f64> {
    params.expect_same_layout(&snapshot.theta_star)?;
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let v = ewc_penalty_graph(&mut tape, &vars, snapshot, lambda)?;
    tape.value(v).item()
}

/// Closed-form gradient `λ·F_i·(θ_i − θ*_i)`.
pub fn ewc_penalty_grad(params: &ParameterVector, snapshot: &TaskSnapshot, lambda: f64) -> Result<ParameterVector> {
    let disp = params.zip_map(&snapshot.theta_star, |t, s| t - s)?;
    disp.zip_map(&snapshot.fisher.values, |d, f| lambda * f * d)
}

/// Records the penalty on `tape`, summed over parameters in layout order.
pub fn ewc_penalty_graph(tape: &mut Tape, vars: &ParamVars, snapshot: &TaskSnapshot, lambda: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((_, var), ((_, star), (_, fisher))) in vars.iter().zip(
        snapshot
            .theta_star
            .entries()
            .iter()
            .zip(snapshot.fisher.values.entries()),
    ) {
        let term = tape.weighted_sq_dist(var, star, fisher, lambda)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Shape("penalty over an empty parameter vector".into()))
}

/// Per-batch loss decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CbtTerms {
    pub total: f64,
    pub bt: BtTerms,
    pub penalty: f64,
}

struct CbtVars {
    total: Var,
    bt: crate::ssl_bt::BtVars,
    penalty: Option<Var>,
}

fn cbt_graph(
    tape: &mut Tape,
    vars: &ParamVars,
    model_cfg: &EncoderConfig,
    views: &ViewPair,
    cfg: &CbtConfig,
    snapshot: Option<&TaskSnapshot>,
) -> Result<CbtVars> {
    let bt = bt_graph_on_views(tape, vars, model_cfg, views, &cfg.bt)?;
    match snapshot {
        Some(snap) if cfg.lambda > 0.0 => {
            let p = ewc_penalty_graph(tape, vars, snap, cfg.lambda)?;
            let total = tape.add(bt.total, p)?;
            Ok(CbtVars {
                total,
                bt,
                penalty: Some(p),
            })
        }
        _ => Ok(CbtVars {
            total: bt.total,
            bt,
            penalty: None,
        }),
    }
}

fn cbt_terms(tape: &Tape, v: &CbtVars) -> Result<CbtTerms> {
    Ok(CbtTerms {
        total: tape.value(v.total).item()?,
        bt: terms_of(tape, &v.bt)?,
        penalty: match v.penalty {
            Some(p) => tape.value(p).item()?,
            None => 0.0,
        },
    })
}

/// Combined loss of one batch. Without a snapshot (or with `λ = 0`) this is
/// exactly the Barlow Twins loss.
pub fn cbt_loss(
    params: &ParameterVector,
    model_cfg: &EncoderConfig,
    x: &Tensor,
    ids: &[u64],
    cfg: &CbtConfig,
    snapshot: Option<&TaskSnapshot>,
    draw_index: u64,
) -> Result<CbtTerms> {
    let views = make_view_pair_with_ids(x, ids, &cfg.augment, draw_index)?;
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let v = cbt_graph(&mut tape, &vars, model_cfg, &views, cfg, snapshot)?;
    cbt_terms(&tape, &v)
}

/// Loss terms and gradient of one batch.
pub fn cbt_value_and_grad(
    params: &ParameterVector,
    model_cfg: &EncoderConfig,
    views: &ViewPair,
    cfg: &CbtConfig,
    snapshot: Option<&TaskSnapshot>,
) -> Result<(CbtTerms, ParameterVector)> {
    let mut tape = Tape::new();
    let vars = ParamVars::trainable(&mut tape, params);
    let v = cbt_graph(&mut tape, &vars, model_cfg, views, cfg, snapshot)?;
    let terms = cbt_terms(&tape, &v)?;
    let mut grads = tape.backward(v.total)?;
    Ok((terms, numerics::collect_grads(&mut grads, &vars, params)?))
}

/// Diagonal Fisher of the Barlow Twins loss at `params` over `data`.
///
/// Batches follow the training partition rule (same batch size, incomplete
/// batch dropped) under a dedicated shuffle key and augmentation draw range,
/// so the estimate is reproducible and independent of training history.
pub fn fisher_diagonal(
    params: &ParameterVector,
    model_cfg: &EncoderConfig,
    data: &UnlabeledSet,
    cfg: &CbtConfig,
) -> Result<FisherDiag> {
    let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, FISHER_EPOCH_KEY)?;
    if batches.is_empty() {
        return Err(Error::Data(format!(
            "task `{}` has {} samples, fewer than one batch of {}",
            data.name,
            data.len(),
            cfg.batch_size
        )));
    }
    let bt_only = CbtConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let mut grads = Vec::with_capacity(batches.len());
    for (bi, idx) in batches.iter().enumerate() {
        let x = data.images.select_rows(idx)?;
        let ids: Vec<u64> = idx.iter().map(|&i| data.ids[i]).collect();
        let views = make_view_pair_with_ids(&x, &ids, &cfg.augment, FISHER_DRAW_BASE + bi as u64)?;
        let (_, g) = cbt_value_and_grad(params, model_cfg, &views, &bt_only, None)?;
        grads.push(g);
    }
    fisher_from_gradients(&grads, &data.name)
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_bt: f64,
    pub mean_invariance: f64,
    pub mean_redundancy: f64,
    pub mean_penalty: f64,
    pub samples: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub task: String,
    pub embed_dim: usize,
    pub epochs: Vec<EpochRecord>,
    pub processed_sample_count: u64,
    pub wall_seconds: f64,
}

impl TrainLog {
    pub fn new(task: &str, embed_dim: usize) -> Self {
        Self {
            task: task.to_string(),
            embed_dim,
            epochs: Vec::new(),
            processed_sample_count: 0,
            wall_seconds: 0.0,
        }
    }

    pub fn mean_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_total).collect()
    }

    /// CSV with one row per epoch. Wall time is deliberately excluded so the
    /// file is reproducible byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.task,
                e.epoch,
                self.embed_dim,
                e.mean_total,
                e.mean_bt,
                e.mean_invariance,
                e.mean_redundancy,
                e.mean_penalty,
                e.samples
            ));
        }
        s
    }

    /// Parses [`TrainLog::to_csv`] output. Wall time is not stored and comes
    /// back as zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Format(format!("train log line {line}: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(TRAIN_LOG_HEADER) {
            return Err(bad(1, "unexpected header"));
        }
        let mut log: Option<TrainLog> = None;
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let [task, epoch, dim, total, bt, inv, red, pen, samples] = cols[..] else {
                return Err(bad(i + 2, "expected 9 columns"));
            };
            let f = |v: &str| v.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            let u = |v: &str| v.parse::<u64>().map_err(|_| bad(i + 2, "bad integer"));
            let log = log.get_or_insert_with(|| TrainLog::new(task, 0));
            log.embed_dim = u(dim)? as usize;
            if log.task != task {
                return Err(bad(i + 2, "mixed task names"));
            }
            let rec = EpochRecord {
                epoch: u(epoch)? as usize,
                mean_total: f(total)?,
                mean_bt: f(bt)?,
                mean_invariance: f(inv)?,
                mean_redundancy: f(red)?,
                mean_penalty: f(pen)?,
                samples: u(samples)?,
            };
            log.processed_sample_count += rec.samples;
            log.epochs.push(rec);
        }
        log.ok_or_else(|| bad(2, "no epochs"))
    }
}

const TRAIN_LOG_HEADER: &str =
    "task,epoch,embed_dim,mean_total,mean_bt,mean_invariance,mean_redundancy,mean_penalty,samples";

/// Samples processed by one training run: `epochs · batch · ⌊n / batch⌋`.
pub fn expected_samples(n: usize, epochs: usize, batch_size: usize) -> u64 {
    (epochs * batch_size * (n / batch_size)) as u64
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterVector,
    pub adam: AdamState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn fresh(params: ParameterVector, adam: AdamConfig) -> Self {
        let adam = AdamState::new(adam, &params);
        Self {
            params,
            adam,
            epochs_done: 0,
        }
    }
}

/// Runs epochs `state.epochs_done .. until_epoch`, appending to `log`.
pub fn train_epochs(
    state: &mut TrainState,
    model_cfg: &EncoderConfig,
    data: &UnlabeledSet,
    cfg: &CbtConfig,
    snapshot: Option<&TaskSnapshot>,
    until_epoch: usize,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("task `{}` is empty", data.name)));
    }
    if let Some(snap) = snapshot {
        state.params.expect_same_layout(&snap.theta_star)?;
    }
    let started = Instant::now();
    for epoch in state.epochs_done..until_epoch.min(cfg.epochs) {
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        if batches.is_empty() {
            return Err(Error::Data(format!(
                "task `{}` has fewer samples than one batch of {}",
                data.name, cfg.batch_size
            )));
        }
        let per_epoch = batches.len() as u64;
        let mut sums = [0.0f64; 5];
        let mut samples = 0u64;
        for (bi, idx) in batches.iter().enumerate() {
            let x = data.images.select_rows(idx)?;
            let ids: Vec<u64> = idx.iter().map(|&i| data.ids[i]).collect();
            let draw = epoch as u64 * per_epoch + bi as u64;
            let step = make_view_pair_with_ids(&x, &ids, &cfg.augment, draw)
                .and_then(|views| cbt_value_and_grad(&state.params, model_cfg, &views, cfg, snapshot));
            let (terms, grads) = step.map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {bi})")),
                other => other,
            })?;
            state.adam.step(&mut state.params, &grads)?;
            if state.params.values().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch}, batch {bi}")));
            }
            for (s, v) in sums.iter_mut().zip([
                terms.total,
                terms.bt.total,
                terms.bt.invariance,
                terms.bt.redundancy,
                terms.penalty,
            ]) {
                *s += v;
            }
            samples += idx.len() as u64;
        }
        let n = batches.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            mean_total: sums[0] / n,
            mean_bt: sums[1] / n,
            mean_invariance: sums[2] / n,
            mean_redundancy: sums[3] / n,
            mean_penalty: sums[4] / n,
            samples,
        });
        log.processed_sample_count += samples;
        state.epochs_done = epoch + 1;
    }
    log.wall_seconds += started.elapsed().as_secs_f64();
    Ok(())
}

/// Trains on one task for `cfg.epochs` epochs with a fresh optimizer.
pub fn train_task(
    start_params: &ParameterVector,
    model_cfg: &EncoderConfig,
    data: &UnlabeledSet,
    cfg: &CbtConfig,
    snapshot: Option<&TaskSnapshot>,
) -> Result<(ParameterVector, TrainLog)> {
    cfg.validate()?;
    let mut state = TrainState::fresh(start_params.clone(), cfg.adam);
    let mut log = TrainLog::new(&data.name, model_cfg.embed_dim);
    train_epochs(&mut state, model_cfg, data, cfg, snapshot, cfg.epochs, &mut log)?;
    Ok((state.params, log))
}

/// Freezes `end_params` and a Fisher estimate over `data` into the snapshot
/// that replaces any previous one.
pub fn advance_snapshot(
    end_params: &ParameterVector,
    model_cfg: &EncoderConfig,
    data: &UnlabeledSet,
    cfg: &CbtConfig,
) -> Result<TaskSnapshot> {
    let fisher = fisher_diagonal(end_params, model_cfg, data, cfg)?;
    TaskSnapshot::new(end_params.clone(), fisher)
}

/// Output of one continual step, handed to [`run_continual_with`] callbacks.
pub struct StepOutcome<'a> {
    pub step: usize,
    pub checkpoint: &'a Checkpoint,
    pub snapshot: &'a TaskSnapshot,
    pub log: &'a TrainLog,
}

/// Trains the tasks in order from a fresh initialization. Step `k` sees only
/// task `k`'s data and the snapshot from step `k−1`.
pub fn run_continual(
    tasks: &[UnlabeledSet],
    model_cfg: &EncoderConfig,
    cfg: &CbtConfig,
) -> Result<(Checkpoint, Vec<TrainLog>, TaskSnapshot)> {
    run_continual_with(tasks, model_cfg, cfg, |_| Ok(()))
}

/// As [`run_continual`], calling `on_step` after every task (e.g. to persist
/// partial results).
pub fn run_continual_with(
    tasks: &[UnlabeledSet],
    model_cfg: &EncoderConfig,
    cfg: &CbtConfig,
    mut on_step: impl FnMut(StepOutcome<'_>) -> Result<()>,
) -> Result<(Checkpoint, Vec<TrainLog>, TaskSnapshot)> {
    if tasks.is_empty() {
        return config_err("continual run needs at least one task");
    }
    cfg.validate()?;
    let mut params = init_params(model_cfg)?;
    let mut snapshot: Option<TaskSnapshot> = None;
    let mut logs = Vec::with_capacity(tasks.len());
    let mut provenance = Vec::new();
    let mut checkpoint = None;
    for (k, task) in tasks.iter().enumerate() {
        let (end, log) = train_task(&params, model_cfg, task, cfg, snapshot.as_ref())?;
        let next = advance_snapshot(&end, model_cfg, task, cfg)?;
        provenance.push(task.name.clone());
        let ck = Checkpoint::new(end.clone(), model_cfg.clone(), provenance.clone());
        on_step(StepOutcome {
            step: k,
            checkpoint: &ck,
            snapshot: &next,
            log: &log,
        })?;
        params = end;
        snapshot = Some(next);
        logs.push(log);
        checkpoint = Some(ck);
    }
    Ok((
        checkpoint.expect("at least one task"),
        logs,
        snapshot.expect("at least one task"),
    ))
}

/// Joint-retraining comparator for step `k`: fresh initialization trained on
/// the union of the first `k` tasks.
pub fn train_joint(
    tasks: &[UnlabeledSet],
    k: usize,
    model_cfg: &EncoderConfig,
    cfg: &CbtConfig,
) -> Result<(Checkpoint, TrainLog)> {
    if k == 0 || k > tasks.len() {
        return config_err(format!("joint step {k} outside 1..={}", tasks.len()));
    }
    let seen: Vec<&UnlabeledSet> = tasks[..k].iter().collect();
    let name = seen.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join("+");
    let union = UnlabeledSet::union(name, &seen)?;
    let init = init_params(model_cfg)?;
    let (params, log) = train_task(&init, model_cfg, &union, cfg, None)?;
    let provenance = seen.iter().map(|t| t.name.clone()).collect();
    Ok((Checkpoint::new(params, model_cfg.clone(), provenance), log))
}
