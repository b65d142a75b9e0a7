//! Stage-1 text fine-tuning, stage-2 graph training and gradient checking.

use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::FeatureSource;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Protocol};
use crate::gnn::{stack_forward_tape, GraphIndex};
use crate::kg::Triple;
use crate::linalg::Matrix;
use crate::model::{ModelState, Optimizer, RngState, Stage};
use crate::scoring::{margin_loss_tape, sample_negatives, score_batch_tape, ScoreFnSpec, ScoreKind, TripleBatch};
use crate::text::{build_feature_table, RawTexts};

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Knobs that do not belong in the config: where to pause, and a log sink.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop once this many epochs are complete (for checkpoint/resume).
    pub until_epoch: Option<u64>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord) -> Result<()>>,
}

impl TrainOptions<'_> {
    fn emit(&mut self, rec: &EpochRecord) -> Result<()> {
        match self.on_epoch.as_mut() {
            Some(f) => f(rec),
            None => Ok(()),
        }
    }
}

/// Positives paired one-to-one with negatives (each positive repeated once
/// per negative drawn for it).
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub positives: Vec<Triple>,
    pub negatives: Vec<Triple>,
}

impl PairedBatch {
    pub fn sample(
        positives: &[Triple],
        known: &HashSet<Triple>,
        num_entities: usize,
        per_positive: usize,
        mode: crate::scoring::CorruptionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut pos = Vec::with_capacity(positives.len() * per_positive);
        let mut neg = Vec::with_capacity(positives.len() * per_positive);
        for &t in positives {
            for n in sample_negatives(t, known, num_entities, per_positive, mode, rng)? {
                pos.push(t);
                neg.push(n);
            }
        }
        Ok(PairedBatch {
            positives: pos,
            negatives: neg,
        })
    }
}

struct TextVars {
    head: (Var, Var),
    tail: Option<(Var, Var)>,
    fallback: Var,
}

fn register_text(tape: &mut Tape, state: &ModelState, named: &mut Vec<(String, Var)>) -> TextVars {
    let mut leaf = |tape: &mut Tape, name: &str, m: &Matrix| {
        let v = tape.leaf(m.clone());
        named.push((name.to_owned(), v));
        v
    };
    let head = (
        leaf(tape, "text.head.w", &state.text.head.w),
        leaf(tape, "text.head.b", &state.text.head.b),
    );
    let tail = state
        .text
        .tail
        .as_ref()
        .map(|t| (leaf(tape, "text.tail.w", &t.w), leaf(tape, "text.tail.b", &t.b)));
    let fallback = leaf(tape, "text.fallback", &state.text.fallback);
    TextVars { head, tail, fallback }
}

/// Reduced-text rows for `entities` (local order) under one reduction.
fn text_table(tape: &mut Tape, raw: &RawTexts, mlp: (Var, Var), fallback: Var, entities: &[usize]) -> Result<Var> {
    let n = entities.len();
    let mut text_pos = Vec::new();
    let mut fb_pos = Vec::new();
    let mut rows = Vec::new();
    for (local, &e) in entities.iter().enumerate() {
        match raw.slot.get(e).copied().flatten() {
            Some(s) => {
                text_pos.push(local);
                rows.extend_from_slice(raw.rows.row(s));
            }
            None => fb_pos.push(local),
        }
    }
    let mut parts = Vec::new();
    if !text_pos.is_empty() {
        let r = tape.leaf(Matrix::from_vec(text_pos.len(), raw.rows.cols(), rows)?);
        let z = tape.linear(r, mlp.0);
        let z = tape.add_row(z, mlp.1);
        let z = tape.relu(z);
        parts.push(tape.scatter_add_rows(z, text_pos.into(), n));
    }
    if !fb_pos.is_empty() {
        let zeros: Rc<[usize]> = vec![0; fb_pos.len()].into();
        let f = tape.gather_rows(fallback, zeros);
        parts.push(tape.scatter_add_rows(f, fb_pos.into(), n));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p);
    }
    Ok(acc)
}

/// Head-position and tail-position tables (the same var with a shared reduction).
fn text_tables(tape: &mut Tape, raw: &RawTexts, tv: &TextVars, entities: &[usize]) -> Result<(Var, Var)> {
    let head = text_table(tape, raw, tv.head, tv.fallback, entities)?;
    let tail = match tv.tail {
        Some(t) => text_table(tape, raw, t, tv.fallback, entities)?,
        None => head,
    };
    Ok((head, tail))
}

fn paired_loss(
    tape: &mut Tape,
    spec: &ScoreFnSpec,
    margin: f64,
    tables: (Var, Var),
    rel: (Var, Var),
    pos: &TripleBatch,
    neg: &TripleBatch,
) -> Var {
    let ps = score_batch_tape(tape, spec, tables.0, tables.1, rel.0, rel.1, pos);
    let ns = score_batch_tape(tape, spec, tables.0, tables.1, rel.0, rel.1, neg);
    margin_loss_tape(tape, ps, ns, margin, spec.polarity())
}

/// Stage-1 objective over one paired batch: TransE on reduced text.
/// Returns the loss and the trainable leaves by slot name.
pub fn stage1_loss(tape: &mut Tape, state: &ModelState, raw: &RawTexts, batch: &PairedBatch) -> Result<(Var, Vec<(String, Var)>)> {
    let mut named = Vec::new();
    let tv = register_text(tape, state, &mut named);
    let rel_f = tape.leaf(state.relations.forward.clone());
    named.push(("rel.forward".into(), rel_f));
    let rel_i = tape.leaf(state.relations.inverse.clone());

    let mut entities: Vec<usize> = batch
        .positives
        .iter()
        .chain(&batch.negatives)
        .flat_map(|t| [t.head.index(), t.tail.index()])
        .collect();
    entities.sort_unstable();
    entities.dedup();
    let local = |e: crate::kg::EntityId| entities.binary_search(&e.index()).expect("entity in batch");
    let pos = TripleBatch::remap(&batch.positives, local);
    let neg = TripleBatch::remap(&batch.negatives, local);
    let tables = text_tables(tape, raw, &tv, &entities)?;
    let spec = ScoreFnSpec::transe(state.config.score.p_norm);
    let loss = paired_loss(tape, &spec, state.config.stage1.margin, tables, (rel_f, rel_i), &pos, &neg);
    Ok((loss, named))
}

/// How stage 2 treats the entity feature table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Constant input.
    Frozen,
    /// A free trainable table.
    Free,
    /// Recomputed from text through trainable reductions.
    Text,
}

impl FeatureMode {
    pub fn for_state(state: &ModelState) -> Self {
        match state.config.stage2.features {
            FeatureSource::Random => FeatureMode::Free,
            FeatureSource::Text if state.config.stage2.freeze_text => FeatureMode::Frozen,
            FeatureSource::Text => FeatureMode::Text,
        }
    }
}

/// Stage-2 objective: features through the stack plus residual, scored
/// with the configured function, margin loss over the paired batch.
pub fn stage2_loss(
    tape: &mut Tape,
    state: &ModelState,
    graph: &GraphIndex,
    raw: Option<&RawTexts>,
    mode: FeatureMode,
    batch: &PairedBatch,
) -> Result<(Var, Vec<(String, Var)>)> {
    let mut named = Vec::new();
    let x = match mode {
        FeatureMode::Frozen => tape.leaf(state.features.clone()),
        FeatureMode::Free => {
            let x = tape.leaf(state.features.clone());
            named.push(("features".into(), x));
            x
        }
        FeatureMode::Text => {
            let raw = raw.ok_or_else(|| Error::Config("joint text tuning needs entity texts".into()))?;
            let tv = register_text(tape, state, &mut named);
            let all: Vec<usize> = (0..state.num_entities()).collect();
            let (h, t) = text_tables(tape, raw, &tv, &all)?;
            if h == t {
                h
            } else {
                let s = tape.add(h, t);
                tape.scale(s, 0.5)
            }
        }
    };
    let rel_f = tape.leaf(state.relations.forward.clone());
    let rel_i = tape.leaf(state.relations.inverse.clone());
    named.push(("rel.forward".into(), rel_f));
    let spec = state.config.score;
    if spec.variant == ScoreKind::Simple {
        named.push(("rel.inverse".into(), rel_i));
    }
    let final_table = match &state.stack {
        None => x,
        Some(stack) => {
            let (g, sv) = stack_forward_tape(tape, stack, graph, x)?;
            for ((name, _), v) in stack.params().into_iter().zip(sv.vars) {
                named.push((name, v));
            }
            tape.add(x, g)
        }
    };
    let pos = TripleBatch::new(&batch.positives);
    let neg = TripleBatch::new(&batch.negatives);
    let loss = paired_loss(
        tape,
        &spec,
        state.config.stage2.margin,
        (final_table, final_table),
        (rel_f, rel_i),
        &pos,
        &neg,
    );
    Ok((loss, named))
}

fn apply_gradients(state: &mut ModelState, tape: &Tape, loss: Var, named: &[(String, Var)], lr: f64) {
    let mut grads = tape.backward(loss);
    let mut by_name: BTreeMap<&str, Matrix> = BTreeMap::new();
    for (name, v) in named {
        if let Some(g) = grads.take(*v) {
            by_name.insert(name, g);
        }
    }
    let mut opt = std::mem::replace(&mut state.optimizer, Optimizer::new(state.config.optimizer.clone()));
    opt.begin_step();
    for (name, param) in state.param_slots_mut() {
        let Some((_, v)) = named.iter().find(|(n, _)| *n == name) else {
            continue;
        };
        let g = by_name
            .remove(name.as_str())
            .unwrap_or_else(|| Matrix::zeros(tape.value(*v).rows(), tape.value(*v).cols()));
        opt.update(&name, param, &g, lr);
    }
    state.optimizer = opt;
}

fn finite_loss(loss: f64, stage: u8, epoch: u64, batch: Option<usize>) -> Result<f64> {
    if loss.is_finite() {
        return Ok(loss);
    }
    Err(Error::Numeric(match batch {
        Some(b) => format!("stage {stage} loss is {loss} at epoch {epoch}, batch {b}"),
        None => format!("stage {stage} loss is {loss} at epoch {epoch}"),
    }))
}

/// Learning rate at optimizer step `step` (1-based): linear warmup over
/// the first `warmup` steps, constant afterwards.
pub fn warmup_lr(base: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

fn stage1_warmup_steps(state: &ModelState, n_train: usize) -> u64 {
    let c = &state.config.stage1;
    let per_epoch = n_train.div_ceil(c.batch_size) as u64;
    (c.warmup_fraction * (per_epoch * c.epochs) as f64).ceil() as u64
}

/// Runs stage-1 epochs from `state.epoch` up to the configured count (or
/// `opts.until_epoch`) and rematerializes the feature table.
pub fn train_stage1(state: &mut ModelState, train: &[Triple], raw: &RawTexts, mut opts: TrainOptions<'_>) -> Result<()> {
    if state.stage != Stage::Text {
        return Err(Error::Config("stage-1 training needs a stage-1 state".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("no training triples".into()));
    }
    if raw.num_entities() != state.num_entities() {
        return Err(Error::dim(format!(
            "texts cover {} entities, model has {}",
            raw.num_entities(),
            state.num_entities()
        )));
    }
    let cfg = state.config.stage1.clone();
    let known: HashSet<Triple> = train.iter().copied().collect();
    let warmup = stage1_warmup_steps(state, train.len());
    let end = opts.until_epoch.map_or(cfg.epochs, |u| u.min(cfg.epochs));
    let mut order: Vec<usize> = (0..train.len()).collect();
    while state.epoch < end {
        let started = Instant::now();
        let mut rng = state.rng.restore();
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut lr = cfg.lr;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let positives: Vec<Triple> = chunk.iter().map(|&i| train[i]).collect();
            let batch = PairedBatch::sample(
                &positives,
                &known,
                state.num_entities(),
                cfg.negatives_per_positive,
                state.config.corruption,
                &mut rng,
            )?;
            let mut tape = Tape::new();
            let (loss, named) = stage1_loss(&mut tape, state, raw, &batch)?;
            let value = finite_loss(tape.scalar(loss), 1, state.epoch + 1, Some(b))?;
            lr = warmup_lr(cfg.lr, state.optimizer.step + 1, warmup);
            apply_gradients(state, &tape, loss, &named, lr);
            total += value;
            batches += 1;
        }
        state.epoch += 1;
        state.rng = RngState::capture(&rng);
        state.features = build_feature_table(raw, &state.text)?;
        opts.emit(&EpochRecord {
            stage: 1,
            epoch: state.epoch,
            loss: total / batches as f64,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
    }
    Ok(())
}

/// Inputs stage 2 reads besides the state.
pub struct GraphData<'a> {
    /// Message-passing index over the training graph.
    pub graph: &'a GraphIndex,
    pub train: &'a [Triple],
    /// Entity texts, needed only when text tuning is unfrozen.
    pub raw: Option<&'a RawTexts>,
    /// Dev queries and the known set used to filter them, for early stopping.
    pub dev: Option<(&'a [Triple], &'a HashSet<Triple>)>,
}

/// Full-graph stage-2 epochs with freshly drawn negatives each epoch.
/// With early stopping the state is rolled back to the best dev check.
pub fn train_stage2(state: &mut ModelState, data: &GraphData<'_>, mut opts: TrainOptions<'_>) -> Result<()> {
    if state.stage != Stage::Graph {
        return Err(Error::Config("stage-2 training needs a stage-2 state".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Data("no training triples".into()));
    }
    if data.graph.num_entities() != state.num_entities() {
        return Err(Error::dim(format!(
            "graph has {} entities, model has {}",
            data.graph.num_entities(),
            state.num_entities()
        )));
    }
    let cfg = state.config.stage2.clone();
    let early = if cfg.early_stopping {
        if state.epoch > 0 {
            return Err(Error::Config("early stopping cannot resume from a mid-run checkpoint".into()));
        }
        let dev = data
            .dev
            .filter(|(d, _)| !d.is_empty())
            .ok_or_else(|| Error::Config("early stopping needs dev triples".into()))?;
        Some(dev)
    } else {
        None
    };
    let mode = FeatureMode::for_state(state);
    let known: HashSet<Triple> = data.train.iter().copied().collect();
    let end = opts.until_epoch.map_or(cfg.epochs, |u| u.min(cfg.epochs));
    let mut best: Option<(f64, ModelState)> = None;
    let mut bad_checks = 0;
    while state.epoch < end {
        let started = Instant::now();
        let mut rng = state.rng.restore();
        let batch = PairedBatch::sample(
            data.train,
            &known,
            state.num_entities(),
            cfg.negatives_per_positive,
            state.config.corruption,
            &mut rng,
        )?;
        let mut tape = Tape::new();
        let (loss, named) = stage2_loss(&mut tape, state, data.graph, data.raw, mode, &batch)?;
        let value = finite_loss(tape.scalar(loss), 2, state.epoch + 1, None)?;
        apply_gradients(state, &tape, loss, &named, cfg.lr);
        drop(tape);
        if mode == FeatureMode::Text {
            let raw = data.raw.expect("checked by stage2_loss");
            state.features = build_feature_table(raw, &state.text)?;
        }
        state.epoch += 1;
        state.rng = RngState::capture(&rng);
        opts.emit(&EpochRecord {
            stage: 2,
            epoch: state.epoch,
            loss: value,
            lr: cfg.lr,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
        if let Some((dev, dev_known)) = early {
            if state.epoch % cfg.eval_every == 0 {
                let model = state.scoring_model(data.graph)?;
                let mrr = evaluate(&model, dev, dev_known, Protocol::Filtered, state.config.eval.side)?
                    .metrics
                    .mrr;
                log::info!("epoch {}: dev filtered MRR {mrr:.4}", state.epoch);
                if best.as_ref().is_none_or(|(b, _)| mrr > *b) {
                    best = Some((mrr, state.clone()));
                    bad_checks = 0;
                } else {
                    bad_checks += 1;
                    if bad_checks >= cfg.patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, b)) = best {
        *state = b;
    }
    Ok(())
}

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the two probes straddle a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub failing: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failing.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` against `analytic`.
///
/// `eval` returns the loss and a kink signature (see
/// [`Tape::kink_signature`]); a coordinate whose two probes disagree on the
/// signature is skipped. At most `max_coords` coordinates are checked,
/// subsampled with `seed`.
pub fn gradient_check(
    mut eval: impl FnMut(&[f64]) -> (f64, u64),
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut coords: Vec<usize> = (0..params.len()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        tol,
        failing: Vec::new(),
    };
    for i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let (fp, sp) = eval(&x);
        x[i] = orig - h;
        let (fm, sm) = eval(&x);
        x[i] = orig;
        if sp != sm {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(err);
        if !(err <= tol) {
            report.failing.push(GradFailure {
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: err,
            });
        }
    }
    report
}

/// Flattened view of named parameter tables, for finite differences.
pub struct FlatParams {
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

impl FlatParams {
    fn gather(state: &ModelState, names: &[String]) -> Self {
        let slots = state.param_slots();
        let mut shapes = Vec::new();
        let mut values = Vec::new();
        for n in names {
            let (_, m) = slots.iter().find(|(s, _)| s == n).expect("known slot");
            shapes.push(m.shape());
            values.extend_from_slice(m.data());
        }
        FlatParams {
            names: names.to_vec(),
            shapes,
            values,
        }
    }

    fn scatter(&self, state: &mut ModelState, values: &[f64]) {
        for (name, m) in state.param_slots_mut() {
            if let Some(k) = self.names.iter().position(|n| *n == name) {
                let len = self.shapes[k].0 * self.shapes[k].1;
                let start = self.offset_of(k);
                m.data_mut().copy_from_slice(&values[start..start + len]);
            }
        }
    }

    fn offset_of(&self, k: usize) -> usize {
        self.shapes[..k].iter().map(|(r, c)| r * c).sum()
    }
}

/// Checks the stage-2 objective's gradient with respect to every trainable
/// table (stack, relations, and features or text reductions).
pub fn stage2_gradient_check(
    state: &ModelState,
    graph: &GraphIndex,
    raw: Option<&RawTexts>,
    batch: &PairedBatch,
    h: f64,
    tol: f64,
    max_coords: usize,
) -> Result<GradCheckReport> {
    let mode = match FeatureMode::for_state(state) {
        FeatureMode::Frozen => FeatureMode::Free,
        m => m,
    };
    let mut tape = Tape::new();
    let (loss, named) = stage2_loss(&mut tape, state, graph, raw, mode, batch)?;
    let grads = tape.backward(loss);
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let flat = FlatParams::gather(state, &names);
    let mut analytic = Vec::with_capacity(flat.values.len());
    for (_, v) in &named {
        analytic.extend_from_slice(grads.get_or_zeros(*v, tape.value(*v)).data());
    }
    let mut probe = state.clone();
    let mut failure = None;
    let report = gradient_check(
        |x| {
            flat.scatter(&mut probe, x);
            let mut t = Tape::new();
            match stage2_loss(&mut t, &probe, graph, raw, mode, batch) {
                Ok((l, _)) => (t.scalar(l), t.kink_signature()),
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, 0)
                }
            }
        },
        &flat.values,
        &analytic,
        h,
        tol,
        max_coords,
        state.config.seed,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let x = [1.0, 2.0];
        let analytic = [2.0, 4.0];
        let r = gradient_check(|p| (p.iter().map(|v| v * v).sum(), 0), &x, &analytic, 1e-4, 1e-8, 500, 0);
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn zeroed_coordinate_is_reported() {
        let x = [1.0, 2.0];
        let analytic = [2.0, 0.0];
        let r = gradient_check(|p| (p.iter().map(|v| v * v).sum(), 0), &x, &analytic, 1e-4, 1e-4, 500, 0);
        assert!(!r.passed());
        assert_eq!(r.failing.len(), 1);
        assert_eq!(r.failing[0].index, 1);
    }

    #[test]
    fn straddled_kink_is_skipped() {
        let x = [0.0];
        let r = gradient_check(|p| (p[0].abs(), (p[0] > 0.0) as u64), &x, &[0.0], 1e-4, 1e-4, 500, 0);
        assert_eq!((r.checked, r.skipped), (0, 1));
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        assert_eq!(warmup_lr(1.0, 1, 4), 0.25);
        assert_eq!(warmup_lr(1.0, 4, 4), 1.0);
        assert_eq!(warmup_lr(1.0, 9, 4), 1.0);
        assert_eq!(warmup_lr(0.5, 1, 0), 0.5);
    }
}
