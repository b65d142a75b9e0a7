//! C ABI over the kgreason engine.
//!
//! Datasets and models are opaque handles created by `*_load` and released
//! by `*_free`. Every fallible call returns a [`KgStatus`]; on failure the
//! message is available from [`kg_last_error`] on the same thread until the
//! next failing call.

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kgreason::checkpoint;
use kgreason::eval::{evaluate, predict_topk, Protocol, Side};
use kgreason::gnn::GraphIndex;
use kgreason::kg::{Direction, EntityId, RelationId, Triple};
use kgreason::pipeline::Dataset;
use kgreason::{Error, ModelState, ScoringModel};

/// Result of every fallible call. Values match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgStatus {
    Ok = 0,
    /// A required pointer argument was null or a string was not UTF-8.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// The engine panicked; the handle involved should be discarded.
    Internal = 5,
}

/// Query set for [`kg_model_evaluate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgQuerySet {
    Test = 0,
    Dev = 1,
    /// Test triples of the split's target relation.
    Target = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgProtocol {
    Raw = 0,
    Filtered = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgSide {
    Head = 0,
    Tail = 1,
    Both = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgDirection {
    /// The query entity is the head; tails are predicted.
    Out = 0,
    /// The query entity is the tail; heads are predicted.
    In = 1,
}

/// Aggregate ranking metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KgMetrics {
    pub mr: f64,
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    pub n_queries: usize,
}

/// A loaded dataset directory.
pub struct KgDataset {
    data: Dataset,
    graph: Option<GraphIndex>,
    known_all: HashSet<Triple>,
    known_train: HashSet<Triple>,
}

/// A checkpoint bound to the dataset it was loaded against.
pub struct KgModel {
    state: ModelState,
    scoring: ScoringModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> KgStatus {
    match e.exit_code() {
        2 => KgStatus::Config,
        4 => KgStatus::Numeric,
        _ => KgStatus::Data,
    }
}

enum Fail {
    Arg(String),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KgStatus::Ok,
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            KgStatus::InvalidArgument
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            KgStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::Arg(format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::Arg(format!("{what} is null")))
}

/// Message of the last failing call on this thread (empty if none). The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads `triples.tsv`, optional `texts.jsonl` and `split.json` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kg_dataset_load(dir: *const c_char, out: *mut *mut KgDataset) -> KgStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        let data = Dataset::load(Path::new(dir))?;
        let graph = match &data.split {
            Some(_) => Some(GraphIndex::new(&data.train_graph()?)),
            None => None,
        };
        let known_train = data
            .split
            .as_ref()
            .map(|s| s.train.iter().copied().collect())
            .unwrap_or_default();
        let known_all = data.known_all();
        *out = Box::into_raw(Box::new(KgDataset {
            data,
            graph,
            known_all,
            known_train,
        }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`kg_dataset_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kg_dataset_free(ds: *mut KgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn kg_dataset_num_entities(ds: *const KgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.data.kg.num_entities())
}

/// # Safety
/// `ds` must be a live dataset handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn kg_dataset_num_relations(ds: *const KgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.data.kg.num_relations())
}

/// # Safety
/// `ds` live, `name` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kg_dataset_entity_id(ds: *const KgDataset, name: *const c_char, out: *mut u32) -> KgStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let name = str_arg(name, "name")?;
        *out_arg(out, "out")? = ds.data.symbols.entity(name)?.0;
        Ok(())
    })
}

/// # Safety
/// `ds` live, `name` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kg_dataset_relation_id(ds: *const KgDataset, name: *const c_char, out: *mut u32) -> KgStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let name = str_arg(name, "name")?;
        *out_arg(out, "out")? = ds.data.symbols.relation(name)?.0;
        Ok(())
    })
}

/// Copies the entity's name (NUL-terminated) into `buf` when it fits and
/// stores the required size including the NUL in `needed`.
///
/// # Safety
/// `ds` live; `buf` writable for `cap` bytes (may be null when `cap` is 0); `needed` valid.
#[no_mangle]
pub unsafe extern "C" fn kg_dataset_entity_name(
    ds: *const KgDataset,
    id: u32,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> KgStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let needed = out_arg(needed, "needed")?;
        let name = ds.data.symbols.entities.name(id).ok_or_else(|| Error::Unknown {
            kind: "entity",
            name: id.to_string(),
        })?;
        *needed = name.len() + 1;
        if cap >= name.len() + 1 && !buf.is_null() {
            ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
            *buf.add(name.len()) = 0;
        }
        Ok(())
    })
}

/// Loads a checkpoint and computes final entity vectors over the dataset's
/// training graph.
///
/// # Safety
/// `ds` live, `path` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kg_model_load(ds: *const KgDataset, path: *const c_char, out: *mut *mut KgModel) -> KgStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let graph = ds
            .graph
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no split; the model needs its training graph".into()))?;
        let state = checkpoint::load(Path::new(path))?;
        if state.num_entities() != ds.data.kg.num_entities() || state.num_relations() != ds.data.kg.num_relations() {
            return Err(Error::Dimension("checkpoint vocabulary does not match the dataset".into()).into());
        }
        let scoring = state.scoring_model(graph)?;
        *out = Box::into_raw(Box::new(KgModel { state, scoring }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`kg_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kg_model_free(model: *mut KgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live model handle or null.
#[no_mangle]
pub unsafe extern "C" fn kg_model_dim(model: *const KgModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.dim())
}

/// 1 when lower scores are more plausible (TransE), 0 otherwise.
///
/// # Safety
/// `model` must be a live model handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn kg_model_lower_is_better(model: *const KgModel) -> i32 {
    model.as_ref().map_or(0, |m| {
        (m.scoring.spec.polarity() == kgreason::scoring::Polarity::LowerBetter) as i32
    })
}

/// # Safety
/// `model` live, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kg_model_score(model: *const KgModel, head: u32, relation: u32, tail: u32, out: *mut f64) -> KgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        let n = m.scoring.num_entities();
        if head as usize >= n || tail as usize >= n {
            return Err(Error::Unknown {
                kind: "entity",
                name: if head as usize >= n { head } else { tail }.to_string(),
            }
            .into());
        }
        if relation as usize >= m.scoring.num_relations() {
            return Err(Error::Unknown {
                kind: "relation",
                name: relation.to_string(),
            }
            .into());
        }
        *out = m.scoring.score(head as usize, relation as usize, tail as usize);
        Ok(())
    })
}

/// Copies the final vector of `entity` into `out` (`cap` doubles at least `dim`).
///
/// # Safety
/// `model` live; `out` writable for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn kg_model_entity_vector(model: *const KgModel, entity: u32, out: *mut f64, cap: usize) -> KgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if out.is_null() {
            return Err(Fail::Arg("out is null".into()));
        }
        let e = &m.scoring.entities;
        if entity as usize >= e.rows() {
            return Err(Error::Unknown {
                kind: "entity",
                name: entity.to_string(),
            }
            .into());
        }
        if cap < e.cols() {
            return Err(Fail::Arg(format!("buffer holds {cap} values, need {}", e.cols())));
        }
        ptr::copy_nonoverlapping(e.row(entity as usize).as_ptr(), out, e.cols());
        Ok(())
    })
}

/// Top-`k` candidates for the open side of a query, most plausible first.
/// Writes up to `k` ids and scores and stores the count in `out_len`.
/// With `exclude_known` nonzero, candidates forming a training triple are skipped.
///
/// # Safety
/// `model`, `ds` live; `out_ids` and `out_scores` writable for `k` values; `out_len` valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn kg_model_predict(
    model: *const KgModel,
    ds: *const KgDataset,
    entity: u32,
    relation: u32,
    direction: KgDirection,
    k: usize,
    exclude_known: i32,
    out_ids: *mut u32,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> KgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "ds")?;
        let out_len = out_arg(out_len, "out_len")?;
        if k > 0 && (out_ids.is_null() || out_scores.is_null()) {
            return Err(Fail::Arg("output buffers are null".into()));
        }
        let dir = match direction {
            KgDirection::Out => Direction::Out,
            KgDirection::In => Direction::In,
        };
        let exclude = (exclude_known != 0).then_some(&ds.known_train);
        let list = predict_topk(&m.scoring, EntityId(entity), RelationId(relation), dir, k, exclude)?;
        for (i, c) in list.candidates.iter().enumerate() {
            *out_ids.add(i) = c.entity.0;
            *out_scores.add(i) = c.score;
        }
        *out_len = list.candidates.len();
        Ok(())
    })
}

/// Ranks a query set of the dataset's split under one protocol and side.
///
/// # Safety
/// `model`, `ds` live; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kg_model_evaluate(
    model: *const KgModel,
    ds: *const KgDataset,
    set: KgQuerySet,
    protocol: KgProtocol,
    side: KgSide,
    out: *mut KgMetrics,
) -> KgStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "ds")?;
        let out = out_arg(out, "out")?;
        let split = ds.data.split()?;
        let queries = match set {
            KgQuerySet::Test => &split.test,
            KgQuerySet::Dev => &split.dev,
            KgQuerySet::Target => &split.target_test,
        };
        let protocol = match protocol {
            KgProtocol::Raw => Protocol::Raw,
            KgProtocol::Filtered => Protocol::Filtered,
        };
        let side = match side {
            KgSide::Head => Side::Head,
            KgSide::Tail => Side::Tail,
            KgSide::Both => Side::Both,
        };
        let r = evaluate(&m.scoring, queries, &ds.known_all, protocol, side)?.metrics;
        *out = KgMetrics {
            mr: r.mr,
            mrr: r.mrr,
            hit1: r.hit1,
            hit3: r.hit3,
            hit10: r.hit10,
            n_queries: r.n_queries,
        };
        Ok(())
    })
}
