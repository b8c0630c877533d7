//! C ABI over the conversation model, rule augmentations, difficulty measures
//! and training losses.
//!
//! Every fallible call returns a [`CtxStatus`]; on failure the thread-local
//! message from [`ctx_last_error`] says why. Strings returned through `out`
//! pointers are owned by the caller and released with [`ctx_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ctxaug::difficulty::{self, EmbeddingVector};
use ctxaug::rules::{self, RuleConfig};
use ctxaug::trainer;
use ctxaug::{Conversation, DependencyGraph, Error, Strategy, Turn};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    MalformedRecord = 4,
    UnknownTurn = 5,
    NotAPermutation = 6,
    GraphMismatch = 7,
    NoValidSwap = 8,
    UnsupportedStrategy = 9,
    ZeroVector = 10,
    ShapeMismatch = 11,
    ConfigInvalid = 12,
    BufferTooSmall = 13,
    EmptyCorpus = 14,
    Internal = 99,
}

impl From<&Error> for CtxStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::MalformedRecord(_) | Error::Json(_) => CtxStatus::MalformedRecord,
            Error::UnknownTurn(_) => CtxStatus::UnknownTurn,
            Error::NotAPermutation(_) => CtxStatus::NotAPermutation,
            Error::GraphMismatch { .. } => CtxStatus::GraphMismatch,
            Error::NoValidSwap => CtxStatus::NoValidSwap,
            Error::UnsupportedStrategy(_) => CtxStatus::UnsupportedStrategy,
            Error::ZeroVector => CtxStatus::ZeroVector,
            Error::ShapeMismatch { .. } => CtxStatus::ShapeMismatch,
            Error::ConfigInvalid(_) => CtxStatus::ConfigInvalid,
            Error::EmptyCorpus => CtxStatus::EmptyCorpus,
            _ => CtxStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(CtxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(CtxStatus::from(&e), e.to_string())
    }
}

fn fail<T>(status: CtxStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CtxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CtxStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CtxStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(CtxStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(CtxStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(CtxStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(CtxStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return fail(CtxStatus::NullPointer, "output pointer is null");
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).or_else(|_| fail(CtxStatus::Internal, "string contains NUL"))?;
    write_out(out, c.into_raw())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Fail> {
    serde_json::to_string(v).or_else(|e| fail(CtxStatus::Internal, e.to_string()))
}

/// Opaque parsed conversation.
pub struct CtxConversation(Conversation);

/// Opaque dependency graph.
pub struct CtxGraph(DependencyGraph);

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ctx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn ctx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ctx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses one corpus record (`{id, turns: [{query, response?}], gold_passage_id?}`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_conversation_parse(json: *const c_char, out: *mut *mut CtxConversation) -> CtxStatus {
    guard(|| {
        let conv = ctxaug::parse_conversation(str_arg(json, "json")?)?;
        write_out(out, Box::into_raw(Box::new(CtxConversation(conv))))
    })
}

/// # Safety
/// `conv` must come from [`ctx_conversation_parse`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ctx_conversation_free(conv: *mut CtxConversation) {
    if !conv.is_null() {
        drop(Box::from_raw(conv));
    }
}

/// Number of turns, the current one included; 0 for null.
///
/// # Safety
/// `conv` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ctx_conversation_turn_count(conv: *const CtxConversation) -> usize {
    conv.as_ref().map_or(0, |c| c.0.n())
}

/// Reverse-chronological token sequence as JSON `{tokens, token_count, truncated}`.
///
/// # Safety
/// `conv` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_conversation_concat(
    conv: *const CtxConversation,
    max_tokens: usize,
    out: *mut *mut c_char,
) -> CtxStatus {
    guard(|| {
        let conv = ref_arg(conv, "conversation")?;
        if max_tokens < 3 {
            return fail(CtxStatus::InvalidArgument, "max_tokens must be at least 3");
        }
        write_string(out, to_json(&ctxaug::concat_sequence(&conv.0, max_tokens))?)
    })
}

/// Edge-free graph over `turn_count` turns.
///
/// # Safety
/// `conversation_id` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_graph_new(
    conversation_id: *const c_char,
    turn_count: usize,
    out: *mut *mut CtxGraph,
) -> CtxStatus {
    guard(|| {
        let id = str_arg(conversation_id, "conversation_id")?;
        if turn_count == 0 {
            return fail(CtxStatus::InvalidArgument, "turn_count must be positive");
        }
        write_out(out, Box::into_raw(Box::new(CtxGraph(DependencyGraph::empty(id, turn_count)))))
    })
}

/// # Safety
/// `graph` must come from [`ctx_graph_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ctx_graph_free(graph: *mut CtxGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Records that turn `dependent` needs turn `prerequisite` (1-based,
/// `prerequisite < dependent`).
///
/// # Safety
/// `graph` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ctx_graph_add_edge(graph: *mut CtxGraph, prerequisite: usize, dependent: usize) -> CtxStatus {
    guard(|| {
        let g = graph.as_mut().ok_or_else(|| Fail(CtxStatus::NullPointer, "graph is null".into()))?;
        g.0.add_edge(prerequisite, dependent)?;
        Ok(())
    })
}

/// Writes the ancestors of `turn` in ascending order. `*out_len` receives the
/// full count; if it exceeds `capacity` nothing is written and
/// `CTX_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `out` must have room for `capacity` values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_graph_ancestors(
    graph: *const CtxGraph,
    turn: usize,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> CtxStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        let anc: Vec<usize> = g.0.ancestors(turn)?.into_iter().collect();
        write_out(out_len, anc.len())?;
        if anc.len() > capacity {
            return fail(CtxStatus::BufferTooSmall, format!("need room for {} turns", anc.len()));
        }
        if !anc.is_empty() {
            if out.is_null() {
                return fail(CtxStatus::NullPointer, "output buffer is null");
            }
            ptr::copy_nonoverlapping(anc.as_ptr(), out, anc.len());
        }
        Ok(())
    })
}

/// Whether `order` (a permutation of the historical turns `1..n-1`) respects
/// every edge among them.
///
/// # Safety
/// `order` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_graph_is_linear_extension(
    graph: *const CtxGraph,
    order: *const usize,
    len: usize,
    out: *mut bool,
) -> CtxStatus {
    guard(|| {
        let g = ref_arg(graph, "graph")?;
        let ok = g.0.is_linear_extension(slice_arg(order, len, "order")?)?;
        write_out(out, ok)
    })
}

/// Applies a rule strategy (`tom`, `tum` or `reo`) and returns the augmented
/// conversation as JSON. `graph` may be null for `tom`.
///
/// # Safety
/// Handles must be live; `strategy` must be a NUL-terminated string; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_augment_rule(
    conv: *const CtxConversation,
    graph: *const CtxGraph,
    strategy: *const c_char,
    token_mask_ratio: f64,
    turn_mask_ratio: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> CtxStatus {
    guard(|| {
        let conv = &ref_arg(conv, "conversation")?.0;
        let name = str_arg(strategy, "strategy")?;
        let strategy: Strategy = name.parse()?;
        let cfg = RuleConfig {
            token_mask_ratio,
            turn_mask_ratio,
            global_seed: seed,
        };
        cfg.validate()?;
        let mut rng = rules::seeded_rng(seed, conv.id(), strategy.name());
        let graph = || unsafe { ref_arg(graph, "graph") }.map(|g| &g.0);
        let aug = match strategy {
            Strategy::Tom => rules::mask_tokens(conv, &cfg, &mut rng),
            Strategy::Tum => rules::mask_turns(conv, graph()?, &cfg, &mut rng)?,
            Strategy::Reo => rules::reorder_turns(conv, graph()?, &mut rng)?,
            other => {
                return fail(
                    CtxStatus::UnsupportedStrategy,
                    format!("{other} is not a rule strategy; use ctx_insert_noisy_turn for noi"),
                )
            }
        };
        write_string(out, to_json(&aug)?)
    })
}

/// Inserts a noisy turn (`query`, optional `response`) before the current
/// query at a seeded slot.
///
/// # Safety
/// `conv` must be live; `query` must be a NUL-terminated string and
/// `response` one or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_insert_noisy_turn(
    conv: *const CtxConversation,
    query: *const c_char,
    response: *const c_char,
    seed: u64,
    out: *mut *mut c_char,
) -> CtxStatus {
    guard(|| {
        let conv = &ref_arg(conv, "conversation")?.0;
        let query = str_arg(query, "query")?;
        let response = if response.is_null() { None } else { Some(str_arg(response, "response")?.to_string()) };
        let mut rng = rules::seeded_rng(seed, conv.id(), Strategy::Noi.name());
        let aug = rules::insert_noisy_turn(conv, &Turn::new(0, query, response), &mut rng);
        write_string(out, to_json(&aug)?)
    })
}

/// `history_turns + topic_count * avg_ppl`
#[no_mangle]
pub extern "C" fn ctx_conversation_difficulty(history_turns: usize, topic_count: usize, avg_ppl: f64) -> f64 {
    difficulty::conversation_difficulty(history_turns, topic_count, avg_ppl)
}

unsafe fn vector(p: *const f64, dim: usize, what: &str) -> Result<EmbeddingVector, Fail> {
    if dim == 0 {
        return fail(CtxStatus::InvalidArgument, "dim must be positive");
    }
    Ok(EmbeddingVector::new(slice_arg(p, dim, what)?.to_vec())?)
}

/// `1 - cos(a, b)`
///
/// # Safety
/// `a` and `b` must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_pair_difficulty(a: *const f64, b: *const f64, dim: usize, out: *mut f64) -> CtxStatus {
    guard(|| write_out(out, difficulty::pair_difficulty(&vector(a, dim, "a")?, &vector(b, dim, "b")?)?))
}

/// Mean cosine of `h` to `i` and `j`.
///
/// # Safety
/// Each vector must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_negative_difficulty(
    i: *const f64,
    j: *const f64,
    h: *const f64,
    dim: usize,
    out: *mut f64,
) -> CtxStatus {
    guard(|| {
        let d = difficulty::negative_difficulty(&vector(i, dim, "i")?, &vector(j, dim, "j")?, &vector(h, dim, "h")?)?;
        write_out(out, d)
    })
}

/// Equal-frequency buckets for `count` difficulties; ties keep input order.
///
/// # Safety
/// `diffs` and `out` must each hold `count` values.
#[no_mangle]
pub unsafe extern "C" fn ctx_assign_buckets(
    diffs: *const f64,
    count: usize,
    bucket_count: usize,
    out: *mut usize,
) -> CtxStatus {
    guard(|| {
        let diffs = slice_arg(diffs, count, "diffs")?;
        let width = count.to_string().len();
        let entries: Vec<(String, f64)> = diffs.iter().enumerate().map(|(i, &d)| (format!("{i:0width$}"), d)).collect();
        let buckets = difficulty::assign_buckets(&entries, bucket_count)?;
        if out.is_null() {
            return fail(CtxStatus::NullPointer, "output buffer is null");
        }
        ptr::copy_nonoverlapping(buckets.as_ptr(), out, buckets.len());
        Ok(())
    })
}

/// Ranking loss; `negatives` is `negative_count` rows of `dim` values.
///
/// # Safety
/// `anchor` and `positive` must hold `dim` values, `negatives`
/// `negative_count * dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_rank_loss(
    anchor: *const f64,
    positive: *const f64,
    negatives: *const f64,
    negative_count: usize,
    dim: usize,
    out: *mut f64,
) -> CtxStatus {
    guard(|| {
        let a = slice_arg(anchor, dim, "anchor")?;
        let p = slice_arg(positive, dim, "positive")?;
        let rows: Vec<&[f64]> = slice_arg(negatives, negative_count * dim, "negatives")?
            .chunks(dim.max(1))
            .collect();
        write_out(out, trainer::rank_loss(a, p, &rows)?)
    })
}

/// Contrastive loss of anchor `v_i` against partner `v_j` at temperature `tau`.
///
/// # Safety
/// `v_i` and `v_j` must hold `dim` values, `negatives`
/// `negative_count * dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctx_cl_loss(
    v_i: *const f64,
    v_j: *const f64,
    negatives: *const f64,
    negative_count: usize,
    dim: usize,
    tau: f64,
    out: *mut f64,
) -> CtxStatus {
    guard(|| {
        let negs = slice_arg(negatives, negative_count * dim, "negatives")?
            .chunks(dim.max(1))
            .map(|r| EmbeddingVector::new(r.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let l = trainer::cl_loss(&vector(v_i, dim, "v_i")?, &vector(v_j, dim, "v_j")?, &negs, tau)?;
        write_out(out, l)
    })
}

#[no_mangle]
pub extern "C" fn ctx_combined_loss(l_rank: f64, l_cl: f64, alpha: f64) -> f64 {
    trainer::combined_loss(l_rank, l_cl, alpha)
}
