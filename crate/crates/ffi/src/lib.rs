//! C ABI over the `mixedq` library.
//!
//! Every fallible function returns a [`MixedqStatus`]. On failure a message is
//! kept per thread and can be read with [`mixedq_last_error`]. Objects are
//! opaque handles released with their `_free` function; strings returned
//! through `char **` out-parameters are released with [`mixedq_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mixedq::kernels::{MethodId, OpKind};
use mixedq::model::{AssignmentMap, LayerCounts, LayerId, Model, ModelConfig};
use mixedq::quant::Tensor;
use mixedq::sensitivity::{self, DecisionRule, SensitivityTable};
use mixedq::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixedqStatus {
    Ok = 0,
    /// Null pointer, out-of-range index or mismatched buffer length.
    InvalidArgument = 1,
    InvalidInput = 2,
    Overflow = 3,
    InvalidState = 4,
    Parse = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixedqOpKind {
    Softmax = 0,
    Gelu = 1,
    LayerNorm = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixedqMethod {
    IBert = 0,
    FqVit = 1,
    IVit = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixedqRule {
    SqnrDiff = 0,
    SqnrOutput = 1,
}

/// Model architecture and quantization settings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MixedqModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub bits: u32,
    pub seed: u64,
}

/// One row of a sensitivity table.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MixedqRecord {
    pub layer_index: usize,
    pub op_kind: MixedqOpKind,
    pub method: MixedqMethod,
    pub asqnr_in_db: f64,
    pub asqnr_out_db: f64,
    pub sqnr_diff_db: f64,
}

pub struct MixedqModel(Model);
pub struct MixedqTable(SensitivityTable);
pub struct MixedqAssignment(AssignmentMap);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MixedqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) => MixedqStatus::InvalidInput,
            Error::Overflow(_) => MixedqStatus::Overflow,
            Error::InvalidState(_) => MixedqStatus::InvalidState,
            Error::Parse(_) => MixedqStatus::Parse,
            Error::Io { .. } => MixedqStatus::Io,
        };
        Failure(code, e.to_string())
    }
}

fn bad_arg(msg: impl Into<String>) -> Failure {
    Failure(MixedqStatus::InvalidArgument, msg.into())
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> MixedqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MixedqStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            MixedqStatus::Panic
        }
    }
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| bad_arg(format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| bad_arg(format!("{name} is null")))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(bad_arg(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad_arg(format!("{name} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad_arg(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(bad_arg(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn give_string(s: String, dst: &mut *mut c_char) -> FfiResult<()> {
    *dst = CString::new(s)
        .map_err(|_| bad_arg("string contains NUL"))?
        .into_raw();
    Ok(())
}

fn method_in(m: MixedqMethod) -> MethodId {
    match m {
        MixedqMethod::IBert => MethodId::IBert,
        MixedqMethod::FqVit => MethodId::FqVit,
        MixedqMethod::IVit => MethodId::IVit,
    }
}

fn method_out(m: MethodId) -> MixedqMethod {
    match m {
        MethodId::IBert => MixedqMethod::IBert,
        MethodId::FqVit => MixedqMethod::FqVit,
        MethodId::IVit => MixedqMethod::IVit,
    }
}

fn kind_in(k: MixedqOpKind) -> OpKind {
    match k {
        MixedqOpKind::Softmax => OpKind::Softmax,
        MixedqOpKind::Gelu => OpKind::Gelu,
        MixedqOpKind::LayerNorm => OpKind::LayerNorm,
    }
}

fn kind_out(k: OpKind) -> MixedqOpKind {
    match k {
        OpKind::Softmax => MixedqOpKind::Softmax,
        OpKind::Gelu => MixedqOpKind::Gelu,
        OpKind::LayerNorm => MixedqOpKind::LayerNorm,
    }
}

impl From<&ModelConfig> for MixedqModelConfig {
    fn from(c: &ModelConfig) -> Self {
        MixedqModelConfig {
            depth: c.depth,
            embed_dim: c.embed_dim,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
            seq_len: c.seq_len,
            input_dim: c.input_dim,
            num_classes: c.num_classes,
            bits: c.bits,
            seed: c.seed,
        }
    }
}

impl From<&MixedqModelConfig> for ModelConfig {
    fn from(c: &MixedqModelConfig) -> Self {
        ModelConfig {
            depth: c.depth,
            embed_dim: c.embed_dim,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
            seq_len: c.seq_len,
            input_dim: c.input_dim,
            num_classes: c.num_classes,
            bits: c.bits,
            seed: c.seed,
        }
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mixedq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mixedq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mixedq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn mixedq_model_config_default() -> MixedqModelConfig {
    (&ModelConfig::default()).into()
}

/// Builds a seeded model.
///
/// # Safety
/// `cfg` must point to a valid config and `out_model` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn mixedq_model_new(
    cfg: *const MixedqModelConfig,
    out_model: *mut *mut MixedqModel,
) -> MixedqStatus {
    guard(|| {
        let cfg = arg(cfg, "cfg")?;
        let dst = out(out_model, "out_model")?;
        let m = Model::build(cfg.into())?;
        *dst = Box::into_raw(Box::new(MixedqModel(m)));
        Ok(())
    })
}

/// Loads a model from a weights manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_model_load(
    path: *const c_char,
    out_model: *mut *mut MixedqModel,
) -> MixedqStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let dst = out(out_model, "out_model")?;
        let m = Model::load_weights(Path::new(p))?;
        *dst = Box::into_raw(Box::new(MixedqModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mixedq_model_save(
    model: *const MixedqModel,
    path: *const c_char,
) -> MixedqStatus {
    guard(|| {
        let m = arg(model, "model")?;
        m.0.save_weights(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mixedq_model_free(model: *mut MixedqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out_cfg` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_model_config(
    model: *const MixedqModel,
    out_cfg: *mut MixedqModelConfig,
) -> MixedqStatus {
    guard(|| {
        let m = arg(model, "model")?;
        *out(out_cfg, "out_cfg")? = m.0.config().into();
        Ok(())
    })
}

/// Number of non-linear layers.
///
/// # Safety
/// `model` must be a live handle and `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_model_layer_count(
    model: *const MixedqModel,
    out_count: *mut usize,
) -> MixedqStatus {
    guard(|| {
        let m = arg(model, "model")?;
        *out(out_count, "out_count")? = m.0.enumerate_nonlinear_layers().len();
        Ok(())
    })
}

/// Kind of the non-linear layer at `index`.
///
/// # Safety
/// `model` must be a live handle and `out_kind` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_model_layer_kind(
    model: *const MixedqModel,
    index: usize,
    out_kind: *mut MixedqOpKind,
) -> MixedqStatus {
    guard(|| {
        let m = arg(model, "model")?;
        let l = layer_at(&m.0, index)?;
        *out(out_kind, "out_kind")? = kind_out(l.kind);
        Ok(())
    })
}

fn layer_at(m: &Model, index: usize) -> FfiResult<LayerId> {
    m.enumerate_nonlinear_layers()
        .get(index)
        .copied()
        .ok_or_else(|| bad_arg(format!("layer index {index} out of range")))
}

fn batches(m: &Model, data: &[f64], n_batches: usize, batch_size: usize) -> FfiResult<Vec<Tensor>> {
    let c = m.config();
    let per = batch_size * c.seq_len * c.input_dim;
    if n_batches == 0 || batch_size == 0 || data.len() != n_batches * per {
        return Err(bad_arg(format!(
            "data holds {} values, expected {n_batches} x {batch_size} x {} x {}",
            data.len(),
            c.seq_len,
            c.input_dim
        )));
    }
    data.chunks(per)
        .map(|b| {
            Tensor::new(b.to_vec(), vec![batch_size, c.seq_len, c.input_dim]).map_err(Into::into)
        })
        .collect()
}

/// Measures every layer under every method.
///
/// `data` holds `n_batches * batch_size * seq_len * input_dim` values in
/// row-major `(batch, seq, feature)` order.
///
/// # Safety
/// `model` must be a live handle, `data` must point to `data_len` values and
/// `out_table` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_analyze(
    model: *const MixedqModel,
    data: *const f64,
    data_len: usize,
    n_batches: usize,
    batch_size: usize,
    out_table: *mut *mut MixedqTable,
) -> MixedqStatus {
    guard(|| {
        let m = arg(model, "model")?;
        let x = batches(&m.0, slice(data, data_len, "data")?, n_batches, batch_size)?;
        let dst = out(out_table, "out_table")?;
        let t = sensitivity::analyze(&m.0, &x)?;
        *dst = Box::into_raw(Box::new(MixedqTable(t)));
        Ok(())
    })
}

/// Parses a table from sensitivity CSV text.
///
/// # Safety
/// `csv` must be a NUL-terminated string and `out_table` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_table_from_csv(
    csv: *const c_char,
    out_table: *mut *mut MixedqTable,
) -> MixedqStatus {
    guard(|| {
        let t = SensitivityTable::from_csv(str_arg(csv, "csv")?)?;
        *out(out_table, "out_table")? = Box::into_raw(Box::new(MixedqTable(t)));
        Ok(())
    })
}

/// # Safety
/// `table` must be a live handle and `out_csv` writable. Free the result
/// with [`mixedq_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mixedq_table_to_csv(
    table: *const MixedqTable,
    out_csv: *mut *mut c_char,
) -> MixedqStatus {
    guard(|| {
        let t = arg(table, "table")?;
        give_string(t.0.to_csv()?, out(out_csv, "out_csv")?)
    })
}

/// # Safety
/// `table` must be a live handle and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_table_len(
    table: *const MixedqTable,
    out_len: *mut usize,
) -> MixedqStatus {
    guard(|| {
        *out(out_len, "out_len")? = arg(table, "table")?.0.records.len();
        Ok(())
    })
}

/// # Safety
/// `table` must be a live handle and `out_record` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_table_record(
    table: *const MixedqTable,
    index: usize,
    out_record: *mut MixedqRecord,
) -> MixedqStatus {
    guard(|| {
        let t = arg(table, "table")?;
        let r =
            t.0.records
                .get(index)
                .ok_or_else(|| bad_arg(format!("record index {index} out of range")))?;
        *out(out_record, "out_record")? = MixedqRecord {
            layer_index: r.layer.index,
            op_kind: kind_out(r.op_kind),
            method: method_out(r.method),
            asqnr_in_db: r.asqnr_in,
            asqnr_out_db: r.asqnr_out,
            sqnr_diff_db: r.sqnr_diff,
        };
        Ok(())
    })
}

/// # Safety
/// `table` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mixedq_table_free(table: *mut MixedqTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Picks one method per layer.
///
/// # Safety
/// `table` must be a live handle and `out_assignment` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_select(
    table: *const MixedqTable,
    rule: MixedqRule,
    out_assignment: *mut *mut MixedqAssignment,
) -> MixedqStatus {
    guard(|| {
        let t = arg(table, "table")?;
        let rule = match rule {
            MixedqRule::SqnrDiff => DecisionRule::SqnrDiff,
            MixedqRule::SqnrOutput => DecisionRule::SqnrOutput,
        };
        let a = sensitivity::select_assignment(&t.0, rule)?;
        *out(out_assignment, "out_assignment")? = Box::into_raw(Box::new(MixedqAssignment(a)));
        Ok(())
    })
}

/// Every layer of `model` uses `method` (GELU falls back to I-BERT for FQ-ViT).
///
/// # Safety
/// `model` must be a live handle and `out_assignment` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_assignment_uniform(
    model: *const MixedqModel,
    method: MixedqMethod,
    out_assignment: *mut *mut MixedqAssignment,
) -> MixedqStatus {
    guard(|| {
        let m = arg(model, "model")?;
        let a = AssignmentMap::uniform(m.0.enumerate_nonlinear_layers(), method_in(method));
        *out(out_assignment, "out_assignment")? = Box::into_raw(Box::new(MixedqAssignment(a)));
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string and `out_assignment` writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_assignment_from_json(
    json: *const c_char,
    out_assignment: *mut *mut MixedqAssignment,
) -> MixedqStatus {
    guard(|| {
        let a = AssignmentMap::from_json(str_arg(json, "json")?)?;
        *out(out_assignment, "out_assignment")? = Box::into_raw(Box::new(MixedqAssignment(a)));
        Ok(())
    })
}

/// # Safety
/// `assignment` must be a live handle and `out_json` writable. Free the
/// result with [`mixedq_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mixedq_assignment_to_json(
    assignment: *const MixedqAssignment,
    out_json: *mut *mut c_char,
) -> MixedqStatus {
    guard(|| {
        let a = arg(assignment, "assignment")?;
        give_string(a.0.to_json(), out(out_json, "out_json")?)
    })
}

/// Method chosen for the non-linear layer at `index` of `model`.
///
/// # Safety
/// All pointers must be live handles or writable storage.
#[no_mangle]
pub unsafe extern "C" fn mixedq_assignment_get(
    assignment: *const MixedqAssignment,
    model: *const MixedqModel,
    index: usize,
    out_method: *mut MixedqMethod,
) -> MixedqStatus {
    guard(|| {
        let a = arg(assignment, "assignment")?;
        let l = layer_at(&arg(model, "model")?.0, index)?;
        *out(out_method, "out_method")? = method_out(a.0.method(l)?);
        Ok(())
    })
}

/// # Safety
/// `assignment` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mixedq_assignment_free(assignment: *mut MixedqAssignment) {
    if !assignment.is_null() {
        drop(Box::from_raw(assignment));
    }
}

unsafe fn forward(
    model: *const MixedqModel,
    assignment: Option<*const MixedqAssignment>,
    data: *const f64,
    data_len: usize,
    batch_size: usize,
    logits: *mut f64,
    logits_len: usize,
) -> MixedqStatus {
    guard(|| {
        let m = &arg(model, "model")?.0;
        let x = batches(m, slice(data, data_len, "data")?, 1, batch_size)?.remove(0);
        let dst = slice_mut(logits, logits_len, "logits")?;
        if dst.len() != batch_size * m.config().num_classes {
            return Err(bad_arg(format!(
                "logits buffer holds {} values, expected {}",
                dst.len(),
                batch_size * m.config().num_classes
            )));
        }
        let (y, _) = match assignment {
            None => m.forward_fp(&x)?,
            Some(a) => {
                let a = &arg(a, "assignment")?.0;
                m.calibrate(&x)?;
                m.forward_quant(&x, a)?
            }
        };
        dst.copy_from_slice(y.data());
        Ok(())
    })
}

/// Float forward pass of one batch; writes `batch_size * num_classes` logits.
///
/// # Safety
/// `data` must point to `data_len` values and `logits` to `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn mixedq_forward_fp(
    model: *const MixedqModel,
    data: *const f64,
    data_len: usize,
    batch_size: usize,
    logits: *mut f64,
    logits_len: usize,
) -> MixedqStatus {
    forward(model, None, data, data_len, batch_size, logits, logits_len)
}

/// Integer forward pass of one batch under `assignment`. A model that was
/// never calibrated is calibrated on this batch first.
///
/// # Safety
/// As [`mixedq_forward_fp`]; `assignment` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mixedq_forward_quant(
    model: *const MixedqModel,
    assignment: *const MixedqAssignment,
    data: *const f64,
    data_len: usize,
    batch_size: usize,
    logits: *mut f64,
    logits_len: usize,
) -> MixedqStatus {
    forward(
        model,
        Some(assignment),
        data,
        data_len,
        batch_size,
        logits,
        logits_len,
    )
}

/// SQNR in dB of `q` against `x`, both of length `len`.
///
/// # Safety
/// `x` and `q` must point to `len` values; `out_db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mixedq_sqnr(
    x: *const f64,
    q: *const f64,
    len: usize,
    out_db: *mut f64,
) -> MixedqStatus {
    guard(|| {
        let a = Tensor::from_vec(slice(x, len, "x")?.to_vec())?;
        let b = Tensor::from_vec(slice(q, len, "q")?.to_vec())?;
        *out(out_db, "out_db")? = sensitivity::asqnr(&[a], &[b])?;
        Ok(())
    })
}

/// Runs one kernel along the rows of a `rows x cols` matrix quantized at
/// `bits` and writes the dequantized output.
///
/// # Safety
/// `input` and `output` must each point to `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn mixedq_kernel_run(
    op: MixedqOpKind,
    method: MixedqMethod,
    input: *const f64,
    rows: usize,
    cols: usize,
    bits: u32,
    output: *mut f64,
) -> MixedqStatus {
    guard(|| {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad_arg("rows * cols overflows"))?;
        let x = Tensor::new(slice(input, n, "input")?.to_vec(), vec![rows, cols])?;
        let (kind, method) = (kind_in(op), method_in(method));
        if !kind.supports(method) {
            return Err(bad_arg(format!("{kind} has no {method} kernel")));
        }
        let (y, _) = mixedq::bench::run_kernel(kind, method, &x, bits)?;
        slice_mut(output, n, "output")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// `floor(sqrt(n))` by Newton iteration capped at `max_iters` steps.
#[no_mangle]
pub extern "C" fn mixedq_isqrt(n: u64, max_iters: u32) -> u64 {
    mixedq::kernels::isqrt_newton(n, max_iters)
}

/// Exact number of assignments as a decimal string.
///
/// # Safety
/// `out_decimal` must be writable; free the result with [`mixedq_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mixedq_search_space(
    softmax: usize,
    gelu: usize,
    layernorm: usize,
    out_decimal: *mut *mut c_char,
) -> MixedqStatus {
    guard(|| {
        let c = LayerCounts {
            softmax,
            gelu,
            layernorm,
        };
        give_string(
            sensitivity::search_space_size(c).to_string(),
            out(out_decimal, "out_decimal")?,
        )
    })
}

#[no_mangle]
pub extern "C" fn mixedq_evaluation_count(softmax: usize, gelu: usize, layernorm: usize) -> u64 {
    sensitivity::evaluation_count(LayerCounts {
        softmax,
        gelu,
        layernorm,
    })
}
