//! Dense tensors stored in configurable number formats, plus the matrix and
//! softmax kernels used by the training loop.
//!
//! All arithmetic runs in `f64`. A [`ContainerKind`] says what happens when a
//! result is stored: [`ContainerKind::project`] rounds a buffer in place to
//! exactly the values a store followed by a load would give.

pub mod kernels;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minifloat::{decode_table, FloatSpec, RoundingPolicy, SpecError};
use crate::mx::{check_accumulator, mx_dot, AccumulatorKind, MxError, MxVector, DEFAULT_BLOCK};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected} elements, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Mx(#[from] MxError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("unknown container `{0}`")]
    UnknownContainer(String),
}

/// Storage format of a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainerKind {
    /// `f64`, the computation carrier.
    Wide,
    /// Native IEEE binary32, round to nearest even.
    F32,
    Mini(FloatSpec),
    Mx { elem: FloatSpec, block: usize },
}

impl ContainerKind {
    /// Parses `f64`, `f32`, a minifloat id, or `mx-<id>[/<block>]`.
    pub fn parse(id: &str) -> Result<Self, TensorError> {
        let id = id.to_ascii_lowercase();
        match id.as_str() {
            "f64" | "wide" => return Ok(Self::Wide),
            "f32" | "fp32" => return Ok(Self::F32),
            _ => {}
        }
        if let Some(rest) = id.strip_prefix("mx-") {
            let (elem, block) = match rest.split_once('/') {
                Some((e, b)) => (e, b.parse().map_err(|_| TensorError::UnknownContainer(id.clone()))?),
                None => (rest, DEFAULT_BLOCK),
            };
            if block == 0 {
                return Err(MxError::InvalidBlockLength.into());
            }
            return Ok(Self::Mx { elem: FloatSpec::from_id(elem)?, block });
        }
        Ok(Self::Mini(FloatSpec::from_id(&id)?))
    }

    pub fn id(&self) -> String {
        match self {
            Self::Wide => "f64".into(),
            Self::F32 => "f32".into(),
            Self::Mini(s) => s.id(),
            Self::Mx { elem, block } => format!("mx-{}/{}", elem.id(), block),
        }
    }

    /// Same container with the given rounding policy for minifloat elements.
    pub fn with_rounding(self, policy: RoundingPolicy) -> Self {
        match self {
            Self::Mini(s) => Self::Mini(s.with_rounding(policy)),
            Self::Mx { elem, block } => Self::Mx { elem: elem.with_rounding(policy), block },
            other => other,
        }
    }

    /// Rounds `xs` in place to what storing and reloading them would give.
    /// MX blocks start at `xs[0]`.
    pub fn project(&self, xs: &mut [f64]) {
        match self {
            Self::Wide => {}
            Self::F32 => xs.iter_mut().for_each(|x| *x = *x as f32 as f64),
            Self::Mini(spec) => {
                let table = decode_table(spec);
                xs.iter_mut().for_each(|x| *x = table[spec.encode(*x) as usize]);
            }
            Self::Mx { elem, block } => {
                let table = decode_table(elem);
                let mut codes = vec![0u16; *block];
                for chunk in xs.chunks_mut(*block) {
                    let codes = &mut codes[..chunk.len()];
                    let scale = crate::mx::quantize_block(elem, chunk, codes);
                    for (x, &c) in chunk.iter_mut().zip(codes.iter()) {
                        *x = match scale.exp() {
                            Some(w) => crate::minifloat::ldexp(table[c as usize], w),
                            None => f64::NAN,
                        };
                    }
                }
            }
        }
    }

    pub fn is_wide(&self) -> bool {
        matches!(self, Self::Wide)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Wide(Vec<f64>),
    F32(Vec<f32>),
    Mini { spec: FloatSpec, codes: Vec<u16> },
    Mx(MxVector),
}

/// A row-major tensor held in one of the container formats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Storage,
}

impl Tensor {
    pub fn from_f64(dims: &[usize], kind: ContainerKind, xs: &[f64]) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if expected != xs.len() {
            return Err(TensorError::ShapeMismatch { expected, got: xs.len() });
        }
        let data = match kind {
            ContainerKind::Wide => Storage::Wide(xs.to_vec()),
            ContainerKind::F32 => Storage::F32(xs.iter().map(|&x| x as f32).collect()),
            ContainerKind::Mini(spec) => Storage::Mini { spec, codes: xs.iter().map(|&x| spec.encode(x)).collect() },
            ContainerKind::Mx { elem, block } => Storage::Mx(MxVector::from_slice(elem, block, xs)?),
        };
        Ok(Self { dims: dims.to_vec(), data })
    }

    pub fn zeros(dims: &[usize], kind: ContainerKind) -> Result<Self, TensorError> {
        Self::from_f64(dims, kind, &vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ContainerKind {
        match &self.data {
            Storage::Wide(_) => ContainerKind::Wide,
            Storage::F32(_) => ContainerKind::F32,
            Storage::Mini { spec, .. } => ContainerKind::Mini(*spec),
            Storage::Mx(v) => ContainerKind::Mx { elem: *v.elem(), block: v.block_len() },
        }
    }

    pub fn get(&self, i: usize) -> Result<f64, TensorError> {
        let n = self.len();
        if i >= n {
            return Err(MxError::IndexOutOfRange { index: i, len: n }.into());
        }
        Ok(match &self.data {
            Storage::Wide(v) => v[i],
            Storage::F32(v) => v[i] as f64,
            Storage::Mini { spec, codes } => spec.decode(codes[i]),
            Storage::Mx(v) => v.get(i)?,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match &self.data {
            Storage::Wide(v) => v.clone(),
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::Mini { spec, codes } => {
                let t = decode_table(spec);
                codes.iter().map(|&c| t[c as usize]).collect()
            }
            Storage::Mx(v) => v.to_vec(),
        }
    }

    /// Replaces the contents, keeping shape and container.
    pub fn store(&mut self, xs: &[f64]) -> Result<(), TensorError> {
        let replacement = Self::from_f64(&self.dims, self.kind(), xs)?;
        *self = replacement;
        Ok(())
    }

    pub fn reshape(&mut self, dims: &[usize]) -> Result<(), TensorError> {
        let expected: usize = dims.iter().product();
        if expected != self.len() {
            return Err(TensorError::ShapeMismatch { expected, got: self.len() });
        }
        self.dims = dims.to_vec();
        Ok(())
    }

    pub fn as_mx(&self) -> Option<&MxVector> {
        match &self.data {
            Storage::Mx(v) => Some(v),
            _ => None,
        }
    }
}

/// Transpose of a row-major `rows x cols` matrix, without copying.
///
/// Element `i` of the view (row-major over `cols x rows`) is
/// `source[(i % rows) * cols + i / rows]`, so each row of the view is a
/// column of the source.
#[derive(Debug, Clone, Copy)]
pub struct TransposedView<'a> {
    source: &'a [f64],
    rows: usize,
    cols: usize,
}

pub fn transpose_view(source: &[f64], rows: usize, cols: usize) -> Result<TransposedView<'_>, TensorError> {
    if rows * cols != source.len() {
        return Err(TensorError::ShapeMismatch { expected: rows * cols, got: source.len() });
    }
    Ok(TransposedView { source, rows, cols })
}

impl TransposedView<'_> {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Rows of the view (columns of the source).
    #[allow(clippy::misnamed_getters)]
    pub fn rows(&self) -> usize {
        self.cols
    }

    #[allow(clippy::misnamed_getters)]
    pub fn cols(&self) -> usize {
        self.rows
    }

    pub fn get(&self, i: usize) -> f64 {
        self.source[(i % self.rows) * self.cols + i / self.rows]
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |k| self.source[k * self.cols + r])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.cols).flat_map(|r| self.row(r)).collect()
    }
}

/// How a matrix product reduces along its inner dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatmulMode {
    /// Plain `f64` dot products of the stored operands.
    Direct,
    /// Both operands are quantized to MX along the reduction dimension and
    /// multiplied with [`mx_dot`].
    OnlineMx { elem: FloatSpec, block: usize, acc: AccumulatorKind },
}

impl MatmulMode {
    pub fn validate(&self) -> Result<(), TensorError> {
        if let Self::OnlineMx { elem, block, acc } = self {
            check_accumulator(elem, *block, *acc)?;
        }
        Ok(())
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), TensorError> {
    if expected != got {
        return Err(TensorError::ShapeMismatch { expected, got });
    }
    Ok(())
}

fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Block-wise `f64` dot of two already dequantized MX rows; the same sum as
/// the wide path of [`mx_dot`].
fn dot_blocked(a: &[f64], b: &[f64], block: usize) -> f64 {
    a.chunks(block).zip(b.chunks(block)).map(|(x, y)| dot_f64(x, y)).sum()
}

/// `out[i][j] = sum_k a[i][k] * b[j][k]` for `a: m x k`, `b: n x k`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, mode: &MatmulMode) -> Result<Vec<f64>, TensorError> {
    check_len(m * k, a.len())?;
    check_len(n * k, b.len())?;
    let mut out = vec![0.0; m * n];
    if k == 0 || n == 0 {
        return Ok(out);
    }
    match *mode {
        MatmulMode::Direct => {
            out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(o, ar)| {
                for (oj, br) in o.iter_mut().zip(b.chunks(k)) {
                    *oj = dot_f64(ar, br);
                }
            });
        }
        MatmulMode::OnlineMx { elem, block, acc } => {
            check_accumulator(&elem, block, acc)?;
            let quantize = |x: &[f64]| -> Vec<MxVector> {
                x.par_chunks(k).map(|r| MxVector::from_slice(elem, block, r).expect("block checked")).collect()
            };
            let (qa, qb) = (quantize(a), quantize(b));
            if acc == AccumulatorKind::WideFloat {
                let da: Vec<Vec<f64>> = qa.iter().map(MxVector::to_vec).collect();
                let db: Vec<Vec<f64>> = qb.iter().map(MxVector::to_vec).collect();
                out.par_chunks_mut(n).zip(da.par_iter()).for_each(|(o, ar)| {
                    for (oj, br) in o.iter_mut().zip(&db) {
                        *oj = dot_blocked(ar, br, block);
                    }
                });
            } else {
                out.par_chunks_mut(n).zip(qa.par_iter()).try_for_each(|(o, ar)| {
                    for (oj, br) in o.iter_mut().zip(&qb) {
                        *oj = mx_dot(ar, br, acc)?;
                    }
                    Ok::<(), MxError>(())
                })?;
            }
        }
    }
    Ok(out)
}

/// `out = inp * weight^T + bias` with `inp: bt x c`, `weight: oc x c`
/// (each output channel's weights contiguous), `out: bt x oc`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_forward(
    out: &mut [f64],
    inp: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    bt: usize,
    c: usize,
    oc: usize,
    mode: &MatmulMode,
) -> Result<(), TensorError> {
    check_len(bt * oc, out.len())?;
    let prod = gemm_nt(inp, weight, bt, oc, c, mode)?;
    out.copy_from_slice(&prod);
    if let Some(bias) = bias {
        check_len(oc, bias.len())?;
        for row in out.chunks_mut(oc) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
    }
    Ok(())
}

/// Accumulates the gradients of [`matmul_forward`] into `dinp`, `dweight`
/// and `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    dinp: &mut [f64],
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
    dout: &[f64],
    inp: &[f64],
    weight: &[f64],
    bt: usize,
    c: usize,
    oc: usize,
    mode: &MatmulMode,
) -> Result<(), TensorError> {
    check_len(bt * c, dinp.len())?;
    check_len(oc * c, dweight.len())?;
    check_len(bt * oc, dout.len())?;
    // dinp = dout * weight: reduce over oc along columns of weight
    let wt = transpose_view(weight, oc, c)?.to_vec();
    let d = gemm_nt(dout, &wt, bt, c, oc, mode)?;
    dinp.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    // dweight = dout^T * inp: reduce over bt along columns of both
    let dt = transpose_view(dout, bt, oc)?.to_vec();
    let it = transpose_view(inp, bt, c)?.to_vec();
    let d = gemm_nt(&dt, &it, oc, c, bt, mode)?;
    dweight.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    if let Some(dbias) = dbias {
        check_len(oc, dbias.len())?;
        for row in dout.chunks(oc) {
            dbias.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    Ok(())
}

/// Softmax of `logits` given their maximum, in two passes.
///
/// The first pass only sums `exp(x - maxval)`; the second writes the
/// normalized values, which are then stored through `kind`. An all-zero
/// sum yields zeros instead of NaN.
pub fn softmax_twopass(logits: &[f64], maxval: f64, out: &mut [f64], kind: &ContainerKind) {
    let sum: f64 = logits.iter().map(|&x| (x - maxval).exp()).sum();
    let inv = if sum == 0.0 { 0.0 } else { 1.0 / sum };
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - maxval).exp() * inv;
    }
    kind.project(out);
}
