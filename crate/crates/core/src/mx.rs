//! Microscaling (MX) block floating point.
//!
//! A vector is cut into blocks of `block_len` consecutive elements. Each
//! block stores one shared power-of-two scale `2^w` (an 8-bit exponent,
//! `w` in `-127..=127`, with `-128` reserved for NaN) and one minifloat code
//! per element; element `i` of block `j` reads as `2^w_j * decode(c_i)`.
//!
//! Quantization picks `w = floor(log2(max |x|)) - xi_max` so the block
//! maximum lands in the top binade of the element format, then rounds each
//! `x * 2^-w` into the element format. Rounding can carry the maximum past
//! the largest finite element; such values saturate to it.

use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact_acc::{AccError, ExactAccumulator, ExactSum};
use crate::luts::{self, LutSet};
use crate::minifloat::{decode_table, floor_log2, ldexp, FloatSpec, OverflowPolicy};

pub const DEFAULT_BLOCK: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MxError {
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("operands use different element formats or block sizes ({left} vs {right})")]
    BlockMismatch { left: String, right: String },
    #[error(transparent)]
    AccumulatorTooWide(AccError),
    #[error("the vector changed length after this cursor was created")]
    StaleIterator,
    #[error("block length must be at least 1")]
    InvalidBlockLength,
    #[error("block {0} has uncommitted writes")]
    UncommittedWrites(usize),
}

/// Shared block exponent; `NAN` marks a poisoned block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleExp(i8);

impl ScaleExp {
    pub const NAN: Self = Self(i8::MIN);
    pub const MIN: i32 = -127;
    pub const MAX: i32 = 127;

    /// Clamps `w` into the representable range.
    pub fn new(w: i32) -> Self {
        Self(w.clamp(Self::MIN, Self::MAX) as i8)
    }

    pub fn is_nan(self) -> bool {
        self == Self::NAN
    }

    pub fn exp(self) -> Option<i32> {
        (!self.is_nan()).then_some(self.0 as i32)
    }

    pub fn to_bits(self) -> u8 {
        self.0 as u8
    }

    pub fn from_bits(bits: u8) -> Self {
        Self(bits as i8)
    }
}

/// Scale exponent the quantizer picks for a block, before clamping: zero
/// when no input is a normal `f64`, else set by the largest normal input.
pub fn block_exponent(elem: &FloatSpec, xs: &[f64]) -> i32 {
    let p = xs
        .iter()
        .filter(|x| x.is_normal())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if p == 0.0 {
        0
    } else {
        floor_log2(p) - elem.xi_max()
    }
}

/// Quantizes one block into `out`, returning the shared scale.
pub fn quantize_block(elem: &FloatSpec, xs: &[f64], out: &mut [u16]) -> ScaleExp {
    debug_assert_eq!(xs.len(), out.len());
    let scale = ScaleExp::new(block_exponent(elem, xs));
    let w = scale.0 as i32;
    let sat = elem.with_overflow(OverflowPolicy::Saturate);
    for (c, &x) in out.iter_mut().zip(xs) {
        *c = sat.encode_scaled(x, -w);
    }
    scale
}

/// An MX-encoded vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MxVector {
    elem: FloatSpec,
    block: usize,
    len: usize,
    codes: Vec<u16>,
    scales: Vec<ScaleExp>,
    epoch: u64,
}

impl MxVector {
    pub fn new(elem: FloatSpec, block: usize) -> Result<Self, MxError> {
        if block == 0 {
            return Err(MxError::InvalidBlockLength);
        }
        Ok(Self { elem, block, len: 0, codes: Vec::new(), scales: Vec::new(), epoch: 0 })
    }

    pub fn from_slice(elem: FloatSpec, block: usize, xs: &[f64]) -> Result<Self, MxError> {
        let mut v = Self::new(elem, block)?;
        v.assign(xs);
        Ok(v)
    }

    pub fn zeros(elem: FloatSpec, block: usize, len: usize) -> Result<Self, MxError> {
        Self::from_slice(elem, block, &vec![0.0; len])
    }

    /// Builds a vector from raw codes and block scales.
    pub fn from_parts(
        elem: FloatSpec,
        block: usize,
        codes: Vec<u16>,
        scales: Vec<ScaleExp>,
    ) -> Result<Self, MxError> {
        if block == 0 {
            return Err(MxError::InvalidBlockLength);
        }
        let blocks = codes.len().div_ceil(block);
        if scales.len() != blocks {
            return Err(MxError::LengthMismatch { left: blocks, right: scales.len() });
        }
        let mask = elem.code_mask();
        let codes = codes.into_iter().map(|c| c & mask).collect::<Vec<_>>();
        Ok(Self { elem, block, len: codes.len(), codes, scales, epoch: 0 })
    }

    /// Re-quantizes the whole vector from `xs`, replacing its contents.
    pub fn assign(&mut self, xs: &[f64]) {
        self.len = xs.len();
        self.codes.resize(xs.len(), 0);
        self.scales.clear();
        for (chunk, out) in xs.chunks(self.block).zip(self.codes.chunks_mut(self.block)) {
            self.scales.push(quantize_block(&self.elem, chunk, out));
        }
        self.epoch += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn elem(&self) -> &FloatSpec {
        &self.elem
    }

    pub fn block_len(&self) -> usize {
        self.block
    }

    pub fn block_count(&self) -> usize {
        self.scales.len()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn scales(&self) -> &[ScaleExp] {
        &self.scales
    }

    /// Scale and codes of block `j`.
    pub fn block(&self, j: usize) -> (ScaleExp, &[u16]) {
        (self.scales[j], &self.codes[self.block_range(j)])
    }

    fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        let start = j * self.block;
        start..(start + self.block).min(self.len)
    }

    /// Incremented whenever the length changes.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn get(&self, i: usize) -> Result<f64, MxError> {
        if i >= self.len {
            return Err(MxError::IndexOutOfRange { index: i, len: self.len });
        }
        let table = decode_table(&self.elem);
        Ok(scaled(self.scales[i / self.block], table[self.codes[i] as usize]))
    }

    /// Decodes block `j` into `out`, which must have the block's length.
    pub fn decode_block(&self, j: usize, out: &mut [f64]) {
        let table = decode_table(&self.elem);
        let (scale, codes) = self.block(j);
        for (o, &c) in out.iter_mut().zip(codes) {
            *o = scaled(scale, table[c as usize]);
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for j in 0..self.block_count() {
            let r = self.block_range(j);
            self.decode_block(j, &mut out[r]);
        }
        out
    }

    /// Re-quantizes block `j` from `xs`.
    pub fn set_block(&mut self, j: usize, xs: &[f64]) {
        let r = self.block_range(j);
        assert_eq!(xs.len(), r.len(), "block {j} has {} elements", r.len());
        self.scales[j] = quantize_block(&self.elem, xs, &mut self.codes[r]);
    }

    /// Writes one element; the rest of its block is re-quantized with it.
    pub fn set(&mut self, i: usize, x: f64) -> Result<(), MxError> {
        if i >= self.len {
            return Err(MxError::IndexOutOfRange { index: i, len: self.len });
        }
        let j = i / self.block;
        let r = self.block_range(j);
        let mut buf = vec![0.0; r.len()];
        self.decode_block(j, &mut buf);
        buf[i - r.start] = x;
        self.set_block(j, &buf);
        Ok(())
    }

    pub fn push(&mut self, x: f64) {
        if self.len.is_multiple_of(self.block) {
            self.codes.push(0);
            self.len += 1;
            self.scales.push(ScaleExp::new(0));
            self.set_block(self.block_count() - 1, &[x]);
        } else {
            let j = self.block_count() - 1;
            let r = self.block_range(j);
            let mut buf = vec![0.0; r.len()];
            self.decode_block(j, &mut buf);
            buf.push(x);
            self.codes.push(0);
            self.len += 1;
            self.set_block(j, &buf);
        }
        self.epoch += 1;
    }

    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            self.len = len;
            self.codes.truncate(len);
            self.scales.truncate(len.div_ceil(self.block));
            self.epoch += 1;
        }
    }

    /// Marks block `j` as NaN; every element of it then reads as NaN.
    pub fn poison_block(&mut self, j: usize) {
        self.scales[j] = ScaleExp::NAN;
    }

    /// One line per block: `block j: w=<scale> codes=<hex codes>`.
    pub fn debug_dump(&self) -> String {
        let digits = (self.elem.total_bits() as usize).div_ceil(4);
        let mut s = String::new();
        for j in 0..self.block_count() {
            let (scale, codes) = self.block(j);
            match scale.exp() {
                Some(w) => write!(s, "block {j}: w={w} codes=").unwrap(),
                None => write!(s, "block {j}: w=NaN codes=").unwrap(),
            }
            let hex: Vec<String> = codes.iter().map(|c| format!("{c:0digits$x}")).collect();
            s.push_str(&hex.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn iter(&self) -> MxIter<'_> {
        MxIter { vec: self, pos: 0, buf: Vec::with_capacity(self.block) }
    }

    /// Read/write cursor starting at element 0 with auto-commit on.
    pub fn cursor(&mut self) -> MxCursor<'_> {
        let epoch = self.epoch;
        MxCursor { vec: self, pos: 0, loaded: None, buf: Vec::new(), dirty: false, auto_commit: true, epoch }
    }
}

fn scaled(scale: ScaleExp, v: f64) -> f64 {
    match scale.exp() {
        Some(w) => ldexp(v, w),
        None => f64::NAN,
    }
}

/// Read-only iterator decoding one block at a time.
pub struct MxIter<'a> {
    vec: &'a MxVector,
    pos: usize,
    buf: Vec<f64>,
}

impl Iterator for MxIter<'_> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.pos >= self.vec.len {
            return None;
        }
        let (j, k) = (self.pos / self.vec.block, self.pos % self.vec.block);
        if k == 0 {
            let r = self.vec.block_range(j);
            self.buf.resize(r.len(), 0.0);
            self.vec.decode_block(j, &mut self.buf);
        }
        self.pos += 1;
        Some(self.buf[k])
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.vec.len - self.pos;
        (n, Some(n))
    }
}

impl ExactSizeIterator for MxIter<'_> {}

/// Sequential read/write access through a decoded copy of one block.
///
/// Writes go to the buffer and reach the vector on [`MxCursor::commit`],
/// which re-quantizes the whole block. With auto-commit on (the default)
/// that also happens when the cursor moves to another block and when it is
/// dropped. If the vector's length changes through
/// [`MxCursor::vector_mut`], every later access fails with
/// [`MxError::StaleIterator`] until [`MxCursor::refresh`].
pub struct MxCursor<'a> {
    vec: &'a mut MxVector,
    pos: usize,
    loaded: Option<usize>,
    buf: Vec<f64>,
    dirty: bool,
    auto_commit: bool,
    epoch: u64,
}

impl MxCursor<'_> {
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn set_auto_commit(&mut self, on: bool) {
        self.auto_commit = on;
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    fn check(&self) -> Result<(), MxError> {
        if self.epoch != self.vec.epoch {
            return Err(MxError::StaleIterator);
        }
        if self.pos >= self.vec.len {
            return Err(MxError::IndexOutOfRange { index: self.pos, len: self.vec.len });
        }
        Ok(())
    }

    fn load(&mut self) -> Result<usize, MxError> {
        self.check()?;
        let j = self.pos / self.vec.block;
        if self.loaded != Some(j) {
            if self.dirty {
                let prev = self.loaded.unwrap();
                if !self.auto_commit {
                    return Err(MxError::UncommittedWrites(prev));
                }
                self.vec.set_block(prev, &self.buf);
                self.dirty = false;
            }
            let r = self.vec.block_range(j);
            self.buf.resize(r.len(), 0.0);
            self.vec.decode_block(j, &mut self.buf);
            self.loaded = Some(j);
        }
        Ok(self.pos % self.vec.block)
    }

    /// Moves to element `i`.
    pub fn seek(&mut self, i: usize) -> Result<(), MxError> {
        if self.epoch != self.vec.epoch {
            return Err(MxError::StaleIterator);
        }
        let target = i / self.vec.block;
        if self.dirty && !self.auto_commit && self.loaded != Some(target) {
            return Err(MxError::UncommittedWrites(self.loaded.unwrap()));
        }
        self.pos = i;
        Ok(())
    }

    pub fn advance(&mut self) -> Result<(), MxError> {
        self.seek(self.pos + 1)
    }

    pub fn read(&mut self) -> Result<f64, MxError> {
        let k = self.load()?;
        Ok(self.buf[k])
    }

    pub fn write(&mut self, x: f64) -> Result<(), MxError> {
        let k = self.load()?;
        self.buf[k] = x;
        self.dirty = true;
        Ok(())
    }

    /// Re-quantizes the buffered block into the vector and reloads it.
    pub fn commit(&mut self) -> Result<(), MxError> {
        if self.epoch != self.vec.epoch {
            return Err(MxError::StaleIterator);
        }
        if let (true, Some(j)) = (self.dirty, self.loaded) {
            self.vec.set_block(j, &self.buf);
            self.vec.decode_block(j, &mut self.buf);
            self.dirty = false;
        }
        Ok(())
    }

    /// Drops uncommitted writes and resynchronizes with the vector.
    pub fn refresh(&mut self) {
        self.epoch = self.vec.epoch;
        self.loaded = None;
        self.dirty = false;
    }

    /// Direct access to the underlying vector.
    pub fn vector_mut(&mut self) -> &mut MxVector {
        self.vec
    }
}

impl Drop for MxCursor<'_> {
    fn drop(&mut self) {
        if self.auto_commit {
            let _ = self.commit();
        }
    }
}

/// How block products are summed in [`mx_dot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumulatorKind {
    /// `f64` sums inside and across blocks.
    #[default]
    WideFloat,
    /// Fixed-point register per block, blocks combined with a single final
    /// rounding to `f64`.
    Exact,
    /// Every product and partial sum rounded to the element format.
    NarrowSameFormat,
}

impl AccumulatorKind {
    pub fn parse(id: &str) -> Option<Self> {
        match id {
            "wide" => Some(Self::WideFloat),
            "exact" => Some(Self::Exact),
            "narrow" => Some(Self::NarrowSameFormat),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::WideFloat => "wide",
            Self::Exact => "exact",
            Self::NarrowSameFormat => "narrow",
        }
    }
}

/// Checks that `elem` and `block` support an accumulator kind.
pub fn check_accumulator(elem: &FloatSpec, block: usize, acc: AccumulatorKind) -> Result<(), MxError> {
    if acc == AccumulatorKind::Exact {
        ExactAccumulator::new(*elem, block).map_err(MxError::AccumulatorTooWide)?;
    }
    Ok(())
}

fn lut_disabled_by_env() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var("MX_LUT_DISABLE").is_ok_and(|v| v == "1"))
}

/// Product tables for the element format, when they give exact products.
fn product_lut(elem: &FloatSpec) -> Option<&'static LutSet> {
    if lut_disabled_by_env() || elem.total_bits() > 8 {
        return None;
    }
    luts::shared(*elem, FloatSpec::E8M7).ok().filter(|l| l.products_exact())
}

/// Dot product of two MX vectors with the same element format and block
/// length.
pub fn mx_dot(a: &MxVector, b: &MxVector, acc: AccumulatorKind) -> Result<f64, MxError> {
    mx_dot_with(a, b, acc, product_lut(&a.elem).is_some())
}

/// [`mx_dot`] with explicit control over table-driven products on the wide
/// path.
pub fn mx_dot_with(a: &MxVector, b: &MxVector, acc: AccumulatorKind, use_lut: bool) -> Result<f64, MxError> {
    if a.len != b.len {
        return Err(MxError::LengthMismatch { left: a.len, right: b.len });
    }
    if a.elem != b.elem || a.block != b.block {
        return Err(MxError::BlockMismatch {
            left: format!("{}/{}", a.elem, a.block),
            right: format!("{}/{}", b.elem, b.block),
        });
    }
    let lut = if use_lut { product_lut(&a.elem) } else { None };
    match acc {
        AccumulatorKind::WideFloat => Ok(dot_wide(a, b, lut)),
        AccumulatorKind::Exact => dot_exact(a, b),
        AccumulatorKind::NarrowSameFormat => Ok(dot_narrow(a, b)),
    }
}

fn block_sum_wide(ca: &[u16], cb: &[u16], elem: &FloatSpec, lut: Option<&LutSet>) -> f64 {
    match lut {
        Some(l) => {
            let out = decode_table(l.out_spec());
            ca.iter().zip(cb).map(|(&x, &y)| out[l.lut_mul(x, y) as usize]).sum()
        }
        None => {
            let t = decode_table(elem);
            ca.iter().zip(cb).map(|(&x, &y)| t[x as usize] * t[y as usize]).sum()
        }
    }
}

fn block_scale(a: ScaleExp, b: ScaleExp) -> Option<i32> {
    Some(a.exp()? + b.exp()?)
}

fn dot_wide(a: &MxVector, b: &MxVector, lut: Option<&LutSet>) -> f64 {
    let mut total = 0.0;
    for j in 0..a.block_count() {
        let ((sa, ca), (sb, cb)) = (a.block(j), b.block(j));
        let s = block_sum_wide(ca, cb, &a.elem, lut);
        total += match block_scale(sa, sb) {
            Some(w) => ldexp(s, w),
            None => f64::NAN,
        };
    }
    total
}

fn dot_exact(a: &MxVector, b: &MxVector) -> Result<f64, MxError> {
    let mut acc = ExactAccumulator::new(a.elem, a.block).map_err(MxError::AccumulatorTooWide)?;
    let mut total = ExactSum::new();
    for j in 0..a.block_count() {
        let ((sa, ca), (sb, cb)) = (a.block(j), b.block(j));
        let Some(w) = block_scale(sa, sb) else {
            total.add(f64::NAN);
            continue;
        };
        acc.clear();
        let exact = ca.iter().zip(cb).try_for_each(|(&x, &y)| acc.mul_add(x, y));
        match exact {
            Ok(()) => {
                let (hi, lo) = acc.to_f64_pair(w);
                total.add(hi);
                total.add(lo);
            }
            Err(AccError::UnsupportedSpecial) => {
                // NaN or infinite elements: the wide path propagates them
                total.add(ldexp(block_sum_wide(ca, cb, &a.elem, None), w));
            }
            Err(e) => return Err(MxError::AccumulatorTooWide(e)),
        }
    }
    Ok(total.value())
}

fn dot_narrow(a: &MxVector, b: &MxVector) -> f64 {
    let spec = a.elem.with_overflow(OverflowPolicy::ToInfinity);
    let round = |x: f64| spec.decode(spec.encode(x));
    let mut sum = 0.0;
    for j in 0..a.block_count() {
        let ((sa, _), (sb, _)) = (a.block(j), b.block(j));
        let r = a.block_range(j);
        let mut xa = vec![0.0; r.len()];
        let mut xb = vec![0.0; r.len()];
        a.decode_block(j, &mut xa);
        b.decode_block(j, &mut xb);
        if block_scale(sa, sb).is_none() {
            return f64::NAN;
        }
        for (x, y) in xa.iter().zip(&xb) {
            sum = round(sum + round(x * y));
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_without_normal_inputs_get_unit_scale() {
        let tiny = f64::from_bits(1);
        let mut out = [0u16; 3];
        assert_eq!(quantize_block(&FloatSpec::E4M3, &[0.0, tiny, -tiny], &mut out).exp(), Some(0));
        assert!(out.iter().all(|&c| FloatSpec::E4M3.decode(c) == 0.0));
        assert_eq!(quantize_block(&FloatSpec::E4M3, &[tiny, 1.0], &mut [0; 2]).exp(), Some(-8));
    }

    #[test]
    fn scale_exponent_encoding() {
        assert_eq!(ScaleExp::new(300).exp(), Some(127));
        assert_eq!(ScaleExp::new(-300).exp(), Some(-127));
        assert!(ScaleExp::NAN.is_nan());
        assert_eq!(ScaleExp::NAN.to_bits(), 0x80);
        assert_eq!(ScaleExp::from_bits(0xff).exp(), Some(-1));
    }

    #[test]
    fn quantize_places_max_in_top_binade() {
        let xs = [1.0, -3.0, 0.5, 0.0];
        let v = MxVector::from_slice(FloatSpec::E4M3, 4, &xs).unwrap();
        // max 3 = 1.5 * 2^1, xi_max = 8
        assert_eq!(v.scales()[0].exp(), Some(1 - 8));
        assert_eq!(v.to_vec(), xs.to_vec());
    }

    #[test]
    fn element_rounding_saturates() {
        // 1.9375 * 2^k rounds past 448 * 2^(k-8); it clamps instead
        let v = MxVector::from_slice(FloatSpec::E4M3, 2, &[1.96875, 0.0]).unwrap();
        assert_eq!(v.codes()[0], FloatSpec::E4M3.max_finite_bits());
        assert_eq!(v.get(0).unwrap(), 1.75);
    }

    #[test]
    fn scale_clamps_for_extreme_inputs() {
        let v = MxVector::from_slice(FloatSpec::E4M3, 2, &[2f64.powi(200), 1.0]).unwrap();
        assert_eq!(v.scales()[0].exp(), Some(127));
        assert_eq!(v.get(0).unwrap(), 448.0 * 2f64.powi(127));
        let w = MxVector::from_slice(FloatSpec::E4M3, 2, &[2f64.powi(-130), 2f64.powi(-140)]).unwrap();
        assert_eq!(w.scales()[0].exp(), Some(-127));
        assert_eq!(w.get(0).unwrap(), 2f64.powi(-130));
        // 2^-13 is below the smallest E4M3 subnormal
        assert_eq!(w.get(1).unwrap(), 0.0);
    }

    #[test]
    fn nan_inputs_and_poisoned_blocks() {
        let mut v = MxVector::from_slice(FloatSpec::E4M3, 2, &[f64::NAN, 2.0, 1.0, 1.0]).unwrap();
        assert!(v.get(0).unwrap().is_nan());
        assert_eq!(v.get(1).unwrap(), 2.0);
        assert!(!v.scales()[0].is_nan());
        v.poison_block(1);
        assert!(v.get(2).unwrap().is_nan() && v.get(3).unwrap().is_nan());
        assert!(v.debug_dump().contains("block 1: w=NaN"));
    }

    #[test]
    fn index_errors() {
        let v = MxVector::from_slice(FloatSpec::E4M3, 4, &[1.0; 5]).unwrap();
        assert_eq!(v.get(5), Err(MxError::IndexOutOfRange { index: 5, len: 5 }));
        assert_eq!(v.block_count(), 2);
        assert!(MxVector::new(FloatSpec::E4M3, 0).is_err());
    }

    #[test]
    fn debug_dump_format() {
        let v = MxVector::from_slice(FloatSpec::E4M3, 2, &[1.0, -1.0]).unwrap();
        assert_eq!(v.debug_dump(), "block 0: w=-8 codes=78 f8\n");
    }

    #[test]
    fn push_and_truncate() {
        let mut v = MxVector::new(FloatSpec::E4M3, 2).unwrap();
        for x in [1.0, 2.0, 4.0] {
            v.push(x);
        }
        assert_eq!(v.to_vec(), vec![1.0, 2.0, 4.0]);
        v.truncate(1);
        assert_eq!(v.to_vec(), vec![1.0]);
        assert_eq!(v.block_count(), 1);
    }

    #[test]
    fn cursor_round_trip_and_auto_commit() {
        let mut v = MxVector::from_slice(FloatSpec::E4M3, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        {
            let mut c = v.cursor();
            for i in 0..4 {
                let x = c.read().unwrap();
                c.write(x * 2.0).unwrap();
                if i < 3 {
                    c.advance().unwrap();
                }
            }
        }
        assert_eq!(v.to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn cursor_manual_commit() {
        let mut v = MxVector::from_slice(FloatSpec::E4M3, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut c = v.cursor();
        c.set_auto_commit(false);
        c.write(8.0).unwrap();
        c.advance().unwrap();
        assert_eq!(c.advance(), Err(MxError::UncommittedWrites(0)));
        c.commit().unwrap();
        c.advance().unwrap();
        assert_eq!(c.read().unwrap(), 3.0);
        drop(c);
        assert_eq!(v.get(0).unwrap(), 8.0);
    }

    #[test]
    fn cursor_goes_stale_on_length_change() {
        let mut v = MxVector::from_slice(FloatSpec::E4M3, 2, &[1.0, 2.0]).unwrap();
        let mut c = v.cursor();
        c.read().unwrap();
        c.vector_mut().push(5.0);
        assert_eq!(c.read(), Err(MxError::StaleIterator));
        c.refresh();
        c.seek(2).unwrap();
        assert_eq!(c.read().unwrap(), 5.0);
    }

    #[test]
    fn iterator_matches_get() {
        let xs: Vec<f64> = (0..70).map(|i| (i as f64 - 30.0) * 0.37).collect();
        let v = MxVector::from_slice(FloatSpec::E5M2, 32, &xs).unwrap();
        let it: Vec<f64> = v.iter().collect();
        let by_index: Vec<f64> = (0..70).map(|i| v.get(i).unwrap()).collect();
        assert_eq!(it, by_index);
    }

    #[test]
    fn dot_kinds_agree_on_small_exact_cases() {
        let a = MxVector::from_slice(FloatSpec::E4M3, 4, &[1.0, 2.0, -0.5, 3.0, 1.0]).unwrap();
        let b = MxVector::from_slice(FloatSpec::E4M3, 4, &[2.0, 0.25, 4.0, 1.0, -1.0]).unwrap();
        for acc in [AccumulatorKind::WideFloat, AccumulatorKind::Exact, AccumulatorKind::NarrowSameFormat] {
            assert_eq!(mx_dot(&a, &b, acc).unwrap(), 2.5, "{acc:?}");
        }
        assert_eq!(mx_dot_with(&a, &b, AccumulatorKind::WideFloat, false).unwrap(), 2.5);
    }

    #[test]
    fn dot_errors() {
        let a = MxVector::from_slice(FloatSpec::E4M3, 4, &[1.0; 4]).unwrap();
        let b = MxVector::from_slice(FloatSpec::E4M3, 4, &[1.0; 5]).unwrap();
        let c = MxVector::from_slice(FloatSpec::E4M3, 2, &[1.0; 4]).unwrap();
        let d = MxVector::from_slice(FloatSpec::E5M2, 4, &[1.0; 4]).unwrap();
        assert!(matches!(mx_dot(&a, &b, AccumulatorKind::WideFloat), Err(MxError::LengthMismatch { .. })));
        assert!(matches!(mx_dot(&a, &c, AccumulatorKind::WideFloat), Err(MxError::BlockMismatch { .. })));
        assert!(matches!(mx_dot(&d, &d, AccumulatorKind::Exact), Err(MxError::AccumulatorTooWide(_))));
    }

    #[test]
    fn nan_scale_poisons_dot() {
        let mut a = MxVector::from_slice(FloatSpec::E4M3, 2, &[1.0; 4]).unwrap();
        let b = a.clone();
        a.poison_block(1);
        for acc in [AccumulatorKind::WideFloat, AccumulatorKind::Exact, AccumulatorKind::NarrowSameFormat] {
            assert!(mx_dot(&a, &b, acc).unwrap().is_nan());
        }
    }
}
