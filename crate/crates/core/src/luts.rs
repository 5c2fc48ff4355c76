//! Table-driven arithmetic on formats of at most 8 bits.
//!
//! A [`LutSet`] maps operand codes of a narrow input format straight to
//! result codes of a (usually wider) output format:
//!
//! * multiplication, indexed by the two magnitudes; the sign is the XOR of
//!   the operand signs (NaN results included),
//! * addition, indexed by a signed first operand and the magnitude of the
//!   second, with the remaining sign cases reduced to that one,
//! * reciprocal, indexed by magnitude and landing back in the input format.
//!
//! Entries are computed from the exact result rounded once into the target
//! format with that format's rounding policy.
//!
//! Addition results are NaN with the sign bit set only when both operands
//! have the sign bit set.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::{Mutex, OnceLock};

use thiserror::Error;

use crate::minifloat::{FloatClass, FloatSpec, OverflowPolicy, RoundingPolicy};

#[derive(Debug, Error)]
pub enum LutError {
    #[error("{0} has {1} bits; lookup tables need an input format of at most 8 bits")]
    SpecTooWide(String, u32),
    #[error("{output} cannot hold every product of {input} exactly")]
    PromotionTooNarrow { input: String, output: String },
    #[error("malformed table file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 6] = b"MXLUT1";

/// Multiplication, addition and reciprocal tables for one format pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LutSet {
    in_spec: FloatSpec,
    out_spec: FloatSpec,
    inv: Vec<u8>,
    mul: Vec<u16>,
    add: Vec<u16>,
    exact_products: bool,
}

/// `round(x)` into `spec` where `x` is `s` plus a residual of sign `dir`.
///
/// `s` is first replaced by its round-to-odd neighbour, which rounds into
/// any format of at most 51 significand bits exactly as the true value does.
fn round_sticky(spec: &FloatSpec, s: f64, dir: f64, policy: RoundingPolicy) -> u16 {
    let odd = if dir == 0.0 || s.to_bits() & 1 == 1 {
        s
    } else if dir > 0.0 {
        s.next_up()
    } else {
        s.next_down()
    };
    spec.encode_with(odd, policy)
}

fn exact_sum(spec: &FloatSpec, a: f64, b: f64, policy: RoundingPolicy) -> u16 {
    let s = a + b;
    if !s.is_finite() {
        return spec.encode_with(s, policy);
    }
    // two-sum residual
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    round_sticky(spec, s, err, policy)
}

fn exact_recip(spec: &FloatSpec, a: f64, policy: RoundingPolicy) -> u16 {
    let r = 1.0 / a;
    if !r.is_finite() || r == 0.0 {
        return spec.encode_with(r, policy);
    }
    let rem = (-r).mul_add(a, 1.0);
    round_sticky(spec, r, rem * a.signum(), policy)
}

impl LutSet {
    pub fn build(in_spec: FloatSpec, out_spec: FloatSpec) -> Result<Self, LutError> {
        let bits = in_spec.total_bits();
        if bits > 8 {
            return Err(LutError::SpecTooWide(in_spec.id(), bits));
        }
        let half = 1usize << (bits - 1);
        let (inf_nan_out, out_policy) = (out_spec.nan_bits(false), out_spec.rounding());
        let value = |c: usize| in_spec.decode(c as u16);

        let inv = (0..half)
            .map(|a| exact_recip(&in_spec, value(a), in_spec.rounding()) as u8)
            .collect();

        let mut exact_products = true;
        let mut mul = Vec::with_capacity(half * half);
        for a in 0..half {
            for b in 0..half {
                let p = value(a) * value(b);
                let code = if p.is_nan() { inf_nan_out } else { out_spec.encode_with(p, out_policy) };
                if p.is_finite() && out_spec.decode(code) != p {
                    exact_products = false;
                }
                mul.push(code);
            }
        }

        let mut add = Vec::with_capacity(2 * half * half);
        for a in 0..2 * half {
            for b in 0..half {
                let s = value(a) + value(b);
                let code = if s.is_nan() {
                    inf_nan_out
                } else {
                    exact_sum(&out_spec, value(a), value(b), out_policy)
                };
                add.push(code);
            }
        }
        Ok(Self { in_spec, out_spec, inv, mul, add, exact_products })
    }

    pub fn in_spec(&self) -> &FloatSpec {
        &self.in_spec
    }

    pub fn out_spec(&self) -> &FloatSpec {
        &self.out_spec
    }

    /// Whether every finite product of input values is exact in the output.
    pub fn products_exact(&self) -> bool {
        self.exact_products
    }

    /// Like [`LutSet::build`], but also rejects output formats that would
    /// round products.
    pub fn build_exact(in_spec: FloatSpec, out_spec: FloatSpec) -> Result<Self, LutError> {
        let set = Self::build(in_spec, out_spec)?;
        if !set.exact_products {
            return Err(LutError::PromotionTooNarrow { input: in_spec.id(), output: out_spec.id() });
        }
        Ok(set)
    }

    fn half_bits(&self) -> u32 {
        self.in_spec.total_bits() - 1
    }

    fn split(&self, code: u16) -> (bool, usize) {
        let code = code & self.in_spec.code_mask();
        (self.in_spec.is_negative(code), (code & self.in_spec.magnitude_mask()) as usize)
    }

    fn out_sign(&self, negative: bool) -> u16 {
        if negative {
            self.out_spec.sign_mask()
        } else {
            0
        }
    }

    pub fn lut_mul(&self, a: u16, b: u16) -> u16 {
        let (sa, ma) = self.split(a);
        let (sb, mb) = self.split(b);
        self.mul[(ma << self.half_bits()) | mb] | self.out_sign(sa ^ sb)
    }

    pub fn lut_add(&self, a: u16, b: u16) -> u16 {
        let (sa, ma) = self.split(a);
        let (sb, mb) = self.split(b);
        let (first, second, negate) = match (sa, sb) {
            (true, true) => (ma, mb, true),
            (false, true) => ((b & self.in_spec.code_mask()) as usize, ma, false),
            _ => ((a & self.in_spec.code_mask()) as usize, mb, false),
        };
        self.add[(first << self.half_bits()) | second] ^ self.out_sign(negate)
    }

    /// Reciprocal, rounded back into the input format.
    pub fn lut_recip(&self, a: u16) -> u16 {
        let (sa, ma) = self.split(a);
        let sign = if sa { self.in_spec.sign_mask() } else { 0 };
        self.inv[ma] as u16 | sign
    }

    /// `a * (1 / b)`: the reciprocal is rounded before the product.
    pub fn lut_div(&self, a: u16, b: u16) -> u16 {
        self.lut_mul(a, self.lut_recip(b))
    }

    /// Widening conversion, computed as a product with one.
    pub fn lut_promote(&self, a: u16) -> u16 {
        self.lut_mul(a, self.in_spec.encode(1.0))
    }

    pub fn mul_table(&self) -> &[u16] {
        &self.mul
    }

    pub fn add_table(&self) -> &[u16] {
        &self.add
    }

    pub fn inv_table(&self) -> &[u8] {
        &self.inv
    }

    /// Serializes the tables; the layout is documented in the README.
    pub fn dump(&self, w: &mut impl Write) -> Result<(), LutError> {
        w.write_all(MAGIC)?;
        w.write_all(&spec_bytes(&self.in_spec))?;
        w.write_all(&spec_bytes(&self.out_spec))?;
        w.write_all(&self.inv)?;
        for v in self.mul.iter().chain(&self.add) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self, LutError> {
        let mut head = [0u8; 14];
        r.read_exact(&mut head)?;
        if &head[..6] != MAGIC {
            return Err(LutError::Malformed("bad magic".into()));
        }
        let in_spec = spec_from_bytes(&head[6..10])?;
        let out_spec = spec_from_bytes(&head[10..14])?;
        let bits = in_spec.total_bits();
        if bits > 8 {
            return Err(LutError::SpecTooWide(in_spec.id(), bits));
        }
        let half = 1usize << (bits - 1);
        let mut inv = vec![0u8; half];
        r.read_exact(&mut inv)?;
        let mut read_u16s = |n: usize| -> Result<Vec<u16>, LutError> {
            let mut buf = vec![0u8; 2 * n];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
        };
        let mul = read_u16s(half * half)?;
        let add = read_u16s(2 * half * half)?;
        let exact_products = (0..half).all(|a| {
            (0..half).all(|b| {
                let p = in_spec.decode(a as u16) * in_spec.decode(b as u16);
                !p.is_finite() || out_spec.decode(mul[a * half + b]) == p
            })
        });
        Ok(Self { in_spec, out_spec, inv, mul, add, exact_products })
    }
}

fn spec_bytes(spec: &FloatSpec) -> [u8; 4] {
    let flags = spec.denorm() as u8
        | (spec.reserved_top_exponent() as u8) << 1
        | ((spec.overflow() == OverflowPolicy::Saturate) as u8) << 2;
    let rounding = match spec.rounding() {
        RoundingPolicy::TiesToAway => 0,
        RoundingPolicy::TiesToEven => 1,
        RoundingPolicy::Truncate => 2,
    };
    [spec.exp_bits() as u8, spec.man_bits() as u8, flags, rounding]
}

fn spec_from_bytes(b: &[u8]) -> Result<FloatSpec, LutError> {
    let spec = FloatSpec::with_layout(b[0] as u32, b[1] as u32, b[2] & 1 != 0, b[2] & 2 != 0)
        .map_err(|e| LutError::Malformed(e.to_string()))?;
    let overflow = if b[2] & 4 != 0 { OverflowPolicy::Saturate } else { OverflowPolicy::ToInfinity };
    let rounding = match b[3] {
        0 => RoundingPolicy::TiesToAway,
        1 => RoundingPolicy::TiesToEven,
        2 => RoundingPolicy::Truncate,
        r => return Err(LutError::Malformed(format!("unknown rounding code {r}"))),
    };
    Ok(spec.with_overflow(overflow).with_rounding(rounding))
}

/// Tables for a format pair, built on first use and shared afterwards.
pub fn shared(in_spec: FloatSpec, out_spec: FloatSpec) -> Result<&'static LutSet, LutError> {
    static REGISTRY: OnceLock<Mutex<HashMap<(FloatSpec, FloatSpec), &'static LutSet>>> = OnceLock::new();
    let mut map = REGISTRY.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    if let Some(set) = map.get(&(in_spec, out_spec)) {
        return Ok(set);
    }
    let set: &'static LutSet = Box::leak(Box::new(LutSet::build(in_spec, out_spec)?));
    map.insert((in_spec, out_spec), set);
    Ok(set)
}

/// Whether `code` decodes to NaN in the output format of `set`.
pub fn is_nan_out(set: &LutSet, code: u16) -> bool {
    set.out_spec.classify(code) == FloatClass::NaN
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e4m3_to_bf16() -> LutSet {
        LutSet::build(FloatSpec::E4M3, FloatSpec::E8M7).unwrap()
    }

    #[test]
    fn table_sizes() {
        let l = e4m3_to_bf16();
        assert_eq!(l.inv_table().len(), 128);
        assert_eq!(l.mul_table().len() * 2, 32 * 1024);
        assert_eq!(l.add_table().len() * 2, 64 * 1024);
        assert!(l.products_exact());
    }

    #[test]
    fn arithmetic_samples() {
        let l = e4m3_to_bf16();
        let (i, o) = (FloatSpec::E4M3, FloatSpec::E8M7);
        assert_eq!(o.decode(l.lut_mul(i.encode(1.5), i.encode(-3.0))), -4.5);
        assert_eq!(o.decode(l.lut_add(i.encode(448.0), i.encode(-0.001953125))), 448.0);
        assert_eq!(o.decode(l.lut_add(i.encode(-2.0), i.encode(0.5))), -1.5);
        assert_eq!(o.decode(l.lut_add(i.encode(2.0), i.encode(-0.5))), 1.5);
        assert_eq!(i.decode(l.lut_recip(i.encode(-4.0))), -0.25);
        assert_eq!(o.decode(l.lut_div(i.encode(3.0), i.encode(2.0))), 1.5);
        assert_eq!(o.decode(l.lut_promote(i.encode(-0.0))).to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn sign_conventions_for_nan() {
        let l = e4m3_to_bf16();
        let (i, o) = (FloatSpec::E4M3, FloatSpec::E8M7);
        let nan = |neg| i.nan_bits(neg);
        assert!(o.is_negative(l.lut_mul(nan(true), i.encode(1.0))));
        assert!(!o.is_negative(l.lut_mul(nan(true), i.encode(-1.0))));
        assert!(o.is_negative(l.lut_add(nan(true), i.encode(-1.0))));
        assert!(!o.is_negative(l.lut_add(nan(true), i.encode(1.0))));
        assert!(is_nan_out(&l, l.lut_add(nan(false), i.encode(1.0))));
    }

    #[test]
    fn exact_zero_sum_is_positive() {
        let l = e4m3_to_bf16();
        let i = FloatSpec::E4M3;
        assert_eq!(l.lut_add(i.encode(3.0), i.encode(-3.0)), 0);
        assert_eq!(l.lut_add(i.encode(-0.0), i.encode(0.0)), 0);
        assert_eq!(l.lut_add(i.encode(-0.0), i.encode(-0.0)), FloatSpec::E8M7.sign_mask());
    }

    #[test]
    fn round_to_odd_handles_wide_exponent_gaps() {
        // E7M0 spans 2^-62 .. 2^63, so a sum can need far more than 53 bits
        let wide = FloatSpec::with_layout(7, 0, true, false).unwrap();
        let out = FloatSpec::E5M10.with_rounding(RoundingPolicy::TiesToEven);
        let l = LutSet::build(wide, out).unwrap();
        let one = wide.encode(1.0);
        let tiny = wide.encode(2f64.powi(-40));
        // 1 + 2^-40 rounds to 1, and the exact tie 1 + 2^-11 would go to even
        assert_eq!(out.decode(l.lut_add(one, tiny)), 1.0);
        assert_eq!(out.decode(l.lut_add(wide.encode(2f64.powi(-11)), one)), 1.0);
    }

    #[test]
    fn spec_too_wide() {
        assert!(matches!(LutSet::build(FloatSpec::E5M10, FloatSpec::E8M7), Err(LutError::SpecTooWide(..))));
        assert!(matches!(
            LutSet::build_exact(FloatSpec::E4M3, FloatSpec::E5M2),
            Err(LutError::PromotionTooNarrow { .. })
        ));
    }

    #[test]
    fn dump_load_round_trip() {
        let l = LutSet::build(FloatSpec::E5M2, FloatSpec::E8M7.with_rounding(RoundingPolicy::Truncate)).unwrap();
        let mut buf = Vec::new();
        l.dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 6 + 8 + 128 + 2 * (128 * 128 + 256 * 128));
        let back = LutSet::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back, l);
        assert!(LutSet::load(&mut &buf[..20]).is_err());
        buf[0] = b'X';
        assert!(LutSet::load(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn shared_tables_are_built_once() {
        let a = shared(FloatSpec::E4M3, FloatSpec::E8M7).unwrap();
        let b = shared(FloatSpec::E4M3, FloatSpec::E8M7).unwrap();
        assert!(std::ptr::eq(a, b));
    }
}
