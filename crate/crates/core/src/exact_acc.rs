//! Exact fixed-point accumulation of minifloat products.
//!
//! Every product of two finite values of a format is an integer multiple of
//! `2^(2*xi_min - 2*M)` and smaller in magnitude than `2^(2*xi_max + 2)`, so a
//! signed register of [`required_width`] bits holds any single product
//! without loss. Summing `B` products needs `ceil(log2 B)` more bits of
//! headroom. The register here is an `i64`, which covers E4M3 and E3M4
//! blocks of the usual sizes; wider formats are rejected at construction.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use thiserror::Error;

use crate::minifloat::{FloatClass, FloatSpec, RoundingPolicy, Unpacked};

/// Usable magnitude bits of the `i64` register, sign included.
pub const REGISTER_BITS: u32 = 63;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccError {
    #[error("exact accumulation for {format} needs {width} bits plus {headroom} bits of headroom, more than the {REGISTER_BITS}-bit register")]
    TooWide { format: String, width: u32, headroom: u32 },
    #[error("NaN and infinity cannot be accumulated exactly")]
    UnsupportedSpecial,
    #[error("term does not fit the accumulator window")]
    WindowOverflow,
}

/// Register width, sign bit included, that holds one exact product.
pub fn required_width(spec: &FloatSpec) -> u32 {
    let m = spec.man_bits() as i32;
    (2 * spec.xi_max() - 2 * spec.xi_min() + 2 * m + 3) as u32
}

/// `ceil(log2(n))` for `n >= 1`.
pub fn headroom_bits(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Exact product of two finite minifloats.
///
/// The significand has `2M + 1` fraction bits: a non-zero product satisfies
/// `2^(2M+1) <= significand < 2^(2M+2)` and equals
/// `significand * 2^(exponent - (2M + 1))`, so `exponent` is the exponent of
/// the leading bit. Zero has a zero significand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactProduct {
    pub negative: bool,
    pub exponent: i32,
    pub significand: u64,
    pub man_bits: u32,
}

impl ExactProduct {
    pub fn is_zero(&self) -> bool {
        self.significand == 0
    }

    pub fn fraction_bits(&self) -> u32 {
        2 * self.man_bits + 1
    }

    pub fn to_unpacked(&self) -> Unpacked {
        Unpacked::from_integer(
            self.negative,
            self.significand,
            self.exponent - self.fraction_bits() as i32,
        )
    }

    pub fn to_f64(&self) -> f64 {
        self.to_unpacked().to_f64()
    }
}

/// Multiplies two codes of `spec` exactly.
pub fn acc_mul(spec: &FloatSpec, a: u16, b: u16) -> Result<ExactProduct, AccError> {
    let (ua, ub) = (spec.unpack(a), spec.unpack(b));
    let man_bits = spec.man_bits();
    let negative = ua.negative ^ ub.negative;
    let special = |u: &Unpacked| matches!(u.class, FloatClass::NaN | FloatClass::Infinity);
    if special(&ua) || special(&ub) {
        return Err(AccError::UnsupportedSpecial);
    }
    if ua.class == FloatClass::Zero || ub.class == FloatClass::Zero {
        return Ok(ExactProduct { negative, exponent: 0, significand: 0, man_bits });
    }
    let ma = ua.significand >> (63 - man_bits);
    let mb = ub.significand >> (63 - man_bits);
    let mut p = ma * mb;
    let mut exponent = ua.exponent + ub.exponent + 1;
    if p < 1 << (2 * man_bits + 1) {
        p <<= 1;
        exponent -= 1;
    }
    Ok(ExactProduct { negative, exponent, significand: p, man_bits })
}

/// Marks NaN and infinity in a [`term_table`].
const SPECIAL: i32 = i32::MIN;

/// Every code of `spec` as a signed integer times `2^exp`; built once per
/// spec.
type Terms = &'static [(i64, i32)];

fn term_table(spec: &FloatSpec) -> Terms {
    static TABLES: OnceLock<Mutex<HashMap<FloatSpec, Terms>>> = OnceLock::new();
    let mut map = TABLES.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry(*spec).or_insert_with(|| {
        let m = spec.man_bits();
        let table: Vec<(i64, i32)> = spec
            .codes()
            .map(|c| {
                let u = spec.unpack(c);
                match u.class {
                    FloatClass::NaN | FloatClass::Infinity => (0, SPECIAL),
                    FloatClass::Zero => (0, 0),
                    _ => {
                        let mant = (u.significand >> (63 - m)) as i64;
                        (if u.negative { -mant } else { mant }, u.exponent - m as i32)
                    }
                }
            })
            .collect();
        Box::leak(table.into_boxed_slice())
    })
}

/// Fixed-point register summing exact products of one format.
#[derive(Debug, Clone)]
pub struct ExactAccumulator {
    spec: FloatSpec,
    width: u32,
    lsb_exponent: i32,
    register: i64,
    terms: &'static [(i64, i32)],
}

impl ExactAccumulator {
    /// Accumulator sized for sums of up to `terms` products.
    pub fn new(spec: FloatSpec, terms: usize) -> Result<Self, AccError> {
        let width = required_width(&spec);
        let headroom = headroom_bits(terms);
        if width + headroom > REGISTER_BITS {
            return Err(AccError::TooWide { format: spec.id(), width, headroom });
        }
        let m = spec.man_bits() as i32;
        Ok(Self { spec, width, lsb_exponent: 2 * spec.xi_min() - 2 * m, register: 0, terms: term_table(&spec) })
    }

    pub fn spec(&self) -> &FloatSpec {
        &self.spec
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Weight of the register's least significant bit.
    pub fn lsb_exponent(&self) -> i32 {
        self.lsb_exponent
    }

    pub fn register(&self) -> i64 {
        self.register
    }

    pub fn clear(&mut self) {
        self.register = 0;
    }

    pub fn is_zero(&self) -> bool {
        self.register == 0
    }

    /// Adds a product to the register.
    pub fn add(&mut self, p: &ExactProduct) -> Result<(), AccError> {
        if p.is_zero() {
            return Ok(());
        }
        let shift = p.exponent - p.fraction_bits() as i32 - self.lsb_exponent;
        let magnitude = if shift >= 0 {
            let lead = 63 - p.significand.leading_zeros() as i32;
            if lead + shift >= REGISTER_BITS as i32 - 1 {
                return Err(AccError::WindowOverflow);
            }
            p.significand << shift
        } else {
            let drop = (-shift) as u32;
            if drop >= 64 || p.significand & ((1u64 << drop) - 1) != 0 {
                return Err(AccError::WindowOverflow);
            }
            p.significand >> drop
        };
        let term = magnitude as i64;
        let term = if p.negative { -term } else { term };
        self.register = self.register.checked_add(term).ok_or(AccError::WindowOverflow)?;
        Ok(())
    }

    /// Multiplies two codes and adds the exact product.
    ///
    /// Uses a per-format table of integer significands; [`acc_mul`]
    /// followed by [`ExactAccumulator::add`] is the unpacking route to the
    /// same register value.
    pub fn mul_add(&mut self, a: u16, b: u16) -> Result<(), AccError> {
        let mask = self.spec.code_mask() as usize;
        let (ma, ea) = self.terms[a as usize & mask];
        let (mb, eb) = self.terms[b as usize & mask];
        if ea == SPECIAL || eb == SPECIAL {
            return Err(AccError::UnsupportedSpecial);
        }
        let p = ma * mb;
        if p == 0 {
            return Ok(());
        }
        let shift = ea + eb - self.lsb_exponent;
        let term = if shift >= 0 {
            if shift >= REGISTER_BITS as i32 || p.unsigned_abs().leading_zeros() as i32 <= shift + 1 {
                return Err(AccError::WindowOverflow);
            }
            p << shift
        } else {
            let drop = -shift;
            if drop >= 63 || p & ((1i64 << drop) - 1) != 0 {
                return Err(AccError::WindowOverflow);
            }
            p >> drop
        };
        self.register = self.register.checked_add(term).ok_or(AccError::WindowOverflow)?;
        Ok(())
    }

    /// Register contents as a sign/exponent/significand triple.
    pub fn unpack(&self) -> Unpacked {
        Unpacked::from_integer(self.register < 0, self.register.unsigned_abs(), self.lsb_exponent)
    }

    /// Register value rounded once into `spec`.
    pub fn pack(&self, spec: &FloatSpec, policy: RoundingPolicy) -> u16 {
        spec.pack(&self.unpack(), policy)
    }

    /// Register value rounded once to `f64`.
    pub fn to_f64(&self) -> f64 {
        self.unpack().to_f64()
    }

    /// Register value scaled by `2^scale_exp` as an unevaluated pair
    /// `hi + lo` with no rounding error (barring `f64` underflow).
    pub fn to_f64_pair(&self, scale_exp: i32) -> (f64, f64) {
        let hi = self.register as f64;
        // |register - hi| < 2^10 since the register holds at most 63 bits
        let lo = (self.register - hi as i64) as f64;
        let k = self.lsb_exponent + scale_exp;
        (crate::minifloat::ldexp(hi, k), crate::minifloat::ldexp(lo, k))
    }
}

/// Sum of `f64` terms rounded once at the end.
///
/// Keeps a list of non-overlapping partial sums (Shewchuk's expansion) and
/// resolves the final half-way case the way Python's `math.fsum` does.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
    special: Option<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            self.special = Some(self.special.unwrap_or(0.0) + x);
            return;
        }
        let mut x = x;
        let mut kept = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        if let Some(s) = self.special {
            return s;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_route_matches_unpacking_route() {
        for spec in [FloatSpec::E4M3, FloatSpec::E4M3_IEEE, FloatSpec::E3M4] {
            let mut fast = ExactAccumulator::new(spec, 1).unwrap();
            let mut slow = ExactAccumulator::new(spec, 1).unwrap();
            for a in spec.codes() {
                for b in spec.codes() {
                    fast.clear();
                    slow.clear();
                    let f = fast.mul_add(a, b);
                    let s = acc_mul(&spec, a, b).and_then(|p| slow.add(&p));
                    assert_eq!(f, s, "{spec} {a:#x} {b:#x}");
                    assert_eq!(fast.register(), slow.register(), "{spec} {a:#x} {b:#x}");
                }
            }
        }
    }

    #[test]
    fn widths_of_named_formats() {
        assert_eq!(required_width(&FloatSpec::E4M3), 43);
        assert_eq!(required_width(&FloatSpec::E5M2), 69);
        assert_eq!(required_width(&FloatSpec::E3M4), 25);
        assert_eq!(required_width(&FloatSpec::E5M10), 81);
        assert_eq!(required_width(&FloatSpec::E8M7), 523);
    }

    #[test]
    fn headroom() {
        assert_eq!(headroom_bits(1), 0);
        assert_eq!(headroom_bits(2), 1);
        assert_eq!(headroom_bits(32), 5);
        assert_eq!(headroom_bits(33), 6);
    }

    #[test]
    fn construction_limits() {
        assert!(ExactAccumulator::new(FloatSpec::E4M3, 32).is_ok());
        assert!(ExactAccumulator::new(FloatSpec::E3M4, 1 << 20).is_ok());
        assert!(matches!(
            ExactAccumulator::new(FloatSpec::E5M2, 32),
            Err(AccError::TooWide { width: 69, .. })
        ));
    }

    #[test]
    fn product_normalization() {
        let s = FloatSpec::E4M3;
        let p = acc_mul(&s, s.encode(1.5), s.encode(1.5)).unwrap();
        assert_eq!(p.to_f64(), 2.25);
        assert_eq!(p.exponent, 1);
        assert!(p.significand >= 1 << 7 && p.significand < 1 << 8);
        let q = acc_mul(&s, s.encode(1.0), s.encode(-1.0)).unwrap();
        assert_eq!((q.exponent, q.to_f64()), (0, -1.0));
        assert!(acc_mul(&s, s.nan_bits(false), 0).is_err());
    }

    #[test]
    fn all_products_exact_in_e4m3() {
        let s = FloatSpec::E4M3;
        for a in s.codes().filter(|&c| !s.is_nan(c)) {
            for b in s.codes().filter(|&c| !s.is_nan(c)) {
                let p = acc_mul(&s, a, b).unwrap();
                assert_eq!(p.to_f64(), s.decode(a) * s.decode(b));
                let mut acc = ExactAccumulator::new(s, 1).unwrap();
                acc.add(&p).unwrap();
                assert_eq!(acc.to_f64(), s.decode(a) * s.decode(b));
            }
        }
    }

    #[test]
    fn cancellation_is_exact() {
        let s = FloatSpec::E4M3;
        let mut acc = ExactAccumulator::new(s, 4).unwrap();
        let big = s.max_finite_bits();
        let tiny = 1u16;
        acc.mul_add(big, big).unwrap();
        acc.mul_add(tiny, tiny).unwrap();
        acc.mul_add(s.negate(big), big).unwrap();
        assert_eq!(acc.to_f64(), 2f64.powi(-18));
        let (hi, lo) = acc.to_f64_pair(3);
        assert_eq!(hi + lo, 2f64.powi(-15));
    }

    #[test]
    fn pack_rounds_once() {
        let s = FloatSpec::E4M3;
        let mut acc = ExactAccumulator::new(s, 2).unwrap();
        acc.mul_add(s.encode(1.0), s.encode(1.0)).unwrap();
        acc.mul_add(s.encode(0.0625), s.encode(1.0)).unwrap();
        assert_eq!(s.decode(acc.pack(&s, RoundingPolicy::TiesToAway)), 1.125);
        assert_eq!(s.decode(acc.pack(&s, RoundingPolicy::TiesToEven)), 1.0);
    }

    #[test]
    fn exact_sum_rounds_once() {
        let mut s = ExactSum::new();
        s.extend([1e100, 1.0, -1e100, 1e-20]);
        assert_eq!(s.value(), 1.0);
        let mut t = ExactSum::new();
        // 1 + 2^-53 + 2^-106: the tail breaks the tie upward
        t.extend([1.0, 2f64.powi(-53), 2f64.powi(-106)]);
        assert_eq!(t.value(), 1.0 + f64::EPSILON);
        let mut u = ExactSum::new();
        u.extend([0.1; 10]);
        assert_eq!(u.value(), 1.0);
        u.add(f64::INFINITY);
        assert_eq!(u.value(), f64::INFINITY);
    }
}
