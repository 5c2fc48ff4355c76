//! Reference model for minifloat formats built on exact rationals.
//!
//! Nothing here shares code with `mx-core`. Values are decoded straight from
//! the sign/exponent/mantissa fields, and rounding works by locating the two
//! representable neighbours of an exact rational in a sorted table and
//! comparing against their midpoint. It is slow and meant for tests only.

use std::cmp::Ordering;

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Q = BigRational;

/// Rounding rule used by [`Rounder::round`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    NearestAway,
    NearestEven,
    Truncate,
}

/// Bit layout of a format, described independently of the library's type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Format {
    pub e: u32,
    pub m: u32,
    pub denorm: bool,
    /// All-ones exponent reserved for infinities and NaNs.
    pub ieee: bool,
    /// Overflow clamps to the largest finite value.
    pub saturate: bool,
}

impl Format {
    pub const fn ieee(e: u32, m: u32) -> Self {
        Self { e, m, denorm: true, ieee: true, saturate: false }
    }

    /// Layout with a finite top binade and a single NaN pattern per sign.
    pub const fn finite_top(e: u32, m: u32) -> Self {
        Self { e, m, denorm: true, ieee: false, saturate: false }
    }

    pub fn bias(&self) -> i64 {
        (1i64 << (self.e - 1)) - 1
    }

    pub fn bits(&self) -> u32 {
        1 + self.e + self.m
    }

    pub fn code_count(&self) -> u32 {
        1 << self.bits()
    }

    fn field(&self, s: u32, k: u32, mm: u32) -> u32 {
        (s << (self.e + self.m)) | (k << self.m) | mm
    }

    pub fn nan_code(&self, negative: bool) -> u32 {
        let top = (1 << self.e) - 1;
        if self.ieee {
            self.field(negative as u32, top, 1 << (self.m - 1))
        } else {
            self.field(negative as u32, top, (1 << self.m) - 1)
        }
    }

    pub fn inf_code(&self, negative: bool) -> Option<u32> {
        self.ieee.then(|| self.field(negative as u32, (1 << self.e) - 1, 0))
    }

    pub fn decode(&self, code: u32) -> Val {
        let s = (code >> (self.e + self.m)) & 1 == 1;
        let k = (code >> self.m) & ((1 << self.e) - 1);
        let mm = code & ((1 << self.m) - 1);
        let top = (1 << self.e) - 1;
        if k == top && self.ieee {
            return if mm == 0 { Val::Inf(s) } else { Val::NaN(s) };
        }
        if k == top && mm == (1 << self.m) - 1 {
            return Val::NaN(s);
        }
        let frac = Q::new(BigInt::from(mm), BigInt::from(1u64 << self.m));
        let magnitude = if k == 0 && mm == 0 {
            Q::zero()
        } else if k == 0 && self.denorm {
            pow2(1 - self.bias()) * frac
        } else {
            pow2(k as i64 - self.bias()) * (Q::one() + frac)
        };
        Val::Num(if s { -magnitude } else { magnitude }, s)
    }

    pub fn value(&self, code: u32) -> Option<Q> {
        match self.decode(code) {
            Val::Num(q, _) => Some(q),
            _ => None,
        }
    }
}

/// A decoded value. The flag on `Num` is the sign bit, which distinguishes
/// the two zeros.
#[derive(Debug, Clone, PartialEq)]
pub enum Val {
    Num(Q, bool),
    Inf(bool),
    NaN(bool),
}

impl Val {
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() {
            Val::NaN(x.is_sign_negative())
        } else if x.is_infinite() {
            Val::Inf(x < 0.0)
        } else {
            Val::Num(f64_to_q(x), x.is_sign_negative())
        }
    }

    pub fn num(q: Q) -> Self {
        let neg = q.is_negative();
        Val::Num(q, neg)
    }
}

/// Sorted table of the positive finite values of a format.
pub struct Rounder {
    pub fmt: Format,
    positives: Vec<(Q, u32)>,
    min_normal_exp: i64,
}

impl Rounder {
    pub fn new(fmt: Format) -> Self {
        let sign_bit = 1 << (fmt.e + fmt.m);
        let mut positives: Vec<(Q, u32)> = (0..sign_bit)
            .filter_map(|c| fmt.value(c).map(|q| (q, c)))
            .filter(|(q, _)| q.is_positive())
            .collect();
        positives.sort_by(|a, b| a.0.cmp(&b.0));
        let min_normal_exp = if fmt.denorm { 1 - fmt.bias() } else { -fmt.bias() };
        Self { fmt, positives, min_normal_exp }
    }

    pub fn max_finite(&self) -> &Q {
        &self.positives.last().unwrap().0
    }

    /// Spacing of the binade containing the positive value `x`.
    fn spacing(&self, x: &Q) -> Q {
        pow2(floor_log2(x).max(self.min_normal_exp) - self.fmt.m as i64)
    }

    pub fn round(&self, v: &Val, mode: Mode) -> u32 {
        let fmt = self.fmt;
        let sign_bit = 1u32 << (fmt.e + fmt.m);
        let (q, neg) = match v {
            Val::NaN(s) => return fmt.nan_code(*s),
            Val::Inf(s) => return fmt.inf_code(*s).unwrap_or_else(|| fmt.nan_code(*s)),
            Val::Num(q, s) => (q, *s),
        };
        let sign = if neg { sign_bit } else { 0 };
        if q.is_zero() {
            return sign;
        }
        let a = q.abs();
        let idx = self.positives.partition_point(|(p, _)| *p <= a);
        // lower neighbour: None stands for zero
        let lower = idx.checked_sub(1).map(|i| &self.positives[i]);
        if let Some((p, c)) = lower {
            if *p == a {
                return sign | c;
            }
        }
        let lower_val = lower.map(|(p, _)| p.clone()).unwrap_or_else(Q::zero);
        let (upper_val, upper_code) = match self.positives.get(idx) {
            Some((p, c)) => (p.clone(), Some(*c)),
            None => {
                let max = self.max_finite().clone();
                let next = &max + self.spacing(&max);
                (next, None)
            }
        };
        let take_upper = match mode {
            Mode::Truncate => false,
            _ => {
                let mid = (&lower_val + &upper_val) / Q::from_integer(BigInt::from(2));
                match a.cmp(&mid) {
                    Ordering::Less => false,
                    Ordering::Greater => true,
                    Ordering::Equal => match mode {
                        Mode::NearestAway => true,
                        _ => {
                            if lower_val.is_zero() {
                                false
                            } else {
                                let steps = (&lower_val / self.spacing(&lower_val)).to_integer();
                                (steps % BigInt::from(2)) != BigInt::zero()
                            }
                        }
                    },
                }
            }
        };
        match (take_upper, upper_code) {
            (true, Some(c)) => sign | c,
            (true, None) if !fmt.saturate => fmt.inf_code(neg).unwrap_or_else(|| fmt.nan_code(neg)),
            (true, None) => sign | self.positives.last().unwrap().1,
            (false, _) => match lower {
                Some((_, c)) => sign | c,
                None => sign,
            },
        }
    }

    pub fn round_f64(&self, x: f64, mode: Mode) -> u32 {
        self.round(&Val::from_f64(x), mode)
    }
}

pub fn pow2(k: i64) -> Q {
    let p = BigInt::one() << k.unsigned_abs();
    if k >= 0 {
        Q::from_integer(p)
    } else {
        Q::new(BigInt::one(), p)
    }
}

/// `floor(log2(x))` for positive `x`.
pub fn floor_log2(x: &Q) -> i64 {
    assert!(x.is_positive());
    let n = x.numer().bits() as i64;
    let d = x.denom().bits() as i64;
    let mut e = n - d;
    // 2^e <= x < 2^(e+1) after at most one correction each way
    while pow2(e) > *x {
        e -= 1;
    }
    while pow2(e + 1) <= *x {
        e += 1;
    }
    e
}

pub fn f64_to_q(x: f64) -> Q {
    assert!(x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1 << 52) - 1);
    let (mant, exp) = if biased == 0 { (frac, -1074) } else { (frac | 1 << 52, biased - 1075) };
    let q = Q::from_integer(BigInt::from(mant)) * pow2(exp);
    if bits >> 63 == 1 {
        -q
    } else {
        q
    }
}

fn two_pow_f64(k: i64) -> f64 {
    // built by halving/doubling so that no step rounds
    let mut r = 1.0f64;
    let step = if k >= 0 { 2.0 } else { 0.5 };
    for _ in 0..k.unsigned_abs() {
        r *= step;
    }
    r
}

/// Nearest `f64` to `q`, ties to even.
pub fn q_to_f64(q: &Q) -> f64 {
    if q.is_zero() {
        return 0.0;
    }
    let neg = q.is_negative();
    let a = q.abs();
    let e = floor_log2(&a);
    if e > 1023 {
        return if neg { f64::NEG_INFINITY } else { f64::INFINITY };
    }
    // integer significand of 53 bits (fewer for subnormals)
    let quantum_exp = if e >= -1022 { e - 52 } else { -1074 };
    let scaled = &a / pow2(quantum_exp);
    let floor = scaled.floor().to_integer();
    let rem = &scaled - Q::from_integer(floor.clone());
    let half = Q::new(BigInt::one(), BigInt::from(2));
    let mut t = floor;
    match rem.cmp(&half) {
        Ordering::Greater => t += 1,
        Ordering::Equal if &t % 2 != BigInt::zero() => t += 1,
        _ => {}
    }
    let t = t.to_u64().unwrap() as f64;
    let mut r = t * two_pow_f64(quantum_exp.max(-1022));
    if quantum_exp < -1022 {
        r *= two_pow_f64(quantum_exp + 1022);
    }
    if r.is_infinite() || e > 1023 {
        r = f64::INFINITY;
    }
    if neg {
        -r
    } else {
        r
    }
}

/// Exact product. A NaN result takes the exclusive-or of the operand signs.
pub fn mul(a: &Val, b: &Val) -> Val {
    let sa = matches!(a, Val::Num(_, true) | Val::Inf(true) | Val::NaN(true));
    let sb = matches!(b, Val::Num(_, true) | Val::Inf(true) | Val::NaN(true));
    let s = sa ^ sb;
    match (a, b) {
        (Val::NaN(_), _) | (_, Val::NaN(_)) => Val::NaN(s),
        (Val::Inf(_), Val::Num(q, _)) | (Val::Num(q, _), Val::Inf(_)) if q.is_zero() => Val::NaN(s),
        (Val::Inf(_), _) | (_, Val::Inf(_)) => Val::Inf(s),
        (Val::Num(x, _), Val::Num(y, _)) => Val::Num(x * y, s),
    }
}

/// Exact sum. A NaN result is negative only when both operands are; an
/// exact zero from operands of different signs is positive.
pub fn add(a: &Val, b: &Val) -> Val {
    let neg = |v: &Val| matches!(v, Val::Num(_, true) | Val::Inf(true) | Val::NaN(true));
    let both = neg(a) && neg(b);
    match (a, b) {
        (Val::NaN(_), _) | (_, Val::NaN(_)) => Val::NaN(both),
        (Val::Inf(x), Val::Inf(y)) if x != y => Val::NaN(both),
        (Val::Inf(x), _) | (_, Val::Inf(x)) => Val::Inf(*x),
        (Val::Num(x, _), Val::Num(y, _)) => {
            let q = x + y;
            if q.is_zero() {
                Val::Num(q, both)
            } else {
                Val::num(q)
            }
        }
    }
}

/// Exact reciprocal.
pub fn recip(a: &Val) -> Val {
    match a {
        Val::NaN(s) => Val::NaN(*s),
        Val::Inf(s) => Val::Num(Q::zero(), *s),
        Val::Num(q, s) if q.is_zero() => Val::Inf(*s),
        Val::Num(q, s) => Val::Num(q.recip(), *s),
    }
}

/// Exact dot product of two rational vectors.
pub fn dot(a: &[Q], b: &[Q]) -> Q {
    a.iter().zip(b).fold(Q::zero(), |acc, (x, y)| acc + x * y)
}

/// Sign of a rational as `-1`, `0` or `1`.
pub fn signum(q: &Q) -> i32 {
    match q.numer().sign() {
        Sign::Minus => -1,
        Sign::NoSign => 0,
        Sign::Plus => 1,
    }
}
