//! Software-defined small floating-point formats.
//!
//! A [`FloatSpec`] describes a sign/exponent/mantissa layout of at most 16
//! bits. Values are moved in and out of the format through [`Unpacked`], a
//! sign/exponent/significand triple with a left-aligned 64-bit significand,
//! so that rounding into any spec happens in exactly one place
//! ([`FloatSpec::pack`]). All intermediate values live in `f64`, which holds
//! every value of every format with `E <= 8` and `M <= 10` exactly.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("exponent width {0} is outside 2..=8")]
    ExponentWidth(u32),
    #[error("mantissa width {0} is outside 0..=10")]
    MantissaWidth(u32),
    #[error("format needs {0} bits but at most 16 are supported")]
    TooWide(u32),
    #[error("an IEEE-style format without mantissa bits has no NaN encoding")]
    NoNanEncoding,
    #[error("unknown format id `{0}`")]
    UnknownFormat(String),
}

/// How a value between two representable neighbours is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingPolicy {
    /// Round to nearest, ties away from zero.
    #[default]
    TiesToAway,
    /// Round to nearest, ties to an even significand.
    TiesToEven,
    /// Drop the excess bits (round toward zero).
    Truncate,
}

impl RoundingPolicy {
    pub fn parse(id: &str) -> Option<Self> {
        match id {
            "nearest-away" | "ties-to-away" | "away" => Some(Self::TiesToAway),
            "nearest-even" | "ties-to-even" | "even" => Some(Self::TiesToEven),
            "truncate" | "toward-zero" => Some(Self::Truncate),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::TiesToAway => "nearest-away",
            Self::TiesToEven => "nearest-even",
            Self::Truncate => "truncate",
        }
    }

    fn round_up(self, n: u64, rem: Ordering) -> bool {
        match self {
            Self::Truncate => false,
            Self::TiesToAway => rem != Ordering::Less,
            Self::TiesToEven => rem == Ordering::Greater || (rem == Ordering::Equal && n & 1 == 1),
        }
    }
}

/// What happens to finite values beyond the largest finite magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowPolicy {
    /// Produce infinity, or NaN for formats without infinities.
    #[default]
    ToInfinity,
    /// Clamp to the largest finite value of the same sign.
    Saturate,
}

/// Which branch of the decoding rule a bit pattern falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FloatClass {
    Zero,
    Subnormal,
    Normal,
    Infinity,
    NaN,
}

/// Descriptor of a minifloat format.
///
/// `reserved_top_exponent = true` is the IEEE 754 layout: the all-ones
/// exponent field encodes infinities and NaNs. With `false` the top binade
/// holds finite values and only the all-ones pattern (per sign) is NaN, as
/// in the OCP FP8 E4M3 encoding; such formats have no infinities.
///
/// With `denorm = false` a zero exponent field with a non-zero mantissa is
/// read with the normal formula at exponent `-bias`, so the smallest
/// positive value is `(1 + 2^-M) * 2^-bias`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FloatSpec {
    exp_bits: u8,
    man_bits: u8,
    denorm: bool,
    reserved_top_exponent: bool,
    overflow: OverflowPolicy,
    rounding: RoundingPolicy,
}

const fn preset(exp_bits: u8, man_bits: u8, reserved_top_exponent: bool) -> FloatSpec {
    FloatSpec {
        exp_bits,
        man_bits,
        denorm: true,
        reserved_top_exponent,
        overflow: OverflowPolicy::ToInfinity,
        rounding: RoundingPolicy::TiesToAway,
    }
}

/// Exponent limits of the named formats as used to size exact accumulators.
/// Rows: (E, M, xi_max, xi_min).
const REFERENCE_LIMITS: [(u8, u8, i32, i32); 5] = [
    (4, 3, 8, -9),
    (5, 2, 15, -16),
    (3, 4, 3, -4),
    (5, 10, 15, -14),
    (8, 7, 127, -126),
];

impl FloatSpec {
    /// OCP E4M3: no infinities, single NaN per sign, max 448.
    pub const E4M3: Self = preset(4, 3, false);
    /// E4M3 with the IEEE layout (max 240, has infinities).
    pub const E4M3_IEEE: Self = preset(4, 3, true);
    pub const E5M2: Self = preset(5, 2, true);
    pub const E3M4: Self = preset(3, 4, true);
    /// IEEE binary16.
    pub const E5M10: Self = preset(5, 10, true);
    /// bfloat16.
    pub const E8M7: Self = preset(8, 7, true);

    /// Preset ids accepted by [`FloatSpec::from_id`].
    pub const IDS: [&'static str; 6] = ["e4m3", "e4m3-ieee", "e5m2", "e3m4", "e5m10", "e8m7"];

    /// IEEE-style format with subnormals.
    pub fn new(exp_bits: u32, man_bits: u32) -> Result<Self, SpecError> {
        Self::with_layout(exp_bits, man_bits, true, true)
    }

    pub fn with_layout(
        exp_bits: u32,
        man_bits: u32,
        denorm: bool,
        reserved_top_exponent: bool,
    ) -> Result<Self, SpecError> {
        if !(2..=8).contains(&exp_bits) {
            return Err(SpecError::ExponentWidth(exp_bits));
        }
        if man_bits > 10 {
            return Err(SpecError::MantissaWidth(man_bits));
        }
        let total = 1 + exp_bits + man_bits;
        if total > 16 {
            return Err(SpecError::TooWide(total));
        }
        if reserved_top_exponent && man_bits == 0 {
            return Err(SpecError::NoNanEncoding);
        }
        Ok(Self {
            exp_bits: exp_bits as u8,
            man_bits: man_bits as u8,
            denorm,
            reserved_top_exponent,
            overflow: OverflowPolicy::ToInfinity,
            rounding: RoundingPolicy::TiesToAway,
        })
    }

    pub fn from_id(id: &str) -> Result<Self, SpecError> {
        match id.to_ascii_lowercase().as_str() {
            "e4m3" | "e4m3fn" => Ok(Self::E4M3),
            "e4m3-ieee" => Ok(Self::E4M3_IEEE),
            "e5m2" => Ok(Self::E5M2),
            "e3m4" => Ok(Self::E3M4),
            "e5m10" | "f16" | "fp16" | "float16" => Ok(Self::E5M10),
            "e8m7" | "bf16" | "bfloat16" => Ok(Self::E8M7),
            _ => Err(SpecError::UnknownFormat(id.to_string())),
        }
    }

    /// Canonical id for the presets, `eXmY` otherwise.
    pub fn id(&self) -> String {
        let base = format!("e{}m{}", self.exp_bits, self.man_bits);
        if self.exp_bits == 4 && self.man_bits == 3 && self.reserved_top_exponent {
            format!("{base}-ieee")
        } else {
            base
        }
    }

    pub fn with_rounding(mut self, rounding: RoundingPolicy) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_overflow(mut self, overflow: OverflowPolicy) -> Self {
        self.overflow = overflow;
        self
    }

    pub fn exp_bits(&self) -> u32 {
        self.exp_bits as u32
    }

    pub fn man_bits(&self) -> u32 {
        self.man_bits as u32
    }

    pub fn total_bits(&self) -> u32 {
        1 + self.exp_bits() + self.man_bits()
    }

    pub fn bias(&self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    pub fn denorm(&self) -> bool {
        self.denorm
    }

    pub fn reserved_top_exponent(&self) -> bool {
        self.reserved_top_exponent
    }

    pub fn rounding(&self) -> RoundingPolicy {
        self.rounding
    }

    pub fn overflow(&self) -> OverflowPolicy {
        self.overflow
    }

    pub fn has_infinity(&self) -> bool {
        self.reserved_top_exponent
    }

    pub fn sign_mask(&self) -> u16 {
        1 << (self.exp_bits() + self.man_bits())
    }

    pub fn magnitude_mask(&self) -> u16 {
        self.sign_mask() - 1
    }

    pub fn code_mask(&self) -> u16 {
        ((1u32 << self.total_bits()) - 1) as u16
    }

    /// Number of distinct bit patterns.
    pub fn code_count(&self) -> usize {
        1 << self.total_bits()
    }

    fn top_k(&self) -> u32 {
        (1 << self.exp_bits) - 1
    }

    fn mant_all_ones(&self) -> u64 {
        (1 << self.man_bits) - 1
    }

    fn max_finite_k(&self) -> u32 {
        if self.reserved_top_exponent || self.man_bits == 0 {
            self.top_k() - 1
        } else {
            self.top_k()
        }
    }

    fn max_finite_mant(&self) -> u64 {
        if !self.reserved_top_exponent && self.man_bits > 0 {
            self.mant_all_ones() - 1
        } else {
            self.mant_all_ones()
        }
    }

    fn assemble(&self, negative: bool, k: u32, mant: u64) -> u16 {
        let sign = if negative { self.sign_mask() } else { 0 };
        sign | ((k as u16) << self.man_bits) | mant as u16
    }

    fn fields(&self, bits: u16) -> (bool, u32, u64) {
        let bits = bits & self.code_mask();
        let negative = bits & self.sign_mask() != 0;
        let k = ((bits & self.magnitude_mask()) >> self.man_bits) as u32;
        let m = (bits as u64) & self.mant_all_ones();
        (negative, k, m)
    }

    /// Largest unbiased exponent of a finite value.
    pub fn xi_max(&self) -> i32 {
        self.max_finite_k() as i32 - self.bias()
    }

    /// Smallest exponent of a normal value.
    pub fn min_normal_exponent(&self) -> i32 {
        if self.denorm {
            1 - self.bias()
        } else {
            -self.bias()
        }
    }

    /// Weight of the least significant bit of the smallest positive value.
    pub fn min_subnormal_exponent(&self) -> i32 {
        if self.denorm {
            1 - self.bias() - self.man_bits() as i32
        } else {
            -self.bias() - self.man_bits() as i32
        }
    }

    /// Lower exponent limit used for sizing exact products and accumulators.
    ///
    /// The named presets use the reference limits (which for E3M4, E5M10 and
    /// E8M7 sit at or below the smallest normal exponent rather than the
    /// smallest subnormal one); other layouts use the smallest subnormal
    /// exponent.
    pub fn xi_min(&self) -> i32 {
        REFERENCE_LIMITS
            .iter()
            .find(|&&(e, m, xi_max, _)| e == self.exp_bits && m == self.man_bits && xi_max == self.xi_max())
            .map(|&(_, _, _, xi_min)| xi_min)
            .unwrap_or_else(|| self.min_subnormal_exponent())
    }

    pub fn max_finite(&self) -> f64 {
        self.decode(self.max_finite_bits())
    }

    pub fn max_finite_bits(&self) -> u16 {
        self.assemble(false, self.max_finite_k(), self.max_finite_mant())
    }

    pub fn min_positive_normal(&self) -> f64 {
        if self.denorm {
            pow2(self.min_normal_exponent())
        } else {
            self.min_positive()
        }
    }

    pub fn min_positive(&self) -> f64 {
        self.decode(1)
    }

    pub fn nan_bits(&self, negative: bool) -> u16 {
        if self.reserved_top_exponent {
            self.assemble(negative, self.top_k(), 1 << (self.man_bits - 1))
        } else {
            self.assemble(negative, self.top_k(), self.mant_all_ones())
        }
    }

    pub fn infinity_bits(&self, negative: bool) -> Option<u16> {
        self.reserved_top_exponent
            .then(|| self.assemble(negative, self.top_k(), 0))
    }

    pub fn is_nan(&self, bits: u16) -> bool {
        self.classify(bits) == FloatClass::NaN
    }

    pub fn is_negative(&self, bits: u16) -> bool {
        bits & self.sign_mask() != 0
    }

    pub fn negate(&self, bits: u16) -> u16 {
        (bits ^ self.sign_mask()) & self.code_mask()
    }

    /// Spacing of representable values in the binade of `v`.
    pub fn ulp(&self, v: f64) -> f64 {
        let exp = if v == 0.0 || !v.is_finite() {
            self.min_normal_exponent()
        } else {
            floor_log2(v.abs()).max(self.min_normal_exponent())
        };
        pow2(exp - self.man_bits() as i32)
    }

    /// Summary of the exponent and magnitude limits.
    pub fn limits(&self) -> FormatLimits {
        FormatLimits {
            xi_max: self.xi_max(),
            xi_min: self.xi_min(),
            max_normal: self.max_finite(),
            min_normal: self.min_positive_normal(),
            min_subnormal: self.min_positive(),
            min_normal_exponent: self.min_normal_exponent(),
        }
    }

    pub fn classify(&self, bits: u16) -> FloatClass {
        let (_, k, m) = self.fields(bits);
        if k == self.top_k() {
            if self.reserved_top_exponent {
                return if m == 0 { FloatClass::Infinity } else { FloatClass::NaN };
            }
            if m == self.mant_all_ones() {
                return FloatClass::NaN;
            }
        }
        match (k, m) {
            (0, 0) => FloatClass::Zero,
            (0, _) if self.denorm => FloatClass::Subnormal,
            _ => FloatClass::Normal,
        }
    }

    pub fn unpack(&self, bits: u16) -> Unpacked {
        let (negative, k, m) = self.fields(bits);
        let man_bits = self.man_bits();
        let class = self.classify(bits);
        match class {
            FloatClass::Zero | FloatClass::Infinity => Unpacked { class, negative, exponent: 0, significand: 0 },
            FloatClass::NaN => Unpacked {
                class,
                negative,
                exponent: 0,
                // payload, left-aligned
                significand: if man_bits == 0 { 1 << 63 } else { m << (64 - man_bits) },
            },
            FloatClass::Subnormal => {
                let lead = 63 - m.leading_zeros() as i32;
                Unpacked {
                    class,
                    negative,
                    exponent: 1 - self.bias() - man_bits as i32 + lead,
                    significand: m << (63 - lead),
                }
            }
            FloatClass::Normal => Unpacked {
                class,
                negative,
                exponent: k as i32 - self.bias(),
                significand: ((1 << man_bits) | m) << (63 - man_bits),
            },
        }
    }

    /// Exact value of a bit pattern.
    pub fn decode(&self, bits: u16) -> f64 {
        self.unpack(bits).to_f64()
    }

    /// Round `v` into this format with the spec's own rounding policy.
    pub fn encode(&self, v: f64) -> u16 {
        self.pack(&Unpacked::from_f64(v), self.rounding)
    }

    pub fn encode_with(&self, v: f64, policy: RoundingPolicy) -> u16 {
        self.pack(&Unpacked::from_f64(v), policy)
    }

    /// Encode `v * 2^scale_exp` without an intermediate rounding step.
    pub fn encode_scaled(&self, v: f64, scale_exp: i32) -> u16 {
        let mut u = Unpacked::from_f64(v);
        if u.is_finite_nonzero() {
            u.exponent += scale_exp;
        }
        self.pack(&u, self.rounding)
    }

    /// Round an unpacked value into this format.
    pub fn pack(&self, u: &Unpacked, policy: RoundingPolicy) -> u16 {
        match u.class {
            FloatClass::Zero => self.assemble(u.negative, 0, 0),
            FloatClass::NaN => self.pack_nan(u),
            FloatClass::Infinity => match self.infinity_bits(u.negative) {
                Some(bits) => bits,
                None => self.nan_bits(u.negative),
            },
            FloatClass::Normal | FloatClass::Subnormal => self.pack_finite(u, policy),
        }
    }

    fn pack_nan(&self, u: &Unpacked) -> u16 {
        if !self.reserved_top_exponent {
            return self.nan_bits(u.negative);
        }
        let payload = u.significand >> (64 - self.man_bits());
        if payload == 0 {
            self.nan_bits(u.negative)
        } else {
            self.assemble(u.negative, self.top_k(), payload)
        }
    }

    fn pack_finite(&self, u: &Unpacked, policy: RoundingPolicy) -> u16 {
        debug_assert!(u.significand >> 63 == 1, "unnormalized significand");
        let man_bits = self.man_bits() as i32;
        let bias = self.bias();
        let (e, sig) = (u.exponent, u.significand);

        if !self.denorm {
            // Below the smallest positive value the only candidates are 0 and it.
            let min_pos = if man_bits == 0 {
                (1 - bias, 1u64 << 63)
            } else {
                (-bias, (1u64 << 63) | (1u64 << (63 - man_bits)))
            };
            if (e, sig) < min_pos {
                let half = if man_bits == 0 { (-bias, 1u64 << 63) } else { (min_pos.0 - 1, min_pos.1) };
                return if policy.round_up(0, (e, sig).cmp(&half)) {
                    if man_bits == 0 {
                        self.assemble(u.negative, 1, 0)
                    } else {
                        self.assemble(u.negative, 0, 1)
                    }
                } else {
                    self.assemble(u.negative, 0, 0)
                };
            }
        }

        let mut quantum = if self.denorm { e.max(1 - bias) } else { e } - man_bits;
        let shift = 63 - (e - quantum);
        let (mut n, rem) = match shift.cmp(&64) {
            Ordering::Greater => (0u64, Ordering::Less),
            Ordering::Equal => (0u64, sig.cmp(&(1u64 << 63))),
            Ordering::Less => {
                let mask = (1u64 << shift) - 1;
                (sig >> shift, (sig & mask).cmp(&(1u64 << (shift - 1))))
            }
        };
        if policy.round_up(n, rem) {
            n += 1;
        }
        if n == 1 << (man_bits + 1) {
            n >>= 1;
            quantum += 1;
        }
        if n == 0 {
            return self.assemble(u.negative, 0, 0);
        }
        let (k, mant) = if n < 1 << man_bits {
            (0, n)
        } else {
            (quantum + man_bits + bias, n - (1 << man_bits))
        };
        let max_k = self.max_finite_k() as i32;
        if k > max_k || (k == max_k && mant > self.max_finite_mant()) {
            return self.overflow_result(u.negative, policy);
        }
        self.assemble(u.negative, k as u32, mant)
    }

    fn overflow_result(&self, negative: bool, policy: RoundingPolicy) -> u16 {
        if policy == RoundingPolicy::Truncate || self.overflow == OverflowPolicy::Saturate {
            self.max_finite_bits() | if negative { self.sign_mask() } else { 0 }
        } else {
            match self.infinity_bits(negative) {
                Some(bits) => bits,
                None => self.nan_bits(negative),
            }
        }
    }

    /// Every bit pattern of the format, in increasing code order.
    pub fn codes(&self) -> impl Iterator<Item = u16> {
        (0..self.code_count()).map(|c| c as u16)
    }
}

impl fmt::Display for FloatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Exponent and magnitude limits of a format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormatLimits {
    pub xi_max: i32,
    pub xi_min: i32,
    pub max_normal: f64,
    pub min_normal: f64,
    pub min_subnormal: f64,
    pub min_normal_exponent: i32,
}

/// Sign, exponent and significand of a value, detached from any encoding.
///
/// For finite non-zero values the significand is left-aligned (bit 63 is the
/// leading one) and the value is `significand * 2^(exponent - 63)`; in other
/// words `exponent` is the unbiased exponent of the leading bit. For NaN the
/// significand holds the payload, left-aligned. Zero and infinity carry only
/// the sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unpacked {
    pub class: FloatClass,
    pub negative: bool,
    pub exponent: i32,
    pub significand: u64,
}

impl Unpacked {
    pub fn zero(negative: bool) -> Self {
        Self { class: FloatClass::Zero, negative, exponent: 0, significand: 0 }
    }

    /// Normalizes `magnitude * 2^lsb_exponent`.
    pub fn from_integer(negative: bool, magnitude: u64, lsb_exponent: i32) -> Self {
        if magnitude == 0 {
            return Self::zero(negative);
        }
        let lead = 63 - magnitude.leading_zeros() as i32;
        Self {
            class: FloatClass::Normal,
            negative,
            exponent: lsb_exponent + lead,
            significand: magnitude << (63 - lead),
        }
    }

    pub fn from_f64(v: f64) -> Self {
        let bits = v.to_bits();
        let negative = bits >> 63 == 1;
        let biased = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1 << 52) - 1);
        match biased {
            0x7ff if frac == 0 => Self { class: FloatClass::Infinity, negative, exponent: 0, significand: 0 },
            0x7ff => Self { class: FloatClass::NaN, negative, exponent: 0, significand: frac << 12 },
            0 if frac == 0 => Self::zero(negative),
            0 => {
                let mut u = Self::from_integer(negative, frac, -1074);
                u.class = FloatClass::Subnormal;
                u
            }
            _ => Self {
                class: FloatClass::Normal,
                negative,
                exponent: biased - 1023,
                significand: (frac | 1 << 52) << 11,
            },
        }
    }

    pub fn is_finite_nonzero(&self) -> bool {
        matches!(self.class, FloatClass::Normal | FloatClass::Subnormal)
    }

    /// Value as `f64`; significands wider than 53 bits are rounded to
    /// nearest, ties to even.
    pub fn to_f64(&self) -> f64 {
        let sign = if self.negative { -1.0 } else { 1.0 };
        match self.class {
            FloatClass::Zero => sign * 0.0,
            FloatClass::Infinity => sign * f64::INFINITY,
            FloatClass::NaN => f64::NAN.copysign(sign),
            FloatClass::Normal | FloatClass::Subnormal => {
                sign * ldexp(self.significand as f64, self.exponent - 63)
            }
        }
    }
}

/// A bit pattern tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Minifloat {
    bits: u16,
    spec: FloatSpec,
}

impl Minifloat {
    pub fn from_bits(bits: u16, spec: FloatSpec) -> Self {
        Self { bits: bits & spec.code_mask(), spec }
    }

    pub fn from_f64(v: f64, spec: FloatSpec) -> Self {
        Self { bits: spec.encode(v), spec }
    }

    pub fn bits(self) -> u16 {
        self.bits
    }

    pub fn spec(self) -> FloatSpec {
        self.spec
    }

    pub fn to_f64(self) -> f64 {
        self.spec.decode(self.bits)
    }

    pub fn classify(self) -> FloatClass {
        self.spec.classify(self.bits)
    }

    pub fn unpack(self) -> Unpacked {
        self.spec.unpack(self.bits)
    }

    /// Convert into another format using the target's rounding policy.
    pub fn convert(self, target: FloatSpec) -> Self {
        Self { bits: target.pack(&self.unpack(), target.rounding()), spec: target }
    }
}

impl fmt::Display for Minifloat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Value of every code of `spec`, indexed by code; built once per spec.
pub fn decode_table(spec: &FloatSpec) -> &'static [f64] {
    static TABLES: OnceLock<Mutex<HashMap<FloatSpec, &'static [f64]>>> = OnceLock::new();
    let mut map = TABLES.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry(*spec)
        .or_insert_with(|| Box::leak(spec.codes().map(|c| spec.decode(c)).collect::<Vec<_>>().into_boxed_slice()))
}

/// `2^k` for `k` in the normal `f64` exponent range.
pub fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// `x * 2^k`, exact unless the result leaves the normal `f64` range.
pub fn ldexp(mut x: f64, mut k: i32) -> f64 {
    while k > 1000 {
        x *= pow2(1000);
        k -= 1000;
    }
    while k < -1000 {
        x *= pow2(-1000);
        k += 1000;
    }
    x * pow2(k)
}

/// Unbiased exponent of the leading bit of a finite non-zero `f64`.
pub fn floor_log2(v: f64) -> i32 {
    Unpacked::from_f64(v).exponent
}

/// A container format: one of the minifloat specs, or native `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumberFormat {
    Mini(FloatSpec),
    F32,
}

impl NumberFormat {
    pub fn parse(id: &str) -> Result<Self, SpecError> {
        match id.to_ascii_lowercase().as_str() {
            "f32" | "fp32" | "float32" => Ok(Self::F32),
            other => FloatSpec::from_id(other).map(Self::Mini),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eq1_value(spec: &FloatSpec, s: u64, k: u64, m: u64) -> f64 {
        // direct evaluation of the decoding rule, normal/subnormal branches only
        let sign = if s == 1 { -1.0 } else { 1.0 };
        let m_scale = (1u64 << spec.man_bits()) as f64;
        if k == 0 && spec.denorm() {
            sign * 2f64.powi(1 - spec.bias()) * (m as f64 / m_scale)
        } else {
            sign * 2f64.powi(k as i32 - spec.bias()) * (1.0 + m as f64 / m_scale)
        }
    }

    #[test]
    fn decode_e5m2_examples() {
        let s = FloatSpec::E5M2;
        assert_eq!(s.decode(0b0_00000_00), 0.0);
        assert!(s.decode(0b0_00000_00).is_sign_positive());
        assert_eq!(s.decode(0b0_11111_00), f64::INFINITY);
        assert_eq!(s.decode(0b1_11111_00), f64::NEG_INFINITY);
        assert!(s.decode(0b0_11111_01).is_nan());
        assert_eq!(s.decode(0b0_10000_10), 3.0);
        assert_eq!(eq1_value(&s, 0, 16, 2), 3.0);
    }

    #[test]
    fn decode_matches_direct_formula() {
        for spec in [FloatSpec::E4M3, FloatSpec::E5M2, FloatSpec::E3M4, FloatSpec::E4M3_IEEE] {
            for bits in spec.codes() {
                let c = spec.classify(bits);
                if matches!(c, FloatClass::Normal | FloatClass::Subnormal) {
                    let (s, k, m) = spec.fields(bits);
                    assert_eq!(spec.decode(bits), eq1_value(&spec, s as u64, k as u64, m), "{spec} {bits:#x}");
                }
            }
        }
    }

    #[test]
    fn classify_branches() {
        let s = FloatSpec::E5M2;
        assert_eq!(s.classify(0), FloatClass::Zero);
        assert_eq!(s.classify(0b0_11111_01), FloatClass::NaN);
        assert_eq!(s.classify(0b0_00000_01), FloatClass::Subnormal);
        assert_eq!(s.classify(0b0_11111_00), FloatClass::Infinity);
        let e4 = FloatSpec::E4M3;
        assert_eq!(e4.classify(0x7f), FloatClass::NaN);
        assert_eq!(e4.classify(0x7e), FloatClass::Normal);
        assert_eq!(e4.classify(0x78), FloatClass::Normal);
    }

    #[test]
    fn e4m3_ocp_limits() {
        let s = FloatSpec::E4M3;
        assert_eq!(s.max_finite(), 448.0);
        assert_eq!(s.min_positive(), 2f64.powi(-9));
        assert_eq!(s.min_positive_normal(), 2f64.powi(-6));
        assert!(s.infinity_bits(false).is_none());
        assert_eq!(FloatSpec::E4M3_IEEE.max_finite(), 240.0);
        assert_eq!(FloatSpec::E5M2.max_finite(), 57344.0);
    }

    #[test]
    fn reference_exponent_limits() {
        assert_eq!((FloatSpec::E4M3.xi_max(), FloatSpec::E4M3.xi_min()), (8, -9));
        assert_eq!((FloatSpec::E5M2.xi_max(), FloatSpec::E5M2.xi_min()), (15, -16));
        assert_eq!((FloatSpec::E3M4.xi_max(), FloatSpec::E3M4.xi_min()), (3, -4));
        assert_eq!((FloatSpec::E5M10.xi_max(), FloatSpec::E5M10.xi_min()), (15, -14));
        assert_eq!((FloatSpec::E8M7.xi_max(), FloatSpec::E8M7.xi_min()), (127, -126));
        assert_eq!(FloatSpec::E4M3_IEEE.xi_max(), 7);
    }

    #[test]
    fn bias_and_validation() {
        assert_eq!(FloatSpec::E4M3.bias(), 7);
        assert_eq!(FloatSpec::E8M7.bias(), 127);
        assert_eq!(FloatSpec::new(1, 3), Err(SpecError::ExponentWidth(1)));
        assert_eq!(FloatSpec::new(4, 11), Err(SpecError::MantissaWidth(11)));
        assert_eq!(FloatSpec::new(8, 8), Err(SpecError::TooWide(17)));
        assert_eq!(FloatSpec::new(4, 0), Err(SpecError::NoNanEncoding));
        assert!(FloatSpec::with_layout(4, 0, true, false).is_ok());
        assert!(FloatSpec::from_id("e9m9").is_err());
    }

    #[test]
    fn encode_basic() {
        let s = FloatSpec::E5M2;
        assert_eq!(s.encode(3.0), 0b0_10000_10);
        assert_eq!(s.encode(0.0), 0);
        assert_eq!(s.encode(-0.0), s.sign_mask());
        assert_eq!(s.encode(1e9), s.infinity_bits(false).unwrap());
        assert_eq!(s.encode_with(1e9, RoundingPolicy::Truncate), s.max_finite_bits());
        assert_eq!(s.with_overflow(OverflowPolicy::Saturate).encode(-1e9), s.max_finite_bits() | s.sign_mask());
        assert_eq!(FloatSpec::E4M3.encode(1e9), FloatSpec::E4M3.nan_bits(false));
        assert_eq!(FloatSpec::E4M3.encode(f64::INFINITY), FloatSpec::E4M3.nan_bits(false));
        assert!(s.is_nan(s.encode(f64::NAN)));
    }

    #[test]
    fn ties_follow_policy() {
        let s = FloatSpec::E4M3;
        // 1.0625 is the midpoint of 1.0 and 1.125
        assert_eq!(s.decode(s.encode_with(1.0625, RoundingPolicy::TiesToAway)), 1.125);
        assert_eq!(s.decode(s.encode_with(1.0625, RoundingPolicy::TiesToEven)), 1.0);
        assert_eq!(s.decode(s.encode_with(1.1875, RoundingPolicy::TiesToEven)), 1.25);
        assert_eq!(s.decode(s.encode_with(1.12, RoundingPolicy::Truncate)), 1.0);
        assert_eq!(s.decode(s.encode_with(-1.0625, RoundingPolicy::TiesToAway)), -1.125);
        // half of the smallest subnormal
        let tiny = 2f64.powi(-10);
        assert_eq!(s.decode(s.encode_with(tiny, RoundingPolicy::TiesToAway)), 2f64.powi(-9));
        assert_eq!(s.decode(s.encode_with(tiny, RoundingPolicy::TiesToEven)), 0.0);
        // FN boundary: 464 is the midpoint between 448 and the first overflow
        assert_eq!(s.decode(s.encode_with(463.9, RoundingPolicy::TiesToAway)), 448.0);
        assert!(s.decode(s.encode_with(464.0, RoundingPolicy::TiesToAway)).is_nan());
    }

    #[test]
    fn no_denorm_bottom_binade() {
        let s = FloatSpec::with_layout(3, 2, false, true).unwrap();
        // k = 0, m != 0 reads as a normal number at exponent -bias
        assert_eq!(s.classify(0b0_000_01), FloatClass::Normal);
        assert_eq!(s.decode(0b0_000_01), 1.25 * 2f64.powi(-3));
        assert_eq!(s.min_positive(), 1.25 / 8.0);
        assert_eq!(s.decode(s.encode(1.0 / 8.0)), 1.25 / 8.0);
        assert_eq!(s.decode(s.encode(0.6 / 8.0)), 0.0);
        assert_eq!(s.decode(s.encode(0.625 / 8.0)), 1.25 / 8.0);
        assert_eq!(s.decode(s.encode_with(0.625 / 8.0, RoundingPolicy::TiesToEven)), 0.0);
        for bits in s.codes() {
            if !s.is_nan(bits) {
                assert_eq!(s.encode(s.decode(bits)), bits);
            }
        }
    }

    #[test]
    fn unpack_three() {
        let u = FloatSpec::E5M2.unpack(FloatSpec::E5M2.encode(3.0));
        assert_eq!(u.class, FloatClass::Normal);
        assert_eq!(u.exponent, 1);
        assert_eq!(u.significand, 0b11 << 62);
        let inf = FloatSpec::E5M2.unpack(0b0_11111_00);
        assert_eq!((inf.class, inf.negative), (FloatClass::Infinity, false));
    }

    #[test]
    fn pack_unpack_is_identity_on_all_patterns() {
        for spec in [FloatSpec::E4M3, FloatSpec::E4M3_IEEE, FloatSpec::E5M2, FloatSpec::E3M4, FloatSpec::E5M10, FloatSpec::E8M7] {
            for bits in spec.codes() {
                for policy in [RoundingPolicy::TiesToAway, RoundingPolicy::TiesToEven, RoundingPolicy::Truncate] {
                    assert_eq!(spec.pack(&spec.unpack(bits), policy), bits, "{spec} {bits:#x}");
                }
            }
        }
    }

    #[test]
    fn ulp_and_limits() {
        let s = FloatSpec::E4M3;
        assert_eq!(s.ulp(1.0), 0.125);
        assert_eq!(s.ulp(300.0), 32.0);
        assert_eq!(s.ulp(1e-4), 2f64.powi(-9));
        let l = FloatSpec::E3M4.limits();
        assert_eq!(l.xi_min, -4);
        assert_eq!(FloatSpec::E8M7.limits().xi_max, 127);
    }

    #[test]
    fn encode_scaled_is_single_rounding() {
        let s = FloatSpec::E4M3;
        assert_eq!(s.decode(s.encode_scaled(2.0, 7)), 256.0);
        assert_eq!(s.decode(s.encode_scaled(f64::MIN_POSITIVE, 1030)), 256.0);
    }

    #[test]
    fn minifloat_convert_narrows_with_target_policy() {
        let x = Minifloat::from_f64(1.0625, FloatSpec::E8M7);
        assert_eq!(x.convert(FloatSpec::E4M3).to_f64(), 1.125);
        assert_eq!(x.convert(FloatSpec::E4M3.with_rounding(RoundingPolicy::Truncate)).to_f64(), 1.0);
    }

    #[test]
    fn number_format_ids() {
        assert_eq!(NumberFormat::parse("f32"), Ok(NumberFormat::F32));
        assert_eq!(NumberFormat::parse("e5m2"), Ok(NumberFormat::Mini(FloatSpec::E5M2)));
        for id in FloatSpec::IDS {
            assert_eq!(FloatSpec::from_id(id).unwrap().id(), id);
        }
    }
}
