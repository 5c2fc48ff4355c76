#![allow(dead_code)]

use mx_core::minifloat::{FloatSpec, OverflowPolicy, RoundingPolicy};
use mx_oracle::{Format, Mode, Val};

pub fn oracle_format(spec: &FloatSpec) -> Format {
    Format {
        e: spec.exp_bits(),
        m: spec.man_bits(),
        denorm: spec.denorm(),
        ieee: spec.reserved_top_exponent(),
        saturate: spec.overflow() == OverflowPolicy::Saturate,
    }
}

pub fn mode(policy: RoundingPolicy) -> Mode {
    match policy {
        RoundingPolicy::TiesToAway => Mode::NearestAway,
        RoundingPolicy::TiesToEven => Mode::NearestEven,
        RoundingPolicy::Truncate => Mode::Truncate,
    }
}

/// Equal codes, or two NaNs of the same sign.
pub fn same_code(spec: &FloatSpec, ours: u16, theirs: u32) -> bool {
    if spec.is_nan(ours) {
        let f = oracle_format(spec);
        matches!(f.decode(theirs), Val::NaN(s) if s == spec.is_negative(ours))
    } else {
        ours as u32 == theirs
    }
}
