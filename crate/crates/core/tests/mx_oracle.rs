mod common;

use common::{mode, oracle_format, same_code};
use mx_core::exact_acc::required_width;
use mx_core::minifloat::{FloatSpec, OverflowPolicy};
use mx_core::mx::{block_exponent, mx_dot, mx_dot_with, AccumulatorKind, MxVector, ScaleExp};
use mx_oracle::{dot, f64_to_q, floor_log2, pow2, q_to_f64, Rounder, Val, Q};
use num_traits::{Signed, Zero};
use proptest::prelude::*;
use std::sync::OnceLock;

const ELEMS: [FloatSpec; 4] = [FloatSpec::E4M3, FloatSpec::E5M2, FloatSpec::E3M4, FloatSpec::E8M7];

fn saturating_rounders() -> &'static [Rounder] {
    static CELL: OnceLock<Vec<Rounder>> = OnceLock::new();
    CELL.get_or_init(|| {
        ELEMS
            .iter()
            .map(|s| Rounder::new(oracle_format(&s.with_overflow(OverflowPolicy::Saturate))))
            .collect()
    })
}

/// Scale and codes the oracle picks for a block of finite values.
fn oracle_quantize(which: usize, xs: &[f64]) -> (i32, Vec<u32>) {
    let spec = ELEMS[which];
    let qs: Vec<Q> = xs.iter().map(|&x| f64_to_q(x)).collect();
    // only normal f64 inputs take part in choosing the scale
    let min_normal = pow2(-1022);
    let max = qs.iter().map(|q| q.abs()).filter(|q| *q >= min_normal).max().unwrap_or_else(Q::zero);
    let w = if max.is_zero() {
        0
    } else {
        (floor_log2(&max) - spec.xi_max() as i64).clamp(-127, 127) as i32
    };
    let r = &saturating_rounders()[which];
    let codes = xs
        .iter()
        .zip(&qs)
        .map(|(&x, q)| r.round(&Val::Num(q / pow2(w as i64), x.is_sign_negative()), mode(spec.rounding())))
        .collect();
    (w, codes)
}

fn moderate() -> impl Strategy<Value = f64> {
    (any::<bool>(), -40i32..40, 0u64..(1 << 52)).prop_map(|(s, e, m)| {
        let x = f64::from_bits(((1023 + e) as u64) << 52 | m);
        if s { -x } else { x }
    })
}

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![
        3 => moderate(),
        1 => (any::<bool>(), -300i32..300, 0u64..(1 << 52)).prop_map(|(s, e, m)| {
            let x = f64::from_bits(((1023 + e) as u64) << 52 | m);
            if s { -x } else { x }
        }),
        1 => Just(0.0),
        1 => Just(-0.0),
        1 => (1u64..(1 << 52)).prop_map(f64::from_bits),
    ]
}

fn exact_value(spec: &FloatSpec, codes: &[u16], scales: &[ScaleExp], block: usize) -> Vec<Q> {
    let f = oracle_format(spec);
    codes
        .iter()
        .enumerate()
        .map(|(i, &c)| match f.decode(c as u32) {
            Val::Num(q, _) => q * pow2(scales[i / block].exp().unwrap() as i64),
            v => panic!("unexpected special {v:?}"),
        })
        .collect()
}

/// Finite codes of a format.
fn finite_code(spec: FloatSpec) -> impl Strategy<Value = u16> {
    (0..spec.code_count() as u16).prop_filter("finite", move |&c| spec.decode(c).is_finite())
}

fn mx_pair(spec: FloatSpec, n: usize, block: usize) -> impl Strategy<Value = (MxVector, MxVector)> {
    let blocks = n.div_ceil(block);
    let side = move || {
        (
            prop::collection::vec(finite_code(spec), n),
            prop::collection::vec(-30i32..30, blocks),
        )
            .prop_map(move |(c, s)| {
                MxVector::from_parts(spec, block, c, s.into_iter().map(ScaleExp::new).collect()).unwrap()
            })
    };
    (side(), side())
}

fn exact_dot(a: &MxVector, b: &MxVector) -> f64 {
    let qa = exact_value(a.elem(), a.codes(), a.scales(), a.block_len());
    let qb = exact_value(b.elem(), b.codes(), b.scales(), b.block_len());
    q_to_f64(&dot(&qa, &qb))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn quantizer_matches_oracle(which in 0usize..4, xs in prop::collection::vec(value(), 1..=32)) {
        let spec = ELEMS[which];
        let v = MxVector::from_slice(spec, 32, &xs).unwrap();
        let (w, codes) = oracle_quantize(which, &xs);
        prop_assert_eq!(v.scales()[0].exp(), Some(w));
        for (i, (&ours, &theirs)) in v.codes().iter().zip(&codes).enumerate() {
            prop_assert!(same_code(&spec, ours, theirs), "element {}: {:#x} vs {:#x}", i, ours, theirs);
        }
    }

    #[test]
    fn block_with_a_normal_input_reaches_the_top_exponent(
        mut xs in prop::collection::vec(prop_oneof![4 => moderate(), 1 => Just(0.0)], 32),
        big in moderate(),
    ) {
        let spec = FloatSpec::E4M3;
        xs[0] = big;
        prop_assert!((-127..=127).contains(&block_exponent(&spec, &xs)));
        let v = MxVector::from_slice(spec, 32, &xs).unwrap();
        let top = v.codes().iter().map(|&c| spec.decode(c).abs()).fold(0.0, f64::max);
        prop_assert!(top >= 2f64.powi(spec.xi_max()));
    }

    #[test]
    fn exact_dot_is_correctly_rounded((a, b) in mx_pair(FloatSpec::E4M3, 256, 32)) {
        prop_assert_eq!(mx_dot(&a, &b, AccumulatorKind::Exact).unwrap(), exact_dot(&a, &b));
    }

    #[test]
    fn exact_dot_handles_partial_blocks(
        (which, (a, b)) in (0usize..3, 1usize..100)
            .prop_flat_map(|(which, n)| (Just(which), mx_pair(ELEMS[which], n, 16)))
    ) {
        let spec = ELEMS[which];
        match mx_dot(&a, &b, AccumulatorKind::Exact) {
            Ok(x) => prop_assert_eq!(x, exact_dot(&a, &b)),
            Err(_) => prop_assert!(required_width(&spec) + 4 > 63),
        }
    }

    #[test]
    fn wide_dot_error_is_bounded((a, b) in mx_pair(FloatSpec::E4M3, 256, 32)) {
        let exact = exact_dot(&a, &b);
        let abs: f64 = a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| (x * y).abs()).sum();
        for lut in [true, false] {
            let wide = mx_dot_with(&a, &b, AccumulatorKind::WideFloat, lut).unwrap();
            prop_assert!((wide - exact).abs() <= 300.0 * f64::EPSILON * abs);
        }
    }
}

#[test]
fn exact_register_survives_extreme_blocks() {
    let spec = FloatSpec::E4M3;
    let max = spec.max_finite_bits();
    let min = spec.encode(spec.min_positive());
    let mut codes = vec![max; 31];
    codes.push(min);
    let a = MxVector::from_parts(spec, 32, codes.clone(), vec![ScaleExp::new(0)]).unwrap();
    assert_eq!(mx_dot(&a, &a, AccumulatorKind::Exact).unwrap(), exact_dot(&a, &a));
    let neg: Vec<u16> = codes.iter().map(|&c| spec.negate(c)).collect();
    let b = MxVector::from_parts(spec, 32, neg, vec![ScaleExp::new(0)]).unwrap();
    assert_eq!(mx_dot(&a, &b, AccumulatorKind::Exact).unwrap(), exact_dot(&a, &b));
}

#[test]
fn accumulator_widths() {
    let cases = [
        (FloatSpec::E4M3, 43),
        (FloatSpec::E5M2, 69),
        (FloatSpec::E3M4, 25),
        (FloatSpec::E5M10, 81),
        (FloatSpec::E8M7, 523),
    ];
    for (spec, w) in cases {
        assert_eq!(required_width(&spec), w, "{spec}");
    }
}

#[test]
fn narrow_accumulator_overflows_where_wide_does_not() {
    let spec = FloatSpec::E5M2;
    let max = spec.max_finite_bits();
    let one = spec.encode(1.0);
    let a = MxVector::from_parts(spec, 32, vec![max, max], vec![ScaleExp::new(0)]).unwrap();
    let b = MxVector::from_parts(spec, 32, vec![one, one], vec![ScaleExp::new(0)]).unwrap();
    let narrow = mx_dot(&a, &b, AccumulatorKind::NarrowSameFormat).unwrap();
    assert_eq!(narrow, f64::INFINITY);
    let wide = mx_dot(&a, &b, AccumulatorKind::WideFloat).unwrap();
    assert_eq!(wide, 2.0 * spec.max_finite());
    assert_eq!(wide, exact_dot(&a, &b));
}
