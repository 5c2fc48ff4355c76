mod common;

use common::{mode, oracle_format, same_code};
use mx_core::luts::LutSet;
use mx_core::minifloat::FloatSpec;
use mx_oracle::{add, mul, recip, Rounder};

fn check_pair(input: FloatSpec, output: FloatSpec) {
    let lut = LutSet::build(input, output).unwrap();
    let fin = oracle_format(&input);
    let into_out = Rounder::new(oracle_format(&output));
    let into_in = Rounder::new(fin);
    let (m_in, m_out) = (mode(input.rounding()), mode(output.rounding()));
    let n = input.code_count() as u16;
    let mut mismatches = Vec::new();
    for a in 0..n {
        let va = fin.decode(a as u32);
        for b in 0..n {
            let vb = fin.decode(b as u32);
            let want = into_out.round(&mul(&va, &vb), m_out);
            if !same_code(&output, lut.lut_mul(a, b), want) {
                mismatches.push(format!("mul {a:#04x} {b:#04x}"));
            }
            let want = into_out.round(&add(&va, &vb), m_out);
            if !same_code(&output, lut.lut_add(a, b), want) {
                mismatches.push(format!("add {a:#04x} {b:#04x}"));
            }
        }
        let want = into_in.round(&recip(&va), m_in);
        if !same_code(&input, lut.lut_recip(a), want) {
            mismatches.push(format!("recip {a:#04x}"));
        }
        let want = into_out.round(&va, m_out);
        if !same_code(&output, lut.lut_promote(a), want) {
            mismatches.push(format!("promote {a:#04x}"));
        }
    }
    assert!(mismatches.is_empty(), "{} {}: {:?}", input, output, &mismatches[..mismatches.len().min(10)]);
}

#[test]
fn e4m3_tables_match_exact_arithmetic() {
    check_pair(FloatSpec::E4M3, FloatSpec::E8M7);
}

#[test]
fn e5m2_tables_match_exact_arithmetic() {
    check_pair(FloatSpec::E5M2, FloatSpec::E8M7);
}

#[test]
fn narrow_output_tables_round_like_the_oracle() {
    // sums and products that do not fit the output are rounded once
    check_pair(FloatSpec::E3M4, FloatSpec::E4M3);
    check_pair(FloatSpec::E5M2, FloatSpec::E4M3_IEEE);
}

#[test]
fn dump_load_round_trip() {
    let lut = LutSet::build(FloatSpec::E4M3, FloatSpec::E8M7).unwrap();
    let mut buf = Vec::new();
    lut.dump(&mut buf).unwrap();
    assert_eq!(LutSet::load(&mut &buf[..]).unwrap(), lut);
    assert!(LutSet::load(&mut &buf[..buf.len() - 1]).is_err());
}
