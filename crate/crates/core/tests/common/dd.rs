//! Double-double `exp` and `ln` built on twofloat's error-free arithmetic.
//! The crate's own transcendental functions stop short of full double-double
//! accuracy, which is not enough for a finite-difference oracle.

use twofloat::TwoFloat;

pub type Dd = TwoFloat;

const LN2: (f64, f64) = (std::f64::consts::LN_2, 2.3190468138462996e-17);
const SQUARINGS: i32 = 12;

pub fn dd(x: f64) -> Dd {
    TwoFloat::from(x)
}

fn ln2() -> Dd {
    TwoFloat::try_from(LN2).expect("normalised constant")
}

pub fn exp(x: Dd) -> Dd {
    let hi = x.hi();
    if hi < -700.0 {
        return dd(0.0);
    }
    assert!(hi < 700.0, "exp overflow at {x:?}");
    // x = k ln2 + r, then exp(r) = (exp(r / 2^s))^(2^s)
    let k = (hi / LN2.0).round();
    let r = (x - ln2() * k) / 2f64.powi(SQUARINGS);
    // track e = exp(r) - 1 through the squarings so the leading one does not
    // swamp the low-order digits: (1 + e)^2 - 1 = e (2 + e)
    let mut term = dd(1.0);
    let mut e = dd(0.0);
    for n in 1..=12 {
        term = term * r / n as f64;
        e += term;
    }
    for _ in 0..SQUARINGS {
        e = e * (e + 2.0);
    }
    (e + 1.0) * 2f64.powi(k as i32)
}

pub fn ln(x: Dd) -> Dd {
    assert!(x.hi() > 0.0, "ln of non-positive value");
    // Newton on exp(y) = x; each step doubles the correct digits
    let mut y = dd(x.hi().ln());
    for _ in 0..3 {
        y = y + x * exp(-y) - 1.0;
    }
    y
}

pub fn abs(x: Dd) -> Dd {
    if x.hi() < 0.0 { -x } else { x }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, want: (f64, f64)) -> bool {
        let want = TwoFloat::try_from(want).unwrap();
        let err = abs(a - want).hi();
        err <= 1e-29 * want.hi().abs()
    }

    #[test]
    fn exp_matches_reference_values() {
        let cases = [
            (1.0, (std::f64::consts::E, 1.4456468917292502e-16)),
            (-3.0, (0.049787068367863944, -1.4831389691394365e-18)),
            (-20.0, (2.061153622438558e-09, -4.19755767595054e-26)),
            (0.375, (1.4549914146182013, 8.517923078996071e-17)),
            (-0.001953125, (0.9980487811074755, -5.173333050138318e-17)),
        ];
        for (x, want) in cases {
            assert!(close(exp(dd(x)), want), "exp({x}) = {:?}", exp(dd(x)));
        }
    }

    #[test]
    fn ln_matches_reference_values() {
        let cases = [
            (2.0, (std::f64::consts::LN_2, 2.3190468138462996e-17)),
            (37.5, (3.624340932976365, -3.932410912927591e-17)),
            (0.375, (-0.9808292530117262, -4.9262074302888635e-17)),
            (0.001953125, (-6.238324625039508, -9.769191078365131e-17)),
            (1e6, (13.815510557964274, 4.739031053709008e-16)),
        ];
        for (x, want) in cases {
            assert!(close(ln(dd(x)), want), "ln({x}) = {:?}", ln(dd(x)));
        }
        assert_eq!(ln(dd(1.0)).hi().abs(), 0.0);
    }
}
