use crate::error::{Error, Result};
#[allow(unused_imports)] // std shadows these when linked
use num_traits::Float;

const MAX_ITER: usize = 10_000;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Regularized incomplete gamma functions `(P(a, x), Q(a, x))`.
///
/// Series expansion for `x < a + 1`, Lentz continued fraction otherwise, so
/// the smaller of the two tails is always computed directly.
pub fn regularized_gamma(a: f64, x: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) || !(x >= 0.0) || !a.is_finite() || x.is_nan() {
        return Err(Error::domain("regularized_gamma needs a > 0 and x >= 0"));
    }
    if x == 0.0 {
        return Ok((0.0, 1.0));
    }
    if x == f64::INFINITY {
        return Ok((1.0, 0.0));
    }
    let log_prefactor = -x + a * x.ln() - libm::lgamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        let p = (sum.ln() + log_prefactor).exp().min(1.0);
        Ok((p, 1.0 - p))
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        let q = (h.ln() + log_prefactor).exp().min(1.0);
        Ok((1.0 - q, q))
    }
}

fn check_df(df: u32) -> Result<()> {
    if df == 0 {
        Err(Error::domain(
            "chi-square degrees of freedom must be positive",
        ))
    } else {
        Ok(())
    }
}

/// Upper tail `Pr(X > x)` of the chi-square distribution with `df` degrees
/// of freedom.
pub fn chi2_sf(x: f64, df: u32) -> Result<f64> {
    check_df(df)?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain("chi2_sf needs x >= 0"));
    }
    Ok(regularized_gamma(0.5 * df as f64, 0.5 * x)?.1)
}

/// Lower tail `Pr(X <= x)`.
pub fn chi2_cdf(x: f64, df: u32) -> Result<f64> {
    check_df(df)?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain("chi2_cdf needs x >= 0"));
    }
    Ok(regularized_gamma(0.5 * df as f64, 0.5 * x)?.0)
}

/// Quantile function: the `x` with `Pr(X <= x) = q`.
///
/// Brackets the root and bisects until the bracket collapses to adjacent
/// floating-point values, comparing on whichever tail is smaller to keep
/// relative accuracy in both directions.
pub fn chi2_quantile(q: f64, df: u32) -> Result<f64> {
    check_df(df)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::domain("chi2_quantile needs 0 < q < 1"));
    }
    let k = df as f64;
    let upper_target = 1.0 - q;
    let use_upper = upper_target < q;
    // f is increasing in x
    let f = |x: f64| -> Result<f64> {
        let (p, s) = regularized_gamma(0.5 * k, 0.5 * x)?;
        Ok(if use_upper { upper_target - s } else { p - q })
    };
    let mut lo = 0.0_f64;
    let mut hi = k + 10.0 * (2.0 * k).sqrt() + 10.0;
    while f(hi)? < 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::domain("chi2_quantile: no finite bracket"));
        }
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
