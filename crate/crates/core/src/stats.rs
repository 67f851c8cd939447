//! Statistical primitives for the information layer.
//!
//! Tail probabilities use `statrs`: the normal tail through `erfc`, the
//! Student-t tail through the regularized incomplete beta function and the
//! chi-square tail through the upper regularized gamma function.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::{beta, erf, gamma};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("domain error: {0}")]
    Domain(String),
}

/// Two-sided critical value of the standard normal for a confidence level.
pub fn normal_critical(level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Two-sided p-value of a standard-normal statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erf::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Two-sided p-value of a Student-t statistic with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

pub fn student_t_critical(level: f64, df: f64) -> f64 {
    let t = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    t.inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma::gamma_ur(df / 2.0, x / 2.0).clamp(0.0, 1.0)
}

fn check_level(level: f64) -> Result<(), StatsError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(StatsError::Domain(format!("level {level} outside (0,1)")))
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, level: f64) -> Result<(f64, f64), StatsError> {
    check_level(level)?;
    if n == 0 || k > n {
        return Err(StatsError::Domain(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    let z = normal_critical(level);
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoProportion {
    pub p1: f64,
    pub p2: f64,
    pub difference: f64,
    /// Unpooled Wald interval for the difference.
    pub ci: (f64, f64),
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    /// Pooled proportion is 0 or 1, so the statistic is undefined.
    pub degenerate: bool,
}

/// Pooled two-sided z-test for equal proportions, no continuity correction.
pub fn two_proportion_test(
    k1: u64,
    n1: u64,
    k2: u64,
    n2: u64,
    level: f64,
) -> Result<TwoProportion, StatsError> {
    check_level(level)?;
    if n1 == 0 || n2 == 0 || k1 > n1 || k2 > n2 {
        return Err(StatsError::Domain(format!(
            "invalid counts ({k1}/{n1}, {k2}/{n2})"
        )));
    }
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let p1 = k1 as f64 / n1f;
    let p2 = k2 as f64 / n2f;
    let difference = p1 - p2;
    let zc = normal_critical(level);
    let se_unpooled = (p1 * (1.0 - p1) / n1f + p2 * (1.0 - p2) / n2f).sqrt();
    let ci = (difference - zc * se_unpooled, difference + zc * se_unpooled);
    let pooled = (k1 + k2) as f64 / (n1f + n2f);
    if k1 + k2 == 0 || k1 + k2 == n1 + n2 {
        return Ok(TwoProportion {
            p1,
            p2,
            difference,
            ci,
            z: None,
            p_value: None,
            degenerate: true,
        });
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    let z = difference / se;
    Ok(TwoProportion {
        p1,
        p2,
        difference,
        ci,
        z: Some(z),
        p_value: Some(normal_two_sided_p(z)),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub cramers_v: f64,
    pub n: f64,
}

/// Pearson chi-square test of independence on an r x c table of counts.
///
/// Rows or columns with zero total are dropped first. Returns `None` when
/// fewer than two rows or columns remain.
pub fn chi_square_independence(counts: &[Vec<f64>]) -> Option<ChiSquare> {
    let cols = counts.first().map_or(0, Vec::len);
    let col_tot: Vec<f64> = (0..cols)
        .map(|j| counts.iter().map(|r| r[j]).sum())
        .collect();
    let keep_cols: Vec<usize> = (0..cols).filter(|&j| col_tot[j] > 0.0).collect();
    let rows: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| keep_cols.iter().map(|&j| r[j]).collect::<Vec<f64>>())
        .filter(|r| r.iter().sum::<f64>() > 0.0)
        .collect();
    let (r, c) = (rows.len(), keep_cols.len());
    if r < 2 || c < 2 {
        return None;
    }
    let row_tot: Vec<f64> = rows.iter().map(|row| row.iter().sum()).collect();
    let col_tot: Vec<f64> = (0..c).map(|j| rows.iter().map(|row| row[j]).sum()).collect();
    let n: f64 = row_tot.iter().sum();
    let mut stat = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let exp = row_tot[i] * col_tot[j] / n;
            stat += (obs - exp) * (obs - exp) / exp;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    let k = (r.min(c) - 1) as f64;
    Some(ChiSquare {
        statistic: stat,
        df,
        p_value: chi_square_sf(stat, df),
        cramers_v: (stat / (n * k)).sqrt(),
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub n: usize,
    /// Fisher-z interval; `None` when n <= 3.
    pub ci: Option<(f64, f64)>,
}

/// Pearson correlation with a two-sided t-test on n-2 degrees of freedom.
/// Returns `None` with fewer than 3 pairs or zero variance in either input.
pub fn pearson(xs: &[f64], ys: &[f64], level: f64) -> Option<Correlation> {
    let n = xs.len();
    if n < 3 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let one_minus = 1.0 - r * r;
    let t = if one_minus <= 0.0 {
        f64::INFINITY.copysign(r)
    } else {
        r * (df / one_minus).sqrt()
    };
    let p_value = student_t_two_sided_p(t, df);
    let ci = (n > 3).then(|| {
        if r.abs() >= 1.0 {
            (r, r)
        } else {
            let z = r.atanh();
            let h = normal_critical(level) / (nf - 3.0).sqrt();
            ((z - h).tanh(), (z + h).tanh())
        }
    });
    Some(Correlation {
        r,
        t,
        df,
        p_value,
        n,
        ci,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub ci: (f64, f64),
}

/// Sample mean with a Student-t interval. For n = 1 the interval collapses.
pub fn mean_ci(values: &[f64], level: f64) -> Result<MeanEstimate, StatsError> {
    check_level(level)?;
    let n = values.len();
    if n == 0 {
        return Err(StatsError::Domain("mean of empty sample".into()));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    if n == 1 {
        return Ok(MeanEstimate { mean, sd: 0.0, n, ci: (mean, mean) });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let half = student_t_critical(level, nf - 1.0) * sd / nf.sqrt();
    Ok(MeanEstimate {
        mean,
        sd,
        n,
        ci: (mean - half, mean + half),
    })
}

/// Relative lift `(treatment - baseline) / baseline`.
pub fn relative_lift(treatment_rate: f64, baseline_rate: f64) -> Result<f64, StatsError> {
    if !(baseline_rate > 0.0) {
        return Err(StatsError::Domain(format!(
            "baseline rate must be positive, got {baseline_rate}"
        )));
    }
    Ok((treatment_rate - baseline_rate) / baseline_rate)
}

/// Absolute lift in rate units.
pub fn absolute_lift(treatment_rate: f64, baseline_rate: f64) -> f64 {
    treatment_rate - baseline_rate
}
