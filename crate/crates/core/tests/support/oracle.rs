//! Reference statistics written from textbook formulas, independent of the
//! crate's `stats` module and of `statrs`.

use std::f64::consts::PI;

/// Two-sided standard-normal critical values for the levels used in tests.
pub fn z_critical(level: f64) -> f64 {
    match level {
        l if (l - 0.95).abs() < 1e-12 => 1.959_963_984_540_054,
        l if (l - 0.90).abs() < 1e-12 => 1.644_853_626_951_472_2,
        l if (l - 0.99).abs() < 1e-12 => 2.575_829_303_548_900_4,
        other => panic!("no reference critical value for level {other}"),
    }
}

/// erfc by Maclaurin series below 2 and a Lentz continued fraction above.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        return 1.0 - 2.0 / PI.sqrt() * sum;
    }
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / PI.sqrt() / f
}

pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / 2f64.sqrt())
}

/// Lanczos approximation, g = 7.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Upper regularized incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..10_000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-17 {
                break;
            }
        }
        (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }
}

pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Wilson score interval with the textbook end-point conventions.
pub fn wilson(k: u64, n: u64, level: f64) -> (f64, f64) {
    let z = z_critical(level);
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let a = p + z * z / (2.0 * n);
    let b = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    let c = 1.0 + z * z / n;
    let lo = if k == 0.0 { 0.0 } else { ((a - b) / c).max(0.0) };
    let hi = if k == n { 1.0 } else { ((a + b) / c).min(1.0) };
    (lo, hi)
}

pub struct TwoProp {
    pub diff: f64,
    pub ci: (f64, f64),
    pub z: Option<f64>,
    pub p: Option<f64>,
}

pub fn two_prop(k1: u64, n1: u64, k2: u64, n2: u64, level: f64) -> TwoProp {
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let diff = p1 - p2;
    let se_u = (p1 * (1.0 - p1) / n1 as f64 + p2 * (1.0 - p2) / n2 as f64).sqrt();
    let zc = z_critical(level);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    let (z, p) = if pooled == 0.0 || pooled == 1.0 {
        (None, None)
    } else {
        let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
        let z = diff / se;
        (Some(z), Some(normal_two_sided_p(z)))
    };
    TwoProp { diff, ci: (diff - zc * se_u, diff + zc * se_u), z, p }
}

pub struct Chi {
    pub stat: f64,
    pub df: f64,
    pub p: f64,
    pub v: f64,
}

/// Pearson chi-square after dropping empty rows and columns.
pub fn chi_square(table: &[Vec<u64>]) -> Option<Chi> {
    let ncol = table.first().map_or(0, |r| r.len());
    let cols: Vec<usize> = (0..ncol).filter(|&j| table.iter().any(|r| r[j] > 0)).collect();
    let rows: Vec<Vec<f64>> = table
        .iter()
        .filter(|r| cols.iter().any(|&j| r[j] > 0))
        .map(|r| cols.iter().map(|&j| r[j] as f64).collect())
        .collect();
    if rows.len() < 2 || cols.len() < 2 {
        return None;
    }
    let n: f64 = rows.iter().flatten().sum();
    let mut stat = 0.0;
    for i in 0..rows.len() {
        for j in 0..cols.len() {
            let ri: f64 = rows[i].iter().sum();
            let cj: f64 = rows.iter().map(|r| r[j]).sum();
            let e = ri * cj / n;
            stat += (rows[i][j] - e).powi(2) / e;
        }
    }
    let df = ((rows.len() - 1) * (cols.len() - 1)) as f64;
    let k = (rows.len().min(cols.len()) - 1) as f64;
    Some(Chi { stat, df, p: chi_square_sf(stat, df), v: (stat / (n * k)).sqrt() })
}

pub struct Pearson {
    pub r: f64,
    pub t: f64,
    pub p: f64,
    pub ci: Option<(f64, f64)>,
}

/// Sample correlation from raw sums, t-test on n-2 df, Fisher-z interval.
pub fn pearson(xs: &[f64], ys: &[f64], level: f64) -> Option<Pearson> {
    let n = xs.len() as f64;
    if xs.len() < 3 {
        return None;
    }
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum::<f64>() - sx * sx / n;
    let syy: f64 = ys.iter().map(|y| y * y).sum::<f64>() - sy * sy / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() - sx * sy / n;
    if sxx <= 1e-12 || syy <= 1e-12 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let t = if r.abs() >= 1.0 { f64::INFINITY.copysign(r) } else { r * ((n - 2.0) / (1.0 - r * r)).sqrt() };
    let p = student_t_two_sided_p(t, n - 2.0);
    let ci = (xs.len() > 3).then(|| {
        if r.abs() >= 1.0 {
            (r, r)
        } else {
            let z = 0.5 * ((1.0 + r) / (1.0 - r)).ln();
            let h = z_critical(level) / (n - 3.0).sqrt();
            ((z - h).tanh().min(r), (z + h).tanh().max(r))
        }
    });
    Some(Pearson { r, t, p, ci })
}

/// Asserts |a - b| <= tol, treating equal infinities as equal.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol
}
