//! Small descriptive-statistics helpers shared by the estimators.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(v: &[f64]) -> f64 {
    sample_variance(v).sqrt()
}

pub fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Quantile of already sorted data by linear interpolation between order
/// statistics (`h = (n - 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let q = q.clamp(0.0, 1.0);
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile(v: &[f64], q: f64) -> f64 {
    quantile_sorted(&sorted(v), q)
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Two-sided p-value of a t statistic; falls back to the normal law for
/// non-finite or huge degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    let upper = if df.is_finite() && df > 0.0 && df < 1e7 {
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid df");
        1.0 - dist.cdf(t.abs())
    } else {
        1.0 - normal_cdf(t.abs())
    };
    (2.0 * upper).clamp(0.0, 1.0)
}

pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    (2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Upper `1 - alpha/2` critical value of Student's t.
pub fn t_critical(alpha: f64, df: f64) -> f64 {
    let p = 1.0 - alpha / 2.0;
    if df.is_finite() && df > 0.0 && df < 1e7 {
        StudentsT::new(0.0, 1.0, df).expect("valid df").inverse_cdf(p)
    } else {
        normal_quantile(p)
    }
}

/// Significance stars: `+ p<0.1, * p<0.05, ** p<0.01, *** p<0.001`.
pub fn stars(p: f64) -> &'static str {
    if !(p.is_finite()) {
        ""
    } else if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "+"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_quantiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&v, 0.10) - 10.9).abs() < 1e-12);
        assert!((quantile(&v, 0.90) - 90.1).abs() < 1e-12);
        assert_eq!(median(&[1.0, 9.0, 2.0]), 2.0);
    }

    #[test]
    fn star_thresholds() {
        assert_eq!(stars(0.0005), "***");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.03), "*");
        assert_eq!(stars(0.07), "+");
        assert_eq!(stars(0.2), "");
    }

    #[test]
    fn p_values() {
        assert!((normal_two_sided_p(1.959963984540054) - 0.05).abs() < 1e-9);
        assert!((t_critical(0.05, 1e9) - 1.959963984540054).abs() < 1e-9);
        assert!(t_two_sided_p(2.0, 5.0) > normal_two_sided_p(2.0));
    }
}
