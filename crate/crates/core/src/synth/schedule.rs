use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSchedule {
    /// Squared-cosine cumulative schedule with offset `s`.
    Cosine { s: f64 },
    /// Betas evenly spaced between the endpoints.
    Linear { beta_start: f64, beta_end: f64 },
}

/// Per-step `alpha_t = 1 - beta_t` and cumulative products, with
/// `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

impl Schedule {
    pub fn new(kind: NoiseSchedule, timesteps: usize) -> Result<Self> {
        if timesteps == 0 {
            return invalid("timesteps must be at least 1");
        }
        let betas: Vec<f64> = match kind {
            NoiseSchedule::Cosine { s } => {
                if !(s >= 0.0) {
                    return invalid("cosine offset must be nonnegative");
                }
                let f = |t: usize| {
                    let x = (t as f64 / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=timesteps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA))
                    .collect()
            }
            NoiseSchedule::Linear { beta_start, beta_end } => {
                if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
                    return invalid("linear schedule needs 0 < beta_start <= beta_end < 1");
                }
                (0..timesteps)
                    .map(|i| {
                        let w = if timesteps == 1 {
                            0.0
                        } else {
                            i as f64 / (timesteps - 1) as f64
                        };
                        beta_start + w * (beta_end - beta_start)
                    })
                    .collect()
            }
        };
        Ok(Self::from_betas(&betas))
    }

    pub fn from_betas(betas: &[f64]) -> Self {
        let mut alphas = vec![1.0];
        let mut alpha_bars = vec![1.0];
        for b in betas {
            alphas.push(1.0 - b);
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
        }
        Self { alphas, alpha_bars }
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return invalid(format!("timestep {t} outside 1..={}", self.timesteps()));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps` for a given `alpha_bar`.
pub fn gaussian_noising_at(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return invalid("x0 and eps lengths differ");
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return invalid(format!("alpha_bar {alpha_bar} outside [0, 1]"));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn gaussian_noising(x0: &[f64], t: usize, eps: &[f64], schedule: &Schedule) -> Result<Vec<f64>> {
    schedule.check(t)?;
    gaussian_noising_at(x0, schedule.alpha_bar(t), eps)
}

pub(crate) fn corrupt_category(v: usize, k: usize, replace: f64, r: &mut Rng) -> usize {
    if k > 1 && replace > 0.0 && r.random::<f64>() < replace {
        r.random_range(0..k)
    } else {
        v
    }
}

fn one_hot_index(onehot: &[f64]) -> Result<usize> {
    let ones = onehot.iter().filter(|&&v| v == 1.0).count();
    let zeros = onehot.iter().filter(|&&v| v == 0.0).count();
    if onehot.is_empty() || ones != 1 || ones + zeros != onehot.len() {
        return invalid("input is not a one-hot vector");
    }
    Ok(onehot.iter().position(|&v| v == 1.0).unwrap())
}

/// With probability `replace` swaps the category for a uniform draw over all
/// `K` categories.
pub fn multinomial_noising_at(onehot: &[f64], replace: f64, r: &mut Rng) -> Result<Vec<f64>> {
    let idx = one_hot_index(onehot)?;
    if !(0.0..=1.0).contains(&replace) {
        return invalid(format!("replacement probability {replace} outside [0, 1]"));
    }
    let k = onehot.len();
    let new = corrupt_category(idx, k, replace, r);
    Ok((0..k).map(|l| f64::from(l == new)).collect())
}

pub fn multinomial_noising(onehot: &[f64], t: usize, schedule: &Schedule, r: &mut Rng) -> Result<Vec<f64>> {
    schedule.check(t)?;
    multinomial_noising_at(onehot, 1.0 - schedule.alpha_bar(t), r)
}
