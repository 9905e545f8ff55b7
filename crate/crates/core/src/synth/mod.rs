//! Tabular denoising diffusion: Gaussian diffusion over transformed and
//! standardized continuous columns, multinomial diffusion over discrete
//! columns, one joint MLP denoiser.
//!
//! The denoiser sees the noised numeric block, one-hot noised categories
//! and a sinusoidal timestep embedding. It predicts the Gaussian noise and
//! logits of the clean categories.

mod checkpoint;
mod mlp;
mod schedule;

pub use checkpoint::{load_model, read_model, save_model, write_model};
pub use mlp::{Layer, Mlp};
pub use schedule::{
    gaussian_noising, gaussian_noising_at, multinomial_noising, multinomial_noising_at, NoiseSchedule, Schedule,
};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortTable, ColumnKind, Provenance, Schema, Transform};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use mlp::{Optimizer, Step};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub noise_schedule: NoiseSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_layout: Vec<usize>,
    pub learning_rate: f64,
    pub time_embed_dim: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            noise_schedule: NoiseSchedule::Cosine { s: 0.008 },
            epochs: 3000,
            batch_size: 256,
            hidden_layout: vec![256, 256, 256],
            learning_rate: 1e-3,
            time_embed_dim: 16,
            optimizer: OptimizerConfig::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
        }
    }
}

impl DiffusionConfig {
    /// Small settings for single-machine runs.
    pub fn desk() -> Self {
        Self {
            timesteps: 100,
            epochs: 300,
            hidden_layout: vec![128, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return invalid("timesteps must be at least 1");
        }
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.time_embed_dim == 0 || self.time_embed_dim % 2 == 1 {
            return invalid("batch_size must be positive and time_embed_dim positive and even");
        }
        if self.hidden_layout.contains(&0) {
            return invalid("hidden widths must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return invalid("learning_rate must be positive");
        }
        Ok(())
    }

    fn step(&self) -> Step {
        match self.optimizer {
            OptimizerConfig::Momentum { momentum } => Step::Momentum {
                lr: self.learning_rate,
                momentum,
            },
            OptimizerConfig::Adam { beta1, beta2 } => Step::Adam {
                lr: self.learning_rate,
                beta1,
                beta2,
            },
        }
    }
}

/// Encoding of one schema column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnState {
    Numeric {
        transform: Transform,
        mean: f64,
        sd: f64,
        /// Standardized range seen in training.
        lo: f64,
        hi: f64,
        /// Every training value was an integer; samples are rounded.
        integer: bool,
    },
    Categorical {
        levels: usize,
    },
}

/// Margin, in standardized units, allowed outside the training range.
const RANGE_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    pub schema: Schema,
    pub column_state: Vec<ColumnState>,
    pub config: DiffusionConfig,
    pub denoiser: Mlp,
    pub train_loss_trace: Vec<f64>,
}

struct Layout {
    numeric: Vec<usize>,
    categorical: Vec<(usize, usize)>,
    n_cat_dims: usize,
    /// Standardized training range of each numeric column.
    ranges: Vec<(f64, f64)>,
}

impl Layout {
    fn new(states: &[ColumnState]) -> Self {
        let mut numeric = Vec::new();
        let mut categorical = Vec::new();
        let mut ranges = Vec::new();
        for (j, s) in states.iter().enumerate() {
            match s {
                ColumnState::Numeric { lo, hi, .. } => {
                    numeric.push(j);
                    ranges.push((*lo, *hi));
                }
                ColumnState::Categorical { levels } => categorical.push((j, *levels)),
            }
        }
        let n_cat_dims = categorical.iter().map(|c| c.1).sum();
        Self {
            numeric,
            categorical,
            n_cat_dims,
            ranges,
        }
    }

    fn input_dim(&self, embed: usize) -> usize {
        self.numeric.len() + self.n_cat_dims + embed
    }

    fn output_dim(&self) -> usize {
        self.numeric.len() + self.n_cat_dims
    }
}

fn fit_states(table: &CohortTable) -> Result<Vec<ColumnState>> {
    table
        .schema()
        .columns
        .iter()
        .enumerate()
        .map(|(j, spec)| match spec.kind {
            ColumnKind::Continuous => {
                let latent: Vec<f64> = table
                    .column(j)
                    .iter()
                    .map(|&v| spec.transform.forward(v))
                    .collect::<Result<_>>()?;
                let mean = crate::stats::mean(&latent);
                let sd = crate::stats::sample_sd(&latent);
                let sd = if sd.is_finite() && sd > 0.0 { sd } else { 1.0 };
                let (lo, hi) = latent
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                Ok(ColumnState::Numeric {
                    transform: spec.transform,
                    mean,
                    sd,
                    lo: (lo - mean) / sd,
                    hi: (hi - mean) / sd,
                    integer: table.column(j).iter().all(|v| v.fract() == 0.0),
                })
            }
            _ => Ok(ColumnState::Categorical {
                levels: spec.levels().unwrap_or(2),
            }),
        })
        .collect()
}

/// Sinusoidal embedding of a timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

struct Encoded {
    numeric: Array2<f64>,
    categories: Vec<Vec<usize>>,
}

fn encode_table(table: &CohortTable, states: &[ColumnState], layout: &Layout) -> Result<Encoded> {
    let n = table.n_rows();
    let mut numeric = Array2::zeros((n, layout.numeric.len()));
    for (c, &j) in layout.numeric.iter().enumerate() {
        let ColumnState::Numeric {
            transform, mean, sd, ..
        } = states[j]
        else {
            unreachable!()
        };
        for i in 0..n {
            numeric[(i, c)] = (transform.forward(table.value(i, j))? - mean) / sd;
        }
    }
    let categories = layout
        .categorical
        .iter()
        .map(|&(j, _)| table.column(j).iter().map(|&v| v as usize).collect())
        .collect();
    Ok(Encoded { numeric, categories })
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Assembles the denoiser input for a batch.
fn network_input(
    xt_num: &Array2<f64>,
    xt_cat: &[Vec<usize>],
    t: &[usize],
    layout: &Layout,
    embed: usize,
) -> Array2<f64> {
    let b = t.len();
    let d_num = layout.numeric.len();
    let mut x = Array2::zeros((b, layout.input_dim(embed)));
    x.slice_mut(s![.., ..d_num]).assign(xt_num);
    let mut off = d_num;
    for (c, &(_, k)) in layout.categorical.iter().enumerate() {
        for i in 0..b {
            x[(i, off + xt_cat[c][i])] = 1.0;
        }
        off += k;
    }
    for i in 0..b {
        for (e, v) in time_embedding(t[i], embed).into_iter().enumerate() {
            x[(i, off + e)] = v;
        }
    }
    x
}

/// Loss and its gradient with respect to the network output.
fn loss_and_grad(out: &Array2<f64>, eps: &Array2<f64>, x0_cat: &[Vec<usize>], layout: &Layout) -> (f64, Array2<f64>) {
    let b = out.nrows();
    let d_num = layout.numeric.len();
    let mut grad = Array2::zeros(out.raw_dim());
    let mut mse = 0.0;
    if d_num > 0 {
        let scale = 1.0 / (b * d_num) as f64;
        for i in 0..b {
            for c in 0..d_num {
                let diff = out[(i, c)] - eps[(i, c)];
                mse += diff * diff * scale;
                grad[(i, c)] = 2.0 * diff * scale;
            }
        }
    }
    let mut ce = 0.0;
    let n_cat = layout.categorical.len();
    if n_cat > 0 {
        let scale = 1.0 / (b * n_cat) as f64;
        let mut off = d_num;
        for (c, &(_, k)) in layout.categorical.iter().enumerate() {
            for i in 0..b {
                let logits: Vec<f64> = (0..k).map(|l| out[(i, off + l)]).collect();
                let p = softmax_row(&logits);
                let target = x0_cat[c][i];
                ce -= p[target].max(1e-300).ln() * scale;
                for l in 0..k {
                    grad[(i, off + l)] = (p[l] - f64::from(l == target)) * scale;
                }
            }
            off += k;
        }
    }
    (mse + ce, grad)
}

/// Trains the joint denoiser on a complete table.
pub fn fit_diffusion(table: &CohortTable, config: &DiffusionConfig, seed: u64) -> Result<GenerativeModel> {
    config.validate()?;
    if table.has_missing() {
        return invalid("diffusion training needs a table without missing cells");
    }
    let n = table.n_rows();
    if n < config.batch_size {
        return invalid(format!(
            "table has {n} rows, fewer than batch_size {}",
            config.batch_size
        ));
    }
    let schedule = Schedule::new(config.noise_schedule, config.timesteps)?;
    let states = fit_states(table)?;
    let layout = Layout::new(&states);
    let data = encode_table(table, &states, &layout)?;

    let mut r = rng::stream(rng::derive_seed_str(seed, "diffusion-train"));
    let mut widths = vec![layout.input_dim(config.time_embed_dim)];
    widths.extend(&config.hidden_layout);
    widths.push(layout.output_dim());
    let mut net = Mlp::new(&widths, &mut r);
    let mut opt = Optimizer::new(&net, config.step());
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let d_num = layout.numeric.len();

    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let t: Vec<usize> = (0..b).map(|_| r.random_range(1..=config.timesteps)).collect();
            let eps = Array2::from_shape_fn((b, d_num), |_| StandardNormal.sample(&mut r));
            let mut xt_num = Array2::zeros((b, d_num));
            for (i, &row) in chunk.iter().enumerate() {
                let ab = schedule.alpha_bar(t[i]);
                for c in 0..d_num {
                    xt_num[(i, c)] = ab.sqrt() * data.numeric[(row, c)] + (1.0 - ab).sqrt() * eps[(i, c)];
                }
            }
            let x0_cat: Vec<Vec<usize>> = data
                .categories
                .iter()
                .map(|col| chunk.iter().map(|&i| col[i]).collect())
                .collect();
            let xt_cat: Vec<Vec<usize>> = layout
                .categorical
                .iter()
                .zip(&x0_cat)
                .map(|(&(_, k), col)| {
                    col.iter()
                        .zip(&t)
                        .map(|(&v, &ti)| schedule::corrupt_category(v, k, 1.0 - schedule.alpha_bar(ti), &mut r))
                        .collect()
                })
                .collect();
            let input = network_input(&xt_num, &xt_cat, &t, &layout, config.time_embed_dim);
            let (out, cache) = net.forward(&input);
            let (loss, grad) = loss_and_grad(&out, &eps, &x0_cat, &layout);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let grads = net.backward(&cache, &grad);
            opt.apply(&mut net, &grads);
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        trace.push(epoch_loss);
    }
    Ok(GenerativeModel {
        schema: table.schema().clone(),
        column_state: states,
        config: config.clone(),
        denoiser: net,
        train_loss_trace: trace,
    })
}

/// Rows per sampling shard; fixed so output does not depend on thread count.
const SHARD: usize = 512;

impl GenerativeModel {
    fn layout(&self) -> Layout {
        Layout::new(&self.column_state)
    }

    /// Reverse process for one shard of `b` rows.
    fn sample_shard(&self, b: usize, r: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let layout = self.layout();
        let schedule = Schedule::new(self.config.noise_schedule, self.config.timesteps)?;
        let d_num = layout.numeric.len();
        let mut x_num = Array2::from_shape_fn((b, d_num), |_| StandardNormal.sample(r));
        let mut x_cat: Vec<Vec<usize>> = layout
            .categorical
            .iter()
            .map(|&(_, k)| (0..b).map(|_| r.random_range(0..k)).collect())
            .collect();
        for t in (1..=self.config.timesteps).rev() {
            let ts = vec![t; b];
            let input = network_input(&x_num, &x_cat, &ts, &layout, self.config.time_embed_dim);
            let out = self.denoiser.predict(&input);
            let (alpha, ab, ab_prev) = (schedule.alpha(t), schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
            let beta = 1.0 - alpha;
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for i in 0..b {
                for c in 0..d_num {
                    // posterior mean through the clipped clean-data estimate
                    let xt = x_num[(i, c)];
                    let (lo, hi) = layout.ranges[c];
                    let x0 = ((xt - (1.0 - ab).sqrt() * out[(i, c)]) / ab.sqrt())
                        .clamp(lo - RANGE_MARGIN, hi + RANGE_MARGIN);
                    let mean = c0 * x0 + ct * xt;
                    x_num[(i, c)] = if t > 1 {
                        mean + sigma * {
                            let z: f64 = StandardNormal.sample(r);
                            z
                        }
                    } else {
                        mean
                    };
                }
            }
            let mut off = d_num;
            for (c, &(_, k)) in layout.categorical.iter().enumerate() {
                for i in 0..b {
                    let logits: Vec<f64> = (0..k).map(|l| out[(i, off + l)]).collect();
                    let p0 = softmax_row(&logits);
                    let cur = x_cat[c][i];
                    let post: Vec<f64> = (0..k)
                        .map(|l| {
                            let fwd = alpha * f64::from(l == cur) + (1.0 - alpha) / k as f64;
                            let prior = ab_prev * p0[l] + (1.0 - ab_prev) / k as f64;
                            fwd * prior
                        })
                        .collect();
                    x_cat[c][i] = draw(&post, r);
                }
                off += k;
            }
        }

        let mut cols = vec![Vec::with_capacity(b); self.column_state.len()];
        for (c, &j) in layout.numeric.iter().enumerate() {
            let ColumnState::Numeric {
                transform,
                mean,
                sd,
                lo,
                hi,
                integer,
            } = self.column_state[j]
            else {
                unreachable!()
            };
            for i in 0..b {
                let z = x_num[(i, c)].clamp(lo - RANGE_MARGIN, hi + RANGE_MARGIN);
                let mut v = transform.inverse(z * sd + mean)?;
                if transform == Transform::Log1p {
                    v = v.max(0.0);
                }
                if integer {
                    v = v.round();
                }
                cols[j].push(v);
            }
        }
        for (c, &(j, _)) in layout.categorical.iter().enumerate() {
            cols[j] = x_cat[c].iter().map(|&v| v as f64).collect();
        }
        Ok(cols)
    }
}

fn draw(weights: &[f64], r: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (l, w) in weights.iter().enumerate() {
        if u < *w {
            return l;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Draws `n` synthetic rows. Shards of fixed size run in parallel, each on
/// its own substream, and are concatenated in shard order.
pub fn sample_twins(model: &GenerativeModel, n: usize, seed: u64) -> Result<CohortTable> {
    if n == 0 {
        return Ok(CohortTable::empty(model.schema.clone(), Provenance::Synthetic));
    }
    let base = rng::derive_seed_str(seed, "diffusion-sample");
    let shards: Vec<usize> = (0..n.div_ceil(SHARD)).collect();
    let parts: Vec<Vec<Vec<f64>>> = shards
        .par_iter()
        .map(|&s| {
            let b = SHARD.min(n - s * SHARD);
            model.sample_shard(b, &mut rng::substream(base, s as u64))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::with_capacity(n); model.column_state.len()];
    for part in parts {
        for (c, p) in cols.iter_mut().zip(part) {
            c.extend(p);
        }
    }
    CohortTable::new(model.schema.clone(), cols, Provenance::Synthetic)
}

/// Draws until each treatment arm has `per_arm` rows, keeping the first
/// `per_arm` of each arm in draw order (treated rows first).
pub fn sample_balanced(model: &GenerativeModel, per_arm: usize, seed: u64) -> Result<CohortTable> {
    let d = model.schema.treatment_index();
    let mut treated = Vec::new();
    let mut control = Vec::new();
    let mut round = 0u64;
    let mut pool: Option<CohortTable> = None;
    while treated.len() < per_arm || control.len() < per_arm {
        if round >= 64 {
            return invalid("balanced sampling: one arm is too rare in the generator");
        }
        let batch = sample_twins(model, (2 * per_arm).max(SHARD), rng::derive_seed(seed, round))?;
        let offset = pool.as_ref().map_or(0, |p| p.n_rows());
        for i in 0..batch.n_rows() {
            let arm = if batch.value(i, d) == 1.0 {
                &mut treated
            } else {
                &mut control
            };
            if arm.len() < per_arm {
                arm.push(offset + i);
            }
        }
        pool = Some(match pool {
            None => batch,
            Some(p) => p.concat(&batch)?,
        });
        round += 1;
    }
    let rows: Vec<usize> = treated.into_iter().chain(control).collect();
    Ok(pool.expect("at least one round").select_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{ColumnRole, ColumnSpec};

    fn small_config(epochs: usize) -> DiffusionConfig {
        DiffusionConfig {
            timesteps: 40,
            epochs,
            batch_size: 128,
            hidden_layout: vec![64, 64],
            learning_rate: 2e-3,
            ..DiffusionConfig::default()
        }
    }

    fn mixture(n: usize, seed: u64) -> CohortTable {
        let schema = Schema::new(vec![
            ColumnSpec::binary("d", ColumnRole::Treatment),
            ColumnSpec::categorical(
                "regime",
                ColumnRole::Cluster,
                &["Continental", "Eastern", "Nordic", "Southern"],
            ),
            ColumnSpec::continuous("x", ColumnRole::Covariate),
        ])
        .unwrap();
        let mut r = rng::stream(seed);
        let mut cols = vec![Vec::new(); 3];
        for _ in 0..n {
            let mode = r.random_range(0..2usize);
            cols[0].push(mode as f64);
            cols[1].push(r.random_range(0..4usize) as f64);
            let z: f64 = StandardNormal.sample(&mut r);
            cols[2].push(if mode == 1 { 3.0 } else { -3.0 } + 0.5 * z);
        }
        CohortTable::new(schema, cols, Provenance::Simulated).unwrap()
    }

    #[test]
    fn rejects_bad_config() {
        let t = mixture(200, 1);
        assert!(fit_diffusion(
            &t,
            &DiffusionConfig {
                epochs: 0,
                ..small_config(1)
            },
            0
        )
        .is_err());
        assert!(fit_diffusion(
            &t,
            &DiffusionConfig {
                batch_size: 500,
                ..small_config(1)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn point_mass_is_reproduced() {
        let mut t = mixture(256, 2);
        for i in 0..t.n_rows() {
            t.set(i, 0, 1.0);
            t.set(i, 1, 2.0);
            t.set(i, 2, 1.5);
        }
        let model = fit_diffusion(&t, &small_config(1500), 3).unwrap();
        let s = sample_twins(&model, 1000, 4).unwrap();
        let dev = s.column(2).iter().map(|v| (v - 1.5).abs()).fold(0.0, f64::max);
        assert!(dev < 0.1, "max deviation {dev}");
        assert!(s.column(1).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn learns_bimodal_marginal_and_support() {
        let t = mixture(1000, 5);
        let model = fit_diffusion(&t, &small_config(80), 6).unwrap();
        let trace = &model.train_loss_trace;
        assert_eq!(trace.len(), 80);
        assert!(trace[trace.len() - 1] < trace[0]);
        let s = sample_twins(&model, 2000, 7).unwrap();
        assert_eq!(s.schema(), t.schema());
        assert_eq!(s.provenance(), Provenance::Synthetic);
        let x = s.column(2);
        let share = |c: f64| x.iter().filter(|v| (*v - c).abs() <= 0.5).count() as f64 / x.len() as f64;
        assert!(
            share(-3.0) >= 0.25 && share(3.0) >= 0.25,
            "{} {}",
            share(-3.0),
            share(3.0)
        );
        assert!(s.column(1).iter().all(|&v| (0.0..4.0).contains(&v) && v.fract() == 0.0));
        assert_eq!(s, sample_twins(&model, 2000, 7).unwrap());
        assert_eq!(sample_twins(&model, 0, 7).unwrap().n_rows(), 0);

        let bal = sample_balanced(&model, 300, 8).unwrap();
        let treated = bal.treatment().iter().filter(|&&d| d == 1.0).count();
        assert_eq!((bal.n_rows(), treated), (600, 300));
    }
}
