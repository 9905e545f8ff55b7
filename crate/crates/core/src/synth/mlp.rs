//! Fully connected network with SiLU hidden activations and a linear output
//! layer, with explicit backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations kept from the forward pass.
pub struct Cache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let limit = (6.0 / (i + o) as f64).sqrt();
                Layer {
                    w: Array2::from_shape_fn((i, o), |_| rng.random_range(-limit..limit)),
                    b: Array1::zeros(o),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].w.nrows()];
        w.extend(self.layers.iter().map(|l| l.w.ncols()));
        w
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w) + &layer.b;
            cache.inputs.push(a);
            a = if k == last { z.clone() } else { z.mapv(silu) };
            cache.pre.push(z);
        }
        (a, cache)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w) + &layer.b;
            a = if k == last { z } else { z.mapv(silu) };
        }
        a
    }

    /// Parameter gradients given `d loss / d output`.
    pub fn backward(&self, cache: &Cache, grad_out: &Array2<f64>) -> Vec<Layer> {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut dz = grad_out.clone();
        for k in (0..self.layers.len()).rev() {
            let gw = cache.inputs[k].t().dot(&dz);
            let gb = dz.sum_axis(Axis(0));
            grads.push(Layer { w: gw, b: gb });
            if k > 0 {
                let da = dz.dot(&self.layers[k].w.t());
                dz = da * cache.pre[k - 1].mapv(silu_grad);
            }
        }
        grads.reverse();
        grads
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn from_flat(widths: &[usize], params: &[f64]) -> Option<Self> {
        let mut pos = 0;
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let (i, o) = (w[0], w[1]);
            let wn = i * o;
            if pos + wn + o > params.len() {
                return None;
            }
            let wm = Array2::from_shape_vec((i, o), params[pos..pos + wn].to_vec()).ok()?;
            pos += wn;
            let b = Array1::from(params[pos..pos + o].to_vec());
            pos += o;
            layers.push(Layer { w: wm, b });
        }
        (pos == params.len()).then_some(Self { layers })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    Momentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64 },
}

/// First and second moment buffers shaped like the parameters.
pub struct Optimizer {
    step: Step,
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Optimizer {
    pub fn new(net: &Mlp, step: Step) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            step,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn apply(&mut self, net: &mut Mlp, grads: &[Layer]) {
        self.t += 1;
        match self.step {
            Step::Momentum { lr, momentum } => {
                for ((p, g), m) in net.layers.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    m.w = &m.w * momentum + &g.w;
                    m.b = &m.b * momentum + &g.b;
                    p.w.scaled_add(-lr, &m.w);
                    p.b.scaled_add(-lr, &m.b);
                }
            }
            Step::Adam { lr, beta1, beta2 } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let eps = 1e-8;
                for (((p, g), m), v) in net
                    .layers
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    m.w = &m.w * beta1 + &(&g.w * (1.0 - beta1));
                    m.b = &m.b * beta1 + &(&g.b * (1.0 - beta1));
                    v.w = &v.w * beta2 + &(g.w.mapv(|x| x * x) * (1.0 - beta2));
                    v.b = &v.b * beta2 + &(g.b.mapv(|x| x * x) * (1.0 - beta2));
                    ndarray::Zip::from(&mut p.w).and(&m.w).and(&v.w).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                    ndarray::Zip::from(&mut p.b).and(&m.b).and(&v.b).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn loss(net: &Mlp, x: &Array2<f64>) -> f64 {
        let out = net.predict(x);
        out.mapv(|v| v * v).sum() * 0.5 + out.sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(12);
        // 1 -> 3 -> 1: ten parameters
        let net = Mlp::new(&[1, 3, 1], &mut r);
        assert_eq!(net.n_params(), 10);
        let x = Array2::from_shape_fn((4, 1), |(i, _)| i as f64 * 0.7 - 1.0);
        let (out, cache) = net.forward(&x);
        let grads = net.backward(&cache, &out.mapv(|v| v + 1.0));
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.w.iter().chain(g.b.iter()).copied().collect::<Vec<_>>())
            .collect();

        let base = net.flatten();
        let widths = net.widths();
        let h = 1e-5;
        for p in 0..base.len() {
            let mut up = base.clone();
            up[p] += h;
            let mut dn = base.clone();
            dn[p] -= h;
            let fd = (loss(&Mlp::from_flat(&widths, &up).unwrap(), &x)
                - loss(&Mlp::from_flat(&widths, &dn).unwrap(), &x))
                / (2.0 * h);
            let rel = (fd - analytic[p]).abs() / fd.abs().max(analytic[p].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {p}: fd {fd} analytic {}", analytic[p]);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let net = Mlp::new(&[3, 5, 2], &mut rng::stream(1));
        let back = Mlp::from_flat(&net.widths(), &net.flatten()).unwrap();
        assert_eq!(net, back);
        assert!(Mlp::from_flat(&net.widths(), &net.flatten()[1..]).is_none());
    }

    #[test]
    fn optimizers_descend() {
        for step in [
            Step::Momentum {
                lr: 0.01,
                momentum: 0.9,
            },
            Step::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
            },
        ] {
            let mut net = Mlp::new(&[1, 8, 1], &mut rng::stream(2));
            let x = Array2::from_shape_fn((16, 1), |(i, _)| i as f64 / 8.0 - 1.0);
            let y = x.mapv(|v| 2.0 * v * v);
            let mse = |n: &Mlp| (n.predict(&x) - &y).mapv(|v| v * v).mean().unwrap();
            let before = mse(&net);
            let mut opt = Optimizer::new(&net, step);
            for _ in 0..300 {
                let (out, cache) = net.forward(&x);
                let g = net.backward(&cache, &((out - &y) * (2.0 / 16.0)));
                opt.apply(&mut net, &g);
            }
            assert!(mse(&net) < 0.2 * before, "{step:?}");
        }
    }
}
