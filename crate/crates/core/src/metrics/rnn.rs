//! A single-layer GRU with a linear read-out, trained with hand-written
//! backpropagation through time and Adam. Small enough that plain `ndarray`
//! beats a tensor framework for the post-hoc metric networks.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    rows: usize,
    cols: usize,
}

// Parameter blocks in `theta`.
const WZ: usize = 0;
const WR: usize = 1;
const WN: usize = 2;
const UZ: usize = 3;
const UR: usize = 4;
const UN: usize = 5;
const BZ: usize = 6;
const BR: usize = 7;
const BN: usize = 8;
const WO: usize = 9;
const BO: usize = 10;

/// `z = σ(xWz + hUz + bz)`, `r = σ(xWr + hUr + br)`,
/// `ñ = tanh(xWn + (r⊙h)Un + bn)`, `h' = (1 − z)⊙ñ + z⊙h`, `y = h'Wo + bo`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub theta: Vec<f64>,
    blocks: Vec<Block>,
}

pub struct Cache {
    xs: Vec<Array2<f64>>,
    /// `hs[0]` is the zero state; `hs[t + 1]` follows input `t`.
    pub hs: Vec<Array2<f64>>,
    zs: Vec<Array2<f64>>,
    rs: Vec<Array2<f64>>,
    ns: Vec<Array2<f64>>,
}

impl Gru {
    /// Uniform `±1/√hidden` initialisation.
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let shapes = [
            (input, hidden),
            (input, hidden),
            (input, hidden),
            (hidden, hidden),
            (hidden, hidden),
            (hidden, hidden),
            (1, hidden),
            (1, hidden),
            (1, hidden),
            (hidden, output),
            (1, output),
        ];
        let mut blocks = Vec::with_capacity(shapes.len());
        let mut start = 0;
        for (rows, cols) in shapes {
            blocks.push(Block { start, rows, cols });
            start += rows * cols;
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let theta = (0..start).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            input,
            hidden,
            output,
            theta,
            blocks,
        }
    }

    fn view<'a>(&self, theta: &'a [f64], i: usize) -> ArrayView2<'a, f64> {
        let b = self.blocks[i];
        ArrayView2::from_shape((b.rows, b.cols), &theta[b.start..b.start + b.rows * b.cols]).expect("block shape")
    }

    fn view_mut<'a>(&self, theta: &'a mut [f64], i: usize) -> ArrayViewMut2<'a, f64> {
        let b = self.blocks[i];
        ArrayViewMut2::from_shape((b.rows, b.cols), &mut theta[b.start..b.start + b.rows * b.cols])
            .expect("block shape")
    }

    fn p(&self, i: usize) -> ArrayView2<'_, f64> {
        self.view(&self.theta, i)
    }

    /// `xs[t]` is the `[B, input]` slice at step `t`.
    pub fn forward(&self, xs: Vec<Array2<f64>>) -> Cache {
        let batch = xs.first().map_or(0, |x| x.nrows());
        let mut hs = vec![Array2::zeros((batch, self.hidden))];
        let (mut zs, mut rs, mut ns) = (Vec::new(), Vec::new(), Vec::new());
        for x in &xs {
            let h = hs.last().expect("state");
            let z = (x.dot(&self.p(WZ)) + h.dot(&self.p(UZ)) + self.p(BZ)).mapv(sigmoid);
            let r = (x.dot(&self.p(WR)) + h.dot(&self.p(UR)) + self.p(BR)).mapv(sigmoid);
            let n = (x.dot(&self.p(WN)) + (&r * h).dot(&self.p(UN)) + self.p(BN)).mapv(f64::tanh);
            let next = (1.0 - &z) * &n + &z * h;
            zs.push(z);
            rs.push(r);
            ns.push(n);
            hs.push(next);
        }
        Cache { xs, hs, zs, rs, ns }
    }

    /// Read-out `[B, output]` for hidden state `h`.
    pub fn readout(&self, h: &Array2<f64>) -> Array2<f64> {
        h.dot(&self.p(WO)) + self.p(BO)
    }

    /// Gradient of the loss w.r.t. `theta`, given loss gradients on the read-outs
    /// of `hs[t + 1]` (`None` where a step has no read-out).
    pub fn backward(&self, cache: &Cache, d_out: &[Option<Array2<f64>>]) -> Vec<f64> {
        let mut grad = vec![0.0; self.theta.len()];
        let steps = cache.xs.len();
        let batch = cache.hs[0].nrows();
        let mut dh = Array2::<f64>::zeros((batch, self.hidden));
        for t in (0..steps).rev() {
            let h_prev = &cache.hs[t];
            if let Some(dy) = &d_out[t] {
                let h = &cache.hs[t + 1];
                self.view_mut(&mut grad, WO).scaled_add(1.0, &h.t().dot(dy));
                self.view_mut(&mut grad, BO).scaled_add(1.0, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                dh += &dy.dot(&self.p(WO).t());
            }
            let (x, z, r, n) = (&cache.xs[t], &cache.zs[t], &cache.rs[t], &cache.ns[t]);
            let dn = &dh * &(1.0 - z);
            let dz = &dh * &(h_prev - n);
            let mut dh_prev = &dh * z;

            let dan = dn * &(1.0 - &(n * n));
            let rh = r * h_prev;
            self.view_mut(&mut grad, WN).scaled_add(1.0, &x.t().dot(&dan));
            self.view_mut(&mut grad, UN).scaled_add(1.0, &rh.t().dot(&dan));
            self.view_mut(&mut grad, BN).scaled_add(1.0, &dan.sum_axis(Axis(0)).insert_axis(Axis(0)));
            let drh = dan.dot(&self.p(UN).t());
            let dr = &drh * h_prev;
            dh_prev += &(&drh * r);

            let daz = dz * &(z * &(1.0 - z));
            self.view_mut(&mut grad, WZ).scaled_add(1.0, &x.t().dot(&daz));
            self.view_mut(&mut grad, UZ).scaled_add(1.0, &h_prev.t().dot(&daz));
            self.view_mut(&mut grad, BZ).scaled_add(1.0, &daz.sum_axis(Axis(0)).insert_axis(Axis(0)));
            dh_prev += &daz.dot(&self.p(UZ).t());

            let dar = dr * &(r * &(1.0 - r));
            self.view_mut(&mut grad, WR).scaled_add(1.0, &x.t().dot(&dar));
            self.view_mut(&mut grad, UR).scaled_add(1.0, &h_prev.t().dot(&dar));
            self.view_mut(&mut grad, BR).scaled_add(1.0, &dar.sum_axis(Axis(0)).insert_axis(Axis(0)));
            dh_prev += &dar.dot(&self.p(UR).t());

            dh = dh_prev;
        }
        grad
    }
}

pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(size: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Per-step `[B, d]` inputs for `rows` of each `[T, d]` sample.
pub fn batch_steps(samples: &[&Array2<f64>], rows: std::ops::Range<usize>) -> Vec<Array2<f64>> {
    let d = samples[0].ncols();
    rows.map(|t| {
        let mut x = Array2::zeros((samples.len(), d));
        for (b, s) in samples.iter().enumerate() {
            x.row_mut(b).assign(&s.row(t));
        }
        x
    })
    .collect()
}
