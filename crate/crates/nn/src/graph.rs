//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! Every op pushes a node holding its value, its parents and a closure that
//! maps the output gradient to one gradient per parent. Composite layers with
//! awkward index algebra (multi-head attention, attention pooling, CTC) are
//! single fused nodes with hand-written backward passes.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatView, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Read access to node values during the backward sweep.
pub struct Values<'a>(&'a [Node]);

impl Values<'_> {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.0[v.0].value
    }
}

pub type BackFn = Box<dyn Fn(&Values, &[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Node {
    value: Tensor,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Grads(Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0[v.0].as_deref()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape.len(), 3, "expected batch × time × channel, got {:?}", t.shape);
    (t.shape[0], t.shape[1], t.shape[2])
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Adds a node with a custom backward rule.
    pub fn custom(&mut self, value: Tensor, parents: &[Var], back: BackFn) -> Var {
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            back: Some(back),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let values = Values(&self.nodes);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[i].as_ref() else { continue };
            let parent_grads = back(&values, g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads(grads)
    }

    /// `x[.., din] · w[din, dout]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xt, wt) = (self.value(x), self.value(w));
        assert_eq!(wt.shape.len(), 2);
        let (din, dout) = (wt.shape[0], wt.shape[1]);
        assert_eq!(xt.last_dim(), din, "matmul {:?} × {:?}", xt.shape, wt.shape);
        let m = xt.rows();
        let mut out = vec![0.0; m * dout];
        gemm(m, din, dout, &xt.data, MatView::row_major(din), &wt.data, MatView::row_major(dout), 0.0, &mut out, MatView::row_major(dout));
        let mut shape = xt.shape.clone();
        *shape.last_mut().unwrap() = dout;
        self.custom(
            Tensor::new(&shape, out),
            &[x, w],
            Box::new(move |v, gy| {
                let (xv, wv) = (v.get(x), v.get(w));
                let mut gx = vec![0.0; m * din];
                gemm(m, dout, din, gy, MatView::row_major(dout), &wv.data, MatView::transposed(dout), 0.0, &mut gx, MatView::row_major(din));
                let mut gw = vec![0.0; din * dout];
                gemm(din, m, dout, &xv.data, MatView::transposed(din), gy, MatView::row_major(dout), 0.0, &mut gw, MatView::row_major(dout));
                vec![gx, gw]
            }),
        )
    }

    /// Adds `b[d]` to every row of `x[.., d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let d = self.value(b).len();
        let xt = self.value(x);
        assert_eq!(xt.last_dim(), d);
        let mut out = xt.clone();
        let bd = self.value(b).data.clone();
        for row in out.data.chunks_mut(d) {
            row.iter_mut().zip(&bd).for_each(|(o, b)| *o += b);
        }
        self.custom(
            out,
            &[x, b],
            Box::new(move |_, gy| {
                let mut gb = vec![0.0; d];
                for row in gy.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                vec![gy.to_vec(), gb]
            }),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape, bt.shape, "add shapes");
        let out: Vec<f64> = at.data.iter().zip(&bt.data).map(|(x, y)| x + y).collect();
        let shape = at.shape.clone();
        self.custom(Tensor::new(&shape, out), &[a, b], Box::new(|_, gy| vec![gy.to_vec(), gy.to_vec()]))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: &[f64]) -> Var {
        assert_eq!(xs.len(), weights.len());
        assert!(!xs.is_empty());
        let shape = self.value(xs[0]).shape.clone();
        let mut out = vec![0.0; self.value(xs[0]).len()];
        for (&x, &w) in xs.iter().zip(weights) {
            let xt = self.value(x);
            assert_eq!(xt.shape, shape);
            out.iter_mut().zip(&xt.data).for_each(|(o, v)| *o += w * v);
        }
        let weights = weights.to_vec();
        self.custom(
            Tensor::new(&shape, out),
            xs,
            Box::new(move |_, gy| weights.iter().map(|w| gy.iter().map(|g| g * w).collect()).collect()),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.weighted_sum(&[x], &[s])
    }

    /// Element-wise product with a constant of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.len(), c.len());
        let out: Vec<f64> = xt.data.iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = xt.shape.clone();
        self.custom(Tensor::new(&shape, out), &[x], Box::new(move |_, gy| vec![gy.iter().zip(&c).map(|(g, m)| g * m).collect()]))
    }

    /// Adds a constant that repeats every `c.len()` elements (e.g. a `T × D`
    /// positional table over a batch).
    pub fn add_const_cyclic(&mut self, x: Var, c: &[f64]) -> Var {
        let xt = self.value(x);
        assert_eq!(xt.len() % c.len(), 0);
        let mut out = xt.clone();
        for chunk in out.data.chunks_mut(c.len()) {
            chunk.iter_mut().zip(c).for_each(|(o, v)| *o += v);
        }
        self.custom(out, &[x], Box::new(|_, gy| vec![gy.to_vec()]))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let xt = self.value(x);
        let out: Vec<f64> = xt.data.iter().map(|&v| act.apply(v)).collect();
        let shape = xt.shape.clone();
        self.custom(
            Tensor::new(&shape, out),
            &[x],
            Box::new(move |v, gy| vec![v.get(x).data.iter().zip(gy).map(|(&xv, g)| g * act.grad(xv)).collect()]),
        )
    }

    /// Gated linear unit over the last axis: `a ⊙ σ(b)` with `[a | b] = x`.
    pub fn glu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let d2 = xt.last_dim();
        assert_eq!(d2 % 2, 0, "GLU needs an even last axis");
        let d = d2 / 2;
        let mut out = Vec::with_capacity(xt.len() / 2);
        for row in xt.data.chunks(d2) {
            out.extend((0..d).map(|j| row[j] * sigmoid(row[d + j])));
        }
        let mut shape = xt.shape.clone();
        *shape.last_mut().unwrap() = d;
        self.custom(
            Tensor::new(&shape, out),
            &[x],
            Box::new(move |v, gy| {
                let xv = &v.get(x).data;
                let mut gx = vec![0.0; xv.len()];
                for ((row, grow), g) in xv.chunks(d2).zip(gx.chunks_mut(d2)).zip(gy.chunks(d)) {
                    for j in 0..d {
                        let s = sigmoid(row[d + j]);
                        grow[j] = g[j] * s;
                        grow[d + j] = g[j] * row[j] * s * (1.0 - s);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Mean over the time axis: `[B, T, C] → [B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let (b, t, c) = dims3(self.value(x));
        let xd = &self.value(x).data;
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                let row = &xd[(bi * t + ti) * c..][..c];
                out[bi * c..][..c].iter_mut().zip(row).for_each(|(o, v)| *o += v / t as f64);
            }
        }
        self.custom(
            Tensor::new(&[b, c], out),
            &[x],
            Box::new(move |_, gy| {
                let mut gx = vec![0.0; b * t * c];
                for bi in 0..b {
                    for ti in 0..t {
                        gx[(bi * t + ti) * c..][..c].iter_mut().zip(&gy[bi * c..][..c]).for_each(|(o, g)| *o = g / t as f64);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// `x[B, T, C] ⊙ g[B, C]`, broadcast over time.
    pub fn gate(&mut self, x: Var, g: Var) -> Var {
        let (b, t, c) = dims3(self.value(x));
        assert_eq!(self.value(g).shape, vec![b, c]);
        let (xd, gd) = (&self.value(x).data, &self.value(g).data);
        let mut out = vec![0.0; b * t * c];
        for bi in 0..b {
            for ti in 0..t {
                let o = (bi * t + ti) * c;
                for ci in 0..c {
                    out[o + ci] = xd[o + ci] * gd[bi * c + ci];
                }
            }
        }
        self.custom(
            Tensor::new(&[b, t, c], out),
            &[x, g],
            Box::new(move |v, gy| {
                let (xd, gd) = (&v.get(x).data, &v.get(g).data);
                let mut gx = vec![0.0; b * t * c];
                let mut gg = vec![0.0; b * c];
                for bi in 0..b {
                    for ti in 0..t {
                        let o = (bi * t + ti) * c;
                        for ci in 0..c {
                            gx[o + ci] = gy[o + ci] * gd[bi * c + ci];
                            gg[bi * c + ci] += gy[o + ci] * xd[o + ci];
                        }
                    }
                }
                vec![gx, gg]
            }),
        )
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let rows = self.value(parts[0]).rows();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.value(p).data;
            assert_eq!(pd.len(), rows * w);
            for r in 0..rows {
                out[r * total + off..][..w].copy_from_slice(&pd[r * w..][..w]);
            }
            off += w;
        }
        let mut shape = self.value(parts[0]).shape.clone();
        *shape.last_mut().unwrap() = total;
        self.custom(
            Tensor::new(&shape, out),
            parts,
            Box::new(move |_, gy| {
                let mut off = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut g = vec![0.0; rows * w];
                        for r in 0..rows {
                            g[r * w..][..w].copy_from_slice(&gy[r * total + off..][..w]);
                        }
                        off += w;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let d = xt.last_dim();
        let rows = xt.rows();
        let mut xhat = vec![0.0; xt.len()];
        let mut inv = vec![0.0; rows];
        for (r, row) in xt.data.chunks(d).enumerate() {
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv[r] = is;
            xhat[r * d..][..d].iter_mut().zip(row).for_each(|(h, v)| *h = (v - m) * is);
        }
        let (gm, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, h)| gm[i % d] * h + bt[i % d]).collect();
        let shape = xt.shape.clone();
        self.custom(
            Tensor::new(&shape, out),
            &[x, gamma, beta],
            Box::new(move |v, gy| {
                let gm = &v.get(gamma).data;
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let h = &xhat[r * d..][..d];
                    let g = &gy[r * d..][..d];
                    for j in 0..d {
                        gg[j] += g[j] * h[j];
                        gb[j] += g[j];
                        gh[j] = g[j] * gm[j];
                    }
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv[r] * (gh[j] - mean_gh - h[j] * mean_ghh);
                    }
                }
                vec![gx, gg, gb]
            }),
        )
    }

    /// Batch normalization with batch statistics over every row of `x[.., C]`.
    /// Returns the output together with the batch mean and unbiased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xt = self.value(x);
        let c = xt.last_dim();
        let n = xt.rows();
        let mut mean = vec![0.0; c];
        for row in xt.data.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; c];
        for row in xt.data.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = xt.data.iter().enumerate().map(|(i, v)| (v - mean[i % c]) * inv[i % c]).collect();
        let (gm, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, h)| gm[i % c] * h + bt[i % c]).collect();
        let shape = xt.shape.clone();
        let unbiased: Vec<f64> = var.iter().map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v }).collect();
        let y = self.custom(
            Tensor::new(&shape, out),
            &[x, gamma, beta],
            Box::new(move |v, gy| {
                let gm = &v.get(gamma).data;
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (i, g) in gy.iter().enumerate() {
                    gg[i % c] += g * xhat[i];
                    gb[i % c] += g;
                }
                // per channel: gx = γ·inv/n · (n·g − Σg − x̂·Σ(g·x̂))
                let gx = gy
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let j = i % c;
                        gm[j] * inv[j] / n as f64 * (n as f64 * g - gb[j] - xhat[i] * gg[j])
                    })
                    .collect();
                vec![gx, gg, gb]
            }),
        );
        (y, mean, unbiased)
    }

    /// Batch normalization with frozen statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64], eps: f64) -> Var {
        let xt = self.value(x);
        let c = xt.last_dim();
        assert_eq!(running_mean.len(), c);
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = xt.data.iter().enumerate().map(|(i, v)| (v - running_mean[i % c]) * inv[i % c]).collect();
        let (gm, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, h)| gm[i % c] * h + bt[i % c]).collect();
        let shape = xt.shape.clone();
        self.custom(
            Tensor::new(&shape, out),
            &[x, gamma, beta],
            Box::new(move |v, gy| {
                let gm = &v.get(gamma).data;
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = vec![0.0; gy.len()];
                for (i, g) in gy.iter().enumerate() {
                    let j = i % c;
                    gg[j] += g * xhat[i];
                    gb[j] += g;
                    gx[i] = g * gm[j] * inv[j];
                }
                vec![gx, gg, gb]
            }),
        )
    }

    /// Same-length 1-D convolution over time: `x[B, T, Cin]`, `w[K, Cin, Cout]`,
    /// `b[Cout]`, zero padding `(K−1)/2` on the left and the rest on the right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (bs, t, cin) = dims3(self.value(x));
        let wt = self.value(w);
        assert_eq!(wt.shape.len(), 3);
        let (k, wcin, cout) = (wt.shape[0], wt.shape[1], wt.shape[2]);
        assert_eq!(wcin, cin, "conv input channels");
        let pad = (k - 1) / 2;
        let kc = k * cin;
        let xd = &self.value(x).data;
        // im2col: row (b, t) holds the K·Cin receptive field
        let mut col = vec![0.0; bs * t * kc];
        for bi in 0..bs {
            for ti in 0..t {
                let row = &mut col[(bi * t + ti) * kc..][..kc];
                for j in 0..k {
                    let src = ti as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        row[j * cin..][..cin].copy_from_slice(&xd[(bi * t + src as usize) * cin..][..cin]);
                    }
                }
            }
        }
        let m = bs * t;
        let mut out = vec![0.0; m * cout];
        gemm(m, kc, cout, &col, MatView::row_major(kc), &wt.data, MatView::row_major(cout), 0.0, &mut out, MatView::row_major(cout));
        let y = self.custom(
            Tensor::new(&[bs, t, cout], out),
            &[x, w],
            Box::new(move |v, gy| {
                let wv = v.get(w);
                let mut gcol = vec![0.0; m * kc];
                gemm(m, cout, kc, gy, MatView::row_major(cout), &wv.data, MatView::transposed(cout), 0.0, &mut gcol, MatView::row_major(kc));
                let mut gw = vec![0.0; kc * cout];
                gemm(kc, m, cout, &col, MatView::transposed(kc), gy, MatView::row_major(cout), 0.0, &mut gw, MatView::row_major(cout));
                let mut gx = vec![0.0; bs * t * cin];
                for bi in 0..bs {
                    for ti in 0..t {
                        let row = &gcol[(bi * t + ti) * kc..][..kc];
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                gx[(bi * t + src as usize) * cin..][..cin].iter_mut().zip(&row[j * cin..][..cin]).for_each(|(a, g)| *a += g);
                            }
                        }
                    }
                }
                vec![gx, gw]
            }),
        );
        self.add_bias(y, b)
    }

    /// Depthwise same-length convolution: `x[B, T, C]`, `w[K, C]`, `b[C]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (bs, t, c) = dims3(self.value(x));
        let wt = self.value(w);
        assert_eq!(wt.shape.len(), 2);
        let k = wt.shape[0];
        assert_eq!(wt.shape[1], c);
        let pad = (k - 1) / 2;
        let (xd, wd) = (&self.value(x).data, &wt.data);
        let mut out = vec![0.0; bs * t * c];
        for bi in 0..bs {
            for ti in 0..t {
                let o = (bi * t + ti) * c;
                for j in 0..k {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let s = (bi * t + src as usize) * c;
                    for ci in 0..c {
                        out[o + ci] += wd[j * c + ci] * xd[s + ci];
                    }
                }
            }
        }
        let y = self.custom(
            Tensor::new(&[bs, t, c], out),
            &[x, w],
            Box::new(move |v, gy| {
                let (xd, wd) = (&v.get(x).data, &v.get(w).data);
                let mut gx = vec![0.0; bs * t * c];
                let mut gw = vec![0.0; k * c];
                for bi in 0..bs {
                    for ti in 0..t {
                        let o = (bi * t + ti) * c;
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let s = (bi * t + src as usize) * c;
                            for ci in 0..c {
                                gx[s + ci] += wd[j * c + ci] * gy[o + ci];
                                gw[j * c + ci] += xd[s + ci] * gy[o + ci];
                            }
                        }
                    }
                }
                vec![gx, gw]
            }),
        );
        self.add_bias(y, b)
    }

    /// Scaled dot-product attention over `heads` slices of already projected
    /// `q, k, v[B, T, D]`; returns the concatenated head outputs `[B, T, D]`.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (bs, t, d) = dims3(self.value(q));
        assert_eq!(d % heads, 0, "d_model must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut attn = vec![0.0; bs * heads * t * t];
        let mut out = vec![0.0; bs * t * d];
        let head_view = MatView { offset: 0, rs: d, cs: 1 };
        for bi in 0..bs {
            for h in 0..heads {
                let off = bi * t * d + h * dh;
                let a = &mut attn[(bi * heads + h) * t * t..][..t * t];
                // S = Q Kᵀ
                gemm(t, dh, t, qd, head_view.at(off), kd, MatView { offset: off, rs: 1, cs: d }, 0.0, a, MatView::row_major(t));
                for row in a.chunks_mut(t) {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s * scale - mx).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= sum);
                }
                gemm(t, t, dh, a, MatView::row_major(t), vd, head_view.at(off), 0.0, &mut out, head_view.at(off));
            }
        }
        self.custom(
            Tensor::new(&[bs, t, d], out),
            &[q, k, v],
            Box::new(move |vals, gy| {
                let (qd, kd, vd) = (&vals.get(q).data, &vals.get(k).data, &vals.get(v).data);
                let mut gq = vec![0.0; bs * t * d];
                let mut gk = vec![0.0; bs * t * d];
                let mut gv = vec![0.0; bs * t * d];
                let mut ga = vec![0.0; t * t];
                for bi in 0..bs {
                    for h in 0..heads {
                        let off = bi * t * d + h * dh;
                        let a = &attn[(bi * heads + h) * t * t..][..t * t];
                        // gA = gO Vᵀ ; gV = Aᵀ gO
                        gemm(t, dh, t, gy, head_view.at(off), vd, MatView { offset: off, rs: 1, cs: d }, 0.0, &mut ga, MatView::row_major(t));
                        gemm(t, t, dh, a, MatView::transposed(t), gy, head_view.at(off), 0.0, &mut gv, head_view.at(off));
                        // softmax backward, folded with the 1/√dh scale
                        for (arow, grow) in a.chunks(t).zip(ga.chunks_mut(t)) {
                            let dot: f64 = arow.iter().zip(grow.iter()).map(|(x, y)| x * y).sum();
                            grow.iter_mut().zip(arow).for_each(|(g, p)| *g = p * (*g - dot) * scale);
                        }
                        // gQ = gS K ; gK = gSᵀ Q
                        gemm(t, t, dh, &ga, MatView::row_major(t), kd, head_view.at(off), 0.0, &mut gq, head_view.at(off));
                        gemm(t, t, dh, &ga, MatView::transposed(t), qd, head_view.at(off), 0.0, &mut gk, head_view.at(off));
                    }
                }
                vec![gq, gk, gv]
            }),
        )
    }

    /// Softmax-over-time pooling with a learned query: `α = softmax_t(h_t·q)`,
    /// `z = Σ_t α_t h_t`. Returns `z[B, D]` and `α[B, T]`.
    pub fn attention_pool(&mut self, hv: Var, qv: Var) -> (Var, Vec<f64>) {
        let (bs, t, d) = dims3(self.value(hv));
        assert_eq!(self.value(qv).len(), d);
        let (h, q) = (&self.value(hv).data, &self.value(qv).data);
        let mut alpha = vec![0.0; bs * t];
        let mut z = vec![0.0; bs * d];
        for bi in 0..bs {
            let a = &mut alpha[bi * t..][..t];
            for ti in 0..t {
                a[ti] = h[(bi * t + ti) * d..][..d].iter().zip(q).map(|(x, y)| x * y).sum();
            }
            let mx = a.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let mut sum = 0.0;
            for s in a.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            a.iter_mut().for_each(|s| *s /= sum);
            for ti in 0..t {
                let row = &h[(bi * t + ti) * d..][..d];
                z[bi * d..][..d].iter_mut().zip(row).for_each(|(o, v)| *o += a[ti] * v);
            }
        }
        let saved = alpha.clone();
        let out = self.custom(
            Tensor::new(&[bs, d], z),
            &[hv, qv],
            Box::new(move |vals, gz| {
                let (h, q) = (&vals.get(hv).data, &vals.get(qv).data);
                let mut gh = vec![0.0; bs * t * d];
                let mut gq = vec![0.0; d];
                for bi in 0..bs {
                    let a = &saved[bi * t..][..t];
                    let g = &gz[bi * d..][..d];
                    let galpha: Vec<f64> = (0..t).map(|ti| h[(bi * t + ti) * d..][..d].iter().zip(g).map(|(x, y)| x * y).sum()).collect();
                    let dot: f64 = a.iter().zip(&galpha).map(|(x, y)| x * y).sum();
                    for ti in 0..t {
                        let gs = a[ti] * (galpha[ti] - dot);
                        let row = &h[(bi * t + ti) * d..][..d];
                        let grow = &mut gh[(bi * t + ti) * d..][..d];
                        for j in 0..d {
                            grow[j] = a[ti] * g[j] + gs * q[j];
                            gq[j] += gs * row[j];
                        }
                    }
                }
                vec![gh, gq]
            }),
        );
        (out, alpha)
    }

    /// `−(1/denom) Σ_bc t_bc · log softmax(logits_b)_c` for a target matrix `t`
    /// with arbitrary non-negative rows (smoothed, weighted or mixed labels).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Vec<f64>, denom: f64) -> Var {
        let lt = self.value(logits);
        let c = lt.last_dim();
        assert_eq!(targets.len(), lt.len());
        assert!(denom > 0.0);
        let mut probs = vec![0.0; lt.len()];
        let mut loss = 0.0;
        for (r, row) in lt.data.chunks(c).enumerate() {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                let lp = row[j] - lse;
                probs[r * c + j] = lp.exp();
                loss -= targets[r * c + j] * lp;
            }
        }
        self.custom(
            Tensor::scalar(loss / denom),
            &[logits],
            Box::new(move |_, gy| {
                let g0 = gy[0] / denom;
                let mut gl = vec![0.0; probs.len()];
                for r in 0..probs.len() / c {
                    let mass: f64 = targets[r * c..][..c].iter().sum();
                    for j in 0..c {
                        gl[r * c + j] = g0 * (probs[r * c + j] * mass - targets[r * c + j]);
                    }
                }
                vec![gl]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks every input gradient of `f` against central differences of the
    /// scalar `Σ r ⊙ f(inputs)` for a fixed random projection `r`.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let build = |ins: &[Tensor], r: &Option<Vec<f64>>| -> (Graph, Vec<Var>, Var, usize) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let y = f(&mut g, &vars);
            let n = g.value(y).len();
            let proj = r.clone().unwrap_or_else(|| vec![1.0; n]);
            let yv = g.value(y).data.clone();
            let s: f64 = yv.iter().zip(&proj).map(|(a, b)| a * b).sum();
            let out = g.custom(
                Tensor::scalar(s),
                &[y],
                Box::new(move |_, gy| vec![proj.iter().map(|p| p * gy[0]).collect()]),
            );
            (g, vars, out, n)
        };
        let (_, _, _, n) = build(&inputs, &None);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = Some(r);
        let (g, vars, out, _) = build(&inputs, &r);
        let grads = g.backward(out);
        let h = 1e-6;
        for (i, inp) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).unwrap().to_vec();
            for j in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[i].data[j] += h;
                let mut minus = inputs.clone();
                minus[i].data[j] -= h;
                let fp = build(&plus, &r);
                let fm = build(&minus, &r);
                let num = (fp.0.value(fp.2).item() - fm.0.value(fm.2).item()) / (2.0 * h);
                let a = analytic[j];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-5 || (a - num).abs() < 1e-8, "input {i} elem {j}: {a} vs {num}");
            }
        }
    }

    #[test]
    fn grad_matmul_bias_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![rand_tensor(&[2, 3, 4], &mut rng), rand_tensor(&[4, 5], &mut rng), rand_tensor(&[5], &mut rng)], |g, v| g.linear(v[0], v[1], v[2]));
        check(vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[3, 4], &mut rng)], |g, v| {
            let s = g.add(v[0], v[1]);
            g.weighted_sum(&[s, v[0]], &[0.5, -2.0])
        });
    }

    #[test]
    fn grad_activations_and_glu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for act in [Activation::Gelu, Activation::Silu, Activation::Sigmoid] {
            check(vec![rand_tensor(&[2, 5], &mut rng)], move |g, v| g.activation(v[0], act));
        }
        check(vec![rand_tensor(&[3, 6], &mut rng)], |g, v| g.glu(v[0]));
    }

    #[test]
    fn grad_time_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![rand_tensor(&[2, 4, 3], &mut rng)], |g, v| g.mean_time(v[0]));
        check(vec![rand_tensor(&[2, 4, 3], &mut rng), rand_tensor(&[2, 3], &mut rng)], |g, v| g.gate(v[0], v[1]));
        check(vec![rand_tensor(&[2, 2, 3], &mut rng), rand_tensor(&[2, 2, 1], &mut rng)], |g, v| g.concat_last(&[v[0], v[1]]));
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![rand_tensor(&[2, 3, 5], &mut rng), rand_tensor(&[5], &mut rng), rand_tensor(&[5], &mut rng)];
        check(ins.clone(), |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        check(ins.clone(), |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).0);
        check(ins, |g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0, 0.5], &[1.0, 2.0, 0.5, 1.5, 0.9], 1e-5));
    }

    #[test]
    fn grad_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [1, 3, 4] {
            check(vec![rand_tensor(&[2, 6, 3], &mut rng), rand_tensor(&[k, 3, 2], &mut rng), rand_tensor(&[2], &mut rng)], |g, v| g.conv1d(v[0], v[1], v[2]));
        }
        check(vec![rand_tensor(&[2, 6, 3], &mut rng), rand_tensor(&[5, 3], &mut rng), rand_tensor(&[3], &mut rng)], |g, v| g.depthwise_conv(v[0], v[1], v[2]));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, w) = (rand_tensor(&[1, 7, 2], &mut rng), rand_tensor(&[3, 2, 1], &mut rng));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(Tensor::zeros(&[1])));
        let y = g.conv1d(xv, wv, bv);
        for t in 0..7 {
            let mut want = 0.0;
            for j in 0..3 {
                let s = t as isize + j as isize - 1;
                if (0..7).contains(&s) {
                    for c in 0..2 {
                        want += w.data[j * 2 + c] * x.data[s as usize * 2 + c];
                    }
                }
            }
            assert!((g.value(y).data[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ins = vec![rand_tensor(&[2, 4, 6], &mut rng), rand_tensor(&[2, 4, 6], &mut rng), rand_tensor(&[2, 4, 6], &mut rng)];
        check(ins, |g, v| g.multi_head_attention(v[0], v[1], v[2], 2));
        check(vec![rand_tensor(&[2, 5, 3], &mut rng), rand_tensor(&[3], &mut rng)], |g, v| g.attention_pool(v[0], v[1]).0);
    }

    #[test]
    fn attention_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, t, d, heads) = (2, 3, 4, 2);
        let q = rand_tensor(&[b, t, d], &mut rng);
        let k = rand_tensor(&[b, t, d], &mut rng);
        let v = rand_tensor(&[b, t, d], &mut rng);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let o = g.multi_head_attention(qv, kv, vv, heads);
        let dh = d / heads;
        let at = |x: &Tensor, bi: usize, ti: usize, j: usize| x.data[(bi * t + ti) * d + j];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let s: Vec<f64> = (0..t).map(|j| (0..dh).map(|e| at(&q, bi, i, h * dh + e) * at(&k, bi, j, h * dh + e)).sum::<f64>() / (dh as f64).sqrt()).collect();
                    let z: f64 = s.iter().map(|x| x.exp()).sum();
                    for e in 0..dh {
                        let want: f64 = (0..t).map(|j| s[j].exp() / z * at(&v, bi, j, h * dh + e)).sum();
                        assert!((g.value(o).data[(bi * t + i) * d + h * dh + e] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn grad_soft_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let targets: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        check(vec![rand_tensor(&[3, 4], &mut rng)], move |g, v| g.soft_cross_entropy(v[0], targets.clone(), 3.0));
    }
}
