//! Multi-scale convolutional front-end, Conformer encoder, attention pooling,
//! per-task heads and an optional CTC head.

use std::collections::BTreeMap;

use eegphon_core::{Error, Result, Task};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Activation, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub frontend_channels: usize,
    pub frontend_kernels: Vec<usize>,
    pub conv_kernel: usize,
    pub se_reduction: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
    pub drop_path_max: f64,
    pub head_hidden: usize,
    pub tasks: Vec<Task>,
    pub ctc_enabled: bool,
    pub vocab: usize,
    pub bn_momentum: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            n_blocks: 4,
            n_heads: 8,
            frontend_channels: 64,
            frontend_kernels: vec![3, 7, 15],
            conv_kernel: 15,
            se_reduction: 4,
            ffn_expansion: 4,
            dropout: 0.2,
            drop_path_max: 0.05,
            head_hidden: 128,
            tasks: Task::ARTICULATORY.to_vec(),
            ctc_enabled: false,
            vocab: 11,
            bn_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and quick runs.
    pub fn tiny(tasks: Vec<Task>) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_blocks: 1,
            n_heads: 2,
            frontend_channels: 8,
            head_hidden: 16,
            tasks,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.se_reduction == 0 || self.d_model % self.se_reduction != 0 {
            return bad(format!("d_model {} must be divisible by se_reduction {}", self.d_model, self.se_reduction));
        }
        if self.frontend_kernels.is_empty() || self.frontend_kernels.contains(&0) || self.conv_kernel == 0 {
            return bad("kernel sizes must be positive".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task head is required".into());
        }
        let mut t = self.tasks.clone();
        t.sort();
        t.dedup();
        if t.len() != self.tasks.len() {
            return bad("duplicate task heads".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.drop_path_max) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if self.frontend_channels == 0 || self.head_hidden == 0 || self.ffn_expansion == 0 || self.vocab == 0 {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Stochastic-depth rate of block `i`: linear from 0 to `drop_path_max`.
    pub fn drop_path_rate(&self, i: usize) -> f64 {
        if self.n_blocks <= 1 {
            0.0
        } else {
            self.drop_path_max * i as f64 / (self.n_blocks - 1) as f64
        }
    }

    pub fn max_kernel(&self) -> usize {
        self.frontend_kernels.iter().copied().max().unwrap_or(1)
    }
}

/// Train mode draws dropout and stochastic-depth masks from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    norm: Norm,
    state: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    ln: Norm,
    up: Lin,
    down: Lin,
}

#[derive(Debug, Clone)]
struct Block {
    ffn1: Ffn,
    attn_ln: Norm,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    conv_ln: Norm,
    pw1: Lin,
    dw: Lin,
    conv_bn: Bn,
    pw2: Lin,
    ffn2: Ffn,
    out_ln: Norm,
}

#[derive(Debug, Clone)]
struct Head {
    ln: Norm,
    fc1: Lin,
    fc2: Lin,
    fc3: Lin,
}

#[derive(Debug, Clone)]
struct Layers {
    branches: Vec<(Lin, Bn)>,
    proj: Lin,
    se1: Lin,
    se2: Lin,
    blocks: Vec<Block>,
    query: ParamId,
    heads: BTreeMap<Task, Head>,
    ctc: Option<(Norm, Lin)>,
}

/// Result of one forward pass.
pub struct ForwardOutput {
    pub logits: BTreeMap<Task, Var>,
    /// `batch × time × (vocab + 1)` frame logits, blank at index 0.
    pub ctc: Option<Var>,
    pub pooled: Var,
    /// Attention-pooling weights, `batch × time`.
    pub attention: Vec<f64>,
    /// Batch mean and unbiased variance of every batch-norm layer (train mode).
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub n_features: usize,
    pub params: ParamStore,
    pub bn: Vec<BnState>,
    layers: Layers,
}

fn lin<R: Rng>(p: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Lin {
    Lin {
        w: p.add_uniform(format!("{name}.weight"), &[din, dout], din, rng),
        b: p.add_const(format!("{name}.bias"), &[dout], 0.0),
    }
}

fn norm(p: &mut ParamStore, name: &str, d: usize) -> Norm {
    Norm {
        gamma: p.add_const(format!("{name}.gamma"), &[d], 1.0),
        beta: p.add_const(format!("{name}.beta"), &[d], 0.0),
    }
}

/// Fixed sinusoidal table `T × D`: sin on even, cos on odd columns.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

impl Model {
    pub fn new(cfg: ModelConfig, n_features: usize, seed: u64) -> Result<Model> {
        cfg.validate()?;
        if n_features == 0 {
            return Err(Error::invalid("model needs at least one input feature"));
        }
        let mut rng = eegphon_core::rng::stream(seed, &[0x1417]);
        let mut p = ParamStore::new();
        let mut bn = Vec::new();
        let mut new_bn = |p: &mut ParamStore, name: &str, c: usize| {
            bn.push(BnState { mean: vec![0.0; c], var: vec![1.0; c] });
            Bn { norm: norm(p, name, c), state: bn.len() - 1 }
        };
        let d = cfg.d_model;
        let fc = cfg.frontend_channels;
        let mut branches = Vec::new();
        for (i, &k) in cfg.frontend_kernels.iter().enumerate() {
            let name = format!("frontend.branch{i}");
            let conv = Lin {
                w: p.add_uniform(format!("{name}.conv.weight"), &[k, n_features, fc], k * n_features, &mut rng),
                b: p.add_const(format!("{name}.conv.bias"), &[fc], 0.0),
            };
            branches.push((conv, new_bn(&mut p, &format!("{name}.bn"), fc)));
        }
        let proj = lin(&mut p, "frontend.proj", fc * cfg.frontend_kernels.len(), d, &mut rng);
        let se1 = lin(&mut p, "frontend.se.fc1", d, d / cfg.se_reduction, &mut rng);
        let se2 = lin(&mut p, "frontend.se.fc2", d / cfg.se_reduction, d, &mut rng);
        let ffn = |p: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| Ffn {
            ln: norm(p, &format!("{name}.ln"), d),
            up: lin(p, &format!("{name}.up"), d, cfg.ffn_expansion * d, rng),
            down: lin(p, &format!("{name}.down"), cfg.ffn_expansion * d, d, rng),
        };
        let mut blocks = Vec::new();
        for i in 0..cfg.n_blocks {
            let n = format!("block{i}");
            let ffn1 = ffn(&mut p, &format!("{n}.ffn1"), &mut rng);
            let attn_ln = norm(&mut p, &format!("{n}.attn.ln"), d);
            let q = lin(&mut p, &format!("{n}.attn.q"), d, d, &mut rng);
            let k = lin(&mut p, &format!("{n}.attn.k"), d, d, &mut rng);
            let v = lin(&mut p, &format!("{n}.attn.v"), d, d, &mut rng);
            let o = lin(&mut p, &format!("{n}.attn.out"), d, d, &mut rng);
            let conv_ln = norm(&mut p, &format!("{n}.conv.ln"), d);
            let pw1 = lin(&mut p, &format!("{n}.conv.pw1"), d, 2 * d, &mut rng);
            let dw = Lin {
                w: p.add_uniform(format!("{n}.conv.dw.weight"), &[cfg.conv_kernel, d], cfg.conv_kernel, &mut rng),
                b: p.add_const(format!("{n}.conv.dw.bias"), &[d], 0.0),
            };
            let conv_bn = new_bn(&mut p, &format!("{n}.conv.bn"), d);
            let pw2 = lin(&mut p, &format!("{n}.conv.pw2"), d, d, &mut rng);
            let ffn2 = ffn(&mut p, &format!("{n}.ffn2"), &mut rng);
            let out_ln = norm(&mut p, &format!("{n}.out_ln"), d);
            blocks.push(Block {
                ffn1,
                attn_ln,
                q,
                k,
                v,
                o,
                conv_ln,
                pw1,
                dw,
                conv_bn,
                pw2,
                ffn2,
                out_ln,
            });
        }
        let query = p.add_uniform("pool.query", &[d], d, &mut rng);
        let mut heads = BTreeMap::new();
        for &task in &cfg.tasks {
            let n = format!("head.{task}");
            heads.insert(
                task,
                Head {
                    ln: norm(&mut p, &format!("{n}.ln"), d),
                    fc1: lin(&mut p, &format!("{n}.fc1"), d, cfg.head_hidden, &mut rng),
                    fc2: lin(&mut p, &format!("{n}.fc2"), cfg.head_hidden, cfg.head_hidden, &mut rng),
                    fc3: lin(&mut p, &format!("{n}.fc3"), cfg.head_hidden, task.n_classes(), &mut rng),
                },
            );
        }
        let ctc = cfg
            .ctc_enabled
            .then(|| (norm(&mut p, "ctc.ln", d), lin(&mut p, "ctc.proj", d, cfg.vocab + 1, &mut rng)));
        Ok(Model {
            cfg,
            n_features,
            params: p,
            bn,
            layers: Layers {
                branches,
                proj,
                se1,
                se2,
                blocks,
                query,
                heads,
                ctc,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Lin) -> Var {
        let (w, b) = (self.p(g, l.w), self.p(g, l.b));
        g.linear(x, w, b)
    }

    fn ln(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let (gm, bt) = (self.p(g, n.gamma), self.p(g, n.beta));
        g.layer_norm(x, gm, bt, self.cfg.norm_eps)
    }

    fn bn(&self, g: &mut Graph, x: Var, b: Bn, mode: &Mode, stats: &mut Vec<(Vec<f64>, Vec<f64>)>) -> Var {
        let (gm, bt) = (self.p(g, b.norm.gamma), self.p(g, b.norm.beta));
        if mode.is_train() {
            let (y, m, v) = g.batch_norm_train(x, gm, bt, self.cfg.norm_eps);
            debug_assert_eq!(stats.len(), b.state);
            stats.push((m, v));
            y
        } else {
            let s = &self.bn[b.state];
            g.batch_norm_eval(x, gm, bt, &s.mean, &s.var, self.cfg.norm_eps)
        }
    }

    fn dropout(g: &mut Graph, x: Var, p: f64, mode: &mut Mode) -> Var {
        let Mode::Train(rng) = mode else { return x };
        if p <= 0.0 {
            return x;
        }
        let n = g.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        g.mul_const(x, mask)
    }

    /// Zeroes whole samples of a residual branch with probability `p`, rescaling survivors.
    fn drop_path(g: &mut Graph, x: Var, p: f64, mode: &mut Mode) -> Var {
        let Mode::Train(rng) = mode else { return x };
        if p <= 0.0 {
            return x;
        }
        let t = g.value(x);
        let (b, per) = (t.shape[0], t.len() / t.shape[0]);
        let mut mask = Vec::with_capacity(t.len());
        for _ in 0..b {
            let m = if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) };
            mask.extend(std::iter::repeat_n(m, per));
        }
        g.mul_const(x, mask)
    }

    fn ffn(&self, g: &mut Graph, x: Var, f: Ffn, mode: &mut Mode) -> Var {
        let h = self.ln(g, x, f.ln);
        let h = self.linear(g, h, f.up);
        let h = g.activation(h, Activation::Gelu);
        let h = Self::dropout(g, h, self.cfg.dropout, mode);
        let h = self.linear(g, h, f.down);
        Self::dropout(g, h, self.cfg.dropout, mode)
    }

    fn residual(&self, g: &mut Graph, x: Var, branch: Var, weight: f64, rate: f64, mode: &mut Mode) -> Var {
        let b = Self::drop_path(g, branch, rate, mode);
        let b = if weight == 1.0 { b } else { g.scale(b, weight) };
        g.add(x, b)
    }

    /// Concatenated outputs of the parallel convolution branches,
    /// `B × T × (branches · frontend_channels)`. `x` is `B × T × F`.
    pub fn branch_concat(&self, g: &mut Graph, x: Var, mode: &mut Mode, stats: &mut Vec<(Vec<f64>, Vec<f64>)>) -> Result<Var> {
        let shape = g.value(x).shape.clone();
        if shape.len() != 3 || shape[2] != self.n_features {
            return Err(Error::Shape(format!("input {:?}, expected batch × time × {}", shape, self.n_features)));
        }
        if shape[1] < self.cfg.max_kernel() {
            return Err(Error::invalid(format!(
                "time length {} is shorter than the largest front-end kernel {}",
                shape[1],
                self.cfg.max_kernel()
            )));
        }
        let mut outs = Vec::new();
        for &(conv, bn) in &self.layers.branches {
            let (w, b) = (self.p(g, conv.w), self.p(g, conv.b));
            let h = g.conv1d(x, w, b);
            let h = self.bn(g, h, bn, mode, stats);
            let h = g.activation(h, Activation::Gelu);
            outs.push(Self::dropout(g, h, self.cfg.dropout, mode));
        }
        Ok(g.concat_last(&outs))
    }

    /// Front-end only: branches, projection and SE gate.
    pub fn frontend(&self, g: &mut Graph, x: Var, mode: &mut Mode, stats: &mut Vec<(Vec<f64>, Vec<f64>)>) -> Result<Var> {
        let cat = self.branch_concat(g, x, mode, stats)?;
        let h = self.linear(g, cat, self.layers.proj);
        Ok(self.se(g, h))
    }

    /// Squeeze-and-excitation gate over channels.
    pub fn se(&self, g: &mut Graph, h: Var) -> Var {
        let s = g.mean_time(h);
        let s = self.linear(g, s, self.layers.se1);
        let s = g.activation(s, Activation::Gelu);
        let s = self.linear(g, s, self.layers.se2);
        let s = g.activation(s, Activation::Sigmoid);
        g.gate(h, s)
    }

    /// Conformer block `i`: half FFN, attention, convolution module, half FFN, LayerNorm.
    pub fn block(&self, g: &mut Graph, x: Var, i: usize, mode: &mut Mode, stats: &mut Vec<(Vec<f64>, Vec<f64>)>) -> Var {
        let b = self.layers.blocks[i].clone();
        let rate = self.cfg.drop_path_rate(i);
        let f1 = self.ffn(g, x, b.ffn1, mode);
        let x = self.residual(g, x, f1, 0.5, rate, mode);

        let h = self.ln(g, x, b.attn_ln);
        let q = self.linear(g, h, b.q);
        let k = self.linear(g, h, b.k);
        let v = self.linear(g, h, b.v);
        let a = g.multi_head_attention(q, k, v, self.cfg.n_heads);
        let a = self.linear(g, a, b.o);
        let a = Self::dropout(g, a, self.cfg.dropout, mode);
        let x = self.residual(g, x, a, 1.0, rate, mode);

        let h = self.ln(g, x, b.conv_ln);
        let h = self.linear(g, h, b.pw1);
        let h = g.glu(h);
        let (w, bias) = (self.p(g, b.dw.w), self.p(g, b.dw.b));
        let h = g.depthwise_conv(h, w, bias);
        let h = self.bn(g, h, b.conv_bn, mode, stats);
        let h = g.activation(h, Activation::Silu);
        let h = self.linear(g, h, b.pw2);
        let h = Self::dropout(g, h, self.cfg.dropout, mode);
        let x = self.residual(g, x, h, 1.0, rate, mode);

        let f2 = self.ffn(g, x, b.ffn2, mode);
        let x = self.residual(g, x, f2, 0.5, rate, mode);
        self.ln(g, x, b.out_ln)
    }

    /// Encoder output `B × T × d_model` (front-end, positions, Conformer blocks).
    pub fn encode(&self, g: &mut Graph, x: Var, mode: &mut Mode, stats: &mut Vec<(Vec<f64>, Vec<f64>)>) -> Result<Var> {
        let h = self.frontend(g, x, mode, stats)?;
        let t = g.value(h).shape[1];
        let mut h = g.add_const_cyclic(h, &positional_encoding(t, self.cfg.d_model));
        for i in 0..self.cfg.n_blocks {
            h = self.block(g, h, i, mode, stats);
        }
        Ok(h)
    }

    pub fn head(&self, g: &mut Graph, z: Var, task: Task, mode: &mut Mode) -> Result<Var> {
        let hd = self
            .layers
            .heads
            .get(&task)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("model has no {task} head")))?;
        let h = self.ln(g, z, hd.ln);
        let h = self.linear(g, h, hd.fc1);
        let h = g.activation(h, Activation::Gelu);
        let h = Self::dropout(g, h, (2.0 * self.cfg.dropout).min(0.9), mode);
        let h = self.linear(g, h, hd.fc2);
        let h = g.activation(h, Activation::Gelu);
        let h = Self::dropout(g, h, self.cfg.dropout, mode);
        Ok(self.linear(g, h, hd.fc3))
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor, mut mode: Mode) -> Result<ForwardOutput> {
        let xv = g.input(x.clone());
        let mut stats = Vec::new();
        let h = self.encode(g, xv, &mut mode, &mut stats)?;
        let q = self.p(g, self.layers.query);
        let (pooled, attention) = g.attention_pool(h, q);
        let mut logits = BTreeMap::new();
        for &task in &self.cfg.tasks {
            logits.insert(task, self.head(g, pooled, task, &mut mode)?);
        }
        let ctc = match self.layers.ctc {
            Some((n, l)) => {
                let hn = self.ln(g, h, n);
                Some(self.linear(g, hn, l))
            }
            None => None,
        };
        Ok(ForwardOutput {
            logits,
            ctc,
            pooled,
            attention,
            bn_stats: stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_bn(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        let m = self.cfg.bn_momentum;
        for (state, (mean, var)) in self.bn.iter_mut().zip(stats) {
            state.mean.iter_mut().zip(mean).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
            state.var.iter_mut().zip(var).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
        }
    }

    /// Eval-mode logits of one task for `B × T × F` inputs, in batches.
    pub fn predict(&self, x: &Tensor, task: Task, batch: usize) -> Result<ndarray::Array2<f64>> {
        let (n, t, f) = (x.shape[0], x.shape[1], x.shape[2]);
        let c = task.n_classes();
        let mut out = ndarray::Array2::zeros((n, c));
        let per = t * f;
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            let chunk = Tensor::new(&[end - start, t, f], x.data[start * per..end * per].to_vec());
            let mut g = Graph::new();
            let fo = self.forward(&mut g, &chunk, Mode::Eval)?;
            let lv = fo.logits.get(&task).ok_or_else(|| Error::invalid(format!("model has no {task} head")))?;
            for (i, row) in g.value(*lv).data.chunks(c).enumerate() {
                out.row_mut(start + i).assign(&ndarray::ArrayView1::from(row));
            }
        }
        Ok(out)
    }
}

/// Argmax of the element-wise mean of two logit matrices.
pub fn ensemble_logits(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> Result<Vec<usize>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("ensemble members disagree: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let mean = (a + b) * 0.5;
    Ok(mean.outer_iter().map(eegphon_core::stats::metrics::argmax).collect())
}
