//! Class weighting, label-smoothed soft targets and connectionist temporal
//! classification.

use eegphon_core::{Error, Result};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const CLASS_WEIGHT_CLIP: (f64, f64) = (0.25, 4.0);

/// Inverse-frequency weights normalized to mean 1 over the classes that
/// occur, then clipped. Absent classes get weight 1; they never contribute.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::invalid("class weights need at least one labelled sample"));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| if n > 0 { 1.0 / n as f64 } else { 0.0 }).collect();
    let mean = present.iter().map(|&c| inv[c]).sum::<f64>() / present.len() as f64;
    Ok(counts
        .iter()
        .zip(&inv)
        .map(|(&n, &w)| {
            if n == 0 {
                1.0
            } else {
                (w / mean).clamp(CLASS_WEIGHT_CLIP.0, CLASS_WEIGHT_CLIP.1)
            }
        })
        .collect())
}

pub fn class_counts(labels: impl IntoIterator<Item = usize>, n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for y in labels {
        counts[y] += 1;
    }
    counts
}

/// `ỹ_c = (1−ε)·1[c = y] + ε/C`
pub fn smoothed_target(y: usize, n_classes: usize, epsilon: f64) -> Vec<f64> {
    let mut t = vec![epsilon / n_classes as f64; n_classes];
    t[y] += 1.0 - epsilon;
    t
}

/// Soft-target matrix for one head. Row `b` is
/// `λ·w(y_b)·ỹ(y_b) + (1−λ)·w(y_π(b))·ỹ(y_π(b))`, with missing labels
/// contributing nothing. Returns the matrix and the number of rows that carry
/// any target (the batch-average denominator).
pub fn build_targets(
    labels: &[Option<usize>],
    mix: Option<(&[usize], f64)>,
    n_classes: usize,
    epsilon: f64,
    weights: Option<&[f64]>,
) -> (Vec<f64>, usize) {
    let b = labels.len();
    let mut t = vec![0.0; b * n_classes];
    let add = |row: usize, y: Option<usize>, scale: f64, t: &mut [f64]| {
        if let Some(y) = y {
            if scale > 0.0 {
                let w = weights.map_or(1.0, |w| w[y]);
                for (dst, v) in t[row * n_classes..][..n_classes].iter_mut().zip(smoothed_target(y, n_classes, epsilon)) {
                    *dst += scale * w * v;
                }
            }
        }
    };
    for (i, &y) in labels.iter().enumerate() {
        match mix {
            Some((perm, lam)) => {
                add(i, y, lam, &mut t);
                add(i, labels[perm[i]], 1.0 - lam, &mut t);
            }
            None => add(i, y, 1.0, &mut t),
        }
    }
    let rows = t.chunks(n_classes).filter(|r| r.iter().any(|&v| v > 0.0)).count();
    (t, rows)
}

/// Label-smoothed, class-weighted cross-entropy averaged over labelled rows.
/// `None` when no row carries a label.
pub fn label_smoothing_ce(
    g: &mut Graph,
    logits: Var,
    labels: &[Option<usize>],
    epsilon: f64,
    weights: Option<&[f64]>,
) -> Result<Option<Var>> {
    check_finite(g.value(logits))?;
    let c = g.value(logits).last_dim();
    let (t, rows) = build_targets(labels, None, c, epsilon, weights);
    Ok((rows > 0).then(|| g.soft_cross_entropy(logits, t, rows as f64)))
}

pub fn check_finite(t: &Tensor) -> Result<()> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite logits".into()))
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood of one target sequence under frame log-probs
/// `lp` (`T × V`, blank = `blank`), and the gradient w.r.t. the frame logits.
/// `None` when no alignment of the target fits in `T` frames.
pub fn ctc_single(lp: &[f64], t_len: usize, v: usize, target: &[usize], blank: usize) -> Option<(f64, Vec<f64>)> {
    let s_len = 2 * target.len() + 1;
    let lab = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    let mut beta = vec![ninf; t_len * s_len];
    if t_len == 0 {
        return None;
    }
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[lab(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && lab(s) != blank && lab(s) != lab(s - 2) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * v + lab(s)];
        }
    }
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp[(t_len - 1) * v + blank];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(t_len - 1) * v + lab(s_len - 2)];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && lab(s) != blank && lab(s) != lab(s + 2) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = b + lp[t * v + lab(s)];
        }
    }
    let mut ll = alpha[last + s_len - 1];
    if s_len > 1 {
        ll = log_add(ll, alpha[last + s_len - 2]);
    }
    if !ll.is_finite() {
        return None;
    }
    // d(−ll)/d logit_tk = p_tk − (1/P) Σ_{s: lab(s)=k} α_t(s) β_t(s) / p_tk
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        let mut occ = vec![ninf; v];
        for s in 0..s_len {
            let k = lab(s);
            occ[k] = log_add(occ[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..v {
            let p = lp[t * v + k].exp();
            let post = (occ[k] - lp[t * v + k] - ll).exp();
            grad[t * v + k] = p - post;
        }
    }
    Some((-ll, grad))
}

/// Mean over the batch of per-sequence NLL divided by target length, on
/// `B × T × V` frame logits. Sequences without a feasible alignment are
/// dropped from both numerator and denominator with a warning.
pub fn ctc_loss(g: &mut Graph, logits: Var, targets: &[Vec<usize>], blank: usize) -> Result<Option<Var>> {
    let lt = g.value(logits);
    check_finite(lt)?;
    if lt.shape.len() != 3 || lt.shape[0] != targets.len() {
        return Err(Error::Shape(format!("CTC logits {:?} for {} targets", lt.shape, targets.len())));
    }
    let (b, t_len, v) = (lt.shape[0], lt.shape[1], lt.shape[2]);
    if targets.iter().flatten().any(|&k| k >= v || k == blank) {
        return Err(Error::invalid("CTC target symbol out of range or equal to blank"));
    }
    let mut lp = lt.data.clone();
    for row in lp.chunks_mut(v) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
    let mut grad = vec![0.0; b * t_len * v];
    let mut total = 0.0;
    let mut used = 0usize;
    for (i, target) in targets.iter().enumerate() {
        if target.is_empty() {
            continue;
        }
        match ctc_single(&lp[i * t_len * v..][..t_len * v], t_len, v, target, blank) {
            Some((nll, gr)) => {
                let n = target.len() as f64;
                total += nll / n;
                grad[i * t_len * v..][..t_len * v].iter_mut().zip(gr).for_each(|(d, s)| *d = s / n);
                used += 1;
            }
            None => log::warn!("CTC target of length {} has no alignment in {} frames; skipped", target.len(), t_len),
        }
    }
    if used == 0 {
        return Ok(None);
    }
    let denom = used as f64;
    Ok(Some(g.custom(
        Tensor::scalar(total / denom),
        &[logits],
        Box::new(move |_, gy| vec![grad.iter().map(|x| x * gy[0] / denom).collect()]),
    )))
}

/// Greedy CTC decoding: per-frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy(frames: &[f64], t_len: usize, v: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..t_len {
        let row = &frames[t * v..][..v];
        let k = (0..v).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_balanced_and_hand_computed() {
        assert_eq!(class_weights(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        // (1/10, 1/20, 1/40) ∝ (4, 2, 1), mean 7/3 → (12/7, 6/7, 3/7)
        let w = class_weights(&[10, 20, 40]).unwrap();
        for (a, b) in w.iter().zip([12.0 / 7.0, 6.0 / 7.0, 3.0 / 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(class_weights(&[0, 0]).is_err());
    }

    #[test]
    fn weights_clip_exactly() {
        // (100, 1): raw mean-1 weights (2/101, 200/101); the low end clips.
        let w = class_weights(&[100, 1]).unwrap();
        assert_eq!(w[0], 0.25);
        assert!((w[1] - 200.0 / 101.0).abs() < 1e-12);
        // One rare class among five reaches the upper clip.
        let w = class_weights(&[1000, 1000, 1000, 1000, 1]).unwrap();
        assert_eq!(w[4], 4.0);
        assert_eq!(w[0], 0.25);
        assert_eq!(class_weights(&[5, 0, 5]).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn smoothing_values() {
        let t = smoothed_target(3, 11, 0.1);
        assert!((t[3] - (0.9 + 0.1 / 11.0)).abs() < 1e-12);
        assert!((t[3] - 0.90909).abs() < 1e-5);
        assert!((t[0] - 0.00909).abs() < 1e-5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[4, 11]));
        let loss = label_smoothing_ce(&mut g, l, &[Some(0), Some(3), Some(10), Some(5)], 0.1, None).unwrap().unwrap();
        assert!((g.value(loss).item() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_epsilon_is_weighted_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (b, c) = (rng.random_range(1..8), rng.random_range(2..6));
            let x: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y: Vec<Option<usize>> = (0..b).map(|_| Some(rng.random_range(0..c))).collect();
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.25..4.0)).collect();
            let mut g = Graph::new();
            let l = g.input(Tensor::new(&[b, c], x.clone()));
            let got = label_smoothing_ce(&mut g, l, &y, 0.0, Some(&w)).unwrap().unwrap();
            let mut want = 0.0;
            for i in 0..b {
                let row = &x[i * c..][..c];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                let yi = y[i].unwrap();
                want += -w[yi] * (row[yi].exp() / z).ln();
            }
            want /= b as f64;
            assert!((g.value(got).item() - want).abs() < 1e-9);
        }
        let mut g = Graph::new();
        let l = g.input(Tensor::new(&[1, 2], vec![f64::NAN, 0.0]));
        assert!(label_smoothing_ce(&mut g, l, &[Some(0)], 0.1, None).is_err());
    }

    #[test]
    fn mixup_loss_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, c) = (6, 5);
        let x: Vec<f64> = (0..b * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<Option<usize>> = (0..b).map(|_| Some(rng.random_range(0..c))).collect();
        let perm = [3, 0, 5, 1, 2, 4];
        let yj: Vec<Option<usize>> = perm.iter().map(|&p| y[p]).collect();
        let w = [0.5, 1.0, 2.0, 1.5, 0.7];
        for lam in [1.0, 0.0, 0.3, 0.77] {
            let mut g = Graph::new();
            let l = g.input(Tensor::new(&[b, c], x.clone()));
            let (t, rows) = build_targets(&y, Some((&perm, lam)), c, 0.1, Some(&w));
            let mixed = g.soft_cross_entropy(l, t, rows as f64);
            let li = label_smoothing_ce(&mut g, l, &y, 0.1, Some(&w)).unwrap().unwrap();
            let lj = label_smoothing_ce(&mut g, l, &yj, 0.1, Some(&w)).unwrap().unwrap();
            let want = lam * g.value(li).item() + (1.0 - lam) * g.value(lj).item();
            assert!((g.value(mixed).item() - want).abs() < 1e-12);
        }
    }

    /// Sums path probabilities over every frame-label sequence that collapses to the target.
    fn brute_ctc(lp: &[f64], t_len: usize, v: usize, target: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut path = vec![0usize; t_len];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &k in &path {
                if Some(k) != prev && k != 0 {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
            if collapsed == target {
                total += (0..t_len).map(|t| lp[t * v + path[t]]).sum::<f64>().exp();
            }
            let mut i = 0;
            loop {
                if i == t_len {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    fn log_softmax(x: &[f64], v: usize) -> Vec<f64> {
        let mut lp = x.to_vec();
        for row in lp.chunks_mut(v) {
            let z: f64 = row.iter().map(|a| a.exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|a| *a -= z);
        }
        lp
    }

    #[test]
    fn ctc_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cases: [(usize, usize, &[usize]); 5] = [(4, 3, &[1, 2]), (5, 3, &[1, 1]), (3, 3, &[2]), (5, 4, &[3, 1, 3]), (6, 3, &[1, 2, 1])];
        for (t_len, v, target) in cases {
            let x: Vec<f64> = (0..t_len * v).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lp = log_softmax(&x, v);
            let (nll, _) = ctc_single(&lp, t_len, v, target, 0).unwrap();
            assert!((nll - brute_ctc(&lp, t_len, v, target)).abs() < 1e-10, "{target:?}");
        }
        // repeated label needs a blank between: 2 frames cannot emit [1, 1]
        let lp = log_softmax(&[0.0; 6], 3);
        assert!(ctc_single(&lp, 2, 3, &[1, 1], 0).is_none());
    }

    #[test]
    fn ctc_gradient_and_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (b, t_len, v) = (3, 6, 4);
        let x: Vec<f64> = (0..b * t_len * v).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets = vec![vec![1, 2], vec![3], vec![2, 2, 1]];
        let eval = |x: &[f64]| {
            let mut g = Graph::new();
            let l = g.input(Tensor::new(&[b, t_len, v], x.to_vec()));
            let loss = ctc_loss(&mut g, l, &targets, 0).unwrap().unwrap();
            let val = g.value(loss).item();
            let grad = g.backward(loss).get(l).unwrap().to_vec();
            (val, grad)
        };
        let (val, grad) = eval(&x);
        let mut want = 0.0;
        for (i, tg) in targets.iter().enumerate() {
            let lp = log_softmax(&x[i * t_len * v..][..t_len * v], v);
            want += brute_ctc(&lp, t_len, v, tg) / tg.len() as f64;
        }
        assert!((val - want / 3.0).abs() < 1e-10);
        let h = 1e-6;
        for j in 0..x.len() {
            let mut p = x.clone();
            p[j] += h;
            let mut m = x.clone();
            m[j] -= h;
            let num = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            assert!((num - grad[j]).abs() <= 1e-6 * num.abs().max(1.0), "{j}: {num} vs {}", grad[j]);
        }
    }

    #[test]
    fn ctc_skips_infeasible() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[2, 2, 3]));
        let loss = ctc_loss(&mut g, l, &[vec![1, 1], vec![2]], 0).unwrap().unwrap();
        // only the second sequence counts: paths b2, 2b, 22 of 9
        assert!((g.value(loss).item() - (3.0f64 / 9.0).ln().abs()).abs() < 1e-12);
        let l2 = g.input(Tensor::zeros(&[1, 2, 3]));
        assert!(ctc_loss(&mut g, l2, &[vec![1, 1]], 0).unwrap().is_none());
        assert!(ctc_loss(&mut g, l2, &[vec![0]], 0).is_err());
    }

    #[test]
    fn greedy_collapses() {
        let v = 3;
        let mut f = vec![0.0; 7 * v];
        for (t, k) in [1, 1, 0, 1, 2, 2, 0].iter().enumerate() {
            f[t * v + k] = 1.0;
        }
        assert_eq!(ctc_greedy(&f, 7, v, 0), vec![1, 1, 2]);
    }
}
