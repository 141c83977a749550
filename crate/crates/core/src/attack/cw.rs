//! Carlini-Wagner L2 attack (untargeted).
//!
//! Minimizes `|x' - x|_2^2 + c * max(Z_y(x') - max_{j != y} Z_j(x'), -kappa)`
//! over `x' = lo + (tanh(w) + 1) / 2 * (hi - lo)` with Adam on `w`, and
//! binary-searches the trade-off constant `c` per sample.

use alloc::vec;
use alloc::vec::Vec;

use super::{clean_classes, package, AttackConfig, AttackResult, Target};
use crate::graph::Graph;
use crate::optim::Adam;
use crate::tensor::{argmax, Tensor};
use crate::Result;

/// Pixels on the box boundary are pulled inside by this relative amount so
/// `atanh` stays finite and their gradient does not vanish.
const BOUNDARY_SHRINK: f64 = 1e-6;

pub fn tanh_encode(v: f64, lo: f64, hi: f64) -> f64 {
    let s = ((v - lo) / (hi - lo)) * 2.0 - 1.0;
    let lim = 1.0 - BOUNDARY_SHRINK;
    libm::atanh(s.clamp(-lim, lim))
}

pub fn tanh_decode(w: f64, lo: f64, hi: f64) -> f64 {
    lo + (libm::tanh(w) + 1.0) * 0.5 * (hi - lo)
}

pub fn cw_l2(
    target: &Target<'_>,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let cfg = &config.cw;
    let (lo, hi) = config.clip;
    let model = target.model;
    let b = labels.len();
    let original = clean_classes(model, x)?;
    let width = x.row_len();

    let mut best_adv = x.clone();
    let active: Vec<usize> = (0..b).filter(|&i| original[i] == labels[i]).collect();
    let mut iterations = vec![0usize; b];

    if !active.is_empty() {
        let n = active.len();
        let xa = x.select_rows(&active);
        let ya: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let w0: Vec<f64> = xa.data().iter().map(|&v| tanh_encode(v, lo, hi)).collect();
        let w_shape = xa.shape().to_vec();

        let mut best_l2 = vec![f64::INFINITY; n];
        let mut best_margin = vec![f64::INFINITY; n];
        let mut attempt = xa.clone();
        let mut found = vec![false; n];
        let mut lower = vec![0.0f64; n];
        let mut upper = vec![1e10f64; n];
        let mut consts = vec![cfg.initial_const; n];
        let mut used = 0usize;
        let check_every = (cfg.max_iterations / 10).max(1);

        for _ in 0..cfg.binary_search_steps {
            let mut w = w0.clone();
            let mut adam = Adam::new(w.len(), cfg.learning_rate);
            let mut succeeded = vec![false; n];
            let mut prev = f64::INFINITY;
            for it in 0..cfg.max_iterations {
                let wt = Tensor::new(w_shape.clone(), w.clone())?;
                let mut g = Graph::new();
                let wv = g.input(wt, true);
                let t = g.tanh(wv);
                let t1 = g.add_scalar(t, 1.0);
                let scaled = g.scale(t1, 0.5 * (hi - lo));
                let xp = g.add_scalar(scaled, lo);
                let x0 = g.leaf(&xa, false);
                let diff = g.sub(xp, x0)?;
                let sq = g.square(diff);
                let l2 = g.sum_rows(sq)?;
                let fwd = model.forward(&mut g, xp, false)?;
                let zy = g.gather(fwd.logits, &ya)?;
                let zo = g.max_other(fwd.logits, &ya)?;
                let margin = g.sub(zy, zo)?;
                let shifted = g.add_scalar(margin, cfg.confidence);
                let hinge = g.relu(shifted);
                let f = g.add_scalar(hinge, -cfg.confidence);
                let c = g.constant(Tensor::from_vec(consts.clone()));
                let cf = g.mul(f, c)?;
                let per = g.add(l2, cf)?;
                let total = g.sum(per);

                let nc = model.num_classes();
                let logits = g.value(fwd.logits);
                let margins = g.value(margin);
                let l2s = g.value(l2);
                let xpv = g.value(xp);
                for k in 0..n {
                    let pred = argmax(&logits[k * nc..(k + 1) * nc]);
                    let row = &xpv[k * width..(k + 1) * width];
                    if pred != ya[k] && margins[k] <= -cfg.confidence {
                        succeeded[k] = true;
                        if l2s[k] < best_l2[k] {
                            best_l2[k] = l2s[k];
                            found[k] = true;
                            best_adv.row_mut(active[k]).copy_from_slice(row);
                        }
                    } else if !found[k] && margins[k] < best_margin[k] {
                        best_margin[k] = margins[k];
                        attempt.row_mut(k).copy_from_slice(row);
                    }
                }
                let total_v = g.value(total)[0];
                if cfg.abort_early && it % check_every == 0 {
                    if total_v > prev * 0.9999 {
                        break;
                    }
                    prev = total_v;
                }
                g.backward(total)?;
                let grad = g.grad(wv).expect("w requires grad");
                adam.step(&mut w, grad.data());
                used += 1;
            }
            for k in 0..n {
                if succeeded[k] {
                    upper[k] = upper[k].min(consts[k]);
                    consts[k] = (lower[k] + upper[k]) / 2.0;
                } else {
                    lower[k] = lower[k].max(consts[k]);
                    consts[k] = if upper[k] < 1e9 {
                        (lower[k] + upper[k]) / 2.0
                    } else {
                        consts[k] * 10.0
                    };
                }
            }
        }
        for (k, &i) in active.iter().enumerate() {
            if !found[k] {
                best_adv.row_mut(i).copy_from_slice(attempt.row(k));
            }
            iterations[i] = used;
        }
    }
    for v in best_adv.data_mut() {
        *v = v.clamp(lo, hi);
    }
    let adv_classes = clean_classes(model, &best_adv)?;
    Ok(package(x, best_adv, labels, &original, &adv_classes, |i| iterations[i]))
}
