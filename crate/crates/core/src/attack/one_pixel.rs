//! Single-pixel black-box attack by differential evolution.
//!
//! A candidate is `(row, col, value per channel)`. Each generation builds one
//! `rand/1` mutant per population member, `p_r1 + F * (p_r2 - p_r3)`, and the
//! mutant replaces its parent when it lowers the probability of the true
//! class. Components leaving their range are resampled uniformly. The search
//! stops at the first candidate that changes the predicted class.

use alloc::vec::Vec;

use rand::Rng as _;

use super::{norms, AttackConfig, AttackResult, Oracle};
use crate::rng;
use crate::tensor::{argmax, Tensor};
use crate::{Error, Result};

struct Space {
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
}

impl Space {
    fn bounds(&self, dim: usize) -> (f64, f64) {
        match dim {
            0 => (0.0, self.h as f64),
            1 => (0.0, self.w as f64),
            _ => (self.lo, self.hi),
        }
    }

    fn sample(&self, dim: usize, r: &mut rng::Rng) -> f64 {
        let (a, b) = self.bounds(dim);
        r.gen_range(a..b)
    }
}

fn apply(x: &[f64], cand: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    out.copy_from_slice(x);
    let row = (cand[0] as usize).min(h - 1);
    let col = (cand[1] as usize).min(w - 1);
    for ch in 0..c {
        out[(ch * h + row) * w + col] = cand[2 + ch];
    }
}

/// Attacks a single image `x: [1, C, H, W]` (or `[C, H, W]`) through
/// `oracle` alone. `iterations` in the result counts queried images,
/// including the one clean query.
pub fn one_pixel<O: Oracle + ?Sized>(
    oracle: &O,
    x: &Tensor,
    label: usize,
    config: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    let [c, h, w] = oracle.input_shape();
    let width = c * h * w;
    if x.len() != width {
        return Err(Error::Shape {
            op: "one_pixel",
            detail: alloc::format!("input {:?} vs oracle [{c}, {h}, {w}]", x.shape()),
        });
    }
    let nc = oracle.num_classes();
    if label >= nc {
        return Err(Error::LabelOutOfRange {
            index: 0,
            label,
            num_classes: nc,
        });
    }
    let cfg = &config.one_pixel;
    let pop = cfg.population;
    let dims = 2 + c;
    let space = Space {
        h,
        w,
        lo: config.clip.0,
        hi: config.clip.1,
    };
    let mut r = rng::rng(seed);
    let base = x.data();
    let clean = oracle.probabilities(&Tensor::new(alloc::vec![1, c, h, w], base.to_vec())?)?;
    let original_class = argmax(clean.data());
    let mut queries = 1usize;

    let evaluate = |cands: &[f64], queries: &mut usize| -> Result<Tensor> {
        let n = cands.len() / dims;
        let mut batch = Tensor::zeros(&[n, c, h, w]);
        for k in 0..n {
            apply(base, &cands[k * dims..(k + 1) * dims], c, h, w, batch.row_mut(k));
        }
        *queries += n;
        oracle.probabilities(&batch)
    };
    let flipped = |probs: &[f64]| argmax(probs) != label;

    let mut popv: Vec<f64> = (0..pop * dims).map(|i| space.sample(i % dims, &mut r)).collect();
    let probs = evaluate(&popv, &mut queries)?;
    let mut fitness: Vec<f64> = (0..pop).map(|k| probs.row(k)[label]).collect();
    let mut predicted: Vec<usize> = (0..pop).map(|k| argmax(probs.row(k))).collect();
    let mut winner = (0..pop).find(|&k| flipped(probs.row(k)));

    let mut trial = alloc::vec![0.0; pop * dims];
    let mut gen = 0;
    while winner.is_none() && gen < cfg.generations {
        gen += 1;
        for k in 0..pop {
            let mut pick = || loop {
                let j = r.gen_range(0..pop);
                if j != k {
                    break j;
                }
            };
            let (r1, mut r2, mut r3) = (pick(), pick(), pick());
            while r2 == r1 {
                r2 = pick();
            }
            while r3 == r1 || r3 == r2 {
                r3 = pick();
            }
            for d in 0..dims {
                let v = popv[r1 * dims + d] + cfg.mutation * (popv[r2 * dims + d] - popv[r3 * dims + d]);
                let (a, b) = space.bounds(d);
                trial[k * dims + d] = if v >= a && v < b { v } else { space.sample(d, &mut r) };
            }
        }
        let probs = evaluate(&trial, &mut queries)?;
        for k in 0..pop {
            let f = probs.row(k)[label];
            let hit = winner.is_none() && flipped(probs.row(k));
            if f < fitness[k] || hit {
                fitness[k] = f;
                predicted[k] = argmax(probs.row(k));
                popv[k * dims..(k + 1) * dims].copy_from_slice(&trial[k * dims..(k + 1) * dims]);
            }
            if hit {
                winner = Some(k);
            }
        }
    }

    let chosen = winner.unwrap_or_else(|| {
        (0..pop)
            .min_by(|&a, &b| fitness[a].total_cmp(&fitness[b]))
            .expect("population is non-empty")
    });
    let mut adv = Tensor::zeros(&[c, h, w]);
    apply(base, &popv[chosen * dims..(chosen + 1) * dims], c, h, w, adv.data_mut());
    let adversarial_class = predicted[chosen];
    let (linf, l2, l0) = norms(base, adv.data(), c);
    Ok(AttackResult {
        adversarial: adv,
        success: adversarial_class != label,
        label,
        original_class,
        adversarial_class,
        linf,
        l2,
        l0,
        iterations: queries,
    })
}
