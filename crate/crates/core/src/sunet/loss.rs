//! Average of voxel-mean cross-entropy and soft Dice loss.

use crate::conv::Real;
use crate::error::{Error, Result};
use crate::volume::label;

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Per-voxel softmax over `classes` channel-major logits, in f64.
pub fn softmax<T: Real>(logits: &[T], classes: usize) -> Vec<f64> {
    let n = logits.len() / classes;
    let mut p = vec![0f64; logits.len()];
    for i in 0..n {
        let m = (0..classes).map(|c| logits[c * n + i].f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..classes {
            let e = (logits[c * n + i].f64() - m).exp();
            p[c * n + i] = e;
            s += e;
        }
        for c in 0..classes {
            p[c * n + i] /= s;
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Mean soft Dice over the tumor classes.
    pub dice: f64,
}

/// `0.5·CE + 0.5·(1 − mean soft Dice over classes 1..3)` and its gradient
/// with respect to the logits (`4 × N`, channel-major).
pub fn loss_and_grad<T: Real>(logits: &[T], target: &[u8]) -> Result<(LossParts, Vec<T>)> {
    let classes = label::COUNT;
    let n = target.len();
    if logits.len() != classes * n {
        return Err(Error::Shape(format!(
            "{} logits for {n} voxels and {classes} classes",
            logits.len()
        )));
    }
    if let Some(i) = target.iter().position(|&t| t as usize >= classes) {
        return Err(Error::InvalidLabel {
            index: i,
            value: target[i] as f32,
        });
    }
    let p = softmax(logits, classes);
    let nf = n as f64;
    let ce = -target
        .iter()
        .enumerate()
        .map(|(i, &t)| p[t as usize * n + i].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / nf;

    // dL/dp for the Dice part, then the softmax Jacobian
    let tumor = 1..classes;
    let mut dl_dp = vec![0f64; classes * n];
    let mut dice_sum = 0.0;
    for c in tumor.clone() {
        let pc = &p[c * n..(c + 1) * n];
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for (i, &t) in target.iter().enumerate() {
            let g = (t as usize == c) as u8 as f64;
            inter += pc[i] * g;
            ps += pc[i];
            gs += g;
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = ps + gs + DICE_SMOOTH;
        dice_sum += num / den;
        let scale = -0.5 / tumor.len() as f64;
        for (i, &t) in target.iter().enumerate() {
            let g = (t as usize == c) as u8 as f64;
            dl_dp[c * n + i] = scale * (2.0 * g * den - num) / (den * den);
        }
    }
    let dice = dice_sum / tumor.len() as f64;
    let mut grad = vec![T::zero(); classes * n];
    for i in 0..n {
        let dot: f64 = (0..classes).map(|c| p[c * n + i] * dl_dp[c * n + i]).sum();
        for c in 0..classes {
            let pc = p[c * n + i];
            let onehot = (target[i] as usize == c) as u8 as f64;
            let g = pc * (dl_dp[c * n + i] - dot) + 0.5 * (pc - onehot) / nf;
            grad[c * n + i] = T::of(g);
        }
    }
    Ok((
        LossParts {
            total: 0.5 * ce + 0.5 * (1.0 - dice),
            ce,
            dice,
        },
        grad,
    ))
}

/// Per-voxel argmax; ties go to the lowest class index.
pub fn argmax_labels<T: Real>(logits: &[T], classes: usize) -> Vec<u8> {
    let n = logits.len() / classes;
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * n + i] > logits[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
