//! Training objective: negative soft Dice summed over all classes plus the
//! categorical cross-entropy summed over voxels.
//!
//! `L = −Σ_s D̃_s + Σ_s Σ_x −T_s(x)·ln P_s(x)`, with the smoothed soft Dice
//! `D̃_s = (2 Σ_x P_s T_s + ε) / (Σ_x P_s + Σ_x T_s + ε)`. Background is
//! included in both terms. All accumulation is in `f64`.

use thiserror::Error;

use crate::autodiff::Shape;
use crate::real::Real;
use crate::volume::OneHot;

/// Smoothing constant of the soft Dice.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction has {pred} classes × {pred_voxels} voxels, target {target} × {target_voxels}")]
    ShapeMismatch { pred: usize, pred_voxels: usize, target: usize, target_voxels: usize },
}

#[derive(Debug, Clone)]
pub struct LossValue<T> {
    pub total: f64,
    /// `−Σ_s D̃_s`.
    pub dice_term: f64,
    /// `Σ −T log P`.
    pub cross_entropy: f64,
    /// ∂L/∂logits in the logits' layout.
    pub grad_logits: Vec<T>,
}

fn check(shape: Shape, target: &OneHot) -> Result<(), LossError> {
    let voxels = shape.batch * shape.spatial();
    if shape.channels != target.num_classes || voxels != target.num_voxels {
        return Err(LossError::ShapeMismatch {
            pred: shape.channels,
            pred_voxels: voxels,
            target: target.num_classes,
            target_voxels: target.num_voxels,
        });
    }
    Ok(())
}

/// Target voxel index of element `(b, n)`: batch items are concatenated.
#[inline]
fn voxel(b: usize, n: usize, spatial: usize) -> usize {
    b * spatial + n
}

/// Combined loss evaluated on logits, with the gradient through the channel
/// softmax.
pub fn combined_loss<T: Real>(logits: &[T], shape: Shape, target: &OneHot) -> Result<LossValue<T>, LossError> {
    check(shape, target)?;
    let c = shape.channels;
    let sp = shape.spatial();
    let v = target.num_voxels;
    // probabilities, class-major over all voxels
    let mut p = vec![0f64; c * v];
    let mut ce = 0.0;
    let mut z = vec![0f64; c];
    for b in 0..shape.batch {
        for n in 0..sp {
            let i = voxel(b, n, sp);
            let mut max = f64::NEG_INFINITY;
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = logits[(b * c + k) * sp + n].to_f64().unwrap();
                max = max.max(*zk);
            }
            let mut sum = 0.0;
            for zk in z.iter_mut() {
                *zk = (*zk - max).exp();
                sum += *zk;
            }
            let log_sum = sum.ln();
            for k in 0..c {
                p[k * v + i] = z[k] / sum;
            }
            let label = target.label_at(i);
            let zl = logits[(b * c + label) * sp + n].to_f64().unwrap();
            ce -= zl - max - log_sum;
        }
    }
    let (dice_term, dice_grad) = soft_dice_and_grad(&p, c, target);
    // ∂L/∂z_k = P_k (g_k − Σ_s P_s g_s) + (P_k − T_k)
    let mut grad = vec![T::zero(); logits.len()];
    for b in 0..shape.batch {
        for n in 0..sp {
            let i = voxel(b, n, sp);
            let mut dot = 0.0;
            for k in 0..c {
                dot += p[k * v + i] * dice_grad[k * v + i];
            }
            for k in 0..c {
                let pk = p[k * v + i];
                let t = target.planes[k * v + i] as f64;
                grad[(b * c + k) * sp + n] = T::from_f64_lossy(pk * (dice_grad[k * v + i] - dot) + (pk - t));
            }
        }
    }
    Ok(LossValue { total: dice_term + ce, dice_term, cross_entropy: ce, grad_logits: grad })
}

/// `(−Σ_s D̃_s, ∂/∂P)` for class-major probabilities.
fn soft_dice_and_grad(p: &[f64], classes: usize, target: &OneHot) -> (f64, Vec<f64>) {
    let v = target.num_voxels;
    let mut grad = vec![0f64; classes * v];
    let mut term = 0.0;
    for s in 0..classes {
        let ps = &p[s * v..(s + 1) * v];
        let ts = target.plane(s);
        let mut inter = 0.0;
        let mut sum_p = 0.0;
        let mut sum_t = 0.0;
        for (&pv, &tv) in ps.iter().zip(ts) {
            inter += pv * tv as f64;
            sum_p += pv;
            sum_t += tv as f64;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sum_p + sum_t + DICE_EPS;
        term -= num / den;
        let gs = &mut grad[s * v..(s + 1) * v];
        for (g, &tv) in gs.iter_mut().zip(ts) {
            // −∂D̃/∂P
            *g = -(2.0 * tv as f64 * den - num) / (den * den);
        }
    }
    (term, grad)
}

/// Loss evaluated directly on class-major probabilities (no softmax).
/// Probabilities must be strictly positive where the target is hot.
pub fn combined_loss_probs(p: &[f64], target: &OneHot) -> Result<f64, LossError> {
    let c = target.num_classes;
    if p.len() != c * target.num_voxels {
        return Err(LossError::ShapeMismatch {
            pred: c,
            pred_voxels: p.len() / c.max(1),
            target: c,
            target_voxels: target.num_voxels,
        });
    }
    let (dice, _) = soft_dice_and_grad(p, c, target);
    let ce: f64 = target
        .planes
        .iter()
        .zip(p)
        .filter(|(&t, _)| t == 1)
        .map(|(_, &pv)| -pv.ln())
        .sum();
    Ok(dice + ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{one_hot_labels, NUM_CLASSES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_limit() {
        // 4×4×2 volume holding every class, P clamped at 1 − 1e-7
        let labels: Vec<u8> = (0..32).map(|i| (i % NUM_CLASSES) as u8).collect();
        let t = one_hot_labels(&labels, NUM_CLASSES);
        let v = labels.len();
        let off = 1e-7 / (NUM_CLASSES - 1) as f64;
        let mut p = vec![off; NUM_CLASSES * v];
        for (i, &l) in labels.iter().enumerate() {
            p[l as usize * v + i] = 1.0 - 1e-7;
        }
        let l = combined_loss_probs(&p, &t).unwrap();
        assert!((l + 28.0).abs() < 1e-4, "{l}");
    }

    #[test]
    fn uniform_prediction_closed_form() {
        // 2×2×2 volume, every voxel class 0, P = 1/28
        let t = one_hot_labels(&[0u8; 8], NUM_CLASSES);
        let p = vec![1.0 / 28.0; NUM_CLASSES * 8];
        let ce = 8.0 * 28f64.ln();
        let sum_p = 8.0 / 28.0;
        let d0 = (2.0 * sum_p + DICE_EPS) / (sum_p + 8.0 + DICE_EPS);
        let d_absent = DICE_EPS / (sum_p + DICE_EPS);
        let expected = ce - d0 - 27.0 * d_absent;
        let got = combined_loss_probs(&p, &t).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        // same value from logits (all-equal logits give the uniform softmax)
        let shape = Shape::new(1, NUM_CLASSES, 2, 2, 2);
        let lv = combined_loss(&vec![0.3f64; shape.len()], shape, &t).unwrap();
        assert!((lv.total - expected).abs() < 1e-10);
        assert!((lv.cross_entropy - ce).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let classes = 5;
        let shape = Shape::new(1, classes, 4, 4, 4);
        let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..classes as u8)).collect();
        let t = one_hot_labels(&labels, classes);
        let logits: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lv = combined_loss(&logits, shape, &t).unwrap();
        let h = 1e-5;
        let (mut num2, mut diff2) = (0.0, 0.0);
        for i in 0..logits.len() {
            let mut a = logits.clone();
            a[i] += h;
            let mut b = logits.clone();
            b[i] -= h;
            let fd = (combined_loss(&a, shape, &t).unwrap().total - combined_loss(&b, shape, &t).unwrap().total) / (2.0 * h);
            diff2 += (fd - lv.grad_logits[i]).powi(2);
            num2 += fd.powi(2).max(lv.grad_logits[i].powi(2));
        }
        let rel = (diff2 / num2).sqrt();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let t = one_hot_labels(&[0u8; 8], NUM_CLASSES);
        let shape = Shape::new(1, 3, 2, 2, 2);
        assert!(matches!(combined_loss(&vec![0f64; shape.len()], shape, &t), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn descent_on_probabilities_approaches_target() {
        // projected gradient steps on logits drive P towards T on a 2³ instance
        let classes = 3;
        let labels: Vec<u8> = vec![0, 1, 2, 1, 0, 0, 2, 1];
        let t = one_hot_labels(&labels, classes);
        let shape = Shape::new(1, classes, 2, 2, 2);
        let mut logits = vec![0f64; shape.len()];
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let lv = combined_loss(&logits, shape, &t).unwrap();
            assert!(lv.total <= last + 1e-12);
            last = lv.total;
            for (z, g) in logits.iter_mut().zip(&lv.grad_logits) {
                *z -= 0.5 * g;
            }
        }
        for (n, &l) in labels.iter().enumerate() {
            let best = (0..classes).max_by(|&a, &b| logits[a * 8 + n].total_cmp(&logits[b * 8 + n])).unwrap();
            assert_eq!(best, l as usize);
        }
        assert!(last < -(classes as f64) + 0.2, "{last}");
    }
}
