//! Segmentation and cyclic consistency losses.
//!
//! The per-mask loss is binary cross-entropy (negative log-likelihood,
//! averaged over pixels) minus gamma times a differentiable soft IoU
//! (sum of elementwise min over sum of elementwise max). The cycle loss is
//! the sum of the forward-frame loss and the first-frame reconstruction loss.

use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// IoU term weight.
    pub gamma: f64,
    /// Clamp for predictions before logs.
    pub eps_clamp: f64,
    /// Guard on the IoU numerator and denominator; makes empty-vs-empty
    /// soft-IoU equal 1.
    pub eps_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            eps_clamp: 1e-6,
            eps_iou: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) {
        assert!(self.gamma >= 0.0, "gamma must be >= 0");
        assert!(
            self.eps_clamp > 0.0 && self.eps_iou > 0.0,
            "loss epsilons must be > 0"
        );
    }
}

/// (sum min(pred, gt) + eps) / (sum max(pred, gt) + eps). Ties route the
/// subgradient to `pred` (the first operand).
pub fn soft_iou<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    gt: TensorId,
    eps_iou: f64,
) -> TensorId {
    let eps = S::from_f64(eps_iou);
    let inter = tape.emin(pred, gt);
    let union = tape.emax(pred, gt);
    let num = tape.sum(inter);
    let den = tape.sum(union);
    let num = tape.add_scalar(num, eps);
    let den = tape.add_scalar(den, eps);
    tape.div(num, den)
}

/// Cross-entropy plus weighted soft-IoU for one mask plane:
/// -(1/|omega|) sum[(1-gt) log(1-pred) + gt log(pred)] - gamma * iou(pred, gt).
pub fn seg_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    gt: TensorId,
    cfg: &LossConfig,
) -> TensorId {
    let shapes = (
        tape.value(pred).shape().to_vec(),
        tape.value(gt).shape().to_vec(),
    );
    assert_eq!(
        shapes.0, shapes.1,
        "seg-loss: shape mismatch {:?} vs {:?}",
        shapes.0, shapes.1
    );

    let lo = S::from_f64(cfg.eps_clamp);
    let hi = S::from_f64(1.0 - cfg.eps_clamp);
    let p = tape.clamp(pred, lo, hi);

    let log_p = tape.log(p);
    let neg_p = tape.mul_scalar(p, -S::ONE);
    let one_minus_p = tape.add_scalar(neg_p, S::ONE);
    let log_1mp = tape.log(one_minus_p);

    let neg_gt = tape.mul_scalar(gt, -S::ONE);
    let one_minus_gt = tape.add_scalar(neg_gt, S::ONE);

    let t0 = tape.mul(one_minus_gt, log_1mp);
    let t1 = tape.mul(gt, log_p);
    let ll = tape.add(t0, t1);
    let mean_ll = tape.mean(ll);
    let ce = tape.mul_scalar(mean_ll, -S::ONE);

    let iou = soft_iou(tape, pred, gt, cfg.eps_iou);
    let weighted = tape.mul_scalar(iou, S::from_f64(-cfg.gamma));
    tape.add(ce, weighted)
}

/// Multi-object form: mean of the per-object seg losses.
pub fn seg_loss_objects<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[TensorId],
    gts: &[TensorId],
    cfg: &LossConfig,
) -> TensorId {
    assert!(
        !preds.is_empty() && preds.len() == gts.len(),
        "seg-loss: {} prediction planes vs {} ground-truth planes",
        preds.len(),
        gts.len()
    );
    let mut total = seg_loss(tape, preds[0], gts[0], cfg);
    for (&p, &g) in preds[1..].iter().zip(&gts[1..]) {
        let l = seg_loss(tape, p, g, cfg);
        total = tape.add(total, l);
    }
    tape.mul_scalar(total, S::from_f64(1.0 / preds.len() as f64))
}

/// seg-loss at the forward frame plus seg-loss at the reconstructed first
/// frame.
pub fn cycle_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred_t: TensorId,
    gt_t: TensorId,
    pred_1: TensorId,
    gt_1: TensorId,
    cfg: &LossConfig,
) -> TensorId {
    let lt = seg_loss(tape, pred_t, gt_t, cfg);
    let l1 = seg_loss(tape, pred_1, gt_1, cfg);
    tape.add(lt, l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval_soft_iou(pred: Vec<f64>, gt: Vec<f64>, eps: f64) -> f64 {
        let n = pred.len();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(Tensor::new(vec![n], pred));
        let g = tape.constant(Tensor::new(vec![n], gt));
        let iou = soft_iou(&mut tape, p, g, eps);
        tape.value(iou).item()
    }

    fn eval_seg_loss(pred: Vec<f64>, gt: Vec<f64>, cfg: &LossConfig) -> f64 {
        let n = pred.len();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.constant(Tensor::new(vec![n], pred));
        let g = tape.constant(Tensor::new(vec![n], gt));
        let l = seg_loss(&mut tape, p, g, cfg);
        tape.value(l).item()
    }

    #[test]
    fn soft_iou_identical_binary_masks() {
        let m = vec![1.0, 0.0, 1.0, 1.0];
        let v = eval_soft_iou(m.clone(), m, 1e-6);
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn soft_iou_disjoint_masks() {
        let v = eval_soft_iou(vec![1.0, 0.0], vec![0.0, 1.0], 1e-6);
        assert!(v < 1e-5);
    }

    #[test]
    fn soft_iou_hand_case() {
        // (0.5 + eps) / (1.5 + eps), about 1/3
        let eps = 1e-6;
        let v = eval_soft_iou(vec![0.5, 0.5], vec![1.0, 0.0], eps);
        let expect = (0.5 + eps) / (1.5 + eps);
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn soft_iou_empty_vs_empty_is_one() {
        let v = eval_soft_iou(vec![0.0, 0.0], vec![0.0, 0.0], 1e-6);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn seg_loss_perfect_binary_prediction() {
        let cfg = LossConfig::default();
        let gt = vec![1.0, 0.0, 1.0, 0.0];
        let v = eval_seg_loss(gt.clone(), gt, &cfg);
        assert!((v - (-cfg.gamma)).abs() < 1e-4, "loss {v}");
    }

    #[test]
    fn seg_loss_hand_single_pixel() {
        let mut cfg = LossConfig::default();
        cfg.gamma = 0.0;
        let v = eval_seg_loss(vec![0.5], vec![1.0], &cfg);
        assert!((v - 0.693147).abs() < 1e-5, "ce-only loss {v}");

        cfg.gamma = 1.0;
        let v = eval_seg_loss(vec![0.5], vec![1.0], &cfg);
        assert!((v - 0.193147).abs() < 1e-5, "ce+iou loss {v}");
    }

    #[test]
    fn cycle_loss_is_sum_of_seg_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = LossConfig::default();
        let n = 16;
        let pred_t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let gt_t: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let pred_1: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
        let gt_1: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();

        let mut tape: Tape<f64> = Tape::new();
        let pt = tape.constant(Tensor::new(vec![n], pred_t.clone()));
        let gt = tape.constant(Tensor::new(vec![n], gt_t.clone()));
        let p1 = tape.constant(Tensor::new(vec![n], pred_1.clone()));
        let g1 = tape.constant(Tensor::new(vec![n], gt_1.clone()));
        let c = cycle_loss(&mut tape, pt, gt, p1, g1, &cfg);
        let combined = tape.value(c).item();

        let separate = eval_seg_loss(pred_t, gt_t, &cfg) + eval_seg_loss(pred_1, gt_1, &cfg);
        assert!((combined - separate).abs() < 1e-7);
    }

    #[test]
    fn cycle_loss_symmetric_in_pairs() {
        let cfg = LossConfig::default();
        let a = (vec![0.3, 0.8], vec![0.0, 1.0]);
        let b = (vec![0.9, 0.2], vec![1.0, 0.0]);
        let eval = |x: &(Vec<f64>, Vec<f64>), y: &(Vec<f64>, Vec<f64>)| {
            let mut tape: Tape<f64> = Tape::new();
            let pt = tape.constant(Tensor::new(vec![2], x.0.clone()));
            let gt = tape.constant(Tensor::new(vec![2], x.1.clone()));
            let p1 = tape.constant(Tensor::new(vec![2], y.0.clone()));
            let g1 = tape.constant(Tensor::new(vec![2], y.1.clone()));
            let c = cycle_loss(&mut tape, pt, gt, p1, g1, &cfg);
            tape.value(c).item()
        };
        assert!((eval(&a, &b) - eval(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn both_predictions_perfect_gives_minus_two_gamma() {
        let cfg = LossConfig::default();
        let gt = vec![1.0, 0.0, 1.0];
        let mut tape: Tape<f64> = Tape::new();
        let pt = tape.constant(Tensor::new(vec![3], gt.clone()));
        let gtid = tape.constant(Tensor::new(vec![3], gt.clone()));
        let p1 = tape.constant(Tensor::new(vec![3], gt.clone()));
        let g1 = tape.constant(Tensor::new(vec![3], gt));
        let c = cycle_loss(&mut tape, pt, gtid, p1, g1, &cfg);
        assert!((tape.value(c).item() - (-2.0 * cfg.gamma)).abs() < 2e-4);
    }

    #[test]
    fn seg_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = LossConfig::default();
        let n = 12;
        // keep pred away from gt values so min/max ties cannot occur
        let gt: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let pred = Tensor::new(
            vec![n],
            (0..n).map(|_| rng.gen_range(0.05..0.45)).collect::<Vec<_>>(),
        );
        let gt_t = Tensor::new(vec![n], gt);
        let err = finite_diff_check(
            |tape, p| {
                let g = tape.constant(gt_t.clone());
                seg_loss(tape, p, g, &cfg)
            },
            &pred,
            1e-6,
        );
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn seg_loss_minimized_at_gt_brute_force_grid() {
        // grid search over 2-pixel predictions against a binary gt
        let cfg = LossConfig::default();
        let gt = vec![1.0, 0.0];
        let mut best = f64::INFINITY;
        let mut best_pred = (0.0, 0.0);
        let steps = 101;
        for i in 0..steps {
            for j in 0..steps {
                let p = (i as f64 / (steps - 1) as f64, j as f64 / (steps - 1) as f64);
                let v = eval_seg_loss(vec![p.0, p.1], gt.clone(), &cfg);
                if v < best {
                    best = v;
                    best_pred = p;
                }
            }
        }
        assert_eq!(best_pred, (1.0, 0.0));
        assert!((best - (-cfg.gamma)).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn soft_iou_in_unit_interval(
            pred in proptest::collection::vec(0.0f64..=1.0, 1..32),
            gt in proptest::collection::vec(0.0f64..=1.0, 1..32),
        ) {
            let n = pred.len().min(gt.len());
            let v = eval_soft_iou(pred[..n].to_vec(), gt[..n].to_vec(), 1e-6);
            prop_assert!(v > 0.0 && v <= 1.0 + 1e-12);
        }

        #[test]
        fn soft_iou_is_one_only_when_equal(
            pred in proptest::collection::vec(0.0f64..=1.0, 4),
            delta in 0.01f64..0.5,
        ) {
            let v = eval_soft_iou(pred.clone(), pred.clone(), 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-9);
            let mut other = pred.clone();
            other[0] = if pred[0] > 0.5 { pred[0] - delta } else { pred[0] + delta };
            let v2 = eval_soft_iou(pred, other, 1e-6);
            prop_assert!(v2 < 1.0);
        }
    }
}
