//! Cycle effective receptive field: which reference-mask pixels the
//! segmentation of a later frame actually depends on.
//!
//! Starting from an all-zero reference mask for frame l, run unclamped
//! gradient descent on the segmentation loss at frame t. The positive part
//! of the final iterate highlights reference pixels that pull the prediction
//! toward the target; splitting it inside/outside the true object mask and
//! re-segmenting from each part shows what each region contributes.

use std::path::Path;

use crate::error::Result;
use crate::loss::{seg_loss_objects, LossConfig};
use crate::mask::Mask;
use crate::model::{ModelConfig, Weights};
use crate::segnet::{segment, stage_frame, TapedMask, TapedWeights};
use crate::seqio::{write_pgm, write_raw_f32};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct ErfConfig {
    /// Unclamped descent iterations.
    pub iterations: usize,
    /// Descent step.
    pub alpha: f64,
}

impl Default for ErfConfig {
    fn default() -> Self {
        ErfConfig {
            iterations: 50,
            alpha: 0.5,
        }
    }
}

/// Descend the frame-t segmentation loss with respect to an initially zero
/// frame-l reference mask; return relu of the final iterate per object.
/// Raw gradient steps keep the map proportional to how strongly each
/// reference pixel influences the loss (normalizing the step would let
/// noise-level pixels accumulate as much mass as truly influential ones).
pub fn compute_cycle_erf(
    cfg: &ModelConfig,
    weights: &Weights<f32>,
    frame_l: &Tensor<f32>,
    frame_t: &Tensor<f32>,
    gt_t: &Mask<f32>,
    ecfg: &ErfConfig,
) -> Mask<f32> {
    let loss_cfg = LossConfig::default();
    let hw = cfg.height * cfg.width;
    let mut current = Mask::<f32>::zeros(gt_t.num_objects(), cfg.height, cfg.width);

    for _ in 0..ecfg.iterations {
        let mut tape: Tape<f32> = Tape::new();
        let tw = TapedWeights::stage(&mut tape, weights, false);
        let x_l = stage_frame(&mut tape, frame_l);
        let x_t = stage_frame(&mut tape, frame_t);
        let taped = TapedMask::stage(&mut tape, &current, true);
        let out = segment(&mut tape, cfg, &tw, &[(x_l, &taped)], x_t);
        let gt = TapedMask::stage(&mut tape, gt_t, false);
        let loss = seg_loss_objects(&mut tape, &out.object_planes, &gt.planes, &loss_cfg);
        assert!(
            tape.value(loss).item().is_finite(),
            "cycle-erf descent diverged"
        );
        let grads = tape.backward(loss);
        for (o, &plane_id) in taped.planes.iter().enumerate() {
            if let Some(g) = grads.get(plane_id) {
                assert!(g.all_finite(), "non-finite cycle-erf gradient");
                let dst = &mut current.planes_mut().data_mut()[o * hw..(o + 1) * hw];
                for (d, &gv) in dst.iter_mut().zip(g.data()) {
                    *d -= (ecfg.alpha * gv as f64) as f32;
                }
            }
        }
    }

    let relu = current.planes().map(|v| v.max(0.0));
    Mask::new(relu)
}

/// Split an ERF map by the true frame-l mask and re-segment frame 1 from
/// each part: `interior` = erf masked to the object, `exterior` = erf outside
/// it. For the reconstruction the reference planes are rescaled to unit peak
/// so the probe compares the spatial support of the two parts rather than
/// their raw magnitudes, which scale with the descent step. Returns
/// ((interior part, its reconstruction), (exterior part, its
/// reconstruction)); the returned parts are the unscaled splits.
pub fn partitioned_reconstruct(
    cfg: &ModelConfig,
    weights: &Weights<f32>,
    frame_l: &Tensor<f32>,
    frame_1: &Tensor<f32>,
    gt_l: &Mask<f32>,
    erf: &Mask<f32>,
) -> ((Mask<f32>, Mask<f32>), (Mask<f32>, Mask<f32>)) {
    assert_eq!(erf.num_objects(), gt_l.num_objects(), "object count mismatch");
    let n = erf.planes().len();
    let pick = |inside: bool| -> Mask<f32> {
        let mut data = Vec::with_capacity(n);
        for (e, g) in erf.planes().data().iter().zip(gt_l.planes().data()) {
            let keep = if inside { *g } else { 1.0 - *g };
            data.push(e * keep);
        }
        Mask::new(Tensor::new(erf.planes().shape().to_vec(), data))
    };
    let reconstruct = |part: &Mask<f32>| -> Mask<f32> {
        let hw = part.height() * part.width();
        let mut scaled = part.clone();
        for o in 0..part.num_objects() {
            let plane = &mut scaled.planes_mut().data_mut()[o * hw..(o + 1) * hw];
            let peak = plane.iter().fold(0f32, |m, &v| m.max(v));
            if peak > 0.0 {
                for v in plane.iter_mut() {
                    *v /= peak;
                }
            }
        }
        let mut tape: Tape<f32> = Tape::new();
        let tw = TapedWeights::stage(&mut tape, weights, false);
        let x_l = stage_frame(&mut tape, frame_l);
        let x_1 = stage_frame(&mut tape, frame_1);
        let taped = TapedMask::stage(&mut tape, &scaled, false);
        segment(&mut tape, cfg, &tw, &[(x_l, &taped)], x_1).to_mask(&tape)
    };
    let interior = pick(true);
    let exterior = pick(false);
    let rec_in = reconstruct(&interior);
    let rec_ex = reconstruct(&exterior);
    ((interior, rec_in), (exterior, rec_ex))
}

/// Viewable max-normalized PGM plus a full-precision raw sidecar per object.
pub fn export_erf(dir: &Path, stem: &str, erf: &Mask<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (erf.height(), erf.width());
    for o in 0..erf.num_objects() {
        let plane = erf.plane(o);
        let peak = plane.iter().fold(0f32, |m, &v| m.max(v));
        let gray: Vec<u8> = plane
            .iter()
            .map(|&v| {
                if peak > 0.0 {
                    (v / peak * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        write_pgm(&dir.join(format!("{stem}-obj{}.pgm", o + 1)), w, h, &gray)?;
        write_raw_f32(&dir.join(format!("{stem}-obj{}.f32", o + 1)), &[h, w], plane)?;
    }
    Ok(())
}
