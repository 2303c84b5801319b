//! Sequence propagation with optional test-time gradient correction.
//!
//! Propagation segments frames 2..T in order, building the reference memory
//! per strategy. Gradient correction periodically refines a predicted mask
//! by descending the first-frame reconstruction loss with respect to the
//! mask itself; the network weights are never touched.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::loss::{seg_loss_objects, LossConfig};
use crate::mask::Mask;
use crate::model::{ModelConfig, Weights};
use crate::segnet::{segment, stage_frame, TapedMask, TapedWeights};
use crate::seqio::VideoSequence;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Memory holds only the annotated first frame.
    First,
    /// Memory holds only the previous frame's prediction.
    Prev,
    /// First frame plus the previous prediction.
    FirstPrev,
    /// First frame, previous prediction, and every `period`-th prediction.
    Mem { period: usize },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::FirstPrev
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub enabled: bool,
    /// Per-pixel descent step on the mask. Each iteration moves mask values
    /// by at most `alpha`: the gradient is normalized per object plane by its
    /// largest absolute entry, which keeps the useful range of `alpha`
    /// independent of resolution and of the pixel-averaged loss scale.
    pub alpha: f64,
    /// Descent iterations per corrected frame.
    pub iterations: usize,
    /// Correct every `period`-th propagated frame.
    pub period: usize,
    /// Clamp iterates to [0, 1] (off only for diagnostics).
    pub clamp: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            enabled: true,
            alpha: 0.5,
            iterations: 10,
            period: 5,
            clamp: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct InferConfig {
    pub strategy: Strategy,
    pub correction: CorrectionConfig,
    /// Robustness experiment: under the `Mem` strategy, each mask appended to
    /// the long-term memory is replaced by a degraded copy of the ground-truth
    /// mask at that frame. When correction is enabled it refines the replaced
    /// mask before it is appended (the per-frame output predictions are left
    /// uncorrected so the comparison isolates memory quality).
    #[serde(default)]
    pub memory_degradation: Degradation,
}

/// Mask degradation modes for robustness experiments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degradation {
    #[default]
    None,
    /// Replace each object plane by its filled bounding box (pixels > 0.5).
    BoundingBox,
}

pub fn degrade_mask(mask: &Mask<f32>, mode: Degradation) -> Mask<f32> {
    match mode {
        Degradation::None => mask.clone(),
        Degradation::BoundingBox => {
            let (n, h, w) = (mask.num_objects(), mask.height(), mask.width());
            let mut data = vec![0f32; n * h * w];
            for o in 0..n {
                let plane = mask.plane(o);
                let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
                let mut any = false;
                for y in 0..h {
                    for x in 0..w {
                        if plane[y * w + x] > 0.5 {
                            any = true;
                            y0 = y0.min(y);
                            x0 = x0.min(x);
                            y1 = y1.max(y);
                            x1 = x1.max(x);
                        }
                    }
                }
                if any {
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            data[o * h * w + y * w + x] = 1.0;
                        }
                    }
                }
            }
            Mask::new(Tensor::new(vec![n, h, w], data))
        }
    }
}

/// One gradient-correction run: returns the refined mask and the
/// reconstruction-loss trace (length iterations + 1, including the start).
/// Descent stops early if the loss or gradient goes non-finite, returning the
/// last finite iterate.
pub fn gradient_correct(
    cfg: &ModelConfig,
    weights: &Weights<f32>,
    frame_t: &Tensor<f32>,
    pred_t: &Mask<f32>,
    frame_1: &Tensor<f32>,
    gt_1: &Mask<f32>,
    ccfg: &CorrectionConfig,
) -> (Mask<f32>, Vec<f64>) {
    assert!(ccfg.alpha >= 0.0, "correction alpha must be >= 0");
    let loss_cfg = LossConfig::default();
    let mut current = pred_t.clone();
    let mut trace = Vec::with_capacity(ccfg.iterations + 1);

    for _ in 0..=ccfg.iterations {
        let mut tape: Tape<f32> = Tape::new();
        let tw = TapedWeights::stage(&mut tape, weights, false);
        let x_t = stage_frame(&mut tape, frame_t);
        let x_1 = stage_frame(&mut tape, frame_1);
        let taped = TapedMask::stage(&mut tape, &current, true);
        let out = segment(&mut tape, cfg, &tw, &[(x_t, &taped)], x_1);
        let gt = TapedMask::stage(&mut tape, gt_1, false);
        let loss = seg_loss_objects(&mut tape, &out.object_planes, &gt.planes, &loss_cfg);
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            break;
        }
        trace.push(loss_val);
        if trace.len() > ccfg.iterations {
            break; // final loss recorded, no further update
        }

        let grads = tape.backward(loss);
        let mut next = current.clone();
        let mut finite = true;
        let hw = cfg.height * cfg.width;
        for (o, &plane_id) in taped.planes.iter().enumerate() {
            if let Some(g) = grads.get(plane_id) {
                if !g.all_finite() {
                    finite = false;
                    break;
                }
                let sup = g.data().iter().fold(0f32, |m, &v| m.max(v.abs()));
                if sup == 0.0 {
                    continue; // plane at a stationary point
                }
                let dst = &mut next.planes_mut().data_mut()[o * hw..(o + 1) * hw];
                for (d, &gv) in dst.iter_mut().zip(g.data()) {
                    *d -= (ccfg.alpha * (gv / sup) as f64) as f32;
                    if ccfg.clamp {
                        *d = d.clamp(0.0, 1.0);
                    }
                }
            }
        }
        if !finite || !next.planes().all_finite() {
            break;
        }
        current = next;
    }
    (current, trace)
}

#[derive(Debug, Serialize)]
pub struct PropagationResult {
    #[serde(skip)]
    pub masks: Vec<Mask<f32>>,
    pub seconds: f64,
    pub fps: f64,
    pub corrected_frames: Vec<usize>,
    /// Reconstruction-loss traces, one per corrected frame.
    pub traces: Vec<Vec<f64>>,
}

/// Propagate the first-frame mask through the sequence. `masks[0]` is the
/// given first mask; `masks[t]` the prediction at frame t. With
/// `memory_degradation` set, long-term memory entries under the `Mem`
/// strategy hold degraded ground-truth masks (refined first when correction
/// is enabled) instead of the model's own predictions.
pub fn propagate(
    cfg: &ModelConfig,
    weights: &Weights<f32>,
    seq: &VideoSequence,
    first_mask: &Mask<f32>,
    icfg: &InferConfig,
) -> PropagationResult {
    assert!(seq.len() >= 2, "propagation needs at least 2 frames");
    let start = Instant::now();

    let mut masks: Vec<Mask<f32>> = vec![first_mask.clone()];
    // long-term memory for the Mem strategy: (frame index, mask). The mask
    // can differ from `masks[i]` when memory degradation is active.
    let mut stored: Vec<(usize, Mask<f32>)> = Vec::new();
    let mut corrected_frames = Vec::new();
    let mut traces = Vec::new();
    let degrading = icfg.memory_degradation != Degradation::None;

    for t in 1..seq.len() {
        let refs_src: Vec<(usize, &Mask<f32>)> = match icfg.strategy {
            Strategy::First => vec![(0, &masks[0])],
            Strategy::Prev => vec![(t - 1, &masks[t - 1])],
            Strategy::FirstPrev => {
                if t == 1 {
                    vec![(0, &masks[0])]
                } else {
                    vec![(0, &masks[0]), (t - 1, &masks[t - 1])]
                }
            }
            Strategy::Mem { period } => {
                assert!(period >= 1, "memory period must be >= 1");
                let mut v: Vec<(usize, &Mask<f32>)> = vec![(0, &masks[0])];
                v.extend(stored.iter().map(|(i, m)| (*i, m)));
                if t > 1 && !v.iter().any(|&(i, _)| i == t - 1) {
                    v.push((t - 1, &masks[t - 1]));
                }
                v
            }
        };

        let mut tape: Tape<f32> = Tape::new();
        let tw = TapedWeights::stage(&mut tape, weights, false);
        let taped_masks: Vec<TapedMask> = refs_src
            .iter()
            .map(|&(_, m)| TapedMask::stage(&mut tape, m, false))
            .collect();
        let refs: Vec<_> = refs_src
            .iter()
            .zip(&taped_masks)
            .map(|(&(i, _), m)| (stage_frame(&mut tape, &seq.frames[i]), m))
            .collect();
        let target = stage_frame(&mut tape, &seq.frames[t]);
        let out = segment(&mut tape, cfg, &tw, &refs, target);
        let mut pred = out.to_mask(&tape);
        drop(tape);
        drop(refs_src);

        if icfg.correction.enabled && !degrading && (t - 1) % icfg.correction.period == 0 {
            let (refined, trace) = gradient_correct(
                cfg,
                weights,
                &seq.frames[t],
                &pred,
                &seq.frames[0],
                first_mask,
                &icfg.correction,
            );
            pred = refined;
            corrected_frames.push(t);
            traces.push(trace);
        }

        if let Strategy::Mem { period } = icfg.strategy {
            if (t - 1) % period == 0 {
                let entry = if degrading {
                    let gt = seq.masks[t]
                        .as_ref()
                        .expect("memory degradation needs a ground-truth mask at stored frames");
                    let mut replaced = degrade_mask(gt, icfg.memory_degradation);
                    if icfg.correction.enabled {
                        let (refined, trace) = gradient_correct(
                            cfg,
                            weights,
                            &seq.frames[t],
                            &replaced,
                            &seq.frames[0],
                            first_mask,
                            &icfg.correction,
                        );
                        replaced = refined;
                        corrected_frames.push(t);
                        traces.push(trace);
                    }
                    replaced
                } else {
                    pred.clone()
                };
                stored.push((t, entry));
            }
        }
        masks.push(pred);
    }

    let seconds = start.elapsed().as_secs_f64();
    let propagated = (seq.len() - 1) as f64;
    PropagationResult {
        masks,
        seconds,
        fps: if seconds > 0.0 { propagated / seconds } else { 0.0 },
        corrected_frames,
        traces,
    }
}
