//! Cyclic-consistency training loop.
//!
//! Each step samples a 3-frame clip (l < a < t). The annotated first clip
//! frame seeds the memory, the intermediate and final frames are segmented
//! forward, and (in cyclic mode) the final prediction is used as a reference
//! to re-segment the first frame. The loss at the final frame plus the loss
//! at the reconstructed first frame is minimized with Adam.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::loss::{seg_loss_objects, LossConfig};
use crate::model::{save_checkpoint, ModelConfig, Weights};
use crate::segnet::{segment, stage_frame, TapedMask, TapedWeights};
use crate::seqio::VideoSequence;
use crate::tape::{Grads, Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CyclicMode {
    /// First-frame reconstruction reads only the final prediction.
    Simple,
    /// Reconstruction reads every predicted frame of the clip.
    FullHistory,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clips per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Cyclic reconstruction term on/off (off = plain forward training).
    pub cyclic: bool,
    pub cyclic_mode: CyclicMode,
    /// Cut the gradient path through predictions used as cycle references.
    pub detach_cycle: bool,
    /// Max clip span in frames: base + step * (epoch / period).
    pub curriculum_base: usize,
    pub curriculum_step: usize,
    pub curriculum_period: usize,
    /// Optimizer steps per epoch; 0 means one pass over the train split.
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            gamma: 1.0,
            seed: 0,
            cyclic: true,
            cyclic_mode: CyclicMode::Simple,
            detach_cycle: false,
            curriculum_base: 5,
            curriculum_step: 5,
            curriculum_period: 20,
            steps_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::Config("Adam betas must be in [0, 1)".into()));
        }
        if self.curriculum_base < 2 {
            return Err(CoreError::Config("curriculum base must be >= 2".into()));
        }
        if self.curriculum_period == 0 {
            return Err(CoreError::Config("curriculum period must be >= 1".into()));
        }
        Ok(())
    }

    /// Max distance between the first and last sampled frame at this epoch.
    pub fn interval(&self, epoch: usize) -> usize {
        self.curriculum_base + self.curriculum_step * (epoch / self.curriculum_period)
    }
}

/// Adam with bias correction; state is keyed by weight name.
pub struct Adam {
    m: Weights<f32>,
    v: Weights<f32>,
    t: u64,
}

impl Adam {
    pub fn new(weights: &Weights<f32>) -> Self {
        Adam {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut Weights<f32>, grads: &Weights<f32>, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, w) in weights.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = (b1 * *mi as f64 + (1.0 - b1) * *gi as f64) as f32;
            }
            let v = self.v.get_mut(name);
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = (b2 * *vi as f64 + (1.0 - b2) * (*gi as f64).powi(2)) as f32;
            }
            for ((wi, mi), vi) in w.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = *mi as f64 / bc1;
                let v_hat = *vi as f64 / bc2;
                *wi -= (cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps)) as f32;
            }
        }
    }
}

/// Three distinct sorted frame indices with span at most `interval`,
/// rejection-sampled. The clip can start anywhere in the sequence.
pub fn sample_clip(rng: &mut impl Rng, seq_len: usize, interval: usize) -> [usize; 3] {
    assert!(seq_len >= 3, "need at least 3 frames, got {seq_len}");
    assert!(interval >= 2, "interval {interval} cannot hold 3 distinct frames");
    loop {
        let mut idx = [0usize; 3];
        for v in &mut idx {
            *v = rng.gen_range(0..seq_len);
        }
        idx.sort_unstable();
        if idx[0] != idx[1] && idx[1] != idx[2] && idx[2] - idx[0] <= interval {
            return idx;
        }
    }
}

fn gt_planes<S: crate::scalar::Scalar>(
    tape: &mut Tape<S>,
    mask: &crate::mask::Mask<S>,
) -> Vec<TensorId> {
    let (h, w) = (mask.height(), mask.width());
    (0..mask.num_objects())
        .map(|o| {
            let t = Tensor::new(vec![1, h, w], mask.plane(o).to_vec());
            tape.constant(t)
        })
        .collect()
}

fn require_mask<'a>(seq: &'a VideoSequence, t: usize) -> &'a crate::mask::Mask<f32> {
    seq.masks[t]
        .as_ref()
        .unwrap_or_else(|| panic!("training sequence {:?} lacks a mask at frame {t}", seq.name))
}

pub struct StepLosses {
    pub forward: f64,
    pub cycle: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.forward + self.cycle
    }
}

/// One clip's losses and weight gradients.
pub fn train_step(
    cfg: &ModelConfig,
    weights: &Weights<f32>,
    train: &TrainConfig,
    seq: &VideoSequence,
    clip: [usize; 3],
) -> (StepLosses, Grads<f32>) {
    let [l, a, t] = clip;
    let mut tape: Tape<f32> = Tape::new();
    let tw = TapedWeights::stage(&mut tape, weights, true);
    let loss_cfg = LossConfig {
        gamma: train.gamma,
        ..LossConfig::default()
    };

    let x_l = stage_frame(&mut tape, &seq.frames[l]);
    let x_a = stage_frame(&mut tape, &seq.frames[a]);
    let x_t = stage_frame(&mut tape, &seq.frames[t]);
    let y_l = TapedMask::stage(&mut tape, require_mask(seq, l), false);

    // forward: first frame seeds memory, then predict a, then t
    let pred_a = segment(&mut tape, &cfg, &tw, &[(x_l, &y_l)], x_a);
    let mask_a = TapedMask {
        planes: pred_a.object_planes.clone(),
    };
    let pred_t = segment(
        &mut tape,
        &cfg,
        &tw,
        &[(x_l, &y_l), (x_a, &mask_a)],
        x_t,
    );

    let gt_t = gt_planes(&mut tape, require_mask(seq, t));
    let forward_loss = seg_loss_objects(&mut tape, &pred_t.object_planes, &gt_t, &loss_cfg);

    let total = if train.cyclic {
        let as_cycle_ref = |tape: &mut Tape<f32>, planes: &[TensorId]| TapedMask {
            planes: planes
                .iter()
                .map(|&p| if train.detach_cycle { tape.detach(p) } else { p })
                .collect(),
        };
        let mask_t = as_cycle_ref(&mut tape, &pred_t.object_planes);
        let mask_a_cycle = as_cycle_ref(&mut tape, &pred_a.object_planes);
        let refs: Vec<(TensorId, &TapedMask)> = match train.cyclic_mode {
            CyclicMode::Simple => vec![(x_t, &mask_t)],
            CyclicMode::FullHistory => vec![(x_a, &mask_a_cycle), (x_t, &mask_t)],
        };
        let pred_l = segment(&mut tape, &cfg, &tw, &refs, x_l);
        let gt_l = gt_planes(&mut tape, require_mask(seq, l));
        let cycle = seg_loss_objects(&mut tape, &pred_l.object_planes, &gt_l, &loss_cfg);
        let total = tape.add(forward_loss, cycle);
        (total, tape.value(cycle).item() as f64)
    } else {
        (forward_loss, 0.0)
    };
    let (total_id, cycle_val) = total;

    let losses = StepLosses {
        forward: tape.value(forward_loss).item() as f64,
        cycle: cycle_val,
    };
    let grads = tape.backward(total_id);
    drop_tape_check(&tape, &tw, &grads, &losses, seq, clip);
    (losses, grads)
}

fn drop_tape_check(
    tape: &Tape<f32>,
    tw: &TapedWeights,
    grads: &Grads<f32>,
    losses: &StepLosses,
    seq: &VideoSequence,
    clip: [usize; 3],
) {
    let _ = tape;
    let finite = losses.forward.is_finite()
        && losses.cycle.is_finite()
        && tw
            .iter()
            .all(|(_, &id)| grads.get(id).map_or(true, |g| g.all_finite()));
    assert!(
        finite,
        "non-finite loss/gradient on sequence {:?}, clip {:?} (forward {}, cycle {})",
        seq.name, clip, losses.forward, losses.cycle
    );
}

/// Fold a step's gradients into a named accumulator.
fn accumulate(acc: &mut Weights<f32>, tw: &TapedWeights, grads: &mut Grads<f32>, scale: f32) {
    for (name, &id) in tw.iter() {
        if let Some(g) = grads.take(id) {
            let t = acc.get_mut(name);
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub forward: f64,
    pub cycle: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: Weights<f32>,
    pub log: Vec<LogRow>,
}

/// Full training run over the given (fully annotated) sequences.
/// Deterministic for a fixed seed and sequence list.
pub fn run_training(
    cfg: &ModelConfig,
    train: &TrainConfig,
    sequences: &[VideoSequence],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate()?;
    if sequences.is_empty() {
        return Err(CoreError::Dataset("no training sequences".into()));
    }
    for s in sequences {
        if s.height() != cfg.height || s.width() != cfg.width {
            return Err(CoreError::Dataset(format!(
                "sequence {:?} is {}x{}, model expects {}x{}",
                s.name,
                s.width(),
                s.height(),
                cfg.width,
                cfg.height
            )));
        }
    }

    let mut weights: Weights<f32> = Weights::init(cfg, train.seed);
    let mut adam = Adam::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut log = Vec::new();

    let steps = if train.steps_per_epoch > 0 {
        train.steps_per_epoch
    } else {
        (sequences.len() + train.batch_size - 1) / train.batch_size
    };

    for epoch in 0..train.epochs {
        let interval = train.interval(epoch);
        for step in 0..steps {
            let mut grad_acc = weights.zeros_like();
            let mut forward = 0.0;
            let mut cycle = 0.0;
            for _ in 0..train.batch_size {
                let seq = &sequences[rng.gen_range(0..sequences.len())];
                let clip = sample_clip(&mut rng, seq.len(), interval);
                let tape_scale = 1.0 / train.batch_size as f32;
                // the taped weight ids are rebuilt per step; re-stage to map them
                let (losses, mut grads) = train_step(cfg, &weights, train, seq, clip);
                let mut probe: Tape<f32> = Tape::new();
                let tw = TapedWeights::stage(&mut probe, &weights, true);
                accumulate(&mut grad_acc, &tw, &mut grads, tape_scale);
                forward += losses.forward / train.batch_size as f64;
                cycle += losses.cycle / train.batch_size as f64;
            }
            adam.step(&mut weights, &grad_acc, train);
            if !weights.all_finite() {
                return Err(CoreError::Diverged(format!(
                    "non-finite weights at epoch {epoch}, step {step}"
                )));
            }
            log.push(LogRow {
                epoch,
                step,
                forward,
                cycle,
                total: forward + cycle,
            });
        }
    }

    Ok(TrainOutcome { weights, log })
}

pub fn write_loss_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut out = String::from("epoch,step,forward,cycle,total\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.step, r.forward, r.cycle, r.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Train and persist the checkpoint plus the loss log.
pub fn train_to_dir(
    cfg: &ModelConfig,
    train: &TrainConfig,
    sequences: &[VideoSequence],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let outcome = run_training(cfg, train, sequences)?;
    save_checkpoint(&out_dir.join("model.cvos"), cfg, &outcome.weights)?;
    write_loss_csv(&out_dir.join("loss.csv"), &outcome.log)?;
    Ok(outcome)
}
