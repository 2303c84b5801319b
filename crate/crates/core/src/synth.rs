//! Synthetic moving-shapes video benchmark.
//!
//! Sequences contain target objects (with ground-truth masks) and distractor
//! objects that are rendered into the frames but absent from the masks. With
//! `distractor_similarity` on, each distractor borrows a target's shape and
//! size plus its fill color up to a small perturbation, so appearance alone
//! cannot identify the target — exactly the look-alike situation that
//! provokes error propagation in sequential mask propagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mask::Mask;
use crate::seqio::VideoSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disc,
    Bar,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub num_targets: usize,
    pub num_distractors: usize,
    pub shapes: Vec<ShapeKind>,
    /// Inclusive speed range per axis, px/frame (integer motion).
    pub min_speed: i32,
    pub max_speed: i32,
    /// Per-channel perturbation applied to a borrowed target color.
    pub color_noise: u8,
    pub distractor_similarity: bool,
    pub occlusion_allowed: bool,
    /// Added to every shape's half-extent range. Larger objects keep an
    /// interior at the network's stride-4 feature resolution, which matters
    /// for receptive-field analyses.
    #[serde(default)]
    pub size_boost: i32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            length: 16,
            num_targets: 1,
            num_distractors: 1,
            shapes: vec![ShapeKind::Square, ShapeKind::Disc, ShapeKind::Bar],
            min_speed: 1,
            max_speed: 3,
            color_noise: 8,
            distractor_similarity: true,
            occlusion_allowed: false,
            size_boost: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Sprite {
    kind: ShapeKind,
    /// Half extents; the full bounding box is (2*hx+1) x (2*hy+1).
    hx: i32,
    hy: i32,
    /// Center position and velocity.
    x: i32,
    y: i32,
    vx: i32,
    vy: i32,
    /// Motion bounds for the center (inclusive).
    bounds: (i32, i32, i32, i32),
    color: [u8; 3],
}

impl Sprite {
    fn covers(&self, px: i32, py: i32) -> bool {
        let (dx, dy) = (px - self.x, py - self.y);
        match self.kind {
            ShapeKind::Square | ShapeKind::Bar => dx.abs() <= self.hx && dy.abs() <= self.hy,
            ShapeKind::Disc => {
                let r = self.hx; // discs are round: hx == hy
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn step(&mut self) {
        let (x0, x1, y0, y1) = self.bounds;
        self.x += self.vx;
        self.y += self.vy;
        if self.x < x0 {
            self.x = 2 * x0 - self.x;
            self.vx = -self.vx;
        } else if self.x > x1 {
            self.x = 2 * x1 - self.x;
            self.vx = -self.vx;
        }
        if self.y < y0 {
            self.y = 2 * y0 - self.y;
            self.vy = -self.vy;
        } else if self.y > y1 {
            self.y = 2 * y1 - self.y;
            self.vy = -self.vy;
        }
        // reflected positions stay in range because speeds are small
        debug_assert!(self.x >= x0 && self.x <= x1 && self.y >= y0 && self.y <= y1);
    }
}

const BACKGROUND: [u8; 3] = [24, 24, 24];

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.length < 2 {
        return Err(CoreError::Config("sequence length must be >= 2".into()));
    }
    if spec.num_targets == 0 {
        return Err(CoreError::Config("need at least one target object".into()));
    }
    if spec.shapes.is_empty() {
        return Err(CoreError::Config("no shape kinds enabled".into()));
    }
    if spec.min_speed < 1 || spec.max_speed < spec.min_speed {
        return Err(CoreError::Config("bad speed range".into()));
    }
    let objects = spec.num_targets + spec.num_distractors;
    // Without occlusion every object moves in its own horizontal band.
    let band = spec.height / objects.max(1);
    if spec.size_boost < 0 {
        return Err(CoreError::Config("size boost must be >= 0".into()));
    }
    // largest shape bounding box + margin
    let min_extent = 13 + 2 * spec.size_boost as usize;
    if !spec.occlusion_allowed && band < min_extent {
        return Err(CoreError::Config(format!(
            "{} objects do not fit {} rows without occlusion (band {} < {})",
            objects, spec.height, band, min_extent
        )));
    }
    if spec.width < min_extent || spec.height < min_extent {
        return Err(CoreError::Config("canvas too small for any shape".into()));
    }
    Ok(())
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    // bright, saturated-ish colors that stay away from the background
    [
        rng.gen_range(90..=255),
        rng.gen_range(90..=255),
        rng.gen_range(90..=255),
    ]
}

fn perturb_color(base: [u8; 3], noise: u8, rng: &mut impl Rng) -> [u8; 3] {
    let mut c = base;
    for ch in &mut c {
        let d = rng.gen_range(-(noise as i32)..=noise as i32);
        *ch = (*ch as i32 + d).clamp(0, 255) as u8;
    }
    c
}

fn make_sprite(
    spec: &SynthSpec,
    band: Option<(i32, i32)>,
    color: [u8; 3],
    like: Option<(ShapeKind, i32, i32)>,
    rng: &mut impl Rng,
) -> Sprite {
    // A look-alike sprite clones another sprite's geometry so that only
    // position and the reference mask can tell the two apart.
    let (kind, hx, hy) = like.unwrap_or_else(|| {
        let kind = spec.shapes[rng.gen_range(0..spec.shapes.len())];
        let b = spec.size_boost;
        let (hx, hy) = match kind {
            ShapeKind::Square => {
                let h = rng.gen_range(3..=5) + b;
                (h, h)
            }
            ShapeKind::Disc => {
                let r = rng.gen_range(3..=5) + b;
                (r, r)
            }
            ShapeKind::Bar => (rng.gen_range(5..=7) + b, 2 + b),
        };
        (kind, hx, hy)
    });
    let (y0, y1) = band.unwrap_or((0, spec.height as i32 - 1));
    let xb = (hx, spec.width as i32 - 1 - hx);
    let yb = ((y0 + hy).min(y1 - hy), (y1 - hy).max(y0 + hy));
    let speed = |rng: &mut dyn rand::RngCore| {
        let s = rng.gen_range(spec.min_speed..=spec.max_speed);
        if rng.gen_bool(0.5) {
            s
        } else {
            -s
        }
    };
    Sprite {
        kind,
        hx,
        hy,
        x: rng.gen_range(xb.0..=xb.1),
        y: rng.gen_range(yb.0.min(yb.1)..=yb.1.max(yb.0)),
        vx: speed(rng),
        vy: speed(rng),
        bounds: (xb.0, xb.1, yb.0.min(yb.1), yb.1.max(yb.0)),
        color,
    }
}

/// Generate one sequence with full ground truth, deterministically per seed.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<VideoSequence> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let objects = spec.num_targets + spec.num_distractors;

    let target_colors: Vec<[u8; 3]> = (0..spec.num_targets)
        .map(|_| random_color(&mut rng))
        .collect();
    let distractor_colors: Vec<[u8; 3]> = (0..spec.num_distractors)
        .map(|i| {
            if spec.distractor_similarity {
                let base = target_colors[i % target_colors.len()];
                perturb_color(base, spec.color_noise, &mut rng)
            } else {
                random_color(&mut rng)
            }
        })
        .collect();

    // Shuffled band order: a target is equally likely in any band, so
    // position alone never identifies it.
    let mut band_order: Vec<usize> = (0..objects).collect();
    for i in (1..objects).rev() {
        band_order.swap(i, rng.gen_range(0..=i));
    }
    let band_of = |slot: usize| -> Option<(i32, i32)> {
        if spec.occlusion_allowed {
            None
        } else {
            let bh = h / objects;
            let top = (band_order[slot] * bh) as i32;
            Some((top, top + bh as i32 - 1))
        }
    };

    let mut targets: Vec<Sprite> = (0..spec.num_targets)
        .map(|i| make_sprite(spec, band_of(i), target_colors[i], None, &mut rng))
        .collect();
    let mut distractors: Vec<Sprite> = (0..spec.num_distractors)
        .map(|i| {
            let like = if spec.distractor_similarity {
                let t = &targets[i % targets.len()];
                Some((t.kind, t.hx, t.hy))
            } else {
                None
            };
            make_sprite(
                spec,
                band_of(spec.num_targets + i),
                distractor_colors[i],
                like,
                &mut rng,
            )
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.length);
    let mut masks = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            for s in targets.iter_mut().chain(distractors.iter_mut()) {
                s.step();
            }
        }
        // Paint with an ownership buffer: distractors first, targets on top
        // (later targets over earlier). Masks follow visible extents exactly.
        let mut rgb = vec![0u8; 3 * h * w];
        let mut owner = vec![0u8; h * w]; // 0 = bg/distractor, i = target i
        for (i, px) in rgb.chunks_exact_mut(3).enumerate() {
            let (y, x) = ((i / w) as i32, (i % w) as i32);
            let mut color = BACKGROUND;
            let mut own = 0u8;
            for s in &distractors {
                if s.covers(x, y) {
                    color = s.color;
                    own = 0;
                }
            }
            for (ti, s) in targets.iter().enumerate() {
                if s.covers(x, y) {
                    color = s.color;
                    own = (ti + 1) as u8;
                }
            }
            px.copy_from_slice(&color);
            owner[i] = own;
        }

        // planar [3, H, W] f32 in [0, 1]
        let mut data = vec![0f32; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = rgb[3 * i + c] as f32 / 255.0;
            }
        }
        frames.push(Tensor::new(vec![3, h, w], data));
        masks.push(Some(Mask::from_label_map(&owner, h, w, spec.num_targets)));
    }

    Ok(VideoSequence {
        name: format!("synth-{:04}", spec.seed),
        frames,
        masks,
        objects: spec.num_targets,
    })
}

/// The sequences of a train/eval suite, in memory: seeds, target counts
/// (1-2), and shape mixes vary per sequence.
pub fn suite_sequences(
    base: &SynthSpec,
    num_train: usize,
    num_eval: usize,
) -> Result<(Vec<VideoSequence>, Vec<VideoSequence>)> {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for i in 0..num_train + num_eval {
        let is_train = i < num_train;
        let split = if is_train { "train" } else { "eval" };
        // Eval targets are discs: of the built-in shapes only a disc differs
        // from its own bounding box, so box-degradation robustness runs on
        // the eval split measure a real perturbation.
        let shapes = if is_train {
            base.shapes.clone()
        } else {
            vec![ShapeKind::Disc]
        };
        // Look-alike distractors stay a training-split device: they force the
        // network to rely on the reference mask. Held-out sequences use
        // independently drawn distractors so evaluation and receptive-field
        // analyses run against ordinary background clutter rather than a
        // pixel-identical clone of the target.
        let spec = SynthSpec {
            seed: base.seed + i as u64,
            num_targets: 1 + (i % 2),
            shapes,
            distractor_similarity: is_train && base.distractor_similarity,
            ..base.clone()
        };
        let mut seq = generate_synthetic(&spec)?;
        seq.name = format!("{}-{:04}", split, i);
        if is_train { &mut train } else { &mut eval }.push(seq);
    }
    Ok((train, eval))
}

/// Write a suite under `root` with a manifest recording the splits.
pub fn generate_suite(
    root: &std::path::Path,
    base: &SynthSpec,
    num_train: usize,
    num_eval: usize,
) -> Result<crate::seqio::SuiteManifest> {
    std::fs::create_dir_all(root)?;
    let (train, eval) = suite_sequences(base, num_train, num_eval)?;
    let mut sequences = Vec::new();
    for (seq, split) in train
        .iter()
        .map(|s| (s, "train"))
        .chain(eval.iter().map(|s| (s, "eval")))
    {
        crate::seqio::save_sequence(root, seq)?;
        sequences.push(crate::seqio::SuiteEntry {
            name: seq.name.clone(),
            split: split.to_string(),
            objects: seq.objects,
            length: seq.len(),
        });
    }
    let manifest = crate::seqio::SuiteManifest {
        height: base.height,
        width: base.width,
        sequences,
    };
    manifest.save(root)?;
    Ok(manifest)
}
