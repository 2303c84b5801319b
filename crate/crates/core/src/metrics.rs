//! Region and contour quality measures plus suite-level evaluation reports.

use serde::Serialize;

use crate::mask::Mask;

/// Intersection-over-union of two binary maps. Two empty masks agree
/// perfectly and score 1.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "jaccard: size mismatch");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Boundary pixels: set pixels with at least one 4-neighbor outside the mask
/// (image border counts as outside), i.e. mask XOR its 4-neighbor erosion.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let mut b = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let interior = y > 0
                && y + 1 < h
                && x > 0
                && x + 1 < w
                && mask[i - w]
                && mask[i + w]
                && mask[i - 1]
                && mask[i + 1];
            b[i] = !interior;
        }
    }
    b
}

/// Match tolerance in pixels for an h x w canvas.
pub fn boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((0.0075 * diag).round() as usize).max(1)
}

/// Dilate a binary map by a Euclidean disc of radius r (closed ball).
fn dilate_disc(map: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r2 = (r * r) as i64;
    let ri = r as i64;
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !map[(y * w as i64 + x) as usize] {
                continue;
            }
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dy * dy + dx * dx > r2 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        out[(ny * w as i64 + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Contour F-measure: precision/recall of boundary pixels under a Euclidean
/// disc tolerance of `boundary_tolerance(h, w)`. Two empty boundaries score
/// 1, exactly one empty scores 0.
pub fn boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize) -> f64 {
    let pb = boundary(pred, h, w);
    let gb = boundary(gt, h, w);
    let np: usize = pb.iter().filter(|&&v| v).count();
    let ng: usize = gb.iter().filter(|&&v| v).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let r = boundary_tolerance(h, w);
    let gb_dil = dilate_disc(&gb, h, w, r);
    let pb_dil = dilate_disc(&pb, h, w, r);
    let matched_p = pb.iter().zip(&gb_dil).filter(|(&p, &d)| p && d).count();
    let matched_g = gb.iter().zip(&pb_dil).filter(|(&g, &d)| g && d).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn binarize(m: &Mask<f32>, object: usize) -> Vec<bool> {
    // per-object binary map from the aggregated label assignment
    let labels = m.label_map();
    labels.iter().map(|&l| l as usize == object + 1).collect()
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SequenceScore {
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_sequence: Vec<(String, SequenceScore)>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    /// Frames per second over the predictions being scored; 0 if unknown.
    pub fps: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,J,F,J&F\n");
        for (name, s) in &self.per_sequence {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                name,
                s.j,
                s.f,
                (s.j + s.f) / 2.0
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6}\n",
            self.j_mean, self.f_mean, self.jf_mean
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Score one sequence: frames after the annotated first frame that carry
/// ground truth, averaged over frames within each object, then over objects.
pub fn score_sequence(gt: &[Option<Mask<f32>>], pred: &[Mask<f32>], objects: usize) -> SequenceScore {
    assert_eq!(gt.len(), pred.len(), "prediction/ground-truth length mismatch");
    let (h, w) = (pred[0].height(), pred[0].width());
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for o in 0..objects {
        let mut j_obj = 0.0;
        let mut f_obj = 0.0;
        let mut n = 0usize;
        for t in 1..gt.len() {
            let Some(g) = &gt[t] else { continue };
            let gb = binarize(g, o);
            let pb = binarize(&pred[t], o);
            j_obj += jaccard(&pb, &gb);
            f_obj += boundary_f(&pb, &gb, h, w);
            n += 1;
        }
        assert!(n > 0, "no scoreable frames for object {o}");
        j_sum += j_obj / n as f64;
        f_sum += f_obj / n as f64;
    }
    SequenceScore {
        j: j_sum / objects as f64,
        f: f_sum / objects as f64,
    }
}

/// Suite-level report: per-sequence scores averaged with equal sequence
/// weight. `seconds` (wall time spent producing the predictions) yields fps.
pub fn build_report(
    scored: Vec<(String, SequenceScore)>,
    total_frames: usize,
    seconds: f64,
) -> EvalReport {
    assert!(!scored.is_empty(), "empty evaluation");
    let n = scored.len() as f64;
    let j_mean = scored.iter().map(|(_, s)| s.j).sum::<f64>() / n;
    let f_mean = scored.iter().map(|(_, s)| s.f).sum::<f64>() / n;
    EvalReport {
        per_sequence: scored,
        j_mean,
        f_mean,
        jf_mean: (j_mean + f_mean) / 2.0,
        fps: if seconds > 0.0 {
            total_frames as f64 / seconds
        } else {
            0.0
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = true;
            }
        }
        m
    }

    #[test]
    fn jaccard_pixel_count_oracle() {
        // 4x4 and 4x4 squares overlapping in a 2x4 strip:
        // inter = 8, union = 16 + 16 - 8 = 24
        let a = rect(16, 16, 2, 2, 6, 6);
        let b = rect(16, 16, 4, 2, 8, 6);
        assert!((jaccard(&a, &b) - 8.0 / 24.0).abs() < 1e-12);
        assert_eq!(jaccard(&a, &a), 1.0);
        let empty = vec![false; 256];
        assert_eq!(jaccard(&empty, &empty), 1.0);
        assert_eq!(jaccard(&a, &empty), 0.0);
    }

    #[test]
    fn boundary_of_filled_rect() {
        // 5x5 square: boundary is the 16-pixel ring
        let m = rect(12, 12, 3, 3, 8, 8);
        let b = boundary(&m, 12, 12);
        assert_eq!(b.iter().filter(|&&v| v).count(), 16);
        // pixels touching the image border are boundary pixels
        let full = vec![true; 9];
        let bf = boundary(&full, 3, 3);
        assert_eq!(bf.iter().filter(|&&v| v).count(), 8);
    }

    #[test]
    fn tolerance_formula() {
        // 64x64: diag = 90.51, 0.0075 * diag = 0.679 -> rounds to 1
        assert_eq!(boundary_tolerance(64, 64), 1);
        // 480x854: diag = 979.7, 0.0075 * diag = 7.35 -> 7
        assert_eq!(boundary_tolerance(480, 854), 7);
        // tiny canvases are floored at 1
        assert_eq!(boundary_tolerance(8, 8), 1);
    }

    #[test]
    fn boundary_f_edge_cases() {
        let empty = vec![false; 64];
        let m = rect(8, 8, 2, 2, 6, 6);
        assert_eq!(boundary_f(&empty, &empty, 8, 8), 1.0);
        assert_eq!(boundary_f(&m, &empty, 8, 8), 0.0);
        assert_eq!(boundary_f(&empty, &m, 8, 8), 0.0);
        assert_eq!(boundary_f(&m, &m, 8, 8), 1.0);
    }

    /// Independent pairwise-distance implementation of the same measure.
    fn boundary_f_oracle(pred: &[bool], gt: &[bool], h: usize, w: usize) -> f64 {
        let pb = boundary(pred, h, w);
        let gb = boundary(gt, h, w);
        let pts = |b: &[bool]| -> Vec<(i64, i64)> {
            (0..h * w)
                .filter(|&i| b[i])
                .map(|i| ((i / w) as i64, (i % w) as i64))
                .collect()
        };
        let (pp, gp) = (pts(&pb), pts(&gb));
        if pp.is_empty() && gp.is_empty() {
            return 1.0;
        }
        if pp.is_empty() || gp.is_empty() {
            return 0.0;
        }
        let r2 = {
            let r = boundary_tolerance(h, w) as i64;
            r * r
        };
        let near = |a: &(i64, i64), set: &[(i64, i64)]| {
            set.iter()
                .any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= r2)
        };
        let p = pp.iter().filter(|a| near(a, &gp)).count() as f64 / pp.len() as f64;
        let r = gp.iter().filter(|a| near(a, &pp)).count() as f64 / gp.len() as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    proptest! {
        #[test]
        fn boundary_f_matches_pairwise_oracle(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.gen_range(4..=12), rng.gen_range(4..=12));
            let density_p = rng.gen_range(0.05..0.6);
            let density_g = rng.gen_range(0.05..0.6);
            let pred: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density_p)).collect();
            let gt: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density_g)).collect();
            let got = boundary_f(&pred, &gt, h, w);
            let want = boundary_f_oracle(&pred, &gt, h, w);
            prop_assert!((got - want).abs() < 1e-12, "got {got}, oracle {want}");
        }

        #[test]
        fn jaccard_symmetric_and_bounded(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 64;
            let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let j = jaccard(&a, &b);
            prop_assert_eq!(j, jaccard(&b, &a));
            prop_assert!((0.0..=1.0).contains(&j));
        }
    }

    #[test]
    fn report_averaging_and_serialization() {
        let scored = vec![
            ("a".to_string(), SequenceScore { j: 0.8, f: 0.6 }),
            ("b".to_string(), SequenceScore { j: 0.4, f: 0.2 }),
        ];
        let report = build_report(scored, 30, 2.0);
        assert!((report.j_mean - 0.6).abs() < 1e-12);
        assert!((report.f_mean - 0.4).abs() < 1e-12);
        assert!((report.jf_mean - 0.5).abs() < 1e-12);
        assert!((report.fps - 15.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("sequence,J,F,J&F\n"));
        assert!(csv.contains("mean,0.600000,0.400000,0.500000"));
        assert!(report.to_json().contains("\"jf_mean\""));
    }

    #[test]
    fn perfect_predictions_score_one() {
        use crate::synth::{generate_synthetic, SynthSpec};
        let seq = generate_synthetic(&SynthSpec { seed: 2, ..SynthSpec::default() }).unwrap();
        let preds: Vec<_> = seq.masks.iter().map(|m| m.clone().unwrap()).collect();
        let s = score_sequence(&seq.masks, &preds, seq.objects);
        assert_eq!(s.j, 1.0);
        assert_eq!(s.f, 1.0);
    }
}
