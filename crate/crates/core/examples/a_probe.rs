//! Temporary probe mirroring the acceptance-gate evaluations on
//! pre-trained checkpoints.

use std::path::PathBuf;

use cyclevos_core::infer::{propagate, CorrectionConfig, Degradation, InferConfig, Strategy};
use cyclevos_core::metrics::score_sequence;
use cyclevos_core::model::{load_checkpoint, Weights};
use cyclevos_core::seqio::VideoSequence;
use cyclevos_core::synth::{suite_sequences, SynthSpec};

fn eval_jf(
    weights: &Weights<f32>,
    seqs: &[VideoSequence],
    icfg: &InferConfig,
    degrade: Degradation,
) -> f64 {
    let model = cyclevos_core::model::ModelConfig {
        height: 64,
        width: 64,
        feat_channels: 8,
        key_channels: 4,
        value_channels: 8,
    };
    let icfg = InferConfig {
        memory_degradation: degrade,
        ..*icfg
    };
    let mut sum = 0.0;
    for seq in seqs {
        let result = propagate(&model, weights, seq, seq.first_mask(), &icfg);
        let s = score_sequence(&seq.masks, &result.masks, seq.objects);
        sum += (s.j + s.f) / 2.0;
    }
    sum / seqs.len() as f64
}

fn no_correction(strategy: Strategy) -> InferConfig {
    InferConfig {
        strategy,
        correction: CorrectionConfig {
            enabled: false,
            ..CorrectionConfig::default()
        },
        memory_degradation: Degradation::None,
    }
}

fn corrected(strategy: Strategy, alpha: f64) -> InferConfig {
    InferConfig {
        strategy,
        correction: CorrectionConfig {
            enabled: true,
            alpha,
            iterations: 10,
            period: 5,
            clamp: true,
        },
        memory_degradation: Degradation::None,
    }
}

fn main() {
    let (train, eval) = suite_sequences(&SynthSpec::default(), 20, 5).unwrap();
    let dir = std::env::args().nth(1).unwrap();
    let cyc: Vec<Weights<f32>> = (0..3)
        .map(|s| {
            load_checkpoint(&PathBuf::from(format!("{dir}/m-cyc-{s}/model.cvos")))
                .unwrap()
                .1
        })
        .collect();

    let mode = std::env::args().nth(2).unwrap_or_default();
    if mode == "select" {
        for (i, w) in cyc.iter().enumerate() {
            let s = eval_jf(w, &eval, &no_correction(Strategy::FirstPrev), Degradation::None);
            println!("select seed{i}: FirstPrev eval J&F {s:.4}");
        }
        return;
    }
    if mode != "crit9" {
    if mode != "crit6" {
    // tuning sweep, Prev strategy, train[..3]
    let tune = &train[..3];
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &alpha in &[0.01, 0.1, 0.5, 1.0, 2.0] {
        let mean = cyc
            .iter()
            .map(|w| eval_jf(w, tune, &corrected(Strategy::Prev, alpha), Degradation::None))
            .sum::<f64>()
            / 3.0;
        println!("sweep prev alpha={alpha}: tune J&F {mean:.4}");
        if mean > best.0 {
            best = (mean, alpha);
        }
    }
    let tuned = best.1;
    println!("tuned alpha = {tuned}");

    // criterion 4: corrected vs uncorrected, Prev, eval split
    for (i, w) in cyc.iter().enumerate() {
        let plain = eval_jf(w, &eval, &no_correction(Strategy::Prev), Degradation::None);
        let fixed = eval_jf(w, &eval, &corrected(Strategy::Prev, tuned), Degradation::None);
        println!("crit4 seed{i}: plain {plain:.4} corrected {fixed:.4} delta {:+.4}", fixed - plain);
    }

    }
    // criterion 6 with a recovery-alpha sweep
    let mem = Strategy::Mem { period: 5 };
    let mut cm = 0.0;
    let mut dm = 0.0;
    for (i, w) in cyc.iter().enumerate() {
        let c = eval_jf(w, &eval, &no_correction(mem), Degradation::None);
        let d = eval_jf(w, &eval, &no_correction(mem), Degradation::BoundingBox);
        println!("crit6 seed{i}: clean {c:.4} bbox {d:.4}");
        cm += c / 3.0;
        dm += d / 3.0;
    }
    for alpha in [0.05f64, 0.1, 0.2, 0.5, 1.0] {
        let mut rm = 0.0;
        let mut per = Vec::new();
        for w in &cyc {
            let r = eval_jf(
                w,
                &eval,
                &corrected(mem, alpha),
                Degradation::BoundingBox,
            );
            per.push(format!("{r:.4}"));
            rm += r / 3.0;
        }
        println!("crit6 bbox+gc a={alpha}: per-seed {per:?} mean {rm:.4}");
    }
    println!("crit6 means: clean {cm:.4} bbox {dm:.4}");

    if mode == "crit6" {
        return;
    }
    // criteria 3 and 5: cyclic-vs-baseline deltas per strategy
    let base: Vec<Weights<f32>> = (0..3)
        .map(|s| {
            load_checkpoint(&PathBuf::from(format!("{dir}/m-base-{s}/model.cvos")))
                .unwrap()
                .1
        })
        .collect();
    for (name, strategy) in [
        ("FIRST", Strategy::First),
        ("PREV", Strategy::Prev),
        ("FIRST+PREV", Strategy::FirstPrev),
        ("MEM", Strategy::Mem { period: 5 }),
    ] {
        let icfg = no_correction(strategy);
        let deltas: Vec<f64> = cyc
            .iter()
            .zip(&base)
            .map(|(c, b)| {
                eval_jf(c, &eval, &icfg, Degradation::None)
                    - eval_jf(b, &eval, &icfg, Degradation::None)
            })
            .collect();
        println!(
            "crit3/5 {name}: deltas {:?} mean {:+.4}",
            deltas.iter().map(|d| format!("{d:+.4}")).collect::<Vec<_>>(),
            deltas.iter().sum::<f64>() / 3.0
        );
    }

    }
    let _ = &train;

    // criterion 9: cycle-ERF in/out contrast and reconstruction probe
    use cyclevos_core::erf::{compute_cycle_erf, partitioned_reconstruct, ErfConfig};
    use cyclevos_core::mask::Mask;
    use cyclevos_core::metrics::jaccard;
    let model = cyclevos_core::model::ModelConfig {
        height: 64,
        width: 64,
        feat_channels: 8,
        key_channels: 4,
        value_channels: 8,
    };
    for seed in 0..3 {
    for t_probe in [4usize, 8, 12] {
    let weights = &cyc[seed];
    let ecfg = ErfConfig::default();
    let (mut pairs, mut in_wins) = (0, 0);
    let (mut j_in_sum, mut j_ex_sum) = (0.0, 0.0);
    for seq in &eval {
        // ERF on intermediate frame l, with the initial mask as target
        let l = t_probe;
        let gt_l = seq.masks[l].as_ref().unwrap();
        let erf =
            compute_cycle_erf(&model, weights, &seq.frames[l], &seq.frames[0], seq.first_mask(), &ecfg);
        let hw = model.height * model.width;
        for o in 0..seq.objects {
            let e = erf.plane(o);
            let g = gt_l.plane(o);
            let (mut is, mut inn, mut os, mut on) = (0.0f64, 0usize, 0.0f64, 0usize);
            for i in 0..hw {
                if g[i] > 0.5 {
                    is += e[i] as f64;
                    inn += 1;
                } else {
                    os += e[i] as f64;
                    on += 1;
                }
            }
            pairs += 1;
            if is / inn.max(1) as f64 > os / on.max(1) as f64 {
                in_wins += 1;
            }
        }
        // mass split: inside gt, within a 2px ring outside, far background
        {
            let (h, w) = (model.height, model.width);
            let g = gt_l.plane(0);
            let mut ring = vec![false; h * w];
            for y in 0..h as i32 {
                for x in 0..w as i32 {
                    if g[(y as usize) * w + x as usize] > 0.5 {
                        continue;
                    }
                    'scan: for dy in -2i32..=2 {
                        for dx in -2i32..=2 {
                            let (ny, nx) = (y + dy, x + dx);
                            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                                && g[(ny as usize) * w + nx as usize] > 0.5
                            {
                                ring[(y as usize) * w + x as usize] = true;
                                break 'scan;
                            }
                        }
                    }
                }
            }
            let e = erf.plane(0);
            let (mut mi, mut mr, mut mf) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..h * w {
                let v = e[i] as f64;
                if g[i] > 0.5 {
                    mi += v;
                } else if ring[i] {
                    mr += v;
                } else {
                    mf += v;
                }
            }
            let tot = (mi + mr + mf).max(1e-12);
            println!(
                "  mass {} obj1: in {:.2} ring {:.2} far {:.2}",
                seq.name,
                mi / tot,
                mr / tot,
                mf / tot
            );
        }
        let ((_, rec_in), (_, rec_ex)) =
            partitioned_reconstruct(&model, weights, &seq.frames[l], &seq.frames[0], gt_l, &erf);
        let jac = |rec: &Mask<f32>| -> f64 {
            let labels = rec.label_map();
            let mut sum = 0.0;
            for o in 0..seq.objects {
                let p: Vec<bool> = labels.iter().map(|&v| v as usize == o + 1).collect();
                let g: Vec<bool> = seq.first_mask().plane(o).iter().map(|&v| v > 0.5).collect();
                sum += jaccard(&p, &g);
            }
            sum / seq.objects as f64
        };
        j_in_sum += jac(&rec_in);
        j_ex_sum += jac(&rec_ex);
    }
    println!(
        "crit9 seed{seed} l={t_probe}: in>out on {in_wins}/{pairs}, probe J(in) {:.4} vs J(ex) {:.4}",
        j_in_sum / eval.len() as f64,
        j_ex_sum / eval.len() as f64
    );
    }
    }
}
