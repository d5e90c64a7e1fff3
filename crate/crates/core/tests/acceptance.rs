//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. A failing criterion is
//! reported but only fails the process when `ACCEPTANCE_STRICT` is set; an optional name
//! filter as the first argument selects criteria.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use hypervision::backbone::{features_from_bytes, features_to_bytes, TeacherProvider, ToyTeacher};
use hypervision::cube::{rgb_projection, synth_scene, HyperCube, LabelMap, SynthSpec};
use hypervision::numerics::{Graph, ParamStore, Partition, Tensor, DEFAULT_EPS};
use hypervision::objectives::{bce_loss, dice_loss, distill_loss, distill_term, focal_loss, teacher_entropy};
use hypervision::pipeline::{
    adapt_head, evaluate_seg, gradient_suite, loss_log, prepare_samples, pretrain, AdaptConfig, Checkpoint, LabeledCube,
    MetricsReport, Model, Pretrained, Sample, TrainConfig, GRAD_TOLERANCE,
};
use hypervision::pseudolabel::{
    masks_from_bytes, masks_to_bytes, nms_fuse, source_material, source_rgb, FusionConfig, InstanceMask, KMeansSegmenter,
    MaskSet, OracleSegmenter, PseudoLabeler, SourceTag,
};
use hypervision::spectral_embed::{BranchInputs, WavelengthDictionary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------------------------
// 1. gradient oracle

fn gradient_oracle() -> Outcome {
    let t0 = Instant::now();
    check(DEFAULT_EPS == 1e-5, format!("finite-difference step is {DEFAULT_EPS}"))?;
    let groups = gradient_suite().map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = groups.iter().map(|g| g.report.max_rel_err).fold(0.0, f64::max);
    for g in &groups {
        check(g.passed(), format!("group {} max rel err {:.2e}", g.group, g.report.max_rel_err))?;
    }
    check(groups.iter().any(|g| g.group == "composite"), "no composite group")?;
    check(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} groups, worst rel err {worst:.2e} < {GRAD_TOLERANCE:e}, {secs:.1}s", groups.len()))
}

// ---------------------------------------------------------------------------------------------
// 2. channel adaptivity

fn channel_adaptivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (patch, dim) = (8, 32);
    let mut store = ParamStore::<f32>::new();
    let dict = WavelengthDictionary::register(&mut store, &mut rng, patch, dim).map_err(err)?;
    let before = store.clone();
    let (h, w) = (16, 24);
    let mut shapes = Vec::new();
    for (c, lo, hi) in [(15, 600.0, 850.0), (25, 600.0, 975.0), (31, 400.0, 700.0), (128, 450.0, 950.0)] {
        let wl: Vec<f32> = (0..c).map(|i| lo + (hi - lo) * i as f32 / (c - 1) as f32).collect();
        let data: Vec<f32> = (0..h * w * c).map(|_| rng.gen()).collect();
        let embed = |wl: &[f32], data: &[f32]| -> Result<Vec<f32>, String> {
            let inputs = BranchInputs::from_bands(h, w, wl, data).map_err(err)?;
            let mut g = Graph::new();
            let t = dict.embed(&mut g, &store, &inputs).map_err(err)?;
            let shape = g.value(t).shape().to_vec();
            check(shape == [(h / patch) * (w / patch), dim], format!("c={c}: token shape {shape:?}"))?;
            Ok(g.value(t).data().to_vec())
        };
        let tokens = embed(&wl, &data)?;
        // reverse-interleave the bands
        let perm: Vec<usize> = (0..c).map(|i| if i % 2 == 0 { c - 1 - i / 2 } else { i / 2 }).collect();
        let plane = h * w;
        let pwl: Vec<f32> = perm.iter().map(|&b| wl[b]).collect();
        let pdata: Vec<f32> = perm.iter().flat_map(|&b| data[b * plane..(b + 1) * plane].iter().copied()).collect();
        let permuted = embed(&pwl, &pdata)?;
        check(
            tokens.iter().zip(&permuted).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("c={c}: band permutation changed the tokens"),
        )?;
        shapes.push(format!("c={c}"));
    }
    check(store == before, "dictionary changed while embedding")?;
    Ok(format!("{} -> {}x{}x{dim} tokens from one dictionary, permutation-exact", shapes.join(", "), h / patch, w / patch))
}

// ---------------------------------------------------------------------------------------------
// 3. NMS against a brute-force reference

const SOURCES: [SourceTag; 4] = [SourceTag::Rgb, SourceTag::Seq, SourceTag::Material, SourceTag::File];

fn ref_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn priority(s: SourceTag) -> usize {
    SOURCES.iter().position(|&t| t == s).unwrap()
}

/// The kept set by definition: a mask is kept iff no kept mask ranked above it overlaps it by
/// more than tau. Every subset is tested against that fixed-point condition and the unique
/// solution is returned (before the r_max cut).
fn brute_force_kept(pool: &[InstanceMask], tau: f64) -> Vec<usize> {
    let n = pool.len();
    let area = |m: &InstanceMask| m.bits.iter().filter(|&&b| b).count();
    let above = |i: usize, j: usize| -> bool {
        let (a, b) = (&pool[i], &pool[j]);
        let key = |m: &InstanceMask| (std::cmp::Reverse(ordered(m.score)), std::cmp::Reverse(area(m)), priority(m.source), m.id);
        (key(a), i) < (key(b), j)
    };
    let mut solutions = Vec::new();
    for subset in 0u32..(1 << n) {
        let kept = |i: usize| subset >> i & 1 == 1;
        let consistent = (0..n).all(|m| {
            let free = (0..n).filter(|&k| k != m && kept(k) && above(k, m)).all(|k| ref_iou(&pool[k].bits, &pool[m].bits) <= tau);
            kept(m) == free
        });
        if consistent {
            solutions.push(subset);
        }
    }
    assert_eq!(solutions.len(), 1, "fixed point is unique");
    let mut kept: Vec<usize> = (0..n).filter(|&i| solutions[0] >> i & 1 == 1).collect();
    kept.sort_by(|&i, &j| if above(i, j) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

fn ordered(score: f32) -> u32 {
    // scores are non-negative, so the bit pattern orders like the value
    score.to_bits()
}

fn random_pool(rng: &mut ChaCha8Rng) -> Vec<InstanceMask> {
    let n = rng.gen_range(1..=8);
    let mut pool = Vec::new();
    for id in 0..n {
        let (top, left) = (rng.gen_range(0..14), rng.gen_range(0..14));
        let (hh, ww) = (rng.gen_range(2..=16 - top), rng.gen_range(2..=16 - left));
        let mut bits = vec![false; 256];
        for r in top..top + hh {
            for c in left..left + ww {
                bits[r * 16 + c] = rng.gen_bool(0.9);
            }
        }
        bits[top * 16 + left] = true;
        let score = [0.5, 0.5, 0.9, 0.3][rng.gen_range(0..4)];
        let source = SOURCES[rng.gen_range(0..4)];
        pool.push(InstanceMask::new(16, 16, bits, score, source, id as u32).unwrap());
    }
    // an occasional exact duplicate from another source
    if rng.gen_bool(0.3) {
        let mut d = pool[0].clone();
        d.id = n as u32;
        d.source = SOURCES[rng.gen_range(0..4)];
        pool.push(d);
    }
    pool.truncate(8);
    pool
}

fn nms_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut suppressed = 0;
    for case in 0..1000 {
        let pool = random_pool(&mut rng);
        let tau = [0.3, 0.5, 0.7][case % 3];
        let r_max = if case % 10 == 0 { 2 } else { 16 };
        let target = nms_fuse(&pool, &FusionConfig { tau, r_max, min_area: 1 }).map_err(err)?;
        let mut expected = brute_force_kept(&pool, tau);
        suppressed += pool.len() - expected.len();
        expected.truncate(r_max);
        let want: BTreeSet<u32> = expected.iter().map(|&i| pool[i].id).collect();
        let got: BTreeSet<u32> = target.parts.iter().map(|m| m.id).collect();
        check(want == got, format!("case {case}: kept ids {got:?}, reference {want:?}"))?;
        let union: Vec<bool> = (0..256).map(|i| target.parts.iter().any(|m| m.bits[i])).collect();
        check(union == target.union, format!("case {case}: union differs from OR of parts"))?;
        for (a, pa) in target.parts.iter().enumerate() {
            for pb in &target.parts[a + 1..] {
                check(ref_iou(&pa.bits, &pb.bits) <= tau, format!("case {case}: kept pair above tau"))?;
            }
        }
    }
    Ok(format!("1000 pools match the brute-force kept sets ({suppressed} suppressions), union exact, kept IoU <= tau"))
}

// ---------------------------------------------------------------------------------------------
// 4. loss identities

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_focal: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let target: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let f = focal_loss(&logits, &target, 0.5, 0.0).map_err(err)?;
        let b = bce_loss(&logits, &target).map_err(err)?;
        worst_focal = worst_focal.max((f - 0.5 * b).abs());
    }
    check(worst_focal < 1e-9, format!("focal vs BCE/2 deviation {worst_focal:e}"))?;

    // dice(m, m) with epsilon 1: 1 - (2a+1)/(2a+1) = 0 for hard masks; soft self-agreement
    // differs from 0 only through the epsilon, bounded by 2/(2n+1)
    let mut worst_dice: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..64);
        let m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let probs: Vec<f64> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let d = dice_loss(&probs, &m).map_err(err)?;
        check(d.abs() <= 2.0 / (2.0 * n as f64 + 1.0), format!("dice(m, m) = {d} for n = {n}"))?;
        worst_dice = worst_dice.max(d.abs());
    }

    let mut min_gap = f64::INFINITY;
    for _ in 0..1000 {
        let (tokens, dim) = (rng.gen_range(1..6), rng.gen_range(2..9));
        let s: Vec<f64> = (0..tokens * dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t: Vec<f64> = (0..tokens * dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let temp = rng.gen_range(0.5..3.0);
        let gap = distill_loss(&s, &t, dim, temp).map_err(err)? - teacher_entropy(&t, dim, temp);
        min_gap = min_gap.min(gap);
        check(gap >= -1e-9, format!("L_dis below teacher entropy by {gap:e}"))?;
        let matched = distill_loss(&t, &t, dim, temp).map_err(err)? - teacher_entropy(&t, dim, temp);
        check(matched.abs() < 1e-9, format!("matched distributions leave gap {matched:e}"))?;
    }

    // gradients: the student receives one, the teacher is a constant of the graph
    let mut g = Graph::<f64>::new();
    let student = g.variable(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).map_err(err)?);
    let teacher = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 5) as f64 * 0.3).collect()).map_err(err)?;
    let l = distill_term(&mut g, student, &teacher, 1.0).map_err(err)?;
    let grads = g.backward(l).map_err(err)?;
    check(grads.wrt(student).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)), "student has no gradient")?;
    check(grads.params().is_empty(), "a parameter received a distillation gradient")?;
    let toy = ToyTeacher::new(Default::default()).map_err(err)?;
    check(toy.params().is_frozen(), "toy teacher parameters are trainable")?;
    Ok(format!("focal/BCE dev {worst_focal:.1e}, dice(m,m) max {worst_dice:.1e}, min L_dis-H {min_gap:.3}, teacher frozen"))
}

// ---------------------------------------------------------------------------------------------
// 5-7. desk-scale pre-training, adaptation, ablation

const PRETRAIN_SEED: u64 = 7;

fn scenes(range: std::ops::Range<u64>) -> Vec<LabeledCube> {
    let base = SynthSpec { seed: PRETRAIN_SEED, ..Default::default() };
    range
        .map(|i| {
            let s = synth_scene(&base.for_image(i)).unwrap();
            LabeledCube { name: format!("scene_{i:04}"), cube: s.cube, labels: s.labels }
        })
        .collect()
}

struct Desk {
    config: TrainConfig,
    samples: Vec<Sample>,
    run: Pretrained,
    rerun_log: String,
    checkpoints_equal: bool,
    seconds: f64,
    adapt_set: Vec<LabeledCube>,
    test_set: Vec<LabeledCube>,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let t0 = Instant::now();
        let config = TrainConfig::default();
        let cubes: Vec<(String, HyperCube)> = scenes(0..64).into_iter().map(|l| (l.name, l.cube)).collect();
        let labeler = PseudoLabeler::new(config.sources.clone(), config.fusion);
        let teacher = ToyTeacher::new(config.teacher()).unwrap();
        let samples = prepare_samples(&cubes, Some(&labeler), Some(&teacher as &dyn TeacherProvider), config.patch).unwrap();
        let run = pretrain(&samples, &config).unwrap();
        let seconds = t0.elapsed().as_secs_f64();
        let rerun = pretrain(&samples, &config).unwrap();
        let bytes = |p: &Pretrained| p.model.checkpoint(&p.store, None).unwrap().to_bytes().unwrap();
        let checkpoints_equal = bytes(&run) == bytes(&rerun);
        let mut held = scenes(1000..1096);
        let test_set = held.split_off(32);
        Desk { config, samples, rerun_log: loss_log(&rerun.log), run, checkpoints_equal, seconds, adapt_set: held, test_set }
    })
}

fn mean_total(records: &[hypervision::pipeline::LossRecord]) -> f64 {
    records.iter().map(|r| r.l_total).sum::<f64>() / records.len() as f64
}

fn desk_pretraining() -> Outcome {
    let d = desk();
    let log = &d.run.log;
    check(d.samples.len() == 64, format!("{} of 64 cubes usable", d.samples.len()))?;
    check(log.len() == 300 && d.config.steps == 300, "not a 300-step run")?;
    check(d.config.scale.name() == "small", "not the small scale")?;
    let (first, last) = (mean_total(&log[..10]), mean_total(&log[290..]));
    let ratio = last / first;
    check(loss_log(log) == d.rerun_log, "re-run loss log differs")?;
    check(d.checkpoints_equal, "re-run checkpoint differs")?;
    check(d.seconds < 900.0, format!("took {:.0}s", d.seconds))?;
    check(ratio <= 0.5, format!("last-10 / first-10 mean L_total = {last:.4} / {first:.4} = {ratio:.3} > 0.5"))?;
    Ok(format!(
        "mean L_total {first:.3} -> {last:.3} (ratio {ratio:.3} <= 0.5), log and checkpoint reproduced, {:.0}s",
        d.seconds
    ))
}

fn adapt_and_eval(model: &Model, store: &ParamStore<f32>, config: &TrainConfig) -> Result<(MetricsReport, bool), String> {
    let d = desk();
    let before = store.partition_hash(Partition::Backbone);
    let ac = AdaptConfig { steps: config.adapt_steps, lr: config.adapt_lr, seed: config.seed, classes: Some(5) };
    let adapted = adapt_head(model, store, &d.adapt_set, &ac).map_err(err)?;
    let frozen = adapted.store.partition_hash(Partition::Backbone) == before && adapted.backbone_hash == before;
    let report = evaluate_seg(model, &adapted.store, &adapted.probe, &d.test_set).map_err(err)?;
    Ok((report, frozen))
}

fn head_only_adaptation() -> Outcome {
    let d = desk();
    check(d.config.adapt_steps <= 200, format!("{} adaptation steps", d.config.adapt_steps))?;
    let (pre, frozen) = adapt_and_eval(&d.run.model, &d.run.store, &d.config)?;
    check(frozen, "adaptation changed a backbone tensor")?;
    let mut rng = ChaCha8Rng::seed_from_u64(d.config.seed);
    let (model, store) = Model::build::<f32, _>(d.config.model(), &mut rng).map_err(err)?;
    let (rnd, frozen) = adapt_and_eval(&model, &store, &d.config)?;
    check(frozen, "adaptation changed a random backbone tensor")?;
    let margin = pre.acc_micro - rnd.acc_micro;
    let summary = format!(
        "pre-trained Acc {:.4} J {:.4}, random Acc {:.4} J {:.4}, margin {:+.2} points",
        pre.acc_micro,
        pre.jaccard_macro,
        rnd.acc_micro,
        rnd.jaccard_macro,
        100.0 * margin
    );
    check(pre.acc_micro >= 0.90 && pre.jaccard_macro >= 0.70, format!("{summary}: below Acc 0.90 / J 0.70"))?;
    check(margin >= 0.05, format!("{summary}: margin below 5 points"))?;
    Ok(format!("{summary}, backbone hashes unchanged"))
}

fn ablation_structure() -> Outcome {
    let d = desk();
    let seg_only = TrainConfig { use_distillation: false, ..d.config.clone() };
    let (full_text, seg_text) = (d.config.to_text(), seg_only.to_text());
    let diff: Vec<&str> = full_text.lines().zip(seg_text.lines()).filter(|(a, b)| a != b).map(|(a, _)| a).collect();
    check(diff == ["use_distillation = true"], format!("configs differ in {diff:?}"))?;
    let run = pretrain(&d.samples, &seg_only).map_err(err)?;
    check(run.log.iter().all(|r| r.l_dis == 0.0 && r.l_seg > 0.0), "seg-only run logged a distillation term")?;
    check(d.run.log.iter().all(|r| r.l_dis > 0.0 && r.l_seg > 0.0), "full run is missing a term")?;
    let (a, _) = adapt_and_eval(&run.model, &run.store, &seg_only)?;
    let (b, _) = adapt_and_eval(&d.run.model, &d.run.store, &d.config)?;
    let total = |m: &MetricsReport| m.confusion.iter().flatten().sum::<u64>();
    check(a.classes() == b.classes() && total(&a) == total(&b), "reports are not over the same tokens")?;
    Ok(format!(
        "pseudo-masks only: Acc {:.4} J {:.4}; pseudo-masks + distillation: Acc {:.4} J {:.4} (same seed, one flag apart)",
        a.acc_micro, a.jaccard_macro, b.acc_micro, b.jaccard_macro
    ))
}

// ---------------------------------------------------------------------------------------------
// 8. metrics

fn metric_correctness() -> Outcome {
    let m = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]]).map_err(err)?;
    check((m.acc_micro, m.acc_macro, m.f1_macro) == (0.75, 0.75, 0.75), format!("{m:?}"))?;
    check((m.jaccard_macro - 0.6).abs() < 1e-15, format!("J = {}", m.jaccard_macro))?;
    let d = MetricsReport::from_confusion(vec![vec![50, 0], vec![0, 50]]).map_err(err)?;
    check([d.acc_micro, d.acc_macro, d.f1_macro, d.jaccard_macro] == [1.0; 4], format!("{d:?}"))?;
    // 3 classes, hand computed: recalls 5/6, 4/6, 3/3; precisions 5/7, 4/5, 3/3
    let c = MetricsReport::from_confusion(vec![vec![5, 1, 0], vec![2, 4, 0], vec![0, 0, 3]]).map_err(err)?;
    let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
    let want = [
        12.0 / 15.0,
        (5.0 / 6.0 + 4.0 / 6.0 + 1.0) / 3.0,
        (f1(5.0 / 7.0, 5.0 / 6.0) + f1(4.0 / 5.0, 4.0 / 6.0) + 1.0) / 3.0,
        (5.0 / 8.0 + 4.0 / 7.0 + 1.0) / 3.0,
    ];
    let got = [c.acc_micro, c.acc_macro, c.f1_macro, c.jaccard_macro];
    check(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12), format!("3-class: {got:?} vs {want:?}"))?;
    // class 2 absent from ground truth: excluded from the macro means
    let e = MetricsReport::from_confusion(vec![vec![4, 0, 0], vec![0, 3, 1], vec![0, 0, 0]]).map_err(err)?;
    check((e.acc_macro - 0.875).abs() < 1e-15, format!("absent-class Acc_M {}", e.acc_macro))?;
    Ok("[[3,1],[1,3]] -> 0.75/0.75/0.75/0.6, diagonal -> 1, 3-class and absent-class cases exact".into())
}

// ---------------------------------------------------------------------------------------------
// 9. format round trips

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hypervision"))
}

fn format_round_trips() -> Outcome {
    let scene = synth_scene(&SynthSpec { height: 16, width: 16, bands: 9, seed: 5, ..Default::default() }).map_err(err)?;
    let hvc = scene.cube.to_bytes().map_err(err)?;
    check(HyperCube::from_bytes(&hvc).map_err(err)?.to_bytes().map_err(err)? == hvc, ".hvc")?;
    let hvl = scene.labels.to_bytes().map_err(err)?;
    check(LabelMap::from_bytes(&hvl).map_err(err)?.to_bytes().map_err(err)? == hvl, ".hvl")?;
    let hvm = masks_to_bytes(&scene.masks).map_err(err)?;
    check(masks_to_bytes(&masks_from_bytes(&hvm).map_err(err)?).map_err(err)? == hvm, ".hvm")?;
    let teacher = ToyTeacher::new(Default::default()).map_err(err)?;
    let fm = teacher.features("x", &rgb_projection(&scene.cube).map_err(err)?).map_err(err)?;
    let hvt = features_to_bytes(&fm).map_err(err)?;
    check(features_to_bytes(&features_from_bytes(&hvt).map_err(err)?).map_err(err)? == hvt, ".hvt")?;
    let config = TrainConfig::from_text("depth = 1\ndim = 32\nd_f = 16\nd_t = 8").map_err(err)?;
    let (model, store) = Model::build::<f32, _>(config.model(), &mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
    let hvck = model.checkpoint(&store, None).map_err(err)?.to_bytes().map_err(err)?;
    check(Checkpoint::from_bytes(&hvck).map_err(err)?.to_bytes().map_err(err)? == hvck, ".hvck")?;

    // corrupted payloads are rejected by the parsers
    let flip = |b: &[u8], i: usize| {
        let mut v = b.to_vec();
        v[i] ^= 0x5a;
        v
    };
    check(HyperCube::from_bytes(&hvc[..hvc.len() - 3]).is_err(), "truncated .hvc parsed")?;
    check(masks_from_bytes(&flip(&hvm, 0)).is_err(), "bad-magic .hvm parsed")?;
    check(features_from_bytes(&hvt[..hvt.len() - 1]).is_err(), "truncated .hvt parsed")?;
    check(Checkpoint::from_bytes(&flip(&hvck, hvck.len() / 2)).is_err(), "corrupted .hvck parsed")?;

    // and the command line exits nonzero on them
    let dir = tempfile::tempdir().map_err(err)?;
    let p = dir.path();
    let good = p.join("good");
    std::fs::create_dir_all(&good).map_err(err)?;
    std::fs::write(good.join("a.hvc"), &hvc).map_err(err)?;
    std::fs::write(good.join("a.hvl"), &hvl).map_err(err)?;
    let run = |args: &[&std::ffi::OsStr]| bin().args(args).env("HV_LOG", "quiet").output().map(|o| o.status.code());
    let os = |s: &str| std::ffi::OsString::from(s);
    let path = |q: &std::path::Path| q.as_os_str().to_owned();

    let bad_cubes = p.join("bad_cubes");
    std::fs::create_dir_all(&bad_cubes).map_err(err)?;
    std::fs::write(bad_cubes.join("a.hvc"), flip(&hvc, 20)).map_err(err)?;
    std::fs::write(bad_cubes.join("b.hvc"), &hvc[..40]).map_err(err)?;
    let code = run(&[&os("masks"), &os("--cubes"), &path(&bad_cubes), &os("--out"), &path(&p.join("m"))]).map_err(err)?;
    check(code == Some(2), format!("masks on a corrupted .hvc exited {code:?}"))?;

    let bad_ck = p.join("bad.hvck");
    std::fs::write(&bad_ck, &hvck[..hvck.len() - 7]).map_err(err)?;
    let code = run(&[&os("eval"), &os("--checkpoint"), &path(&bad_ck), &os("--cubes"), &path(&good)]).map_err(err)?;
    check(code == Some(2), format!("eval on a truncated .hvck exited {code:?}"))?;

    let bad_masks = p.join("bad_masks");
    std::fs::create_dir_all(&bad_masks).map_err(err)?;
    std::fs::write(bad_masks.join("a.hvm"), &hvm[..hvm.len() - 2]).map_err(err)?;
    let code = run(&[
        &os("pretrain"),
        &os("--cubes"),
        &path(&good),
        &os("--out"),
        &path(&p.join("c.hvck")),
        &os("--masks"),
        &path(&bad_masks),
        &os("--no-distill"),
        &os("--steps"),
        &os("1"),
    ])
    .map_err(err)?;
    check(code == Some(2), format!("pretrain on a truncated .hvm exited {code:?}"))?;

    let bad_feats = p.join("bad_feats");
    std::fs::create_dir_all(&bad_feats).map_err(err)?;
    std::fs::write(bad_feats.join("a.hvt"), flip(&hvt, 1)).map_err(err)?;
    let code = run(&[
        &os("pretrain"),
        &os("--cubes"),
        &path(&good),
        &os("--out"),
        &path(&p.join("d.hvck")),
        &os("--teacher-features"),
        &path(&bad_feats),
        &os("--no-pseudo-masks"),
        &os("--steps"),
        &os("1"),
    ])
    .map_err(err)?;
    check(code == Some(2), format!("pretrain on a bad-magic .hvt exited {code:?}"))?;
    check(!p.join("c.hvck").exists() && !p.join("d.hvck").exists(), "a failed run left a checkpoint")?;
    Ok(".hvc .hvl .hvm .hvt .hvck byte-identical after write-read-write; corrupted inputs rejected, CLI exit 2".into())
}

// ---------------------------------------------------------------------------------------------
// 10. metamer separation

fn metamer_separation() -> Outcome {
    // bands every 50 nm from 450 nm, so the projected bands are exactly 650, 550 and 450 nm
    let wl: Vec<f32> = (0..11).map(|i| 450.0 + 50.0 * i as f32).collect();
    let rgb_idx = [0usize, 2, 4];
    let spectrum = |base: [f32; 3], rest: f32| -> Vec<f32> {
        (0..wl.len()).map(|b| rgb_idx.iter().position(|&k| k == b).map_or(rest, |j| base[j])).collect()
    };
    let a = spectrum([0.3, 0.6, 0.45], 0.1);
    let b = spectrum([0.3, 0.6, 0.45], 0.9);
    let bg = spectrum([0.9, 0.1, 0.8], 0.5);
    let (h, w) = (24, 24);
    let region = |r: usize, c: usize| -> u8 {
        if !(4..20).contains(&r) || !(4..20).contains(&c) {
            0
        } else if c < 12 {
            1
        } else {
            2
        }
    };
    let mut data = vec![0f32; h * w * wl.len()];
    for r in 0..h {
        for c in 0..w {
            let s = match region(r, c) {
                0 => &bg,
                1 => &a,
                _ => &b,
            };
            for (k, &v) in s.iter().enumerate() {
                data[k * h * w + r * w + c] = v;
            }
        }
    }
    let cube = HyperCube::new(h, w, wl.clone(), data).map_err(err)?;
    let rgb = rgb_projection(&cube).map_err(err)?;
    check(rgb.source_bands == [4, 2, 0], format!("projected bands {:?}", rgb.source_bands))?;
    let mask_of = |want: &[u8]| -> Vec<bool> { (0..h * w).map(|i| want.contains(&region(i / w, i % w))).collect() };
    let has = |set: &MaskSet, bits: &[bool]| set.masks.iter().any(|m| m.bits == bits);

    let material = source_material(&cube, &KMeansSegmenter::default());
    check(material.len() >= 2, format!("material source gave {} masks", material.len()))?;
    check(has(&material, &mask_of(&[1])) && has(&material, &mask_of(&[2])), "material source does not separate the metamers")?;
    let rgb_set = source_rgb(&cube, &OracleSegmenter::default()).map_err(err)?;
    let union = mask_of(&[1, 2]);
    check(has(&rgb_set, &union), "rgb source has no mask equal to the union of the metamers")?;
    let split = rgb_set.masks.iter().any(|m| m.bits != union && m.bits.iter().zip(&union).any(|(x, y)| *x && *y));
    check(!split, "rgb source splits the metameric pair")?;
    Ok(format!("material source: {} masks incl. each metamer; rgb source: one merged mask over both", material.len()))
}

// ---------------------------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient oracle", gradient_oracle),
        ("channel adaptivity", channel_adaptivity),
        ("NMS oracle equivalence", nms_oracle),
        ("loss identities", loss_identities),
        ("desk-scale pre-training", desk_pretraining),
        ("head-only adaptation", head_only_adaptation),
        ("ablation structure", ablation_structure),
        ("metric correctness", metric_correctness),
        ("format round trips", format_round_trips),
        ("metamer separation", metamer_separation),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let (mut run, mut failed) = (0, 0);
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|s| !name.contains(s.as_str())) {
            continue;
        }
        run += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(reason) => {
                failed += 1;
                println!("FAIL  criterion {:>2} {name}: {reason} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", run - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
