//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process exits nonzero if any criterion fails.
//!
//! Training-based criteria run at reduced scale (base width 8, 64×64 or
//! 48×48 inputs) so the whole suite fits a single CPU core.

use std::collections::{BTreeMap, HashSet};
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nerveseg::data::{
    augment, load_dataset, make_folds, resize_and_scale, synth_generate, AugmentConfig, Modality,
    NormalizationStats, PreparedSample, SynthConfig, Variant,
};
use nerveseg::fusion::{attention_weights, scaled_dot_attention, CrossModalTransformerBlock};
use nerveseg::losses::{edge_loss, positive_weight, total_loss, weighted_bce, EdgeNorm, SobelBank};
use nerveseg::metrics::{detection_classify, Outcome, PixelConfusion};
use nerveseg::nn::ParamStore;
use nerveseg::training::{
    cross_validate, evaluate, lr_at, train_fold, train_step, Batch, Sgd, StepContext, TrainConfig,
};
use nerveseg::{Architecture, Mode, Model, ModelConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Reference counts for the six architectures at default width and size.
const REFERENCE_PARAMS: [(Architecture, usize); 6] = [
    (Architecture::Unet, 34_527_041),
    (Architecture::AttUnet, 34_878_573),
    (Architecture::XattUnet, 37_324_801),
    (Architecture::DualUnet, 47_068_289),
    (Architecture::DxmTransfuse, 53_373_057),
    (Architecture::ColearnUnet, 56_506_497),
];

fn c1_parameter_counts() -> Verdict {
    let mut counts = Vec::new();
    for (arch, reference) in REFERENCE_PARAMS {
        let n = Model::new(&ModelConfig::new(arch), DType::F32).map_err(err)?.parameter_count();
        let rel = (n as f64 - reference as f64).abs() / reference as f64;
        check(rel <= 0.10, || format!("{arch}: {n} vs {reference} ({:.1}% off)", 100.0 * rel))?;
        counts.push((arch, n, rel));
    }
    // Reference order is UNET < ATT < XATT < DUAL < DXM < COLEARN.
    check(counts.windows(2).all(|w| w[0].1 < w[1].1), || format!("ordering broken: {counts:?}"))?;
    let worst = counts.iter().map(|c| c.2).fold(0.0, f64::max);
    Ok(format!(
        "{}; max deviation {:.4}%",
        counts.iter().map(|(a, n, _)| format!("{a}={n}")).collect::<Vec<_>>().join(" "),
        100.0 * worst
    ))
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and numeric gradients.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn scalar(t: &Tensor) -> Result<f64, String> {
    t.to_scalar::<f64>().map_err(err)
}

/// Analytic gradient of `f` at `x0` against central differences.
fn gradient_error(
    x0: &[f64],
    shape: &[usize],
    f: &dyn Fn(&Tensor) -> Result<Tensor, String>,
) -> Result<f64, String> {
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_vec(x0.to_vec(), shape, &dev).map_err(err)?).map_err(err)?;
    let grads = f(var.as_tensor())?.backward().map_err(err)?;
    let analytic = grads
        .get(var.as_tensor())
        .ok_or("no gradient")?
        .flatten_all()
        .map_err(err)?
        .to_vec1::<f64>()
        .map_err(err)?;
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fp = scalar(&f(&Tensor::from_vec(xp, shape, &dev).map_err(err)?)?)?;
        let fm = scalar(&f(&Tensor::from_vec(xm, shape, &dev).map_err(err)?)?)?;
        numeric.push((fp - fm) / (2.0 * h));
    }
    Ok(relative_error(&analytic, &numeric))
}

fn c2_gradients() -> Verdict {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bank = SobelBank::standard();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    // Full objective with respect to the logits.
    for case in 0..40 {
        let (b, h, w) = (rng.gen_range(1..=2), rng.gen_range(3..=8), rng.gen_range(3..=8));
        let shape = [b, 1, h, w];
        let n = b * h * w;
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        let target = Tensor::from_vec(target, &shape[..], &dev).map_err(err)?;
        let w_p = rng.gen_range(0.5..6.0);
        let norm = if case % 2 == 0 { EdgeNorm::PixelAbs } else { EdgeNorm::ImageL2 };
        let e = gradient_error(&logits, &shape, &|x| {
            total_loss(x, &target, w_p, &bank, norm).map(|(l, _)| l).map_err(err)
        })?;
        check(e < 1e-3, || format!("total loss case {case} ({norm:?}): relative error {e:e}"))?;
        worst = worst.max(e);
        cases += 1;
    }
    // Scaled dot-product attention with respect to Q, K and V in turn.
    for case in 0..30 {
        let (tq, tk, d, dv) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect() };
        let q = rand_vec(tq * d);
        let k = rand_vec(tk * d);
        let v = rand_vec(tk * dv);
        let probe = Tensor::from_vec(rand_vec(tq * dv), (tq, dv), &dev).map_err(err)?;
        let t = |x: &[f64], r: usize, c: usize| Tensor::from_vec(x.to_vec(), (r, c), &dev).map_err(err);
        let (qt, kt, vt) = (t(&q, tq, d)?, t(&k, tk, d)?, t(&v, tk, dv)?);
        let project = |y: Tensor| -> Result<Tensor, String> { (y * &probe).and_then(|p| p.sum_all()).map_err(err) };
        let eq = gradient_error(&q, &[tq, d], &|x| project(scaled_dot_attention(x, &kt, &vt).map_err(err)?))?;
        let ek = gradient_error(&k, &[tk, d], &|x| project(scaled_dot_attention(&qt, x, &vt).map_err(err)?))?;
        let ev = gradient_error(&v, &[tk, dv], &|x| project(scaled_dot_attention(&qt, &kt, x).map_err(err)?))?;
        for (what, e) in [("Q", eq), ("K", ek), ("V", ev)] {
            check(e < 1e-3, || format!("attention case {case} d/d{what}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
        cases += 1;
    }
    Ok(format!("{cases} cases, worst relative error {worst:.2e}"))
}

fn c3_metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let density = rng.gen_range(0.0..1.0);
        let pred: Vec<u8> = (0..64).map(|_| u8::from(rng.gen_bool(density))).collect();
        let truth: Vec<u8> = (0..64).map(|_| u8::from(rng.gen_bool(density))).collect();
        let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..8 {
            for x in 0..8 {
                let i = y * 8 + x;
                match (pred[i], truth[i]) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fneg += 1,
                    _ => tn += 1,
                }
            }
        }
        let oracle_dice = if tp + fp + fneg == 0 {
            1.0
        } else {
            (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
        };
        let oracle_f2 = if tp + fp + fneg == 0 {
            1.0
        } else {
            (5 * tp) as f64 / (5 * tp + 4 * fneg + fp) as f64
        };
        let c = PixelConfusion::from_masks(&pred, &truth).map_err(err)?;
        check((c.true_pos, c.false_pos, c.false_neg, c.true_neg) == (tp, fp, fneg, tn), || {
            format!("case {case}: confusion {c:?}")
        })?;
        let dice = nerveseg::metrics::dice(&pred, &truth).map_err(err)?;
        let f2 = nerveseg::metrics::f2(&pred, &truth).map_err(err)?;
        check(dice == oracle_dice, || format!("case {case}: dice {dice} vs {oracle_dice}"))?;
        check(f2 == oracle_f2, || format!("case {case}: f2 {f2} vs {oracle_f2}"))?;
    }
    let table = [
        (true, 0.9, Outcome::TP),
        (false, 0.9, Outcome::TN),
        (true, 0.1, Outcome::FN),
        (false, 0.1, Outcome::FP),
    ];
    for (has_nerve, dice, want) in table {
        let got = detection_classify(has_nerve, dice, 0.5);
        check(got == want, || format!("has_nerve={has_nerve} dice={dice}: {got:?}, expected {want:?}"))?;
    }
    Ok("1000 mask pairs exact; detection truth table 4/4".into())
}

fn c4_loss_spot_values() -> Verdict {
    let dev = Device::Cpu;
    let one = |v: f64| Tensor::from_vec(vec![v], (1, 1, 1, 1), &dev).map_err(err);
    let ln2 = std::f64::consts::LN_2;
    let l1 = scalar(&weighted_bce(&one(0.0)?, &one(1.0)?, 1.0).map_err(err)?)?;
    let l3 = scalar(&weighted_bce(&one(0.0)?, &one(1.0)?, 3.0).map_err(err)?)?;
    check((l1 - ln2).abs() < 1e-6, || format!("w_p=1: {l1}"))?;
    check((l3 - 3.0 * ln2).abs() < 1e-6, || format!("w_p=3: {l3}"))?;
    let bank = SobelBank::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_asym: f64 = 0.0;
    for case in 0..100 {
        let (h, w) = (rng.gen_range(2..=12), rng.gen_range(2..=12));
        let mut binary = || -> Result<Tensor, String> {
            let v: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
            Tensor::from_vec(v, (1, 1, h, w), &dev).map_err(err)
        };
        let (a, b) = (binary()?, binary()?);
        let same = scalar(&edge_loss(&a, &a, &bank, EdgeNorm::PixelAbs).map_err(err)?)?;
        check(same == 0.0, || format!("case {case}: edge loss on identical maps {same}"))?;
        for norm in [EdgeNorm::PixelAbs, EdgeNorm::ImageL2] {
            let ab = scalar(&edge_loss(&a, &b, &bank, norm).map_err(err)?)?;
            let ba = scalar(&edge_loss(&b, &a, &bank, norm).map_err(err)?)?;
            worst_asym = worst_asym.max((ab - ba).abs());
            check((ab - ba).abs() < 1e-9, || format!("case {case} {norm:?}: {ab} vs {ba}"))?;
        }
    }
    Ok(format!(
        "bce {l1:.9} / {l3:.9}; identical edge loss 0; max asymmetry {worst_asym:.1e}"
    ))
}

fn c5_attention_invariants() -> Verdict {
    let dev = Device::Cpu;
    let mut worst_row: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    for seed in 0..20u64 {
        let q = Tensor::randn(0f64, 2.0, (2, 5, 8), &dev).map_err(err)?;
        let k = Tensor::randn(0f64, 2.0, (2, 7, 8), &dev).map_err(err)?;
        let v = Tensor::randn(0f64, 1.0, (2, 7, 3), &dev).map_err(err)?;
        let rows = attention_weights(&q, &k).map_err(err)?.sum(2).map_err(err)?;
        for s in rows.flatten_all().map_err(err)?.to_vec1::<f64>().map_err(err)? {
            worst_row = worst_row.max((s - 1.0).abs());
        }
        let out = scaled_dot_attention(&q, &k, &v).map_err(err)?.to_vec3::<f64>().map_err(err)?;
        let vv = v.to_vec3::<f64>().map_err(err)?;
        for (b, rows) in out.iter().enumerate() {
            for row in rows {
                for (f, &y) in row.iter().enumerate() {
                    let col = vv[b].iter().map(|r| r[f]);
                    let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
                    check(y >= lo - 1e-12 && y <= hi + 1e-12, || format!("output {y} outside [{lo}, {hi}]"))?;
                }
            }
        }

        let mut store = ParamStore::new(seed, DType::F64);
        let block = CrossModalTransformerBlock::new(&mut store.root(), 16, 4, 0.1).map_err(err)?;
        let primary = Tensor::randn(0f64, 1.0, (2, 6, 16), &dev).map_err(err)?;
        let context = Tensor::randn(0f64, 1.0, (2, 9, 16), &dev).map_err(err)?;
        let mut order: Vec<u32> = (0..9).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let idx = Tensor::new(order.as_slice(), &dev).map_err(err)?;
        let permuted = context.index_select(&idx, 1).map_err(err)?;
        let a = block.forward(&primary, &context, &mut Mode::Eval).map_err(err)?;
        let b = block.forward(&primary, &permuted, &mut Mode::Eval).map_err(err)?;
        let d = (a - b)
            .and_then(|d| d.abs())
            .and_then(|d| d.flatten_all())
            .and_then(|d| d.max(0))
            .map_err(err)?;
        worst_perm = worst_perm.max(scalar(&d)?);
    }
    check(worst_row <= 1e-6, || format!("row sums off by {worst_row:e}"))?;
    check(worst_perm <= 1e-6, || format!("context permutation changed output by {worst_perm:e}"))?;
    Ok(format!(
        "row-sum error {worst_row:.1e}; outputs within V range; permutation change {worst_perm:.1e}"
    ))
}

fn standardized(samples: &mut [PreparedSample]) -> Result<(), String> {
    let stats = NormalizationStats::compute(samples).map_err(err)?;
    for s in samples {
        stats.standardize(s);
    }
    Ok(())
}

const OVERFIT_SIZE: usize = 64;
const OVERFIT_WIDTH: usize = 8;
const OVERFIT_STEPS: usize = 300;
const OVERFIT_CHECK_EVERY: usize = 10;

fn c6_overfit() -> Verdict {
    let pairs = SynthConfig {
        n: 8,
        size: OVERFIT_SIZE,
        seed: 3,
        empty_fraction: 0.0,
        distractors: 2,
    }
    .samples()
    .map_err(err)?;
    let mut samples = pairs
        .iter()
        .map(|p| resize_and_scale(p, OVERFIT_SIZE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    standardized(&mut samples)?;
    let w_p = positive_weight(samples.iter().map(|s| &s.mask)).map_err(err)?;
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let batch = Batch::new(&refs, DType::F32).map_err(err)?;
    let bank = SobelBank::standard();
    let ctx = StepContext {
        w_p,
        bank: &bank,
        edge_norm: EdgeNorm::PixelAbs,
        modality: Modality::Jet,
    };
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for arch in Architecture::ALL {
        let t0 = Instant::now();
        let cfg = ModelConfig {
            architecture: arch,
            base_width: OVERFIT_WIDTH,
            image_size: OVERFIT_SIZE,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, DType::F32).map_err(err)?;
        let mut opt = Sgd::new(&model, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reached = None;
        let mut last = 0.0;
        for step in 1..=OVERFIT_STEPS {
            train_step(&model, &mut opt, &batch, &ctx, 0.03, &mut rng).map_err(err)?;
            if step % OVERFIT_CHECK_EVERY == 0 {
                last = evaluate(&model, &samples, Modality::Jet, 0.5, None).map_err(err)?.summary.mean_dice;
                if last > 0.95 {
                    reached = Some(step);
                    break;
                }
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        match reached {
            Some(step) => lines.push(format!("{arch} {last:.3}@{step} ({secs:.0}s)")),
            None => failures.push(format!("{arch} only reached {last:.3} in {OVERFIT_STEPS} steps")),
        }
        let steps = reached.map_or_else(|| format!("{OVERFIT_STEPS}+"), |s| s.to_string());
        println!("    overfit {arch}: dice {last:.4} after {steps} steps, {secs:.0}s");
    }
    check(failures.is_empty(), || failures.join("; "))?;
    Ok(lines.join(", "))
}

fn c7_schedule() -> Verdict {
    let cfg = TrainConfig::default();
    for epoch in 0..250 {
        let want = match epoch {
            0..=61 => 0.03,
            62..=186 => 0.01,
            _ => 0.03 / 9.0,
        };
        let got = lr_at(epoch, &cfg);
        check((got - want).abs() < 1e-12, || format!("epoch {epoch}: {got} vs {want}"))?;
    }
    let mut runner = TestRunner::new(PropConfig {
        cases: 500,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (
        1usize..400,
        proptest::collection::btree_set(1u32..1000, 1..5),
        0.05f64..0.95,
        0.001f64..1.0,
    );
    runner
        .run(&strategy, |(epochs, marks, factor, lr0)| {
            let cfg = TrainConfig {
                epochs,
                lr_initial: lr0,
                lr_factor: factor,
                lr_milestones: marks.iter().map(|&m| m as f64 / 1000.0).collect(),
                ..TrainConfig::default()
            };
            let expected_at: Vec<usize> =
                cfg.lr_milestones.iter().map(|f| (f * epochs as f64).floor() as usize).collect();
            prop_assert!((lr_at(0, &cfg) - lr0 * factor.powi(expected_at.iter().filter(|&&m| m == 0).count() as i32)).abs() < 1e-12);
            let mut drops = 0;
            for e in 1..epochs + 2 {
                let (prev, cur) = (lr_at(e - 1, &cfg), lr_at(e, &cfg));
                let passed = expected_at.iter().filter(|&&m| m <= e).count();
                prop_assert!((cur - lr0 * factor.powi(passed as i32)).abs() <= 1e-12 * lr0);
                if cur != prev {
                    prop_assert!(expected_at.contains(&e), "drop at {} not a milestone", e);
                    drops += expected_at.iter().filter(|&&m| m == e).count();
                }
            }
            drops += expected_at.iter().filter(|&&m| m == 0).count();
            prop_assert_eq!(drops, cfg.lr_milestones.len());
            Ok(())
        })
        .map_err(err)?;
    Ok("0.03 / 0.01 / 0.00333 on 0..61 / 62..186 / 187..249; 500 random schedules".into())
}

fn c8_pipeline_determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let synth = SynthConfig {
        n: 40,
        size: 64,
        seed: 7,
        ..SynthConfig::default()
    };
    let model_cfg = ModelConfig {
        architecture: Architecture::Unet,
        base_width: 8,
        image_size: 48,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut summaries = Vec::new();
    for run in 0..2 {
        let data = dir.path().join(format!("data{run}"));
        synth_generate(&data, &synth).map_err(err)?;
        let pairs = load_dataset(&data).map_err(err)?.pairs;
        check(pairs.len() == 40, || format!("loaded {} samples", pairs.len()))?;
        let cv = cross_validate(&model_cfg, &train_cfg, &pairs, &dir.path().join(format!("out{run}")))
            .map_err(err)?;
        check(cv.runs.len() == 5, || format!("{} fold runs", cv.runs.len()))?;
        let all: HashSet<&String> = pairs.iter().map(|p| &p.id).collect();
        let mut seen: BTreeMap<&String, usize> = BTreeMap::new();
        for f in &cv.folds {
            let train: HashSet<&String> = f.train.iter().collect();
            check(f.validation.iter().all(|id| !train.contains(id)), || {
                format!("fold {} leaks validation ids into training", f.fold_id)
            })?;
            check(train.len() + f.validation.len() == all.len(), || {
                format!("fold {} does not cover the dataset", f.fold_id)
            })?;
            for id in &f.validation {
                *seen.entry(id).or_default() += 1;
            }
        }
        check(seen.len() == all.len() && seen.values().all(|&c| c == 1), || {
            "some id is not validated exactly once".into()
        })?;
        let per_fold: Vec<_> = cv.runs.iter().map(|r| r.best_validation.clone()).collect();
        summaries.push((cv.summary, per_fold));
    }
    check(summaries[0] == summaries[1], || "reruns produced different summaries".into())?;
    let dice = summaries[0].0.get("dice").ok_or("no dice summary")?;
    Ok(format!("two runs identical; 5 disjoint exhaustive folds; dice {dice}"))
}

fn c9_augmentation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = AugmentConfig::default();
    for case in 0..50 {
        let size = rng.gen_range(2..=24);
        let n = size * size;
        let sample = PreparedSample {
            id: format!("s{case}"),
            size,
            jet: (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            rgb: (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            mask: (0..n).map(|_| f32::from(u8::from(rng.gen_bool(0.3)))).collect(),
            has_nerve: true,
        };
        let variants = augment(&sample, &mut rng, &cfg);
        check(variants.len() == 4, || format!("{} variants", variants.len()))?;
        for a in &variants {
            let expected = a.variant.reposition(&sample.mask, 1, size);
            check(a.sample.mask == expected, || format!("case {case}: {:?} mask mismatch", a.variant))?;
            if matches!(a.variant, Variant::Rotate { .. }) {
                // Rotation is purely positional, so the images follow the mask exactly.
                check(a.sample.jet == a.variant.reposition(&sample.jet, 3, size), || format!("case {case}: rotated jet mismatch"))?;
                let mut before: Vec<u32> = sample.mask.iter().map(|v| v.to_bits()).collect();
                let mut after: Vec<u32> = a.sample.mask.iter().map(|v| v.to_bits()).collect();
                before.sort_unstable();
                after.sort_unstable();
                check(before == after, || format!("case {case}: rotation changed the mask multiset"))?;
            }
            if matches!(a.variant, Variant::Noise) {
                check(a.sample.mask == sample.mask, || format!("case {case}: noise touched the mask"))?;
            }
        }
    }
    Ok("50 random samples: colour/noise masks untouched, positional masks exact, rotation multiset kept".into())
}

const C10_EPOCHS: usize = 30;

fn c10_multimodal_signal() -> Verdict {
    let pairs = SynthConfig {
        n: 40,
        size: 64,
        seed: 7,
        ..SynthConfig::default()
    }
    .samples()
    .map_err(err)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let fold = make_folds(&ids, 5, 0).map_err(err)?.remove(0);
    let dir = tempfile::tempdir().map_err(err)?;
    let train_cfg = TrainConfig {
        epochs: C10_EPOCHS,
        augment: false,
        modality: Modality::Jet,
        ..TrainConfig::default()
    };
    let mut dice = BTreeMap::new();
    for arch in [Architecture::DxmTransfuse, Architecture::Unet] {
        let model_cfg = ModelConfig {
            architecture: arch,
            base_width: 8,
            image_size: 64,
            ..ModelConfig::default()
        };
        let record = train_fold(&model_cfg, &train_cfg, &fold, &pairs, &dir.path().join(arch.key()))
            .map_err(err)?;
        let d = record.best_validation.summary.mean_dice;
        println!(
            "    {arch}: best epoch {} validation dice {d:.4} ({:.0}s)",
            record.best_epoch, record.total_seconds
        );
        dice.insert(arch.key(), d);
    }
    let (dxm, unet) = (dice["DXM_TRANSFUSE"], dice["UNET"]);
    let margin = dxm - unet;
    check(margin >= 0.05, || format!("DXM {dxm:.4} vs UNET(jet) {unet:.4}: margin {margin:.4} < 0.05"))?;
    Ok(format!("DXM {dxm:.4} vs UNET(jet) {unet:.4}: margin {margin:+.4}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("1 parameter counts", c1_parameter_counts),
        ("2 gradient suite", c2_gradients),
        ("3 metric oracle", c3_metric_oracle),
        ("4 loss spot values", c4_loss_spot_values),
        ("5 attention invariants", c5_attention_invariants),
        ("6 overfit smoke test", c6_overfit),
        ("7 schedule", c7_schedule),
        ("8 pipeline determinism", c8_pipeline_determinism),
        ("9 augmentation contracts", c9_augmentation),
        ("10 multi-modal learning signal", c10_multimodal_signal),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = run();
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
