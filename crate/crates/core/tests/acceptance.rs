//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::oracle::{empirical, enumerate_step, total_variation, toy_logits, M};
use common::{lively_model, random_case, small_config};
use mixdiff_core::autodiff::Gradients;
use mixdiff_core::eval::{bench_cache, eval_gen, eval_und, threshold_sweep, CacheWorkload, UndEval, UndMode};
use mixdiff_core::flow::{gaussian, integrate, rf_draw, rf_loss_on_tape, EulerPlan, DEFAULT_STEPS};
use mixdiff_core::gradcheck::grad_check;
use mixdiff_core::layout::{Modality, Role, Segment, SegmentLayout};
use mixdiff_core::length::DecodeConfig;
use mixdiff_core::mdm::{mdm_draw_at, mdm_loss_on_tape, LinearSchedule};
use mixdiff_core::model::{Checkpoint, MixtureModel, ModelConfig, PosEncoding, SequenceInputs};
use mixdiff_core::synth::{Corpus, Sample, SampleKind, WorldSpec};
use mixdiff_core::train::{batch_loss_on_tape, MetricsRecord, Stage, TrainConfig, Trainer, METRICS_HEADER};
use mixdiff_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_RUNS: usize = 100_000;
const ORACLE_TV: f64 = 0.02;
const GRAD_POINTS: u64 = 10;
const GRAD_TOL: f64 = 1e-4;
const EULER_RATIO: f64 = 2.0;
const EULER_SLACK: f64 = 0.4;
const CACHE_LAYOUTS: usize = 100;
const CACHE_TOL: f64 = 1e-9;
const PACK_TOL: f64 = 1e-8;
const THRESHOLDS: [f64; 6] = [0.2, 0.4, 0.6, 0.8, 0.9, 1.0];
const SWEEP_BLOCK: usize = 64;
const SWEEP_SAMPLES: usize = 100;
const BENCH_PREFIXES: [usize; 5] = [0, 64, 128, 256, 512];
const MIN_SPEEDUP_512: f64 = 2.0;
const ROWS_RATIO_TOL: f64 = 0.10;
const BLOCK_LENS: [usize; 3] = [16, 32, 64];
const DECODE_THRESHOLD: f64 = 0.95;
const MAX_BLOCKS: usize = 8;
const HELD_OUT: usize = 400;
const LEN_SPREAD: f64 = 0.25;
const MIN_EXACT: f64 = 0.90;
const STAGE1_RATIO: f64 = 2.0;
const STAGE1_SAMPLES: usize = 100;
const UND_STEPS: usize = 2000;
const AUG_STEPS: usize = 4000;
const JOINT_STEPS: usize = 2000;
const MAX_ACC_DROP: f64 = 0.02;
const GEN_PER_CLASS: usize = 500;
const MAX_GEN_ERR: f64 = 0.1;

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: String) -> Line {
    Line { pass, detail }
}

fn within(elapsed: Duration, minutes: f64) -> bool {
    elapsed.as_secs_f64() <= minutes * 60.0
}

fn c1_oracle() -> Line {
    let start = Instant::now();
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut exact = HashMap::from([(vec![M, M], 1.0)]);
    for w in grid.windows(2) {
        exact = enumerate_step(&exact, w[0], w[1], &toy_logits);
    }
    let emp = empirical(&grid, vec![M, M], ORACLE_RUNS, 7, &toy_logits);
    let tv = total_variation(&exact, &emp);
    let el = start.elapsed();
    line(
        tv < ORACLE_TV && within(el, 1.0),
        format!("tv={tv:.4} (< {ORACLE_TV}) over {ORACLE_RUNS} runs, {:.1}s", el.as_secs_f64()),
    )
}

fn grad_model(seed: u64) -> MixtureModel {
    MixtureModel::new(ModelConfig {
        init_std: 0.3,
        seed,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

fn mdm_grad_error(seed: u64) -> f64 {
    let model = grad_model(seed);
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (p, r) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
    let layout = SegmentLayout::new(vec![Segment::text_prompt(p), Segment::text_response(r)]).unwrap();
    let x0: Vec<usize> = (0..p + r).map(|_| rng.gen_range(0..cfg.vocab().content())).collect();
    let draw = loop {
        let t = rng.gen_range(0.2..0.9);
        let d = mdm_draw_at(&x0, &layout, t, &LinearSchedule, cfg.vocab().mask(), &mut rng).unwrap();
        if d.num_masked() > 0 {
            break d;
        }
    };
    grad_check(model.params(), 1e-5, |tape| {
        let logits = model.forward_und_on_tape(tape, &draw.tokens, &layout)?;
        mdm_loss_on_tape(tape, logits, &x0, &draw)
    })
    .unwrap()
}

fn rf_grad_error(seed: u64) -> f64 {
    let model = grad_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let layout = SegmentLayout::new(vec![
        Segment::text_prompt(rng.gen_range(1..=3)),
        Segment::new(Modality::VisLat, Role::Condition, rng.gen_range(1..=3)),
        Segment::text_prompt(rng.gen_range(1..=3)).with_turn(1),
        Segment::vis_lat(rng.gen_range(1..=3)).with_turn(1),
    ])
    .unwrap();
    let n_lat = layout
        .modality_of_position()
        .iter()
        .filter(|m| !m.is_discrete())
        .count();
    let n_tok = layout.total_len() - n_lat;
    let tokens: Vec<usize> = (0..n_tok).map(|_| rng.gen_range(0..model.config().vocab().content())).collect();
    let data = gaussian(&[n_lat, model.config().d_lat], &mut rng);
    let draw = rf_draw(&data, &layout, seed % 2 == 1, &mut rng).unwrap();
    grad_check(model.params(), 1e-5, |tape| {
        let inputs = SequenceInputs {
            layout: &layout,
            tokens: &tokens,
            latents: &draw.xt,
            latent_t: &draw.t,
        };
        let v = model.forward_on_tape(tape, &inputs, None, false)?.velocity.unwrap();
        rf_loss_on_tape(tape, v, &draw)
    })
    .unwrap()
}

fn c2_gradients() -> Line {
    let start = Instant::now();
    let mut worst_mdm: f64 = 0.0;
    let mut worst_rf: f64 = 0.0;
    for seed in 0..GRAD_POINTS {
        worst_mdm = worst_mdm.max(mdm_grad_error(seed));
        worst_rf = worst_rf.max(rf_grad_error(seed));
    }
    let el = start.elapsed();
    line(
        worst_mdm < GRAD_TOL && worst_rf < GRAD_TOL && within(el, 2.0),
        format!(
            "max rel error mdm={worst_mdm:.2e} rf={worst_rf:.2e} (< {GRAD_TOL:e}) at {GRAD_POINTS} points, {:.1}s",
            el.as_secs_f64()
        ),
    )
}

fn c3_euler() -> Line {
    let start = Instant::now();
    let a = Tensor::new(vec![1, 2], vec![1.5, -0.8]).unwrap();
    let z0 = Tensor::new(vec![1, 2], vec![0.3, 0.1]).unwrap();
    let exact = z0.add(&a.scale(0.5)).unwrap();
    let err = |k: usize| {
        let mut f = |_: &Tensor, t: f64| Ok(a.scale(t));
        integrate(&mut f, z0.clone(), &EulerPlan::uniform(k).unwrap())
            .unwrap()
            .max_abs_diff(&exact)
    };
    let errs: Vec<f64> = [10, 20, 40, 80, 160].iter().map(|&k| err(k)).collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (r - EULER_RATIO).abs() <= EULER_SLACK);
    let el = start.elapsed();
    line(
        ok && el.as_secs_f64() < 10.0,
        format!("error ratios {ratios:.3?} (2 +/- {EULER_SLACK}), {:.2}s", el.as_secs_f64()),
    )
}

fn c4_cache() -> Line {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, pos) in [PosEncoding::Learned, PosEncoding::Rotary].into_iter().enumerate() {
        let cfg = ModelConfig {
            pos_encoding: pos,
            ..small_config()
        };
        let model = lively_model(cfg.clone(), 30 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        for k in 0..CACHE_LAYOUTS / 2 {
            let case = random_case(&mut rng, k % 4, &cfg);
            worst = worst.max(case.cache_discrepancy(&model));
            count += 1;
        }
    }
    let el = start.elapsed();
    line(
        worst <= CACHE_TOL && within(el, 1.0),
        format!("max diff {worst:.2e} (<= {CACHE_TOL:e}) over {count} layouts, {:.1}s", el.as_secs_f64()),
    )
}

fn c5_isolation(corpus: &Corpus) -> Line {
    let start = Instant::now();
    let cfg = TrainConfig {
        batch: [4, 4, 2],
        stage: Stage::Augmented,
        model: ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 48,
            init_std: 0.2,
            ..ModelConfig::desk()
        },
        ..TrainConfig::default()
    };
    let tr = Trainer::new(cfg, corpus).unwrap();
    let items = tr.prepare_batch(3).unwrap();
    let mut tape = tr.model.tape();
    let packed = batch_loss_on_tape(&tr.model, &mut tape, &items).unwrap();
    let packed_grads = tape.backward(packed.total).unwrap();
    let mut sum = Gradients::default();
    for item in &items {
        let mut tape = tr.model.tape();
        let l = batch_loss_on_tape(&tr.model, &mut tape, std::slice::from_ref(item)).unwrap();
        sum.accumulate(&tape.backward(l.total).unwrap());
    }
    let mut worst: f64 = 0.0;
    for id in tr.model.params().ids() {
        let max_abs = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(match (packed_grads.get(id), sum.get(id)) {
            (Some(a), Some(b)) => a.max_abs_diff(b),
            (Some(t), None) | (None, Some(t)) => max_abs(t),
            (None, None) => 0.0,
        });
    }
    let el = start.elapsed();
    line(
        worst <= PACK_TOL && within(el, 1.0),
        format!("max grad diff {worst:.2e} (<= {PACK_TOL:e}) over {} packed samples, {:.1}s", items.len(), el.as_secs_f64()),
    )
}

fn train<'c>(cfg: TrainConfig, resume: Option<&Checkpoint>, corpus: &'c Corpus, out: &Path) -> (Trainer<'c>, Duration) {
    let start = Instant::now();
    let mut tr = match resume {
        Some(ck) => Trainer::resume(cfg, ck, corpus).unwrap(),
        None => Trainer::new(cfg, corpus).unwrap(),
    };
    std::fs::create_dir_all(out).unwrap();
    tr.run(Some(out), |r| {
        if r.get("step").and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s % 500 == 0) {
            eprintln!("  {}", r.to_line());
        }
    })
    .unwrap();
    (tr, start.elapsed())
}

fn blockwise(model: &MixtureModel, samples: &[&Sample], block_len: usize) -> UndEval {
    let cfg = DecodeConfig {
        block_len,
        threshold: DECODE_THRESHOLD,
        max_blocks: MAX_BLOCKS,
    };
    eval_und(model, samples, UndMode::Blockwise(cfg)).unwrap()
}

fn known_length(model: &MixtureModel, samples: &[&Sample]) -> UndEval {
    eval_und(
        model,
        samples,
        UndMode::KnownLength {
            threshold: DECODE_THRESHOLD,
        },
    )
    .unwrap()
}

fn c6_threshold(model: &MixtureModel, held: &[&Sample], log: &mut Vec<MetricsRecord>) -> Line {
    let start = Instant::now();
    let rows = threshold_sweep(model, &held[..SWEEP_SAMPLES], SWEEP_BLOCK, MAX_BLOCKS, &THRESHOLDS).unwrap();
    let ppt: Vec<f64> = rows.iter().map(|r| r.eval.passes_per_token).collect();
    for r in &rows {
        log.push(
            r.eval
                .to_record("threshold")
                .with_f("threshold", r.threshold)
                .with_f("tokens_per_sec", r.eval.tokens_per_sec()),
        );
    }
    let el = start.elapsed();
    line(
        ppt.windows(2).all(|w| w[1] >= w[0]) && within(el, 5.0),
        format!("passes/token {ppt:.3?} over tau {THRESHOLDS:?}, {:.1}s", el.as_secs_f64()),
    )
}

fn c7_bench(model: &MixtureModel, log: &mut Vec<MetricsRecord>) -> Line {
    let start = Instant::now();
    let work = CacheWorkload::default();
    let rows = bench_cache(model, &BENCH_PREFIXES, &work, 0).unwrap();
    log.extend(rows.iter().map(|r| r.to_record()));
    let speed: Vec<f64> = rows.iter().map(|r| r.speedup()).collect();
    let rel: f64 = rows
        .iter()
        .map(|r| (r.rows_ratio() / r.analytic_ratio - 1.0).abs())
        .fold(0.0, f64::max);
    let at512 = *speed.last().unwrap();
    let el = start.elapsed();
    line(
        at512 >= MIN_SPEEDUP_512 && speed.windows(2).all(|w| w[1] > w[0]) && rel <= ROWS_RATIO_TOL && within(el, 5.0),
        format!(
            "speedups {speed:.2?} at prefixes {BENCH_PREFIXES:?}, block {}, rows vs model {:.1}% off, {:.1}s",
            work.block_len,
            100.0 * rel,
            el.as_secs_f64()
        ),
    )
}

fn main() {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&out);
    std::fs::create_dir_all(&out).unwrap();
    let mut results: Vec<(usize, &str, Line)> = Vec::new();
    let mut log: Vec<MetricsRecord> = Vec::new();
    let report = |id: usize, name: &'static str, l: Line, results: &mut Vec<(usize, &str, Line)>| {
        println!("{} {id:>2} {name}: {}", if l.pass { "PASS" } else { "FAIL" }, l.detail);
        let _ = std::io::stdout().flush();
        results.push((id, name, l));
    };

    report(1, "masked-diffusion oracle", c1_oracle(), &mut results);
    report(2, "gradient check", c2_gradients(), &mut results);
    report(3, "Euler convergence", c3_euler(), &mut results);
    report(4, "cache equivalence", c4_cache(), &mut results);

    let spec = WorldSpec::default();
    let corpus = Corpus::generate(&spec, 0, [50_000, 50_000, 10_000]).unwrap();
    let held_corpus = Corpus::generate(&spec, 1, [HELD_OUT, 0, 0]).unwrap();
    let held: Vec<&Sample> = held_corpus.of_kind(SampleKind::Und).collect();

    report(5, "packing isolation", c5_isolation(&corpus), &mut results);

    eprintln!("training und-only model ({UND_STEPS} steps)");
    let und_cfg = TrainConfig {
        steps: UND_STEPS,
        batch: [16, 0, 0],
        stage: Stage::Plain,
        ..TrainConfig::default()
    };
    let (und, und_time) = train(und_cfg.clone(), None, &corpus, &out.join("und"));
    let und_ckpt = und.checkpoint();

    eprintln!("continuing with length augmentation ({AUG_STEPS} steps)");
    let aug_cfg = TrainConfig {
        steps: UND_STEPS + AUG_STEPS,
        stage: Stage::Augmented,
        ..und_cfg
    };
    let (aug, aug_time) = train(aug_cfg, Some(&und_ckpt), &corpus, &out.join("aug"));

    report(6, "threshold trend", c6_threshold(&aug.model, &held, &mut log), &mut results);
    report(7, "cache speedup trend", c7_bench(&aug.model, &mut log), &mut results);

    let start = Instant::now();
    let evals: Vec<UndEval> = BLOCK_LENS.iter().map(|&l| blockwise(&aug.model, &held, l)).collect();
    let stage1: Vec<UndEval> = BLOCK_LENS
        .iter()
        .map(|&l| blockwise(&und.model, &held[..STAGE1_SAMPLES], l))
        .collect();
    for (l, (e, s)) in BLOCK_LENS.iter().zip(evals.iter().zip(&stage1)) {
        log.push(e.to_record("eval_len").with("block_len", l).with_f("threshold", DECODE_THRESHOLD));
        log.push(s.to_record("eval_len_stage1").with("block_len", l).with_f("threshold", DECODE_THRESHOLD));
    }
    let lens: Vec<f64> = evals.iter().map(|e| e.mean_len).collect();
    let exact: Vec<f64> = evals.iter().map(|e| e.exact_match).collect();
    let s1: Vec<f64> = stage1.iter().map(|e| e.mean_len).collect();
    let (lo, hi) = lens.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let spread = (hi - lo) / lo;
    let s1_ok = s1.windows(2).all(|w| w[1] > w[0]) && s1[s1.len() - 1] / s1[0] >= STAGE1_RATIO;
    let train_time = und_time + aug_time;
    report(
        8,
        "variable length",
        line(
            spread < LEN_SPREAD && exact.iter().all(|&e| e >= MIN_EXACT) && s1_ok && within(train_time, 30.0),
            format!(
                "L {BLOCK_LENS:?}: mean len {lens:.2?} (spread {:.1}% < {:.0}%), exact {exact:.4?} (>= {MIN_EXACT}); \
                 stage-1 len {s1:.1?}; training {:.1} min, eval {:.1}s",
                100.0 * spread,
                100.0 * LEN_SPREAD,
                train_time.as_secs_f64() / 60.0,
                start.elapsed().as_secs_f64()
            ),
        ),
        &mut results,
    );

    eprintln!("training joint model ({JOINT_STEPS} steps)");
    let joint_cfg = TrainConfig {
        steps: JOINT_STEPS,
        stage: Stage::Plain,
        ..TrainConfig::default()
    };
    let (joint, joint_time) = train(joint_cfg, None, &corpus, &out.join("joint"));
    let start = Instant::now();
    let acc_und = known_length(&und.model, &held);
    let acc_joint = known_length(&joint.model, &held);
    log.push(acc_und.to_record("eval_und").with("model", "und_only"));
    log.push(acc_joint.to_record("eval_und").with("model", "joint"));
    let gen = eval_gen(&joint.model, &spec, GEN_PER_CLASS, &EulerPlan::uniform(DEFAULT_STEPS).unwrap(), 256, 0).unwrap();
    log.push(gen.to_record());
    let drop = acc_und.token_accuracy - acc_joint.token_accuracy;
    let total = joint_time + start.elapsed();
    report(
        9,
        "joint non-interference",
        line(
            drop <= MAX_ACC_DROP && gen.max_err_sigma() < MAX_GEN_ERR && within(total, 45.0),
            format!(
                "token accuracy und-only {:.4} joint {:.4} (drop {:.2} pts <= {:.0}); max class-mean error {:.3} sigma (< {MAX_GEN_ERR}); {:.1} min",
                acc_und.token_accuracy,
                acc_joint.token_accuracy,
                100.0 * drop,
                100.0 * MAX_ACC_DROP,
                gen.max_err_sigma(),
                total.as_secs_f64() / 60.0
            ),
        ),
        &mut results,
    );

    report(10, "determinism and persistence", c10_determinism(&corpus, &aug, &out), &mut results);

    let mut text = format!("{METRICS_HEADER}\n");
    for r in &log {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(out.join("metrics.txt"), text).unwrap();
    let failed = results.iter().filter(|(_, _, l)| !l.pass).count();
    println!("{} of {} criteria passed; artifacts in {}", results.len() - failed, results.len(), out.display());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c10_determinism(corpus: &Corpus, trained: &Trainer<'_>, out: &Path) -> Line {
    let cfg = TrainConfig {
        steps: 20,
        warmup: 5,
        batch: [4, 4, 2],
        stage: Stage::Augmented,
        model: ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 48,
            ..ModelConfig::desk()
        },
        ..TrainConfig::default()
    };
    let mut metrics = Vec::new();
    for run in 0..2 {
        let dir = out.join(format!("repeat{run}"));
        std::fs::create_dir_all(&dir).unwrap();
        Trainer::new(cfg.clone(), corpus).unwrap().run(Some(&dir), |_| {}).unwrap();
        metrics.push(std::fs::read(dir.join("metrics.txt")).unwrap());
    }
    let same_metrics = metrics[0] == metrics[1] && !metrics[0].is_empty();

    let bytes = trained.checkpoint().to_bytes();
    let path = out.join("roundtrip.bin");
    trained.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let same_file = std::fs::read(&path).unwrap() == bytes && loaded.to_bytes() == bytes;
    let model_bytes = Checkpoint::from_model(&trained.model).to_bytes();
    let same_model = Checkpoint::from_model(&loaded.to_model().unwrap()).to_bytes() == model_bytes;
    line(
        same_metrics && same_file && same_model,
        format!(
            "metrics identical: {same_metrics} ({} bytes); checkpoint round trip identical: {} ({} bytes)",
            metrics[0].len(),
            same_file && same_model,
            bytes.len()
        ),
    )
}
