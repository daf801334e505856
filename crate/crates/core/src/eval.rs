//! Held-out evaluation, decoding sweeps and cache benchmarks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::flow::{gaussian, integrate, EulerPlan};
use crate::layout::{Segment, SegmentLayout};
use crate::length::{decode, BlockPredictor, CachedDecoder, DecodeConfig, UncachedDecoder};
use crate::model::MixtureModel;
use crate::synth::{gen_prompt_for, Sample, SampleKind, WorldSpec};
use crate::tensor::Tensor;
use crate::train::MetricsRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct UndEval {
    pub samples: usize,
    /// Fraction of reference positions reproduced exactly.
    pub token_accuracy: f64,
    /// Fraction of answers reproduced exactly, length included.
    pub exact_match: f64,
    /// Mean number of generated tokens.
    pub mean_len: f64,
    pub mean_passes: f64,
    /// Forward passes per generated token.
    pub passes_per_token: f64,
    /// Fraction of decodes that reached an EOS within the budget.
    pub terminated: f64,
    pub secs: f64,
}

impl UndEval {
    pub fn tokens_per_sec(&self) -> f64 {
        if self.secs > 0.0 {
            self.mean_len * self.samples as f64 / self.secs
        } else {
            0.0
        }
    }

    /// Metrics record; wall-time is left out so records stay reproducible.
    pub fn to_record(&self, kind: &str) -> MetricsRecord {
        MetricsRecord::new(kind)
            .with("samples", self.samples)
            .with_f("token_accuracy", self.token_accuracy)
            .with_f("exact_match", self.exact_match)
            .with_f("mean_len", self.mean_len)
            .with_f("mean_passes", self.mean_passes)
            .with_f("passes_per_token", self.passes_per_token)
            .with_f("terminated", self.terminated)
    }
}

/// How the answer length is chosen during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UndMode {
    /// One block of exactly the reference length.
    KnownLength { threshold: f64 },
    /// Blockwise decoding until EOS.
    Blockwise(DecodeConfig),
}

/// Decodes the answer of each understanding sample from its prompt, reusing
/// a prompt cache.
pub fn eval_und(model: &MixtureModel, samples: &[&Sample], mode: UndMode) -> Result<UndEval> {
    if samples.iter().any(|s| s.kind != SampleKind::Und) {
        return Err(contract("eval_und takes understanding samples only"));
    }
    let vocab = model.config().vocab();
    let lat = Tensor::zeros(&[0, model.config().d_lat]);
    let start = Instant::now();
    let (mut hits, mut positions, mut exact, mut len, mut passes, mut term) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    for s in samples {
        let reference = s.response();
        let cfg = match mode {
            UndMode::KnownLength { threshold } => DecodeConfig {
                block_len: reference.len(),
                threshold,
                max_blocks: 1,
            },
            UndMode::Blockwise(c) => c,
        };
        let cache = model.write_cache(&s.prompt_layout()?, s.prompt_tokens(), &lat, &[])?;
        let out = decode(&mut CachedDecoder::new(model, cache), &cfg, vocab)?;
        hits += reference.iter().zip(&out.tokens).filter(|(a, b)| a == b).count();
        positions += reference.len();
        exact += usize::from(out.tokens == reference);
        len += out.tokens.len();
        passes += out.passes;
        term += usize::from(out.terminated);
    }
    let n = samples.len().max(1) as f64;
    Ok(UndEval {
        samples: samples.len(),
        token_accuracy: hits as f64 / positions.max(1) as f64,
        exact_match: exact as f64 / n,
        mean_len: len as f64 / n,
        mean_passes: passes as f64 / n,
        passes_per_token: passes as f64 / len.max(1) as f64,
        terminated: term as f64 / n,
        secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub eval: UndEval,
}

/// Blockwise evaluation at each confidence threshold on the same samples.
pub fn threshold_sweep(
    model: &MixtureModel,
    samples: &[&Sample],
    block_len: usize,
    max_blocks: usize,
    thresholds: &[f64],
) -> Result<Vec<ThresholdRow>> {
    thresholds
        .iter()
        .map(|&threshold| {
            let cfg = DecodeConfig {
                block_len,
                threshold,
                max_blocks,
            };
            Ok(ThresholdRow {
                threshold,
                eval: eval_und(model, samples, UndMode::Blockwise(cfg))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenEval {
    pub per_class: usize,
    /// Distance between the empirical and the true class mean, in units of
    /// the component standard deviation.
    pub mean_err_sigma: Vec<f64>,
    /// Fraction of generated rows within Euclidean distance 3σ of their
    /// class mean.
    pub within_3sigma: f64,
    /// The generated rows of each class.
    pub latents: Vec<Tensor>,
}

impl GenEval {
    pub fn max_err_sigma(&self) -> f64 {
        self.mean_err_sigma.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn to_record(&self) -> MetricsRecord {
        let mut r = MetricsRecord::new("eval_gen")
            .with("per_class", self.per_class)
            .with_f("max_err_sigma", self.max_err_sigma())
            .with_f("within_3sigma", self.within_3sigma);
        for (g, e) in self.mean_err_sigma.iter().enumerate() {
            r = r.with_f(&format!("err_sigma.{g}"), *e);
        }
        r
    }
}

/// Samples `per_class` latents for every caption with packed Euler
/// integration and compares them with the true components.
pub fn eval_gen(
    model: &MixtureModel,
    spec: &WorldSpec,
    per_class: usize,
    plan: &EulerPlan,
    chunk: usize,
    seed: u64,
) -> Result<GenEval> {
    if chunk == 0 || per_class == 0 {
        return Err(contract("eval_gen needs positive sample and chunk counts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = Vec::with_capacity(spec.lat_classes);
    let mut errs = Vec::with_capacity(spec.lat_classes);
    let (mut inside, mut rows) = (0usize, 0usize);
    for g in 0..spec.lat_classes {
        let (one, prompt) = gen_prompt_for(spec, g);
        let mut parts = Vec::new();
        let mut left = per_class;
        while left > 0 {
            let b = left.min(chunk);
            left -= b;
            let layout = SegmentLayout::pack(&vec![SegmentLayout::new(one.segments().to_vec())?; b])?;
            let tokens: Vec<usize> = prompt.iter().copied().cycle().take(prompt.len() * b).collect();
            let z0 = gaussian(&[b * spec.lat_len, spec.d_lat], &mut rng);
            let mut field = |z: &Tensor, t: f64| model.forward_gen(z, t, &tokens, &layout, None);
            parts.push(integrate(&mut field, z0, plan)?);
        }
        let all = Tensor::vstack(&parts.iter().collect::<Vec<_>>())?;
        let mu = spec.latent_mean(g);
        let mut mean = vec![0.0; spec.d_lat];
        for r in 0..all.rows() {
            let row = all.row(r);
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / all.rows() as f64;
            }
            let d2: f64 = row.iter().zip(&mu).map(|(v, m)| (v - m).powi(2)).sum();
            inside += usize::from(d2.sqrt() <= 3.0 * spec.sigma);
        }
        rows += all.rows();
        let e: f64 = mean.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        errs.push(e / spec.sigma);
        latents.push(all);
    }
    Ok(GenEval {
        per_class,
        mean_err_sigma: errs,
        within_3sigma: inside as f64 / rows.max(1) as f64,
        latents,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheBenchRow {
    pub prefix: usize,
    pub cached_secs: f64,
    pub uncached_secs: f64,
    pub cached_rows: usize,
    pub uncached_rows: usize,
    /// Positions ratio predicted by the recompute cost model.
    pub analytic_ratio: f64,
}

impl CacheBenchRow {
    pub fn speedup(&self) -> f64 {
        self.uncached_secs / self.cached_secs
    }

    pub fn rows_ratio(&self) -> f64 {
        self.uncached_rows as f64 / self.cached_rows as f64
    }

    pub fn to_record(&self) -> MetricsRecord {
        MetricsRecord::new("bench_cache")
            .with("prefix", self.prefix)
            .with("cached_rows", self.cached_rows)
            .with("uncached_rows", self.uncached_rows)
            .with_f("rows_ratio", self.rows_ratio())
            .with_f("analytic_ratio", self.analytic_ratio)
            .with_f("speedup", self.speedup())
    }
}

/// Fixed decode workload for the cache benchmark: `blocks` blocks of
/// `block_len` positions, `passes` forward passes each.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheWorkload {
    pub block_len: usize,
    pub blocks: usize,
    pub passes: usize,
    pub repeats: usize,
}

impl Default for CacheWorkload {
    fn default() -> Self {
        Self {
            block_len: 32,
            blocks: 2,
            passes: 8,
            repeats: 3,
        }
    }
}

impl CacheWorkload {
    /// Uncached over cached positions for a prefix of `p`: every uncached
    /// pass recomputes the prefix and all committed blocks, the cached run
    /// computes the active block per pass plus one extension per block.
    pub fn analytic_ratio(&self, p: usize) -> f64 {
        let (l, k) = (self.block_len as f64, self.passes as f64);
        let uncached: f64 = (0..self.blocks).map(|b| k * (p as f64 + (b + 1) as f64 * l)).sum();
        uncached / (self.blocks as f64 * (k + 1.0) * l)
    }

    fn run(&self, predictor: &mut impl BlockPredictor, rng: &mut impl Rng, vocab_content: usize) -> Result<()> {
        for _ in 0..self.blocks {
            let mut block = vec![0; self.block_len];
            for _ in 0..self.passes {
                block.iter_mut().for_each(|x| *x = rng.gen_range(0..vocab_content));
                predictor.block_logits(&block)?;
            }
            predictor.commit(&block)?;
        }
        Ok(())
    }
}

/// Times the workload with and without a prefix cache for each prefix
/// length; each time is the fastest of `repeats` runs.
pub fn bench_cache(model: &MixtureModel, prefixes: &[usize], work: &CacheWorkload, seed: u64) -> Result<Vec<CacheBenchRow>> {
    let vocab = model.config().vocab();
    let lat = Tensor::zeros(&[0, model.config().d_lat]);
    let mut rows = Vec::with_capacity(prefixes.len());
    for &p in prefixes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ p as u64);
        let layout = if p == 0 {
            SegmentLayout::empty()
        } else {
            SegmentLayout::new(vec![Segment::text_prompt(p)])?
        };
        let tokens: Vec<usize> = (0..p).map(|_| rng.gen_range(0..vocab.content())).collect();
        let mut best = (f64::INFINITY, f64::INFINITY);
        let (mut cached_rows, mut uncached_rows) = (0, 0);
        for _ in 0..work.repeats.max(1) {
            let t0 = Instant::now();
            let cache = model.write_cache(&layout, &tokens, &lat, &[])?;
            let mut dec = CachedDecoder::new(model, cache);
            work.run(&mut dec, &mut rng.clone(), vocab.content())?;
            best.0 = best.0.min(t0.elapsed().as_secs_f64());
            cached_rows = dec.rows_computed;

            let t0 = Instant::now();
            let mut dec = UncachedDecoder::new(model, layout.clone(), tokens.clone())?;
            work.run(&mut dec, &mut rng.clone(), vocab.content())?;
            best.1 = best.1.min(t0.elapsed().as_secs_f64());
            uncached_rows = dec.rows_computed;
        }
        rows.push(CacheBenchRow {
            prefix: p,
            cached_secs: best.0,
            uncached_secs: best.1,
            cached_rows,
            uncached_rows,
            analytic_ratio: work.analytic_ratio(p),
        });
    }
    Ok(rows)
}
