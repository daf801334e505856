//! Joint training over packed batches with Adam, checkpoints that resume
//! exactly, and line-oriented metrics.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{contract, Error, Result};
use crate::flow::{rf_draw, RfDraw};
use crate::layout::{Segment, SegmentLayout};
use crate::length::{augment, AugmentConfig};
use crate::mdm::{mdm_draw, LinearSchedule};
use crate::model::{parse_kv_lines, Checkpoint, MixtureModel, ModelConfig, SequenceInputs};
use crate::synth::{Corpus, Sample, SampleKind};
use crate::tensor::Tensor;

pub const KINDS: [SampleKind; 3] = [SampleKind::Und, SampleKind::Gen, SampleKind::Interleaved];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Responses used as given.
    Plain,
    /// Responses extended or truncated before corruption.
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub warmup: usize,
    /// Step at which training stops; also the horizon of the cosine decay.
    pub steps: usize,
    /// Samples per step of each kind (und, gen, interleaved).
    pub batch: [usize; 3],
    /// Loss weight of each kind.
    pub weights: [f64; 3],
    pub augment: AugmentConfig,
    pub stage: Stage,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 1e-6,
            warmup: 100,
            steps: 1000,
            batch: [16, 64, 8],
            weights: [1.0, 1.0, 1.0],
            augment: AugmentConfig { p_ext: 0.4, p_trunc: 0.3 },
            stage: Stage::Plain,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(contract(format!("train config: {m}")));
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return fail("loss weights must be finite and non-negative");
        }
        if !self.weights.iter().zip(&self.batch).any(|(&w, &b)| w > 0.0 && b > 0) {
            return fail("at least one kind needs a positive weight and batch size");
        }
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return fail("need 0 <= lr_min <= lr and lr > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and eps must be positive");
        }
        self.augment.validate()?;
        self.model.validate()
    }

    /// Learning rate at `step`: linear warmup, then cosine decay to `lr_min`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "lr_min={:?}", self.lr_min);
        let _ = writeln!(s, "warmup={}", self.warmup);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "batch_und={}", self.batch[0]);
        let _ = writeln!(s, "batch_gen={}", self.batch[1]);
        let _ = writeln!(s, "batch_inter={}", self.batch[2]);
        let _ = writeln!(s, "w_und={:?}", self.weights[0]);
        let _ = writeln!(s, "w_gen={:?}", self.weights[1]);
        let _ = writeln!(s, "w_inter={:?}", self.weights[2]);
        let _ = writeln!(s, "p_ext={:?}", self.augment.p_ext);
        let _ = writeln!(s, "p_trunc={:?}", self.augment.p_trunc);
        let stage = match self.stage {
            Stage::Plain => "plain",
            Stage::Augmented => "augmented",
        };
        let _ = writeln!(s, "stage={stage}");
        let _ = writeln!(s, "beta1={:?}", self.beta1);
        let _ = writeln!(s, "beta2={:?}", self.beta2);
        let _ = writeln!(s, "adam_eps={:?}", self.adam_eps);
        let _ = writeln!(s, "grad_clip={:?}", self.grad_clip);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        for line in self.model.to_kv().lines() {
            let _ = writeln!(s, "model.{line}");
        }
        s
    }

    /// Applies `key=value` lines over `self`; `model.` keys go to the model
    /// config.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv_lines(text)? {
            let bad = || Error::Format(format!("bad value {value:?} for {key}"));
            macro_rules! set {
                ($($f:tt)+) => {
                    self.$($f)+ = value.parse().map_err(|_| bad())?
                };
            }
            match key.as_str() {
                "lr" => set!(lr),
                "lr_min" => set!(lr_min),
                "warmup" => set!(warmup),
                "steps" => set!(steps),
                "batch_und" => set!(batch[0]),
                "batch_gen" => set!(batch[1]),
                "batch_inter" => set!(batch[2]),
                "w_und" => set!(weights[0]),
                "w_gen" => set!(weights[1]),
                "w_inter" => set!(weights[2]),
                "p_ext" => set!(augment.p_ext),
                "p_trunc" => set!(augment.p_trunc),
                "beta1" => set!(beta1),
                "beta2" => set!(beta2),
                "adam_eps" => set!(adam_eps),
                "grad_clip" => set!(grad_clip),
                "seed" => set!(seed),
                "checkpoint_every" => set!(checkpoint_every),
                "stage" => {
                    self.stage = match value.as_str() {
                        "plain" => Stage::Plain,
                        "augmented" => Stage::Augmented,
                        _ => return Err(bad()),
                    }
                }
                k => match k.strip_prefix("model.") {
                    Some(mk) if self.model.apply_kv(mk, &value)? => {}
                    _ => return Err(Error::Format(format!("unknown train key {key:?}"))),
                },
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generator for one (seed, step, stream) triple.
pub fn stream_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(stream.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// A sample with its corruption draw and loss weights, ready for packing.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub kind: SampleKind,
    pub layout: SegmentLayout,
    /// Model input ids (MASK where corrupted).
    pub tokens: Vec<usize>,
    /// Clean ids, the cross-entropy targets.
    pub targets: Vec<usize>,
    /// Per discrete position weight; zero where no loss.
    pub ce_weight: Vec<f64>,
    pub latents: Tensor,
    pub latent_t: Vec<f64>,
    pub velocity_target: Tensor,
    /// Per latent row weight; zero where no loss.
    pub mse_weight: Vec<f64>,
}

/// Corrupts one sample. `scale` multiplies every loss weight.
pub fn prepare(
    sample: &Sample,
    scale: f64,
    augment_cfg: Option<&AugmentConfig>,
    mask_id: usize,
    vocab: crate::vocab::Vocab,
    rng: &mut impl Rng,
) -> Result<Prepared> {
    let d_lat = sample.latents.cols().max(1);
    match sample.kind {
        SampleKind::Und => {
            let (layout, x0) = match augment_cfg {
                Some(a) => {
                    let r = augment(sample.response(), a, vocab, rng)?;
                    let mut segs: Vec<Segment> = sample.prompt_layout()?.segments().to_vec();
                    segs.push(Segment::text_response(r.len()));
                    let mut x0 = sample.prompt_tokens().to_vec();
                    x0.extend(r);
                    (SegmentLayout::new(segs)?, x0)
                }
                None => (sample.layout.clone(), sample.tokens.clone()),
            };
            let draw = mdm_draw(&x0, &layout, &LinearSchedule, mask_id, rng)?;
            let w = scale / draw.t;
            let ce_weight = draw.masked.iter().map(|&m| if m { w } else { 0.0 }).collect();
            Ok(Prepared {
                kind: sample.kind,
                layout,
                tokens: draw.tokens,
                targets: x0,
                ce_weight,
                latents: Tensor::zeros(&[0, d_lat]),
                latent_t: Vec::new(),
                velocity_target: Tensor::zeros(&[0, d_lat]),
                mse_weight: Vec::new(),
            })
        }
        SampleKind::Gen | SampleKind::Interleaved => {
            let per_turn = sample.kind == SampleKind::Interleaved;
            let RfDraw { xt, t, target, mask } = rf_draw(&sample.latents, &sample.layout, per_turn, rng)?;
            let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
            let mse_weight = mask.iter().map(|&m| if m { scale / n } else { 0.0 }).collect();
            Ok(Prepared {
                kind: sample.kind,
                layout: sample.layout.clone(),
                tokens: sample.tokens.clone(),
                targets: sample.tokens.clone(),
                ce_weight: vec![0.0; sample.tokens.len()],
                latents: xt,
                latent_t: t,
                velocity_target: target,
                mse_weight,
            })
        }
    }
}

/// Loss nodes of one packed batch.
pub struct BatchLoss {
    pub total: NodeId,
    /// Weighted contribution of each kind.
    pub parts: [Option<NodeId>; 3],
}

/// Packs `items` into one sequence and records the weighted loss.
pub fn batch_loss_on_tape(model: &MixtureModel, tape: &mut Tape, items: &[Prepared]) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(contract("empty batch"));
    }
    let layouts: Vec<SegmentLayout> = items.iter().map(|p| p.layout.clone()).collect();
    let layout = SegmentLayout::pack(&layouts)?;
    let d_lat = model.config().d_lat;
    let cat = |f: &dyn Fn(&Prepared) -> Vec<f64>| items.iter().flat_map(f).collect::<Vec<f64>>();
    let tokens: Vec<usize> = items.iter().flat_map(|p| p.tokens.iter().copied()).collect();
    let targets: Vec<usize> = items.iter().flat_map(|p| p.targets.iter().copied()).collect();
    let lat_parts: Vec<&Tensor> = items.iter().map(|p| &p.latents).collect();
    let latents = if lat_parts.iter().all(|t| t.rows() == 0) {
        Tensor::zeros(&[0, d_lat])
    } else {
        Tensor::vstack(&lat_parts.iter().copied().filter(|t| t.rows() > 0).collect::<Vec<_>>())?
    };
    let latent_t = cat(&|p| p.latent_t.clone());
    let inputs = SequenceInputs {
        layout: &layout,
        tokens: &tokens,
        latents: &latents,
        latent_t: &latent_t,
    };
    let nodes = model.forward_on_tape(tape, &inputs, None, false)?;

    let mut parts = [None; 3];
    for (k, kind) in KINDS.iter().enumerate() {
        if !items.iter().any(|p| p.kind == *kind) {
            continue;
        }
        parts[k] = match kind {
            SampleKind::Und => {
                let w: Vec<f64> = items
                    .iter()
                    .flat_map(|p| {
                        let on = p.kind == *kind;
                        p.ce_weight.iter().map(move |&w| if on { w } else { 0.0 })
                    })
                    .collect();
                let mask: Vec<bool> = w.iter().map(|&w| w > 0.0).collect();
                let count = mask.iter().filter(|&&m| m).count();
                match (nodes.logits, count) {
                    (Some(lg), c) if c > 0 => {
                        let ce = tape.masked_cross_entropy(lg, &targets, &mask, &w)?;
                        Some(tape.scale(ce, c as f64))
                    }
                    _ => None,
                }
            }
            _ => {
                let w: Vec<f64> = items
                    .iter()
                    .flat_map(|p| {
                        let on = p.kind == *kind;
                        p.mse_weight.iter().map(move |&w| if on { w } else { 0.0 })
                    })
                    .collect();
                let mask: Vec<bool> = w.iter().map(|&w| w > 0.0).collect();
                let count = mask.iter().filter(|&&m| m).count();
                match (nodes.velocity, count) {
                    (Some(v), c) if c > 0 => {
                        let target = Tensor::vstack(
                            &items
                                .iter()
                                .filter(|p| p.velocity_target.rows() > 0)
                                .map(|p| &p.velocity_target)
                                .collect::<Vec<_>>(),
                        )?;
                        let root: Vec<f64> = w.iter().flat_map(|&x| vec![x.sqrt(); d_lat]).collect();
                        let root = Tensor::new(vec![w.len(), d_lat], root)?;
                        let scaled_t: Vec<f64> = target.data().iter().zip(root.data()).map(|(a, b)| a * b).collect();
                        let target = Tensor::new(target.shape().to_vec(), scaled_t)?;
                        let rc = tape.constant(root);
                        let scaled = tape.mul(v, rc)?;
                        let mse = tape.masked_mse(scaled, &target, &mask)?;
                        Some(tape.scale(mse, c as f64))
                    }
                    _ => None,
                }
            }
        };
    }
    let mut total: Option<NodeId> = None;
    for p in parts.iter().flatten() {
        total = Some(match total {
            Some(t) => tape.add(t, *p)?,
            None => *p,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(BatchLoss { total, parts })
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &MixtureModel) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with gradients already scaled by `clip`.
    pub fn update(&mut self, model: &mut MixtureModel, grads: &Gradients, lr: f64, clip: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = model.params_mut().get_mut(id);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

pub fn grad_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// One `key=value` record per line, fields in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub fields: Vec<(String, String)>,
}

impl MetricsRecord {
    pub fn new(kind: &str) -> Self {
        Self {
            fields: vec![("kind".into(), kind.into())],
        }
    }

    pub fn with(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn with_f(self, key: &str, value: f64) -> Self {
        self.with(key, format!("{value:?}"))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_line(&self) -> String {
        let parts: Vec<String> = self.fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
        parts.join(" ")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields = line
            .split_whitespace()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Format(format!("bad metrics field {kv:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { fields })
    }
}

/// First line of every metrics file.
pub const METRICS_HEADER: &str = "# metrics format=1";

/// Reads a metrics file, skipping comment lines.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(MetricsRecord::parse_line)
        .collect()
}

/// Training state: model, optimizer and the corpus it draws from.
pub struct Trainer<'c> {
    pub cfg: TrainConfig,
    pub model: MixtureModel,
    pub adam: Adam,
    pub step: usize,
    corpus: &'c Corpus,
    pools: [Vec<usize>; 3],
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        let model = MixtureModel::new(cfg.model.clone())?;
        Self::with_model(cfg, model, corpus)
    }

    pub fn with_model(cfg: TrainConfig, model: MixtureModel, corpus: &'c Corpus) -> Result<Self> {
        cfg.validate()?;
        if model.config() != &cfg.model {
            return Err(contract("model does not match the configured architecture"));
        }
        let pools = KINDS.map(|k| {
            corpus
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.kind == k)
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        });
        for (k, pool) in pools.iter().enumerate() {
            if cfg.batch[k] > 0 && cfg.weights[k] > 0.0 && pool.is_empty() {
                return Err(contract(format!("corpus has no {:?} samples", KINDS[k])));
            }
        }
        let spec = &corpus.spec;
        let mc = model.config();
        if spec.vocab_size != mc.vocab_size || spec.d_lat != mc.d_lat {
            return Err(contract("corpus vocabulary or latent width differs from the model"));
        }
        let adam = Adam::new(&model);
        Ok(Self {
            cfg,
            model,
            adam,
            step: 0,
            corpus,
            pools,
        })
    }

    /// Restores model, moments and step from a training checkpoint. A
    /// checkpoint without moments starts a fresh optimizer.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint, corpus: &'c Corpus) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut cfg = cfg;
        cfg.model = model.config().clone();
        let mut tr = Self::with_model(cfg, model, corpus)?;
        if let Some(step) = ckpt.meta("step") {
            let names: Vec<String> = tr.model.params().iter().map(|(_, n, _)| n.to_string()).collect();
            let moments = names.iter().enumerate().all(|(i, n)| {
                match (ckpt.tensor(&format!("adam.m.{n}")), ckpt.tensor(&format!("adam.v.{n}"))) {
                    (Some(m), Some(v)) => {
                        tr.adam.m[i] = m.clone();
                        tr.adam.v[i] = v.clone();
                        true
                    }
                    _ => false,
                }
            });
            if moments {
                tr.adam.t = ckpt
                    .meta("adam_t")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format("checkpoint lacks adam_t".into()))?;
                tr.step = step.parse().map_err(|_| Error::Format("bad step".into()))?;
            } else {
                tr.adam = Adam::new(&tr.model);
            }
        }
        Ok(tr)
    }

    /// Model weights plus optimizer moments and step.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for (i, (_, n, _)) in self.model.params().iter().enumerate() {
            ck.tensors.push((format!("adam.m.{n}"), self.adam.m[i].clone()));
            ck.tensors.push((format!("adam.v.{n}"), self.adam.v[i].clone()));
        }
        ck.meta.push(("step".into(), self.step.to_string()));
        ck.meta.push(("adam_t".into(), self.adam.t.to_string()));
        ck.meta.push(("train_config".into(), self.cfg.to_kv()));
        ck
    }

    /// Samples and corrupts the batch of `step`; depends only on the seed,
    /// the step and the corpus.
    pub fn prepare_batch(&self, step: usize) -> Result<Vec<Prepared>> {
        let vocab = self.model.config().vocab();
        let aug = match self.cfg.stage {
            Stage::Augmented => Some(&self.cfg.augment),
            Stage::Plain => None,
        };
        let mut items = Vec::new();
        for (k, pool) in self.pools.iter().enumerate() {
            let b = self.cfg.batch[k];
            if b == 0 || self.cfg.weights[k] == 0.0 {
                continue;
            }
            let mut rng = stream_rng(self.cfg.seed, step as u64, k as u64);
            let scale = self.cfg.weights[k] / b as f64;
            for _ in 0..b {
                let s = &self.corpus.samples[pool[rng.gen_range(0..pool.len())]];
                items.push(prepare(s, scale, aug, vocab.mask(), vocab, &mut rng)?);
            }
        }
        Ok(items)
    }

    /// Runs one optimizer step. On a non-finite loss or gradient the model is
    /// left untouched and `Error::Diverged` is returned.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let items = self.prepare_batch(self.step)?;
        let (loss, parts, grads) = {
            let mut tape = self.model.tape();
            let bl = batch_loss_on_tape(&self.model, &mut tape, &items)?;
            let loss = tape.value(bl.total).item();
            let parts = bl.parts.map(|p| p.map_or(0.0, |n| tape.value(n).item()));
            let grads = tape.backward(bl.total)?;
            (loss, parts, grads)
        };
        let norm = grad_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step: self.step });
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = self.cfg.lr_at(self.step);
        self.adam.update(&mut self.model, &grads, lr, clip, &self.cfg);
        let rec = MetricsRecord::new("train")
            .with("step", self.step)
            .with_f("loss", loss)
            .with_f("und", parts[0])
            .with_f("gen", parts[1])
            .with_f("inter", parts[2])
            .with_f("grad_norm", norm)
            .with_f("lr", lr);
        self.step += 1;
        Ok(rec)
    }

    /// Trains until `cfg.steps`, appending metrics to `out_dir/metrics.txt`
    /// and wall-time to `out_dir/timing.txt`, saving `out_dir/checkpoint.bin`.
    /// On divergence the last good state is saved before returning the error.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_record: impl FnMut(&MetricsRecord)) -> Result<()> {
        let mut files = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                let open = |n: &str| std::fs::OpenOptions::new().create(true).append(true).open(d.join(n));
                let (mut m, t) = (open("metrics.txt")?, open("timing.txt")?);
                if m.metadata()?.len() == 0 {
                    writeln!(m, "{METRICS_HEADER}")?;
                }
                Some((m, t))
            }
            None => None,
        };
        let start = std::time::Instant::now();
        while self.step < self.cfg.steps {
            let rec = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    if let Some(d) = out_dir {
                        self.checkpoint().save(d.join("checkpoint.bin"))?;
                    }
                    return Err(e);
                }
            };
            if let Some((m, t)) = files.as_mut() {
                writeln!(m, "{}", rec.to_line())?;
                writeln!(t, "step={} secs={:.3}", self.step - 1, start.elapsed().as_secs_f64())?;
            }
            on_record(&rec);
            let every = self.cfg.checkpoint_every;
            if let Some(d) = out_dir {
                if every > 0 && self.step % every == 0 {
                    self.checkpoint().save(d.join("checkpoint.bin"))?;
                }
            }
        }
        if let Some(d) = out_dir {
            self.checkpoint().save(d.join("checkpoint.bin"))?;
        }
        Ok(())
    }
}
