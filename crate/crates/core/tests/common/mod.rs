#![allow(dead_code)]

pub mod oracle;

use mixdiff_core::layout::{Modality, Role, Segment, SegmentLayout};
use mixdiff_core::model::{KvCache, MixtureModel, ModelConfig, SequenceInputs};
use mixdiff_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// A full sequence whose trailing segment is active, with inputs for every
/// position.
#[derive(Clone, Debug)]
pub struct Case {
    pub layout: SegmentLayout,
    pub tokens: Vec<usize>,
    pub latents: Tensor,
    pub latent_t: Vec<f64>,
}

fn random_tokens(rng: &mut impl Rng, n: usize, content: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..content)).collect()
}

/// Random layout in one of the four families: understanding, generation,
/// interleaved multi-turn, packed multi-sample.
pub fn random_case(rng: &mut impl Rng, family: usize, cfg: &ModelConfig) -> Case {
    let mut segs = Vec::new();
    let sample = |segs: &mut Vec<Segment>, sid: usize, kind: usize, rng: &mut dyn rand::RngCore| {
        let mut len = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
        match kind {
            0 => {
                segs.push(Segment::vis_enc(len(1, 5)).with_sample(sid));
                segs.push(Segment::text_prompt(len(1, 4)).with_sample(sid));
                segs.push(Segment::text_response(len(1, 6)).with_sample(sid));
            }
            1 => {
                segs.push(Segment::text_prompt(len(1, 5)).with_sample(sid));
                segs.push(Segment::vis_lat(len(1, 5)).with_sample(sid));
            }
            _ => {
                let turns = len(2, 3);
                for turn in 0..turns {
                    segs.push(Segment::text_prompt(len(1, 3)).with_sample(sid).with_turn(turn));
                    let role = if turn + 1 == turns { Role::Target } else { Role::Condition };
                    segs.push(Segment::new(Modality::VisLat, role, len(1, 4)).with_sample(sid).with_turn(turn));
                }
            }
        }
    };
    match family {
        0 | 1 | 2 => sample(&mut segs, 0, family, rng),
        _ => {
            let n = rng.gen_range(2..=3);
            for sid in 0..n {
                let kind = rng.gen_range(0..3);
                sample(&mut segs, sid, kind, rng);
            }
        }
    }
    // Only the trailing segment is noisy; earlier latent segments are clean.
    let last = segs.len() - 1;
    for s in &mut segs[..last] {
        if s.modality == Modality::VisLat {
            s.role = Role::Condition;
        }
    }
    let layout = SegmentLayout::new(segs).unwrap().with_last_active().unwrap();
    let n_disc = layout.modality_of_position().iter().filter(|m| m.is_discrete()).count();
    let n_lat = layout.total_len() - n_disc;
    let content = cfg.vocab().content();
    let mut tokens = random_tokens(rng, n_disc, content);
    // Active text blocks carry some MASK ids.
    let boundary = layout.prefix_boundary().unwrap();
    let modality = layout.modality_of_position();
    let mut k = 0;
    for (p, m) in modality.iter().enumerate() {
        if m.is_discrete() {
            if p >= boundary && rng.gen_bool(0.5) {
                tokens[k] = cfg.vocab().mask();
            }
            k += 1;
        }
    }
    let latents = Tensor::new(
        vec![n_lat, cfg.d_lat],
        (0..n_lat * cfg.d_lat).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap();
    let t = rng.gen_range(0.0..1.0);
    let latent_t = mixdiff_core::model::latent_times(&layout, 0, t);
    Case {
        layout,
        tokens,
        latents,
        latent_t,
    }
}

impl Case {
    pub fn inputs(&self) -> SequenceInputs<'_> {
        SequenceInputs {
            layout: &self.layout,
            tokens: &self.tokens,
            latents: &self.latents,
            latent_t: &self.latent_t,
        }
    }

    /// Splits inputs at the prefix boundary: (prefix tokens, prefix latents,
    /// prefix times, active tokens, active latents, active times).
    pub fn split(&self) -> (Vec<usize>, Tensor, Vec<f64>, Vec<usize>, Tensor, Vec<f64>) {
        let boundary = self.layout.prefix_boundary().unwrap();
        let modality = self.layout.modality_of_position();
        let n_disc_prefix = modality[..boundary].iter().filter(|m| m.is_discrete()).count();
        let n_lat_prefix = boundary - n_disc_prefix;
        let lat_rows: Vec<usize> = (0..self.latents.rows()).collect();
        (
            self.tokens[..n_disc_prefix].to_vec(),
            self.latents.select_rows(&lat_rows[..n_lat_prefix]),
            self.latent_t[..n_lat_prefix].to_vec(),
            self.tokens[n_disc_prefix..].to_vec(),
            self.latents.select_rows(&lat_rows[n_lat_prefix..]),
            self.latent_t[n_lat_prefix..].to_vec(),
        )
    }

    pub fn cache(&self, model: &MixtureModel) -> KvCache {
        let (pt, pl, ptt, ..) = self.split();
        model.write_cache(&self.layout, &pt, &pl, &ptt).unwrap()
    }

    /// Max abs difference between cached and uncached outputs on the active
    /// block.
    pub fn cache_discrepancy(&self, model: &MixtureModel) -> f64 {
        let full = model.forward(&self.inputs(), None).unwrap();
        let cache = self.cache(model);
        let (.., at, al, att) = self.split();
        let inputs = SequenceInputs {
            layout: &self.layout,
            tokens: &at,
            latents: &al,
            latent_t: &att,
        };
        let cached = model.forward(&inputs, Some(&cache)).unwrap();
        let tail = |t: &Tensor, k: usize| t.select_rows(&((t.rows() - k)..t.rows()).collect::<Vec<_>>());
        let dl = tail(&full.logits, cached.logits.rows()).max_abs_diff(&cached.logits);
        let dv = tail(&full.velocity, cached.velocity.rows()).max_abs_diff(&cached.velocity);
        dl.max(dv)
    }
}

/// Model with larger-than-default weights so outputs are far from trivial.
pub fn lively_model(mut cfg: ModelConfig, seed: u64) -> MixtureModel {
    cfg.seed = seed;
    cfg.init_std = 0.3;
    MixtureModel::new(cfg).unwrap()
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        vocab_size: 12,
        d_lat: 2,
        max_seq_len: 64,
        time_features: 8,
        ..ModelConfig::desk()
    }
}
