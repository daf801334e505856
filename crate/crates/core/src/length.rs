//! Variable-length generation: EOS extension / truncation of training
//! responses, and blockwise decoding with confidence-thresholded parallel
//! unmasking.

use rand::Rng;

use crate::error::{contract, Result};
use crate::layout::{Segment, SegmentLayout};
use crate::model::{KvCache, MixtureModel};
use crate::tensor::{softmax_in_place, Tensor};
use crate::vocab::Vocab;

/// Responses must be longer than this to be truncated.
pub const MIN_TRUNC_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_ext: f64,
    pub p_trunc: f64,
}

impl AugmentConfig {
    pub const OFF: Self = Self { p_ext: 0.0, p_trunc: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.p_ext) || !ok(self.p_trunc) || self.p_ext + self.p_trunc > 1.0 {
            return Err(contract(format!(
                "augmentation probabilities must lie in [0, 1] and sum to at most 1, got {} and {}",
                self.p_ext, self.p_trunc
            )));
        }
        Ok(())
    }
}

/// Appends `k ~ U{1..=|r0|}` EOS ids with probability `p_ext`; otherwise,
/// with probability `p_trunc` and only for responses longer than
/// [`MIN_TRUNC_LEN`], keeps a prefix of length `l ~ U{1..=|r0|-1}`.
pub fn augment(r0: &[usize], cfg: &AugmentConfig, vocab: Vocab, rng: &mut impl Rng) -> Result<Vec<usize>> {
    cfg.validate()?;
    if r0.is_empty() {
        return Err(contract("cannot augment an empty response"));
    }
    if r0.contains(&vocab.mask()) {
        return Err(contract("response contains MASK"));
    }
    let u: f64 = rng.gen();
    let n = r0.len();
    let mut out = r0.to_vec();
    if u < cfg.p_ext {
        let k = rng.gen_range(1..=n);
        out.extend(std::iter::repeat(vocab.eos()).take(k));
    } else if u < cfg.p_ext + cfg.p_trunc && n > MIN_TRUNC_LEN {
        let l = rng.gen_range(1..n);
        out.truncate(l);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub block_len: usize,
    /// Positions whose confidence exceeds this are committed in parallel.
    pub threshold: f64,
    pub max_blocks: usize,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 || self.max_blocks == 0 {
            return Err(contract("block length and block budget must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(contract(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Source of logits for the block being denoised.
pub trait BlockPredictor {
    /// Logits `[block.len(), V]` for the current block given everything
    /// committed so far.
    fn block_logits(&mut self, block: &[usize]) -> Result<Tensor>;
    /// Appends a finished block to the context.
    fn commit(&mut self, block: &[usize]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Generated ids before the first EOS; never contains EOS or MASK.
    pub tokens: Vec<usize>,
    /// False when the block budget ran out before an EOS.
    pub terminated: bool,
    pub passes: usize,
    pub blocks: usize,
}

/// Blockwise decoding: append `L` MASKs, unmask by confidence until the
/// block is complete, stop at the first block holding an EOS.
pub fn decode(predictor: &mut impl BlockPredictor, cfg: &DecodeConfig, vocab: Vocab) -> Result<DecodeOutput> {
    cfg.validate()?;
    let (mask, eos) = (vocab.mask(), vocab.eos());
    let mut generated = Vec::new();
    let mut passes = 0;
    let mut probs = vec![0.0; vocab.size];
    for b in 0..cfg.max_blocks {
        let mut block = vec![mask; cfg.block_len];
        while block.contains(&mask) {
            let logits = predictor.block_logits(&block)?;
            passes += 1;
            if logits.rows() != block.len() || logits.cols() != vocab.size {
                return Err(contract(format!(
                    "predictor returned {:?} logits for a block of {}",
                    logits.shape(),
                    block.len()
                )));
            }
            let mut best: Option<(usize, usize, f64)> = None;
            let mut accepted = Vec::new();
            for (i, &x) in block.iter().enumerate() {
                if x != mask {
                    continue;
                }
                probs.copy_from_slice(logits.row(i));
                probs[mask] = f64::NEG_INFINITY;
                softmax_in_place(&mut probs);
                let (tok, conf) = argmax(&probs);
                if conf > cfg.threshold {
                    accepted.push((i, tok));
                }
                if best.map_or(true, |(_, _, c)| conf > c) {
                    best = Some((i, tok, conf));
                }
            }
            if accepted.is_empty() {
                let (i, tok, _) = best.expect("block has a masked position");
                accepted.push((i, tok));
            }
            for (i, tok) in accepted {
                block[i] = tok;
            }
        }
        if let Some(end) = block.iter().position(|&x| x == eos) {
            generated.extend_from_slice(&block[..end]);
            return Ok(DecodeOutput {
                tokens: generated,
                terminated: true,
                passes,
                blocks: b + 1,
            });
        }
        predictor.commit(&block)?;
        generated.extend_from_slice(&block);
    }
    Ok(DecodeOutput {
        tokens: generated,
        terminated: false,
        passes,
        blocks: cfg.max_blocks,
    })
}

fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in p.iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Decodes with the backbone, reusing and extending a prefix cache.
pub struct CachedDecoder<'m> {
    model: &'m MixtureModel,
    cache: KvCache,
    /// Positions pushed through the layers so far, cache extensions included.
    pub rows_computed: usize,
}

impl<'m> CachedDecoder<'m> {
    pub fn new(model: &'m MixtureModel, cache: KvCache) -> Self {
        Self {
            model,
            cache,
            rows_computed: 0,
        }
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }
}

impl BlockPredictor for CachedDecoder<'_> {
    fn block_logits(&mut self, block: &[usize]) -> Result<Tensor> {
        let layout = self.cache.active_layout(&[Segment::text_response(block.len())])?;
        self.rows_computed += block.len();
        self.model.forward_und(block, &layout, Some(&self.cache))
    }

    fn commit(&mut self, block: &[usize]) -> Result<()> {
        let lat = Tensor::zeros(&[0, self.model.config().d_lat]);
        self.rows_computed += block.len();
        self.cache = self
            .model
            .extend_cache(&self.cache, &[Segment::text_response(block.len())], block, &lat, &[])?;
        Ok(())
    }
}

/// Decodes with the backbone, recomputing the whole sequence every pass.
pub struct UncachedDecoder<'m> {
    model: &'m MixtureModel,
    layout: SegmentLayout,
    tokens: Vec<usize>,
    pub rows_computed: usize,
}

impl<'m> UncachedDecoder<'m> {
    /// `prefix` must be purely discrete and fully known.
    pub fn new(model: &'m MixtureModel, prefix: SegmentLayout, tokens: Vec<usize>) -> Result<Self> {
        if prefix.modality_of_position().iter().any(|m| !m.is_discrete()) {
            return Err(contract("uncached decoding needs a discrete prefix"));
        }
        if tokens.len() != prefix.total_len() {
            return Err(contract("prefix token count does not match its layout"));
        }
        Ok(Self {
            model,
            layout: prefix,
            tokens,
            rows_computed: 0,
        })
    }
}

impl BlockPredictor for UncachedDecoder<'_> {
    fn block_logits(&mut self, block: &[usize]) -> Result<Tensor> {
        let layout = self
            .layout
            .extended(&[Segment::text_response(block.len())])?
            .with_active_from(self.layout.segments().len())?;
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(block);
        self.rows_computed += tokens.len();
        let logits = self.model.forward_und(&tokens, &layout, None)?;
        let rows: Vec<usize> = (logits.rows() - block.len()..logits.rows()).collect();
        Ok(logits.select_rows(&rows))
    }

    fn commit(&mut self, block: &[usize]) -> Result<()> {
        self.layout = SegmentLayout::new(
            self.layout
                .extended(&[Segment::text_response(block.len())])?
                .segments()
                .to_vec(),
        )?;
        self.tokens.extend_from_slice(block);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: Vocab = Vocab { size: 12 };

    #[test]
    fn augment_identity_and_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r: Vec<usize> = (0..10).collect();
        for _ in 0..100 {
            assert_eq!(augment(&r, &AugmentConfig::OFF, V, &mut rng).unwrap(), r);
            let trunc_only = AugmentConfig { p_ext: 0.0, p_trunc: 1.0 };
            assert_eq!(augment(&r, &trunc_only, V, &mut rng).unwrap(), r);
        }
        let long: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let trunc_only = AugmentConfig { p_ext: 0.0, p_trunc: 1.0 };
        for _ in 0..100 {
            let out = augment(&long, &trunc_only, V, &mut rng).unwrap();
            assert!((1..20).contains(&out.len()));
            assert_eq!(out[..], long[..out.len()]);
        }
        assert!(augment(&[], &AugmentConfig::OFF, V, &mut rng).is_err());
        assert!(augment(&[V.mask()], &AugmentConfig::OFF, V, &mut rng).is_err());
        assert!(AugmentConfig { p_ext: 0.7, p_trunc: 0.4 }.validate().is_err());
    }

    /// Emits a fixed string followed by EOS forever, one logit row per
    /// absolute position.
    struct Script {
        text: Vec<usize>,
        done: usize,
        passes_seen: usize,
    }

    impl BlockPredictor for Script {
        fn block_logits(&mut self, block: &[usize]) -> Result<Tensor> {
            self.passes_seen += 1;
            let mut t = Tensor::zeros(&[block.len(), V.size]);
            for i in 0..block.len() {
                let tok = self.text.get(self.done + i).copied().unwrap_or(V.eos());
                t.row_mut(i)[tok] = 8.0 - 0.5 * i as f64;
            }
            Ok(t)
        }

        fn commit(&mut self, block: &[usize]) -> Result<()> {
            self.done += block.len();
            Ok(())
        }
    }

    #[test]
    fn fixed_string_is_recovered_for_every_block_length() {
        let text = vec![3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        for l in [2, 4, 8, 16] {
            for tau in [1e-9, 0.5, 0.9, 1.0] {
                let mut p = Script { text: text.clone(), done: 0, passes_seen: 0 };
                let cfg = DecodeConfig { block_len: l, threshold: tau, max_blocks: 20 };
                let out = decode(&mut p, &cfg, V).unwrap();
                assert_eq!(out.tokens, text, "L={l} tau={tau}");
                assert!(out.terminated);
                assert_eq!(out.blocks, text.len() / l + 1);
                if tau < 1e-6 {
                    assert_eq!(out.passes, out.blocks);
                }
                if tau == 1.0 {
                    assert_eq!(out.passes, out.blocks * l);
                }
            }
        }
    }

    struct AlwaysEos;
    impl BlockPredictor for AlwaysEos {
        fn block_logits(&mut self, block: &[usize]) -> Result<Tensor> {
            let mut t = Tensor::full(&[block.len(), V.size], -1e9);
            for i in 0..block.len() {
                t.row_mut(i)[V.eos()] = 0.0;
            }
            Ok(t)
        }
        fn commit(&mut self, _: &[usize]) -> Result<()> {
            panic!("no block should be committed")
        }
    }

    #[test]
    fn immediate_eos_gives_empty_output() {
        let cfg = DecodeConfig { block_len: 8, threshold: 0.9, max_blocks: 4 };
        let out = decode(&mut AlwaysEos, &cfg, V).unwrap();
        assert_eq!(out, DecodeOutput { tokens: vec![], terminated: true, passes: 1, blocks: 1 });
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let mut p = Script { text: vec![1; 100], done: 0, passes_seen: 0 };
        let cfg = DecodeConfig { block_len: 4, threshold: 0.5, max_blocks: 3 };
        let out = decode(&mut p, &cfg, V).unwrap();
        assert!(!out.terminated);
        assert_eq!(out.tokens, vec![1; 12]);
        assert!(DecodeConfig { block_len: 4, threshold: 0.0, max_blocks: 3 }.validate().is_err());
    }
}
