use std::sync::Arc;

use super::{MixtureModel, SequenceInputs};
use crate::autodiff::ConstKv;
use crate::error::{contract, Error, Result};
use crate::layout::{Modality, Role, Segment, SegmentLayout};
use crate::tensor::Tensor;

/// Per-layer keys and values of an immutable prefix. Extending a cache
/// returns a new cache; the original is never modified.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<ConstKv>,
    prefix: SegmentLayout,
    fingerprint: u64,
}

impl KvCache {
    pub fn prefix_len(&self) -> usize {
        self.prefix.total_len()
    }

    pub fn prefix_layout(&self) -> &SegmentLayout {
        &self.prefix
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn layer(&self, l: usize) -> &ConstKv {
        &self.layers[l]
    }

    pub fn keys(&self, l: usize) -> &Tensor {
        &self.layers[l].keys
    }

    pub fn values(&self, l: usize) -> &Tensor {
        &self.layers[l].values
    }

    /// The prefix followed by `active`, with `active` marked as the block
    /// being denoised.
    pub fn active_layout(&self, active: &[Segment]) -> Result<SegmentLayout> {
        if active.is_empty() {
            return Err(contract("active block must contain at least one segment"));
        }
        self.prefix
            .extended(active)?
            .with_active_from(self.prefix.segments().len())
    }

    pub(crate) fn check_layout(&self, layout: &SegmentLayout) -> Result<()> {
        let prefix = layout.prefix_layout()?;
        if prefix.fingerprint() != self.fingerprint || prefix != self.prefix {
            return Err(Error::Cache(format!(
                "layout prefix fingerprint {:016x} does not match cache {:016x}",
                prefix.fingerprint(),
                self.fingerprint
            )));
        }
        Ok(())
    }

    /// Bitwise equality of all stored keys and values.
    pub fn same_contents(&self, other: &KvCache) -> bool {
        self.fingerprint == other.fingerprint
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.keys == b.keys && a.values == b.values)
    }
}

fn check_fixed(segments: &[Segment], tokens: &[usize], mask_id: usize) -> Result<()> {
    if let Some(i) = tokens.iter().position(|&t| t == mask_id) {
        return Err(contract(format!("MASK token at discrete position {i} cannot be cached")));
    }
    if segments
        .iter()
        .any(|s| s.modality == Modality::VisLat && s.role == Role::Target)
    {
        return Err(contract("an active latent block cannot be cached"));
    }
    Ok(())
}

impl MixtureModel {
    /// Computes keys/values of a fully known prefix. If `layout` carries an
    /// active designation, only the segments before it are cached.
    pub fn write_cache(
        &self,
        layout: &SegmentLayout,
        tokens: &[usize],
        latents: &Tensor,
        latent_t: &[f64],
    ) -> Result<KvCache> {
        let prefix = match layout.active_from() {
            Some(_) => layout.prefix_layout()?,
            None => layout.clone(),
        };
        check_fixed(prefix.segments(), tokens, self.config.vocab().mask())?;
        let d = self.config.d_model;
        let layers = if prefix.total_len() == 0 {
            (0..self.config.n_layers)
                .map(|_| ConstKv {
                    keys: Arc::new(Tensor::zeros(&[0, d])),
                    values: Arc::new(Tensor::zeros(&[0, d])),
                })
                .collect()
        } else {
            let inputs = SequenceInputs {
                layout: &prefix,
                tokens,
                latents,
                latent_t,
            };
            let mut tape = self.tape();
            let nodes = self.forward_on_tape(&mut tape, &inputs, None, true)?;
            nodes
                .kv
                .into_iter()
                .map(|(k, v)| ConstKv {
                    keys: Arc::new(k),
                    values: Arc::new(v),
                })
                .collect()
        };
        Ok(KvCache {
            layers,
            fingerprint: prefix.fingerprint(),
            prefix,
        })
    }

    /// Appends fully denoised segments to a cache.
    pub fn extend_cache(
        &self,
        cache: &KvCache,
        segments: &[Segment],
        tokens: &[usize],
        latents: &Tensor,
        latent_t: &[f64],
    ) -> Result<KvCache> {
        check_fixed(segments, tokens, self.config.vocab().mask())?;
        if segments.is_empty() {
            if !tokens.is_empty() || latents.rows() > 0 {
                return Err(contract("inputs given for an empty extension"));
            }
            return Ok(cache.clone());
        }
        let layout = cache.active_layout(segments)?;
        let inputs = SequenceInputs {
            layout: &layout,
            tokens,
            latents,
            latent_t,
        };
        let mut tape = self.tape();
        let nodes = self.forward_on_tape(&mut tape, &inputs, Some(cache), true)?;
        let mut layers = Vec::with_capacity(cache.layers.len());
        for (old, (k, v)) in cache.layers.iter().zip(nodes.kv) {
            layers.push(ConstKv {
                keys: Arc::new(Tensor::vstack(&[&old.keys, &k])?),
                values: Arc::new(Tensor::vstack(&[&old.values, &v])?),
            });
        }
        let prefix = cache.prefix.extended(segments)?;
        let prefix = SegmentLayout::new(prefix.segments().to_vec())?;
        Ok(KvCache {
            layers,
            fingerprint: prefix.fingerprint(),
            prefix,
        })
    }
}
