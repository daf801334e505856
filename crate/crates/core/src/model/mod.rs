//! Shared-attention backbone with an understanding expert (discrete tokens)
//! and a generation expert (continuous latents).
//!
//! Attention projections are shared by both experts; embedders, layer norms,
//! feed-forward blocks and output heads are routed per modality. Every
//! position is processed by exactly one expert according to its segment's
//! modality.

mod cache;
mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use cache::KvCache;
pub use checkpoint::Checkpoint;
pub use config::{parse_kv_lines, ModelConfig, PosEncoding};

use crate::autodiff::{ConstKv, NodeId, ParamId, ParamStore, Tape};
use crate::error::{contract, Error, Result};
use crate::layout::{Role, SegmentLayout};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expert {
    Und = 0,
    Gen = 1,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1: [Norm; 2],
    ln2: [Norm; 2],
    ffn: [Ffn; 2],
}

#[derive(Clone, Debug, PartialEq)]
struct ParamIndex {
    pos: Option<ParamId>,
    und_embed: ParamId,
    gen_in_w: ParamId,
    gen_in_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    layers: Vec<LayerIds>,
    ln_f: [Norm; 2],
    und_head_w: ParamId,
    und_head_b: ParamId,
    gen_head_w: ParamId,
    gen_head_b: ParamId,
}

/// Inputs for the positions a forward pass computes: every position when no
/// cache is used, otherwise the positions after the cached prefix.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInputs<'a> {
    pub layout: &'a SegmentLayout,
    /// Ids of the discrete positions, in position order.
    pub tokens: &'a [usize],
    /// `[latent rows, d_lat]` values of the latent positions, in order.
    pub latents: &'a Tensor,
    /// Diffusion time of each latent row.
    pub latent_t: &'a [f64],
}

/// Tape handles produced by one forward pass.
pub struct ForwardNodes {
    /// `[discrete rows, vocab]`, absent when there are no discrete rows.
    pub logits: Option<NodeId>,
    /// `[latent rows, d_lat]`, absent when there are no latent rows.
    pub velocity: Option<NodeId>,
    /// Post-rotary keys and values per layer, when requested.
    pub kv: Vec<(Tensor, Tensor)>,
    /// First position computed.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub velocity: Tensor,
    /// Number of positions pushed through the layers.
    pub rows_computed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIndex,
}

/// Sinusoidal features of a diffusion time `t` in `[0, 1]`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        let (s, c) = (1000.0 * t * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
    out
}

impl MixtureModel {
    /// Fresh model with Gaussian weights (`init_std`), zero biases and unit
    /// layer-norm gains, drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| contract(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut weight = |p: &mut ParamStore, name: String, shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            p.insert(name, Tensor::new(shape.to_vec(), data).unwrap())
        };
        let zeros = |p: &mut ParamStore, name: String, shape: &[usize]| p.insert(name, Tensor::zeros(shape));
        let ones = |p: &mut ParamStore, name: String, n: usize| p.insert(name, Tensor::full(&[n], 1.0));

        let (d, f, v, dl, tf) = (
            config.d_model,
            config.d_ff,
            config.vocab_size,
            config.d_lat,
            config.time_features,
        );
        let pos = match config.pos_encoding {
            PosEncoding::Learned => Some(weight(&mut params, "shared.pos".into(), &[config.max_seq_len, d])),
            PosEncoding::Rotary => None,
        };
        let und_embed = weight(&mut params, "und.embed".into(), &[v, d]);
        let gen_in_w = weight(&mut params, "gen.in.w".into(), &[dl, d]);
        let gen_in_b = zeros(&mut params, "gen.in.b".into(), &[d]);
        let time_w1 = weight(&mut params, "gen.time.w1".into(), &[tf, d]);
        let time_b1 = zeros(&mut params, "gen.time.b1".into(), &[d]);
        let time_w2 = weight(&mut params, "gen.time.w2".into(), &[d, d]);
        let time_b2 = zeros(&mut params, "gen.time.b2".into(), &[d]);

        let norm_pair = |p: &mut ParamStore, prefix: &str, what: &str| -> [Norm; 2] {
            if config.shared_norms {
                let n = Norm {
                    gain: ones(p, format!("shared.{prefix}.{what}.g"), d),
                    bias: zeros(p, format!("shared.{prefix}.{what}.b"), &[d]),
                };
                [n, n]
            } else {
                ["und", "gen"].map(|e| Norm {
                    gain: ones(p, format!("{e}.{prefix}.{what}.g"), d),
                    bias: zeros(p, format!("{e}.{prefix}.{what}.b"), &[d]),
                })
            }
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("layer{l}");
            let wq = weight(&mut params, format!("shared.{pre}.wq"), &[d, d]);
            let wk = weight(&mut params, format!("shared.{pre}.wk"), &[d, d]);
            let wv = weight(&mut params, format!("shared.{pre}.wv"), &[d, d]);
            let wo = weight(&mut params, format!("shared.{pre}.wo"), &[d, d]);
            let ln1 = norm_pair(&mut params, &pre, "ln1");
            let ln2 = norm_pair(&mut params, &pre, "ln2");
            let ffn = ["und", "gen"].map(|e| Ffn {
                w1: weight(&mut params, format!("{e}.{pre}.ffn.w1"), &[d, f]),
                b1: zeros(&mut params, format!("{e}.{pre}.ffn.b1"), &[f]),
                w2: weight(&mut params, format!("{e}.{pre}.ffn.w2"), &[f, d]),
                b2: zeros(&mut params, format!("{e}.{pre}.ffn.b2"), &[d]),
            });
            layers.push(LayerIds {
                wq,
                wk,
                wv,
                wo,
                ln1,
                ln2,
                ffn,
            });
        }
        let ln_f = norm_pair(&mut params, "final", "ln");
        let und_head_w = weight(&mut params, "und.head.w".into(), &[d, v]);
        let und_head_b = zeros(&mut params, "und.head.b".into(), &[v]);
        let gen_head_w = weight(&mut params, "gen.head.w".into(), &[d, dl]);
        let gen_head_b = zeros(&mut params, "gen.head.b".into(), &[dl]);

        Ok(Self {
            config,
            params,
            ids: ParamIndex {
                pos,
                und_embed,
                gen_in_w,
                gen_in_b,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                layers,
                ln_f,
                und_head_w,
                und_head_b,
                gen_head_w,
                gen_head_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameters with same-named tensors from `store`.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            let t = store.get(src);
            if t.shape() != self.params.get(id).shape() {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: self.params.get(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Parameters used only by one expert, as opposed to the shared
    /// attention stack and positional table.
    pub fn expert_of(&self, id: ParamId) -> Option<Expert> {
        let name = self.params.name(id);
        if name.starts_with("und.") {
            Some(Expert::Und)
        } else if name.starts_with("gen.") {
            Some(Expert::Gen)
        } else {
            None
        }
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.params)
    }

    fn check_inputs(&self, inputs: &SequenceInputs, start: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let layout = inputs.layout;
        let vocab = self.config.vocab_size;
        for (_, s, e) in layout.sample_ranges() {
            if e - s > self.config.max_seq_len {
                return Err(contract(format!(
                    "sample of {} positions exceeds max_seq_len {}",
                    e - s,
                    self.config.max_seq_len
                )));
            }
        }
        let modality = layout.modality_of_position();
        let mut und_rows = Vec::new();
        let mut gen_rows = Vec::new();
        for (r, m) in modality[start..].iter().enumerate() {
            if m.is_discrete() {
                und_rows.push(r);
            } else {
                gen_rows.push(r);
            }
        }
        if und_rows.len() != inputs.tokens.len() {
            return Err(contract(format!(
                "layout has {} discrete positions to compute but {} tokens were given",
                und_rows.len(),
                inputs.tokens.len()
            )));
        }
        if let Some(&bad) = inputs.tokens.iter().find(|&&t| t >= vocab) {
            return Err(contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let lat = inputs.latents;
        if gen_rows.len() != lat.rows()
            || (lat.rows() > 0 && lat.cols() != self.config.d_lat)
            || inputs.latent_t.len() != lat.rows()
        {
            return Err(Error::Shape {
                op: "forward latents",
                lhs: vec![gen_rows.len(), self.config.d_lat],
                rhs: lat.shape().to_vec(),
            });
        }
        if let Some(t) = inputs.latent_t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(contract(format!("diffusion time {t} outside [0, 1]")));
        }
        if !lat.is_finite() {
            return Err(Error::Numeric("non-finite latent input".into()));
        }
        Ok((und_rows, gen_rows))
    }

    /// Records one forward pass on `tape`. With a cache, only positions after
    /// the cached prefix are computed and they attend the cached keys/values.
    pub fn forward_on_tape<'p>(
        &self,
        tape: &mut Tape<'p>,
        inputs: &SequenceInputs,
        cache: Option<&KvCache>,
        capture_kv: bool,
    ) -> Result<ForwardNodes> {
        let layout = inputs.layout;
        let start = match cache {
            Some(c) => {
                c.check_layout(layout)?;
                c.prefix_len()
            }
            None => 0,
        };
        let (und_rows, gen_rows) = self.check_inputs(inputs, start)?;
        let n = layout.total_len() - start;
        let mut out = ForwardNodes {
            logits: None,
            velocity: None,
            kv: Vec::new(),
            start,
        };
        if n == 0 {
            return Ok(out);
        }
        let cfg = &self.config;
        let ids = &self.ids;
        let positions: Vec<usize> = layout.positions()[start..].to_vec();
        let spans: Vec<(usize, usize)> = layout.key_spans()[start..].to_vec();

        // Input embeddings per expert.
        let h_und = if und_rows.is_empty() {
            None
        } else {
            let table = tape.param(ids.und_embed);
            Some(tape.embedding(table, inputs.tokens)?)
        };
        let h_gen = if gen_rows.is_empty() {
            None
        } else {
            let x = tape.constant(inputs.latents.clone());
            let w = tape.param(ids.gen_in_w);
            let b = tape.param(ids.gen_in_b);
            let e = tape.matmul(x, w)?;
            let e = tape.add_row(e, b)?;
            let feats: Vec<f64> = inputs
                .latent_t
                .iter()
                .flat_map(|&t| time_features(t, cfg.time_features))
                .collect();
            let feats = tape.constant(Tensor::new(vec![gen_rows.len(), cfg.time_features], feats)?);
            let [w1, b1, w2, b2] = [ids.time_w1, ids.time_b1, ids.time_w2, ids.time_b2].map(|p| tape.param(p));
            let te = tape.matmul(feats, w1)?;
            let te = tape.add_row(te, b1)?;
            let te = tape.silu(te);
            let te = tape.matmul(te, w2)?;
            let te = tape.add_row(te, b2)?;
            Some(tape.add(e, te)?)
        };
        let mut h = match (h_und, h_gen) {
            (Some(u), None) => u,
            (None, Some(g)) => g,
            (Some(u), Some(g)) => tape.merge_rows(n, vec![(u, und_rows.clone()), (g, gen_rows.clone())])?,
            (None, None) => unreachable!("n > 0"),
        };
        if let Some(pos) = ids.pos {
            if let Some(&bad) = positions.iter().find(|&&p| p >= cfg.max_seq_len) {
                return Err(contract(format!("position {bad} exceeds max_seq_len {}", cfg.max_seq_len)));
            }
            let table = tape.param(pos);
            let pe = tape.embedding(table, &positions)?;
            h = tape.add(h, pe)?;
        }

        let routing = Routing {
            n,
            und: &und_rows,
            gen: &gen_rows,
        };
        for (l, layer) in ids.layers.iter().enumerate() {
            let x = routing.apply(tape, h, |t, x, e| {
                let (g, b) = (t.param(layer.ln1[e as usize].gain), t.param(layer.ln1[e as usize].bias));
                t.layer_norm(x, g, b, LN_EPS)
            })?;
            let [wq, wk, wv, wo] = [layer.wq, layer.wk, layer.wv, layer.wo].map(|p| tape.param(p));
            let mut q = tape.matmul(x, wq)?;
            let mut k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            if cfg.pos_encoding == PosEncoding::Rotary {
                q = tape.rotary(q, &positions, cfg.d_head(), cfg.rope_base)?;
                k = tape.rotary(k, &positions, cfg.d_head(), cfg.rope_base)?;
            }
            if capture_kv {
                out.kv.push((tape.value(k).clone(), tape.value(v).clone()));
            }
            let prefix: Option<ConstKv> = cache.map(|c| c.layer(l).clone());
            let a = tape.attention(q, k, v, prefix, spans.clone(), cfg.n_heads)?;
            let a = tape.matmul(a, wo)?;
            h = tape.add(h, a)?;

            let x = routing.apply(tape, h, |t, x, e| {
                let (g, b) = (t.param(layer.ln2[e as usize].gain), t.param(layer.ln2[e as usize].bias));
                t.layer_norm(x, g, b, LN_EPS)
            })?;
            let f = routing.apply(tape, x, |t, x, e| {
                let ffn = layer.ffn[e as usize];
                let [w1, b1, w2, b2] = [ffn.w1, ffn.b1, ffn.w2, ffn.b2].map(|p| t.param(p));
                let y = t.matmul(x, w1)?;
                let y = t.add_row(y, b1)?;
                let y = t.silu(y);
                let y = t.matmul(y, w2)?;
                t.add_row(y, b2)
            })?;
            h = tape.add(h, f)?;
        }

        let head = |tape: &mut Tape<'p>, rows: &[usize], e: Expert, w: ParamId, b: ParamId| -> Result<NodeId> {
            let x = if rows.len() == n { h } else { tape.gather_rows(h, rows)? };
            let norm = ids.ln_f[e as usize];
            let (g, nb) = (tape.param(norm.gain), tape.param(norm.bias));
            let x = tape.layer_norm(x, g, nb, LN_EPS)?;
            let (w, b) = (tape.param(w), tape.param(b));
            let y = tape.matmul(x, w)?;
            tape.add_row(y, b)
        };
        if !und_rows.is_empty() {
            out.logits = Some(head(tape, &und_rows, Expert::Und, ids.und_head_w, ids.und_head_b)?);
        }
        if !gen_rows.is_empty() {
            out.velocity = Some(head(tape, &gen_rows, Expert::Gen, ids.gen_head_w, ids.gen_head_b)?);
        }
        Ok(out)
    }

    /// Forward pass returning plain tensors.
    pub fn forward(&self, inputs: &SequenceInputs, cache: Option<&KvCache>) -> Result<ModelOutput> {
        let mut tape = self.tape();
        let nodes = self.forward_on_tape(&mut tape, inputs, cache, false)?;
        let rows_computed = inputs.layout.total_len() - nodes.start;
        let logits = nodes
            .logits
            .map_or_else(|| Tensor::zeros(&[0, self.config.vocab_size]), |n| tape.value(n).clone());
        let velocity = nodes
            .velocity
            .map_or_else(|| Tensor::zeros(&[0, self.config.d_lat]), |n| tape.value(n).clone());
        Ok(ModelOutput {
            logits,
            velocity,
            rows_computed,
        })
    }

    /// Logits node of an uncached pass over a purely discrete layout.
    pub fn forward_und_on_tape(&self, tape: &mut Tape<'_>, tokens: &[usize], layout: &SegmentLayout) -> Result<NodeId> {
        let latents = Tensor::zeros(&[0, self.config.d_lat]);
        let inputs = SequenceInputs {
            layout,
            tokens,
            latents: &latents,
            latent_t: &[],
        };
        self.forward_on_tape(tape, &inputs, None, false)?
            .logits
            .ok_or_else(|| contract("layout has no discrete positions"))
    }

    /// Categorical logits for every computed discrete position.
    pub fn forward_und(&self, tokens: &[usize], layout: &SegmentLayout, cache: Option<&KvCache>) -> Result<Tensor> {
        let latents = Tensor::zeros(&[0, self.config.d_lat]);
        let inputs = SequenceInputs {
            layout,
            tokens,
            latents: &latents,
            latent_t: &[],
        };
        Ok(self.forward(&inputs, cache)?.logits)
    }

    /// Velocity prediction for every computed latent position. Latent rows in
    /// CONDITION segments are treated as clean (time 1); target rows use `t`.
    pub fn forward_gen(
        &self,
        latents: &Tensor,
        t: f64,
        prompt_tokens: &[usize],
        layout: &SegmentLayout,
        cache: Option<&KvCache>,
    ) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(contract(format!("diffusion time {t} outside [0, 1]")));
        }
        let start = cache.map_or(0, KvCache::prefix_len);
        let latent_t = latent_times(layout, start, t);
        let inputs = SequenceInputs {
            layout,
            tokens: prompt_tokens,
            latents,
            latent_t: &latent_t,
        };
        Ok(self.forward(&inputs, cache)?.velocity)
    }
}

/// Per-row diffusion time for latent positions at or after `start`.
pub fn latent_times(layout: &SegmentLayout, start: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut pos = 0;
    for s in layout.segments() {
        for _ in 0..s.length {
            if pos >= start && !s.modality.is_discrete() {
                out.push(if s.role == Role::Condition { 1.0 } else { t });
            }
            pos += 1;
        }
    }
    out
}

struct Routing<'a> {
    n: usize,
    und: &'a [usize],
    gen: &'a [usize],
}

impl Routing<'_> {
    /// Applies `f` per expert to that expert's rows and reassembles them.
    fn apply<'p>(
        &self,
        tape: &mut Tape<'p>,
        x: NodeId,
        mut f: impl FnMut(&mut Tape<'p>, NodeId, Expert) -> Result<NodeId>,
    ) -> Result<NodeId> {
        if self.gen.is_empty() {
            return f(tape, x, Expert::Und);
        }
        if self.und.is_empty() {
            return f(tape, x, Expert::Gen);
        }
        let xu = tape.gather_rows(x, self.und)?;
        let xg = tape.gather_rows(x, self.gen)?;
        let yu = f(tape, xu, Expert::Und)?;
        let yg = f(tape, xg, Expert::Gen)?;
        tape.merge_rows(self.n, vec![(yu, self.und.to_vec()), (yg, self.gen.to_vec())])
    }
}
