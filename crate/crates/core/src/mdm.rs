//! Masked discrete diffusion: forward corruption, reverse transitions and the
//! 1/t-weighted training loss.
//!
//! Time runs from `t = 0` (fully masked) to `t = 1` (clean data); a position
//! survives corruption at time `t` with probability `alpha(t)`.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{contract, Error, Result};
use crate::layout::{LossMode, SegmentLayout};
use crate::model::MixtureModel;
use crate::tensor::{masked_cross_entropy, softmax_in_place, Tensor};

/// Lower bound of the training time draw, bounding the 1/t weight.
pub const T_MIN: f64 = 1e-3;

/// Monotone map from time to the keep probability, with `alpha(0) = 0` and
/// `alpha(1) = 1`.
pub trait MaskSchedule {
    fn alpha(&self, t: f64) -> f64;
}

/// `alpha(t) = t`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinearSchedule;

impl MaskSchedule for LinearSchedule {
    fn alpha(&self, t: f64) -> f64 {
        t
    }
}

/// Draws `t ~ Uniform(T_MIN, 1]`.
pub fn sample_t(rng: &mut impl Rng) -> f64 {
    1.0 - rng.gen::<f64>() * (1.0 - T_MIN)
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(contract(format!("diffusion time {t} outside [0, 1]")))
    }
}

/// Replaces each selected position by `mask_id` independently with
/// probability `1 - alpha(t)`. Returns the corrupted ids.
pub fn forward_mask(
    x0: &[usize],
    t: f64,
    schedule: &impl MaskSchedule,
    mask_id: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    forward_mask_where(x0, None, t, schedule, mask_id, rng)
}

/// [`forward_mask`] restricted to positions where `eligible` is true.
pub fn forward_mask_where(
    x0: &[usize],
    eligible: Option<&[bool]>,
    t: f64,
    schedule: &impl MaskSchedule,
    mask_id: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    check_time(t)?;
    if let Some(e) = eligible {
        if e.len() != x0.len() {
            return Err(contract("eligibility mask length differs from sequence length"));
        }
    }
    if let Some(i) = x0.iter().position(|&x| x == mask_id) {
        return Err(contract(format!("clean sequence holds MASK at position {i}")));
    }
    let keep = schedule.alpha(t);
    Ok(x0
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let on = eligible.map_or(true, |e| e[i]);
            if on && rng.gen::<f64>() >= keep {
                mask_id
            } else {
                x
            }
        })
        .collect())
}

/// Probability that a MASK stays masked when moving from `t` to the less
/// corrupted time `s`.
pub fn stay_mask_prob(schedule: &impl MaskSchedule, t: f64, s: f64) -> Result<f64> {
    check_time(t)?;
    check_time(s)?;
    let (at, as_) = (schedule.alpha(t), schedule.alpha(s));
    if as_ <= at {
        return Err(contract(format!("reverse step needs alpha(s) > alpha(t), got {as_} <= {at}")));
    }
    Ok((1.0 - as_) / (1.0 - at))
}

/// One reverse transition from `t` to `s`. `logits` has one row per position;
/// columns are token ids, and a `mask_id` column, if present, is never
/// sampled. Unmasked positions are copied.
pub fn reverse_step(
    xt: &[usize],
    t: f64,
    s: f64,
    logits: &Tensor,
    schedule: &impl MaskSchedule,
    mask_id: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let stay = stay_mask_prob(schedule, t, s)?;
    if logits.shape().len() != 2 || logits.rows() != xt.len() {
        return Err(Error::Shape {
            op: "reverse_step",
            lhs: vec![xt.len()],
            rhs: logits.shape().to_vec(),
        });
    }
    let mut probs = vec![0.0; logits.cols()];
    let mut out = xt.to_vec();
    for (i, x) in out.iter_mut().enumerate() {
        if *x != mask_id || rng.gen::<f64>() < stay {
            continue;
        }
        let row = logits.row(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits at masked position {i}")));
        }
        probs.copy_from_slice(row);
        if mask_id < probs.len() {
            probs[mask_id] = f64::NEG_INFINITY;
        }
        softmax_in_place(&mut probs);
        *x = sample_categorical(&probs, rng);
    }
    Ok(out)
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Anything producing per-position logits for the discrete positions of a
/// layout.
pub trait TokenPredictor {
    fn predict(&self, layout: &SegmentLayout, tokens: &[usize]) -> Result<Tensor>;
}

impl TokenPredictor for MixtureModel {
    fn predict(&self, layout: &SegmentLayout, tokens: &[usize]) -> Result<Tensor> {
        self.forward_und(tokens, layout, None)
    }
}

/// One corruption draw for the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MdmDraw {
    pub t: f64,
    /// Corrupted ids of the discrete positions.
    pub tokens: Vec<usize>,
    /// Positions (among discrete ones) that were masked.
    pub masked: Vec<bool>,
}

impl MdmDraw {
    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Discrete positions that may be corrupted: RESPONSE text when the layout
/// has any, otherwise every discrete position.
pub fn corruptible_positions(layout: &SegmentLayout) -> Vec<bool> {
    let modality = layout.modality_of_position();
    let resp: Vec<bool> = layout
        .loss_positions(LossMode::Und)
        .into_iter()
        .zip(&modality)
        .filter(|(_, m)| m.is_discrete())
        .map(|(b, _)| b)
        .collect();
    if resp.iter().any(|&b| b) {
        resp
    } else {
        vec![true; resp.len()]
    }
}

/// Draws `t` and corrupts the eligible positions of `x0`.
pub fn mdm_draw(
    x0: &[usize],
    layout: &SegmentLayout,
    schedule: &impl MaskSchedule,
    mask_id: usize,
    rng: &mut impl Rng,
) -> Result<MdmDraw> {
    let t = sample_t(rng);
    mdm_draw_at(x0, layout, t, schedule, mask_id, rng)
}

pub fn mdm_draw_at(
    x0: &[usize],
    layout: &SegmentLayout,
    t: f64,
    schedule: &impl MaskSchedule,
    mask_id: usize,
    rng: &mut impl Rng,
) -> Result<MdmDraw> {
    let eligible = corruptible_positions(layout);
    let tokens = forward_mask_where(x0, Some(&eligible), t, schedule, mask_id, rng)?;
    let masked = tokens.iter().map(|&x| x == mask_id).collect();
    Ok(MdmDraw { t, tokens, masked })
}

/// Sum over masked positions of `(1/t)` times the cross-entropy of the clean
/// token, evaluated for a given draw.
pub fn mdm_loss_for_draw(
    x0: &[usize],
    draw: &MdmDraw,
    predictor: &impl TokenPredictor,
    layout: &SegmentLayout,
) -> Result<f64> {
    let n = draw.num_masked();
    if n == 0 {
        return Ok(0.0);
    }
    let logits = predictor.predict(layout, &draw.tokens)?;
    let weights = vec![1.0 / draw.t; x0.len()];
    Ok(masked_cross_entropy(&logits, x0, &draw.masked, &weights)? * n as f64)
}

/// Monte Carlo estimate of the masked-diffusion loss with a single draw of
/// `t ~ Uniform(T_MIN, 1]`.
pub fn mdm_loss(
    x0: &[usize],
    predictor: &impl TokenPredictor,
    layout: &SegmentLayout,
    schedule: &impl MaskSchedule,
    mask_id: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draw = mdm_draw(x0, layout, schedule, mask_id, rng)?;
    mdm_loss_for_draw(x0, &draw, predictor, layout)
}

/// Records the loss of `draw` on a tape for training. `logits` are the
/// model's outputs for `draw.tokens`.
pub fn mdm_loss_on_tape(tape: &mut Tape, logits: NodeId, x0: &[usize], draw: &MdmDraw) -> Result<NodeId> {
    let n = draw.num_masked();
    let weights = vec![1.0 / draw.t; x0.len()];
    let ce = tape.masked_cross_entropy(logits, x0, &draw.masked, &weights)?;
    Ok(tape.scale(ce, n as f64))
}
