//! Rectified flow for continuous latents: straight-line interpolation between
//! noise (`t = 0`) and data (`t = 1`), velocity matching and Euler sampling.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NodeId, Tape};
use crate::error::{contract, Error, Result};
use crate::layout::{Modality, Role, SegmentLayout};
use crate::model::{KvCache, MixtureModel, SequenceInputs};
use crate::tensor::{masked_mse, Tensor};

/// Default number of Euler steps for sampling.
pub const DEFAULT_STEPS: usize = 50;

/// `(1 - t) * noise + t * data`.
pub fn interpolate(noise: &Tensor, data: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(contract(format!("interpolation time {t} outside [0, 1]")));
    }
    if noise.shape() != data.shape() {
        return Err(Error::Shape {
            op: "interpolate",
            lhs: noise.shape().to_vec(),
            rhs: data.shape().to_vec(),
        });
    }
    noise.scale(1.0 - t).add(&data.scale(t))
}

/// Standard normal tensor.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .expect("shape matches data")
}

/// Strictly increasing time grid from 0 to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EulerPlan {
    grid: Vec<f64>,
}

impl EulerPlan {
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(contract("Euler plan needs at least one step"));
        }
        Self::new((0..=n_steps).map(|k| k as f64 / n_steps as f64).collect())
    }

    pub fn new(grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid[0] != 0.0 || *grid.last().unwrap() != 1.0 {
            return Err(contract("Euler grid must run from 0 to 1"));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract("Euler grid must be strictly increasing"));
        }
        Ok(Self { grid })
    }

    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
}

impl Default for EulerPlan {
    fn default() -> Self {
        Self::uniform(DEFAULT_STEPS).expect("positive step count")
    }
}

pub trait VelocityField {
    fn velocity(&mut self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: FnMut(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&mut self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

/// Euler integration of `dz/dt = v(z, t)` over `plan`, starting from `z0`.
pub fn integrate(field: &mut impl VelocityField, z0: Tensor, plan: &EulerPlan) -> Result<Tensor> {
    let mut z = z0;
    for (k, w) in plan.grid.windows(2).enumerate() {
        let v = field.velocity(&z, w[0])?;
        z.axpy(w[1] - w[0], &v)?;
        if !z.is_finite() {
            return Err(Error::Diverged { step: k });
        }
    }
    Ok(z)
}

/// Draws `z0 ~ N(0, I)` of the given shape and integrates it.
pub fn euler_sample(
    field: &mut impl VelocityField,
    shape: &[usize],
    plan: &EulerPlan,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    integrate(field, gaussian(shape, rng), plan)
}

/// Velocity of the backbone for the trailing latent segment of a layout,
/// conditioned on everything before it.
pub struct ConditionedField<'m> {
    model: &'m MixtureModel,
    layout: SegmentLayout,
    cache: Option<KvCache>,
    prefix_tokens: Vec<usize>,
    prefix_latents: Tensor,
    prefix_t: Vec<f64>,
    /// Forward passes run so far.
    pub passes: usize,
}

impl<'m> ConditionedField<'m> {
    /// `layout` must mark a single trailing VIS_LAT TARGET segment active.
    /// The prefix inputs are written to a cache once when `use_cache` is set.
    pub fn new(
        model: &'m MixtureModel,
        layout: &SegmentLayout,
        prefix_tokens: &[usize],
        prefix_latents: &Tensor,
        use_cache: bool,
    ) -> Result<Self> {
        let a = layout
            .active_from()
            .ok_or_else(|| contract("layout has no active segment"))?;
        let active = &layout.segments()[a..];
        if active.len() != 1 || active[0].modality != Modality::VisLat || active[0].role != Role::Target {
            return Err(contract("active block must be one VIS_LAT TARGET segment"));
        }
        let prefix = layout.prefix_layout()?;
        let prefix_t: Vec<f64> = crate::model::latent_times(&prefix, 0, 1.0);
        let cache = if use_cache {
            Some(model.write_cache(layout, prefix_tokens, prefix_latents, &prefix_t)?)
        } else {
            None
        };
        Ok(Self {
            model,
            layout: layout.clone(),
            cache,
            prefix_tokens: prefix_tokens.to_vec(),
            prefix_latents: prefix_latents.clone(),
            prefix_t,
            passes: 0,
        })
    }

    pub fn active_len(&self) -> usize {
        self.layout.segments().last().map_or(0, |s| s.length)
    }
}

impl VelocityField for ConditionedField<'_> {
    fn velocity(&mut self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.passes += 1;
        let n = z.rows();
        let out = match &self.cache {
            Some(cache) => {
                let inputs = SequenceInputs {
                    layout: &self.layout,
                    tokens: &[],
                    latents: z,
                    latent_t: &vec![t; n],
                };
                self.model.forward(&inputs, Some(cache))?.velocity
            }
            None => {
                let latents = Tensor::vstack(&[&self.prefix_latents, z])?;
                let mut lt = self.prefix_t.clone();
                lt.extend(std::iter::repeat(t).take(n));
                let inputs = SequenceInputs {
                    layout: &self.layout,
                    tokens: &self.prefix_tokens,
                    latents: &latents,
                    latent_t: &lt,
                };
                let v = self.model.forward(&inputs, None)?.velocity;
                let rows: Vec<usize> = (v.rows() - n..v.rows()).collect();
                v.select_rows(&rows)
            }
        };
        Ok(out)
    }
}

/// One noise draw for the velocity-matching loss.
#[derive(Clone, Debug, PartialEq)]
pub struct RfDraw {
    /// Noisy latent input for every latent row.
    pub xt: Tensor,
    /// Time of every latent row.
    pub t: Vec<f64>,
    /// Velocity target `data - noise` for every latent row.
    pub target: Tensor,
    /// Latent rows that bear loss.
    pub mask: Vec<bool>,
}

/// Noises the latent rows of `layout`. TARGET rows share one `t`; with
/// `per_turn`, every latent segment is noised with its own `t` and bears
/// loss. Otherwise CONDITION rows stay clean at `t = 1` without loss.
pub fn rf_draw(data: &Tensor, layout: &SegmentLayout, per_turn: bool, rng: &mut impl Rng) -> Result<RfDraw> {
    let n = data.rows();
    let noise = gaussian(data.shape(), rng);
    let shared_t: f64 = rng.gen();
    let mut t = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for s in layout.segments().iter().filter(|s| s.modality == Modality::VisLat) {
        let (ts, on) = if per_turn {
            (rng.gen(), true)
        } else if s.role == Role::Target {
            (shared_t, true)
        } else {
            (1.0, false)
        };
        t.extend(std::iter::repeat(ts).take(s.length));
        mask.extend(std::iter::repeat(on).take(s.length));
    }
    if t.len() != n {
        return Err(contract(format!("layout has {} latent positions but {n} rows were given", t.len())));
    }
    let mut xt = data.clone();
    let d = data.cols();
    for (r, &tr) in t.iter().enumerate() {
        let (x, e) = (xt.row_mut(r), noise.row(r));
        for j in 0..d {
            x[j] = (1.0 - tr) * e[j] + tr * x[j];
        }
    }
    let target = data.sub(&noise)?;
    Ok(RfDraw { xt, t, target, mask })
}

/// Velocity-matching loss for one draw, evaluated with the backbone.
pub fn rf_loss_for_draw(
    model: &MixtureModel,
    draw: &RfDraw,
    tokens: &[usize],
    layout: &SegmentLayout,
) -> Result<f64> {
    let inputs = SequenceInputs {
        layout,
        tokens,
        latents: &draw.xt,
        latent_t: &draw.t,
    };
    let v = model.forward(&inputs, None)?.velocity;
    masked_mse(&v, &draw.target, &draw.mask)
}

/// Monte Carlo estimate of the velocity-matching loss for a generation
/// layout with prompt `tokens` and clean `data` latents.
pub fn rf_loss(
    data: &Tensor,
    tokens: &[usize],
    model: &MixtureModel,
    layout: &SegmentLayout,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draw = rf_draw(data, layout, false, rng)?;
    rf_loss_for_draw(model, &draw, tokens, layout)
}

/// Records the loss of `draw` on a tape; `velocity` is the model output for
/// `draw.xt`.
pub fn rf_loss_on_tape(tape: &mut Tape, velocity: NodeId, draw: &RfDraw) -> Result<NodeId> {
    tape.masked_mse(velocity, &draw.target, &draw.mask)
}

/// Tab-separated rows `sample<TAB>row<TAB>v0<TAB>v1...` for plotting.
pub fn export_latents(samples: &[(String, Tensor)]) -> String {
    let mut out = String::new();
    for (label, t) in samples {
        for r in 0..t.rows() {
            let _ = write!(out, "{label}\t{r}");
            for v in t.row(r) {
                let _ = write!(out, "\t{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolation_examples() {
        let noise = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let data = Tensor::new(vec![1, 2], vec![2.0, 4.0]).unwrap();
        assert_eq!(interpolate(&noise, &data, 0.0).unwrap(), noise);
        assert_eq!(interpolate(&noise, &data, 1.0).unwrap(), data);
        assert_eq!(interpolate(&noise, &data, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(interpolate(&noise, &Tensor::zeros(&[2, 1]), 0.5).is_err());
        // Affine in t.
        let mid = interpolate(&noise, &data, 0.45).unwrap();
        let avg = interpolate(&noise, &data, 0.2)
            .unwrap()
            .add(&interpolate(&noise, &data, 0.7).unwrap())
            .unwrap()
            .scale(0.5);
        assert!(mid.max_abs_diff(&avg) < 1e-15);
    }

    #[test]
    fn plan_validation() {
        assert_eq!(EulerPlan::uniform(4).unwrap().grid(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(EulerPlan::uniform(0).is_err());
        assert!(EulerPlan::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(EulerPlan::new(vec![0.1, 1.0]).is_err());
        assert_eq!(EulerPlan::default().n_steps(), DEFAULT_STEPS);
    }

    #[test]
    fn constant_field_is_exact() {
        let c = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        for k in [1, 3, 50] {
            let z0 = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
            let mut f = |_: &Tensor, _: f64| Ok(c.clone());
            let z = integrate(&mut f, z0.clone(), &EulerPlan::uniform(k).unwrap()).unwrap();
            assert!(z.max_abs_diff(&z0.add(&c).unwrap()) < 1e-14);
        }
    }

    #[test]
    fn optimal_field_transports_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = gaussian(&[3, 2], &mut rng);
        let data = gaussian(&[3, 2], &mut rng);
        let v = data.sub(&z0).unwrap();
        let mut f = |_: &Tensor, _: f64| Ok(v.clone());
        let z = integrate(&mut f, z0, &EulerPlan::uniform(1).unwrap()).unwrap();
        assert!(z.max_abs_diff(&data) < 1e-14);
    }

    #[test]
    fn divergence_reports_step() {
        let mut f = |z: &Tensor, t: f64| Ok(if t >= 0.5 { z.map(|_| f64::INFINITY) } else { z.clone() });
        let err = integrate(&mut f, Tensor::zeros(&[1, 2]), &EulerPlan::uniform(4).unwrap());
        assert!(matches!(err, Err(Error::Diverged { step: 2 })));
    }

    #[test]
    fn export_format() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 3.0]).unwrap();
        assert_eq!(
            export_latents(&[("a".into(), t)]),
            "a\t0\t1.0\t-0.5\na\t1\t0.25\t3.0\n"
        );
    }
}
