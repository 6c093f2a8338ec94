//! Rectified-flow math: the straight noise-to-data path, its constant
//! velocity, the regression loss, the partially-noised start point used for
//! editing, and the Euler sampler with classifier-free guidance.
//!
//! Time runs from noise at `t = 0` to data at `t = 1`:
//!
//! ```text
//! x_t = (1 - (1 - sigma_min) t) eps + t x0
//! v   = x0 - (1 - sigma_min) eps
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, InstructionEmbedding};
use crate::rng::sampler_noise;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const DEFAULT_T_START: f64 = 0.01;
pub const DEFAULT_NUM_STEPS: usize = 200;
pub const DEFAULT_GUIDANCE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub sigma_min: f64,
    pub t_start: f64,
    pub num_steps: usize,
    pub guidance_weight: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            t_start: DEFAULT_T_START,
            num_steps: DEFAULT_NUM_STEPS,
            guidance_weight: DEFAULT_GUIDANCE,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.1).contains(&self.sigma_min) {
            return Err(Error::Config(format!(
                "sigma_min {} outside [0, 0.1]",
                self.sigma_min
            )));
        }
        if !(0.0..1.0).contains(&self.t_start) {
            return Err(Error::Config(format!(
                "t_start {} outside [0, 1)",
                self.t_start
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            return Err(Error::Config(format!(
                "guidance_weight {} must be >= 0",
                self.guidance_weight
            )));
        }
        Ok(())
    }

    /// Uniform step on `[t_start, 1]`.
    pub fn step_size(&self) -> f64 {
        (1.0 - self.t_start) / self.num_steps as f64
    }
}

/// Source latent (what the user supplies) and target latent (the edit).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub source: Tensor,
    pub target: Tensor,
}

impl LatentPair {
    pub fn new(source: Tensor, target: Tensor) -> Result<Self> {
        if source.shape() != target.shape() {
            return Err(Error::shape("LatentPair", source.shape(), target.shape()));
        }
        Ok(Self { source, target })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn path_point(
    op: &'static str,
    data: &Tensor,
    eps: &Tensor,
    t: f64,
    sigma_min: f64,
) -> Result<Tensor> {
    same_shape(op, data, eps)?;
    let noise_w = 1.0 - (1.0 - sigma_min) * t;
    eps.zip_map(data, op, |e, x| noise_w * e + t * x)
}

/// Point on the straight path at time `t`.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64, sigma_min: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            what: "t",
            detail: format!("{t} not in [0, 1]"),
        });
    }
    path_point("interpolate", x0, eps, t, sigma_min)
}

/// d/dt of [`interpolate`]; the same at every t.
pub fn target_velocity(x0: &Tensor, eps: &Tensor, sigma_min: f64) -> Result<Tensor> {
    same_shape("target_velocity", x0, eps)?;
    let k = 1.0 - sigma_min;
    x0.zip_map(eps, "target_velocity", |x, e| x - k * e)
}

/// Mean squared error between prediction and target, recorded on the tape.
pub fn fm_loss(tape: &mut Tape, predicted: Var, target: Var) -> Result<Var> {
    if tape.shape(predicted) != tape.shape(target) {
        return Err(Error::shape(
            "fm_loss",
            tape.shape(predicted),
            tape.shape(target),
        ));
    }
    let d = tape.sub(predicted, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Editing start: the path point at `t_start`, with the source latent in place of data.
pub fn start_point(
    x_source: &Tensor,
    eps: &Tensor,
    t_start: f64,
    sigma_min: f64,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&t_start) {
        return Err(Error::OutOfRange {
            what: "t_start",
            detail: format!("{t_start} not in [0, 1)"),
        });
    }
    path_point("start_point", x_source, eps, t_start, sigma_min)
}

pub fn euler_step(x: &Tensor, velocity: &Tensor, dt: f64) -> Result<Tensor> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::OutOfRange {
            what: "dt",
            detail: format!("{dt} must be positive"),
        });
    }
    x.zip_map(velocity, "euler_step", |a, v| a + dt * v)
}

/// Classifier-free guidance: `v_uncond + w (v_cond - v_uncond)`; `w = 1` returns `v_cond` bit for bit.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        same_shape("cfg_velocity", v_cond, v_uncond)?;
        return Ok(v_cond.clone());
    }
    v_cond.zip_map(v_uncond, "cfg_velocity", |c, u| u + w * (c - u))
}

/// Anything that can play the role of the conditional velocity network.
pub trait VelocityField {
    fn velocity(
        &self,
        x_t: &Tensor,
        source: &Tensor,
        t: f64,
        instruction: &InstructionEmbedding,
        record_attention: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)>;

    /// Embedding used for the unconditional branch of guidance.
    fn null_instruction(&self) -> Result<InstructionEmbedding>;
}

/// Output of [`sample_with_attention`].
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub output: Tensor,
    /// Conditional-branch attention, one entry per layer per step.
    pub attention: Vec<AttentionRecord>,
}

/// Integrates the learned field from `start_point(source, eps, t_start)` to
/// `t = 1`. `eps` comes from [`sampler_noise`] with `seed`.
pub fn sample<M: VelocityField + ?Sized>(
    model: &M,
    source: &Tensor,
    instruction: &InstructionEmbedding,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    run_sampler(model, source, instruction, cfg, seed, false).map(|t| t.output)
}

pub fn sample_with_attention<M: VelocityField + ?Sized>(
    model: &M,
    source: &Tensor,
    instruction: &InstructionEmbedding,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleTrace> {
    run_sampler(model, source, instruction, cfg, seed, true)
}

fn run_sampler<M: VelocityField + ?Sized>(
    model: &M,
    source: &Tensor,
    instruction: &InstructionEmbedding,
    cfg: &SamplerConfig,
    seed: u64,
    record: bool,
) -> Result<SampleTrace> {
    cfg.validate()?;
    let eps = sampler_noise(source.shape(), seed);
    let mut x = start_point(source, &eps, cfg.t_start, cfg.sigma_min)?;
    let guided = cfg.guidance_weight != 1.0;
    let null = if guided {
        Some(model.null_instruction()?)
    } else {
        None
    };
    let dt = cfg.step_size();
    let mut attention = Vec::new();
    for step in 0..cfg.num_steps {
        let t = cfg.t_start + step as f64 * dt;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::SamplerDiverged { step },
            other => other,
        };
        let (v_cond, records) = model
            .velocity(&x, source, t, instruction, record)
            .map_err(diverged)?;
        attention.extend(records);
        let v = match &null {
            Some(null) => {
                let (v_uncond, _) = model
                    .velocity(&x, source, t, null, false)
                    .map_err(diverged)?;
                cfg_velocity(&v_cond, &v_uncond, cfg.guidance_weight).map_err(diverged)?
            }
            None => v_cond,
        };
        x = euler_step(&x, &v, dt).map_err(diverged)?;
    }
    Ok(SampleTrace {
        output: x,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InstructionEmbedding;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    fn dummy_instruction() -> InstructionEmbedding {
        InstructionEmbedding::new(vec![0], Tensor::zeros(&[1, 2])).unwrap()
    }

    #[test]
    fn interpolate_cases() {
        let x0 = Tensor::from_vec(vec![2.0, -1.0]).unwrap();
        let eps = Tensor::from_vec(vec![4.0, 0.5]).unwrap();
        assert_eq!(interpolate(&x0, &eps, 0.0, 0.3).unwrap(), eps);
        assert_eq!(interpolate(&x0, &eps, 1.0, 0.0).unwrap(), x0);
        assert_eq!(
            interpolate(&scalar(2.0), &scalar(4.0), 0.5, 0.0)
                .unwrap()
                .item(),
            3.0
        );
        assert!(interpolate(&x0, &eps, 1.5, 0.0).is_err());
        assert!(interpolate(&x0, &scalar(1.0), 0.5, 0.0).is_err());
    }

    #[test]
    fn target_velocity_cases() {
        let x0 = Tensor::from_vec(vec![2.0, -1.0]).unwrap();
        let eps = Tensor::from_vec(vec![4.0, 0.5]).unwrap();
        assert_eq!(
            target_velocity(&x0, &eps, 0.0).unwrap().data(),
            &[-2.0, -1.5]
        );
        assert_eq!(target_velocity(&x0, &x0, 0.0).unwrap().data(), &[0.0, 0.0]);
        let v = target_velocity(&scalar(1.0), &scalar(1.0), 0.1)
            .unwrap()
            .item();
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn target_velocity_is_time_derivative() {
        let x0 = Tensor::from_vec(vec![0.7, -0.2, 1.3]).unwrap();
        let eps = Tensor::from_vec(vec![-1.1, 0.4, 0.05]).unwrap();
        let h = 1e-4;
        for &sigma in &[0.0, 1e-4, 0.05] {
            let v = target_velocity(&x0, &eps, sigma).unwrap();
            for &t in &[0.2, 0.5, 0.8] {
                let plus = interpolate(&x0, &eps, t + h, sigma).unwrap();
                let minus = interpolate(&x0, &eps, t - h, sigma).unwrap();
                for i in 0..3 {
                    let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
                    assert!((fd - v.data()[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fm_loss_cases() {
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]).unwrap());
        let l0 = fm_loss(&mut tape, target, target).unwrap();
        assert_eq!(tape.value(l0)[0], 0.0);
        let shifted = tape.add_scalar(target, 1.0).unwrap();
        let l1 = fm_loss(&mut tape, shifted, target).unwrap();
        assert!((tape.value(l1)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let pred = Tensor::from_vec(vec![0.3, -0.8, 1.4, 0.1]).unwrap();
        let target = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(pred.clone());
        let t = tape.constant(target.clone());
        let l = fm_loss(&mut tape, p, t).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap().to_vec();
        let loss = |p: &Tensor| {
            p.data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 4.0
        };
        let h = 1e-5;
        for i in 0..4 {
            let mut plus = pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
            // closed form 2 (p - t) / N
            assert!((g[i] - 2.0 * (pred.data()[i] - target.data()[i]) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn start_point_cases() {
        let xs = Tensor::from_vec(vec![0.25, 1.0]).unwrap();
        let eps = Tensor::from_vec(vec![-0.5, 2.0]).unwrap();
        assert_eq!(start_point(&xs, &eps, 0.0, 1e-4).unwrap(), eps);
        assert!(start_point(&xs, &eps, 1.0, 0.0).is_err());
        let near = start_point(&xs, &eps, 1.0 - 1e-12, 0.0).unwrap();
        assert!(near.max_abs_diff(&xs).unwrap() < 1e-11);
        assert_eq!(SamplerConfig::default().t_start, 0.01);
    }

    #[test]
    fn euler_cases() {
        let x = Tensor::from_vec(vec![1.0]).unwrap();
        let v0 = Tensor::zeros(&[1]);
        assert_eq!(euler_step(&x, &v0, 0.3).unwrap(), x);
        let v = Tensor::from_vec(vec![2.0]).unwrap();
        assert!((euler_step(&x, &v, 0.1).unwrap().item() - 1.2).abs() < 1e-15);
        let two = euler_step(&euler_step(&x, &v, 0.5).unwrap(), &v, 0.5).unwrap();
        assert_eq!(two, euler_step(&x, &v, 1.0).unwrap());
        assert!(euler_step(&x, &v, 0.0).is_err());
        assert!(euler_step(&x, &v, -0.1).is_err());
    }

    #[test]
    fn cfg_cases() {
        let c = Tensor::from_vec(vec![2.0, 0.5]).unwrap();
        let u = Tensor::from_vec(vec![1.0, -0.5]).unwrap();
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 3.0).unwrap().data()[0], 4.0);
    }

    #[test]
    fn sampler_config_validation() {
        let ok = SamplerConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SamplerConfig { t_start: 1.0, ..ok }.validate().is_err());
        assert!(SamplerConfig { num_steps: 0, ..ok }.validate().is_err());
        assert!(SamplerConfig {
            sigma_min: 0.2,
            ..ok
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            guidance_weight: -1.0,
            ..ok
        }
        .validate()
        .is_err());
    }

    /// Returns `x0 - eps` everywhere; Euler integrates it exactly.
    struct ConstantField {
        field: Tensor,
    }

    impl VelocityField for ConstantField {
        fn velocity(
            &self,
            _: &Tensor,
            _: &Tensor,
            _: f64,
            _: &InstructionEmbedding,
            _: bool,
        ) -> Result<(Tensor, Vec<AttentionRecord>)> {
            Ok((self.field.clone(), Vec::new()))
        }
        fn null_instruction(&self) -> Result<InstructionEmbedding> {
            Ok(dummy_instruction())
        }
    }

    #[test]
    fn sampler_exact_on_constant_field() {
        let x0 = Tensor::new(
            vec![4, 3],
            (0..12).map(|i| (i as f64 * 0.61).cos()).collect(),
        )
        .unwrap();
        let seed = 42;
        let eps = sampler_noise(x0.shape(), seed);
        let field = ConstantField {
            field: target_velocity(&x0, &eps, 0.0).unwrap(),
        };
        for &steps in &[1, 2, 7, 10, 200] {
            for &w in &[1.0, 3.0] {
                let cfg = SamplerConfig {
                    sigma_min: 0.0,
                    t_start: 0.0,
                    num_steps: steps,
                    guidance_weight: w,
                };
                let out = sample(
                    &field,
                    &Tensor::zeros(&[4, 3]),
                    &dummy_instruction(),
                    &cfg,
                    seed,
                )
                .unwrap();
                assert!(out.max_abs_diff(&x0).unwrap() < 1e-9, "steps {steps}");
            }
        }
    }

    /// `v = -x`: exact flow is `x(1) = x(t0) e^{-(1 - t0)}`, Euler is first order.
    struct DecayField;

    impl VelocityField for DecayField {
        fn velocity(
            &self,
            x: &Tensor,
            _: &Tensor,
            _: f64,
            _: &InstructionEmbedding,
            _: bool,
        ) -> Result<(Tensor, Vec<AttentionRecord>)> {
            Ok((x.map(|v| -v)?, Vec::new()))
        }
        fn null_instruction(&self) -> Result<InstructionEmbedding> {
            Ok(dummy_instruction())
        }
    }

    #[test]
    fn euler_converges_first_order() {
        let src = Tensor::zeros(&[3]);
        let run = |n| {
            let cfg = SamplerConfig {
                sigma_min: 0.0,
                t_start: 0.0,
                num_steps: n,
                guidance_weight: 1.0,
            };
            sample(&DecayField, &src, &dummy_instruction(), &cfg, 3).unwrap()
        };
        let (a, b, c) = (run(10), run(20), run(40));
        let d1 = a.l2_distance(&b).unwrap();
        let d2 = b.l2_distance(&c).unwrap();
        let ratio = d2 / d1;
        assert!(ratio > 0.4 && ratio < 0.6, "ratio {ratio}");
        let eps = sampler_noise(&[3], 3);
        let exact = eps.map(|v| v * (-1.0f64).exp()).unwrap();
        assert!(c.max_abs_diff(&exact).unwrap() < a.max_abs_diff(&exact).unwrap());
    }

    struct ExplodingField;

    impl VelocityField for ExplodingField {
        fn velocity(
            &self,
            x: &Tensor,
            _: &Tensor,
            t: f64,
            _: &InstructionEmbedding,
            _: bool,
        ) -> Result<(Tensor, Vec<AttentionRecord>)> {
            if t > 0.45 {
                return Err(Error::NonFinite { op: "test" });
            }
            Ok((x.clone(), Vec::new()))
        }
        fn null_instruction(&self) -> Result<InstructionEmbedding> {
            Ok(dummy_instruction())
        }
    }

    #[test]
    fn sampler_reports_divergent_step() {
        let cfg = SamplerConfig {
            sigma_min: 0.0,
            t_start: 0.0,
            num_steps: 10,
            guidance_weight: 1.0,
        };
        let err = sample(
            &ExplodingField,
            &Tensor::zeros(&[2]),
            &dummy_instruction(),
            &cfg,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SamplerDiverged { step: 5 }), "{err}");
    }
}
