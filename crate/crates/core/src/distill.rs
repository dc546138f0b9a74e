//! Dual-guidance self-rollout distillation of a few-step student.
//!
//! The student runs its own rollout; the sampled denoising step carries
//! gradient. Distribution-matching gradients come from a step-wise teacher
//! conditioned on the rollout's own contexts and from a text-only holistic
//! teacher on the final state. A critic tracks the student's outputs.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentGrid;
use crate::error::{Error, Result};
use crate::flow::{flow_forward_tensor, fm_loss, gaussian_latent, FmSample, NoiseSchedule};
use crate::net::{latent_batch, tensor_latent, CondBatch, ConditionEmbedding, ModelParams};
use crate::rollout::StepGenerator;

/// How the student moves from `t_j` to `t_{j-1}` between detached steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Renoise {
    /// `flow_forward(x0_hat, eps, t')` with fresh Gaussian noise.
    Fresh,
    /// Uses the noise implied by the prediction; equals an Euler step.
    Predicted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr_student: f64,
    pub lr_critic: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub ratio: usize,
    pub cfg_weight: f64,
    pub step_loss: bool,
    pub holistic_loss: bool,
    pub renoise: Renoise,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 4,
            lr_student: 2e-6,
            lr_critic: 5e-7,
            betas: (0.0, 0.999),
            weight_decay: 0.01,
            ratio: 5,
            cfg_weight: 3.0,
            step_loss: true,
            holistic_loss: true,
            renoise: Renoise::Fresh,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.ratio == 0 {
            return Err(Error::Config("distill steps and ratio must be >= 1".into()));
        }
        if !(self.lr_student > 0.0 && self.lr_critic > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !self.step_loss && !self.holistic_loss {
            return Err(Error::Config("at least one distillation loss must be enabled".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::uniform(self.steps)
    }
}

/// Instrumentation of model calls during distillation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub student_grad_calls: usize,
    pub student_detached_calls: usize,
    pub step_teacher_scores: usize,
    pub holistic_teacher_scores: usize,
    pub critic_scores: usize,
    pub critic_updates: usize,
    pub student_updates: usize,
}

/// `x_t - t * v` for a batch of one.
#[allow(clippy::too_many_arguments)]
fn predict_x0(
    model: &ModelParams,
    z: &Tensor,
    s: &Tensor,
    o: &Tensor,
    dims: [usize; 3],
    cond: &CondBatch,
    t: f64,
) -> Result<Tensor> {
    let v = model.forward(z, s, o, dims, cond, &[t])?;
    Ok((z - (v * t)?)?)
}

fn gaussian_tensor(like: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let (b, n, d) = like.dims3()?;
    let mut data = Vec::with_capacity(b * n * d);
    for _ in 0..b * n * d {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        data.push(z);
    }
    Ok(Tensor::from_vec(data, (b, n, d), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Output of one self-rollout.
pub struct RolloutRecord {
    /// Gradient-bearing prediction per object.
    pub outputs: Vec<Tensor>,
    /// Detached context each object was generated from (`S_0`, then outputs).
    pub contexts: Vec<Tensor>,
    /// Detached predictions above the sampled step, in rollout order.
    pub intermediates: Vec<Tensor>,
    pub sampled_step: usize,
}

/// Student self-rollout: for each object, denoise from `t_T` down to the
/// sampled step `s` (1-based, `t_s` = `schedule.times()[T - s]`); only the
/// prediction at `s` is tracked.
#[allow(clippy::too_many_arguments)]
pub fn student_rollout(
    student: &ModelParams,
    s0: &Tensor,
    objects: &[Tensor],
    dims: [usize; 3],
    cond: &CondBatch,
    schedule: &NoiseSchedule,
    sampled_step: usize,
    renoise: Renoise,
    track_grad: bool,
    rng: &mut impl Rng,
    counters: &mut Counters,
) -> Result<RolloutRecord> {
    let t_count = schedule.len();
    if sampled_step == 0 || sampled_step > t_count {
        return Err(Error::Invalid(format!(
            "sampled step {sampled_step} outside 1..={t_count}"
        )));
    }
    let times = schedule.times();
    let mut ctx = s0.detach();
    let mut outputs = Vec::with_capacity(objects.len());
    let mut contexts = Vec::with_capacity(objects.len());
    let mut intermediates = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        contexts.push(ctx.clone());
        let mut z = gaussian_tensor(s0, rng)?;
        for j in (sampled_step..=t_count).rev() {
            let t = times[t_count - j];
            if j == sampled_step {
                let pred = predict_x0(student, &z, &ctx, o, dims, cond, t)
                    .map_err(|e| e.at_step(i))?;
                counters.student_grad_calls += 1;
                let pred = if track_grad { pred } else { pred.detach() };
                ctx = pred.detach();
                outputs.push(pred);
            } else {
                let pred = predict_x0(student, &z, &ctx, o, dims, cond, t)
                    .map_err(|e| e.at_step(i))?
                    .detach();
                counters.student_detached_calls += 1;
                intermediates.push(pred.clone());
                let t_next = times[t_count - j + 1];
                z = match renoise {
                    Renoise::Fresh => {
                        let eps = gaussian_tensor(&pred, rng)?;
                        flow_forward_tensor(&pred, &eps, &[t_next])?
                    }
                    Renoise::Predicted => {
                        // eps_hat = (z - (1 - t) x0_hat) / t
                        let eps = ((&z - (&pred * (1.0 - t))?)? / t)?;
                        flow_forward_tensor(&pred, &eps, &[t_next])?
                    }
                };
            }
        }
    }
    Ok(RolloutRecord {
        outputs,
        contexts,
        intermediates,
        sampled_step,
    })
}

/// Distribution-matching gradient on flat values.
///
/// `g = (x0_critic - x0_teacher) * w` with `w = 1 / mean|x0 - x0_teacher|`
/// when `normalize` is set. Returns `g` and the logged loss `0.5 * mean(g^2)`.
pub fn dmd_gradient(
    x0: &[f64],
    x0_teacher: &[f64],
    x0_critic: &[f64],
    normalize: bool,
) -> (Vec<f64>, f64) {
    let n = x0.len().max(1) as f64;
    let w = if normalize {
        let m = x0
            .iter()
            .zip(x0_teacher)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        if m < 1e-8 {
            log::warn!("dmd normalizer {m:e} clamped to 1e-8");
        }
        1.0 / m.max(1e-8)
    } else {
        1.0
    };
    let g: Vec<f64> = x0_critic
        .iter()
        .zip(x0_teacher)
        .map(|(c, t)| (c - t) * w)
        .collect();
    let loss = 0.5 * g.iter().map(|v| v * v).sum::<f64>() / n;
    (g, loss)
}

/// Teacher side of a DMD evaluation: model, conditioning latents and CFG.
pub struct ScoreSource<'a> {
    pub model: &'a ModelParams,
    pub s: &'a Tensor,
    pub o: &'a Tensor,
    pub cond: &'a CondBatch,
    pub null: &'a CondBatch,
    pub cfg_weight: f64,
}

/// Clean-sample prediction at `x_t` with classifier-free guidance.
pub fn guided_x0(src: &ScoreSource, xt: &Tensor, dims: [usize; 3], t: f64) -> Result<Tensor> {
    let vc = src.model.forward(xt, src.s, src.o, dims, src.cond, &[t])?;
    let v = if src.cfg_weight == 1.0 {
        vc
    } else {
        let vu = src.model.forward(xt, src.s, src.o, dims, src.null, &[t])?;
        (&vu + ((vc - &vu)? * src.cfg_weight)?)?
    };
    Ok((xt - (v * t)?)?.detach())
}

/// Surrogate loss whose gradient through `x0_pred` is the DMD gradient.
pub struct DmdTerm {
    pub surrogate: Tensor,
    pub loss: f64,
}

/// Noises `x0_pred` at `t ~ U(0, 1)`, compares teacher and critic
/// clean-sample predictions and returns a surrogate `mean(x0 * g)`.
pub fn dmd_term(
    x0_pred: &Tensor,
    teacher: &ScoreSource,
    critic: &ScoreSource,
    dims: [usize; 3],
    rng: &mut impl Rng,
) -> Result<DmdTerm> {
    let t: f64 = rng.random_range(0.02..0.98);
    let x0 = x0_pred.detach();
    let eps = gaussian_tensor(&x0, rng)?;
    let xt = flow_forward_tensor(&x0, &eps, &[t])?;
    let xt_teacher = guided_x0(teacher, &xt, dims, t)?;
    let xt_critic = guided_x0(critic, &xt, dims, t)?;
    let flat = |v: &Tensor| -> Result<Vec<f64>> {
        Ok(v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    };
    let (g, loss) = dmd_gradient(&flat(&x0)?, &flat(&xt_teacher)?, &flat(&xt_critic)?, true);
    if !loss.is_finite() {
        return Err(Error::NonFinite("dmd gradient".into()));
    }
    let g = Tensor::from_vec(g, x0.shape(), &Device::Cpu)?.to_dtype(x0_pred.dtype())?;
    let surrogate = (x0_pred * g)?.mean_all()?;
    Ok(DmdTerm { surrogate, loss })
}

/// Frozen teachers plus the trainable critic.
pub struct TeacherBundle<'a> {
    pub holistic: &'a ModelParams,
    pub stepwise: &'a ModelParams,
    pub critic: ModelParams,
}

/// One scene's worth of distillation input.
pub struct DistillScene {
    pub s0: LatentGrid,
    pub objects: Vec<LatentGrid>,
    pub cond: ConditionEmbedding,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLog {
    pub loss_step: f64,
    pub loss_holistic: f64,
    pub critic_loss: f64,
    pub grad_norm: f64,
    pub sampled_step: usize,
}

/// Student, critic, their optimizers and the instrumentation.
pub struct Distiller<'a> {
    pub student: ModelParams,
    pub teachers: TeacherBundle<'a>,
    pub config: DistillConfig,
    pub counters: Counters,
    pub critic_log: Vec<(usize, usize, f64)>,
    student_opt: AdamW,
    critic_opt: AdamW,
    rng: ChaCha8Rng,
    step_index: usize,
}

fn adamw(vars: Vec<candle_core::Var>, lr: f64, cfg: &DistillConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?)
}

impl<'a> Distiller<'a> {
    /// Student starts as a copy of the step-wise teacher, the critic as a copy
    /// of the holistic teacher.
    pub fn new(holistic: &'a ModelParams, stepwise: &'a ModelParams, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        let student = stepwise.deep_clone()?;
        let critic = holistic.deep_clone()?;
        let student_opt = adamw(student.vars(), config.lr_student, &config)?;
        let critic_opt = adamw(critic.vars(), config.lr_critic, &config)?;
        Ok(Distiller {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            student,
            teachers: TeacherBundle {
                holistic,
                stepwise,
                critic,
            },
            config,
            counters: Counters::default(),
            critic_log: Vec::new(),
            student_opt,
            critic_opt,
            step_index: 0,
        })
    }

    /// One critic denoising update on detached student outputs, each under
    /// the conditioning its guidance term scores it with.
    pub fn critic_step(&mut self, items: &[FmSample]) -> Result<f64> {
        let (loss, _) = fm_loss(&self.teachers.critic, items, &mut self.rng, 0.0)?;
        let value = crate::flow::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        self.critic_opt.backward_step(&loss)?;
        self.counters.critic_updates += 1;
        self.critic_log.push((self.step_index, self.counters.critic_updates, value));
        Ok(value)
    }

    /// One generator update preceded by `ratio` critic updates.
    pub fn dual_guidance_step(&mut self, scene: &DistillScene) -> Result<StepLog> {
        self.dual_guidance_step_with(scene, None, true)
    }

    /// As `dual_guidance_step`, optionally forcing the sampled step and
    /// optionally detaching the tracked prediction.
    pub fn dual_guidance_step_with(
        &mut self,
        scene: &DistillScene,
        forced_step: Option<usize>,
        track_grad: bool,
    ) -> Result<StepLog> {
        let dims = scene.s0.dims();
        let dt = self.student.dtype();
        let cfg = self.config.clone();
        let schedule = cfg.schedule()?;
        let s = forced_step.unwrap_or_else(|| self.rng.random_range(1..=cfg.steps));
        let cd = self.student.config.cond_dim;
        let cond = CondBatch::new(&[&scene.cond], cd, dt)?;
        let null_emb = ConditionEmbedding::null();
        let null = CondBatch::new(&[&null_emb], cd, dt)?;
        let s0 = latent_batch(&[&scene.s0], dt)?;
        let objects = scene
            .objects
            .iter()
            .map(|o| latent_batch(&[o], dt))
            .collect::<Result<Vec<_>>>()?;
        if objects.is_empty() {
            return Err(Error::Empty("distillation objects"));
        }

        let record = student_rollout(
            &self.student,
            &s0,
            &objects,
            dims,
            &cond,
            &schedule,
            s,
            cfg.renoise,
            track_grad,
            &mut self.rng,
            &mut self.counters,
        )?;

        let latents = |ts: &[Tensor]| -> Result<Vec<LatentGrid>> { ts.iter().map(|t| tensor_latent(t, 0, dims)).collect() };
        let outputs = latents(&record.outputs)?;
        let contexts = latents(&record.contexts)?;
        let zero = LatentGrid::zeros(dims, scene.s0.channels());
        let mut items = Vec::new();
        if cfg.step_loss {
            for i in 0..outputs.len() {
                items.push(FmSample {
                    x0: &outputs[i],
                    s: &contexts[i],
                    o: &scene.objects[i],
                    c: &scene.cond,
                });
            }
        }
        if cfg.holistic_loss {
            items.push(FmSample {
                x0: outputs.last().expect("non-empty outputs"),
                s: &zero,
                o: &zero,
                c: &scene.cond,
            });
        }
        let mut critic_loss = 0.0;
        for _ in 0..cfg.ratio {
            critic_loss += self.critic_step(&items)?;
        }
        critic_loss /= cfg.ratio as f64;

        let zeros = s0.zeros_like()?;
        let mut total: Option<Tensor> = None;
        let mut add = |t: Tensor| -> Result<()> {
            total = Some(match total.take() {
                Some(a) => (a + t)?,
                None => t,
            });
            Ok(())
        };
        let mut loss_step = 0.0;
        if cfg.step_loss {
            for (i, out) in record.outputs.iter().enumerate() {
                let teacher = ScoreSource {
                    model: self.teachers.stepwise,
                    s: &record.contexts[i],
                    o: &objects[i],
                    cond: &cond,
                    null: &null,
                    cfg_weight: cfg.cfg_weight,
                };
                let critic = ScoreSource {
                    model: &self.teachers.critic,
                    cfg_weight: 1.0,
                    ..teacher
                };
                let term = dmd_term(out, &teacher, &critic, dims, &mut self.rng)?;
                self.counters.step_teacher_scores += 1;
                self.counters.critic_scores += 1;
                loss_step += term.loss;
                add(term.surrogate)?;
            }
        }
        let mut loss_holistic = 0.0;
        if cfg.holistic_loss {
            let last = record.outputs.last().expect("non-empty outputs");
            let teacher = ScoreSource {
                model: self.teachers.holistic,
                s: &zeros,
                o: &zeros,
                cond: &cond,
                null: &null,
                cfg_weight: cfg.cfg_weight,
            };
            let critic = ScoreSource {
                model: &self.teachers.critic,
                cfg_weight: 1.0,
                ..teacher
            };
            let term = dmd_term(last, &teacher, &critic, dims, &mut self.rng)?;
            self.counters.holistic_teacher_scores += 1;
            self.counters.critic_scores += 1;
            loss_holistic = term.loss;
            add(term.surrogate)?;
        }
        let total = total.expect("at least one loss enabled");
        let grads = total.backward()?;
        let mut sq = 0.0;
        for v in self.student.vars() {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("student gradient at step {}", self.step_index)));
        }
        self.student_opt.step(&grads)?;
        self.counters.student_updates += 1;
        self.step_index += 1;
        Ok(StepLog {
            loss_step,
            loss_holistic,
            critic_loss,
            grad_norm,
            sampled_step: s,
        })
    }
}

/// Few-step student used as a generator at inference (conditional only).
pub struct StudentSampler<'a> {
    pub model: &'a ModelParams,
    pub schedule: NoiseSchedule,
    pub renoise: Renoise,
}

impl StepGenerator for StudentSampler<'_> {
    fn generate(
        &self,
        s: &LatentGrid,
        o: &LatentGrid,
        c: &ConditionEmbedding,
        seed: u64,
    ) -> Result<(LatentGrid, usize)> {
        let dt = self.model.dtype();
        let dims = s.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = gaussian_latent(dims, s.channels(), &mut rng);
        let mut z = latent_batch(&[&z0], dt)?;
        let st = latent_batch(&[s], dt)?;
        let ot = latent_batch(&[o], dt)?;
        let cond = CondBatch::new(&[c], self.model.config.cond_dim, dt)?;
        let times = self.schedule.times();
        let mut pred = z.clone();
        for (k, &t) in times.iter().enumerate() {
            pred = predict_x0(self.model, &z, &st, &ot, dims, &cond, t).map_err(|e| e.at_step(k))?;
            if k + 1 < times.len() {
                let t_next = times[k + 1];
                let eps = match self.renoise {
                    Renoise::Fresh => {
                        let e = gaussian_latent(dims, s.channels(), &mut rng);
                        latent_batch(&[&e], dt)?
                    }
                    Renoise::Predicted => ((&z - (&pred * (1.0 - t))?)? / t)?,
                };
                z = flow_forward_tensor(&pred, &eps, &[t_next])?;
            }
        }
        let out = tensor_latent(&pred, 0, dims)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("student sample".into()));
        }
        Ok((out, times.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dmd_gradient_vanishes_for_equal_predictions() {
        let x0 = [0.5, -0.2, 0.1];
        let p = [0.4, -0.1, 0.0];
        let (g, l) = dmd_gradient(&x0, &p, &p, true);
        assert!(g.iter().all(|&v| v == 0.0) && l == 0.0);
    }

    #[test]
    fn dmd_gradient_is_linear_in_difference() {
        let x0 = [0.5, -0.2, 0.1, 0.9];
        let teacher = [0.4, -0.1, 0.0, 1.0];
        let c1 = [0.6, 0.0, 0.3, 0.7];
        let c2: Vec<f64> = c1.iter().zip(&teacher).map(|(c, t)| t + 3.0 * (c - t)).collect();
        let (g1, _) = dmd_gradient(&x0, &teacher, &c1, true);
        let (g2, _) = dmd_gradient(&x0, &teacher, &c2, true);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dmd_normalizer_clamps() {
        let x0 = [0.3, 0.3];
        let (g, l) = dmd_gradient(&x0, &x0, &[0.3 + 1e-12, 0.3], true);
        assert!(g.iter().all(|v| v.is_finite()) && l.is_finite());
    }

    /// Posterior mean of x0 under the linear path for N(mu, sigma^2) data.
    fn gauss_x0(x: f64, t: f64, mu: f64, sigma: f64) -> f64 {
        let var = (1.0 - t).powi(2) * sigma * sigma + t * t;
        mu + (1.0 - t) * sigma * sigma / var * (x - (1.0 - t) * mu)
    }

    #[test]
    fn dmd_matches_reverse_kl_on_gaussians() {
        let (mf, sf, mr, sr) = (0.8, 0.6, -0.3, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let t: f64 = rng.random();
            let x0 = mf + sf * z;
            let xt = (1.0 - t) * x0 + t * e;
            let (g, _) = dmd_gradient(&[x0], &[gauss_x0(xt, t, mr, sr)], &[gauss_x0(xt, t, mf, sf)], false);
            // d x0 / d mu_f = 1
            acc += g[0];
        }
        let mc = acc / draws as f64;
        // E_t[ t^2/(1-t) * E(s_fake - s_real) * (1-t) ] = E_t[ t^2 (mf - mr) / v_r(t) ]
        let k = 20_000;
        let quad = (0..k)
            .map(|i| {
                let t = (i as f64 + 0.5) / k as f64;
                let vr = (1.0 - t).powi(2) * sr * sr + t * t;
                t * t * (mf - mr) / vr
            })
            .sum::<f64>()
            / k as f64;
        assert!(((mc - quad) / quad).abs() < 0.05, "mc {mc} quad {quad}");
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            steps: 0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let none = DistillConfig {
            step_loss: false,
            holistic_loss: false,
            ..DistillConfig::default()
        };
        assert!(none.validate().is_err());
    }
}
