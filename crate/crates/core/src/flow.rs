//! Linear-path flow matching: forward process, training loss and the guided
//! Euler sampler.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::LatentGrid;
use crate::error::{Error, Result};
use crate::net::{latent_batch, tensor_latent, CondBatch, ConditionEmbedding, ModelParams};

/// `(1 - t) x0 + t eps`, elementwise.
pub fn flow_forward(x0: &LatentGrid, eps: &LatentGrid, t: f64) -> Result<LatentGrid> {
    if !x0.same_shape(eps) {
        return Err(Error::Shape("flow_forward operands differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t = {t} outside [0, 1]")));
    }
    let values = x0
        .values()
        .iter()
        .zip(eps.values())
        .map(|(&a, &e)| ((1.0 - t) * a as f64 + t * e as f64) as f32)
        .collect();
    LatentGrid::new(x0.dims(), x0.channels(), values)
}

/// Batched `(1 - t_b) x0 + t_b eps` on `(B, N, d)` tensors.
pub fn flow_forward_tensor(x0: &Tensor, eps: &Tensor, t: &[f64]) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if t.len() != b || x0.dims() != eps.dims() {
        return Err(Error::Shape("flow_forward batch mismatch".into()));
    }
    let tt = Tensor::from_vec(t.to_vec(), (b, 1, 1), &Device::Cpu)?.to_dtype(x0.dtype())?;
    let keep = (1.0 - &tt)?;
    Ok((x0.broadcast_mul(&keep)? + eps.broadcast_mul(&tt)?)?)
}

/// Standard-normal latent of the given shape.
pub fn gaussian_latent(dims: [usize; 3], channels: usize, rng: &mut impl Rng) -> LatentGrid {
    let n = dims[0] * dims[1] * dims[2] * channels;
    let values = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z
        })
        .collect();
    LatentGrid::new(dims, channels, values).expect("consistent shape")
}

/// Strictly decreasing times `t_T > ... > t_1` in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if steps.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("schedule times must lie in (0, 1]".into()));
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("schedule must be strictly decreasing".into()));
        }
        Ok(NoiseSchedule { steps })
    }

    /// `t_j = j / T` for `j = T, ..., 1`.
    pub fn uniform(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("step count must be >= 1".into()));
        }
        Self::new((1..=count).rev().map(|j| j as f64 / count as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Times from `t_T` down to `t_1`.
    pub fn times(&self) -> &[f64] {
        &self.steps
    }

    /// Time after step `k` (0-based from the noisy end); 0 after the last.
    pub fn next(&self, k: usize) -> f64 {
        self.steps.get(k + 1).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub cfg_weight: f64,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(cfg_weight: f64, steps: usize, seed: u64) -> Result<Self> {
        if !cfg_weight.is_finite() || cfg_weight < 0.0 {
            return Err(Error::Config(format!("cfg weight {cfg_weight} must be finite and >= 0")));
        }
        Ok(SamplerConfig {
            cfg_weight,
            schedule: NoiseSchedule::uniform(steps)?,
            seed,
        })
    }

    /// Network evaluations per sample.
    pub fn evaluations(&self) -> usize {
        self.schedule.len() * if self.cfg_weight == 1.0 { 1 } else { 2 }
    }
}

/// Anything that predicts a velocity over `x` given scene, object and text.
pub trait VelocityModel {
    fn velocity(
        &self,
        x: &LatentGrid,
        s: &LatentGrid,
        o: &LatentGrid,
        c: &ConditionEmbedding,
        t: f64,
    ) -> Result<LatentGrid>;
}

impl VelocityModel for ModelParams {
    fn velocity(
        &self,
        x: &LatentGrid,
        s: &LatentGrid,
        o: &LatentGrid,
        c: &ConditionEmbedding,
        t: f64,
    ) -> Result<LatentGrid> {
        let dt = self.dtype();
        let cond = CondBatch::new(&[c], self.config.cond_dim, dt)?;
        let y = self.forward(
            &latent_batch(&[x], dt)?,
            &latent_batch(&[s], dt)?,
            &latent_batch(&[o], dt)?,
            x.dims(),
            &cond,
            &[t],
        )?;
        tensor_latent(&y, 0, x.dims())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub latent: LatentGrid,
    pub evaluations: usize,
}

fn axpy(x: &mut LatentGrid, a: f64, v: &LatentGrid) {
    for (xi, &vi) in x.values_mut().iter_mut().zip(v.values()) {
        *xi = (*xi as f64 + a * vi as f64) as f32;
    }
}

/// Euler integration from seeded noise at `t_T` to `t = 0` with CFG.
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    s: &LatentGrid,
    o: &LatentGrid,
    c: &ConditionEmbedding,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    if !s.same_shape(o) {
        return Err(Error::Shape("scene and object latents differ in shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = gaussian_latent(s.dims(), s.channels(), &mut rng);
    let null = ConditionEmbedding::null();
    let w = config.cfg_weight;
    let mut evaluations = 0;
    let times = config.schedule.times();
    for (k, &t) in times.iter().enumerate() {
        let v_cond = model.velocity(&x, s, o, c, t).map_err(|e| e.at_step(k))?;
        evaluations += 1;
        let v = if w == 1.0 {
            v_cond
        } else {
            let v_unc = model.velocity(&x, s, o, &null, t).map_err(|e| e.at_step(k))?;
            evaluations += 1;
            if w == 0.0 {
                v_unc
            } else {
                let values = v_unc
                    .values()
                    .iter()
                    .zip(v_cond.values())
                    .map(|(&u, &cd)| (u as f64 + w * (cd as f64 - u as f64)) as f32)
                    .collect();
                LatentGrid::new(x.dims(), x.channels(), values)?
            }
        };
        axpy(&mut x, -(t - config.schedule.next(k)), &v);
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {k}")).at_step(k));
        }
    }
    Ok(SampleOutput {
        latent: x,
        evaluations,
    })
}

/// One training example for the flow-matching objective.
#[derive(Debug, Clone, Copy)]
pub struct FmSample<'a> {
    pub x0: &'a LatentGrid,
    pub s: &'a LatentGrid,
    pub o: &'a LatentGrid,
    pub c: &'a ConditionEmbedding,
}

/// Randomness drawn for one loss evaluation, per sample in order: `t`,
/// the drop coin, then the noise values.
#[derive(Debug, Clone)]
pub struct FmDraw {
    pub t: Vec<f64>,
    pub dropped: Vec<bool>,
    pub x0: Tensor,
    pub eps: Tensor,
    pub xt: Tensor,
    pub target: Tensor,
}

pub fn draw_fm(batch: &[FmSample], rng: &mut impl Rng, p_drop: f64, dtype: DType) -> Result<FmDraw> {
    if batch.is_empty() {
        return Err(Error::Empty("flow-matching batch"));
    }
    let first = batch[0].x0;
    let mut t = Vec::with_capacity(batch.len());
    let mut dropped = Vec::with_capacity(batch.len());
    let mut eps = Vec::with_capacity(batch.len());
    for item in batch {
        if !item.x0.same_shape(first) || !item.s.same_shape(first) || !item.o.same_shape(first) {
            return Err(Error::Shape("flow-matching batch shapes differ".into()));
        }
        t.push(rng.random::<f64>());
        dropped.push(rng.random::<f64>() < p_drop);
        eps.push(gaussian_latent(first.dims(), first.channels(), rng));
    }
    let x0: Vec<&LatentGrid> = batch.iter().map(|b| b.x0).collect();
    let x0 = latent_batch(&x0, dtype)?;
    let eps_refs: Vec<&LatentGrid> = eps.iter().collect();
    let eps = latent_batch(&eps_refs, dtype)?;
    let xt = flow_forward_tensor(&x0, &eps, &t)?;
    let target = (&eps - &x0)?;
    Ok(FmDraw {
        t,
        dropped,
        x0,
        eps,
        xt,
        target,
    })
}

/// Mean squared error between a velocity prediction and `eps - x0`.
pub fn fm_loss_from_prediction(pred: &Tensor, draw: &FmDraw) -> Result<Tensor> {
    if pred.dims() != draw.target.dims() {
        return Err(Error::Shape("prediction does not match target".into()));
    }
    Ok((pred - &draw.target)?.sqr()?.mean_all()?)
}

/// Flow-matching loss with per-sample condition dropout; returns the scalar
/// loss tensor (differentiable in `params`) and the randomness used.
pub fn fm_loss(
    params: &ModelParams,
    batch: &[FmSample],
    rng: &mut impl Rng,
    p_drop: f64,
) -> Result<(Tensor, FmDraw)> {
    let dt = params.dtype();
    let draw = draw_fm(batch, rng, p_drop, dt)?;
    let null = ConditionEmbedding::null();
    let conds: Vec<&ConditionEmbedding> = batch
        .iter()
        .zip(&draw.dropped)
        .map(|(b, &d)| if d { &null } else { b.c })
        .collect();
    let cond = CondBatch::new(&conds, params.config.cond_dim, dt)?;
    let s: Vec<&LatentGrid> = batch.iter().map(|b| b.s).collect();
    let o: Vec<&LatentGrid> = batch.iter().map(|b| b.o).collect();
    let pred = params.forward(
        &draw.xt,
        &latent_batch(&s, dt)?,
        &latent_batch(&o, dt)?,
        batch[0].x0.dims(),
        &cond,
        &draw.t,
    )?;
    let loss = fm_loss_from_prediction(&pred, &draw)?;
    Ok((loss, draw))
}

/// Text-only variant: scene and object latents are all zeros.
pub fn fm_loss_uncond(
    params: &ModelParams,
    batch: &[(&LatentGrid, &ConditionEmbedding)],
    rng: &mut impl Rng,
    p_drop: f64,
) -> Result<(Tensor, FmDraw)> {
    let first = batch.first().ok_or(Error::Empty("flow-matching batch"))?.0;
    let zero = LatentGrid::zeros(first.dims(), first.channels());
    let items: Vec<FmSample> = batch
        .iter()
        .map(|&(x0, c)| FmSample {
            x0,
            s: &zero,
            o: &zero,
            c,
        })
        .collect();
    fm_loss(params, &items, rng, p_drop)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{HashEmbedder, ModelConfig};
    use proptest::prelude::*;

    fn grid(v: f32) -> LatentGrid {
        LatentGrid::new([2, 2, 2], 2, vec![v; 16]).unwrap()
    }

    #[test]
    fn forward_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = gaussian_latent([2, 2, 2], 3, &mut rng);
        let eps = gaussian_latent([2, 2, 2], 3, &mut rng);
        assert_eq!(flow_forward(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(flow_forward(&x0, &eps, 1.0).unwrap(), eps);
        let mid = flow_forward(&grid(0.0), &grid(2.0), 0.5).unwrap();
        assert!(mid.values().iter().all(|&v| v == 1.0));
        assert!(flow_forward(&x0, &grid(0.0), 0.5).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert_eq!(NoiseSchedule::uniform(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25]);
        assert!(NoiseSchedule::new(vec![0.5, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![1.5]).is_err());
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(SamplerConfig::new(f64::NAN, 4, 0).is_err());
    }

    struct Oracle;
    impl VelocityModel for Oracle {
        fn velocity(&self, x: &LatentGrid, _: &LatentGrid, _: &LatentGrid, c: &ConditionEmbedding, t: f64) -> Result<LatentGrid> {
            let bias = if c.null { 0.0 } else { 1.0 };
            let v = x.values().iter().map(|&a| (0.3 * a as f64 + bias * t) as f32).collect();
            LatentGrid::new(x.dims(), x.channels(), v)
        }
    }

    #[test]
    fn sampler_counts_evaluations() {
        let z = grid(0.0);
        let c = ConditionEmbedding { tokens: vec![vec![1.0]], null: false };
        for (w, n) in [(1.0, 5), (0.0, 10), (3.0, 10)] {
            let cfg = SamplerConfig::new(w, 5, 1).unwrap();
            assert_eq!(sample(&Oracle, &z, &z, &c, &cfg).unwrap().evaluations, n);
            assert_eq!(cfg.evaluations(), n);
        }
    }

    /// Exact velocity of the linear path between N(0, 1) noise and N(mu, sigma^2) data.
    struct GaussianFlow {
        mu: f64,
        sigma: f64,
    }
    impl VelocityModel for GaussianFlow {
        fn velocity(&self, x: &LatentGrid, _: &LatentGrid, _: &LatentGrid, _: &ConditionEmbedding, t: f64) -> Result<LatentGrid> {
            let (m, s2) = (self.mu, self.sigma * self.sigma);
            let var = (1.0 - t).powi(2) * s2 + t * t;
            let gain = (t - (1.0 - t) * s2) / var;
            let v = x
                .values()
                .iter()
                .map(|&a| (-m + gain * (a as f64 - (1.0 - t) * m)) as f32)
                .collect();
            LatentGrid::new(x.dims(), x.channels(), v)
        }
    }

    #[test]
    fn euler_matches_gaussian_transport() {
        let model = GaussianFlow { mu: 0.7, sigma: 0.4 };
        let z = LatentGrid::zeros([4, 4, 4], 4);
        let cfg = SamplerConfig::new(1.0, 50, 11).unwrap();
        let out = sample(&model, &z, &z, &ConditionEmbedding::null(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = gaussian_latent([4, 4, 4], 4, &mut rng);
        let mae = out
            .latent
            .values()
            .iter()
            .zip(eps.values())
            .map(|(&x, &e)| (x as f64 - (0.7 + 0.4 * e as f64)).abs())
            .sum::<f64>()
            / eps.values().len() as f64;
        assert!(mae <= 0.02, "mae {mae}");
    }

    fn tiny_model() -> ModelParams {
        ModelParams::new(
            ModelConfig {
                channels: 2,
                width: 16,
                layers: 1,
                heads: 2,
                cond_dim: 8,
                ffn_mult: 2,
                identity_flag: true,
                seed: 1,
            },
            DType::F32,
        )
        .unwrap()
    }

    #[test]
    fn loss_oracle_and_zero_model() {
        let e = HashEmbedder::new(64, 8, 16, 0);
        let c = e.embed("a rug in the middle of the room").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = gaussian_latent([2, 2, 2], 2, &mut rng);
        let batch = [FmSample { x0: &x0, s: &x0, o: &x0, c: &c }; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draw = draw_fm(&batch, &mut rng, 0.1, DType::F64).unwrap();
        let zero = fm_loss_from_prediction(&draw.target, &draw).unwrap();
        assert!(scalar(&zero).unwrap().abs() <= 1e-12);
        let zeros = draw.target.zeros_like().unwrap();
        let l = scalar(&fm_loss_from_prediction(&zeros, &draw).unwrap()).unwrap();
        // replay the same stream by hand
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut acc = 0.0;
        let mut n = 0;
        for _ in 0..3 {
            let _t: f64 = rand::Rng::random(&mut rng);
            let _d: f64 = rand::Rng::random(&mut rng);
            let eps = gaussian_latent([2, 2, 2], 2, &mut rng);
            for (&a, &b) in eps.values().iter().zip(x0.values()) {
                acc += (a as f64 - b as f64).powi(2);
                n += 1;
            }
        }
        assert!((l - acc / n as f64).abs() < 1e-9);
        assert!(matches!(draw_fm(&[], &mut rng, 0.1, DType::F32), Err(Error::Empty(_))));
    }

    #[test]
    fn uncond_loss_equals_zero_context_loss() {
        let params = tiny_model();
        let e = HashEmbedder::new(64, 8, 16, 0);
        let c = e.embed("a bed").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = gaussian_latent([2, 2, 2], 2, &mut rng);
        let zero = LatentGrid::zeros([2, 2, 2], 2);
        let a = fm_loss_uncond(&params, &[(&x0, &c)], &mut ChaCha8Rng::seed_from_u64(4), 0.1).unwrap().0;
        let b = fm_loss(&params, &[FmSample { x0: &x0, s: &zero, o: &zero, c: &c }], &mut ChaCha8Rng::seed_from_u64(4), 0.1)
            .unwrap()
            .0;
        assert_eq!(scalar(&a).unwrap(), scalar(&b).unwrap());
    }

    proptest! {
        #[test]
        fn forward_is_affine(t in 0.0f64..=1.0, a in -1.0f32..1.0, b in -3.0f32..3.0) {
            let r = flow_forward(&grid(a), &grid(b), t).unwrap();
            let expect = ((1.0 - t) * a as f64 + t * b as f64) as f32;
            prop_assert!(r.values().iter().all(|&v| (v - expect).abs() <= 1e-6));
        }

        #[test]
        fn loss_non_negative(seed in 0u64..50) {
            let params = tiny_model();
            let e = HashEmbedder::new(64, 8, 16, 0);
            let c = e.embed("a chair facing the desk").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = gaussian_latent([2, 2, 2], 2, &mut rng);
            let (l, _) = fm_loss(&params, &[FmSample { x0: &x0, s: &x0, o: &x0, c: &c }], &mut rng, 0.5).unwrap();
            prop_assert!(scalar(&l).unwrap() >= 0.0);
        }
    }
}
