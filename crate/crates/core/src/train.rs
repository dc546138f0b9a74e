//! Flow-matching training stages and the distillation loop driver.

use std::time::Instant;

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{Codec, LatentGrid};
use crate::distill::{DistillScene, Distiller, StepLog};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, scalar, FmSample};
use crate::net::{ConditionEmbedding, HashEmbedder, ModelParams};
use crate::rollout::{order_objects, OrderPolicy};
use crate::scenes::{build_training_pairs, Catalog, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Text-only model of whole scenes.
    Base,
    /// Object-conditioned next-state model on teacher-forcing pairs.
    Teacher,
    /// Removal model on swapped pairs.
    Edit,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "base" => Ok(Stage::Base),
            "teacher" => Ok(Stage::Teacher),
            "edit" => Ok(Stage::Edit),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Teacher => "teacher",
            Stage::Edit => "edit",
        }
    }
}

/// Encoded training example.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: LatentGrid,
    pub s: LatentGrid,
    pub o: LatentGrid,
    pub c: ConditionEmbedding,
}

impl TrainItem {
    pub fn sample(&self) -> FmSample<'_> {
        FmSample {
            x0: &self.x0,
            s: &self.s,
            o: &self.o,
            c: &self.c,
        }
    }
}

/// Encodes the examples of `stage` for every scene, in scene order.
pub fn stage_items(
    specs: &[SceneSpec],
    stage: Stage,
    catalog: &Catalog,
    codec: &Codec,
    embedder: &HashEmbedder,
) -> Result<Vec<TrainItem>> {
    let per_scene: Vec<Result<Vec<TrainItem>>> = specs
        .par_iter()
        .map(|spec| {
            let c = embedder.embed(&spec.instruction)?;
            match stage {
                Stage::Base => {
                    let x0 = codec.encode(&spec.occupancy(catalog)?)?;
                    let zero = LatentGrid::zeros(x0.dims(), x0.channels());
                    Ok(vec![TrainItem {
                        x0,
                        s: zero.clone(),
                        o: zero,
                        c,
                    }])
                }
                Stage::Teacher | Stage::Edit => build_training_pairs(spec, catalog, stage == Stage::Edit)?
                    .into_iter()
                    .filter(|p| p.removal == (stage == Stage::Edit))
                    .map(|p| {
                        Ok(TrainItem {
                            x0: codec.encode(&p.target)?,
                            s: codec.encode(&p.context)?,
                            o: codec.encode(&p.object)?,
                            c: c.clone(),
                        })
                    })
                    .collect(),
            }
        })
        .collect();
    let mut items = Vec::new();
    for r in per_scene {
        items.extend(r?);
    }
    if items.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub dropped: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    pub dropped: usize,
    pub samples: usize,
}

pub const TRAIN_CSV_HEADER: &str = "step,loss,dropped,wall_ms";

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.3}", self.step, self.loss, self.dropped, self.wall_ms)
    }
}

/// AdamW on the flow-matching loss over uniformly drawn minibatches.
/// Aborts on a non-finite loss, naming the step.
pub fn train(
    params: &ModelParams,
    items: &[TrainItem],
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<TrainSummary> {
    if items.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let mut opt = AdamW::new(
        params.vars(),
        ParamsAdamW {
            lr: config.lr,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.steps);
    let mut dropped_total = 0;
    let t0 = Instant::now();
    for step in 0..config.steps {
        let batch: Vec<FmSample> = (0..config.batch)
            .map(|_| items[rng.random_range(0..items.len())].sample())
            .collect();
        let (loss, draw) = fm_loss(params, &batch, &mut rng, config.p_drop).map_err(|e| e.at_step(step))?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")).at_step(step));
        }
        opt.backward_step(&loss)?;
        let dropped = draw.dropped.iter().filter(|&&d| d).count();
        dropped_total += dropped;
        let rec = TrainRecord {
            step,
            loss: value,
            dropped,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&rec);
        records.push(rec);
    }
    Ok(TrainSummary {
        records,
        dropped: dropped_total,
        samples: config.steps * config.batch,
    })
}

/// Loss on fixed items with a fixed noise stream and no condition dropout.
pub fn eval_loss(params: &ModelParams, items: &[TrainItem], seed: u64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for chunk in items.chunks(16) {
        let batch: Vec<FmSample> = chunk.iter().map(TrainItem::sample).collect();
        let (loss, _) = fm_loss(params, &batch, &mut rng, 0.0)?;
        acc += scalar(&loss)? * chunk.len() as f64;
    }
    Ok(acc / items.len() as f64)
}

/// Distillation inputs: empty room, bottom-up object latents, instruction.
pub fn distill_scenes(
    specs: &[SceneSpec],
    catalog: &Catalog,
    codec: &Codec,
    embedder: &HashEmbedder,
) -> Result<Vec<DistillScene>> {
    specs
        .par_iter()
        .map(|spec| {
            let classes: Vec<&str> = spec.objects.iter().map(|o| o.class.as_str()).collect();
            let order = order_objects(&classes, OrderPolicy::BottomUp, catalog, &spec.instruction)?;
            let objects = order
                .iter()
                .map(|&i| codec.encode(&catalog.get(classes[i])?.canonical_grid(spec.grid_resolution)?))
                .collect::<Result<Vec<_>>>()?;
            Ok(DistillScene {
                s0: codec.empty_latent(spec.grid_resolution)?,
                objects,
                cond: embedder.embed(&spec.instruction)?,
            })
        })
        .collect()
}

pub const DISTILL_CSV_HEADER: &str = "step,loss_step,loss_holistic,critic_loss,grad_norm,wall_ms";

/// Cycles through `scenes` one at a time for `iterations` generator updates.
pub fn distill(
    distiller: &mut Distiller,
    scenes: &[DistillScene],
    iterations: usize,
    mut on_step: impl FnMut(usize, &StepLog, f64),
) -> Result<Vec<StepLog>> {
    if scenes.is_empty() {
        return Err(Error::Empty("distillation scenes"));
    }
    let t0 = Instant::now();
    let mut logs = Vec::with_capacity(iterations);
    for k in 0..iterations {
        let log = distiller
            .dual_guidance_step(&scenes[k % scenes.len()])
            .map_err(|e| e.at_step(k))?;
        on_step(k, &log, t0.elapsed().as_secs_f64() * 1e3);
        logs.push(log);
    }
    Ok(logs)
}

pub fn distill_csv_row(step: usize, log: &StepLog, wall_ms: f64) -> String {
    format!(
        "{step},{},{},{},{},{wall_ms:.3}",
        log.loss_step, log.loss_holistic, log.critic_loss, log.grad_norm
    )
}
