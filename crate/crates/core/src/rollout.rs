//! Autoregressive placement: one object per step into the evolving scene,
//! followed by pose recovery on the occupancy difference.

use std::cell::Cell;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, LatentGrid};
use crate::error::{Error, Result};
use crate::flow::{sample, SamplerConfig, VelocityModel};
use crate::metrics::{self, ObjectFlags, ScoreReport, Thresholds};
use crate::net::{ConditionEmbedding, HashEmbedder, ModelParams};
use crate::registration::{fit_placement, IcpConfig, Placement};
use crate::scenes::{Catalog, SceneSpec};
use crate::voxel::{grid_difference, Frame, OccupancyGrid};

/// Produces the next scene latent from the current one and an object latent.
pub trait StepGenerator {
    fn generate(
        &self,
        s: &LatentGrid,
        o: &LatentGrid,
        c: &ConditionEmbedding,
        seed: u64,
    ) -> Result<(LatentGrid, usize)>;
}

/// Many-step CFG Euler sampler over a trained teacher.
pub struct TeacherSampler<'a, M: VelocityModel + ?Sized = ModelParams> {
    pub model: &'a M,
    pub cfg_weight: f64,
    pub steps: usize,
}

impl<M: VelocityModel + ?Sized> StepGenerator for TeacherSampler<'_, M> {
    fn generate(
        &self,
        s: &LatentGrid,
        o: &LatentGrid,
        c: &ConditionEmbedding,
        seed: u64,
    ) -> Result<(LatentGrid, usize)> {
        let cfg = SamplerConfig::new(self.cfg_weight, self.steps, seed)?;
        let out = sample(self.model, s, o, c, &cfg)?;
        Ok((out.latent, out.evaluations))
    }
}

/// Seed of step `i` derived from a run seed.
pub fn step_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    BottomUp,
    InstructionOrder,
}

/// Returns indices of `classes` in placement order.
pub fn order_objects(
    classes: &[&str],
    policy: OrderPolicy,
    catalog: &Catalog,
    instruction: &str,
) -> Result<Vec<usize>> {
    if classes.is_empty() {
        return Err(Error::Empty("object set"));
    }
    let mut idx: Vec<usize> = (0..classes.len()).collect();
    match policy {
        OrderPolicy::BottomUp => {
            let heights = classes
                .iter()
                .map(|c| Ok(catalog.get(c)?.support_height))
                .collect::<Result<Vec<f64>>>()?;
            idx.sort_by(|&a, &b| {
                heights[a]
                    .total_cmp(&heights[b])
                    .then_with(|| classes[a].cmp(classes[b]))
            });
        }
        OrderPolicy::InstructionOrder => {
            let tokens = crate::net::tokenize(instruction);
            let first = |c: &str| {
                tokens
                    .iter()
                    .position(|t| t == c || t.strip_suffix('s') == Some(c))
                    .unwrap_or(usize::MAX)
            };
            idx.sort_by_key(|&i| first(classes[i]));
        }
    }
    Ok(idx)
}

/// An object waiting to be placed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry {
    pub id: String,
    pub class: String,
    pub canonical: OccupancyGrid,
    pub latent: LatentGrid,
}

impl ObjectEntry {
    pub fn new(id: &str, class: &str, catalog: &Catalog, codec: &Codec, resolution: usize) -> Result<Self> {
        let canonical = catalog.get(class)?.canonical_grid(resolution)?;
        let latent = codec.encode(&canonical)?;
        Ok(ObjectEntry {
            id: id.to_string(),
            class: class.to_string(),
            canonical,
            latent,
        })
    }
}

/// Queue of a ground-truth scene's objects in its stored (bottom-up) order.
pub fn scene_queue(spec: &SceneSpec, catalog: &Catalog, codec: &Codec) -> Result<Vec<ObjectEntry>> {
    spec.objects
        .iter()
        .map(|o| ObjectEntry::new(&o.id, &o.class, catalog, codec, spec.grid_resolution))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    pub index: usize,
    pub latent: LatentGrid,
    pub occupancy: OccupancyGrid,
    pub history: Vec<LatentGrid>,
}

impl RolloutState {
    pub fn from_occupancy(occupancy: OccupancyGrid, codec: &Codec) -> Result<Self> {
        let occupancy = occupancy.with_frame(Frame::Scene);
        Ok(RolloutState {
            index: 0,
            latent: codec.encode(&occupancy)?,
            occupancy,
            history: Vec::new(),
        })
    }

    pub fn empty_room(resolution: usize, codec: &Codec) -> Result<Self> {
        Self::from_occupancy(OccupancyGrid::empty(resolution, Frame::Scene), codec)
    }
}

/// Places one object; the new latent is re-encoded from its decoding.
pub fn step<G: StepGenerator + ?Sized>(
    generator: &G,
    codec: &Codec,
    state: &RolloutState,
    object: &ObjectEntry,
    c: &ConditionEmbedding,
    seed: u64,
) -> Result<(RolloutState, usize)> {
    if !object.latent.same_shape(&state.latent) {
        return Err(Error::Shape("object latent does not match scene latent".into()));
    }
    let i = state.index;
    let (raw, evals) = generator
        .generate(&state.latent, &object.latent, c, step_seed(seed, i))
        .map_err(|e| e.at_step(i))?;
    let occupancy = codec.decode(&raw, state.occupancy.resolution())?;
    let latent = codec.encode(&occupancy)?;
    let mut history = state.history.clone();
    history.push(raw);
    Ok((
        RolloutState {
            index: i + 1,
            latent,
            occupancy,
            history,
        },
        evals,
    ))
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub state: RolloutState,
    pub placements: Vec<Placement>,
    pub evaluations: usize,
}

/// Folds `step` over the queue, fitting a placement after every step.
pub fn generate<G: StepGenerator + ?Sized>(
    generator: &G,
    codec: &Codec,
    start: RolloutState,
    queue: &[ObjectEntry],
    c: &ConditionEmbedding,
    icp: &IcpConfig,
    seed: u64,
) -> Result<RolloutResult> {
    if queue.is_empty() {
        return Err(Error::Empty("object queue"));
    }
    let mut state = start;
    let mut placements: Vec<Placement> = Vec::with_capacity(queue.len());
    let mut evaluations = 0;
    for object in queue {
        let i = state.index;
        let outcome = step(generator, codec, &state, object, c, seed).and_then(|(next, evals)| {
            let region = grid_difference(&next.occupancy, &state.occupancy)?;
            let p = fit_placement(&object.class, &object.canonical, &region, icp)
                .map_err(|e| e.at_step(i))?;
            Ok((next, evals, p))
        });
        match outcome {
            Ok((next, evals, p)) => {
                state = next;
                evaluations += evals;
                placements.push(p);
            }
            Err(source) => {
                return Err(Error::Rollout {
                    partial: placements,
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(RolloutResult {
        state,
        placements,
        evaluations,
    })
}

/// Generation starting from a partially furnished scene.
pub fn complete<G: StepGenerator + ?Sized>(
    generator: &G,
    codec: &Codec,
    partial: OccupancyGrid,
    remaining: &[ObjectEntry],
    c: &ConditionEmbedding,
    icp: &IcpConfig,
    seed: u64,
) -> Result<RolloutResult> {
    if remaining.is_empty() {
        return Err(Error::Empty("object queue"));
    }
    generate(
        generator,
        codec,
        RolloutState::from_occupancy(partial, codec)?,
        remaining,
        c,
        icp,
        seed,
    )
}

/// Teacher forcing: every step conditions on the ground-truth previous state.
pub fn generate_teacher_forced<G: StepGenerator + ?Sized>(
    generator: &G,
    codec: &Codec,
    ground_truth: &[OccupancyGrid],
    queue: &[ObjectEntry],
    c: &ConditionEmbedding,
    seed: u64,
) -> Result<Vec<LatentGrid>> {
    if ground_truth.len() < queue.len() {
        return Err(Error::Invalid("need one ground-truth context per object".into()));
    }
    queue
        .iter()
        .enumerate()
        .map(|(i, object)| {
            let mut st = RolloutState::from_occupancy(ground_truth[i].clone(), codec)?;
            st.index = i;
            Ok(step(generator, codec, &st, object, c, seed)?.0.latent)
        })
        .collect()
}

/// Removes an object with a model trained on swapped targets.
pub fn edit_remove<G: StepGenerator + ?Sized>(
    editor: &G,
    codec: &Codec,
    scene: &OccupancyGrid,
    object: &ObjectEntry,
    placed: &OccupancyGrid,
    c: &ConditionEmbedding,
    seed: u64,
) -> Result<RolloutState> {
    if placed.intersection_count(scene)? == 0 {
        return Err(Error::Invalid(format!(
            "object `{}` does not overlap the scene",
            object.id
        )));
    }
    let state = RolloutState::from_occupancy(scene.clone(), codec)?;
    Ok(step(editor, codec, &state, object, c, seed)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutObject {
    pub id: String,
    pub class: String,
    pub position: [f64; 3],
    pub yaw: f64,
    pub scale: f64,
    pub order_index: usize,
}

/// One generated scene as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub scene_id: String,
    pub grid_resolution: usize,
    pub instruction: String,
    pub objects: Vec<LayoutObject>,
    /// Wall-clock generation time.
    #[serde(default)]
    pub seconds: f64,
}

impl Layout {
    pub fn new(
        scene_id: &str,
        resolution: usize,
        instruction: &str,
        queue: &[ObjectEntry],
        placements: &[Placement],
    ) -> Self {
        Layout {
            scene_id: scene_id.to_string(),
            grid_resolution: resolution,
            instruction: instruction.to_string(),
            objects: queue
                .iter()
                .zip(placements)
                .enumerate()
                .map(|(i, (q, p))| LayoutObject {
                    id: q.id.clone(),
                    class: q.class.clone(),
                    position: p.translation,
                    yaw: p.yaw,
                    scale: p.scale,
                    order_index: i,
                })
                .collect(),
            seconds: 0.0,
        }
    }

    pub fn from_spec(spec: &SceneSpec) -> Self {
        Layout {
            scene_id: spec.scene_id.clone(),
            grid_resolution: spec.grid_resolution,
            instruction: spec.instruction.clone(),
            objects: spec
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| LayoutObject {
                    id: o.id.clone(),
                    class: o.class.clone(),
                    position: o.placement.translation,
                    yaw: o.placement.yaw,
                    scale: o.placement.scale,
                    order_index: i,
                })
                .collect(),
            seconds: 0.0,
        }
    }

    pub fn placement(&self, object: &LayoutObject) -> Placement {
        Placement {
            class: object.class.clone(),
            translation: object.position,
            yaw: object.yaw,
            scale: object.scale,
            rms_error: 0.0,
        }
    }
}

/// Scores a layout against its ground-truth scene. Objects missing from the
/// layout count as colliding, out of bounds and incoherent.
pub fn score_layout(
    layout: &Layout,
    truth: &SceneSpec,
    catalog: &Catalog,
    th: &Thresholds,
    seconds: f64,
) -> Result<ScoreReport> {
    let ids: std::collections::HashSet<&str> = truth.objects.iter().map(|o| o.id.as_str()).collect();
    let unknown: Vec<&str> = layout
        .objects
        .iter()
        .map(|o| o.id.as_str())
        .filter(|id| !ids.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!(
            "scene {}: ids not in ground truth: {}",
            truth.scene_id,
            unknown.join(", ")
        )));
    }
    let predicted: Vec<(String, Placement)> = layout
        .objects
        .iter()
        .map(|o| (o.id.clone(), layout.placement(o)))
        .collect();
    let gt: Vec<(String, Placement)> = truth
        .objects
        .iter()
        .map(|o| (o.id.clone(), o.placement.clone()))
        .collect();
    let boxes = layout
        .objects
        .iter()
        .map(|o| Ok(catalog.get(&o.class)?.oriented_box(&layout.placement(o))))
        .collect::<Result<Vec<_>>>()?;
    let cf = metrics::collision_free(&boxes, th.tau);
    let ib = metrics::in_boundary(&boxes, &truth.room, th.tau);
    let coh = metrics::coherency(
        &predicted,
        &gt,
        |c| catalog.get(c).map(|k| k.symmetry).unwrap_or(1),
        th,
    )?;
    let mut flags: Vec<ObjectFlags> = layout
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| ObjectFlags {
            id: o.id.clone(),
            colliding: cf.flags[i],
            out_of_bounds: ib.flags[i],
            pos_ok: coh.pos_ok[i],
            rot_ok: coh.rot_ok[i],
        })
        .collect();
    let placed: std::collections::HashSet<&str> = layout.objects.iter().map(|o| o.id.as_str()).collect();
    for o in &truth.objects {
        if !placed.contains(o.id.as_str()) {
            flags.push(ObjectFlags {
                id: o.id.clone(),
                colliding: true,
                out_of_bounds: true,
                pos_ok: false,
                rot_ok: false,
            });
        }
    }
    Ok(ScoreReport::from_flags(flags, seconds))
}

/// Generated layout, its score and cost for one ground-truth scene.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub layout: Layout,
    pub report: ScoreReport,
    /// Network evaluations over all attempted steps.
    pub evaluations: usize,
    /// Generation steps attempted.
    pub steps: usize,
    pub error: Option<String>,
}

/// Counts network evaluations and steps of a wrapped generator.
struct Counted<'a, G: ?Sized> {
    inner: &'a G,
    evaluations: Cell<usize>,
    calls: Cell<usize>,
}

impl<G: StepGenerator + ?Sized> StepGenerator for Counted<'_, G> {
    fn generate(&self, s: &LatentGrid, o: &LatentGrid, c: &ConditionEmbedding, seed: u64) -> Result<(LatentGrid, usize)> {
        self.calls.set(self.calls.get() + 1);
        let (out, n) = self.inner.generate(s, o, c, seed)?;
        self.evaluations.set(self.evaluations.get() + n);
        Ok((out, n))
    }
}

/// Runs a full rollout on a ground-truth scene's object set and scores it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_scene<G: StepGenerator + ?Sized>(
    generator: &G,
    codec: &Codec,
    catalog: &Catalog,
    embedder: &HashEmbedder,
    spec: &SceneSpec,
    icp: &IcpConfig,
    th: &Thresholds,
    seed: u64,
) -> Result<SceneEval> {
    let queue = scene_queue(spec, catalog, codec)?;
    let c = embedder.embed(&spec.instruction)?;
    let start = RolloutState::empty_room(spec.grid_resolution, codec)?;
    let counted = Counted {
        inner: generator,
        evaluations: Cell::new(0),
        calls: Cell::new(0),
    };
    let t0 = Instant::now();
    let (placements, error) = match generate(&counted, codec, start, &queue, &c, icp, seed) {
        Ok(r) => (r.placements, None),
        Err(Error::Rollout { partial, source }) if !source.is_numerical() => (partial, Some(source.to_string())),
        Err(e) => return Err(e),
    };
    let evaluations = counted.evaluations.get();
    let seconds = t0.elapsed().as_secs_f64();
    let mut layout = Layout::new(&spec.scene_id, spec.grid_resolution, &spec.instruction, &queue, &placements);
    layout.seconds = seconds;
    let report = score_layout(&layout, spec, catalog, th, seconds)?;
    Ok(SceneEval {
        steps: counted.calls.get(),
        layout,
        report,
        evaluations,
        error,
    })
}
