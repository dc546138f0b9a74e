//! Command-line front end: data generation, training stages, distillation,
//! generation, completion, editing and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{write_dataset, Dataset};
use crate::distill::{Distiller, StudentSampler};
use crate::error::{Error, Result};
use crate::metrics::{summarize, ScoreReport};
use crate::net::ModelParams;
use crate::rollout::{
    complete, edit_remove, evaluate_scene, order_objects, score_layout, step_seed, Layout, LayoutObject,
    ObjectEntry, StepGenerator, TeacherSampler,
};
use crate::scenes::{SceneSpec, Split};
use crate::train::{self, Stage, TrainConfig};
use crate::voxel::surface_points;

pub const DATA_ENV: &str = "LVG_DATA_DIR";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Parser)]
#[command(name = "lvg", version, about = "Autoregressive voxel layout generation")]
pub struct Cli {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (dataset root for gen-data).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural train/val/test dataset.
    GenData,
    /// Train one stage: base (text-only), teacher (next state) or edit (removal).
    Train {
        #[arg(long)]
        stage: String,
        /// Base checkpoint the teacher and edit stages start from.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Distill a few-step student from the base and teacher checkpoints.
    Distill {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        no_step_loss: bool,
        #[arg(long)]
        no_holistic_loss: bool,
    },
    /// Generate layouts for the object sets of a dataset split.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        limit: Option<usize>,
        /// Also write the final occupancy surface as PLY.
        #[arg(long)]
        ply: bool,
    },
    /// Place the remaining objects of a scene after keeping its first `keep`.
    Complete {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        keep: usize,
        #[arg(long)]
        ply: bool,
    },
    /// Remove one object from a ground-truth scene with an edit model.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        remove: String,
    },
    /// Score generated layouts against ground truth.
    Eval {
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

/// Resolves the run config: file, then command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Ok(d) = std::env::var(DATA_ENV) {
        cfg.data_dir = d;
    }
    match (&cli.command, &cli.out) {
        (Command::GenData, Some(o)) => cfg.data_dir = o.display().to_string(),
        (_, Some(o)) => cfg.out_dir = o.display().to_string(),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    Ok(())
}

/// Runs a parsed command line; the error maps to the exit code.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    log::info!("resolved config:\n{}", cfg.to_text());
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train { stage, base } => train_stage(&cfg, Stage::parse(&stage)?, base.as_deref()).map(|_| ()),
        Command::Distill {
            base,
            teacher,
            no_step_loss,
            no_holistic_loss,
        } => {
            let mut cfg = cfg;
            cfg.step_loss &= !no_step_loss;
            cfg.holistic_loss &= !no_holistic_loss;
            cfg.validate()?;
            distill(&cfg, &base, &teacher).map(|_| ())
        }
        Command::Generate { model, limit, ply } => generate(&cfg, &model, limit, ply),
        Command::Complete {
            model,
            scene,
            keep,
            ply,
        } => complete_scene(&cfg, &model, &scene, keep, ply),
        Command::Edit { model, scene, remove } => edit(&cfg, &model, &scene, &remove),
        Command::Eval { layouts, split } => eval(&cfg, &layouts, Split::parse(&split)?).map(|_| ()),
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let root = PathBuf::from(&cfg.data_dir);
    let catalog = crate::scenes::gen_assets();
    let manifest = write_dataset(&root, &cfg.rules(), &cfg.splits(), &catalog, cfg.jobs)?;
    write_resolved(&root, cfg)?;
    for f in &manifest.failures {
        log::warn!("{} seed {}: {}", f.split.name(), f.seed, f.error);
    }
    log::info!("dataset at {} (manifest {})", root.display(), manifest.checksum()?);
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::open(Path::new(&cfg.data_dir))?;
    if ds.manifest.resolution != cfg.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from grid.resolution {}",
            ds.manifest.resolution, cfg.resolution
        )));
    }
    Ok(ds)
}

fn checkpoint_extra(cfg: &RunConfig, kind: &str) -> Vec<(String, String)> {
    vec![
        ("kind".into(), kind.into()),
        ("grid.resolution".into(), cfg.resolution.to_string()),
        ("codec.patch".into(), cfg.patch.to_string()),
        ("text.vocab".into(), cfg.vocab.to_string()),
        ("text.max_tokens".into(), cfg.max_tokens.to_string()),
    ]
}

/// Loads a checkpoint and checks it against the active config.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<(ModelParams, String)> {
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", path.display())));
    }
    let (params, extra) = ModelParams::load(path)?;
    for (k, want) in checkpoint_extra(cfg, "") {
        if k == "kind" {
            continue;
        }
        if let Some(have) = extra.get(&k) {
            if *have != want {
                return Err(Error::Config(format!("checkpoint {k} = {have}, config has {want}")));
            }
        }
    }
    if params.config.channels != cfg.channels || params.config.cond_dim != cfg.cond_dim {
        return Err(Error::Config("checkpoint channels/cond_dim differ from config".into()));
    }
    let kind = extra.get("kind").cloned().unwrap_or_default();
    Ok((params, kind))
}

pub fn train_stage(cfg: &RunConfig, stage: Stage, base: Option<&Path>) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out_dir);
    let ds = open_dataset(cfg)?;
    let params = match stage {
        Stage::Base => ModelParams::new(cfg.model_config(), DType::F32)?,
        Stage::Teacher | Stage::Edit => {
            let path = base.ok_or_else(|| {
                Error::Data(format!("stage {} needs a base checkpoint (--base)", stage.name()))
            })?;
            let (p, kind) = load_model(path, cfg)?;
            if kind != "base" {
                return Err(Error::Data(format!("{} is a `{kind}` checkpoint, not base", path.display())));
            }
            p
        }
    };
    let specs = ds.scenes(Split::Train)?;
    let items = train::stage_items(&specs, stage, &ds.catalog, &cfg.codec()?, &cfg.embedder())?;
    let tc = TrainConfig {
        steps: cfg.train_steps,
        batch: cfg.batch,
        lr: if stage == Stage::Base { cfg.lr_base } else { cfg.lr_teacher },
        p_drop: cfg.drop,
        seed: cfg.seed,
    };
    write_resolved(&out, cfg)?;
    let mut csv = fs::File::create(out.join(format!("{}_loss.csv", stage.name())))?;
    writeln!(csv, "{}", train::TRAIN_CSV_HEADER)?;
    let mut io_err = None;
    let summary = train::train(&params, &items, &tc, |r| {
        if let Err(e) = writeln!(csv, "{}", r.csv_row()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log::info!(
        "{}: {} condition drops over {} samples",
        stage.name(),
        summary.dropped,
        summary.samples
    );
    let path = out.join(format!("{}.ckpt", stage.name()));
    params.save(&path, &checkpoint_extra(cfg, stage.name()))?;
    Ok(path)
}

pub fn distill(cfg: &RunConfig, base: &Path, teacher: &Path) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out_dir);
    let ds = open_dataset(cfg)?;
    let (holistic, hk) = load_model(base, cfg)?;
    let (stepwise, tk) = load_model(teacher, cfg)?;
    if hk != "base" || tk != "teacher" {
        return Err(Error::Data(format!("expected base and teacher checkpoints, got `{hk}` and `{tk}`")));
    }
    let sums = (holistic.checksum()?, stepwise.checksum()?);
    let specs = ds.scenes(Split::Train)?;
    let scenes = train::distill_scenes(&specs, &ds.catalog, &cfg.codec()?, &cfg.embedder())?;
    let mut distiller = Distiller::new(&holistic, &stepwise, cfg.distill_config()?)?;
    write_resolved(&out, cfg)?;
    let mut csv = fs::File::create(out.join("distill_log.csv"))?;
    writeln!(csv, "{}", train::DISTILL_CSV_HEADER)?;
    let mut io_err = None;
    train::distill(&mut distiller, &scenes, cfg.distill_iterations, |k, log, ms| {
        if let Err(e) = writeln!(csv, "{}", train::distill_csv_row(k, log, ms)) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let mut critic = fs::File::create(out.join("critic_log.csv"))?;
    writeln!(critic, "step,update,critic_loss")?;
    for (s, u, l) in &distiller.critic_log {
        writeln!(critic, "{s},{u},{l}")?;
    }
    if sums != (holistic.checksum()?, stepwise.checksum()?) {
        return Err(Error::Invalid("teacher weights changed during distillation".into()));
    }
    log::info!("counters: {:?}", distiller.counters);
    let mut extra = checkpoint_extra(cfg, "student");
    extra.push(("distill.T".into(), cfg.distill_steps.to_string()));
    extra.push(("distill.renoise".into(), cfg.renoise.clone()));
    let path = out.join("student.ckpt");
    distiller.student.save(&path, &extra)?;
    Ok(path)
}

/// Sampler matching a checkpoint kind: few-step student or CFG teacher.
pub fn generator<'a>(params: &'a ModelParams, kind: &str, cfg: &RunConfig) -> Result<Box<dyn StepGenerator + 'a>> {
    Ok(if kind == "student" {
        Box::new(StudentSampler {
            model: params,
            schedule: cfg.distill_config()?.schedule()?,
            renoise: cfg.renoise()?,
        })
    } else {
        Box::new(TeacherSampler {
            model: params,
            cfg_weight: cfg.cfg_weight,
            steps: cfg.num_steps,
        })
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn write_ply(path: &Path, occupancy: &crate::voxel::OccupancyGrid) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    surface_points(occupancy)?.write_ply(fs::File::create(path)?)
}

fn scene_seed(cfg: &RunConfig, spec: &SceneSpec) -> u64 {
    step_seed(cfg.seed, spec.seed as usize)
}

pub fn generate(cfg: &RunConfig, args: &ModelArgs, limit: Option<usize>, ply: bool) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    let ds = open_dataset(cfg)?;
    let (params, kind) = load_model(&args.model, cfg)?;
    let gen = generator(&params, &kind, cfg)?;
    let codec = cfg.codec()?;
    let embedder = cfg.embedder();
    let split = Split::parse(&args.split)?;
    write_resolved(&out, cfg)?;
    let mut csv = fs::File::create(out.join("generation.csv"))?;
    writeln!(csv, "scene_id,objects,placed,evaluations,seconds,error")?;
    let ids = ds.ids(split);
    for id in ids.iter().take(limit.unwrap_or(ids.len())) {
        let spec = ds.scene(split, id)?;
        let r = evaluate_scene(
            gen.as_ref(),
            &codec,
            &ds.catalog,
            &embedder,
            &spec,
            &cfg.icp_config(),
            &cfg.thresholds(),
            scene_seed(cfg, &spec),
        )
        .map_err(|e| e.in_scene(id))?;
        write_json(&out.join("layouts").join(format!("{id}.json")), &r.layout)?;
        if ply {
            let mut occ = crate::voxel::OccupancyGrid::empty(spec.grid_resolution, crate::voxel::Frame::Scene);
            for o in &r.layout.objects {
                let shape = ds.catalog.get(&o.class)?.placed_shape(&r.layout.placement(o));
                if let Ok(g) = crate::voxel::voxelize(&shape, spec.grid_resolution) {
                    occ = occ.union(&g)?;
                }
            }
            write_ply(&out.join("ply").join(format!("{id}.ply")), &occ)?;
        }
        writeln!(
            csv,
            "{id},{},{},{},{:.4},{}",
            spec.objects.len(),
            r.layout.objects.len(),
            r.evaluations,
            r.layout.seconds,
            r.error.unwrap_or_default().replace(',', ";")
        )?;
    }
    Ok(())
}

pub fn complete_scene(cfg: &RunConfig, args: &ModelArgs, id: &str, keep: usize, ply: bool) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    let ds = open_dataset(cfg)?;
    let split = Split::parse(&args.split)?;
    let spec = ds.scene(split, id)?;
    if keep >= spec.objects.len() {
        return Err(Error::Config(format!(
            "keep {keep} leaves nothing to place in a {}-object scene",
            spec.objects.len()
        )));
    }
    let (params, kind) = load_model(&args.model, cfg)?;
    let gen = generator(&params, &kind, cfg)?;
    let codec = cfg.codec()?;
    let partial = spec.occupancy_prefix(&ds.catalog, keep)?;
    let rest = &spec.objects[keep..];
    let classes: Vec<&str> = rest.iter().map(|o| o.class.as_str()).collect();
    let order = order_objects(&classes, cfg.order_policy()?, &ds.catalog, &spec.instruction)?;
    let queue = order
        .iter()
        .map(|&i| ObjectEntry::new(&rest[i].id, &rest[i].class, &ds.catalog, &codec, spec.grid_resolution))
        .collect::<Result<Vec<_>>>()?;
    let c = cfg.embedder().embed(&spec.instruction)?;
    let t0 = Instant::now();
    let result = complete(gen.as_ref(), &codec, partial, &queue, &c, &cfg.icp_config(), scene_seed(cfg, &spec))
        .map_err(|e| e.in_scene(id))?;
    let mut layout = Layout::from_spec(&spec);
    layout.objects.truncate(keep);
    let generated = Layout::new(id, spec.grid_resolution, &spec.instruction, &queue, &result.placements);
    layout.objects.extend(generated.objects.into_iter().map(|o| LayoutObject {
        order_index: o.order_index + keep,
        ..o
    }));
    layout.seconds = t0.elapsed().as_secs_f64();
    write_resolved(&out, cfg)?;
    write_json(&out.join("layouts").join(format!("{id}.json")), &layout)?;
    if ply {
        write_ply(&out.join("ply").join(format!("{id}.ply")), &result.state.occupancy)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct EditReport<'a> {
    scene_id: &'a str,
    removed: &'a str,
    voxels_before: usize,
    voxels_after: usize,
    object_voxels: usize,
    object_voxels_left: usize,
    layout: Layout,
}

pub fn edit(cfg: &RunConfig, args: &ModelArgs, id: &str, remove: &str) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    let ds = open_dataset(cfg)?;
    let split = Split::parse(&args.split)?;
    let spec = ds.scene(split, id)?;
    let index = spec
        .objects
        .iter()
        .position(|o| o.id == remove)
        .ok_or_else(|| Error::Data(format!("scene {id} has no object `{remove}`")))?;
    let (params, kind) = load_model(&args.model, cfg)?;
    if kind != "edit" {
        log::warn!("{} is a `{kind}` checkpoint; removal expects an edit model", args.model.display());
    }
    let gen = generator(&params, &kind, cfg)?;
    let codec = cfg.codec()?;
    let obj = &spec.objects[index];
    let entry = ObjectEntry::new(&obj.id, &obj.class, &ds.catalog, &codec, spec.grid_resolution)?;
    let scene = spec.occupancy(&ds.catalog)?;
    let placed = spec.object_grid(&ds.catalog, index)?;
    let c = cfg.embedder().embed(&spec.instruction)?;
    let state = edit_remove(gen.as_ref(), &codec, &scene, &entry, &placed, &c, scene_seed(cfg, &spec))
        .map_err(|e| e.in_scene(id))?;
    let mut layout = Layout::from_spec(&spec);
    layout.objects.remove(index);
    let report = EditReport {
        scene_id: id,
        removed: remove,
        voxels_before: scene.count(),
        voxels_after: state.occupancy.count(),
        object_voxels: placed.count(),
        object_voxels_left: placed.intersection_count(&state.occupancy)?,
        layout,
    };
    write_resolved(&out, cfg)?;
    write_json(&out.join("edits").join(format!("{id}.json")), &report)?;
    write_ply(&out.join("ply").join(format!("{id}_edit.ply")), &state.occupancy)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub split: String,
    pub min_objects: usize,
    pub max_objects: usize,
    pub skipped: usize,
    pub seed: u64,
    pub summary: crate::metrics::Summary,
}

/// Scores every layout in `dir` against its ground-truth scene.
pub fn eval(cfg: &RunConfig, dir: &Path, split: Split) -> Result<EvalSummary> {
    let out = PathBuf::from(&cfg.out_dir);
    let ds = open_dataset(cfg)?;
    let mut layouts = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let layout: Layout = serde_json::from_slice(&fs::read(&path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        layouts.insert(layout.scene_id.clone(), layout);
    }
    if layouts.is_empty() {
        return Err(Error::Data(format!("no layouts in {}", dir.display())));
    }
    let known: std::collections::HashSet<&String> = ds.ids(split).iter().collect();
    let missing: Vec<&String> = layouts.keys().filter(|id| !known.contains(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} layout ids not in split {}: {}",
            missing.len(),
            split.name(),
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let specs = layouts
        .keys()
        .map(|id| ds.scene(split, id))
        .collect::<Result<Vec<_>>>()?;
    let (kept, skipped): (Vec<&SceneSpec>, Vec<&SceneSpec>) = specs.iter().partition(|s| {
        (cfg.eval_min_objects..=cfg.eval_max_objects).contains(&s.objects.len())
    });
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no scenes with {}..={} objects among {} layouts",
            cfg.eval_min_objects,
            cfg.eval_max_objects,
            specs.len()
        )));
    }
    let th = cfg.thresholds();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let reports: Vec<ScoreReport> = pool.install(|| {
        kept.par_iter()
            .map(|spec| {
                let l = &layouts[&spec.scene_id];
                score_layout(l, spec, &ds.catalog, &th, l.seconds)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_resolved(&out, cfg)?;
    let mut csv = fs::File::create(out.join("scores.csv"))?;
    writeln!(csv, "scene_id,cf,ib,pos,rot,psa,seconds")?;
    for (spec, r) in kept.iter().zip(&reports) {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            spec.scene_id, r.cf, r.ib, r.pos, r.rot, r.psa, r.seconds
        )?;
    }
    let summary = EvalSummary {
        split: split.name().into(),
        min_objects: cfg.eval_min_objects,
        max_objects: cfg.eval_max_objects,
        skipped: skipped.len(),
        seed: cfg.seed,
        summary: summarize(&reports, cfg.bootstrap, cfg.seed)?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Parses arguments, runs and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
