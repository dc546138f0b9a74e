//! Object-by-object generation with a generator that replays ground truth,
//! so the rollout, registration and scoring can be inspected without a
//! trained model.

use std::cell::Cell;

use lvg::codec::{Codec, LatentGrid};
use lvg::config::RunConfig;
use lvg::net::ConditionEmbedding;
use lvg::rollout::{evaluate_scene, StepGenerator};
use lvg::scenes::{gen_assets, gen_scene, SceneSpec};

struct Replay {
    targets: Vec<LatentGrid>,
    next: Cell<usize>,
}

impl Replay {
    fn new(spec: &SceneSpec, catalog: &lvg::scenes::Catalog, codec: &Codec) -> lvg::Result<Self> {
        let targets = (1..=spec.objects.len())
            .map(|k| codec.encode(&spec.occupancy_prefix(catalog, k)?))
            .collect::<lvg::Result<_>>()?;
        Ok(Replay {
            targets,
            next: Cell::new(0),
        })
    }
}

impl StepGenerator for Replay {
    fn generate(&self, _: &LatentGrid, _: &LatentGrid, _: &ConditionEmbedding, _: u64) -> lvg::Result<(LatentGrid, usize)> {
        let i = self.next.get();
        self.next.set(i + 1);
        Ok((self.targets[i].clone(), 0))
    }
}

fn main() -> lvg::Result<()> {
    let cfg = RunConfig {
        resolution: 64,
        ..RunConfig::default()
    };
    let catalog = gen_assets();
    let codec = cfg.codec()?;
    for seed in 0..4 {
        let spec = gen_scene(seed, &cfg.rules(), &catalog)?;
        let replay = Replay::new(&spec, &catalog, &codec)?;
        let r = evaluate_scene(
            &replay,
            &codec,
            &catalog,
            &cfg.embedder(),
            &spec,
            &cfg.icp_config(),
            &cfg.thresholds(),
            seed,
        )?;
        println!(
            "{} {:<12} {} objects  CF {:5.1}  IB {:5.1}  Pos {:5.1}  Rot {:5.1}  PSA {:5.1}{}",
            spec.scene_id,
            spec.room_type,
            spec.objects.len(),
            r.report.cf,
            r.report.ib,
            r.report.pos,
            r.report.rot,
            r.report.psa,
            r.error.map(|e| format!("  ({e})")).unwrap_or_default()
        );
        for (o, truth) in r.layout.objects.iter().zip(&spec.objects) {
            let d: f64 = o
                .position
                .iter()
                .zip(truth.placement.translation)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            println!("    {:<8} |dp| {d:.3}  yaw {:+.2} vs {:+.2}", o.class, o.yaw, truth.placement.yaw);
        }
    }
    Ok(())
}
