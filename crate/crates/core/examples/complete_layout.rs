//! Scene completion: the first objects are kept, the rest are generated on
//! top of them and registered.

use std::cell::Cell;

use lvg::codec::LatentGrid;
use lvg::config::RunConfig;
use lvg::net::ConditionEmbedding;
use lvg::rollout::{complete, ObjectEntry, StepGenerator};
use lvg::scenes::{gen_assets, gen_scene};

struct Replay {
    targets: Vec<LatentGrid>,
    next: Cell<usize>,
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
    let spec = (0..)
        .map(|s| gen_scene(s, &cfg.rules(), &catalog))
        .find(|s| s.as_ref().map_or(true, |s| s.objects.len() >= 4))
        .expect("unbounded search")?;
    let keep = 2;
    let partial = spec.occupancy_prefix(&catalog, keep)?;
    let queue = spec.objects[keep..]
        .iter()
        .map(|o| ObjectEntry::new(&o.id, &o.class, &catalog, &codec, spec.grid_resolution))
        .collect::<lvg::Result<Vec<_>>>()?;
    let replay = Replay {
        targets: (keep + 1..=spec.objects.len())
            .map(|k| codec.encode(&spec.occupancy_prefix(&catalog, k)?))
            .collect::<lvg::Result<_>>()?,
        next: Cell::new(0),
    };
    let c = cfg.embedder().embed(&spec.instruction)?;
    let r = complete(&replay, &codec, partial, &queue, &c, &cfg.icp_config(), 0)?;

    println!("{}: \"{}\"", spec.scene_id, spec.instruction);
    for o in &spec.objects[..keep] {
        println!("  kept      {:<8} {:?}", o.class, o.placement.translation);
    }
    for (p, o) in r.placements.iter().zip(&spec.objects[keep..]) {
        println!(
            "  generated {:<8} [{:.3}, {:.3}, {:.3}] truth {:?} rms {:.4}",
            p.class, p.translation[0], p.translation[1], p.translation[2], o.placement.translation, p.rms_error
        );
    }
    Ok(())
}
