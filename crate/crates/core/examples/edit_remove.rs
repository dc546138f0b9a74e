//! Object removal through the editing interface, driven by a generator that
//! returns the scene without the object.

use lvg::codec::LatentGrid;
use lvg::config::RunConfig;
use lvg::net::ConditionEmbedding;
use lvg::rollout::{edit_remove, ObjectEntry, StepGenerator};
use lvg::scenes::{gen_assets, gen_scene};

struct Fixed(LatentGrid);

impl StepGenerator for Fixed {
    fn generate(&self, _: &LatentGrid, _: &LatentGrid, _: &ConditionEmbedding, _: u64) -> lvg::Result<(LatentGrid, usize)> {
        Ok((self.0.clone(), 0))
    }
}

fn main() -> lvg::Result<()> {
    let cfg = RunConfig::default();
    let catalog = gen_assets();
    let codec = cfg.codec()?;
    let spec = gen_scene(3, &cfg.rules(), &catalog)?;
    let last = spec.objects.len() - 1;
    let victim = &spec.objects[last];
    let scene = spec.occupancy(&catalog)?;
    let placed = spec.object_grid(&catalog, last)?;
    let without = spec.occupancy_prefix(&catalog, last)?;

    let entry = ObjectEntry::new(&victim.id, &victim.class, &catalog, &codec, spec.grid_resolution)?;
    let c = cfg.embedder().embed(&spec.instruction)?;
    let state = edit_remove(&Fixed(codec.encode(&without)?), &codec, &scene, &entry, &placed, &c, 0)?;
    println!("removing {} ({}) from {}", victim.id, victim.class, spec.scene_id);
    println!(
        "voxels {} -> {}, object {} voxels, {} left",
        scene.count(),
        state.occupancy.count(),
        placed.count(),
        placed.intersection_count(&state.occupancy)?
    );

    // an object that is not in the scene is rejected
    let mut elsewhere = lvg::voxel::OccupancyGrid::empty(spec.grid_resolution, lvg::voxel::Frame::Scene);
    let r = spec.grid_resolution - 1;
    elsewhere.set(r, r, r, true);
    if let Err(e) = edit_remove(&Fixed(codec.encode(&without)?), &codec, &scene, &entry, &elsewhere, &c, 0) {
        println!("rejected: {e}");
    }
    Ok(())
}
