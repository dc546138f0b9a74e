//! Recover a known pose from a voxelized object with yaw-only ICP.

use lvg::metrics::yaw_error;
use lvg::registration::{fit_placement, IcpConfig, Placement};
use lvg::scenes::gen_assets;
use lvg::voxel::voxelize;

fn main() -> lvg::Result<()> {
    let catalog = gen_assets();
    let g = 64;
    for class in catalog.classes.iter().take(4) {
        let truth = Placement {
            class: class.name.clone(),
            translation: [0.45, 0.55, class.bbox_half()[2] * 0.7],
            yaw: 1.1,
            scale: 0.7,
            rms_error: 0.0,
        };
        let region = voxelize(&class.placed_shape(&truth), g)?.to_sparse();
        let fit = fit_placement(&class.name, &class.canonical_grid(g)?, &region, &IcpConfig::default())?;
        println!(
            "{:<12} yaw err {:5.2} deg  scale {:.3} (true {:.3})  t {:.3?}  rms {:.4}",
            class.name,
            yaw_error(fit.yaw, truth.yaw, class.symmetry).to_degrees(),
            fit.scale,
            truth.scale,
            fit.translation,
            fit.rms_error
        );
    }
    Ok(())
}
