//! Patch-pooling codec: encode object grids, decode them and measure IoU.

use lvg::codec::Codec;
use lvg::registration::Placement;
use lvg::scenes::gen_assets;
use lvg::voxel::{iou, voxelize};

fn main() -> lvg::Result<()> {
    let codec = Codec::default();
    let catalog = gen_assets();
    println!("{:<14} {:>8} {:>8}", "class", "canon", "placed");
    for class in &catalog.classes {
        let canonical = class.canonical_grid(16)?;
        let latent = codec.encode(&canonical)?;
        let back = codec.decode(&latent, 16)?;

        let pose = Placement {
            class: class.name.clone(),
            translation: [0.5, 0.5, class.bbox_half()[2] * 0.8],
            yaw: 0.4,
            scale: 0.8,
            rms_error: 0.0,
        };
        let placed = voxelize(&class.placed_shape(&pose), 16)?;
        println!(
            "{:<14} {:>8.3} {:>8.3}",
            class.name,
            iou(&back, &canonical)?,
            iou(&codec.round_trip(&placed)?, &placed)?
        );
    }
    let dims = codec.latent_dims(16)?;
    println!("latent dims {dims:?} x {} channels", codec.channels);
    Ok(())
}
