//! Writes a small procedural dataset and reads one scene back.
//!
//! `cargo run --example gen_dataset -- /tmp/lvg-data`

use lvg::dataset::{write_dataset, Dataset};
use lvg::scenes::{gen_assets, SceneRules, Split, Splits};

fn main() -> lvg::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("lvg-example-data"));
    let catalog = gen_assets();
    let splits = Splits {
        train: 16,
        val: 2,
        test: 4,
    };
    let manifest = write_dataset(&root, &SceneRules::default(), &splits, &catalog, 1)?;
    println!("{} -> manifest {}", root.display(), manifest.checksum()?);

    let ds = Dataset::open(&root)?;
    let id = &ds.ids(Split::Test)[0];
    let spec = ds.scene(Split::Test, id)?;
    println!("{id} ({}): \"{}\"", spec.room_type, spec.instruction);
    for o in &spec.objects {
        let p = &o.placement;
        println!(
            "  {:<10} at [{:.3}, {:.3}, {:.3}] yaw {:+.2}",
            o.class, p.translation[0], p.translation[1], p.translation[2], p.yaw
        );
    }
    println!("{} occupied voxels", ds.occupancy(Split::Test, id)?.count());
    Ok(())
}
