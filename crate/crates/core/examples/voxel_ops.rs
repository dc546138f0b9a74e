//! Rasterize two boxes, combine them and inspect the difference grid.

use lvg::voxel::{grid_difference, iou, surface_points, voxelize, Cuboid, OccupancyGrid};

fn main() -> lvg::Result<()> {
    let g = 16;
    let table = vec![
        Cuboid::axis_aligned([0.2, 0.2, 0.4], [0.6, 0.5, 0.45]),
        Cuboid::axis_aligned([0.22, 0.22, 0.0], [0.27, 0.27, 0.4]),
        Cuboid::axis_aligned([0.53, 0.43, 0.0], [0.58, 0.48, 0.4]),
    ];
    let lamp = vec![Cuboid {
        center: [0.4, 0.35, 0.55],
        half: [0.05, 0.05, 0.1],
        yaw: 0.6,
    }];

    let before = voxelize(&table, g)?;
    let after = before.union(&voxelize(&lamp, g)?)?;
    let added = grid_difference(&after, &before)?;
    println!("table {} voxels, with lamp {}", before.count(), after.count());
    println!("difference: {} voxels, first {:?}", added.len(), added.positions().first());
    println!("iou(before, after) = {:.3}", iou(&before, &after)?);

    let mut rle = Vec::new();
    after.write_rle(&mut rle)?;
    assert_eq!(OccupancyGrid::read_rle(&rle[..])?, after);
    println!("rle: {} bytes for {} cells", rle.len(), g * g * g);

    let cloud = surface_points(&after)?;
    let mut ply = Vec::new();
    cloud.write_ply(&mut ply)?;
    println!("surface: {} points, centroid {:.3?}", cloud.len(), cloud.centroid());
    Ok(())
}
