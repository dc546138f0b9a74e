//! Procedural ground-truth scenes: an object catalog of compound cuboids, a
//! relational room generator with rejection sampling, and teacher-forcing pairs.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, OrientedBox, Room};
use crate::registration::Placement;
use crate::voxel::{voxelize, Cuboid, Frame, OccupancyGrid};

/// How an object class rests in a room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Support {
    Floor,
    Surface,
}

/// A furniture class authored in the canonical `[0, 1]^3` frame.
///
/// Templates are centered at `(0.5, 0.5, 0.5)` and face `+x`. All coordinates
/// are multiples of 1/8 so canonical grids align with 2-voxel patches at G=16.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    /// `(min, max)` corners of each axis-aligned sub-cuboid.
    pub template: Vec<([f64; 3], [f64; 3])>,
    pub support: Support,
    /// Height used by the bottom-up ordering policy.
    pub support_height: f64,
    /// Number of yaw rotations in `[0, 2pi)` mapping the shape onto itself.
    pub symmetry: u8,
    pub scale_range: (f64, f64),
}

impl ObjectClass {
    pub fn cuboids(&self) -> Vec<Cuboid> {
        self.template
            .iter()
            .map(|&(lo, hi)| Cuboid::axis_aligned(lo, hi))
            .collect()
    }

    /// Half-extents of the template bounding box in canonical units.
    pub fn bbox_half(&self) -> [f64; 3] {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (a, b) in &self.template {
            for k in 0..3 {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        [
            0.5 * (hi[0] - lo[0]),
            0.5 * (hi[1] - lo[1]),
            0.5 * (hi[2] - lo[2]),
        ]
    }

    pub fn canonical_grid(&self, resolution: usize) -> Result<OccupancyGrid> {
        Ok(voxelize(&self.cuboids(), resolution)?.with_frame(Frame::Canonical))
    }

    /// World-space cuboids of the template under a placement.
    pub fn placed_shape(&self, placement: &Placement) -> Vec<Cuboid> {
        let s = placement.scale;
        let (sin, cos) = placement.yaw.sin_cos();
        self.cuboids()
            .into_iter()
            .map(|c| {
                let lx = s * (c.center[0] - 0.5);
                let ly = s * (c.center[1] - 0.5);
                let lz = s * (c.center[2] - 0.5);
                Cuboid {
                    center: [
                        placement.translation[0] + cos * lx - sin * ly,
                        placement.translation[1] + sin * lx + cos * ly,
                        placement.translation[2] + lz,
                    ],
                    half: c.half.map(|h| h * s),
                    yaw: placement.yaw,
                }
            })
            .collect()
    }

    pub fn oriented_box(&self, placement: &Placement) -> OrientedBox {
        OrientedBox {
            center: placement.translation,
            half: self.bbox_half().map(|h| h * placement.scale),
            yaw: placement.yaw,
        }
    }
}

/// The immutable class table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub classes: Vec<ObjectClass>,
}

impl Catalog {
    pub fn get(&self, name: &str) -> Result<&ObjectClass> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }
}

const E: f64 = 0.125;

fn class(
    name: &str,
    template: Vec<([f64; 3], [f64; 3])>,
    support: Support,
    symmetry: u8,
    scale_range: (f64, f64),
) -> ObjectClass {
    ObjectClass {
        name: name.to_string(),
        template,
        support,
        support_height: match support {
            Support::Floor => 0.0,
            Support::Surface => 0.5,
        },
        symmetry,
        scale_range,
    }
}

/// The fixed furniture catalog.
pub fn gen_assets() -> Catalog {
    let legs = |x0: f64, x1: f64, y0: f64, y1: f64, z1: f64| {
        let mut v = Vec::new();
        for (xa, xb) in [(x0, x0 + E), (x1 - E, x1)] {
            for (ya, yb) in [(y0, y0 + E), (y1 - E, y1)] {
                v.push(([xa, ya, 0.25_f64.min(z1 - E)], [xb, yb, z1]));
            }
        }
        v
    };
    let mut table = legs(E, 1.0 - E, E, 1.0 - E, 5.0 * E);
    for leg in &mut table {
        leg.0[2] = 2.0 * E;
    }
    table.push(([E, E, 5.0 * E], [1.0 - E, 1.0 - E, 6.0 * E]));

    let mut chair = Vec::new();
    for (xa, xb) in [(2.0 * E, 3.0 * E), (5.0 * E, 6.0 * E)] {
        for (ya, yb) in [(2.0 * E, 3.0 * E), (5.0 * E, 6.0 * E)] {
            chair.push(([xa, ya, 0.0], [xb, yb, 3.0 * E]));
        }
    }
    chair.push(([2.0 * E, 2.0 * E, 3.0 * E], [6.0 * E, 6.0 * E, 4.0 * E]));
    chair.push(([2.0 * E, 2.0 * E, 4.0 * E], [3.0 * E, 6.0 * E, 1.0]));

    let classes = vec![
        class(
            "bed",
            vec![
                ([0.0, E, 2.0 * E], [1.0, 7.0 * E, 4.0 * E]),
                ([0.0, E, 4.0 * E], [E, 7.0 * E, 6.0 * E]),
            ],
            Support::Floor,
            1,
            (0.45, 0.55),
        ),
        class("table", table, Support::Floor, 4, (0.3, 0.4)),
        class("chair", chair, Support::Floor, 1, (0.3, 0.36)),
        class(
            "sofa",
            vec![
                ([2.0 * E, 0.0, 2.0 * E], [6.0 * E, 1.0, 4.0 * E]),
                ([2.0 * E, 0.0, 4.0 * E], [3.0 * E, 1.0, 6.0 * E]),
                ([3.0 * E, 0.0, 4.0 * E], [6.0 * E, E, 5.0 * E]),
                ([3.0 * E, 7.0 * E, 4.0 * E], [6.0 * E, 1.0, 5.0 * E]),
            ],
            Support::Floor,
            1,
            (0.4, 0.5),
        ),
        class(
            "shelf",
            vec![
                ([3.0 * E, E, 0.0], [4.0 * E, 7.0 * E, 1.0]),
                ([4.0 * E, E, 0.0], [5.0 * E, 2.0 * E, 1.0]),
                ([4.0 * E, 6.0 * E, 0.0], [5.0 * E, 7.0 * E, 1.0]),
                ([4.0 * E, 2.0 * E, 0.0], [5.0 * E, 6.0 * E, E]),
                ([4.0 * E, 2.0 * E, 3.0 * E], [5.0 * E, 6.0 * E, 4.0 * E]),
                ([4.0 * E, 2.0 * E, 7.0 * E], [5.0 * E, 6.0 * E, 1.0]),
            ],
            Support::Floor,
            1,
            (0.4, 0.5),
        ),
        class(
            "lamp",
            vec![
                ([2.0 * E, 2.0 * E, 0.0], [6.0 * E, 6.0 * E, E]),
                ([3.0 * E, 3.0 * E, E], [5.0 * E, 5.0 * E, 6.0 * E]),
                ([2.0 * E, 2.0 * E, 6.0 * E], [6.0 * E, 6.0 * E, 1.0]),
            ],
            Support::Surface,
            4,
            (0.16, 0.2),
        ),
        class(
            "desk",
            vec![
                ([2.0 * E, 0.0, 5.0 * E], [6.0 * E, 1.0, 6.0 * E]),
                ([2.0 * E, 0.0, 2.0 * E], [6.0 * E, E, 5.0 * E]),
                ([2.0 * E, 7.0 * E, 2.0 * E], [6.0 * E, 1.0, 5.0 * E]),
            ],
            Support::Floor,
            2,
            (0.4, 0.5),
        ),
        class(
            "rug",
            vec![([0.0, E, 3.0 * E], [1.0, 7.0 * E, 5.0 * E])],
            Support::Floor,
            2,
            (0.4, 0.5),
        ),
    ];
    Catalog { classes }
}

/// Spatial relation of an object to the room or to an anchor object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AgainstWall,
    Center,
    Around,
    OnTopOf,
    Facing,
    Beside,
}

impl Relation {
    fn phrase(self) -> &'static str {
        match self {
            Relation::AgainstWall => "against the wall",
            Relation::Center => "in the middle of the room",
            Relation::Around => "around the",
            Relation::OnTopOf => "on top of the",
            Relation::Facing => "facing the",
            Relation::Beside => "beside the",
        }
    }

    fn needs_anchor(self) -> bool {
        matches!(
            self,
            Relation::Around | Relation::OnTopOf | Relation::Facing | Relation::Beside
        )
    }
}

/// One ground-truth object of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub class: String,
    pub placement: Placement,
}

/// A procedurally generated ground-truth scene. Objects are stored bottom-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub room_type: String,
    pub room: Room,
    pub instruction: String,
    pub seed: u64,
    pub grid_resolution: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn boxes(&self, catalog: &Catalog) -> Result<Vec<OrientedBox>> {
        self.objects
            .iter()
            .map(|o| Ok(catalog.get(&o.class)?.oriented_box(&o.placement)))
            .collect()
    }

    /// Voxelization of a single placed object at the scene resolution.
    pub fn object_grid(&self, catalog: &Catalog, index: usize) -> Result<OccupancyGrid> {
        let o = &self.objects[index];
        voxelize(
            &catalog.get(&o.class)?.placed_shape(&o.placement),
            self.grid_resolution,
        )
    }

    /// Occupancy of the first `count` objects.
    pub fn occupancy_prefix(&self, catalog: &Catalog, count: usize) -> Result<OccupancyGrid> {
        let mut shape = Vec::new();
        for o in &self.objects[..count] {
            shape.extend(catalog.get(&o.class)?.placed_shape(&o.placement));
        }
        voxelize(&shape, self.grid_resolution)
    }

    pub fn occupancy(&self, catalog: &Catalog) -> Result<OccupancyGrid> {
        self.occupancy_prefix(catalog, self.objects.len())
    }
}

/// Knobs of the procedural generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRules {
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub attempt_budget: usize,
}

impl Default for SceneRules {
    fn default() -> Self {
        SceneRules {
            resolution: 16,
            min_objects: 3,
            max_objects: 10,
            attempt_budget: 1000,
        }
    }
}

struct RoomType {
    name: &'static str,
    room: ([f64; 2], [f64; 2]),
    anchor: (&'static str, Relation),
    extras: &'static [(&'static str, Relation, &'static str)],
}

const ROOM_TYPES: &[RoomType] = &[
    RoomType {
        name: "bedroom",
        room: ([0.0625, 0.0625], [0.9375, 0.9375]),
        anchor: ("bed", Relation::AgainstWall),
        extras: &[
            ("table", Relation::Beside, "bed"),
            ("lamp", Relation::OnTopOf, "table"),
            ("shelf", Relation::AgainstWall, ""),
            ("rug", Relation::Center, ""),
            ("desk", Relation::AgainstWall, ""),
            ("chair", Relation::Facing, "desk"),
        ],
    },
    RoomType {
        name: "living room",
        room: ([0.0, 0.0], [1.0, 1.0]),
        anchor: ("sofa", Relation::AgainstWall),
        extras: &[
            ("table", Relation::Facing, "sofa"),
            ("chair", Relation::Around, "table"),
            ("lamp", Relation::OnTopOf, "table"),
            ("shelf", Relation::AgainstWall, ""),
            ("rug", Relation::Center, ""),
            ("sofa", Relation::AgainstWall, ""),
        ],
    },
    RoomType {
        name: "office",
        room: ([0.125, 0.0], [0.875, 1.0]),
        anchor: ("desk", Relation::AgainstWall),
        extras: &[
            ("chair", Relation::Facing, "desk"),
            ("lamp", Relation::OnTopOf, "desk"),
            ("shelf", Relation::AgainstWall, ""),
            ("table", Relation::Center, ""),
            ("chair", Relation::Around, "table"),
            ("desk", Relation::AgainstWall, ""),
        ],
    },
    RoomType {
        name: "dining room",
        room: ([0.0, 0.125], [1.0, 0.875]),
        anchor: ("table", Relation::Center),
        extras: &[
            ("chair", Relation::Around, "table"),
            ("chair", Relation::Around, "table"),
            ("lamp", Relation::OnTopOf, "table"),
            ("shelf", Relation::AgainstWall, ""),
            ("sofa", Relation::AgainstWall, ""),
        ],
    },
    RoomType {
        name: "study",
        room: ([0.125, 0.125], [0.875, 0.875]),
        anchor: ("desk", Relation::AgainstWall),
        extras: &[
            ("chair", Relation::Facing, "desk"),
            ("shelf", Relation::AgainstWall, ""),
            ("lamp", Relation::OnTopOf, "desk"),
            ("sofa", Relation::AgainstWall, ""),
            ("rug", Relation::Center, ""),
        ],
    },
];

/// Names of the room types the generator can emit.
pub fn room_types() -> impl Iterator<Item = &'static str> {
    ROOM_TYPES.iter().map(|r| r.name)
}

struct Draft {
    class: String,
    placement: Placement,
    relation: Relation,
    anchor: Option<usize>,
    grid: OccupancyGrid,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

fn sample_placement(
    rng: &mut ChaCha8Rng,
    class: &ObjectClass,
    relation: Relation,
    anchor: Option<(&ObjectClass, &Placement)>,
    room: &Room,
) -> Option<Placement> {
    let s = rng.random_range(class.scale_range.0..=class.scale_range.1);
    let half = class.bbox_half().map(|h| h * s);
    let floor_z = half[2];
    let (yaw, x, y, z) = match relation {
        Relation::AgainstWall => {
            let gap = rng.random_range(0.0..0.02);
            let wall = rng.random_range(0..4);
            let (yaw, x, y) = match wall {
                0 => (
                    0.0,
                    room.min[0] + half[0] + gap,
                    rng.random_range(room.min[1] + half[1]..=room.max[1] - half[1]),
                ),
                1 => (
                    PI,
                    room.max[0] - half[0] - gap,
                    rng.random_range(room.min[1] + half[1]..=room.max[1] - half[1]),
                ),
                2 => (
                    FRAC_PI_2,
                    rng.random_range(room.min[0] + half[1]..=room.max[0] - half[1]),
                    room.min[1] + half[0] + gap,
                ),
                _ => (
                    -FRAC_PI_2,
                    rng.random_range(room.min[0] + half[1]..=room.max[0] - half[1]),
                    room.max[1] - half[0] - gap,
                ),
            };
            (yaw, x, y, floor_z)
        }
        Relation::Center => {
            let cx = 0.5 * (room.min[0] + room.max[0]);
            let cy = 0.5 * (room.min[1] + room.max[1]);
            let yaw = if rng.random_bool(0.5) { 0.0 } else { FRAC_PI_2 };
            (
                yaw,
                cx + rng.random_range(-0.1..0.1),
                cy + rng.random_range(-0.1..0.1),
                floor_z,
            )
        }
        Relation::Around => {
            let (ac, ap) = anchor?;
            let ah = ac.bbox_half().map(|h| h * ap.scale);
            let phi = rng.random_range(0.0..2.0 * PI);
            let r = ah[0].max(ah[1]) + half[0] + rng.random_range(0.0..0.03);
            let x = ap.translation[0] + r * phi.cos();
            let y = ap.translation[1] + r * phi.sin();
            (wrap_angle(phi + PI), x, y, floor_z)
        }
        Relation::Facing => {
            let (ac, ap) = anchor?;
            let ah = ac.bbox_half().map(|h| h * ap.scale);
            let d = ah[0] + half[0] + rng.random_range(0.03..0.15);
            let (sin, cos) = ap.yaw.sin_cos();
            let lateral = rng.random_range(-0.5..=0.5) * ah[1];
            let x = ap.translation[0] + cos * d - sin * lateral;
            let y = ap.translation[1] + sin * d + cos * lateral;
            (wrap_angle(ap.yaw + PI), x, y, floor_z)
        }
        Relation::Beside => {
            let (ac, ap) = anchor?;
            let ah = ac.bbox_half().map(|h| h * ap.scale);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let d = ah[1] + half[1] + rng.random_range(0.01..0.05);
            let back = -ah[0] + half[0];
            let (sin, cos) = ap.yaw.sin_cos();
            let x = ap.translation[0] + cos * back - sin * side * d;
            let y = ap.translation[1] + sin * back + cos * side * d;
            (ap.yaw, x, y, floor_z)
        }
        Relation::OnTopOf => {
            let (ac, ap) = anchor?;
            let ah = ac.bbox_half().map(|h| h * ap.scale);
            let rx = (ah[0] - half[0]).max(0.0);
            let ry = (ah[1] - half[1]).max(0.0);
            let lx = rng.random_range(-rx..=rx);
            let ly = rng.random_range(-ry..=ry);
            let (sin, cos) = ap.yaw.sin_cos();
            let top = ap.translation[2] + ah[2];
            (
                wrap_angle(ap.yaw + rng.random_range(0..4) as f64 * FRAC_PI_2),
                ap.translation[0] + cos * lx - sin * ly,
                ap.translation[1] + sin * lx + cos * ly,
                top + half[2],
            )
        }
    };
    Some(Placement {
        class: class.name.clone(),
        translation: [x, y, z],
        yaw: wrap_angle(yaw),
        scale: s,
        rms_error: 0.0,
    })
}

/// Samples a collision-free, in-boundary scene with relational placements.
///
/// Every object is also voxel-disjoint from the others at `rules.resolution`,
/// so consecutive cumulative occupancies differ by exactly one object.
pub fn gen_scene(seed: u64, rules: &SceneRules, catalog: &Catalog) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;
    'scene: loop {
        let room_type = &ROOM_TYPES[rng.random_range(0..ROOM_TYPES.len())];
        let room = Room {
            min: [room_type.room.0[0], room_type.room.0[1], 0.0],
            max: [room_type.room.1[0], room_type.room.1[1], 1.0],
        };
        let n = rng.random_range(rules.min_objects..=rules.max_objects);
        let mut drafts: Vec<Draft> = Vec::new();
        let mut plan = vec![(room_type.anchor.0, room_type.anchor.1, "")];
        while plan.len() < n {
            let &(c, r, a) = room_type.extras.choose(&mut rng).expect("non-empty extras");
            plan.push((c, r, a));
        }
        for (class_name, relation, anchor_name) in plan {
            let class = catalog.get(class_name)?;
            let anchors: Vec<usize> = drafts
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class == anchor_name)
                .map(|(i, _)| i)
                .collect();
            let (relation, anchor) = if relation.needs_anchor() {
                match anchors.choose(&mut rng) {
                    Some(&i) => (relation, Some(i)),
                    None if class.support == Support::Surface => continue,
                    None => (Relation::AgainstWall, None),
                }
            } else {
                (relation, None)
            };
            let mut placed = false;
            for _ in 0..50 {
                attempts += 1;
                if attempts > rules.attempt_budget {
                    return Err(Error::RejectionBudget(rules.attempt_budget));
                }
                let anchor_ref = anchor.map(|i| {
                    let d = &drafts[i];
                    (catalog.get(&d.class).expect("drafted class"), &d.placement)
                });
                let Some(p) = sample_placement(&mut rng, class, relation, anchor_ref, &room)
                else {
                    break;
                };
                let bx = class.oriented_box(&p);
                if !metrics::box_in_room(&bx, &room, 0.0) {
                    continue;
                }
                let collides = drafts.iter().any(|d| {
                    let other = catalog.get(&d.class).expect("drafted class").oriented_box(&d.placement);
                    metrics::boxes_collide(&bx, &other, 0.0)
                });
                if collides {
                    continue;
                }
                let Ok(grid) = voxelize(&class.placed_shape(&p), rules.resolution) else {
                    continue;
                };
                if grid.is_empty()
                    || drafts
                        .iter()
                        .any(|d| d.grid.intersection_count(&grid).unwrap_or(1) > 0)
                {
                    continue;
                }
                drafts.push(Draft {
                    class: class_name.to_string(),
                    placement: p,
                    relation,
                    anchor,
                    grid,
                });
                placed = true;
                break;
            }
            if !placed {
                continue 'scene;
            }
        }
        if drafts.len() < rules.min_objects {
            continue 'scene;
        }

        let mut counts = std::collections::HashMap::new();
        let ids: Vec<String> = drafts
            .iter()
            .map(|d| {
                let k = counts.entry(d.class.clone()).or_insert(0usize);
                *k += 1;
                format!("{}_{}", d.class, *k)
            })
            .collect();
        let instruction = render_instruction(room_type.name, &drafts);

        let mut order: Vec<usize> = (0..drafts.len()).collect();
        let heights: Vec<(f64, String)> = drafts
            .iter()
            .map(|d| Ok((catalog.get(&d.class)?.support_height, d.class.clone())))
            .collect::<Result<_>>()?;
        order.sort_by(|&a, &b| {
            heights[a]
                .0
                .total_cmp(&heights[b].0)
                .then_with(|| heights[a].1.cmp(&heights[b].1))
        });
        let objects = order
            .into_iter()
            .map(|i| SceneObject {
                id: ids[i].clone(),
                class: drafts[i].class.clone(),
                placement: drafts[i].placement.clone(),
            })
            .collect();
        let spec = SceneSpec {
            scene_id: format!("scene_{seed:08}"),
            room_type: room_type.name.to_string(),
            room,
            instruction,
            seed,
            grid_resolution: rules.resolution,
            objects,
        };
        let boxes = spec.boxes(catalog)?;
        let cf = metrics::collision_free(&boxes, 0.0);
        let ib = metrics::in_boundary(&boxes, &spec.room, 0.0);
        if cf.score < 100.0 || ib.score < 100.0 {
            continue 'scene;
        }
        return Ok(spec);
    }
}

fn render_instruction(room: &str, drafts: &[Draft]) -> String {
    let clauses: Vec<String> = drafts
        .iter()
        .map(|d| {
            let phrase = d.relation.phrase();
            match d.anchor {
                Some(a) => format!("a {} {} {}", d.class, phrase, drafts[a].class),
                None => format!("a {} {}", d.class, phrase),
            }
        })
        .collect();
    let body = match clauses.len() {
        0 => String::new(),
        1 => clauses[0].clone(),
        n => format!("{}, and {}", clauses[..n - 1].join(", "), clauses[n - 1]),
    };
    format!("a {room} with {body}")
}

/// One teacher-forcing sample: context occupancy, canonical object, target occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub context: OccupancyGrid,
    pub object: OccupancyGrid,
    pub target: OccupancyGrid,
    pub instruction: String,
    pub order_index: usize,
    pub removal: bool,
}

/// Cumulative-occupancy pairs `(S_{i-1}, O_i, S_i)` in bottom-up order, followed
/// by the swapped removal pairs `(S_i, O_i, S_{i-1})` when `removal` is set.
pub fn build_training_pairs(
    spec: &SceneSpec,
    catalog: &Catalog,
    removal: bool,
) -> Result<Vec<TrainingPair>> {
    let g = spec.grid_resolution;
    let mut pairs = Vec::with_capacity(spec.objects.len() * (1 + removal as usize));
    let mut context = OccupancyGrid::empty(g, Frame::Scene);
    let mut shape = Vec::new();
    for (i, o) in spec.objects.iter().enumerate() {
        let class = catalog.get(&o.class)?;
        shape.extend(class.placed_shape(&o.placement));
        let target = voxelize(&shape, g)?;
        pairs.push(TrainingPair {
            context: context.clone(),
            object: class.canonical_grid(g)?,
            target: target.clone(),
            instruction: spec.instruction.clone(),
            order_index: i,
            removal: false,
        });
        context = target;
    }
    if removal {
        let forward: Vec<TrainingPair> = pairs.clone();
        pairs.extend(forward.into_iter().map(|p| TrainingPair {
            context: p.target,
            target: p.context,
            removal: true,
            ..p
        }));
    }
    Ok(pairs)
}

/// Seed ranges of the three dataset splits; the ranges never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Splits {
            train: 1024,
            val: 64,
            test: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }

    pub fn seed_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }

    pub fn count(self, splits: &Splits) -> usize {
        match self {
            Split::Train => splits.train,
            Split::Val => splits.val,
            Split::Test => splits.test,
        }
    }

    pub fn seeds(self, splits: &Splits) -> std::ops::Range<u64> {
        let base = self.seed_base();
        base..base + self.count(splits) as u64
    }
}

/// Generates every scene of a split; scenes are independent and fan out over rayon.
pub fn gen_split(
    split: Split,
    splits: &Splits,
    rules: &SceneRules,
    catalog: &Catalog,
) -> Vec<(u64, Result<SceneSpec>)> {
    use rayon::prelude::*;
    split
        .seeds(splits)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|seed| (seed, gen_scene(seed, rules, catalog)))
        .collect()
}
