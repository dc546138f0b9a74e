//! Physical plausibility (CF, IB) and ground-truth coherency (Pos, Rot, PSA).

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::Placement;

/// Axis-aligned room bounds inside the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Room {
    pub fn unit() -> Self {
        Room {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }
}

/// Upright box rotated about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox {
    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.yaw.sin_cos();
        [[c, s], [-s, c]]
    }

    fn radius_along(&self, axis: [f64; 2]) -> f64 {
        let [a0, a1] = self.axes();
        self.half[0] * (a0[0] * axis[0] + a0[1] * axis[1]).abs()
            + self.half[1] * (a1[0] * axis[0] + a1[1] * axis[1]).abs()
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let [a0, a1] = self.axes();
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            let lx = sx * self.half[0];
            let ly = sy * self.half[1];
            *c = [
                self.center[0] + a0[0] * lx + a1[0] * ly,
                self.center[1] + a0[1] * lx + a1[1] * ly,
                self.center[2] + sz * self.half[2],
            ];
        }
        out
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        OrientedBox {
            center: [
                self.center[0] + d[0],
                self.center[1] + d[1],
                self.center[2] + d[2],
            ],
            ..*self
        }
    }
}

/// Minimum translation distance separating two boxes; non-positive when disjoint.
pub fn penetration_depth(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let d = [b.center[0] - a.center[0], b.center[1] - a.center[1]];
    let mut depth = a.half[2] + b.half[2] - (b.center[2] - a.center[2]).abs();
    for axis in a.axes().into_iter().chain(b.axes()) {
        let sep = (d[0] * axis[0] + d[1] * axis[1]).abs();
        depth = depth.min(a.radius_along(axis) + b.radius_along(axis) - sep);
    }
    depth
}

pub fn boxes_collide(a: &OrientedBox, b: &OrientedBox, tau: f64) -> bool {
    penetration_depth(a, b) > tau
}

pub fn box_in_room(b: &OrientedBox, room: &Room, tau: f64) -> bool {
    b.corners().iter().all(|c| {
        (0..3).all(|k| c[k] >= room.min[k] - tau && c[k] <= room.max[k] + tau)
    })
}

/// A percentage score together with the per-object flag it aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagScore {
    pub score: f64,
    pub flags: Vec<bool>,
}

fn percent(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 100.0;
    }
    100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// Flags mark colliding objects; the score counts the collision-free ones.
pub fn collision_free(boxes: &[OrientedBox], tau: f64) -> FlagScore {
    let mut flags = vec![false; boxes.len()];
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes_collide(&boxes[i], &boxes[j], tau) {
                flags[i] = true;
                flags[j] = true;
            }
        }
    }
    let ok: Vec<bool> = flags.iter().map(|f| !f).collect();
    FlagScore {
        score: percent(&ok),
        flags,
    }
}

/// Flags mark out-of-bounds objects; the score counts the in-boundary ones.
pub fn in_boundary(boxes: &[OrientedBox], room: &Room, tau: f64) -> FlagScore {
    let flags: Vec<bool> = boxes.iter().map(|b| !box_in_room(b, room, tau)).collect();
    let ok: Vec<bool> = flags.iter().map(|f| !f).collect();
    FlagScore {
        score: percent(&ok),
        flags,
    }
}

/// Smallest yaw difference modulo the `2pi / symmetry` rotation group.
pub fn yaw_error(a: f64, b: f64, symmetry: u8) -> f64 {
    let period = 2.0 * PI / symmetry.max(1) as f64;
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau: f64,
    pub delta_pos: f64,
    pub delta_yaw: f64,
}

impl Thresholds {
    /// Collision/boundary tolerance of one voxel at resolution `g`.
    pub fn for_resolution(g: usize) -> Self {
        Thresholds {
            tau: 1.0 / g as f64,
            delta_pos: 0.05,
            delta_yaw: 15f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coherency {
    pub pos: f64,
    pub rot: f64,
    pub pos_ok: Vec<bool>,
    pub rot_ok: Vec<bool>,
}

/// Compares predicted placements against ground truth by object id.
pub fn coherency(
    predicted: &[(String, Placement)],
    truth: &[(String, Placement)],
    symmetry: impl Fn(&str) -> u8,
    th: &Thresholds,
) -> Result<Coherency> {
    let gt: HashMap<&str, &Placement> = truth.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let missing: Vec<&str> = predicted
        .iter()
        .filter(|(id, _)| !gt.contains_key(id.as_str()))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no ground truth for ids: {}",
            missing.join(", ")
        )));
    }
    let mut pos_ok = Vec::with_capacity(predicted.len());
    let mut rot_ok = Vec::with_capacity(predicted.len());
    for (id, p) in predicted {
        let g = gt[id.as_str()];
        let d = (0..3)
            .map(|k| (p.translation[k] - g.translation[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        pos_ok.push(d <= th.delta_pos);
        rot_ok.push(yaw_error(p.yaw, g.yaw, symmetry(&g.class)) <= th.delta_yaw);
    }
    Ok(Coherency {
        pos: percent(&pos_ok),
        rot: percent(&rot_ok),
        pos_ok,
        rot_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFlags {
    pub id: String,
    pub colliding: bool,
    pub out_of_bounds: bool,
    pub pos_ok: bool,
    pub rot_ok: bool,
}

impl ObjectFlags {
    pub fn all_ok(&self) -> bool {
        self.pos_ok && self.rot_ok && !self.colliding && !self.out_of_bounds
    }
}

/// Per-object conjunction of coherency and physical flags.
pub fn psa(flags: &[ObjectFlags]) -> f64 {
    let ok: Vec<bool> = flags.iter().map(ObjectFlags::all_ok).collect();
    percent(&ok)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub cf: f64,
    pub ib: f64,
    pub pos: f64,
    pub rot: f64,
    pub psa: f64,
    pub seconds: f64,
    pub objects: Vec<ObjectFlags>,
}

impl ScoreReport {
    /// Aggregates per-object flags; the four percentages are derived from them.
    pub fn from_flags(objects: Vec<ObjectFlags>, seconds: f64) -> Self {
        let pick = |f: fn(&ObjectFlags) -> bool| {
            let v: Vec<bool> = objects.iter().map(f).collect();
            percent(&v)
        };
        ScoreReport {
            cf: pick(|o| !o.colliding),
            ib: pick(|o| !o.out_of_bounds),
            pos: pick(|o| o.pos_ok),
            rot: pick(|o| o.rot_ok),
            psa: psa(&objects),
            seconds,
            objects,
        }
    }
}

/// Mean with a percentile bootstrap 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn bootstrap(values: &[f64], resamples: usize, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap values"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    if means.is_empty() {
        return Ok(Interval {
            mean,
            lo: mean,
            hi: mean,
        });
    }
    let at = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    Ok(Interval {
        mean,
        lo: at(0.025),
        hi: at(0.975),
    })
}

/// Per-metric means with bootstrap intervals over scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenes: usize,
    pub resamples: usize,
    pub cf: Interval,
    pub ib: Interval,
    pub pos: Interval,
    pub rot: Interval,
    pub psa: Interval,
    pub seconds: Interval,
}

pub fn summarize(reports: &[ScoreReport], resamples: usize, seed: u64) -> Result<Summary> {
    let col = |f: fn(&ScoreReport) -> f64| -> Result<Interval> {
        let v: Vec<f64> = reports.iter().map(f).collect();
        bootstrap(&v, resamples, seed)
    };
    Ok(Summary {
        scenes: reports.len(),
        resamples,
        cf: col(|r| r.cf)?,
        ib: col(|r| r.ib)?,
        pos: col(|r| r.pos)?,
        rot: col(|r| r.rot)?,
        psa: col(|r| r.psa)?,
        seconds: col(|r| r.seconds)?,
    })
}
