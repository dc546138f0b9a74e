//! Similarity registration of canonical objects onto scene-difference regions.

use std::f64::consts::PI;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{OccupancyGrid, SparseVoxelSet};

/// Recovered pose of one object: world = scale * R(yaw) * (p - 0.5) + translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class: String,
    pub translation: [f64; 3],
    pub yaw: f64,
    pub scale: f64,
    pub rms_error: f64,
}

impl Placement {
    /// Maps a canonical-frame point into the world frame.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let l = [p[0] - 0.5, p[1] - 0.5, p[2] - 0.5];
        [
            self.translation[0] + self.scale * (c * l[0] - s * l[1]),
            self.translation[1] + self.scale * (s * l[0] + c * l[1]),
            self.translation[2] + self.scale * l[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    YawOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub yaw_candidates: usize,
    pub mode: RotationMode,
    pub max_source_points: usize,
    pub seed: u64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            tolerance: 1e-6,
            yaw_candidates: 8,
            mode: RotationMode::YawOnly,
            max_source_points: 512,
            seed: 0,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.yaw_candidates == 0 {
            return Err(Error::Config("icp iterations and yaw candidates must be >= 1".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Config("icp tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// A similarity transform `q = scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn from_yaw(yaw: f64, scale: f64, translation: [f64; 3]) -> Self {
        Similarity {
            rotation: yaw_matrix(yaw),
            scale,
            translation: Vector3::from(translation),
        }
    }

    /// Rotation angle about the vertical axis.
    pub fn yaw(&self) -> f64 {
        wrap(self.rotation[(1, 0)].atan2(self.rotation[(0, 0)]))
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.scale * (self.rotation * Vector3::from(p)) + self.translation;
        [q.x, q.y, q.z]
    }
}

fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Closed-form least-squares similarity over index-paired correspondences.
pub fn umeyama(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
    pairs: &[(usize, usize)],
    mode: RotationMode,
) -> Result<Similarity> {
    if pairs.len() < 3 {
        return Err(Error::Degenerate(format!("{} correspondences", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mut mp = Vector3::zeros();
    let mut mq = Vector3::zeros();
    for &(i, j) in pairs {
        mp += Vector3::from(source[i]);
        mq += Vector3::from(target[j]);
    }
    mp /= n;
    mq /= n;
    let mut cov_p = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    let mut var_p = 0.0;
    for &(i, j) in pairs {
        let p = Vector3::from(source[i]) - mp;
        let q = Vector3::from(target[j]) - mq;
        cov_p += p * p.transpose();
        cross += q * p.transpose();
        var_p += p.norm_squared();
    }
    let sv = cov_p.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if var_p <= 1e-18 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("collinear or coincident source points".into()));
    }
    let (rotation, trace) = match mode {
        RotationMode::YawOnly => {
            let a = cross[(0, 0)] + cross[(1, 1)];
            let b = cross[(1, 0)] - cross[(0, 1)];
            let yaw = b.atan2(a);
            let (s, c) = yaw.sin_cos();
            (yaw_matrix(yaw), a * c + b * s + cross[(2, 2)])
        }
        RotationMode::Full => {
            let svd = cross.svd(true, true);
            let u = svd.u.expect("svd u");
            let vt = svd.v_t.expect("svd v_t");
            let mut d = Matrix3::identity();
            if (u * vt).determinant() < 0.0 {
                d[(2, 2)] = -1.0;
            }
            let r = u * d * vt;
            let tr = (Matrix3::from_diagonal(&svd.singular_values) * d).trace();
            (r, tr)
        }
    };
    let scale = trace / var_p;
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::Degenerate(format!("non-positive scale {scale}")));
    }
    let translation = mq - scale * rotation * mp;
    Ok(Similarity {
        rotation,
        scale,
        translation,
    })
}

/// Points sampled on the boundary of an occupied region: the center of every
/// voxel face shared with an empty neighbor.
pub fn boundary_points(grid: &OccupancyGrid) -> Vec<[f64; 3]> {
    let v = grid.voxel_size();
    let mut out = Vec::new();
    for [h, w, l] in grid.occupied() {
        let c = grid.center(h, w, l);
        let (h, w, l) = (h as isize, w as isize, l as isize);
        for (k, dir) in [(0usize, -1isize), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
            let mut n = [h, w, l];
            n[k] += dir;
            if !grid.get_signed(n[0], n[1], n[2]) {
                let mut p = c;
                p[k] += 0.5 * v * dir as f64;
                out.push(p);
            }
        }
    }
    out
}

/// Nearest-neighbor lookup: exhaustive for small clouds, k-d tree above
/// `EXHAUSTIVE_LIMIT` points.
pub struct NearestIndex<'a> {
    points: &'a [[f64; 3]],
    tree: Option<ImmutableKdTree<f64, 3>>,
}

pub const EXHAUSTIVE_LIMIT: usize = 1000;

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let tree = (points.len() > EXHAUSTIVE_LIMIT).then(|| ImmutableKdTree::new_from_slice(points));
        NearestIndex { points, tree }
    }

    /// Index of and squared distance to the closest point.
    pub fn nearest(&self, q: [f64; 3]) -> (usize, f64) {
        if let Some(tree) = &self.tree {
            let n = tree.nearest_one::<SquaredEuclidean>(&q);
            return (n.item as usize, n.distance);
        }
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.points.iter().enumerate() {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

/// Outcome of one ICP run from a single initialization.
#[derive(Debug, Clone)]
pub struct IcpRun {
    pub transform: Similarity,
    pub rms: f64,
    /// RMS after every correspondence-then-solve sweep.
    pub history: Vec<f64>,
}

/// Point-to-point ICP with closed-form similarity updates.
pub fn icp(
    source: &[[f64; 3]],
    target: &[[f64; 3]],
    init: Similarity,
    config: &IcpConfig,
) -> Result<IcpRun> {
    if source.len() < 3 || target.is_empty() {
        return Err(Error::Empty("icp point sets"));
    }
    icp_indexed(source, &NearestIndex::new(target), init, config)
}

fn icp_indexed(
    source: &[[f64; 3]],
    index: &NearestIndex,
    init: Similarity,
    config: &IcpConfig,
) -> Result<IcpRun> {
    let target = index.points;
    let mut t = init;
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..config.max_iterations {
        let mut pairs = Vec::with_capacity(source.len());
        let mut sq = 0.0;
        for (i, &p) in source.iter().enumerate() {
            let (j, d) = index.nearest(t.apply(p));
            pairs.push((i, j));
            sq += d;
        }
        let rms = (sq / source.len() as f64).sqrt();
        if (prev - rms).abs() < config.tolerance {
            history.push(rms);
            prev = rms;
            break;
        }
        let next = umeyama(source, target, &pairs, config.mode)?;
        let solved = pairs
            .iter()
            .map(|&(i, j)| {
                let q = next.apply(source[i]);
                let p = target[j];
                (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)
            })
            .sum::<f64>();
        let solved = (solved / source.len() as f64).sqrt();
        history.push(solved);
        prev = rms;
        t = next;
    }
    let rms = {
        let sq: f64 = source.iter().map(|&p| index.nearest(t.apply(p)).1).sum();
        (sq / source.len() as f64).sqrt()
    };
    let _ = prev;
    Ok(IcpRun {
        transform: t,
        rms,
        history,
    })
}

fn diameter(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    points.iter().map(|&p| Vector3::from(p)).sum::<Vector3<f64>>() / points.len() as f64
}

fn rms_radius(points: &[[f64; 3]], c: Vector3<f64>) -> f64 {
    (points
        .iter()
        .map(|&p| (Vector3::from(p) - c).norm_squared())
        .sum::<f64>()
        / points.len() as f64)
        .sqrt()
}

/// Fits the canonical object onto a scene region, trying `yaw_candidates`
/// evenly spaced initial yaws and keeping the lowest-rms result.
pub fn fit_placement(
    class: &str,
    canonical: &OccupancyGrid,
    region: &SparseVoxelSet,
    config: &IcpConfig,
) -> Result<Placement> {
    config.validate()?;
    if region.is_empty() {
        return Err(Error::Empty("registration region"));
    }
    if canonical.is_empty() {
        return Err(Error::Empty("canonical object"));
    }
    let mut source: Vec<[f64; 3]> = boundary_points(canonical)
        .into_iter()
        .map(|p| [p[0] - 0.5, p[1] - 0.5, p[2] - 0.5])
        .collect();
    if source.len() > config.max_source_points {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut idx = sample(&mut rng, source.len(), config.max_source_points).into_vec();
        idx.sort_unstable();
        source = idx.into_iter().map(|i| source[i]).collect();
    }
    let target = boundary_points(&region.to_grid(crate::voxel::Frame::Scene));
    let src_c = centroid(&source);
    let tgt_c = centroid(&target);
    let init_scale = rms_radius(&target, tgt_c) / rms_radius(&source, src_c).max(1e-12);
    let diam = diameter(&target).max(region_voxel(region));

    let index = NearestIndex::new(&target);
    let mut best: Option<(usize, IcpRun)> = None;
    for k in 0..config.yaw_candidates {
        let yaw = 2.0 * PI * k as f64 / config.yaw_candidates as f64;
        let r = yaw_matrix(yaw);
        let init = Similarity {
            rotation: r,
            scale: init_scale,
            translation: tgt_c - init_scale * r * src_c,
        };
        let run = match icp_indexed(&source, &index, init, config) {
            Ok(run) => run,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(_, b)| run.rms < b.rms) {
            best = Some((k, run));
        }
    }
    let (_, run) = best.ok_or_else(|| Error::Degenerate("every yaw candidate degenerate".into()))?;
    let t = run.transform;
    let placement = Placement {
        class: class.to_string(),
        translation: [t.translation.x, t.translation.y, t.translation.z],
        yaw: t.yaw(),
        scale: t.scale,
        rms_error: run.rms,
    };
    if !run.rms.is_finite() || run.rms > diam {
        return Err(Error::Diverged {
            best: Box::new(placement),
        });
    }
    Ok(placement)
}

fn region_voxel(region: &SparseVoxelSet) -> f64 {
    1.0 / region.resolution() as f64
}
