//! Point-cloud sampling, grouping and cropping, plus oriented boxes and
//! their 3D IoU.

use std::f64::consts::PI;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud::new(idx.iter().map(|&i| self.points[i]).collect())
    }

    /// Row-major `K×3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_yaw(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Oriented box: center, size `(l, w, h)` along the box's local x/y/z, and
/// yaw about the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    #[serde(rename = "c")]
    pub center: Point,
    #[serde(rename = "s")]
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Point, size: [f64; 3], yaw: f64) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("box sizes must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::invalid("box pose must be finite"));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        })
    }

    /// World point → box frame (translate by −center, rotate by −yaw).
    pub fn to_local(&self, p: &Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Box frame → world.
    pub fn to_world(&self, p: &Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.center[0],
            s * p[0] + c * p[1] + self.center[1],
            p[2] + self.center[2],
        ]
    }

    /// Closed (boundary-inclusive) containment test.
    pub fn contains(&self, p: &Point) -> bool {
        let q = self.to_local(p);
        (0..3).all(|a| q[a].abs() <= self.size[a] / 2.0)
    }

    /// Ground-plane corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[x, y]| {
            let w = self.to_world(&[x, y, 0.0]);
            [w[0], w[1]]
        })
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Expresses `other` in this box's frame.
    pub fn relative(&self, other: &Box3D) -> Box3D {
        Box3D {
            center: self.to_local(&other.center),
            size: other.size,
            yaw: normalize_yaw(other.yaw - self.yaw),
        }
    }

    /// Inverse of [`Box3D::relative`]: maps a box given in this frame to world.
    pub fn absolute(&self, local: &Box3D) -> Box3D {
        Box3D {
            center: self.to_world(&local.center),
            size: local.size,
            yaw: normalize_yaw(local.yaw + self.yaw),
        }
    }
}

/// Greedy max-min sampling starting from index 0. Ties pick the smallest index.
pub fn farthest_point_sample(points: &[Point], k: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("farthest point sampling of an empty cloud".into()));
    }
    if k > points.len() {
        return Err(Error::invalid(format!(
            "cannot sample {k} of {} points",
            points.len()
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    if k == 0 {
        return Ok(chosen);
    }
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut cur = 0;
    chosen.push(cur);
    while chosen.len() < k {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &points[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.1 {
                best = (i, min_d[i]);
            }
        }
        cur = best.0;
        chosen.push(cur);
    }
    Ok(chosen)
}

/// Radius grouping. Each group holds exactly `max_samples` indices: in-radius
/// points in ascending index order, padded by repeating the first one. A
/// center with no point in range falls back to its nearest point.
pub fn ball_query(centers: &[Point], points: &[Point], radius: f64, max_samples: usize) -> Result<Vec<Vec<usize>>> {
    if points.is_empty() {
        return Err(Error::Empty("ball query over an empty cloud".into()));
    }
    if !(radius > 0.0) || max_samples == 0 {
        return Err(Error::invalid("ball query needs radius > 0 and max_samples ≥ 1"));
    }
    let r2 = radius * radius;
    let groups = centers
        .iter()
        .map(|c| {
            let mut g: Vec<usize> = Vec::with_capacity(max_samples);
            let mut nearest = (0, f64::INFINITY);
            for (i, p) in points.iter().enumerate() {
                let d = sq_dist(c, p);
                if d <= r2 && g.len() < max_samples {
                    g.push(i);
                }
                if d < nearest.1 {
                    nearest = (i, d);
                }
            }
            let fill = g.first().copied().unwrap_or(nearest.0);
            g.resize(max_samples, fill);
            g
        })
        .collect();
    Ok(groups)
}

/// Indices that resample `k` items to exactly `n`: a uniform subset when
/// `k ≥ n`, otherwise every item plus uniform duplicates. Output is shuffled.
pub fn resample_indices<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Empty("cannot resample an empty cloud".into()));
    }
    let mut idx: Vec<usize> = if k >= n {
        index::sample(rng, k, n).into_vec()
    } else {
        let mut v: Vec<usize> = (0..k).collect();
        v.extend((0..n - k).map(|_| rng.random_range(0..k)));
        v
    };
    idx.shuffle(rng);
    Ok(idx)
}

pub fn resample<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Result<PointCloud> {
    let idx = resample_indices(cloud.len(), n, rng)?;
    Ok(cloud.select(&idx))
}

/// Points inside `bx`, expressed in its frame, and their count.
pub fn crop_and_center(points: &[Point], bx: &Box3D) -> (Vec<Point>, usize) {
    let inside: Vec<Point> = points
        .iter()
        .filter(|p| bx.contains(p))
        .map(|p| bx.to_local(p))
        .collect();
    let n = inside.len();
    (inside, n)
}

pub fn count_in_box(points: &[Point], bx: &Box3D) -> usize {
    points.iter().filter(|p| bx.contains(p)).count()
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: &[f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(&p), side(&q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Ground-plane overlap area of two oriented boxes.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// 3D IoU of two yaw-rotated boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let z_lo = (a.center[2] - a.size[2] / 2.0).max(b.center[2] - b.size[2] / 2.0);
    let z_hi = (a.center[2] + a.size[2] / 2.0).min(b.center[2] + b.size[2] / 2.0);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    sq_dist(&a.center, &b.center).sqrt()
}
