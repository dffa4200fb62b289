//! Voxel-to-BEV localization: voxelize the enhanced search points, run a 3D
//! convolution stack, max-pool along z into a bird's-eye-view map, then a 2D
//! encoder-decoder with heatmap, offset/rotation and z heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::embed::first_argmax;
use crate::error::{Error, Result};
use crate::geom::{Box3D, Point};
use crate::nn::{add_conv, conv2d, conv3d};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Axis-aligned box of space discretized into cubic voxels of edge `voxel`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub voxel: f64,
}

impl Region {
    pub fn new(x: [f64; 2], y: [f64; 2], z: [f64; 2], voxel: f64) -> Result<Self> {
        let ok = |a: [f64; 2]| a[0].is_finite() && a[1].is_finite() && a[1] > a[0];
        if !(ok(x) && ok(y) && ok(z)) || !(voxel > 0.0 && voxel.is_finite()) {
            return Err(Error::invalid(format!(
                "region needs max > min per axis and v > 0, got x {x:?} y {y:?} z {z:?} v {voxel}"
            )));
        }
        Ok(Self {
            x_min: x[0],
            x_max: x[1],
            y_min: y[0],
            y_max: y[1],
            z_min: z[0],
            z_max: z[1],
            voxel,
        })
    }

    /// Search region in a reference box's own frame: its footprint grown by
    /// `margin` on every side, and `±z_half` around its center height.
    pub fn around(size: [f64; 3], margin: f64, z_half: f64, voxel: f64) -> Result<Self> {
        let hx = size[0] / 2.0 + margin;
        let hy = size[1] / 2.0 + margin;
        Self::new([-hx, hx], [-hy, hy], [-z_half, z_half], voxel)
    }

    /// `(H, W, Z)`, each `⌊extent / v⌋ + 1`.
    pub fn dims(&self) -> [usize; 3] {
        let n = |lo: f64, hi: f64| ((hi - lo) / self.voxel).floor() as usize + 1;
        [n(self.x_min, self.x_max), n(self.y_min, self.y_max), n(self.z_min, self.z_max)]
    }

    pub fn contains(&self, p: &Point) -> bool {
        (self.x_min..=self.x_max).contains(&p[0])
            && (self.y_min..=self.y_max).contains(&p[1])
            && (self.z_min..=self.z_max).contains(&p[2])
    }

    /// Voxel index of a point, or `None` outside the region.
    pub fn cell_of(&self, p: &Point) -> Option<[usize; 3]> {
        if !self.contains(p) {
            return None;
        }
        let d = self.dims();
        let idx = |v: f64, lo: f64, n: usize| (((v - lo) / self.voxel).floor() as usize).min(n - 1);
        Some([
            idx(p[0], self.x_min, d[0]),
            idx(p[1], self.y_min, d[1]),
            idx(p[2], self.z_min, d[2]),
        ])
    }
}

/// Voxel features `H×W×Z×(C+3)` (mean features, then mean coordinates).
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub region: Region,
    pub features: Var,
    pub occupancy: Vec<u32>,
}

impl VoxelGrid {
    /// Occupied voxels per BEV column, `H×W`.
    pub fn bev_occupancy(&self) -> Tensor {
        let [h, w, z] = self.region.dims();
        let data = (0..h * w)
            .map(|c| self.occupancy[c * z..(c + 1) * z].iter().filter(|&&n| n > 0).count() as f64)
            .collect();
        Tensor::new(vec![h, w], data).expect("dims match")
    }
}

/// Averages point features and coordinates per voxel. Points outside the
/// region are dropped; empty voxels stay zero.
pub fn voxelize(tape: &mut Tape, coords: &[Point], feats: Var, region: &Region) -> Result<VoxelGrid> {
    if tape.value(feats).rows() != coords.len() {
        return Err(Error::shape(format!(
            "voxelize: {} coordinates vs {} feature rows",
            coords.len(),
            tape.value(feats).rows()
        )));
    }
    let [h, w, z] = region.dims();
    let cells = h * w * z;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for (i, p) in coords.iter().enumerate() {
        if let Some([a, b, c]) = region.cell_of(p) {
            members[(a * w + b) * z + c].push(i);
        }
    }
    let occupancy: Vec<u32> = members.iter().map(|m| m.len() as u32).collect();
    let mut mean_xyz = vec![0.0; cells * 3];
    for (cell, m) in members.iter().enumerate() {
        let k = m.len() as f64;
        for &i in m {
            for a in 0..3 {
                mean_xyz[cell * 3 + a] += coords[i][a] / k;
            }
        }
    }
    let weights: Vec<Vec<(usize, f64)>> = members
        .iter()
        .map(|m| m.iter().map(|&i| (i, 1.0 / m.len() as f64)).collect())
        .collect();
    let mixed = tape.mix_rows(feats, weights)?;
    let xyz = tape.constant(Tensor::new(vec![cells, 3], mean_xyz)?);
    let cat = tape.concat_last(&[mixed, xyz])?;
    let c = tape.value(cat).cols();
    let features = tape.reshape(cat, &[h, w, z, c])?;
    Ok(VoxelGrid {
        region: *region,
        features,
        occupancy,
    })
}

pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, c: usize, rng: &mut R) -> Result<()> {
    let w = 2 * c;
    add_conv(store, "loc.conv3d0", &[3, 3, 3], c + 3, w, rng)?;
    for i in 1..4 {
        add_conv(store, &format!("loc.conv3d{i}"), &[3, 3, 3], w, w, rng)?;
    }
    for i in 0..3 {
        add_conv(store, &format!("loc.enc{i}"), &[3, 3], w, w, rng)?;
    }
    add_conv(store, "loc.up", &[2, 2], w, w, rng)?;
    add_conv(store, "loc.merge", &[3, 3], 2 * w, w, rng)?;
    for (head, out) in [("hm", 1), ("off", 3), ("z", 1)] {
        add_conv(store, &format!("loc.{head}.0"), &[3, 3], w, w, rng)?;
        add_conv(store, &format!("loc.{head}.1"), &[1, 1], w, out, rng)?;
    }
    Ok(())
}

/// The three dense predictions over the `H×W` grid.
#[derive(Clone, Copy, Debug)]
pub struct BevOutput {
    /// `H×W×1`, clamped sigmoid.
    pub heatmap: Var,
    /// `H×W×3`: x offset, y offset (cells), yaw (rad).
    pub offset: Var,
    /// `H×W×1`.
    pub z: Var,
}

/// Max over the z axis of an `H×W×Z×C` volume.
pub fn compress_z(tape: &mut Tape, x: Var) -> Result<Var> {
    Ok(tape.reduce_max(x, 2)?.0)
}

pub fn bev_forward(tape: &mut Tape, params: &Bound, grid: &VoxelGrid, heatmap_eps: f64) -> Result<BevOutput> {
    let [h, w, z] = grid.region.dims();
    if z < 4 {
        return Err(Error::invalid(format!("BEV stack needs Z ≥ 4, got {z}")));
    }
    let mut x = grid.features;
    for (i, sz) in [2, 1, 2, 1].into_iter().enumerate() {
        x = conv3d(tape, params, &format!("loc.conv3d{i}"), x, [1, 1, sz])?;
        x = tape.relu(x);
    }
    let bev = compress_z(tape, x)?;

    let e0 = conv2d(tape, params, "loc.enc0", bev, 2)?;
    let e0 = tape.relu(e0);
    let e1 = conv2d(tape, params, "loc.enc1", e0, 1)?;
    let e1 = tape.relu(e1);
    let e2 = conv2d(tape, params, "loc.enc2", e1, 1)?;
    let e2 = tape.relu(e2);
    let k = params.var("loc.up.w")?;
    let b = params.var("loc.up.b")?;
    let up = tape.conv_transpose2d(e2, k, [2, 2], [h, w])?;
    let up = tape.add_bias(up, b)?;
    let up = tape.relu(up);
    let cat = tape.concat_last(&[bev, up])?;
    let f = conv2d(tape, params, "loc.merge", cat, 1)?;
    let f = tape.relu(f);

    let mut head = |name: &str| -> Result<Var> {
        let y = conv2d(tape, params, &format!("loc.{name}.0"), f, 1)?;
        let y = tape.relu(y);
        conv2d(tape, params, &format!("loc.{name}.1"), y, 1)
    };
    let hm_logits = head("hm")?;
    let offset = head("off")?;
    let z = head("z")?;
    let heatmap = tape.sigmoid_clamped(hm_logits, heatmap_eps, 1.0 - heatmap_eps);
    Ok(BevOutput { heatmap, offset, z })
}

/// Supervision derived from one ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationTargets {
    /// `H×W`.
    pub heatmap: Tensor,
    /// Supervised cells of the offset square and their `(dx, dy, yaw)` targets.
    pub offsets: Vec<([usize; 2], [f64; 3])>,
    pub z: f64,
    /// Discrete center `c̃`.
    pub center_cell: [usize; 2],
    /// Continuous center `c` in cell units.
    pub center: [f64; 2],
}

impl LocalizationTargets {
    pub fn dims(&self) -> [usize; 2] {
        [self.heatmap.shape()[0], self.heatmap.shape()[1]]
    }

    /// `(flat index into H×W×3, target)` pairs for the offset loss.
    pub fn offset_entries(&self) -> Vec<(usize, f64)> {
        let w = self.dims()[1];
        self.offsets
            .iter()
            .flat_map(|&([i, j], t)| (0..3).map(move |ch| (((i * w + j) * 3) + ch, t[ch])))
            .collect()
    }

    pub fn z_index(&self) -> usize {
        self.center_cell[0] * self.dims()[1] + self.center_cell[1]
    }

    /// Prediction maps that reproduce the targets exactly.
    pub fn oracle_maps(&self) -> (Tensor, Tensor, Tensor) {
        let [h, w] = self.dims();
        let hm = self.heatmap.clone().reshape(&[h, w, 1]).expect("same size");
        let mut off = Tensor::zeros(&[h, w, 3]);
        for (idx, t) in self.offset_entries() {
            off.data_mut()[idx] = t;
        }
        let z = Tensor::full(&[h, w, 1], self.z);
        (hm, off, z)
    }
}

/// Heatmap, offset and z targets for a box given in the region's frame.
pub fn make_targets(gt: &Box3D, region: &Region, r: usize) -> Result<LocalizationTargets> {
    let [x, y, z] = gt.center;
    if !(region.x_min..=region.x_max).contains(&x) || !(region.y_min..=region.y_max).contains(&y) {
        return Err(Error::invalid(format!("box center ({x}, {y}) outside the search region")));
    }
    let [h, w, _] = region.dims();
    let v = region.voxel;
    let c = [(x - region.x_min) / v, (y - region.y_min) / v];
    let ct = [(c[0].floor() as usize).min(h - 1), (c[1].floor() as usize).min(w - 1)];

    let (sin, cos) = gt.yaw.sin_cos();
    let (hl, hw) = (gt.size[0] / 2.0, gt.size[1] / 2.0);
    let mut heat = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let px = region.x_min + (i as f64 + 0.5) * v - x;
            let py = region.y_min + (j as f64 + 0.5) * v - y;
            let lx = cos * px + sin * py;
            let ly = -sin * px + cos * py;
            if lx.abs() <= hl && ly.abs() <= hw {
                let d = ((i as f64 - ct[0] as f64).powi(2) + (j as f64 - ct[1] as f64).powi(2)).sqrt();
                heat[i * w + j] = 1.0 / (d + 1.0);
            }
        }
    }
    heat[ct[0] * w + ct[1]] = 1.0;

    let r = r as i64;
    let mut offsets = Vec::new();
    for dx in -r..=r {
        for dy in -r..=r {
            let (i, j) = (ct[0] as i64 + dx, ct[1] as i64 + dy);
            if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
                continue;
            }
            let t = [
                c[0] - ct[0] as f64 - dx as f64,
                c[1] - ct[1] as f64 - dy as f64,
                gt.yaw,
            ];
            offsets.push(([i as usize, j as usize], t));
        }
    }
    Ok(LocalizationTargets {
        heatmap: Tensor::new(vec![h, w], heat)?,
        offsets,
        z,
        center_cell: ct,
        center: c,
    })
}

pub fn focal_loss(tape: &mut Tape, heatmap: Var, t: &LocalizationTargets, cfg: &LossConfig) -> Result<Var> {
    tape.focal_loss(heatmap, &t.heatmap, cfg.focal_alpha, cfg.focal_beta, cfg.heatmap_eps)
}

pub fn offset_rot_loss(tape: &mut Tape, offset: Var, t: &LocalizationTargets) -> Result<Var> {
    if t.offsets.is_empty() {
        return Err(Error::invalid("offset loss with an empty validity mask"));
    }
    tape.l1_at(offset, t.offset_entries())
}

pub fn z_loss(tape: &mut Tape, z: Var, t: &LocalizationTargets) -> Result<Var> {
    tape.l1_at(z, vec![(t.z_index(), t.z)])
}

/// The individual loss terms on one tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub shape: Option<Var>,
    pub center: Var,
    pub offset: Var,
    pub z: Var,
}

/// `λ₁·L_shape + λ₂·(L_center + L_off) + λ₃·L_z`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &LossConfig) -> Result<Var> {
    let co = tape.add(terms.center, terms.offset)?;
    let co = tape.scale(co, cfg.lambda_center);
    let z = tape.scale(terms.z, cfg.lambda_z);
    let mut total = tape.add(co, z)?;
    if let Some(s) = terms.shape {
        let s = tape.scale(s, cfg.lambda_shape);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Box at the strongest heatmap response (first in row-major order on
/// ties), refined by the predicted offset; size comes from the template.
pub fn decode(heatmap: &Tensor, offset: &Tensor, z: &Tensor, size: [f64; 3], region: &Region) -> Result<Box3D> {
    let [h, w, _] = region.dims();
    if heatmap.len() != h * w || offset.len() != h * w * 3 || z.len() != h * w {
        return Err(Error::shape(format!(
            "decode: maps {:?}/{:?}/{:?} for a {h}×{w} grid",
            heatmap.shape(),
            offset.shape(),
            z.shape()
        )));
    }
    let cell = first_argmax(heatmap.data());
    let (i, j) = (cell / w, cell % w);
    let o = &offset.data()[cell * 3..cell * 3 + 3];
    let v = region.voxel;
    let x = region.x_min + (i as f64 + o[0]) * v;
    let y = region.y_min + (j as f64 + o[1]) * v;
    Box3D::new([x, y, z.data()[cell]], size, o[2])
}

/// Row-major CSV of an `H×W` map, six significant digits.
pub fn map_csv(t: &Tensor) -> String {
    let w = t.shape().get(1).copied().unwrap_or(1);
    let mut out = String::new();
    for row in t.data().chunks(w.max(1)) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| {
                let r: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
                format!("{r}")
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Binary 8-bit PGM of an `H×W` map, linearly mapping `[lo, hi]` to `[0, 255]`.
pub fn map_pgm(t: &Tensor, lo: f64, hi: f64) -> Vec<u8> {
    let (h, w) = (t.shape()[0], t.shape().get(1).copied().unwrap_or(1));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(
        t.data()
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::{jitter_biases, zero_biases};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn car_region() -> Region {
        Region::around([4.0, 1.8, 1.6], 2.0, 2.0, 0.3).unwrap()
    }

    #[test]
    fn dims_use_floor_plus_one() {
        let r = Region::new([0.0, 1.0], [0.0, 0.6], [0.0, 1.2], 0.3).unwrap();
        assert_eq!(r.dims(), [4, 3, 5]);
        assert!(Region::new([1.0, 1.0], [0.0, 1.0], [0.0, 1.0], 0.3).is_err());
        assert!(Region::new([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn voxel_mean_and_boundary() {
        let r = Region::new([0.0, 0.9], [0.0, 0.9], [0.0, 1.2], 0.3).unwrap();
        assert_eq!(r.dims()[0], 4);
        assert_eq!(r.cell_of(&[0.9, 0.0, 0.0]).unwrap()[0], 3);
        let coords = vec![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [5.0, 0.0, 0.0]];
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 3.0, 100.0]).unwrap());
        let g = voxelize(&mut tape, &coords, f, &r).unwrap();
        let t = tape.value(g.features);
        assert_eq!(t.shape(), &[4, 4, 5, 4]);
        assert_eq!(t.at(&[0, 0, 0, 0]), 2.0);
        assert!((t.at(&[0, 0, 0, 1]) - 0.15).abs() < 1e-15);
        assert_eq!(g.occupancy.iter().sum::<u32>(), 2);
        assert_eq!(t.data().iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn bev_output_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        register(&mut s, 4, &mut rng).unwrap();
        zero_biases(&mut s);
        let region = car_region();
        let [h, w, _] = region.dims();
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::zeros(&[0, 4]));
        let grid = voxelize(&mut tape, &[], f, &region).unwrap();
        let out = bev_forward(&mut tape, &b, &grid, 1e-6).unwrap();
        assert_eq!(tape.value(out.heatmap).shape(), &[h, w, 1]);
        assert_eq!(tape.value(out.offset).shape(), &[h, w, 3]);
        assert_eq!(tape.value(out.z).shape(), &[h, w, 1]);
        assert!(tape.value(out.heatmap).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shallow_region_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        register(&mut s, 2, &mut rng).unwrap();
        let region = Region::new([0.0, 3.0], [0.0, 3.0], [0.0, 0.6], 0.3).unwrap();
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::zeros(&[0, 2]));
        let grid = voxelize(&mut tape, &[], f, &region).unwrap();
        assert!(bev_forward(&mut tape, &b, &grid, 1e-6).is_err());
    }

    #[test]
    fn bev_gradient_at_toy_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        register(&mut s, 2, &mut rng).unwrap();
        jitter_biases(&mut s, 0.1, &mut rng);
        // H = W = 8, Z = 4
        let region = Region::new([0.0, 2.3], [0.0, 2.3], [0.0, 1.1], 0.3).unwrap();
        assert_eq!(region.dims(), [8, 8, 4]);
        let coords: Vec<Point> = (0..20)
            .map(|_| [rng.random_range(0.0..2.3), rng.random_range(0.0..2.3), rng.random_range(0.0..1.1)])
            .collect();
        let feats = Tensor::randn(&[20, 2], 1.0, &mut rng);
        let gt = Box3D::new([1.1, 1.3, 0.5], [1.0, 0.6, 0.5], 0.4).unwrap();
        let targets = make_targets(&gt, &region, 2).unwrap();
        let cfg = LossConfig::default();
        let inputs = [feats];
        let r = gradcheck::check(&inputs, 1e-5, |t, v| {
            let b = s.bind_frozen(t);
            let grid = voxelize(t, &coords, v[0], &region)?;
            let out = bev_forward(t, &b, &grid, 1e-6)?;
            let terms = LossTerms {
                shape: None,
                center: focal_loss(t, out.heatmap, &targets, &cfg)?,
                offset: offset_rot_loss(t, out.offset, &targets)?,
                z: z_loss(t, out.z, &targets)?,
            };
            let sq = t.mul(out.offset, out.offset)?;
            let extra = t.sum(sq);
            let total = total_loss(t, &terms, &cfg)?;
            t.add(total, extra)
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    #[test]
    fn z_compression_matches_naive_column_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5, 4, 6, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = compress_z(&mut tape, v).unwrap();
        let y = tape.value(y);
        for i in 0..5 {
            for j in 0..4 {
                for c in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for k in 0..6 {
                        m = m.max(x.at(&[i, j, k, c]));
                    }
                    assert_eq!(y.at(&[i, j, c]), m);
                }
            }
        }
    }

    #[test]
    fn heatmap_values() {
        let region = Region::new([0.0, 3.0], [0.0, 3.0], [-1.0, 1.0], 0.3).unwrap();
        let gt = Box3D::new([1.5 + 0.01, 1.5 + 0.02, 0.3], [1.2, 1.2, 1.0], 0.0).unwrap();
        let t = make_targets(&gt, &region, 2).unwrap();
        assert_eq!(t.center_cell, [5, 5]);
        assert_eq!(t.heatmap.at(&[5, 5]), 1.0);
        assert_eq!(t.heatmap.at(&[6, 5]), 0.5);
        assert!((t.heatmap.at(&[6, 6]) - 1.0 / (1.0 + 2f64.sqrt())).abs() < 1e-15);
        assert!((t.heatmap.at(&[6, 6]) - 0.41421).abs() < 1e-5);
        assert_eq!(t.heatmap.at(&[0, 0]), 0.0);
        assert_eq!(t.offsets.len(), 25);
        let zero = t.offsets.iter().find(|(c, _)| *c == [5, 5]).unwrap().1;
        assert!((zero[0] - (t.center[0] - 5.0)).abs() < 1e-15);
        assert!(zero[0] >= 0.0 && zero[0] < 1.0 && zero[1] >= 0.0 && zero[1] < 1.0);
        assert!(make_targets(&Box3D::new([9.0, 1.0, 0.0], [1.0; 3], 0.0).unwrap(), &region, 2).is_err());
    }

    #[test]
    fn offset_mask_clipped_at_edges() {
        let region = Region::new([0.0, 3.0], [0.0, 3.0], [-1.0, 1.0], 0.3).unwrap();
        let gt = Box3D::new([0.05, 0.05, 0.0], [0.5, 0.5, 0.5], 0.0).unwrap();
        let t = make_targets(&gt, &region, 2).unwrap();
        assert_eq!(t.offsets.len(), 9);
    }

    #[test]
    fn focal_examples() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let target = LocalizationTargets {
            heatmap: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            offsets: vec![],
            z: 0.0,
            center_cell: [0, 0],
            center: [0.0, 0.0],
        };
        let p = tape.constant(Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap());
        let l = focal_loss(&mut tape, p, &target, &cfg).unwrap();
        assert!((tape.value(l).item() - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((tape.value(l).item() - 0.17329).abs() < 1e-5);

        let mut one_hot = Tensor::zeros(&[4, 4]);
        one_hot.data_mut()[5] = 1.0;
        let t = LocalizationTargets {
            heatmap: one_hot.clone(),
            ..target
        };
        let p = tape.constant(one_hot);
        let l = focal_loss(&mut tape, p, &t, &cfg).unwrap();
        assert!(tape.value(l).item() <= 1e-4);
    }

    #[test]
    fn offset_and_z_examples() {
        let region = Region::new([0.0, 3.0], [0.0, 3.0], [-1.0, 1.0], 0.3).unwrap();
        let gt = Box3D::new([1.0, 1.0, 0.2], [0.5, 0.5, 0.5], 0.3).unwrap();
        let mut t = make_targets(&gt, &region, 0).unwrap();
        assert_eq!(t.offsets.len(), 1);
        let (_, mut off, z) = t.oracle_maps();
        let mut tape = Tape::new();
        let o = tape.constant(off.clone());
        let l = offset_rot_loss(&mut tape, o, &t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let base = t.offset_entries()[0].0;
        off.data_mut()[base] += 0.1;
        off.data_mut()[base + 1] -= 0.2;
        off.data_mut()[base + 2] += 0.3;
        let o = tape.param(off);
        let l = offset_rot_loss(&mut tape, o, &t).unwrap();
        assert!((tape.value(l).item() - 0.6).abs() < 1e-12);

        let zv = tape.param(z.clone());
        let l = z_loss(&mut tape, zv, &t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let mut z2 = z;
        z2.data_mut()[t.z_index()] += 0.7;
        let zv = tape.param(z2);
        let l = z_loss(&mut tape, zv, &t).unwrap();
        assert!((tape.value(l).item() - 0.7).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        let gz = g.get(zv).unwrap();
        assert_eq!(gz.data().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(gz.data()[t.z_index()], 1.0);

        t.offsets.clear();
        let o = tape.constant(Tensor::zeros(&[10, 10, 3]));
        assert!(offset_rot_loss(&mut tape, o, &t).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let parts: Vec<Var> = [1e6, 1.0, 1.0, 1.0].iter().map(|&v| tape.param(Tensor::scalar(v))).collect();
        let terms = LossTerms {
            shape: Some(parts[0]),
            center: parts[1],
            offset: parts[2],
            z: parts[3],
        };
        let l = total_loss(&mut tape, &terms, &cfg).unwrap();
        assert!((tape.value(l).item() - 5.0).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        let got: Vec<f64> = parts.iter().map(|&p| g.get(p).unwrap().item()).collect();
        assert_eq!(got, vec![1e-6, 1.0, 1.0, 2.0]);

        let mut tape = Tape::new();
        let zeros: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::scalar(0.0))).collect();
        let terms = LossTerms {
            shape: Some(zeros[0]),
            center: zeros[1],
            offset: zeros[2],
            z: zeros[3],
        };
        let l = total_loss(&mut tape, &terms, &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn decode_examples() {
        let region = Region::new([0.0, 3.0], [0.0, 3.0], [-1.0, 1.0], 0.3).unwrap();
        let [h, w, _] = region.dims();
        let mut hm = Tensor::zeros(&[h, w, 1]);
        hm.data_mut()[2 * w + 3] = 0.9;
        let off = Tensor::zeros(&[h, w, 3]);
        let z = Tensor::zeros(&[h, w, 1]);
        let b = decode(&hm, &off, &z, [1.0, 1.0, 1.0], &region).unwrap();
        assert!((b.center[0] - 0.6).abs() < 1e-15 && (b.center[1] - 0.9).abs() < 1e-15);

        let uniform = Tensor::full(&[h, w, 1], 0.3);
        let b = decode(&uniform, &off, &z, [1.0, 1.0, 1.0], &region).unwrap();
        assert_eq!(b.center, [0.0, 0.0, 0.0]);
    }

    fn random_box(rng: &mut ChaCha8Rng, region: &Region) -> Box3D {
        Box3D::new(
            [
                rng.random_range(region.x_min..region.x_max),
                rng.random_range(region.y_min..region.y_max),
                rng.random_range(region.z_min..region.z_max),
            ],
            [rng.random_range(0.3..5.0), rng.random_range(0.3..3.0), rng.random_range(0.5..2.0)],
            rng.random_range(-3.1..3.1),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_and_heatmap_shape(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let region = car_region();
            let gt = random_box(&mut rng, &region);
            let t = make_targets(&gt, &region, 2).unwrap();
            let (hm, off, z) = t.oracle_maps();
            let b = decode(&hm, &off, &z, gt.size, &region).unwrap();
            prop_assert!((b.center[0] - gt.center[0]).abs() <= 1e-9);
            prop_assert!((b.center[1] - gt.center[1]).abs() <= 1e-9);
            prop_assert_eq!(b.center[2], gt.center[2]);
            prop_assert_eq!(b.yaw, gt.yaw);

            let ones = t.heatmap.data().iter().filter(|&&v| v == 1.0).count();
            prop_assert_eq!(ones, 1);
            prop_assert!(t.heatmap.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // non-increasing in distance among supported cells
            let w = t.dims()[1];
            let mut cells: Vec<(f64, f64)> = t.heatmap.data().iter().enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(k, &v)| {
                    let (i, j) = ((k / w) as f64, (k % w) as f64);
                    let d = ((i - t.center_cell[0] as f64).powi(2) + (j - t.center_cell[1] as f64).powi(2)).sqrt();
                    (d, v)
                })
                .collect();
            cells.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in cells.windows(2) {
                prop_assert!(pair[1].1 <= pair[0].1);
            }
        }

        #[test]
        fn whole_cell_translation_shifts_targets(seed in 0u64..100_000, kx in -3i64..=3, ky in -3i64..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let region = Region::new([0.0, 6.0], [0.0, 6.0], [-2.0, 2.0], 0.3).unwrap();
            let inner = Region::new([2.0, 4.0], [2.0, 4.0], [-1.0, 1.0], 0.3).unwrap();
            let gt = random_box(&mut rng, &inner);
            let moved = Box3D::new(
                [gt.center[0] + kx as f64 * 0.3, gt.center[1] + ky as f64 * 0.3, gt.center[2]],
                gt.size,
                gt.yaw,
            ).unwrap();
            let a = make_targets(&gt, &region, 2).unwrap();
            let b = make_targets(&moved, &region, 2).unwrap();
            prop_assert_eq!(b.center_cell[0] as i64, a.center_cell[0] as i64 + kx);
            prop_assert_eq!(b.center_cell[1] as i64, a.center_cell[1] as i64 + ky);
            prop_assert_eq!(a.offsets.len(), b.offsets.len());
            for ((ca, ta), (cb, tb)) in a.offsets.iter().zip(&b.offsets) {
                prop_assert_eq!(cb[0] as i64, ca[0] as i64 + kx);
                for ch in 0..3 {
                    prop_assert!((ta[ch] - tb[ch]).abs() < 1e-9);
                }
            }
            let [h, w] = a.dims();
            for (k, &va) in a.heatmap.data().iter().enumerate() {
                let (i, j) = ((k / w) as i64 + kx, (k % w) as i64 + ky);
                if va > 0.0 && (0..h as i64).contains(&i) && (0..w as i64).contains(&j) {
                    let vb = b.heatmap.at(&[i as usize, j as usize]);
                    prop_assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn csv_and_pgm_exports() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.5, 1.0 / 3.0, 1.0]).unwrap();
        assert_eq!(map_csv(&t), "0,0.5\n0.333333,1\n");
        let pgm = map_pgm(&t, 0.0, 1.0);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0, 128, 85, 255]);
    }
}
