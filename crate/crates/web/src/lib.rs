//! Browser bindings: heatmap targets, rotated-box IoU, and synthetic BEV
//! frames.

use wasm_bindgen::prelude::*;

use v2b::dataset::{generate_sequence, SceneSpec};
use v2b::geom::{bev_intersection, clip_convex, iou3d, Box3D};
use v2b::localize::{make_targets, Region};

fn js_err(e: v2b::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Heatmap target of one box inside a search region.
#[wasm_bindgen]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    cell: [usize; 2],
    offsets: Vec<f64>,
}

#[wasm_bindgen]
impl Heatmap {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major `rows × cols` values.
    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn center_row(&self) -> usize {
        self.cell[0]
    }

    #[wasm_bindgen(getter)]
    pub fn center_col(&self) -> usize {
        self.cell[1]
    }

    /// `(row, col, dx, dy)` quadruples of the supervised offset square.
    #[wasm_bindgen(getter)]
    pub fn offsets(&self) -> Vec<f64> {
        self.offsets.clone()
    }
}

/// Targets for a `l × w` box at `(x, y)` with `yaw`, in a region spanning
/// the reference footprint plus `margin` per side at voxel size `voxel`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn heatmap_targets(
    x: f64,
    y: f64,
    yaw: f64,
    l: f64,
    w: f64,
    margin: f64,
    voxel: f64,
    radius: usize,
) -> Result<Heatmap, JsError> {
    let region = Region::around([l, w, 1.0], margin, 1.0, voxel).map_err(js_err)?;
    let gt = Box3D::new([x, y, 0.0], [l, w, 1.0], yaw).map_err(js_err)?;
    let t = make_targets(&gt, &region, radius).map_err(js_err)?;
    let [rows, cols] = t.dims();
    Ok(Heatmap {
        rows,
        cols,
        values: t.heatmap.data().to_vec(),
        cell: t.center_cell,
        offsets: t
            .offsets
            .iter()
            .flat_map(|&([i, j], o)| [i as f64, j as f64, o[0], o[1]])
            .collect(),
    })
}

/// IoU of two boxes and their ground-plane overlap.
#[wasm_bindgen]
pub struct Overlap {
    iou: f64,
    area: f64,
    polygon: Vec<f64>,
}

#[wasm_bindgen]
impl Overlap {
    #[wasm_bindgen(getter)]
    pub fn iou(&self) -> f64 {
        self.iou
    }

    #[wasm_bindgen(getter)]
    pub fn area(&self) -> f64 {
        self.area
    }

    /// Intersection polygon as flat `x, y` pairs.
    #[wasm_bindgen(getter)]
    pub fn polygon(&self) -> Vec<f64> {
        self.polygon.clone()
    }
}

fn parse_box(v: &[f64]) -> Result<Box3D, JsError> {
    if v.len() != 7 {
        return Err(JsError::new("a box is [x, y, z, l, w, h, yaw]"));
    }
    Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6]).map_err(js_err)
}

/// Boxes are `[x, y, z, l, w, h, yaw]`.
#[wasm_bindgen]
pub fn box_overlap(a: &[f64], b: &[f64]) -> Result<Overlap, JsError> {
    let (a, b) = (parse_box(a)?, parse_box(b)?);
    Ok(Overlap {
        iou: iou3d(&a, &b),
        area: bev_intersection(&a, &b),
        polygon: clip_convex(&a.bev_corners(), &b.bev_corners()).concat(),
    })
}

/// One frame of a synthetic sequence, seen from above.
#[wasm_bindgen]
pub struct BevFrame {
    points: Vec<f64>,
    corners: Vec<f64>,
    inside: usize,
}

#[wasm_bindgen]
impl BevFrame {
    /// Flat `x, y` pairs.
    #[wasm_bindgen(getter)]
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    /// Ground-truth footprint corners as flat `x, y` pairs.
    #[wasm_bindgen(getter)]
    pub fn corners(&self) -> Vec<f64> {
        self.corners.clone()
    }

    /// Points inside the ground-truth box.
    #[wasm_bindgen(getter)]
    pub fn inside(&self) -> usize {
        self.inside
    }
}

/// Frame `frame` of the default scene generated with `seed`.
#[wasm_bindgen]
pub fn synthetic_frame(seed: u32, frame: usize, occlusion: f64) -> Result<BevFrame, JsError> {
    let spec = SceneSpec {
        seed: seed as u64,
        frames: frame + 1,
        occlusion_prob: occlusion,
        ..SceneSpec::default()
    };
    let seq = generate_sequence(&spec).map_err(js_err)?;
    let f = &seq.frames[frame];
    Ok(BevFrame {
        points: f.points.iter().flat_map(|p| [p[0], p[1]]).collect(),
        corners: f.gt.bev_corners().concat(),
        inside: v2b::geom::count_in_box(&f.points, &f.gt),
    })
}
