//! Training-only shape branch: a background-suppressing gate, feature
//! expansion to a dense point set, global and EdgeConv generation branches,
//! and the dense ground truth it is compared against.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{crop_and_center, resample, Box3D, Point, PointCloud};
use crate::nn::{add_linear, add_mlp, linear, mlp};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, c: usize, branches: usize, rng: &mut R) -> Result<()> {
    add_linear(store, "shape.gate", c, 1, rng)?;
    for r in 0..branches {
        add_mlp(store, &format!("shape.expand{r}"), c, &[c, c], rng)?;
    }
    add_mlp(store, "shape.global", c, &[c, c], rng)?;
    add_mlp(store, "shape.edge", 2 * c, &[c], rng)?;
    add_mlp(store, "shape.out", 2 * c, &[c, 3], rng)?;
    Ok(())
}

/// Number of expansion branches for `points` outputs from `m` features.
pub fn expansion_ratio(points: usize, m: usize) -> Result<usize> {
    if m == 0 || points % m != 0 {
        return Err(Error::invalid(format!(
            "{m} search features do not divide {points} generated points"
        )));
    }
    Ok(points / m)
}

/// `F'_j = σ(F_j·W + b) · F_j`.
pub fn gate(tape: &mut Tape, params: &Bound, f: Var) -> Result<Var> {
    let logits = linear(tape, params, "shape.gate", f)?;
    let g = tape.sigmoid(logits);
    tape.scale_rows(f, g)
}

/// For each row, the `k` nearest other rows in feature space (squared
/// Euclidean), nearest first, ties to the smaller index.
pub fn feature_knn(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows();
    (0..n)
        .map(|i| {
            let xi = x.row(i);
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// One EdgeConv layer: edge features `[h_j, h_n − h_j]` over the feature
/// k-NN graph, a shared layer, and a max over neighbours.
pub fn edge_conv(tape: &mut Tape, params: &Bound, h: Var, k: usize) -> Result<Var> {
    let n = tape.value(h).rows();
    let k = k.min(n.saturating_sub(1));
    if k == 0 {
        return Err(Error::invalid("EdgeConv needs at least two points"));
    }
    let nbrs = feature_knn(tape.value(h), k);
    let centers: Vec<usize> = (0..n).flat_map(|j| std::iter::repeat_n(j, k)).collect();
    let others: Vec<usize> = nbrs.into_iter().flatten().collect();
    let hc = tape.gather_rows(h, centers)?;
    let hn = tape.gather_rows(h, others)?;
    let diff = tape.sub(hn, hc)?;
    let e = tape.concat_last(&[hc, diff])?;
    let y = mlp(tape, params, "shape.edge", e, 1, true)?;
    let c = tape.value(y).cols();
    let y = tape.reshape(y, &[n, k, c])?;
    Ok(tape.reduce_max(y, 1)?.0)
}

/// Generates `points × 3` canonical coordinates from gated features `M×C`.
pub fn generate_shape(tape: &mut Tape, params: &Bound, gated: Var, points: usize, edge_k: usize) -> Result<Var> {
    let (m, c) = (tape.value(gated).rows(), tape.value(gated).cols());
    let r = expansion_ratio(points, m)?;
    let branches = (0..r)
        .map(|i| mlp(tape, params, &format!("shape.expand{i}"), gated, 2, true))
        .collect::<Result<Vec<_>>>()?;
    let h = tape.concat_rows(&branches)?;

    let (pooled, _) = tape.reduce_max(h, 0)?;
    let pooled = tape.reshape(pooled, &[1, c])?;
    let g = mlp(tape, params, "shape.global", pooled, 2, true)?;
    let g = tape.gather_rows(g, vec![0; points])?;

    let l = edge_conv(tape, params, h, edge_k)?;
    let cat = tape.concat_last(&[g, l])?;
    mlp(tape, params, "shape.out", cat, 2, false)
}

/// Symmetric Chamfer distance: squared nearest-neighbour distances summed
/// in both directions.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer distance of an empty set".into()));
    }
    Ok(crate::tensor::chamfer_distance(a, b))
}

/// Dense ground truth: the in-box points of every frame in its box's frame,
/// concatenated and resampled to `points`.
pub fn dense_gt<'a, R, I>(frames: I, points: usize, rng: &mut R) -> Result<PointCloud>
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = (&'a [Point], &'a Box3D)>,
{
    let mut all = Vec::new();
    for (pts, bx) in frames {
        all.extend(crop_and_center(pts, bx).0);
    }
    if all.is_empty() {
        return Err(Error::Data("no points inside any ground-truth box of the sequence".into()));
    }
    resample(&PointCloud::new(all), points, rng)
}
