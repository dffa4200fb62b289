//! Shared-weight point encoder: three set-abstraction layers followed by
//! three feature-propagation layers that decode back to the first
//! set-abstraction level.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geom::{ball_query, farthest_point_sample, sq_dist, Point};
use crate::nn::{add_mlp, mlp};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Points with a row-aligned feature matrix on a tape.
#[derive(Clone, Debug)]
pub struct PointFeatures {
    pub coords: Vec<Point>,
    pub feats: Var,
}

const FP_EPS: f64 = 1e-10;

/// Registers all encoder parameters under `backbone.*`.
pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let c = cfg.feature_dim;
    add_mlp(store, "backbone.sa1", 3, &[c, c], rng)?;
    add_mlp(store, "backbone.sa2", 3 + c, &[2 * c, 2 * c], rng)?;
    add_mlp(store, "backbone.sa3", 3 + 2 * c, &[2 * c, 2 * c], rng)?;
    add_mlp(store, "backbone.fp3", 4 * c, &[2 * c, 2 * c], rng)?;
    add_mlp(store, "backbone.fp2", 3 * c, &[c, c], rng)?;
    add_mlp(store, "backbone.fp1", 2 * c, &[c, c], rng)?;
    Ok(())
}

/// Set abstraction: FPS to `out_count` centers, ball-query groups, then a
/// shared MLP over `[p − center, f]` and a max over each group.
#[allow(clippy::too_many_arguments)]
pub fn sa_layer(
    tape: &mut Tape,
    params: &Bound,
    name: &str,
    coords: &[Point],
    feats: Option<Var>,
    out_count: usize,
    radius: f64,
    max_samples: usize,
    layers: usize,
) -> Result<PointFeatures> {
    if let Some(f) = feats {
        if tape.value(f).rows() != coords.len() {
            return Err(Error::shape(format!(
                "{name}: {} coordinates vs {} feature rows",
                coords.len(),
                tape.value(f).rows()
            )));
        }
    }
    let centers_idx = farthest_point_sample(coords, out_count)?;
    let centers: Vec<Point> = centers_idx.iter().map(|&i| coords[i]).collect();
    let groups = ball_query(&centers, coords, radius, max_samples)?;

    let flat: Vec<usize> = groups.iter().flatten().copied().collect();
    let mut rel = Vec::with_capacity(flat.len() * 3);
    for (g, c) in groups.iter().zip(&centers) {
        for &i in g {
            rel.extend((0..3).map(|a| coords[i][a] - c[a]));
        }
    }
    let rel = tape.constant(Tensor::new(vec![flat.len(), 3], rel)?);
    let input = match feats {
        Some(f) => {
            let gathered = tape.gather_rows(f, flat)?;
            tape.concat_last(&[rel, gathered])?
        }
        None => rel,
    };
    let h = mlp(tape, params, name, input, layers, true)?;
    let width = tape.value(h).cols();
    let h = tape.reshape(h, &[out_count, max_samples, width])?;
    let (pooled, _) = tape.reduce_max(h, 1)?;
    Ok(PointFeatures {
        coords: centers,
        feats: pooled,
    })
}

/// Inverse-squared-distance weights from the (up to) three nearest sparse
/// points of each dense point. Distances are clamped at `1e-10`; ties in
/// the neighbour ranking go to the smaller sparse index.
pub fn interp_weights(sparse: &[Point], dense: &[Point]) -> Result<Vec<Vec<(usize, f64)>>> {
    if sparse.is_empty() {
        return Err(Error::Empty("feature propagation from an empty sparse set".into()));
    }
    let k = sparse.len().min(3);
    Ok(dense
        .iter()
        .map(|p| {
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (i, s) in sparse.iter().enumerate() {
                let d2 = sq_dist(p, s);
                if best.len() < k || d2 < best[k - 1].0 {
                    let pos = best.partition_point(|&(bd, _)| bd <= d2);
                    best.insert(pos, (d2, i));
                    best.truncate(k);
                }
            }
            let w: Vec<(usize, f64)> = best
                .iter()
                .map(|&(d2, i)| {
                    let d = d2.sqrt().max(FP_EPS);
                    (i, 1.0 / (d * d))
                })
                .collect();
            let total: f64 = w.iter().map(|x| x.1).sum();
            w.into_iter().map(|(i, x)| (i, x / total)).collect()
        })
        .collect())
}

/// Feature propagation: interpolate `sparse` features onto `dense_coords`,
/// concatenate the dense level's own features, and apply a shared MLP.
pub fn fp_layer(
    tape: &mut Tape,
    params: &Bound,
    name: &str,
    sparse: &PointFeatures,
    dense_coords: &[Point],
    dense_feats: Option<Var>,
    layers: usize,
    relu_last: bool,
) -> Result<Var> {
    let w = interp_weights(&sparse.coords, dense_coords)?;
    let interp = tape.mix_rows(sparse.feats, w)?;
    let input = match dense_feats {
        Some(f) => tape.concat_last(&[interp, f])?,
        None => interp,
    };
    mlp(tape, params, name, input, layers, relu_last)
}

/// Encodes a resampled cloud into first-level points with `C` features.
/// Template and search area go through the same parameters.
pub fn encode(tape: &mut Tape, params: &Bound, cfg: &ModelConfig, coords: &[Point]) -> Result<PointFeatures> {
    let k = coords.len();
    if k < 8 {
        return Err(Error::invalid(format!("encoder needs at least 8 points, got {k}")));
    }
    let [r1, r2, r3] = cfg.sa_radii;
    let s = cfg.group_size;
    let l1 = sa_layer(tape, params, "backbone.sa1", coords, None, k / 2, r1, s, 2)?;
    let l2 = sa_layer(tape, params, "backbone.sa2", &l1.coords, Some(l1.feats), k / 4, r2, s, 2)?;
    let l3 = sa_layer(tape, params, "backbone.sa3", &l2.coords, Some(l2.feats), k / 8, r3, s, 2)?;

    let f2 = fp_layer(tape, params, "backbone.fp3", &l3, &l2.coords, Some(l2.feats), 2, true)?;
    let up2 = PointFeatures {
        coords: l2.coords,
        feats: f2,
    };
    let f1 = fp_layer(tape, params, "backbone.fp2", &up2, &l1.coords, Some(l1.feats), 2, true)?;
    let up1 = PointFeatures {
        coords: l1.coords.clone(),
        feats: f1,
    };
    let out = fp_layer(tape, params, "backbone.fp1", &up1, &l1.coords, Some(l1.feats), 2, false)?;
    Ok(PointFeatures {
        coords: l1.coords,
        feats: out,
    })
}
