//! The full network: Siamese encoder, template embedding, gate (plus the
//! training-only shape generator), and voxel-to-BEV localization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ModelConfig};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::localize::{bev_forward, voxelize, BevOutput, Region, VoxelGrid};
use crate::tensor::{Bound, ParamStore, Tape, Var};
use crate::{backbone, embed, localize, shape_head};

/// First-level point count the encoder produces for a budget of `points`.
pub fn encoded_count(points: usize) -> usize {
    points / 2
}

/// Fresh parameters for every stage, seeded by `model.init_seed`.
pub fn init_params(cfg: &Config) -> Result<ParamStore> {
    let m = &cfg.model;
    let branches = shape_head::expansion_ratio(m.shape_points, encoded_count(cfg.track.search_points))?;
    let mut rng = ChaCha8Rng::seed_from_u64(m.init_seed);
    let mut store = ParamStore::new();
    backbone::register(&mut store, m, &mut rng)?;
    embed::register(&mut store, m.feature_dim, &mut rng)?;
    shape_head::register(&mut store, m.feature_dim, branches, &mut rng)?;
    localize::register(&mut store, m.feature_dim, &mut rng)?;
    Ok(store)
}

/// Everything one forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub bev: BevOutput,
    /// Generated `G×3` canonical shape, when requested.
    pub shape: Option<Var>,
    pub grid: VoxelGrid,
    /// First-level search coordinates the features are attached to.
    pub search_coords: Vec<Point>,
}

/// Runs the network on a template and search area already expressed in
/// the reference box's frame.
pub fn forward(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    heatmap_eps: f64,
    template: &[Point],
    search: &[Point],
    region: &Region,
    with_shape: bool,
) -> Result<Forward> {
    if template.is_empty() || search.is_empty() {
        return Err(Error::Empty("template or search area has no points".into()));
    }
    let t = backbone::encode(tape, params, cfg, template)?;
    let s = backbone::encode(tape, params, cfg, search)?;
    let e = embed::embed(tape, params, t.feats, &t.coords, s.feats, &s.coords)?;
    let gated = shape_head::gate(tape, params, e.features)?;
    let shape = if with_shape {
        Some(shape_head::generate_shape(tape, params, gated, cfg.shape_points, cfg.edge_k)?)
    } else {
        None
    };
    let grid = voxelize(tape, &e.coords, gated, region)?;
    let bev = bev_forward(tape, params, &grid, heatmap_eps)?;
    Ok(Forward {
        bev,
        shape,
        grid,
        search_coords: e.coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Box3D;
    use crate::gradcheck;
    use crate::localize::{focal_loss, make_targets, offset_rot_loss, total_loss, z_loss, LossTerms};
    use crate::nn::jitter_biases;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn toy() -> Config {
        let mut cfg = Config::default();
        cfg.model.feature_dim = 2;
        cfg.model.shape_points = 8;
        cfg.track.search_points = 16;
        cfg.track.template_points = 8;
        cfg
    }

    #[test]
    fn shape_count_must_be_multiple_of_search_features() {
        let mut cfg = toy();
        cfg.model.shape_points = 12;
        assert!(init_params(&cfg).is_err());
        assert!(init_params(&Config::default()).is_ok());
    }

    #[test]
    fn end_to_end_gradient_at_toy_size() {
        let cfg = toy();
        let mut store = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        jitter_biases(&mut store, 0.1, &mut rng);
        let region = Region::around([1.0, 0.8, 1.0], 0.6, 0.6, 0.3).unwrap();
        let template: Vec<Point> = (0..8)
            .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), rng.random_range(-0.5..0.5)])
            .collect();
        let search: Vec<Point> = (0..16)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)])
            .collect();
        let gt = Box3D::new([0.1, -0.05, 0.0], [1.0, 0.8, 1.0], 0.1).unwrap();
        let targets = make_targets(&gt, &region, 2).unwrap();
        let dense = Tensor::new(vec![8, 3], template.concat()).unwrap();
        let mut lc = cfg.loss.clone();
        lc.lambda_shape = 1.0;
        let r = gradcheck::check_store(&store, 1e-5, |t, p| {
            let f = forward(t, p, &cfg.model, 1e-6, &template, &search, &region, true)?;
            let shape = t.chamfer(f.shape.unwrap(), &dense)?;
            let terms = LossTerms {
                shape: Some(shape),
                center: focal_loss(t, f.bev.heatmap, &targets, &lc)?,
                offset: offset_rot_loss(t, f.bev.offset, &targets)?,
                z: z_loss(t, f.bev.z, &targets)?,
            };
            total_loss(t, &terms, &lc)
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }
}
