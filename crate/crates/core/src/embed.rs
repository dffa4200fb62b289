//! Template feature embedding: a global correlation branch, a local
//! most-similar-point branch, and their fusion into the enhanced search
//! features `F`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::nn::{add_mlp, mlp};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-12;

/// Search points with their enhanced features.
#[derive(Clone, Debug)]
pub struct EmbeddedSearch {
    pub coords: Vec<Point>,
    pub features: Var,
}

pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, c: usize, rng: &mut R) -> Result<()> {
    add_mlp(store, "embed.corr", c, &[c, c], rng)?;
    add_mlp(store, "embed.global", c, &[c, c], rng)?;
    add_mlp(store, "embed.local", 2 * c + 4, &[c, c], rng)?;
    add_mlp(store, "embed.fuse", 2 * c, &[c, c], rng)?;
    Ok(())
}

fn check_widths(tape: &Tape, p: Var, q: Var) -> Result<(usize, usize)> {
    let (tp, tq) = (tape.value(p), tape.value(q));
    if tp.rows() == 0 {
        return Err(Error::Empty("template has no feature rows".into()));
    }
    if tp.cols() != tq.cols() {
        return Err(Error::shape(format!(
            "template width {} vs search width {}",
            tp.cols(),
            tq.cols()
        )));
    }
    Ok((tp.rows(), tq.rows()))
}

/// `q'_j = MLP(max_i p_i ∘ w_ij)` with `w_ij = MLP(p_i − q_j)`.
pub fn global_embed(tape: &mut Tape, params: &Bound, p: Var, q: Var) -> Result<Var> {
    let (n, m) = check_widths(tape, p, q)?;
    let c = tape.value(p).cols();
    let diff = tape.pairwise_diff(p, q)?;
    let w = mlp(tape, params, "embed.corr", diff, 2, false)?;
    let tiled = tape.gather_rows(p, (0..m).flat_map(|_| 0..n).collect())?;
    let prod = tape.mul(tiled, w)?;
    let prod = tape.reshape(prod, &[m, n, c])?;
    let (pooled, _) = tape.reduce_max(prod, 1)?;
    mlp(tape, params, "embed.global", pooled, 2, false)
}

/// Cosine similarities `s[j][i]` between search row `j` and template row `i`,
/// with norms clamped at `1e-12` (a zero row has similarity 0 to everything).
pub fn cosine_matrix(p: &Tensor, q: &Tensor) -> Vec<Vec<f64>> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    let pn: Vec<f64> = (0..p.rows()).map(|i| norm(p.row(i))).collect();
    (0..q.rows())
        .map(|j| {
            let qj = q.row(j);
            let nq = norm(qj);
            (0..p.rows())
                .map(|i| p.row(i).iter().zip(qj).map(|(a, b)| a * b).sum::<f64>() / (pn[i] * nq))
                .collect()
        })
        .collect()
}

/// Index of the first maximum.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `q''_j = MLP([q_j, s_kj, p_k, x_k])` where `k` is the template row most
/// cosine-similar to `q_j` (ties to the smallest index).
pub fn local_embed(tape: &mut Tape, params: &Bound, p: Var, template_coords: &[Point], q: Var) -> Result<Var> {
    let (n, _) = check_widths(tape, p, q)?;
    if template_coords.len() != n {
        return Err(Error::shape(format!(
            "{} template coordinates for {n} feature rows",
            template_coords.len()
        )));
    }
    let p_hat = tape.row_normalize(p, NORM_EPS);
    let q_hat = tape.row_normalize(q, NORM_EPS);
    let sims = cosine_matrix(tape.value(p), tape.value(q));
    let k: Vec<usize> = sims.iter().map(|row| first_argmax(row)).collect();

    let matched_hat = tape.gather_rows(p_hat, k.clone())?;
    let prod = tape.mul(matched_hat, q_hat)?;
    let s = tape.sum_last(prod);
    let pk = tape.gather_rows(p, k.clone())?;
    let xk: Vec<f64> = k.iter().flat_map(|&i| template_coords[i]).collect();
    let xk = tape.constant(Tensor::new(vec![k.len(), 3], xk)?);
    let input = tape.concat_last(&[q, s, pk, xk])?;
    mlp(tape, params, "embed.local", input, 2, false)
}

/// `F_j = MLP([q'_j, q''_j])`.
pub fn fuse(tape: &mut Tape, params: &Bound, global: Var, local: Var) -> Result<Var> {
    if tape.value(global).shape() != tape.value(local).shape() {
        return Err(Error::shape(format!(
            "fuse: {:?} vs {:?}",
            tape.value(global).shape(),
            tape.value(local).shape()
        )));
    }
    let cat = tape.concat_last(&[global, local])?;
    mlp(tape, params, "embed.fuse", cat, 2, false)
}

/// Runs both branches and the fusion.
pub fn embed(
    tape: &mut Tape,
    params: &Bound,
    template_feats: Var,
    template_coords: &[Point],
    search_feats: Var,
    search_coords: &[Point],
) -> Result<EmbeddedSearch> {
    let g = global_embed(tape, params, template_feats, search_feats)?;
    let l = local_embed(tape, params, template_feats, template_coords, search_feats)?;
    let f = fuse(tape, params, g, l)?;
    Ok(EmbeddedSearch {
        coords: search_coords.to_vec(),
        features: f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::{jitter_biases, zero_biases};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(c: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        register(&mut s, c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    #[test]
    fn single_template_row_reduces_to_its_weighted_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = store(3, 2);
        let p = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let q = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let (pv, qv) = (tape.constant(p.clone()), tape.constant(q.clone()));
        let out = global_embed(&mut tape, &b, pv, qv).unwrap();

        let mut t2 = Tape::new();
        let b2 = s.bind_frozen(&mut t2);
        let (pv, qv) = (t2.constant(p.clone()), t2.constant(q));
        let d = t2.pairwise_diff(pv, qv).unwrap();
        let w = mlp(&mut t2, &b2, "embed.corr", d, 2, false).unwrap();
        let tiled = t2.gather_rows(pv, vec![0; 4]).unwrap();
        let prod = t2.mul(tiled, w).unwrap();
        let expect = mlp(&mut t2, &b2, "embed.global", prod, 2, false).unwrap();
        assert_eq!(tape.value(out), t2.value(expect));
    }

    #[test]
    fn zero_inputs_and_biases_give_zero() {
        let mut s = store(4, 3);
        zero_biases(&mut s);
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let p = tape.constant(Tensor::zeros(&[3, 4]));
        let q = tape.constant(Tensor::zeros(&[5, 4]));
        let g = global_embed(&mut tape, &b, p, q).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
        let f = fuse(&mut tape, &b, q, q).unwrap();
        assert_eq!(tape.value(f).shape(), &[5, 4]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_template_rejected() {
        let s = store(2, 0);
        let mut tape = Tape::new();
        let b = s.bind_frozen(&mut tape);
        let p = tape.constant(Tensor::zeros(&[0, 2]));
        let q = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(global_embed(&mut tape, &b, p, q), Err(Error::Empty(_))));
    }

    #[test]
    fn global_gradient_wrt_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = store(4, 1);
        jitter_biases(&mut s, 0.1, &mut rng);
        let inputs = [Tensor::randn(&[2, 4], 1.0, &mut rng), Tensor::randn(&[3, 4], 1.0, &mut rng)];
        let r = gradcheck::check(&inputs, 1e-5, |t, v| {
            let b = s.bind_frozen(t);
            let g = global_embed(t, &b, v[0], v[1])?;
            let sq = t.mul(g, g)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    #[test]
    fn proportional_row_is_selected_with_unit_similarity() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 2.0, -1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![1.5, 6.0, -3.0], vec![0.0, 0.0, 4.0]]).unwrap();
        let s = cosine_matrix(&p, &q);
        assert_eq!(first_argmax(&s[0]), 1);
        assert!((s[0][1] - 1.0).abs() < 1e-15);
        // orthogonal pair
        assert_eq!(s[1][0], 0.0);
    }

    #[test]
    fn tied_rows_pick_smallest_index() {
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let s = cosine_matrix(&p, &q);
        assert_eq!(s[0][1], 1.0);
        assert_eq!(s[0][2], 1.0);
        assert_eq!(first_argmax(&s[0]), 1);
    }

    #[test]
    fn zero_rows_have_zero_similarity() {
        let p = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = cosine_matrix(&p, &q);
        assert_eq!(s[0], vec![0.0, 0.0]);
    }

    #[test]
    fn local_and_fused_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = store(4, 5);
        jitter_biases(&mut s, 0.1, &mut rng);
        let coords: Vec<Point> = (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let search: Vec<Point> = (0..5).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let inputs = [Tensor::randn(&[3, 4], 1.0, &mut rng), Tensor::randn(&[5, 4], 1.0, &mut rng)];
        let r = gradcheck::check(&inputs, 1e-5, |t, v| {
            let b = s.bind_frozen(t);
            let l = local_embed(t, &b, v[0], &coords, v[1])?;
            let sq = t.mul(l, l)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);

        let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let q = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let r = gradcheck::check_store(&s, 1e-5, |t, b| {
            let (pv, qv) = (t.constant(p.clone()), t.constant(q.clone()));
            let e = embed(t, b, pv, &coords, qv, &search)?;
            let sq = t.mul(e.features, e.features)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn similarity_bounded_and_argmax_scale_invariant(seed in 0u64..100_000, n in 1usize..12, m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::randn(&[n, 5], 1.0, &mut rng);
            let q = Tensor::randn(&[m, 5], 1.0, &mut rng);
            let s = cosine_matrix(&p, &q);
            for row in &s {
                for &v in row {
                    prop_assert!(v.abs() <= 1.0 + 1e-12);
                }
            }
            let mut scaled = p.clone();
            for i in 0..n {
                let lam: f64 = rng.random_range(0.1..10.0);
                let c = scaled.cols();
                scaled.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= lam);
            }
            let s2 = cosine_matrix(&scaled, &q);
            for (a, b) in s.iter().zip(&s2) {
                prop_assert_eq!(first_argmax(a), first_argmax(b));
            }
        }

        #[test]
        fn global_branch_ignores_template_order(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = store(3, seed);
            let p = Tensor::randn(&[5, 3], 1.0, &mut rng);
            let q = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let perm = [3usize, 0, 4, 2, 1];
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| p.row(i).to_vec()).collect();
            let pp = Tensor::from_rows(&rows).unwrap();
            let run = |pt: &Tensor| {
                let mut tape = Tape::new();
                let b = s.bind_frozen(&mut tape);
                let (pv, qv) = (tape.constant(pt.clone()), tape.constant(q.clone()));
                let g = global_embed(&mut tape, &b, pv, qv).unwrap();
                tape.value(g).clone()
            };
            prop_assert_eq!(run(&p), run(&pp));
        }
    }
}
