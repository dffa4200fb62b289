//! Training and tracking protocols: template/search construction, the
//! one-pass tracking loop, and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TemplateScheme, TrackConfig};
use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::geom::{crop_and_center, resample, Box3D, Point, PointCloud};
use crate::localize::{
    decode, focal_loss, make_targets, offset_rot_loss, total_loss, z_loss, LocalizationTargets, LossTerms, Region,
};
use crate::model::{forward, init_params};
use crate::shape_head::dense_gt;
use crate::tensor::{AdamConfig, ParamStore, Tape, Tensor};

/// One training example, expressed in the frame of a jittered reference box.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub template: Vec<Point>,
    pub search: Vec<Point>,
    /// Ground truth relative to `reference`.
    pub gt: Box3D,
    pub reference: Box3D,
    pub region: Region,
}

fn search_region(size: [f64; 3], track: &TrackConfig, voxel: f64) -> Result<Region> {
    Region::around(size, track.search_margin, track.z_half_extent, voxel)
}

/// Frame points inside the region around `reference`, in its frame.
fn crop_region(points: &[Point], reference: &Box3D, region: &Region) -> Vec<Point> {
    points
        .iter()
        .map(|p| reference.to_local(p))
        .filter(|q| region.contains(q))
        .collect()
}

fn jitter<R: Rng + ?Sized>(b: &Box3D, track: &TrackConfig, rng: &mut R) -> Result<Box3D> {
    let mut u = |bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
    let d = [u(track.offset_xy), u(track.offset_xy), u(track.offset_z)];
    let dyaw = u(track.offset_yaw_deg.to_radians());
    Box3D::new(
        [b.center[0] + d[0], b.center[1] + d[1], b.center[2] + d[2]],
        b.size,
        b.yaw + dyaw,
    )
}

/// Builds the training sample for frame `t ≥ 1`. `Ok(None)` means the
/// sample is skipped because its template or search area is empty.
pub fn make_train_sample<R: Rng + ?Sized>(
    seq: &Sequence,
    t: usize,
    cfg: &Config,
    rng: &mut R,
) -> Result<Option<TrainSample>> {
    if t == 0 || t >= seq.frames.len() {
        return Err(Error::invalid(format!(
            "training frame {t} of a {}-frame sequence (need 1 ≤ t < len)",
            seq.frames.len()
        )));
    }
    let track = &cfg.track;
    let first = &seq.frames[0];
    let mut template = crop_and_center(&first.points, &first.gt).0;
    if t > 1 {
        let prev = &seq.frames[t - 1];
        let b = jitter(&prev.gt, track, rng)?;
        template.extend(crop_and_center(&prev.points, &b).0);
    }
    let cur = &seq.frames[t];
    let reference = jitter(&cur.gt, track, rng)?;
    let region = search_region(reference.size, track, cfg.model.voxel_size)?;
    let search = crop_region(&cur.points, &reference, &region);
    if template.is_empty() || search.is_empty() {
        return Ok(None);
    }
    let template = resample(&PointCloud::new(template), track.template_points, rng)?.points;
    let search = resample(&PointCloud::new(search), track.search_points, rng)?.points;
    Ok(Some(TrainSample {
        template,
        search,
        gt: reference.relative(&cur.gt),
        reference,
        region,
    }))
}

/// Canonical object points gathered while tracking one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateMemory {
    /// Points inside the frame-0 ground truth, in its frame.
    pub first: Vec<Point>,
    /// Canonical points of every later non-fallback result, in order.
    pub results: Vec<Vec<Point>>,
    /// Box size carried through the sequence.
    pub size: [f64; 3],
}

impl TemplateMemory {
    pub fn new(first_points: &[Point], first_gt: &Box3D) -> Self {
        Self {
            first: crop_and_center(first_points, first_gt).0,
            results: Vec::new(),
            size: first_gt.size,
        }
    }

    /// Records the canonical points of a tracked result.
    pub fn push(&mut self, frame_points: &[Point], result: &Box3D) {
        let pts = crop_and_center(frame_points, result).0;
        if !pts.is_empty() {
            self.results.push(pts);
        }
    }

    /// Unsampled template for a scheme. Before any result exists, the
    /// previous result is the frame-0 ground truth.
    pub fn template(&self, scheme: TemplateScheme) -> Vec<Point> {
        let prev = self.results.last();
        match (scheme, prev) {
            (TemplateScheme::FirstGt, _) | (_, None) => self.first.clone(),
            (TemplateScheme::PreviousResult, Some(p)) => p.clone(),
            (TemplateScheme::FirstAndPrevious, Some(p)) => [self.first.as_slice(), p].concat(),
            (TemplateScheme::AllPrevious, Some(_)) => {
                let mut all = self.first.clone();
                for r in &self.results {
                    all.extend_from_slice(r);
                }
                all
            }
        }
    }
}

/// Network inputs for one test frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TestInputs {
    pub template: Vec<Point>,
    pub search: Vec<Point>,
    pub reference: Box3D,
    pub region: Region,
}

/// Template from the memory per scheme, search area around the previous
/// result. `Ok(None)` flags an empty search area or template.
pub fn make_test_inputs<R: Rng + ?Sized>(
    memory: &TemplateMemory,
    prev_box: &Box3D,
    frame_points: &[Point],
    cfg: &Config,
    rng: &mut R,
) -> Result<Option<TestInputs>> {
    let track = &cfg.track;
    let region = search_region(prev_box.size, track, cfg.model.voxel_size)?;
    let search = crop_region(frame_points, prev_box, &region);
    let template = memory.template(track.scheme);
    if search.is_empty() || template.is_empty() {
        return Ok(None);
    }
    Ok(Some(TestInputs {
        template: resample(&PointCloud::new(template), track.template_points, rng)?.points,
        search: resample(&PointCloud::new(search), track.search_points, rng)?.points,
        reference: *prev_box,
        region,
    }))
}

/// Predicts the target box in the frame of `inputs.reference`.
pub trait Localizer {
    fn localize(&mut self, frame: usize, inputs: &TestInputs, size: [f64; 3]) -> Result<Box3D>;
}

/// The trained network.
pub struct Network<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a Config,
}

impl Localizer for Network<'_> {
    fn localize(&mut self, _frame: usize, inputs: &TestInputs, size: [f64; 3]) -> Result<Box3D> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let f = forward(
            &mut tape,
            &p,
            &self.cfg.model,
            self.cfg.loss.heatmap_eps,
            &inputs.template,
            &inputs.search,
            &inputs.region,
            false,
        )?;
        decode(
            tape.value(f.bev.heatmap),
            tape.value(f.bev.offset),
            tape.value(f.bev.z),
            size,
            &inputs.region,
        )
    }
}

/// Emits maps that reproduce the localization targets of the true box.
pub struct Oracle {
    pub gts: Vec<Box3D>,
    pub offset_radius: usize,
}

impl Localizer for Oracle {
    fn localize(&mut self, frame: usize, inputs: &TestInputs, size: [f64; 3]) -> Result<Box3D> {
        let gt = inputs.reference.relative(&self.gts[frame]);
        let (hm, off, z) = make_targets(&gt, &inputs.region, self.offset_radius)?.oracle_maps();
        decode(&hm, &off, &z, size, &inputs.region)
    }
}

/// Repeats the reference box.
pub struct Persistence;

impl Localizer for Persistence {
    fn localize(&mut self, _frame: usize, _inputs: &TestInputs, size: [f64; 3]) -> Result<Box3D> {
        Box3D::new([0.0; 3], size, 0.0)
    }
}

/// Output of one tracked sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRun {
    pub sequence_id: String,
    pub boxes: Vec<Box3D>,
    /// Frames whose search area was empty and whose box was carried over.
    pub fallback: Vec<bool>,
    pub millis: Vec<f64>,
}

impl TrackRun {
    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

/// One-pass tracking: frame 0 is the ground truth, each later frame is
/// localized around the previous result.
pub fn track_sequence<L: Localizer>(localizer: &mut L, seq: &Sequence, cfg: &Config) -> Result<TrackRun> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Empty(format!("sequence `{}` has no frames", seq.id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.track.seed);
    let mut memory = TemplateMemory::new(&first.points, &first.gt);
    let mut run = TrackRun {
        sequence_id: seq.id.clone(),
        boxes: vec![first.gt],
        fallback: vec![false],
        millis: vec![0.0],
    };
    for (i, frame) in seq.frames.iter().enumerate().skip(1) {
        let start = Instant::now();
        let prev = *run.boxes.last().expect("frame 0 present");
        let (b, fell_back) = match make_test_inputs(&memory, &prev, &frame.points, cfg, &mut rng)? {
            Some(inputs) => {
                let local = localizer.localize(i, &inputs, memory.size)?;
                let b = inputs.reference.absolute(&local);
                memory.push(&frame.points, &b);
                (b, false)
            }
            None => (prev, true),
        };
        run.boxes.push(b);
        run.fallback.push(fell_back);
        run.millis.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(run)
}

/// Run report for a tracked dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: String,
    pub sequences: Vec<TrackRun>,
    pub fallback_frames: usize,
    pub total_millis: f64,
}

impl RunReport {
    pub fn new(scheme: TemplateScheme, sequences: Vec<TrackRun>) -> Self {
        Self {
            scheme: scheme.name().into(),
            fallback_frames: sequences.iter().map(TrackRun::fallback_count).sum(),
            total_millis: sequences.iter().flat_map(|s| &s.millis).sum(),
            sequences,
        }
    }
}

/// Loss values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub center: f64,
    pub offset: f64,
    pub z: f64,
    pub shape: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub curve: Vec<LossRecord>,
    pub skipped: usize,
}

/// Scalar loss terms and gradients for one sample.
pub struct StepResult {
    pub record: LossRecord,
    pub grads: std::collections::BTreeMap<String, Tensor>,
    /// Predicted heatmap `H×W×1`.
    pub heatmap: Tensor,
}

fn finite(component: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { component, value })
    }
}

/// Forward and backward pass on one sample.
pub fn loss_and_grads(
    params: &ParamStore,
    cfg: &Config,
    sample: &TrainSample,
    targets: &LocalizationTargets,
    dense: Option<&Tensor>,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let f = forward(
        &mut tape,
        &p,
        &cfg.model,
        cfg.loss.heatmap_eps,
        &sample.template,
        &sample.search,
        &sample.region,
        dense.is_some(),
    )?;
    let shape = match (f.shape, dense) {
        (Some(s), Some(d)) => Some(tape.chamfer(s, d)?),
        _ => None,
    };
    let terms = LossTerms {
        shape,
        center: focal_loss(&mut tape, f.bev.heatmap, targets, &cfg.loss)?,
        offset: offset_rot_loss(&mut tape, f.bev.offset, targets)?,
        z: z_loss(&mut tape, f.bev.z, targets)?,
    };
    let total = total_loss(&mut tape, &terms, &cfg.loss)?;
    let record = LossRecord {
        iteration: 0,
        epoch: 0,
        lr: 0.0,
        shape: shape.map(|s| finite("shape", tape.value(s).item())).transpose()?,
        center: finite("center", tape.value(terms.center).item())?,
        offset: finite("offset", tape.value(terms.offset).item())?,
        z: finite("z", tape.value(terms.z).item())?,
        total: finite("total", tape.value(total).item())?,
    };
    let mut g = tape.backward(total)?;
    Ok(StepResult {
        record,
        grads: p.grads(&mut g),
        heatmap: tape.value(f.bev.heatmap).clone(),
    })
}

/// A training sample with its localization targets.
pub type LabeledSample = (TrainSample, LocalizationTargets);

/// Generator of the `k`-th sample's draw in `epoch`; epoch 0 is the only
/// draw when samples are fixed.
pub fn sample_rng(cfg: &Config, k: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let epoch = if cfg.train.resample_each_epoch { epoch } else { 0 };
    rng.set_stream(((epoch as u64) << 32) | k as u64);
    rng
}

/// The sample `train` draws for key `k` in `epoch`; `None` when skipped.
pub fn labeled_sample(
    dataset: &[Sequence],
    cfg: &Config,
    keys: &[(usize, usize)],
    k: usize,
    epoch: usize,
) -> Result<Option<LabeledSample>> {
    let (s, t) = keys[k];
    let mut rng = sample_rng(cfg, k, epoch);
    match make_train_sample(&dataset[s], t, cfg, &mut rng)? {
        Some(sample) => {
            let targets = make_targets(&sample.gt, &sample.region, cfg.loss.offset_radius)?;
            Ok(Some((sample, targets)))
        }
        None => Ok(None),
    }
}

/// Every `(sequence, t)` pair with `t ≥ 1`.
pub fn sample_keys(dataset: &[Sequence]) -> Vec<(usize, usize)> {
    dataset
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.frames.len()).map(move |t| (s, t)))
        .collect()
}

/// Trains fresh parameters.
pub fn train(dataset: &[Sequence], cfg: &Config) -> Result<TrainOutput> {
    train_from(init_params(cfg)?, dataset, cfg, |_| {})
}

/// Trains `params` with Adam and a step-decayed learning rate; one epoch
/// visits every sample once in a seeded shuffled order.
pub fn train_from(
    mut params: ParamStore,
    dataset: &[Sequence],
    cfg: &Config,
    mut observe: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let keys = sample_keys(dataset);
    if keys.is_empty() {
        return Err(Error::Empty("training needs a sequence with at least two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let with_shape = cfg.loss.lambda_shape > 0.0;
    let dense: Vec<Option<Tensor>> = dataset
        .iter()
        .map(|s| -> Result<Option<Tensor>> {
            if !with_shape || s.frames.len() < 2 {
                return Ok(None);
            }
            let pc = dense_gt(
                s.frames.iter().map(|f| (f.points.as_slice(), &f.gt)),
                cfg.model.shape_points,
                &mut rng,
            )?;
            Ok(Some(Tensor::new(vec![pc.len(), 3], pc.flat())?))
        })
        .collect::<Result<_>>()?;

    let mut fixed: Vec<Option<Option<LabeledSample>>> = vec![None; keys.len()];
    let mut order: Vec<usize> = (0..keys.len()).collect();
    let mut curve = Vec::new();
    let mut skipped = 0;
    let cap = cfg.train.max_iterations.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.train.epochs {
        let lr = cfg.train.lr_at(epoch);
        let adam = AdamConfig { lr, ..AdamConfig::default() };
        order.shuffle(&mut rng);
        for &k in &order {
            if curve.len() >= cap {
                break 'epochs;
            }
            if cfg.train.resample_each_epoch || fixed[k].is_none() {
                fixed[k] = Some(labeled_sample(dataset, cfg, &keys, k, epoch)?);
            }
            let s = keys[k].0;
            let Some(Some((sample, targets))) = &fixed[k] else {
                skipped += 1;
                continue;
            };
            let mut step = loss_and_grads(&params, cfg, sample, targets, dense[s].as_ref())?;
            params.adam_step(&step.grads, &adam)?;
            step.record.iteration = curve.len();
            step.record.epoch = epoch;
            step.record.lr = lr;
            observe(&step.record);
            curve.push(step.record);
        }
    }
    Ok(TrainOutput { params, curve, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_sequence, SceneSpec};
    use crate::evalkit::{frame_errors, success};
    use crate::geom::iou3d;

    fn scene(frames: usize, seed: u64) -> Sequence {
        generate_sequence(&SceneSpec {
            frames,
            seed,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn tiny() -> Config {
        let mut cfg = Config::default();
        cfg.model.feature_dim = 4;
        cfg.model.shape_points = 16;
        cfg.track.search_points = 32;
        cfg.track.template_points = 16;
        cfg.train.epochs = 1;
        cfg
    }

    fn still(cfg: &mut Config) {
        cfg.track.offset_xy = 0.0;
        cfg.track.offset_z = 0.0;
        cfg.track.offset_yaw_deg = 0.0;
    }

    #[test]
    fn zero_offsets_give_the_gt_region_grown_by_the_margin() {
        let seq = scene(4, 1);
        let mut cfg = tiny();
        still(&mut cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_train_sample(&seq, 2, &cfg, &mut rng).unwrap().unwrap();
        let gt = seq.frames[2].gt;
        assert_eq!(s.reference, gt);
        assert!((s.region.x_max - (gt.size[0] / 2.0 + 2.0)).abs() < 1e-12);
        assert!((s.region.y_min + (gt.size[1] / 2.0 + 2.0)).abs() < 1e-12);
        assert!(s.gt.center.iter().all(|c| c.abs() < 1e-12) && s.gt.yaw == 0.0);
        assert_eq!(s.search.len(), 32);
        assert_eq!(s.template.len(), 16);
        assert!(s.search.iter().all(|p| s.region.contains(p)));
    }

    #[test]
    fn first_frame_template_comes_from_frame_zero_only() {
        let seq = scene(3, 2);
        let mut cfg = tiny();
        cfg.track.template_points = 4096;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_train_sample(&seq, 1, &cfg, &mut rng).unwrap().unwrap();
        let first = crop_and_center(&seq.frames[0].points, &seq.frames[0].gt).0;
        assert!(s.template.iter().all(|p| first.contains(p)));
        assert!(make_train_sample(&seq, 0, &cfg, &mut rng).is_err());
    }

    #[test]
    fn train_sample_is_seed_deterministic() {
        let seq = scene(5, 3);
        let cfg = tiny();
        let a = make_train_sample(&seq, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_train_sample(&seq, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_template_is_skipped_not_failed() {
        let mut seq = scene(3, 4);
        seq.frames[0].points.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(make_train_sample(&seq, 1, &tiny(), &mut rng).unwrap(), None);
    }

    #[test]
    fn scheme_templates() {
        let b = Box3D::new([0.0; 3], [2.0, 2.0, 2.0], 0.0).unwrap();
        let mut m = TemplateMemory::new(&[[0.1, 0.0, 0.0]], &b);
        for s in TemplateScheme::ALL {
            assert_eq!(m.template(s), vec![[0.1, 0.0, 0.0]]);
        }
        m.push(&[[0.2, 0.0, 0.0]], &b);
        m.push(&[[0.3, 0.0, 0.0], [9.0, 0.0, 0.0]], &b);
        assert_eq!(m.template(TemplateScheme::FirstGt), vec![[0.1, 0.0, 0.0]]);
        assert_eq!(m.template(TemplateScheme::PreviousResult), vec![[0.3, 0.0, 0.0]]);
        assert_eq!(m.template(TemplateScheme::FirstAndPrevious), vec![[0.1, 0.0, 0.0], [0.3, 0.0, 0.0]]);
        assert_eq!(
            m.template(TemplateScheme::AllPrevious),
            vec![[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.3, 0.0, 0.0]]
        );
    }

    #[test]
    fn first_and_previous_matches_first_gt_at_frame_one() {
        let seq = scene(2, 5);
        let mut a = tiny();
        a.track.scheme = TemplateScheme::FirstGt;
        let mut b = tiny();
        b.track.scheme = TemplateScheme::FirstAndPrevious;
        let m = TemplateMemory::new(&seq.frames[0].points, &seq.frames[0].gt);
        let pa = make_test_inputs(&m, &seq.frames[0].gt, &seq.frames[1].points, &a, &mut ChaCha8Rng::seed_from_u64(1));
        let pb = make_test_inputs(&m, &seq.frames[0].gt, &seq.frames[1].points, &b, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pa.unwrap(), pb.unwrap());
    }

    #[test]
    fn oracle_tracks_perfectly() {
        let seq = scene(12, 6);
        let cfg = tiny();
        let mut oracle = Oracle {
            gts: seq.frames.iter().map(|f| f.gt).collect(),
            offset_radius: 2,
        };
        let run = track_sequence(&mut oracle, &seq, &cfg).unwrap();
        let gts: Vec<Box3D> = seq.frames.iter().map(|f| f.gt).collect();
        for (iou, d) in frame_errors(&run.boxes, &gts).unwrap() {
            assert!(iou > 1.0 - 1e-9 && d < 1e-9, "{iou} {d}");
        }
        assert_eq!(success(&run.boxes, &gts).unwrap(), 100.0);
        assert_eq!(run.fallback_count(), 0);
    }

    #[test]
    fn persistence_repeats_frame_zero() {
        let seq = scene(8, 7);
        let run = track_sequence(&mut Persistence, &seq, &tiny()).unwrap();
        assert!(run.boxes.iter().all(|b| *b == seq.frames[0].gt));
    }

    #[test]
    fn empty_search_falls_back_to_previous_box() {
        let mut seq = scene(4, 8);
        seq.frames[2].points.clear();
        let mut oracle = Oracle {
            gts: seq.frames.iter().map(|f| f.gt).collect(),
            offset_radius: 2,
        };
        let run = track_sequence(&mut oracle, &seq, &tiny()).unwrap();
        assert_eq!(run.fallback, vec![false, false, true, false]);
        assert_eq!(run.boxes[2], run.boxes[1]);
        assert!(iou3d(&run.boxes[3], &seq.frames[3].gt) > 0.999);
        let report = RunReport::new(TemplateScheme::FirstGt, vec![run]);
        assert_eq!(report.fallback_frames, 1);
    }

    #[test]
    fn network_tracking_is_deterministic_and_valid() {
        let seq = scene(4, 9);
        let cfg = tiny();
        let params = init_params(&cfg).unwrap();
        let mut net = Network { params: &params, cfg: &cfg };
        let a = track_sequence(&mut net, &seq, &cfg).unwrap();
        let b = track_sequence(&mut net, &seq, &cfg).unwrap();
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.boxes.len(), 4);
        assert!(a.boxes.iter().all(|b| b.center.iter().all(|c| c.is_finite())));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = vec![scene(3, 10)];
        let mut cfg = tiny();
        cfg.train.lr = 0.0;
        let init = init_params(&cfg).unwrap();
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.curve.len(), 2);
        for (name, t) in init.iter() {
            assert_eq!(out.params.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = vec![scene(3, 11), scene(2, 12)];
        let mut cfg = tiny();
        cfg.train.epochs = 2;
        cfg.train.max_iterations = Some(5);
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.curve.len(), 5);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert!(a.curve.iter().all(|r| r.shape.is_some()));
    }

    #[test]
    fn non_finite_loss_names_its_component() {
        let ds = vec![scene(2, 13)];
        let cfg = tiny();
        let mut params = init_params(&cfg).unwrap();
        params.get_mut("loc.z.1.b").unwrap().data_mut()[0] = f64::NAN;
        let err = train_from(params, &ds, &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite { component: "z", .. }), "{err}");
    }

    #[test]
    fn lr_follows_the_decay_schedule() {
        let ds = vec![scene(2, 14)];
        let mut cfg = tiny();
        cfg.train.epochs = 13;
        cfg.loss.lambda_shape = 0.0;
        let out = train(&ds, &cfg).unwrap();
        let lr = |e: usize| out.curve.iter().find(|r| r.epoch == e).unwrap().lr;
        assert!((lr(6) - 2e-4).abs() < 1e-18);
        assert!((lr(12) - 4e-5).abs() < 1e-18);
        assert!(out.curve.iter().all(|r| r.shape.is_none()));
    }
}
