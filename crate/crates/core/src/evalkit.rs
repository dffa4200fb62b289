//! One-pass evaluation: Success and Precision AUCs, sparsity buckets, and
//! in-box point-count histograms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::geom::{center_distance, count_in_box, iou3d, Box3D};

pub const GRID_POINTS: usize = 21;

/// IoU thresholds `0, 0.05, …, 1`.
pub fn iou_thresholds() -> [f64; GRID_POINTS] {
    std::array::from_fn(|i| i as f64 / 20.0)
}

/// Center-distance thresholds `0, 0.1, …, 2` m.
pub fn distance_thresholds() -> [f64; GRID_POINTS] {
    std::array::from_fn(|i| i as f64 / 10.0)
}

/// IoU this close to 1 counts as an exact overlap.
pub const EXACT_IOU_TOL: f64 = 1e-9;

/// A frame passes threshold `τ` when its IoU exceeds `τ`; an exact overlap
/// passes every threshold.
pub fn passes_iou(iou: f64, tau: f64) -> bool {
    iou > tau || iou >= 1.0 - EXACT_IOU_TOL
}

/// Success AUC (percent) of per-frame IoUs.
pub fn success_from_ious(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Empty("success of zero frames".into()));
    }
    let n = ious.len() as f64;
    let total: f64 = iou_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&v| passes_iou(v, t)).count() as f64 / n)
        .sum();
    Ok(100.0 * total / GRID_POINTS as f64)
}

/// Precision AUC (percent) of per-frame center distances.
pub fn precision_from_distances(dists: &[f64]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::Empty("precision of zero frames".into()));
    }
    let n = dists.len() as f64;
    let total: f64 = distance_thresholds()
        .iter()
        .map(|&t| dists.iter().filter(|&&d| d <= t).count() as f64 / n)
        .sum();
    Ok(100.0 * total / GRID_POINTS as f64)
}

fn check_lengths(preds: &[Box3D], gts: &[Box3D]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Per-frame `(IoU, center distance)`.
pub fn frame_errors(preds: &[Box3D], gts: &[Box3D]) -> Result<Vec<(f64, f64)>> {
    check_lengths(preds, gts)?;
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (iou3d(p, g), center_distance(p, g)))
        .collect())
}

pub fn success(preds: &[Box3D], gts: &[Box3D]) -> Result<f64> {
    let e = frame_errors(preds, gts)?;
    success_from_ious(&e.iter().map(|x| x.0).collect::<Vec<_>>())
}

pub fn precision(preds: &[Box3D], gts: &[Box3D]) -> Result<f64> {
    let e = frame_errors(preds, gts)?;
    precision_from_distances(&e.iter().map(|x| x.1).collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
}

impl Metrics {
    /// `None` for an empty frame set.
    pub fn from_errors(errors: &[(f64, f64)]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let ious: Vec<f64> = errors.iter().map(|e| e.0).collect();
        let dists: Vec<f64> = errors.iter().map(|e| e.1).collect();
        Some(Self {
            success: success_from_ious(&ious).expect("nonempty"),
            precision: precision_from_distances(&dists).expect("nonempty"),
            frames: errors.len(),
        })
    }
}

/// Per-category in-box point thresholds separating sparse from dense frames.
pub fn default_thresholds() -> BTreeMap<String, usize> {
    [("car", 150), ("pedestrian", 100), ("van", 150), ("cyclist", 100)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub category: String,
    /// `sparse` (count ≤ threshold), `dense`, or `unbucketed` for categories
    /// without a threshold.
    pub kind: String,
    pub threshold: Option<usize>,
    pub frames: usize,
    pub success: Option<f64>,
    pub precision: Option<f64>,
}

/// One evaluated frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sequence_id: String,
    pub frame: usize,
    pub category: String,
    pub points_in_box: usize,
    pub iou: f64,
    pub distance: f64,
}

/// Scores every frame of every sequence against its ground truth.
pub fn score_frames(dataset: &[Sequence], results: &BTreeMap<String, Vec<Box3D>>) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for seq in dataset {
        let preds = results
            .get(&seq.id)
            .ok_or_else(|| Error::Data(format!("no results for sequence `{}`", seq.id)))?;
        let gts: Vec<Box3D> = seq.frames.iter().map(|f| f.gt).collect();
        let errs = frame_errors(preds, &gts).map_err(|e| Error::Data(format!("sequence `{}`: {e}", seq.id)))?;
        for (i, (f, (iou, distance))) in seq.frames.iter().zip(errs).enumerate() {
            out.push(FrameRecord {
                sequence_id: seq.id.clone(),
                frame: i,
                category: seq.category.clone(),
                points_in_box: count_in_box(&f.points, &f.gt),
                iou,
                distance,
            });
        }
    }
    Ok(out)
}

/// Splits scored frames by category and in-box point count.
pub fn bucket_frames(frames: &[FrameRecord], thresholds: &BTreeMap<String, usize>) -> Vec<Bucket> {
    let mut groups: BTreeMap<(String, &'static str), Vec<(f64, f64)>> = BTreeMap::new();
    for f in frames {
        let kind = match thresholds.get(&f.category) {
            Some(&t) if f.points_in_box <= t => "sparse",
            Some(_) => "dense",
            None => "unbucketed",
        };
        groups.entry((f.category.clone(), kind)).or_default().push((f.iou, f.distance));
    }
    let mut cats: Vec<&String> = frames.iter().map(|f| &f.category).collect();
    cats.sort();
    cats.dedup();
    let mut out = Vec::new();
    for c in cats {
        let kinds: &[&'static str] = if thresholds.contains_key(c) { &["sparse", "dense"] } else { &["unbucketed"] };
        for &k in kinds {
            let errs = groups.get(&(c.clone(), k)).map_or(&[][..], |v| v.as_slice());
            let m = Metrics::from_errors(errs);
            out.push(Bucket {
                category: c.clone(),
                kind: k.to_string(),
                threshold: thresholds.get(c).copied(),
                frames: errs.len(),
                success: m.as_ref().map(|m| m.success),
                precision: m.as_ref().map(|m| m.precision),
            });
        }
    }
    out
}

pub fn bucket_by_sparsity(
    dataset: &[Sequence],
    results: &BTreeMap<String, Vec<Box3D>>,
    thresholds: &BTreeMap<String, usize>,
) -> Result<Vec<Bucket>> {
    Ok(bucket_frames(&score_frames(dataset, results)?, thresholds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub buckets: Vec<Bucket>,
    pub frames: usize,
    /// The same metrics for a tracker that repeats the frame-0 box.
    pub persistence_baseline: Metrics,
}

/// Frame-0 box repeated over each sequence.
pub fn persistence_results(dataset: &[Sequence]) -> BTreeMap<String, Vec<Box3D>> {
    dataset
        .iter()
        .map(|s| (s.id.clone(), vec![s.frames[0].gt; s.frames.len()]))
        .collect()
}

pub fn evaluate(
    dataset: &[Sequence],
    results: &BTreeMap<String, Vec<Box3D>>,
    thresholds: &BTreeMap<String, usize>,
) -> Result<(EvalReport, Vec<FrameRecord>)> {
    let frames = score_frames(dataset, results)?;
    let errs: Vec<(f64, f64)> = frames.iter().map(|f| (f.iou, f.distance)).collect();
    let overall = Metrics::from_errors(&errs).ok_or_else(|| Error::Empty("dataset has no frames".into()))?;
    let base_frames = score_frames(dataset, &persistence_results(dataset))?;
    let base_errs: Vec<(f64, f64)> = base_frames.iter().map(|f| (f.iou, f.distance)).collect();
    let report = EvalReport {
        overall,
        buckets: bucket_frames(&frames, thresholds),
        frames: frames.len(),
        persistence_baseline: Metrics::from_errors(&base_errs).expect("same frame count"),
    };
    Ok((report, frames))
}

/// Flat per-frame CSV for plotting.
pub fn frames_csv(frames: &[FrameRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for f in frames {
        w.serialize(f).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
}

/// Counts per bin `[e_i, e_{i+1})`, the last bin open-ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(edges: Vec<usize>) -> Result<Self> {
        if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bin edges must be nonempty and strictly increasing"));
        }
        let n = edges.len();
        Ok(Self {
            edges,
            counts: vec![0; n],
        })
    }

    /// Adds one observation; values below the first edge are ignored.
    pub fn add(&mut self, v: usize) {
        if v < self.edges[0] {
            return;
        }
        let bin = self.edges.partition_point(|&e| e <= v) - 1;
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let hi = self.edges.get(i + 1).map_or("inf".to_string(), |e| e.to_string());
            s.push_str(&format!("{},{hi},{c}\n", self.edges[i]));
        }
        s
    }
}

/// Histogram of in-ground-truth-box point counts over every frame.
pub fn point_stats(dataset: &[Sequence], edges: Vec<usize>) -> Result<Histogram> {
    if dataset.is_empty() {
        return Err(Error::Empty("statistics of an empty dataset".into()));
    }
    let mut h = Histogram::new(edges)?;
    for s in dataset {
        for f in &s.frames {
            h.add(count_in_box(&f.points, &f.gt));
        }
    }
    Ok(h)
}
