//! Synthetic tracking sequences, their JSON Lines persistence, and the
//! results CSV used to score external trackers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geom::{normalize_yaw, Box3D, Point};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    CuboidShell,
    EllipsoidShell,
}

/// Parameters of one synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub category: String,
    pub archetype: Archetype,
    /// Object extent `(l, w, h)` before noise padding.
    pub size: [f64; 3],
    pub initial_center: Point,
    pub initial_yaw: f64,
    /// Displacement per frame (m).
    pub velocity: [f64; 3],
    /// Yaw change per frame (rad).
    pub yaw_rate: f64,
    /// Inclusive range of object points sampled per frame.
    pub points_band: [usize; 2],
    /// Clutter points per square metre of the clutter window.
    pub clutter_density: f64,
    /// Clutter is scattered this far beyond the box footprint (m).
    pub clutter_margin: f64,
    /// Clutter height above the box bottom (m).
    pub clutter_height: f64,
    /// Probability that a frame loses an angular sector of the object.
    pub occlusion_prob: f64,
    /// Half-angle of the dropped sector (rad).
    pub occlusion_half_angle: f64,
    /// Standard deviation of surface noise along the normal (m), truncated at 3σ.
    pub surface_noise: f64,
    /// Standard deviation of per-frame pose jitter (m and rad), truncated at 3σ.
    pub pose_jitter: f64,
    pub yaw_jitter: f64,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            category: "car".into(),
            archetype: Archetype::CuboidShell,
            size: [3.9, 1.6, 1.5],
            initial_center: [0.0, 0.0, 0.75],
            initial_yaw: 0.0,
            velocity: [0.4, 0.05, 0.0],
            yaw_rate: 0.01,
            points_band: [40, 400],
            clutter_density: 2.0,
            clutter_margin: 3.0,
            clutter_height: 1.5,
            occlusion_prob: 0.3,
            occlusion_half_angle: PI / 4.0,
            surface_noise: 0.02,
            pose_jitter: 0.02,
            yaw_jitter: 0.01,
            frames: 20,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.frames == 0 {
            return bad("frame count must be at least 1");
        }
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return bad("object size must be positive");
        }
        if self.points_band[0] > self.points_band[1] {
            return bad("points band must satisfy min ≤ max");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion probability must lie in [0, 1]");
        }
        if self.clutter_density < 0.0 || self.clutter_margin < 0.0 || self.clutter_height < 0.0 {
            return bad("clutter parameters must be non-negative");
        }
        if self.surface_noise < 0.0 || self.pose_jitter < 0.0 || self.yaw_jitter < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=PI).contains(&self.occlusion_half_angle) {
            return bad("occlusion half-angle must lie in [0, π]");
        }
        Ok(())
    }

    /// Ground-truth box size: the object grown by the noise bound on every side.
    pub fn box_size(&self) -> [f64; 3] {
        self.size.map(|s| s + 6.0 * self.surface_noise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub points: Vec<Point>,
    pub gt: Box3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub category: String,
    pub frames: Vec<Frame>,
    pub spec: Option<SceneSpec>,
}

fn truncated<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, std).expect("finite std");
    n.sample(rng).clamp(-3.0 * std, 3.0 * std)
}

/// A point on the object surface in its own frame, displaced along the
/// surface normal by truncated Gaussian noise.
fn surface_point<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Point {
    let [l, w, h] = spec.size;
    let (a, b, c) = (l / 2.0, w / 2.0, h / 2.0);
    let noise = truncated(spec.surface_noise, rng);
    match spec.archetype {
        Archetype::CuboidShell => {
            let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while pick >= areas[face] && face < 5 {
                pick -= areas[face];
                face += 1;
            }
            let (u, v) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [sign * (a + noise), u * b, v * c],
                1 => [u * a, sign * (b + noise), v * c],
                _ => [u * a, v * b, sign * (c + noise)],
            }
        }
        Archetype::EllipsoidShell => {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            let p = [a * r * phi.cos(), b * r * phi.sin(), c * z];
            let n = [p[0] / (a * a), p[1] / (b * b), p[2] / (c * c)];
            let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            [0, 1, 2].map(|k| p[k] + noise * n[k] / nn)
        }
    }
}

/// Deterministic sequence from a spec; the id is left empty for the caller.
pub fn generate_sequence(spec: &SceneSpec) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.box_size();
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let tf = t as f64;
        let center = [0, 1, 2].map(|k| spec.initial_center[k] + spec.velocity[k] * tf + truncated(spec.pose_jitter, &mut rng));
        let yaw = normalize_yaw(spec.initial_yaw + spec.yaw_rate * tf + truncated(spec.yaw_jitter, &mut rng));
        let gt = Box3D::new(center, size, yaw)?;

        let count = rng.random_range(spec.points_band[0]..=spec.points_band[1]);
        let mut local: Vec<Point> = (0..count).map(|_| surface_point(spec, &mut rng)).collect();
        if rng.random_bool(spec.occlusion_prob) {
            let mid = rng.random_range(-PI..PI);
            local.retain(|p| normalize_yaw(p[1].atan2(p[0]) - mid).abs() > spec.occlusion_half_angle);
        }
        let mut points: Vec<Point> = local.iter().map(|p| gt.to_world(p)).collect();

        let reach_x = size[0] / 2.0 + spec.clutter_margin;
        let reach_y = size[1] / 2.0 + spec.clutter_margin;
        let clutter = (spec.clutter_density * 4.0 * reach_x * reach_y).round() as usize;
        let bottom = center[2] - size[2] / 2.0;
        let (mut placed, mut attempts) = (0, 0);
        while placed < clutter && attempts < 100 * clutter {
            attempts += 1;
            let p = gt.to_world(&[
                rng.random_range(-reach_x..=reach_x),
                rng.random_range(-reach_y..=reach_y),
                0.0,
            ]);
            let p = [p[0], p[1], bottom + rng.random_range(-0.1..=spec.clutter_height.max(0.0) + 1e-9)];
            if !gt.contains(&p) {
                points.push(p);
                placed += 1;
            }
        }
        frames.push(Frame { points, gt });
    }
    Ok(Sequence {
        id: String::new(),
        category: spec.category.clone(),
        frames,
        spec: Some(spec.clone()),
    })
}

/// `count` sequences with seeds `seed + i` and ids `seq0000`, `seq0001`, ….
pub fn generate_dataset(spec: &SceneSpec, seed: u64, count: usize) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|i| {
            let s = SceneSpec {
                seed: seed.wrapping_add(i as u64),
                ..spec.clone()
            };
            let mut seq = generate_sequence(&s)?;
            seq.id = format!("seq{i:04}");
            Ok(seq)
        })
        .collect()
}

/// Rounds to nine significant digits, the precision of every text format.
pub fn round9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn point_json(p: &Point) -> Value {
    json!([round9(p[0]), round9(p[1]), round9(p[2])])
}

fn box_json(b: &Box3D) -> Value {
    json!({"c": point_json(&b.center), "s": point_json(&b.size), "yaw": round9(b.yaw)})
}

pub fn sequence_to_json(seq: &Sequence) -> String {
    let frames: Vec<Value> = seq
        .frames
        .iter()
        .map(|f| json!({"points": f.points.iter().map(point_json).collect::<Vec<_>>(), "box": box_json(&f.gt)}))
        .collect();
    let spec = seq.spec.as_ref().map_or(Value::Null, |s| serde_json::to_value(s).expect("spec serializes"));
    json!({"id": seq.id, "category": seq.category, "frames": frames, "spec": spec}).to_string()
}

pub fn save_dataset(sequences: &[Sequence], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sequences {
        writeln!(out, "{}", sequence_to_json(s))?;
    }
    out.flush()?;
    Ok(())
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    fn get<'v>(&self, v: &'v Value, key: &str, field: &str) -> Result<&'v Value> {
        v.get(key).ok_or_else(|| self.err(field, "missing"))
    }

    fn str(&self, v: &Value, key: &str) -> Result<String> {
        self.get(v, key, key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(key, "expected a string"))
    }

    fn num(&self, v: &Value, field: &str) -> Result<f64> {
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(field, "expected a finite number"))
    }

    fn triple(&self, v: &Value, field: &str) -> Result<[f64; 3]> {
        let a = v.as_array().filter(|a| a.len() == 3).ok_or_else(|| self.err(field, "expected [x, y, z]"))?;
        Ok([self.num(&a[0], field)?, self.num(&a[1], field)?, self.num(&a[2], field)?])
    }
}

/// Parses one dataset line. `line` is 1-based and only used in errors.
pub fn parse_sequence(text: &str, path: &Path, line: usize) -> Result<Sequence> {
    let cx = LineCtx { path, line };
    let v: Value = serde_json::from_str(text).map_err(|e| cx.err("<json>", e.to_string()))?;
    let id = cx.str(&v, "id")?;
    let category = cx.str(&v, "category")?;
    let raw_frames = cx
        .get(&v, "frames", "frames")?
        .as_array()
        .ok_or_else(|| cx.err("frames", "expected an array"))?;
    if raw_frames.is_empty() {
        return Err(cx.err("frames", "a sequence needs at least one frame"));
    }
    let mut frames = Vec::with_capacity(raw_frames.len());
    for (k, f) in raw_frames.iter().enumerate() {
        let pf = format!("frames[{k}].points");
        let pts = cx
            .get(f, "points", &pf)?
            .as_array()
            .ok_or_else(|| cx.err(&pf, "expected an array"))?;
        let points = pts
            .iter()
            .enumerate()
            .map(|(i, p)| cx.triple(p, &format!("{pf}[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let bf = format!("frames[{k}].box");
        let b = cx.get(f, "box", &bf)?;
        let c = cx.triple(cx.get(b, "c", &format!("{bf}.c"))?, &format!("{bf}.c"))?;
        let s = cx.triple(cx.get(b, "s", &format!("{bf}.s"))?, &format!("{bf}.s"))?;
        let yaw = cx.num(cx.get(b, "yaw", &format!("{bf}.yaw"))?, &format!("{bf}.yaw"))?;
        let gt = Box3D::new(c, s, yaw).map_err(|e| cx.err(&bf, e.to_string()))?;
        frames.push(Frame { points, gt });
    }
    let spec = match v.get("spec") {
        None | Some(Value::Null) => None,
        Some(s) => Some(serde_json::from_value(s.clone()).map_err(|e| cx.err("spec", e.to_string()))?),
    };
    Ok(Sequence {
        id,
        category,
        frames,
        spec,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sequence>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sequence(line, path, i + 1)?);
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &out {
        if !seen.insert(&s.id) {
            return Err(Error::Data(format!("{}: duplicate sequence id `{}`", path.display(), s.id)));
        }
    }
    Ok(out)
}

/// One row of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sequence_id: String,
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

/// Writes per-frame boxes for each sequence, in the given order.
pub fn write_results<W: std::io::Write>(results: &[(String, Vec<Box3D>)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (id, boxes) in results {
        for (frame, b) in boxes.iter().enumerate() {
            w.serialize(ResultRow {
                sequence_id: id.clone(),
                frame,
                cx: round9(b.center[0]),
                cy: round9(b.center[1]),
                cz: round9(b.center[2]),
                l: round9(b.size[0]),
                w: round9(b.size[1]),
                h: round9(b.size[2]),
                yaw: round9(b.yaw),
            })
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a results CSV and checks it against the dataset: every row names
/// a known sequence and every sequence gets each of its frames exactly once.
pub fn import_results(path: &Path, dataset: &[Sequence]) -> Result<BTreeMap<String, Vec<Box3D>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let lengths: BTreeMap<&str, usize> = dataset.iter().map(|s| (s.id.as_str(), s.frames.len())).collect();
    let mut slots: BTreeMap<String, Vec<Option<Box3D>>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<ResultRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            field: e.position().map_or("<row>".into(), |_| "<row>".to_string()),
            msg: e.to_string(),
        })?;
        let n = *lengths
            .get(row.sequence_id.as_str())
            .ok_or_else(|| Error::Data(format!("line {line}: unknown sequence id `{}`", row.sequence_id)))?;
        if row.frame >= n {
            return Err(Error::Data(format!(
                "line {line}: sequence `{}` has {n} frames, got frame {}",
                row.sequence_id, row.frame
            )));
        }
        let b = Box3D::new([row.cx, row.cy, row.cz], [row.l, row.w, row.h], row.yaw)
            .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let s = slots.entry(row.sequence_id.clone()).or_insert_with(|| vec![None; n]);
        if s[row.frame].replace(b).is_some() {
            return Err(Error::Data(format!(
                "line {line}: sequence `{}` frame {} given twice",
                row.sequence_id, row.frame
            )));
        }
    }
    let mut out = BTreeMap::new();
    for seq in dataset {
        let s = slots
            .remove(&seq.id)
            .ok_or_else(|| Error::Data(format!("no results for sequence `{}`", seq.id)))?;
        let missing = s.iter().filter(|b| b.is_none()).count();
        if missing > 0 {
            return Err(Error::Data(format!(
                "sequence `{}`: {missing} of {} frames missing",
                seq.id,
                s.len()
            )));
        }
        out.insert(seq.id.clone(), s.into_iter().map(|b| b.expect("checked")).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::count_in_box;
    use tempfile::tempdir;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            frames: 4,
            points_band: [30, 60],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(&small_spec(), 7, 2).unwrap();
        let b = generate_dataset(&small_spec(), 7, 2).unwrap();
        assert_eq!(sequence_to_json(&a[1]), sequence_to_json(&b[1]));
        assert_ne!(sequence_to_json(&a[0]), sequence_to_json(&a[1]));
        assert_eq!(a[1].spec.as_ref().unwrap().seed, 8);
    }

    #[test]
    fn exact_object_count_without_occlusion() {
        let spec = SceneSpec {
            occlusion_prob: 0.0,
            points_band: [100, 100],
            frames: 5,
            ..SceneSpec::default()
        };
        let seq = generate_sequence(&spec).unwrap();
        for f in &seq.frames {
            assert_eq!(count_in_box(&f.points, &f.gt), 100);
        }
    }

    #[test]
    fn static_object_moves_only_within_jitter() {
        let spec = SceneSpec {
            velocity: [0.0; 3],
            yaw_rate: 0.0,
            frames: 10,
            ..SceneSpec::default()
        };
        let seq = generate_sequence(&spec).unwrap();
        let bound = 3.0 * spec.pose_jitter + 1e-12;
        for f in &seq.frames {
            for k in 0..3 {
                assert!((f.gt.center[k] - spec.initial_center[k]).abs() <= bound);
            }
            assert!((f.gt.yaw - spec.initial_yaw).abs() <= 3.0 * spec.yaw_jitter + 1e-12);
            assert_eq!(f.gt.size, spec.box_size());
        }
    }

    fn cuboid_distance(p: &Point, half: [f64; 3]) -> f64 {
        let q = [p[0].abs() - half[0], p[1].abs() - half[1], p[2].abs() - half[2]];
        let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = q[0].max(q[1]).max(q[2]).min(0.0);
        (outside + inside).abs()
    }

    /// Closest-point distance to an axis-aligned ellipsoid: the foot point is
    /// `a²q / (t + a²)` for the root `t` of `Σ (a q / (t + a²))² = 1`.
    fn ellipsoid_distance(q: &Point, half: [f64; 3]) -> f64 {
        let a2 = half.map(|a| a * a);
        let f = |t: f64| (0..3).map(|k| (half[k] * q[k] / (t + a2[k])).powi(2)).sum::<f64>() - 1.0;
        let min_a2 = a2.iter().cloned().fold(f64::INFINITY, f64::min);
        let (mut lo, mut hi) = (-min_a2 + 1e-15, 1.0);
        while f(hi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        let foot = [0, 1, 2].map(|k| a2[k] * q[k] / (t + a2[k]));
        crate::geom::sq_dist(q, &foot).sqrt()
    }

    #[test]
    fn object_points_lie_on_the_surface() {
        for archetype in [Archetype::CuboidShell, Archetype::EllipsoidShell] {
            let spec = SceneSpec {
                archetype,
                clutter_density: 0.0,
                surface_noise: 0.03,
                frames: 3,
                ..SceneSpec::default()
            };
            let seq = generate_sequence(&spec).unwrap();
            let half = spec.size.map(|s| s / 2.0);
            for f in &seq.frames {
                for p in &f.points {
                    let q = f.gt.to_local(p);
                    let d = match archetype {
                        Archetype::CuboidShell => cuboid_distance(&q, half),
                        Archetype::EllipsoidShell => ellipsoid_distance(&q, half),
                    };
                    assert!(d <= 3.0 * spec.surface_noise + 1e-6, "{archetype:?} {d}");
                    assert!(f.gt.contains(p));
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SceneSpec { frames: 0, ..SceneSpec::default() },
            SceneSpec { points_band: [5, 4], ..SceneSpec::default() },
            SceneSpec { occlusion_prob: 1.5, ..SceneSpec::default() },
        ];
        for s in bad {
            assert!(generate_sequence(&s).is_err());
        }
    }

    #[test]
    fn save_load_round_trip_and_idempotence() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&[], &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(load_dataset(&p).unwrap().is_empty());

        let seqs = generate_dataset(&small_spec(), 3, 2).unwrap();
        save_dataset(&seqs, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in seqs.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.spec, b.spec);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (pa, pb) in fa.points.iter().zip(&fb.points) {
                    for k in 0..3 {
                        assert!((pa[k] - pb[k]).abs() <= 1e-7);
                    }
                }
                assert!((fa.gt.yaw - fb.gt.yaw).abs() <= 1e-8);
            }
        }
        let first = std::fs::read(&p).unwrap();
        let p2 = dir.path().join("e.jsonl");
        save_dataset(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), first);
    }

    #[test]
    fn malformed_lines_name_line_and_field() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let seqs = generate_dataset(&small_spec(), 3, 2).unwrap();
        save_dataset(&seqs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2];
        lines[1] = cut;
        std::fs::write(&p, lines.join("\n")).unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let bad = r#"{"id":"a","category":"car","frames":[{"points":[[0,0]],"box":{"c":[0,0,0],"s":[1,1,1],"yaw":0}}]}"#;
        match parse_sequence(bad, Path::new("x"), 9) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 9);
                assert_eq!(field, "frames[0].points[0]");
            }
            other => panic!("{other:?}"),
        }
        let bad = r#"{"id":"a","category":"car","frames":[{"points":[],"box":{"c":[0,0,0],"s":[1,-1,1],"yaw":0}}]}"#;
        assert!(matches!(parse_sequence(bad, Path::new("x"), 1), Err(Error::Parse { field, .. }) if field == "frames[0].box"));
    }

    #[test]
    fn results_import_orders_and_validates() {
        let dir = tempdir().unwrap();
        let seqs = generate_dataset(&small_spec(), 1, 2).unwrap();
        let gts: Vec<(String, Vec<Box3D>)> = seqs
            .iter()
            .map(|s| (s.id.clone(), s.frames.iter().map(|f| f.gt).collect()))
            .collect();
        let p = dir.path().join("r.csv");
        let mut buf = Vec::new();
        write_results(&gts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sequence_id,frame,cx,cy,cz,l,w,h,yaw\n"));

        let mut rows: Vec<&str> = text.lines().skip(1).collect();
        rows.reverse();
        std::fs::write(&p, format!("sequence_id,frame,cx,cy,cz,l,w,h,yaw\n{}\n", rows.join("\n"))).unwrap();
        let got = import_results(&p, &seqs).unwrap();
        for (id, boxes) in &gts {
            for (a, b) in boxes.iter().zip(&got[id]) {
                assert!((a.center[0] - b.center[0]).abs() < 1e-7);
            }
        }

        rows.remove(0);
        std::fs::write(&p, format!("sequence_id,frame,cx,cy,cz,l,w,h,yaw\n{}\n", rows.join("\n"))).unwrap();
        let err = import_results(&p, &seqs).unwrap_err().to_string();
        assert!(err.contains("seq0001"), "{err}");

        std::fs::write(&p, "sequence_id,frame,cx,cy,cz,l,w,h,yaw\nnope,0,0,0,0,1,1,1,0\n").unwrap();
        assert!(import_results(&p, &seqs).unwrap_err().to_string().contains("unknown sequence"));
    }
}
