use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use v2b::config::{Config, TemplateScheme};
use v2b::dataset::{generate_dataset, import_results, load_dataset, save_dataset, write_results, SceneSpec, Sequence};
use v2b::evalkit::{default_thresholds, evaluate, frames_csv, point_stats};
use v2b::harness::{make_test_inputs, track_sequence, train_from, Network, RunReport, TemplateMemory};
use v2b::localize::{decode, make_targets, map_csv, map_pgm};
use v2b::model::{forward, init_params};
use v2b::tensor::{ParamStore, Tape};
use v2b::Error;

/// Voxel-to-BEV single-object tracker for point cloud sequences.
#[derive(Parser)]
#[command(name = "v2b", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences as JSONL.
    Gen {
        /// Scene spec (TOML); omitted fields take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base seed; sequence i uses seed + i.
        #[arg(long)]
        seed: u64,
        /// Number of sequences.
        #[arg(long)]
        count: usize,
    },
    /// Train a model and write a checkpoint plus its config sidecar.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Model/loss/track/train config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; `<out>.toml` and `<out>.loss.csv` are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the training and the initialization seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track every sequence and write the predicted boxes as CSV.
    Track {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// first_gt, previous_result, first_and_previous or all_previous.
        #[arg(long)]
        scheme: TemplateScheme,
        /// Results CSV; a run report is written to `<out>.report.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a results CSV against the ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        results: PathBuf,
        /// Sparsity thresholds per category (TOML table `category = count`).
        #[arg(long)]
        buckets: Option<PathBuf>,
        /// JSON report; per-frame rows go to `<out>.frames.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the maps of one frame for inspection.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sequence id.
        #[arg(long)]
        seq: String,
        /// Frame index (≥ 1); the search area is centered on the previous ground truth.
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also run the shape generator and dump its points.
        #[arg(long)]
        train_mode: bool,
    },
    /// Histogram of in-box point counts.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated increasing bin edges, e.g. `0,50,150,300`.
        #[arg(long, value_delimiter = ',', required = true)]
        bins: Vec<usize>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_checkpoint(path: &Path) -> Result<(ParamStore, Config), Error> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let params = ParamStore::from_bytes(&bytes)?;
    let cfg = Config::load(&sidecar(path, ".toml"))?;
    Ok((params, cfg))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn gen(spec: &Path, out: &Path, seed: u64, count: usize) -> Outcome {
    let spec: SceneSpec = toml::from_str(&read(spec)?).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let seqs = generate_dataset(&spec, seed, count)?;
    save_dataset(&seqs, out)?;
    eprintln!("wrote {count} sequences to {}", out.display());
    Ok(())
}

fn train(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Outcome {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.init_seed = s;
    }
    let ds = load_dataset(data)?;
    let params = init_params(&cfg)?;
    eprintln!("training {} parameters on {} sequences", params.num_values(), ds.len());
    let trained = train_from(params, &ds, &cfg, |r| {
        if r.iteration % 50 == 0 {
            eprintln!("iter {:>6}  epoch {:>3}  lr {:.2e}  loss {:.5}", r.iteration, r.epoch, r.lr, r.total);
        }
    })?;
    let mut curve = csv::Writer::from_writer(Vec::new());
    for r in &trained.curve {
        curve.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    write(out, trained.params.to_bytes())?;
    write(&sidecar(out, ".toml"), cfg.to_toml())?;
    write(
        &sidecar(out, ".loss.csv"),
        curve.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;
    eprintln!(
        "{} iterations, {} skipped samples, checkpoint {}",
        trained.curve.len(),
        trained.skipped,
        out.display()
    );
    Ok(())
}

fn track(data: &Path, ckpt: &Path, scheme: TemplateScheme, out: &Path) -> Outcome {
    let (params, mut cfg) = load_checkpoint(ckpt)?;
    cfg.track.scheme = scheme;
    let ds = load_dataset(data)?;
    let mut net = Network { params: &params, cfg: &cfg };
    let runs = ds
        .iter()
        .map(|s| track_sequence(&mut net, s, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<(String, Vec<_>)> = runs.iter().map(|r| (r.sequence_id.clone(), r.boxes.clone())).collect();
    let file = fs::File::create(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    write_results(&rows, file)?;
    let report = RunReport::new(scheme, runs);
    write(&sidecar(out, ".report.json"), json(&report))?;
    eprintln!("tracked {} sequences ({} fallback frames)", ds.len(), report.fallback_frames);
    Ok(())
}

fn eval(data: &Path, results: &Path, buckets: Option<&Path>, out: &Path) -> Outcome {
    let ds = load_dataset(data)?;
    let res = import_results(results, &ds)?;
    let thresholds: BTreeMap<String, usize> = match buckets {
        Some(p) => toml::from_str(&read(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => default_thresholds(),
    };
    let (report, frames) = evaluate(&ds, &res, &thresholds)?;
    write(out, json(&report))?;
    write(&sidecar(out, ".frames.csv"), frames_csv(&frames)?)?;
    println!(
        "success {:.2}  precision {:.2}  (persistence {:.2} / {:.2})",
        report.overall.success,
        report.overall.precision,
        report.persistence_baseline.success,
        report.persistence_baseline.precision
    );
    Ok(())
}

fn find<'a>(ds: &'a [Sequence], id: &str) -> Result<&'a Sequence, Error> {
    ds.iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Data(format!("no sequence `{id}`")))
}

fn inspect(ckpt: &Path, data: &Path, seq: &str, frame: usize, out_dir: &Path, train_mode: bool) -> Outcome {
    let (params, cfg) = load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let s = find(&ds, seq)?;
    if frame == 0 || frame >= s.frames.len() {
        return Err(Failure::Usage(format!(
            "--frame must lie in 1..{} for sequence `{seq}`",
            s.frames.len()
        )));
    }
    let memory = TemplateMemory::new(&s.frames[0].points, &s.frames[0].gt);
    let prev = s.frames[frame - 1].gt;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.track.seed);
    let inputs = make_test_inputs(&memory, &prev, &s.frames[frame].points, &cfg, &mut rng)?
        .ok_or_else(|| Error::Data(format!("frame {frame} has an empty search area")))?;
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let f = forward(
        &mut tape,
        &p,
        &cfg.model,
        cfg.loss.heatmap_eps,
        &inputs.template,
        &inputs.search,
        &inputs.region,
        train_mode,
    )?;
    let [h, w, _] = inputs.region.dims();
    let hm = tape.value(f.bev.heatmap).clone().reshape(&[h, w])?;
    let gt = prev.relative(&s.frames[frame].gt);
    let targets = make_targets(&gt, &inputs.region, cfg.loss.offset_radius)?;
    let occ = f.grid.bev_occupancy();
    let occ_max = occ.data().iter().cloned().fold(1.0, f64::max);
    fs::create_dir_all(out_dir)?;
    let put = |name: &str, bytes: Vec<u8>| write(&out_dir.join(name), bytes);
    put("heatmap_pred.csv", map_csv(&hm).into_bytes())?;
    put("heatmap_pred.pgm", map_pgm(&hm, 0.0, 1.0))?;
    put("heatmap_target.csv", map_csv(&targets.heatmap).into_bytes())?;
    put("heatmap_target.pgm", map_pgm(&targets.heatmap, 0.0, 1.0))?;
    put("occupancy.csv", map_csv(&occ).into_bytes())?;
    put("occupancy.pgm", map_pgm(&occ, 0.0, occ_max))?;
    let pred = decode(
        tape.value(f.bev.heatmap),
        tape.value(f.bev.offset),
        tape.value(f.bev.z),
        memory.size,
        &inputs.region,
    )?;
    let summary = serde_json::json!({
        "sequence": seq,
        "frame": frame,
        "region": inputs.region,
        "predicted_local": pred,
        "target_local": gt,
        "target_cell": targets.center_cell,
    });
    put("summary.json", json(&summary).into_bytes())?;
    if let Some(shape) = f.shape {
        let mut text = String::from("x,y,z\n");
        for r in tape.value(shape).data().chunks(3) {
            text.push_str(&format!("{:.6},{:.6},{:.6}\n", r[0], r[1], r[2]));
        }
        put("shape.csv", text.into_bytes())?;
    }
    eprintln!("wrote maps for {seq}#{frame} to {}", out_dir.display());
    Ok(())
}

fn stats(data: &Path, bins: Vec<usize>) -> Outcome {
    let ds = load_dataset(data)?;
    print!("{}", point_stats(&ds, bins)?.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen { spec, out, seed, count } => gen(&spec, &out, seed, count),
        Command::Train { data, config, out, seed } => train(&data, &config, &out, seed),
        Command::Track { data, ckpt, scheme, out } => track(&data, &ckpt, scheme, &out),
        Command::Eval {
            data,
            results,
            buckets,
            out,
        } => eval(&data, &results, buckets.as_deref(), &out),
        Command::Inspect {
            ckpt,
            data,
            seq,
            frame,
            out_dir,
            train_mode,
        } => inspect(&ckpt, &data, &seq, frame, &out_dir, train_mode),
        Command::Stats { data, bins } => stats(&data, bins),
    }
}

/// 2 for bad flags or config, 3 for data and I/O failures, 4 for a
/// non-finite loss.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 4,
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonFinite { component: "center", value: f64::NAN }), 4);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 3);
    }
}
