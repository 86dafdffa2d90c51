use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::json;

use recist3d::efficiency::{read_rss_bytes, EfficiencyReport, RssSampler, DEFAULT_SAMPLE_PERIOD};
use recist3d::metrics::{dsc, nsd, DEFAULT_NSD_TOLERANCE_MM};
use recist3d::pipeline::{infer, InferOptions, SegmentOptions, DEFAULT_MARGIN};
use recist3d::synthetic::{random_lesions, render_case};
use recist3d::volume::{read_nifti, write_nifti, LabelVolume};
use recist3d::{Error, ModelConfig, ModelWeights};

#[derive(Parser)]
#[command(name = "recist3d", version, about = "RECIST-prompted 3D lesion segmentation on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment the lesions marked in a CT volume.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        marking: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write the RSS trace as CSV (t_s, rss_bytes).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        max_patch: usize,
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Model configuration as JSON; defaults to the built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        case_id: Option<String>,
    },
    /// Per-label DSC and NSD of a predicted mask against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NSD_TOLERANCE_MM)]
        nsd_tol_mm: f64,
    },
    /// Run `infer` in a child process for every case directory and report
    /// its time and memory. A case directory holds image.nii[.gz] and
    /// marking.nii[.gz]; the prediction is written next to them.
    Bench {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// RSS sampling period in milliseconds.
        #[arg(long, default_value_t = DEFAULT_SAMPLE_PERIOD.as_millis() as u64)]
        period_ms: u64,
    },
    /// Write randomly initialized weights (a LENS file).
    InitWeights {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic case: image, marking and ground truth.
    Synth {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [64, 64, 64])]
        shape: Vec<usize>,
        #[arg(long, num_args = 3, value_names = ["Z", "Y", "X"], default_values_t = [1.0, 1.0, 1.0])]
        spacing: Vec<f32>,
        #[arg(long, default_value_t = 1)]
        lesions: usize,
        #[arg(long, default_value_t = 4)]
        min_radius: usize,
        #[arg(long, default_value_t = 10)]
        max_radius: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_input_error() { 2 } else { 3 };
            let msg = json!({ "error": e.to_string(), "kind": if code == 2 { "input" } else { "internal" } });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}

fn load_config(path: Option<&Path>) -> recist3d::Result<ModelConfig> {
    let cfg = match path {
        None => ModelConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> recist3d::Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cmd: Cmd) -> recist3d::Result<()> {
    match cmd {
        Cmd::Infer {
            image,
            marking,
            weights,
            output,
            trace,
            max_patch,
            margin,
            threads,
            config,
            case_id,
        } => {
            let config = load_config(config.as_deref())?;
            let opts = InferOptions {
                segment: SegmentOptions {
                    margin,
                    max_patch: [max_patch; 3],
                    ..Default::default()
                },
                threads,
                config,
                trace,
                case_id,
                ..Default::default()
            };
            let report = infer(&image, &marking, &weights, &output, &opts)?;
            print_json(&report)
        }
        Cmd::Eval { pred, gt, nsd_tol_mm } => {
            let p = LabelVolume::from_volume(read_nifti(&pred)?)?;
            let g = LabelVolume::from_volume(read_nifti(&gt)?)?;
            p.geometry.ensure_matches(&g.geometry)?;
            let mut labels: Vec<u16> = g.data.iter().chain(&p.data).copied().filter(|&l| l != 0).collect();
            labels.sort_unstable();
            labels.dedup();
            let mut rows = Vec::with_capacity(labels.len());
            for l in labels {
                rows.push(json!({
                    "label": l,
                    "dsc": dsc(&p, &g, l)?,
                    "nsd": nsd(&p, &g, l, nsd_tol_mm)?,
                }));
            }
            print_json(&json!({ "nsd_tolerance_mm": nsd_tol_mm, "labels": rows }))
        }
        Cmd::Bench {
            cases,
            weights,
            config,
            threads,
            period_ms,
        } => {
            let reports = bench(&cases, &weights, config.as_deref(), threads, Duration::from_millis(period_ms.max(1)))?;
            print_json(&reports)
        }
        Cmd::InitWeights { output, seed, config } => {
            let config = load_config(config.as_deref())?;
            let w = ModelWeights::random(&config, seed)?;
            w.save(&output)?;
            print_json(&json!({
                "output": output,
                "parameters": w.parameter_count(),
                "tensors": w.len(),
                "fingerprint": w.fingerprint(),
            }))
        }
        Cmd::Synth {
            output_dir,
            shape,
            spacing,
            lesions,
            min_radius,
            max_radius,
            seed,
        } => {
            let shape = [shape[0], shape[1], shape[2]];
            let placed = random_lesions(shape, lesions, (min_radius, max_radius), seed)?;
            let case = render_case(shape, [spacing[0], spacing[1], spacing[2]], &placed, seed)?;
            std::fs::create_dir_all(&output_dir).map_err(|e| Error::Io {
                path: output_dir.clone(),
                source: e,
            })?;
            write_nifti(&case.image, output_dir.join("image.nii.gz"), true)?;
            write_nifti(&case.marking, output_dir.join("marking.nii.gz"), true)?;
            write_nifti(&case.ground_truth, output_dir.join("gt.nii.gz"), true)?;
            let lesions: Vec<_> = placed
                .iter()
                .map(|l| json!({ "label": l.label, "center": l.center, "radius": l.radius }))
                .collect();
            print_json(&json!({ "output_dir": output_dir, "shape": shape, "lesions": lesions }))
        }
    }
}

fn find_input(dir: &Path, stem: &str) -> recist3d::Result<PathBuf> {
    for name in [format!("{stem}.nii.gz"), format!("{stem}.nii")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io {
        path: dir.join(format!("{stem}.nii[.gz]")),
        source: std::io::Error::from(std::io::ErrorKind::NotFound),
    })
}

fn bench(
    cases: &Path,
    weights: &Path,
    config: Option<&Path>,
    threads: usize,
    period: Duration,
) -> recist3d::Result<Vec<EfficiencyReport>> {
    let io = |e: std::io::Error| Error::Io {
        path: cases.to_path_buf(),
        source: e,
    };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(cases)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let exe = std::env::current_exe().map_err(io)?;
    let mut reports = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let image = find_input(&dir, "image")?;
        let marking = find_input(&dir, "marking")?;
        let output = dir.join("prediction.nii.gz");
        let case_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut cmd = Command::new(&exe);
        cmd.arg("infer")
            .arg("--image")
            .arg(&image)
            .arg("--marking")
            .arg(&marking)
            .arg("--weights")
            .arg(weights)
            .arg("--output")
            .arg(&output)
            .arg("--threads")
            .arg(threads.to_string())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit());
        if let Some(c) = config {
            cmd.arg("--config").arg(c);
        }
        let mut child = cmd.spawn().map_err(io)?;
        let pid = child.id();
        let sampler = RssSampler::start(move || read_rss_bytes(Some(pid)), period);
        let status = child.wait().map_err(io)?;
        let trace = sampler.finish();
        if !status.success() {
            let msg = format!("case {case_id}: infer exited with {status}");
            return Err(if status.code() == Some(2) {
                Error::Config(msg)
            } else {
                Error::Internal(msg)
            });
        }
        let shape = read_nifti(&image)?.shape();
        reports.push(EfficiencyReport::from_trace(case_id, shape, &trace));
    }
    Ok(reports)
}
