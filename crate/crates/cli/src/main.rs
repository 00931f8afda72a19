use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facecorr::annotation::Annotation;
use facecorr::config::PipelineConfig;
use facecorr::eval::{landmark_errors, mhd, residual_field, write_error_csv, Histogram};
use facecorr::mesh::{load_mesh_file, save_mesh_file};
use facecorr::model::{load_model_file, save_model_file, train, AnnotatedMesh, TrainedModel};
use facecorr::predict::{predict_landmarks, LandmarkPrediction};
use facecorr::registration::{load_rig_file, register, save_report, save_rig_file, LandmarkSource};
use facecorr::synth::{build_rig, dataset_spec, generate_face, SyntheticFace};
use facecorr::Error;
use rayon::prelude::*;

mod manifest;

use manifest::read_manifest;

#[derive(Debug, Parser)]
#[command(name = "facecorr", version, about = "Facial landmark prediction and template registration")]
struct Cli {
    /// TOML configuration; missing keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a landmark model from a manifest of `mesh annotation` lines.
    Train {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the eight landmarks of a scan.
    Predict {
        mesh: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output JSON (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the blendshape rig to a scan.
    Register {
        scan: PathBuf,
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Annotation of the scan; skips landmark prediction.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write evaluation reports.
    Evaluate {
        #[command(subcommand)]
        target: EvalTarget,
    },
    /// Generate a synthetic dataset with a blendshape rig.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum EvalTarget {
    /// Landmark errors from a manifest of `prediction annotation mesh` lines.
    Landmarks {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Residuals and modified Hausdorff distance of a registered mesh against its scan.
    Surface {
        registered: PathBuf,
        scan: PathBuf,
        /// Color the signed residual over [-limit, limit] instead of the magnitude.
        #[arg(long)]
        signed: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Config(_) | Error::Incompatible(_) => 1,
            Error::Degenerate(_)
            | Error::NonFinite(_)
            | Error::Starvation { .. }
            | Error::RankDeficient { .. }
            | Error::Disconnected { .. } => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Train { manifest, out } => cmd_train(&config, &manifest, out),
        Command::Predict { mesh, model, out } => cmd_predict(&config, &mesh, model, out),
        Command::Register {
            scan,
            rig,
            model,
            landmarks,
            out,
        } => cmd_register(&config, &scan, rig, model, landmarks, out),
        Command::Evaluate { target } => match target {
            EvalTarget::Landmarks { manifest, out } => cmd_evaluate_landmarks(&manifest, out),
            EvalTarget::Surface {
                registered,
                scan,
                signed,
                out,
            } => cmd_evaluate_surface(&config, &registered, &scan, signed, out),
        },
        Command::Synth { seed, out } => cmd_synth(&config, seed, out),
    }
}

/// Flag value, else the configured path, else an error naming the flag.
fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Failure::usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|source| {
        Failure::from(Error::File {
            path: dir.to_path_buf(),
            source,
        })
    })
}

/// Writes through a temporary sibling and renames, so readers never see partial files.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> facecorr::Result<()>) -> Result<(), Failure> {
    let mut name = std::ffi::OsString::from(".tmp-");
    name.push(path.file_name().unwrap_or_default());
    let tmp = path.with_file_name(name);
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|source| {
        Failure::from(Error::File {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write_text(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> facecorr::Result<()>) -> Result<(), Failure> {
    write_atomic(path, |tmp| {
        let mut buf = Vec::new();
        f(&mut buf)?;
        fs::write(tmp, buf).map_err(|source| Error::File {
            path: tmp.to_path_buf(),
            source,
        })
    })
}

fn load_model(config: &PipelineConfig, path: &Path) -> Result<TrainedModel, Failure> {
    let model = load_model_file(path)?;
    config.check_model(&model)?;
    Ok(model)
}

fn cmd_train(config: &PipelineConfig, manifest: &Path, out: Option<PathBuf>) -> CmdResult {
    let out = pick(out, &config.paths.model, "model")?;
    let records = read_manifest(manifest, 2)?;
    if records.is_empty() {
        return Err(Failure::usage(format!("{}: manifest lists no meshes", manifest.display())));
    }
    let data: Vec<AnnotatedMesh> = records
        .par_iter()
        .map(|r| {
            let mesh = load_mesh_file(&r[0])?;
            Annotation::load(&r[1])?.annotate(mesh)
        })
        .collect::<facecorr::Result<_>>()?;
    let model = train(&data, &config.train)?;
    write_atomic(&out, |tmp| save_model_file(&model, tmp))?;
    log::info!("trained on {} meshes, wrote {}", data.len(), out.display());
    Ok(())
}

fn cmd_predict(config: &PipelineConfig, mesh: &Path, model: Option<PathBuf>, out: Option<PathBuf>) -> CmdResult {
    let model = load_model(config, &pick(model, &config.paths.model, "model")?)?;
    let scan = load_mesh_file(mesh)?;
    let prediction = predict_landmarks(&scan, &model, &config.predict)?;
    let json = serde_json::to_string_pretty(&prediction).map_err(Error::from)?;
    match out {
        Some(path) => write_text(&path, |buf| Ok(writeln!(buf, "{json}")?)),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_register(
    config: &PipelineConfig,
    scan_path: &Path,
    rig: Option<PathBuf>,
    model: Option<PathBuf>,
    landmarks: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let out = pick(out, &config.paths.out, "out")?;
    let rig = load_rig_file(&pick(rig, &config.paths.rig, "rig")?)?;
    let scan = load_mesh_file(scan_path)?;
    let model_storage;
    let source = match landmarks {
        Some(path) => {
            let ann = Annotation::load(&path)?;
            ann.landmark_array()?;
            let pos = ann.positions(&scan)?;
            LandmarkSource::Given(pos.into_values().collect())
        }
        None => {
            model_storage = load_model(config, &pick(model, &config.paths.model, "model")?)?;
            LandmarkSource::Predict(&model_storage)
        }
    };
    let result = register(&rig, &scan, source, &config.register_options())?;
    create_dir(&out)?;
    let report = result.report(&rig);
    write_atomic(&out.join("registered.ply"), |tmp| save_mesh_file(tmp, &result.mesh, None))?;
    write_text(&out.join("report.json"), |buf| save_report(&report, buf))?;
    if let Some(p) = &result.prediction {
        let json = serde_json::to_string_pretty(p).map_err(Error::from)?;
        write_text(&out.join("landmarks.json"), |buf| Ok(writeln!(buf, "{json}")?))?;
    }
    for w in &result.warnings {
        log::warn!("{w}");
    }
    Ok(())
}

fn cmd_evaluate_landmarks(manifest: &Path, out: Option<PathBuf>) -> CmdResult {
    let records = read_manifest(manifest, 3)?;
    if records.is_empty() {
        return Err(Failure::usage(format!("{}: manifest lists no cases", manifest.display())));
    }
    let mut predictions = Vec::new();
    let mut truth = Vec::new();
    for r in &records {
        let text = fs::read_to_string(&r[0]).map_err(|source| Error::File {
            path: r[0].clone(),
            source,
        })?;
        let pred: LandmarkPrediction = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", r[0].display())))?;
        let mesh = load_mesh_file(&r[2])?;
        truth.push(Annotation::load(&r[1])?.positions(&mesh)?);
        predictions.push(
            pred.landmarks
                .iter()
                .map(|(&l, p)| (l, facecorr::nalgebra::Point3::from(p.position)))
                .collect(),
        );
    }
    let report = landmark_errors(&predictions, &truth)?;
    match out {
        Some(dir) => {
            create_dir(&dir)?;
            write_text(&dir.join("landmark_errors.csv"), |buf| write_error_csv(&report, buf))?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            write_text(&dir.join("landmark_errors.json"), |buf| Ok(writeln!(buf, "{json}")?))
        }
        None => {
            write_error_csv(&report, std::io::stdout().lock())?;
            Ok(())
        }
    }
}

fn cmd_evaluate_surface(
    config: &PipelineConfig,
    registered: &Path,
    scan: &Path,
    signed: Option<f64>,
    out: Option<PathBuf>,
) -> CmdResult {
    let out = pick(out, &config.paths.out, "out")?;
    let p = load_mesh_file(registered)?;
    let f = load_mesh_file(scan)?;
    let field = residual_field(&p, &f);
    let ramp = match signed {
        Some(limit) => facecorr::eval::ColorRamp::signed(limit),
        None => config.eval.colors,
    };
    ramp.validate()?;
    let e = &config.eval;
    let magnitudes: Vec<f64> = field.interior_values().iter().map(|v| v.abs()).collect();
    let hist = Histogram::uniform(&magnitudes, e.histogram_min, e.histogram_max, e.histogram_bins)?;
    let distance = mhd(p.vertices(), f.vertices())?;
    create_dir(&out)?;
    let colors = field.colors(&ramp);
    write_atomic(&out.join("residuals.ply"), |tmp| save_mesh_file(tmp, &p, Some(&colors)))?;
    write_text(&out.join("residuals.csv"), |buf| field.write_csv(buf))?;
    write_text(&out.join("histogram.csv"), |buf| hist.write_csv(buf))?;
    let mean_abs = magnitudes.iter().sum::<f64>() / magnitudes.len().max(1) as f64;
    write_text(&out.join("summary.json"), |buf| {
        let summary = serde_json::json!({ "mhd": distance, "mean_abs_residual": mean_abs, "count": magnitudes.len() });
        Ok(writeln!(buf, "{}", serde_json::to_string_pretty(&summary)?)?)
    })
}

fn save_face(dir: &Path, name: &str, face: &SyntheticFace) -> Result<String, Failure> {
    let mesh_name = format!("{name}.ply");
    write_atomic(&dir.join(&mesh_name), |tmp| save_mesh_file(tmp, &face.mesh, None))?;
    let mut ann = Annotation::from_ids(&face.landmarks);
    ann.alpha = Some(face.spec.alpha.clone());
    write_atomic(&dir.join(format!("{name}.json")), |tmp| ann.save(tmp))?;
    Ok(format!("{mesh_name} {name}.json"))
}

fn cmd_synth(config: &PipelineConfig, seed: u64, out: Option<PathBuf>) -> CmdResult {
    let out = pick(out, &config.paths.out, "out")?;
    let opts = &config.synth;
    let rig = build_rig(opts.rig_spacing)?;
    for sub in ["train", "test", "occluded"] {
        create_dir(&out.join(sub))?;
    }
    save_rig_file(&rig, &out.join("rig.json"), "rig_neutral.ply")?;

    let jobs: Vec<(&str, usize, bool, bool)> = (0..opts.train)
        .map(|i| ("train", i, false, false))
        .chain((opts.train..opts.train + opts.test).map(|i| ("test", i, true, false)))
        .chain((opts.train..opts.train + opts.test).map(|i| ("occluded", i, true, true)))
        .collect();
    let lines: Vec<(&str, String)> = jobs
        .par_iter()
        .map(|&(sub, i, warped, occluded)| {
            let mut spec = dataset_spec(seed, i, warped, opts);
            spec.occlude_mouth = occluded;
            let face = generate_face(&spec)?;
            let line = save_face(&out.join(sub), &format!("face_{i:03}"), &face)?;
            let spec_json = serde_json::to_string_pretty(&spec).map_err(Error::from)?;
            write_text(&out.join(sub).join(format!("face_{i:03}.spec.json")), |buf| {
                Ok(writeln!(buf, "{spec_json}")?)
            })?;
            Ok((sub, line))
        })
        .collect::<Result<_, Failure>>()?;
    for sub in ["train", "test", "occluded"] {
        let text: String = lines
            .iter()
            .filter(|(s, _)| *s == sub)
            .map(|(_, l)| format!("{l}\n"))
            .collect();
        write_text(&out.join(sub).join("manifest.txt"), |buf| Ok(buf.write_all(text.as_bytes())?))?;
    }
    Ok(())
}
