use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdf_autolabel::config::RunConfig;
use sdf_autolabel::geometry::SimilarityTransform;
use sdf_autolabel::gradcheck::CheckModule;
use sdf_autolabel::isosurface::{QueryGrid, SurfaceExtractor};
use sdf_autolabel::metrics::{ablation_suite, evaluate_pool, ground_truth_cuboids, AblationConfig, Matcher};
use sdf_autolabel::pipeline::{
    generate_dataset, run_autolabel, write_records, CssPredictor, Dataset, Difficulty, FilePredictor, InstanceId,
    LabelPool, OracleCss, Status,
};
use sdf_autolabel::renderer::{render, write_depth, write_mask_ppm, write_nocs_ppm, Camera};
use sdf_autolabel::shapespace::{sample_training_set, train_decoder, Backend, LatentCode, ShapeSpace, TinyDecoder};
use sdf_autolabel::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sdf-autolabel",
    version,
    about = "Cuboid autolabeling with a differentiable SDF renderer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with labels and simulated LIDAR.
    GenScenes(GenScenes),
    /// Render NOCS, mask and depth images of an instance or a fixture.
    Render(RenderCmd),
    /// Run curriculum autolabeling loops over a scene file.
    Autolabel(AutolabelCmd),
    /// Score a label pool, or run the optimization ablation.
    Eval(EvalCmd),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckCmd),
    /// Fit a decoder network to the analytic shape space.
    TrainDecoder(TrainDecoderCmd),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available cores). Outputs do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Shape-space definition (JSON); defaults to the built-in car basis.
    #[arg(long, conflicts_with = "decoder")]
    shape_space: Option<PathBuf>,
    /// Decoder weights to use as the shape space.
    #[arg(long)]
    decoder: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => at(p, RunConfig::load(p))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }

    fn space(&self) -> Result<ShapeSpace> {
        match (&self.shape_space, &self.decoder) {
            (Some(p), _) => at(p, ShapeSpace::load(p)),
            (_, Some(p)) => Ok(ShapeSpace::decoder(at(p, TinyDecoder::load(p))?)),
            _ => Ok(ShapeSpace::default_cars()),
        }
    }

    fn jobs(&self) -> Result<usize> {
        match self.jobs {
            Some(0) => Err(Error::Usage("--jobs must be at least 1".into())),
            Some(j) => Ok(j),
            None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }
}

#[derive(Args)]
struct GenScenes {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    instances_per_scene: Option<usize>,
}

#[derive(Args)]
struct RenderCmd {
    #[command(flatten)]
    common: Common,
    /// Scene file; without it a standalone fixture is rendered.
    #[arg(long, requires = "instance")]
    scene: Option<PathBuf>,
    /// Instance id, SCENE-INDEX.
    #[arg(long)]
    instance: Option<String>,
    /// Writes PREFIX.nocs.ppm, PREFIX.mask.ppm and PREFIX.depth.txt.
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    grid_res: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorKind {
    Oracle,
    File,
}

#[derive(Args)]
struct AutolabelCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    predictor: PredictorKind,
    /// Prediction file for `--predictor file`.
    #[arg(long, required_if_eq("predictor", "file"))]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "moderate")]
    stage: Difficulty,
    #[arg(long, default_value_t = 1)]
    loops: usize,
    /// Output directory for pool.jsonl and records.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    /// Label pool to score.
    #[arg(long, required_unless_present = "ablation")]
    labels: Option<PathBuf>,
    /// Scene file holding the ground truth.
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "bev,3d,ns")]
    metrics: Vec<String>,
    /// NS center-distance cutoffs in meters.
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<f64>>,
    /// Ground truth up to this difficulty.
    #[arg(long, default_value = "hard")]
    stage: Difficulty,
    /// Machine-readable table.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Label the ground-truth scenes under each optimization variant with
    /// the oracle predictor and report one row per variant.
    #[arg(long, conflicts_with = "labels")]
    ablation: bool,
}

#[derive(Args)]
struct GradcheckCmd {
    /// autodiff, shapespace, isosurface, renderer, alignment or all.
    #[arg(long, default_value = "all")]
    module: String,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct TrainDecoderCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples_per_shape: Option<usize>,
}

/// Prefixes I/O failures with the path involved.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        e => e,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    at(path, File::create(path).map(BufWriter::new).map_err(Error::from))
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    Ok(pool.install(f))
}

fn gen_scenes(cmd: GenScenes) -> Result<()> {
    let mut config = cmd.common.config()?;
    if let Some(n) = cmd.scenes {
        config.scene.scenes = n;
    }
    if let Some(n) = cmd.instances_per_scene {
        config.scene.instances_per_scene = n;
    }
    let space = cmd.common.space()?;
    let dataset = in_pool(cmd.common.jobs()?, || {
        generate_dataset(&config.scene, &space, config.seed)
    })??;
    at(&cmd.out, dataset.save(&cmd.out))?;
    println!(
        "{} scenes, {} instances -> {}",
        dataset.scenes.len(),
        dataset.instances().count(),
        cmd.out.display()
    );
    Ok(())
}

fn render_cmd(cmd: RenderCmd) -> Result<()> {
    let mut config = cmd.common.config()?;
    if let Some(s) = cmd.sigma {
        config.render.sigma = s;
    }
    let config = config.validated()?;
    let space = cmd.common.space()?;
    let resolution = cmd.grid_res.unwrap_or(config.labeling.grid_resolution);
    let extractor = SurfaceExtractor::new(&space, QueryGrid::with_resolution(resolution)?, config.labeling.band);
    let (pose, latent, camera) = match (&cmd.scene, &cmd.instance) {
        (Some(path), Some(id)) => {
            let dataset = at(path, Dataset::load(path))?;
            let id: InstanceId = id.parse()?;
            let inst = dataset
                .instances()
                .find(|i| i.id == id)
                .ok_or_else(|| Error::Data(format!("instance {id} not in {}", path.display())))?;
            (inst.pose, inst.latent, dataset.camera)
        }
        _ => (
            SimilarityTransform::from_yaw(0.6, [0.0, 0.0, 8.0], 4.5),
            LatentCode::new([0.0, 0.6, 0.8])?,
            Camera::square(160.0, 128),
        ),
    };
    let surface = extractor.project_surface(&latent)?;
    let out = render(&surface, &pose, &camera, &config.render)?;
    let prefix = cmd.out_prefix.display().to_string();
    write_nocs_ppm(&out, create(Path::new(&format!("{prefix}.nocs.ppm")))?)?;
    write_mask_ppm(&out, create(Path::new(&format!("{prefix}.mask.ppm")))?)?;
    write_depth(&out, create(Path::new(&format!("{prefix}.depth.txt")))?)?;
    println!(
        "{}x{} image, {} covered pixels",
        out.width,
        out.height,
        out.foreground_pixels().len()
    );
    Ok(())
}

fn autolabel(cmd: AutolabelCmd) -> Result<bool> {
    let mut config = cmd.common.config()?;
    if let Some(n) = cmd.iterations {
        config.optimizer.iterations = n;
    }
    let config = config.validated()?;
    if cmd.loops == 0 {
        return Err(Error::Usage("--loops must be at least 1".into()));
    }
    let space = cmd.common.space()?;
    let dataset = at(&cmd.scenes, Dataset::load(&cmd.scenes))?;
    let mut predictor: Box<dyn CssPredictor> = match cmd.predictor {
        PredictorKind::Oracle => Box::new(OracleCss::new(config.oracle.clone())?),
        PredictorKind::File => {
            let path = cmd.predictions.as_deref().expect("required by clap");
            Box::new(at(path, FilePredictor::load(path))?)
        }
    };
    let jobs = cmd.common.jobs()?;
    let run = run_autolabel(
        &dataset,
        &space,
        predictor.as_mut(),
        cmd.stage,
        cmd.loops,
        &config.autolabel(),
        jobs,
    )?;
    at(&cmd.out, std::fs::create_dir_all(&cmd.out).map_err(Error::from))?;
    let pool_path = cmd.out.join("pool.jsonl");
    at(&pool_path, run.pool.save(&pool_path))?;
    let records = run.records();
    write_records(create(&cmd.out.join("records.csv"))?, &records)?;
    for l in &run.loops {
        println!(
            "loop {} ({}): {} instances, {} verified ({:.3})",
            l.loop_index,
            l.stage,
            l.labels.len(),
            l.accepted.len(),
            l.verified_fraction()
        );
    }
    println!("pool: {} labels -> {}", run.pool.len(), cmd.out.display());
    let errors = records.iter().filter(|r| r.status == Status::Error).count();
    if errors > 0 {
        eprintln!("error: {errors} instance(s) ended with an internal error; see records.csv");
    }
    Ok(errors == 0)
}

fn matchers(names: &[String], config: &RunConfig, cutoffs: Option<Vec<f64>>) -> Result<Vec<Matcher>> {
    let cutoffs = cutoffs.unwrap_or_else(|| config.metrics.ns_cutoffs.clone());
    let mut out = Vec::new();
    for name in names {
        match name.as_str() {
            "bev" => out.push(Matcher::Bev(config.metrics.bev_threshold)),
            "3d" => out.push(Matcher::Iou3d(config.metrics.iou3d_threshold)),
            "ns" => out.extend(cutoffs.iter().map(|&c| Matcher::Ns(c))),
            other => {
                return Err(Error::Usage(format!(
                    "unknown metric '{other}' (expected bev, 3d or ns)"
                )))
            }
        }
    }
    Ok(out)
}

fn eval(cmd: EvalCmd) -> Result<()> {
    let config = cmd.common.config()?;
    let space = cmd.common.space()?;
    let dataset = at(&cmd.ground_truth, Dataset::load(&cmd.ground_truth))?;
    if cmd.ablation {
        let predictor = OracleCss::new(config.oracle.clone())?;
        let rows = ablation_suite(
            &dataset,
            &space,
            &predictor,
            cmd.stage,
            &config.autolabel(),
            &AblationConfig::ALL,
            cmd.common.jobs()?,
        )?;
        println!(
            "{:<18} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "config", "instances", "verified", "BEV@0.5", "3D@0.5", "NS@0.5", "NS@1.0"
        );
        for r in &rows {
            let m = &r.metrics;
            println!(
                "{:<18} {:>9} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.config, r.instances, r.verified, m.bev_05, m.iou3d_05, m.ns_05, m.ns_10
            );
        }
        if let Some(path) = &cmd.csv {
            let mut w = csv::Writer::from_writer(create(path)?);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        return Ok(());
    }
    let matchers = matchers(&cmd.metrics, &config, cmd.cutoffs)?;
    let labels = cmd.labels.as_deref().expect("required by clap");
    let pool = at(labels, LabelPool::load(labels))?;
    let extractor = SurfaceExtractor::new(
        &space,
        QueryGrid::with_resolution(config.labeling.grid_resolution)?,
        config.labeling.band,
    );
    let truth = ground_truth_cuboids(&dataset, &extractor, cmd.stage)?;
    let rows = evaluate_pool(&pool, &truth, &matchers);
    println!(
        "{:<10} {:>8} {:>11} {:>12} {:>6}",
        "metric", "AP", "predictions", "ground-truth", "TP"
    );
    for r in &rows {
        println!(
            "{:<10} {:>8.4} {:>11} {:>12} {:>6}",
            r.metric, r.ap, r.predictions, r.ground_truth, r.true_positives
        );
    }
    if let Some(path) = &cmd.csv {
        let mut w = csv::Writer::from_writer(create(path)?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn gradcheck(cmd: GradcheckCmd) -> Result<bool> {
    if !(cmd.tol > 0.0) {
        return Err(Error::Usage("--tol must be positive".into()));
    }
    let modules: Vec<CheckModule> = if cmd.module == "all" {
        CheckModule::ALL.to_vec()
    } else {
        vec![cmd.module.parse()?]
    };
    let mut ok = true;
    for m in modules {
        let check = m.run()?;
        let pass = check.max_relative_error <= cmd.tol;
        ok &= pass;
        println!(
            "{:<11} max relative error {:.3e} ({} parameters) {}",
            format!("{m:?}").to_lowercase(),
            check.max_relative_error,
            check.analytic.len(),
            if pass { "ok" } else { "FAIL" }
        );
    }
    if !ok {
        eprintln!("error: gradient check exceeded tolerance {}", cmd.tol);
    }
    Ok(ok)
}

fn train_decoder_cmd(cmd: TrainDecoderCmd) -> Result<()> {
    let mut config = cmd.common.config()?;
    if let Some(e) = cmd.epochs {
        config.decoder.training.epochs = e;
    }
    if let Some(n) = cmd.samples_per_shape {
        config.decoder.samples_per_shape = n;
    }
    config.decoder.training.seed = config.seed;
    let space = cmd.common.space()?;
    let Backend::AnalyticBlend(blend) = space.backend() else {
        return Err(Error::Usage("train-decoder needs an analytic shape space".into()));
    };
    let codes: Vec<LatentCode> = blend
        .anchors
        .iter()
        .map(|a| LatentCode::new(*a))
        .collect::<Result<_>>()?;
    let d = &config.decoder;
    let train = sample_training_set(&space, &codes, d.samples_per_shape, config.seed);
    let held = sample_training_set(&space, &codes, d.held_out_per_shape, config.seed.wrapping_add(1));
    let (decoder, report) = train_decoder(&train, &held, &codes, &d.training)?;
    println!(
        "{} parameters, {} epochs, final loss {:.5}, held-out MAE {:.5}",
        decoder.parameter_count(),
        report.epoch_loss.len(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.held_out_mae
    );
    if report.held_out_mae > d.max_held_out_mae {
        return Err(Error::Training {
            epoch: report.epoch_loss.len(),
            detail: format!("held-out MAE {:.5} above {}", report.held_out_mae, d.max_held_out_mae),
        });
    }
    at(&cmd.out, decoder.save(&cmd.out))?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenScenes(c) => gen_scenes(c).map(|_| true),
        Command::Render(c) => render_cmd(c).map(|_| true),
        Command::Autolabel(c) => autolabel(c),
        Command::Eval(c) => eval(c).map(|_| true),
        Command::Gradcheck(c) => gradcheck(c),
        Command::TrainDecoder(c) => train_decoder_cmd(c).map(|_| true),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
