use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fodpipe::csd::{csd_fit, dti_fit, dti_fod, estimate_response, single_fiber_mask, CsdSettings, ResponseFunction};
use fodpipe::evaluate::evaluate;
use fodpipe::fbc::{coherence, filter_tractogram, Cutoff, FbcSettings, DEFAULT_ALPHA, DEFAULT_RESAMPLE_STEP};
use fodpipe::fodfield::{find_peaks, sharpen, shift_twist_convolve, PeakThreshold};
use fodpipe::geometry::tessellation::tessellate_sphere;
use fodpipe::io;
use fodpipe::kernel::{discretize_kernel, sample_paths, TableOptions};
use fodpipe::phantom::{generate_phantom, preset, Preset};
use fodpipe::pipeline::{read_ground_truth, run_pipeline, PipelineConfig};
use fodpipe::tracking::{seed_points, track, Seeds, Tractogram, TrackingMode, TrackingParams};
use fodpipe::{Error, KernelParams, Vec3};

#[derive(Debug, Parser)]
#[command(name = "fodpipe", version, about = "FOD enhancement, tractography and fiber-to-bundle coherence")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "FODPIPE_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a DWI phantom with its ground truth.
    Phantom(PhantomArgs),
    /// Constrained spherical deconvolution of a DWI file.
    Csd(CsdArgs),
    /// FODs from a diffusion tensor fit.
    DtiFod(DtiFodArgs),
    /// Build a kernel table, or sample Monte Carlo path endpoints.
    Kernel(KernelArgs),
    /// Contour enhancement of an FOD field.
    Enhance(EnhanceArgs),
    /// Sharpen an FOD field by deconvolving a response.
    Sharpen(SharpenArgs),
    /// Streamline tractography.
    Track(TrackArgs),
    /// Fiber-to-bundle coherence and filtering.
    Fbc(FbcArgs),
    /// Score FODs and streamlines against a ground truth.
    Evaluate(EvaluateArgs),
    /// Run every stage from one configuration file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Serialize)]
struct PhantomArgs {
    #[arg(long, default_value = "crossing90")]
    preset: Preset,
    /// Signal-to-noise ratio of the b = 0 signal; omit for noise-free data.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 3000.0)]
    b: f64,
    #[arg(long, default_value_t = 64)]
    ndirs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dwi: PathBuf,
    #[arg(long)]
    out_gt: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CsdArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    order: u32,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// Response from voxels at or above this FA, unless --response is given.
    #[arg(long, default_value_t = 0.7)]
    fa_threshold: f64,
    /// Precomputed response function (JSON).
    #[arg(long)]
    response: Option<PathBuf>,
    /// Also write the response used.
    #[arg(long)]
    out_response: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DtiFodArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    order: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct KernelShape {
    #[arg(long, default_value_t = 1.0)]
    d33: f64,
    #[arg(long, default_value_t = 0.01)]
    d44: f64,
    #[arg(long, default_value_t = 2.0)]
    t: f64,
}

impl KernelShape {
    fn params(&self) -> Result<KernelParams, CliError> {
        KernelParams::new(self.d33, self.d44, self.t).map_err(|e| CliError::Usage(format!("--d33/--d44/--t: {e}")))
    }
}

#[derive(Debug, Args, Serialize)]
struct KernelArgs {
    #[command(flatten)]
    shape: KernelShape,
    /// Spatial half width in voxels; chosen from the kernel's decay if omitted.
    #[arg(long)]
    half_width: Option<u32>,
    #[arg(long, default_value_t = 3)]
    tess_level: u32,
    /// Drop entries below this fraction of the largest one.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Write N Monte Carlo endpoints as CSV (x,y,z,nx,ny,nz) instead of a table.
    #[arg(long, value_name = "N")]
    sample_paths: Option<usize>,
    /// Euler steps per sample path.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EnhanceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    shape: KernelShape,
    #[arg(long)]
    half_width: Option<u32>,
    #[arg(long, default_value_t = 3)]
    tess_level: u32,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Use a table written by `fodpipe kernel` instead of building one.
    #[arg(long, conflicts_with_all = ["d33", "d44", "t", "half_width", "tess_level", "threshold"])]
    kernel: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SharpenArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Response function JSON, as written by `csd --out-response`.
    #[arg(long)]
    response: PathBuf,
    /// Tessellation on which negative lobes are clipped.
    #[arg(long, default_value_t = 4)]
    tess_level: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Mode {
    Det,
    Prob,
}

#[derive(Debug, Args, Serialize)]
struct TrackArgs {
    #[arg(long, value_enum, default_value = "det")]
    mode: Mode,
    #[arg(long = "in")]
    input: PathBuf,
    /// Seed specification (JSON): {"points": [[x,y,z], ...]} in mm or
    /// {"region": {"voxels": [[i,j,k], ...], "per_voxel": n}}.
    #[arg(long)]
    seeds: PathBuf,
    /// Voxel list (JSON); only streamlines reaching it are kept.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total number of seeds drawn from a seed region, overriding per_voxel.
    #[arg(long)]
    n: Option<usize>,
    /// mm; a tenth of the smallest voxel side by default.
    #[arg(long)]
    step: Option<f64>,
    /// Stop below this fraction of the field's largest amplitude.
    #[arg(long, default_value_t = 0.1)]
    cutoff: f64,
    #[arg(long, default_value_t = 0.9)]
    init_cutoff: f64,
    /// mm, probabilistic mode.
    #[arg(long, default_value_t = 1.0)]
    min_radius: f64,
    /// mm.
    #[arg(long, default_value_t = 2.0)]
    min_length: f64,
    #[arg(long, default_value_t = 10_000)]
    max_steps: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Axis-aligned box in mm.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Region {
    min: [f64; 3],
    max: [f64; 3],
}

impl Region {
    fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

#[derive(Debug, Args, Serialize)]
struct FbcArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    d33: f64,
    #[arg(long, default_value_t = 0.04)]
    d44: f64,
    #[arg(long, default_value_t = 1.4)]
    t: f64,
    /// Window length in resampled points.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: usize,
    /// Resampling step in mm.
    #[arg(long, default_value_t = DEFAULT_RESAMPLE_STEP)]
    step: f64,
    /// Keep fibers with RFBC ≥ this fraction of the largest RFBC.
    #[arg(long, default_value_t = 0.1)]
    epsilon_rel: f64,
    /// Sum over all point pairs.
    #[arg(long, conflicts_with = "cutoff_radius")]
    no_cutoff: bool,
    /// mm; the radius holding nearly all kernel mass by default.
    #[arg(long)]
    cutoff_radius: Option<f64>,
    /// Box (JSON {"min": [x,y,z], "max": [x,y,z]}, mm); only fibers with a
    /// point inside take part.
    #[arg(long)]
    select_region: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    tracks: PathBuf,
    /// FOD field whose peaks are scored.
    #[arg(long)]
    fod: Option<PathBuf>,
    #[arg(long)]
    gt: PathBuf,
    /// Absolute amplitude below which maxima are not peaks.
    #[arg(long, default_value_t = 0.1)]
    peak_threshold: f64,
    #[arg(long, default_value_t = 4)]
    tess_level: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "pipeline-out")]
    out_dir: PathBuf,
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or flag values.
    Usage(String),
    /// Unreadable or inconsistent data.
    Data(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(flag: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{flag}: {e}"))
}

fn data(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// `<out>.config.json`, next to the output.
fn write_config<T: Serialize>(out: &Path, command: &str, args: &T) -> CliResult {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        command: &'a str,
        version: &'a str,
        args: &'a T,
    }
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    let resolved = Resolved {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args,
    };
    io::write_json(Path::new(&name), &resolved)?;
    Ok(())
}

fn phantom(a: &PhantomArgs) -> CliResult {
    if let Some(s) = a.snr {
        if !(s > 0.0 && s.is_finite()) {
            return Err(usage("--snr", format!("must be positive, got {s}")));
        }
    }
    let (dwi, gt) = generate_phantom(&preset(a.preset, a.snr, a.b, a.ndirs, a.seed)).map_err(|e| usage("phantom", e))?;
    io::write_dwi(&a.out_dwi, &dwi)?;
    io::write_json(&a.out_gt, &gt)?;
    write_config(&a.out_dwi, "phantom", a)
}

fn csd(a: &CsdArgs) -> CliResult {
    let settings = CsdSettings {
        order: a.order,
        lambda: a.lambda,
        tau: a.tau,
        max_iter: a.max_iter,
    };
    settings.validate().map_err(|e| usage("--order/--lambda/--tau/--max-iter", e))?;
    let dwi = io::read_dwi(&a.input)?;
    let response = match &a.response {
        Some(p) => io::read_json::<ResponseFunction>(p)?,
        None => {
            let mask = single_fiber_mask(&dwi, a.fa_threshold).map_err(|e| data(&a.input, e))?;
            log::info!("response from {} voxels", mask.len());
            estimate_response(&dwi, &mask, a.order).map_err(|e| data(&a.input, e))?
        }
    };
    if let Some(p) = &a.out_response {
        io::write_json(p, &response)?;
    }
    let field = csd_fit(&dwi, &response, settings).map_err(|e| data(&a.input, e))?;
    io::write_fod(&a.out, &field)?;
    write_config(&a.out, "csd", a)
}

fn dti(a: &DtiFodArgs) -> CliResult {
    let dwi = io::read_dwi(&a.input)?;
    let tensors = dti_fit(&dwi).map_err(|e| data(&a.input, e))?;
    let field = dti_fod(&tensors, a.order).map_err(|e| usage("--order", e))?;
    io::write_fod(&a.out, &field)?;
    write_config(&a.out, "dti-fod", a)
}

fn kernel(a: &KernelArgs) -> CliResult {
    let params = a.shape.params()?;
    if let Some(n) = a.sample_paths {
        let cloud = sample_paths(&params, n, a.steps, a.seed).map_err(|e| usage("--sample-paths/--steps", e))?;
        let file = std::fs::File::create(&a.out).map_err(|e| data(&a.out, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "x,y,z,nx,ny,nz")?;
            for (y, n) in &cloud.endpoints {
                writeln!(w, "{},{},{},{},{},{}", y.x, y.y, y.z, n.x(), n.y(), n.z())?;
            }
            w.flush()
        };
        write().map_err(|e| data(&a.out, e))?;
    } else {
        let tess = tessellate_sphere(a.tess_level).map_err(|e| usage("--tess-level", e))?;
        let options = TableOptions {
            half_width: a.half_width,
            threshold: a.threshold,
        };
        let table = discretize_kernel(params, &tess, options).map_err(|e| usage("--half-width/--threshold", e))?;
        log::info!("{} entries, half width {}", table.len(), table.half_width());
        io::write_kernel(&a.out, &table)?;
    }
    write_config(&a.out, "kernel", a)
}

fn enhance(a: &EnhanceArgs) -> CliResult {
    let table = match &a.kernel {
        Some(p) => io::read_kernel(p)?,
        None => {
            let tess = tessellate_sphere(a.tess_level).map_err(|e| usage("--tess-level", e))?;
            let options = TableOptions {
                half_width: a.half_width,
                threshold: a.threshold,
            };
            discretize_kernel(a.shape.params()?, &tess, options).map_err(|e| usage("--half-width/--threshold", e))?
        }
    };
    let field = io::read_fod(&a.input)?;
    let out = shift_twist_convolve(&table, &field).map_err(|e| data(&a.input, e))?;
    io::write_fod(&a.out, &out)?;
    write_config(&a.out, "enhance", a)
}

fn sharpen_cmd(a: &SharpenArgs) -> CliResult {
    let tess = tessellate_sphere(a.tess_level).map_err(|e| usage("--tess-level", e))?;
    let response: ResponseFunction = io::read_json(&a.response)?;
    let field = io::read_fod(&a.input)?;
    let out = sharpen(&field, response.sh(), &tess).map_err(|e| data(&a.response, e))?;
    io::write_fod(&a.out, &out)?;
    write_config(&a.out, "sharpen", a)
}

fn track_cmd(a: &TrackArgs) -> CliResult {
    let params = TrackingParams {
        step_size: a.step,
        cutoff_fraction: a.cutoff,
        init_cutoff: a.init_cutoff,
        min_radius_of_curvature: a.min_radius,
        min_length: a.min_length,
        max_steps: a.max_steps,
        rng_seed: a.seed,
    };
    params.validate().map_err(|e| usage("tracking flags", e))?;
    let field = io::read_fod(&a.input)?;
    let mut seeds: Seeds = io::read_json(&a.seeds)?;
    if let (Some(n), Seeds::Region { voxels, per_voxel }) = (a.n, &mut seeds) {
        if n == 0 {
            return Err(usage("--n", "must be positive"));
        }
        *per_voxel = n.div_ceil(voxels.len().max(1));
    }
    let mut points = seed_points(&seeds, field.grid(), a.seed).map_err(|e| data(&a.seeds, e))?;
    if let Some(n) = a.n {
        points.truncate(n);
    }
    let target: Option<Vec<[usize; 3]>> = a.target.as_deref().map(io::read_json).transpose()?;
    let mode = match a.mode {
        Mode::Det => TrackingMode::Deterministic,
        Mode::Prob => TrackingMode::Probabilistic,
    };
    let (mut tracts, report) =
        track(&field, &points, mode, params, None, target.as_deref()).map_err(|e| data(&a.seeds, e))?;
    log::info!("{report:?}");
    if let Some(p) = tracts.provenance.as_mut() {
        p.field = a.input.display().to_string();
    }
    io::write_tractogram(&a.out, &tracts)?;
    write_config(&a.out, "track", a)
}

fn fbc_cmd(a: &FbcArgs) -> CliResult {
    let params = KernelParams::new(a.d33, a.d44, a.t).map_err(|e| usage("--d33/--d44/--t", e))?;
    if !(0.0..=1.0).contains(&a.epsilon_rel) {
        return Err(usage("--epsilon-rel", format!("must lie in [0, 1], got {}", a.epsilon_rel)));
    }
    let settings = FbcSettings {
        params,
        alpha: a.alpha,
        resample_step: a.step,
        cutoff: match (a.no_cutoff, a.cutoff_radius) {
            (true, _) => Cutoff::None,
            (false, Some(r)) => Cutoff::Radius(r),
            (false, None) => Cutoff::Auto,
        },
    };
    let all = io::read_tractogram(&a.input)?;
    let selected: Vec<usize> = match &a.select_region {
        None => (0..all.len()).collect(),
        Some(p) => {
            let region: Region = io::read_json(p)?;
            (0..all.len())
                .filter(|&i| all.streamlines[i].points.iter().any(|q| region.contains(q)))
                .collect()
        }
    };
    if selected.is_empty() {
        return Err(data(&a.input, "no streamlines to compute coherence on"));
    }
    let gamma = Tractogram {
        streamlines: selected.iter().map(|&i| all.streamlines[i].clone()).collect(),
        provenance: all.provenance.clone(),
    };
    let mut report = coherence(&gamma, &settings).map_err(|e| data(&a.input, e))?;
    let kept = filter_tractogram(&gamma, &report, a.epsilon_rel * report.eps_max).map_err(|e| data(&a.input, e))?;
    log::info!("kept {} of {} streamlines", kept.len(), gamma.len());
    io::write_tractogram(&a.out, &kept)?;
    if let Some(p) = &a.report {
        // Indices refer to the input file.
        report.fibers.iter_mut().for_each(|f| f.index = selected[f.index]);
        report.skipped.iter_mut().for_each(|i| *i = selected[*i]);
        io::write_json(p, &report)?;
    }
    write_config(&a.out, "fbc", a)
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult {
    let gt = read_ground_truth(&a.gt)?;
    let tracts = io::read_tractogram(&a.tracks)?;
    let peaks = match &a.fod {
        Some(p) => {
            let tess = tessellate_sphere(a.tess_level).map_err(|e| usage("--tess-level", e))?;
            let field = io::read_fod(p)?;
            Some(find_peaks(&field, &tess, PeakThreshold::Absolute(a.peak_threshold)).map_err(|e| data(p, e))?)
        }
        None => None,
    };
    let metrics = evaluate(&tracts, peaks.as_ref(), &gt).map_err(|e| data(&a.gt, e))?;
    io::write_json(&a.out, &metrics)?;
    write_config(&a.out, "evaluate", a)
}

fn pipeline(a: &PipelineArgs) -> CliResult {
    let config = PipelineConfig::load(&a.config)?;
    let summary = run_pipeline(&config, &a.out_dir)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Csd(a) => csd(a),
        Command::DtiFod(a) => dti(a),
        Command::Kernel(a) => kernel(a),
        Command::Enhance(a) => enhance(a),
        Command::Sharpen(a) => sharpen_cmd(a),
        Command::Track(a) => track_cmd(a),
        Command::Fbc(a) => fbc_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads: must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
