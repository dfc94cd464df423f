use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rio_core::config::{ConfigError, InputSpec, RunConfig};
use rio_core::egovel::estimate_ego_velocity;
use rio_core::eval::{emit_plot_data, evaluate, Alignment, EvalError, Trajectory};
use rio_core::gp::IntegrationMode;
use rio_core::ground::{radius_filter, segment_ground};
use rio_core::ingest::{
    generate_synthetic, load_scan_file, write_imu_sequence, write_radar_sequence, RadarFormat,
};
use rio_core::pipeline::{load_input, run_odometry, PipelineError};

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Estimation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Estimation(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Estimation(m) => write!(f, "estimation failed: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            PipelineError::Data(m) => CliError::Data(m),
            e @ PipelineError::Estimation { .. } => CliError::Estimation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "rio", version, about = "4D radar-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Key-value config file. Defaults describe the synthetic figure-eight world.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "output")]
    output_dir: PathBuf,
    #[arg(long)]
    disable_ground_filter: bool,
    #[arg(long, value_enum)]
    integration: Option<Integration>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Integration {
    Gp,
    Discrete,
}

#[derive(ValueEnum, Debug, Clone, Copy, Default)]
enum AlignArg {
    None,
    #[default]
    Se3,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run odometry and write trajectory, map, timing and graph.
    Run(Common),
    /// Write the synthetic world of the config as replayable sensor files.
    Simulate(Common),
    /// Compare an estimated TUM trajectory against ground truth.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        alignment: AlignArg,
        /// Also write metrics.txt here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Segment a single scan into ground, static and noise points.
    SegmentGround {
        #[command(flatten)]
        common: Common,
        /// Scan file (`x y z doppler power` per line); otherwise a scan of the configured input.
        #[arg(long)]
        scan: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write plot series for one or more TUM trajectories.
    PlotData {
        #[arg(required = true)]
        trajectories: Vec<PathBuf>,
        #[arg(long, default_value = "output")]
        output_dir: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let p = &mut cfg.pipeline;
    if let Some(seed) = c.seed {
        p.seed = seed;
    }
    if c.disable_ground_filter {
        p.ground_filter = false;
    }
    match c.integration {
        Some(Integration::Gp) => p.integration = IntegrationMode::Gp,
        Some(Integration::Discrete) => p.integration = IntegrationMode::Discrete,
        None => {}
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn cmd_run(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let data = load_input(&cfg, cfg.pipeline.seed)?;
    let out = run_odometry(&data, &cfg.pipeline)?;
    let dir = &c.output_dir;
    create_dir(dir)?;

    out.trajectory.write_tum(&dir.join("trajectory.tum"))?;
    let mut map = String::new();
    for p in &out.map {
        let _ = writeln!(map, "{} {} {}", p.x, p.y, p.z);
    }
    write(&dir.join("map.xyz"), &map)?;
    write(&dir.join("timing.csv"), &out.timing.render())?;
    write(&dir.join("graph.g2o"), &out.graph.dump())?;
    let mut skipped = String::new();
    for s in &out.skipped {
        let _ = writeln!(skipped, "{} {} {}", s.index, s.stage, s.reason);
    }
    write(&dir.join("skipped.txt"), &skipped)?;

    println!(
        "keyframes = {}\nicp_edges = {}\nskipped_scans = {}\nmap_points = {}",
        out.trajectory.len(),
        out.icp_edges,
        out.skipped.len(),
        out.map.len()
    );
    if let Some(gt) = &data.ground_truth {
        gt.write_tum(&dir.join("ground_truth.tum"))?;
        let report = evaluate(&out.trajectory, gt, Alignment::Se3)?;
        write(&dir.join("metrics.txt"), &report.summary())?;
        print!("{}", report.summary());
    }
    Ok(())
}

fn cmd_simulate(c: &Common) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let InputSpec::Synthetic(world) = &cfg.input else {
        return Err(CliError::Config("simulate needs input.source = synthetic".into()));
    };
    let seq = generate_synthetic(world, cfg.pipeline.seed).map_err(PipelineError::from)?;
    let dir = &c.output_dir;
    create_dir(dir)?;
    let manifest = write_radar_sequence(dir, &seq.scans).map_err(io_err(dir))?;
    let imu = dir.join("imu.txt");
    write_imu_sequence(&imu, &seq.imu).map_err(io_err(&imu))?;
    let gt = dir.join("ground_truth.tum");
    Trajectory::new(seq.ground_truth.clone())?.write_tum(&gt)?;

    // A config that replays these files with the rest of the original settings.
    let mut replay = String::new();
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(e.to_string()))?;
        for line in text.lines() {
            let key = line.trim_start();
            if !(key.starts_with("input.") || key.starts_with("synthetic.") || key.starts_with("seed")) {
                replay.push_str(line);
                replay.push('\n');
            }
        }
    }
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let _ = writeln!(replay, "seed = {}", cfg.pipeline.seed);
    let _ = writeln!(replay, "input.source = files");
    let _ = writeln!(replay, "input.radar_format = manifest");
    let _ = writeln!(replay, "input.radar = {}", abs(&manifest).display());
    let _ = writeln!(replay, "input.imu = {}", abs(&imu).display());
    let _ = writeln!(replay, "input.ground_truth = {}", abs(&gt).display());
    write(&dir.join("replay.cfg"), &replay)?;

    println!(
        "scans = {}\nimu_samples = {}\npath_length_m = {:.3}",
        seq.scans.len(),
        seq.imu.len(),
        seq.path_length()
    );
    Ok(())
}

fn cmd_evaluate(
    estimate: &Path,
    ground_truth: &Path,
    alignment: AlignArg,
    output_dir: Option<&Path>,
) -> Result<(), CliError> {
    let est = Trajectory::load_tum(estimate)?;
    let gt = Trajectory::load_tum(ground_truth)?;
    let align = match alignment {
        AlignArg::None => Alignment::None,
        AlignArg::Se3 => Alignment::Se3,
    };
    let report = evaluate(&est, &gt, align)?;
    if let Some(dir) = output_dir {
        create_dir(dir)?;
        write(&dir.join("metrics.txt"), &report.summary())?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_segment_ground(c: &Common, scan_path: Option<&Path>, index: usize) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let p = &cfg.pipeline;
    let scan = match scan_path {
        Some(path) => load_scan_file(path, 0.0, &p.ingest_options(RadarFormat::Manifest))
            .map_err(PipelineError::from)?,
        None => {
            let data = load_input(&cfg, p.seed)?;
            let n = data.scans.len();
            data.scans
                .into_iter()
                .nth(index)
                .ok_or_else(|| CliError::Data(format!("scan index {index} out of range ({n} scans)")))?
        }
    };
    let scan = radius_filter(&scan, p.min_range, p.max_range);
    // Height refinement needs the ego-velocity; segment without it if the fit fails.
    let ego = estimate_ego_velocity(&scan, &p.egovel).ok();
    let seg = segment_ground(&scan, ego.as_ref(), &p.czm, &p.height)
        .map_err(|e| CliError::Estimation(format!("ground_segmentation: {e}")))?;

    let mut class = vec!["static"; scan.len()];
    for &i in &seg.ground {
        class[i] = "ground";
    }
    for &i in &seg.noise {
        class[i] = "noise";
    }
    let mut text = String::new();
    for (pt, c) in scan.points.iter().zip(&class) {
        let q = pt.position;
        let _ = writeln!(text, "{} {} {} {} {c}", q.x, q.y, q.z, pt.doppler);
    }
    create_dir(&c.output_dir)?;
    write(&c.output_dir.join("segments.txt"), &text)?;
    println!(
        "points = {}\nground = {}\nstatic = {}\nnoise = {}\nrefined_heights = {}",
        scan.len(),
        seg.ground.len(),
        seg.static_points.len(),
        seg.noise.len(),
        seg.refined_count
    );
    Ok(())
}

fn cmd_plot_data(paths: &[PathBuf], dir: &Path) -> Result<(), CliError> {
    let mut named = Vec::new();
    for (k, path) in paths.iter().enumerate() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("traj{k}"));
        let name = if named.iter().any(|(n, _): &(String, Trajectory)| *n == stem) {
            format!("{stem}_{k}")
        } else {
            stem
        };
        named.push((name, Trajectory::load_tum(path)?));
    }
    let refs: Vec<(&str, &Trajectory)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for f in emit_plot_data(dir, &refs)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Evaluate {
            estimate,
            ground_truth,
            alignment,
            output_dir,
        } => cmd_evaluate(estimate, ground_truth, *alignment, output_dir.as_deref()),
        Command::SegmentGround {
            common,
            scan,
            index,
        } => cmd_segment_ground(common, scan.as_deref(), *index),
        Command::PlotData {
            trajectories,
            output_dir,
        } => cmd_plot_data(trajectories, output_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rio: {e}");
            ExitCode::from(e.code())
        }
    }
}
