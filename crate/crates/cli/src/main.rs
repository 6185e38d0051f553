use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use budd_core::analyze::{
    agreement_table, compare_maps, count_detections, detection_table, render, timing_histogram, ComparisonMap,
    MapView, Palette,
};
use budd_core::cube::{filter_by_cloud, load_cube_dir, save_cube, ForestMask, SceneCube};
use budd_core::detector::{read_map_kind, DetectionMap};
use budd_core::forest::{load_models, save_models, summarize_define_period, Channel, ChannelCubes, ChannelSet};
use budd_core::pipeline::{detect_with_models, fit_models, run_pipeline, PipelineConfig, StageOrder};
use budd_core::preprocess::{apply_mask, derive_coherence, derive_ndvi, derive_ratio, load_complex_pairs, RatioUnits};
use budd_core::raw::{read_json, write_json};
use budd_core::synth::{generate, ScenarioSpec};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "budd", version, about = "Bayesian multi-modal deforestation alerts over raster time series")]
struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with known change.
    Simulate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cloud screening and derivation of NDVI, VV/VH ratio and coherence.
    Preprocess(PreprocessArgs),
    /// Fit per-pixel forest models over the defining period.
    Fit {
        #[command(flatten)]
        cubes: CubeArgs,
        #[arg(long)]
        forest_mask: PathBuf,
        /// START:END
        #[arg(long, value_parser = parse_range)]
        define: Option<(NaiveDate, NaiveDate)>,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the detector over the monitoring period with fitted models.
    Detect {
        #[command(flatten)]
        cubes: CubeArgs,
        #[arg(long)]
        models: PathBuf,
        /// Defaults to the mask stored with the models.
        #[arg(long)]
        forest_mask: Option<PathBuf>,
        /// START:END
        #[arg(long, value_parser = parse_range)]
        monitor: Option<(NaiveDate, NaiveDate)>,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and detect in one pass.
    Run {
        #[command(flatten)]
        cubes: CubeArgs,
        #[arg(long)]
        forest_mask: PathBuf,
        #[arg(long, value_parser = parse_range)]
        define: Option<(NaiveDate, NaiveDate)>,
        #[arg(long, value_parser = parse_range)]
        monitor: Option<(NaiveDate, NaiveDate)>,
        #[command(flatten)]
        tuning: Tuning,
        #[arg(long)]
        out: PathBuf,
    },
    /// Agreement map and timing histogram of two detection maps.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 30)]
        bin_days: i32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observation counts per channel, and detection counts of maps.
    Summarize {
        #[command(flatten)]
        cubes: OptionalCubes,
        /// Restrict counts to START:END.
        #[arg(long, value_parser = parse_range)]
        period: Option<(NaiveDate, NaiveDate)>,
        /// NAME=MAP pairs, comma separated.
        #[arg(long, value_delimiter = ',')]
        maps: Vec<String>,
    },
    /// Render a detection or comparison map as a PPM image.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        palette: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CubeArgs {
    /// `N=DIR,B=DIR,C=DIR`, or one directory holding ndvi/, ratio/, coherence/.
    #[arg(long)]
    cubes: String,
}

#[derive(Args)]
struct OptionalCubes {
    #[arg(long)]
    cubes: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Units {
    Linear,
    Db,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Existing cube to cloud-screen and mask.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, requires = "nir")]
    red: Option<PathBuf>,
    #[arg(long, requires = "red")]
    nir: Option<PathBuf>,
    #[arg(long, requires = "vh")]
    vv: Option<PathBuf>,
    #[arg(long, requires = "vv")]
    vh: Option<PathBuf>,
    #[arg(long)]
    slc_pairs: Option<PathBuf>,
    #[arg(long)]
    cloud_max: Option<f64>,
    #[arg(long)]
    coherence_window: Option<usize>,
    #[arg(long, value_enum)]
    ratio_units: Option<Units>,
    #[arg(long)]
    out: PathBuf,
}

/// Flag overrides applied on top of the configuration file.
#[derive(Args, Default)]
struct Tuning {
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    cloud_max: Option<f64>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    tv_lambda: Option<f64>,
    #[arg(long)]
    tv_iters: Option<usize>,
    #[arg(long)]
    tv_tol: Option<f64>,
    #[arg(long)]
    no_denoise: bool,
    #[arg(long)]
    no_detrend: bool,
    /// Denoise before detrending instead of after.
    #[arg(long)]
    denoise_first: bool,
    /// Channel letters, e.g. NBC, NB, BC.
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long)]
    flag: Option<f64>,
    #[arg(long)]
    confirm: Option<f64>,
    #[arg(long)]
    clear: Option<f64>,
    #[arg(long)]
    min_obs: Option<u32>,
}

impl Tuning {
    fn apply(&self, c: &mut PipelineConfig) -> Result<()> {
        if let Some(v) = self.tile_size {
            c.tile_size = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = self.cloud_max {
            c.cloud_max_fraction = v;
        }
        if let Some(v) = self.percentile {
            c.detrend.percentile = v;
        }
        for ch in Channel::ALL {
            let p = match ch {
                Channel::Ndvi => &mut c.denoise.ndvi,
                Channel::Ratio => &mut c.denoise.ratio,
                Channel::Coherence => &mut c.denoise.coherence,
            };
            if let Some(v) = self.tv_lambda {
                p.lambda = v;
            }
            if let Some(v) = self.tv_iters {
                p.max_iters = v;
            }
            if let Some(v) = self.tv_tol {
                p.tol = v;
            }
        }
        if self.no_denoise {
            c.denoise_enabled = false;
        }
        if self.no_detrend {
            c.detrend_enabled = false;
        }
        if self.denoise_first {
            c.stage_order = StageOrder::DenoiseThenDetrend;
        }
        if let Some(m) = &self.modalities {
            c.modalities = m.parse::<ChannelSet>()?;
        }
        if let Some(v) = self.flag {
            c.thresholds.flag = v;
        }
        if let Some(v) = self.confirm {
            c.thresholds.confirm = v;
        }
        if let Some(v) = self.clear {
            c.thresholds.clear = v;
        }
        if let Some(v) = self.min_obs {
            c.thresholds.min_obs = v;
        }
        Ok(())
    }
}

fn parse_range(s: &str) -> Result<(NaiveDate, NaiveDate), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected START:END, got `{s}`"))?;
    let parse = |d: &str| d.trim().parse::<NaiveDate>().map_err(|e| format!("bad date `{d}`: {e}"));
    let (a, b) = (parse(a)?, parse(b)?);
    if a > b {
        return Err(format!("range start {a} is after end {b}"));
    }
    Ok((a, b))
}

fn load_cubes(spec: &str) -> Result<ChannelCubes> {
    let mut cubes = ChannelCubes::new();
    if !spec.contains('=') {
        let root = Path::new(spec);
        for c in Channel::ALL {
            let dir = root.join(c.name());
            if dir.is_dir() {
                cubes.insert(load_cube_dir(&dir)?)?;
            }
        }
        if cubes.grid().is_none() {
            bail!("no ndvi/, ratio/ or coherence/ cube under {spec}");
        }
        return Ok(cubes);
    }
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (letter, dir) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("expected LETTER=DIR in `{part}`"))?;
        let mut chars = letter.trim().chars();
        let channel = match (chars.next().and_then(Channel::from_letter), chars.next()) {
            (Some(c), None) => c,
            _ => bail!("unknown channel `{letter}` (use N, B or C)"),
        };
        let cube = load_cube_dir(Path::new(dir.trim()))?;
        if Channel::from_modality(cube.modality) != Some(channel) {
            bail!("{dir} holds a {} cube, not {}", cube.modality, channel);
        }
        cubes.insert(cube)?;
    }
    Ok(cubes)
}

fn base_config(path: Option<&Path>, fallback: Option<&Path>) -> Result<PipelineConfig> {
    match path.or(fallback.filter(|p| p.exists())) {
        Some(p) => Ok(read_json(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn finish_config(mut c: PipelineConfig, tuning: &Tuning) -> Result<PipelineConfig> {
    tuning.apply(&mut c)?;
    c.validate()?;
    Ok(c)
}

const SHOWN_WARNINGS: usize = 5;

fn print_warnings(warnings: &[String]) {
    for w in warnings.iter().take(SHOWN_WARNINGS) {
        eprintln!("warning: {w}");
    }
    if warnings.len() > SHOWN_WARNINGS {
        eprintln!("warning: ... and {} more", warnings.len() - SHOWN_WARNINGS);
    }
}

fn simulate(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: ScenarioSpec = match spec {
        Some(p) => read_json(p)?,
        None => ScenarioSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate(&spec)?;
    scene.save(out)?;
    write_json(&out.join("scenario.json"), &spec)?;
    println!(
        "wrote {}x{} scenario ({} changed pixels) to {}",
        spec.height,
        spec.width,
        scene.truth.detected_count(),
        out.display()
    );
    Ok(())
}

fn preprocess(args: &PreprocessArgs, config: PipelineConfig) -> Result<()> {
    let cloud_max = args.cloud_max.unwrap_or(config.cloud_max_fraction);
    let screen = |cube: SceneCube, what: &str| -> SceneCube {
        let outcome = filter_by_cloud(&cube, cloud_max);
        if !outcome.dropped.is_empty() {
            eprintln!("{what}: dropped {} scene(s) above cloud fraction {cloud_max}", outcome.dropped.len());
        }
        print_warnings(&outcome.warnings);
        outcome.cube
    };
    let mut wrote = Vec::new();
    if let Some(dir) = &args.input {
        let cube = screen(load_cube_dir(dir)?, "input");
        let name = cube.modality.name();
        wrote.push(save_cube(&apply_mask(&cube)?, &args.out.join(name))?);
    }
    if let (Some(red), Some(nir)) = (&args.red, &args.nir) {
        let red = screen(load_cube_dir(red)?, "red");
        let nir = screen(load_cube_dir(nir)?, "nir");
        // keep only acquisitions that survived screening in both bands
        let keys: Vec<_> = red.scenes.iter().map(|s| s.meta.key()).collect();
        let nir = nir.retain_scenes(|m| keys.contains(&m.key()));
        let nir_keys: Vec<_> = nir.scenes.iter().map(|s| s.meta.key()).collect();
        let red = red.retain_scenes(|m| nir_keys.contains(&m.key()));
        wrote.push(save_cube(&derive_ndvi(&red, &nir)?, &args.out.join("ndvi"))?);
    }
    if let (Some(vv), Some(vh)) = (&args.vv, &args.vh) {
        let units = match args.ratio_units {
            Some(Units::Db) => RatioUnits::Decibel,
            Some(Units::Linear) => RatioUnits::Linear,
            None => config.ratio_units,
        };
        let cube = derive_ratio(&load_cube_dir(vv)?, &load_cube_dir(vh)?, units)?;
        wrote.push(save_cube(&cube, &args.out.join("ratio"))?);
    }
    if let Some(dir) = &args.slc_pairs {
        let (grid, pairs) = load_complex_pairs(dir)?;
        let window = args.coherence_window.unwrap_or(config.coherence_window);
        wrote.push(save_cube(&derive_coherence(&pairs, grid, window)?, &args.out.join("coherence"))?);
    }
    if wrote.is_empty() {
        bail!("nothing to do: give --in, --red/--nir, --vv/--vh or --slc-pairs");
    }
    for p in wrote {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn compare(a: &Path, b: &Path, bin_days: i32, out: &Path) -> Result<()> {
    let (a, b) = (DetectionMap::load(a)?, DetectionMap::load(b)?);
    let cmp = compare_maps(&a, &b)?;
    cmp.map.save(&out.join("comparison.u8"))?;
    write_json(&out.join("agreement.json"), &cmp.counts)?;
    let hist = timing_histogram(&a, &b, bin_days)?;
    let hist: Vec<(i32, usize)> = hist.into_iter().collect();
    write_json(&out.join("timing.json"), &serde_json::json!({ "bin_days": bin_days, "bins": hist }))?;
    print!("{}", agreement_table(&cmp.counts));
    Ok(())
}

fn summarize(cubes: Option<&str>, period: Option<(NaiveDate, NaiveDate)>, maps: &[String]) -> Result<()> {
    if cubes.is_none() && maps.is_empty() {
        bail!("give --cubes and/or --maps");
    }
    if let Some(spec) = cubes {
        let mut cubes = load_cubes(spec)?;
        if let Some((start, end)) = period {
            cubes = cubes.between(start, end);
        }
        println!("{:<10} {:>7} {:>10} {:>8} {:>6} {:>6}", "channel", "scenes", "mean_obs", "std", "min", "max");
        for (c, s) in summarize_define_period(&cubes) {
            let n = cubes.get(c).map_or(0, SceneCube::len);
            println!("{:<10} {:>7} {:>10.2} {:>8.2} {:>6} {:>6}", c.name(), n, s.mean, s.std, s.min, s.max);
        }
    }
    if !maps.is_empty() {
        let mut loaded = Vec::new();
        for entry in maps {
            let (name, path) = entry
                .split_once('=')
                .ok_or_else(|| anyhow!("expected NAME=MAP in `{entry}`"))?;
            loaded.push((name.to_string(), DetectionMap::load(Path::new(path))?));
        }
        let counts = count_detections(loaded.iter().map(|(n, m)| (n.as_str(), m)));
        print!("{}", detection_table(&counts));
    }
    Ok(())
}

fn render_map(map: &Path, palette: Option<&str>, out: &Path) -> Result<()> {
    let kind = read_map_kind(map)?;
    let image = match kind.as_str() {
        "detection" => {
            let palette = palette.unwrap_or("alerts").parse::<Palette>()?;
            render(MapView::Detection(&DetectionMap::load(map)?), palette)?
        }
        "comparison" => {
            let palette = palette.unwrap_or("agreement").parse::<Palette>()?;
            render(MapView::Comparison(&ComparisonMap::load(map)?), palette)?
        }
        other => bail!("unknown map kind `{other}`"),
    };
    image.save_ppm(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli.config.as_deref();
    match &cli.command {
        Command::Simulate { spec, seed, out } => simulate(spec.as_deref(), *seed, out).context("simulate"),
        Command::Preprocess(args) => preprocess(args, base_config(config_path, None)?).context("preprocess"),
        Command::Fit {
            cubes,
            forest_mask,
            define,
            tuning,
            out,
        } => {
            let mut config = base_config(config_path, None)?;
            if let Some((start, end)) = *define {
                config.split.define_start = start;
                config.split.define_end = end;
            }
            let config = finish_config(config, tuning)?;
            let cubes = load_cubes(&cubes.cubes).context("fit: loading cubes")?;
            let forest = ForestMask::load(forest_mask).context("fit: loading forest mask")?;
            let (models, report) = fit_models(&config, &cubes, &forest).context("fit")?;
            save_models(&models, out)?;
            forest.save(&out.join("forest_mask.u8"))?;
            write_json(&out.join("config.json"), &config)?;
            write_json(&out.join("fit_report.json"), &report)?;
            print_warnings(&report.warnings);
            println!(
                "fitted {}x{} models in {} tile(s); {} pixel(s) unmodeled in {}",
                models.height,
                models.width,
                report.tiles,
                models.unmodeled_count(config.modalities),
                config.modalities
            );
            Ok(())
        }
        Command::Detect {
            cubes,
            models,
            forest_mask,
            monitor,
            tuning,
            out,
        } => {
            let mut config = base_config(config_path, Some(&models.join("config.json")))?;
            if let Some((start, end)) = *monitor {
                config.split.monitor_start = start;
                config.split.monitor_end = end;
            }
            let config = finish_config(config, tuning)?;
            let cubes = load_cubes(&cubes.cubes).context("detect: loading cubes")?;
            let mask_path = forest_mask.clone().unwrap_or_else(|| models.join("forest_mask.u8"));
            let forest = ForestMask::load(&mask_path).context("detect: loading forest mask")?;
            let grid = load_models(models).context("detect: loading models")?;
            let output = detect_with_models(&config, &cubes, &forest, &grid).context("detect")?;
            output.save(out)?;
            print_warnings(&output.report.warnings);
            println!(
                "{} detection(s), {} unmodeled pixel(s); outputs in {}",
                output.report.detections,
                output.report.unmodeled_pixels,
                out.display()
            );
            Ok(())
        }
        Command::Run {
            cubes,
            forest_mask,
            define,
            monitor,
            tuning,
            out,
        } => {
            let mut config = base_config(config_path, None)?;
            if let Some((start, end)) = *define {
                config.split.define_start = start;
                config.split.define_end = end;
            }
            if let Some((start, end)) = *monitor {
                config.split.monitor_start = start;
                config.split.monitor_end = end;
            }
            let config = finish_config(config, tuning)?;
            let cubes = load_cubes(&cubes.cubes).context("run: loading cubes")?;
            let forest = ForestMask::load(forest_mask).context("run: loading forest mask")?;
            let output = run_pipeline(&config, &cubes, &forest).context("run")?;
            output.save(out)?;
            save_models(&output.models, &out.join("models"))?;
            write_json(&out.join("config.json"), &config)?;
            print_warnings(&output.report.warnings);
            println!(
                "{} detection(s), {} unmodeled pixel(s) over {} tile(s); outputs in {}",
                output.report.detections,
                output.report.unmodeled_pixels,
                output.report.tiles,
                out.display()
            );
            Ok(())
        }
        Command::Compare { a, b, bin_days, out } => compare(a, b, *bin_days, out).context("compare"),
        Command::Summarize { cubes, period, maps } => {
            summarize(cubes.cubes.as_deref(), *period, maps).context("summarize")
        }
        Command::Render { map, palette, out } => render_map(map, palette.as_deref(), out).context("render"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("budd: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
