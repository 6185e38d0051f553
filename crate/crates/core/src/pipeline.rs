//! Tile-parallel driver: cloud screening, optional band derivation, then per
//! tile masking, detrending, denoising, forest fitting and detection.
//!
//! Tiles never communicate. Each worker returns its tile's outputs and the
//! merge runs single-threaded in tile order, so results do not depend on the
//! worker count or scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{filter_by_cloud, load_cube_dir, ForestMask, Scene, SceneCube};
use crate::detector::{run_tile, write_alerts, AlertRecord, DetectionMap, Thresholds, NO_DETECTION, UNMODELED};
use crate::error::{BuddError, Result};
use crate::forest::{fit_tile, Channel, ChannelCubes, ChannelSet, FitConfig, ModelGrid, PerChannel, PeriodSplit};
use crate::grid::{Grid, Rect};
use crate::preprocess::{
    apply_mask, derive_coherence, derive_ndvi, derive_ratio, detrend, load_complex_pairs, DetrendConfig, RatioUnits,
};
use crate::raw;
use crate::tvdenoise::{tv_denoise, DenoiseParams, Volume};

pub const MIN_TILE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    #[default]
    DetrendThenDenoise,
    DenoiseThenDetrend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tile_size: usize,
    pub resolution_m: f64,
    pub cloud_max_fraction: f64,
    pub detrend: DetrendConfig,
    pub detrend_enabled: bool,
    pub denoise: PerChannel<DenoiseParams>,
    pub denoise_enabled: bool,
    pub stage_order: StageOrder,
    pub fit: FitConfig,
    pub thresholds: Thresholds,
    pub split: PeriodSplit,
    pub modalities: ChannelSet,
    /// 0 uses every available core.
    pub workers: usize,
    pub coherence_window: usize,
    pub ratio_units: RatioUnits,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size: 512,
            resolution_m: 20.0,
            cloud_max_fraction: 0.15,
            detrend: DetrendConfig::default(),
            detrend_enabled: true,
            denoise: PerChannel {
                ndvi: DenoiseParams::with_lambda(0.1),
                ratio: DenoiseParams::with_lambda(0.3),
                coherence: DenoiseParams::with_lambda(0.3),
            },
            denoise_enabled: true,
            stage_order: StageOrder::default(),
            fit: FitConfig::default(),
            thresholds: Thresholds::default(),
            split: PeriodSplit::default(),
            modalities: ChannelSet::NBC,
            workers: 0,
            coherence_window: 5,
            ratio_units: RatioUnits::Linear,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < MIN_TILE_SIZE {
            return Err(BuddError::invalid(format!(
                "tile_size {} below minimum {MIN_TILE_SIZE}",
                self.tile_size
            )));
        }
        if !(0.0..=1.0).contains(&self.cloud_max_fraction) {
            return Err(BuddError::invalid(format!(
                "cloud_max_fraction {} outside [0, 1]",
                self.cloud_max_fraction
            )));
        }
        if !(self.resolution_m > 0.0) {
            return Err(BuddError::invalid("resolution_m must be positive"));
        }
        if !(0.0..=100.0).contains(&self.detrend.percentile) {
            return Err(BuddError::invalid("detrend percentile outside [0, 100]"));
        }
        if self.modalities.is_empty() {
            return Err(BuddError::invalid("modality subset must not be empty"));
        }
        for c in Channel::ALL {
            self.denoise.get(c).validate()?;
        }
        self.fit.validate()?;
        self.thresholds.validate()?;
        self.split.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = raw::read_json(path)?;
        config.validate()?;
        Ok(config)
    }
}

/// Splits a raster into row-major `tile_size` squares; edge tiles are smaller.
pub fn plan_tiles(height: usize, width: usize, tile_size: usize) -> Vec<Rect> {
    if tile_size == 0 {
        return Vec::new();
    }
    let mut tiles = Vec::new();
    for row in (0..height).step_by(tile_size) {
        for col in (0..width).step_by(tile_size) {
            tiles.push(Rect {
                row,
                col,
                height: tile_size.min(height - row),
                width: tile_size.min(width - col),
            });
        }
    }
    tiles
}

/// Input locations. Derived cubes are used directly; raw bands are converted
/// when the corresponding derived cube is absent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InputPaths {
    pub ndvi: Option<PathBuf>,
    pub ratio: Option<PathBuf>,
    pub coherence: Option<PathBuf>,
    pub red: Option<PathBuf>,
    pub nir: Option<PathBuf>,
    pub vv: Option<PathBuf>,
    pub vh: Option<PathBuf>,
    pub slc_pairs: Option<PathBuf>,
}

fn expect_modality(cube: SceneCube, c: Channel) -> Result<SceneCube> {
    if cube.modality != c.modality() {
        return Err(BuddError::invalid(format!(
            "expected a {} cube, found {}",
            c.modality(),
            cube.modality
        )));
    }
    Ok(cube)
}

/// Loads derived cubes, deriving NDVI, ratio and coherence from raw inputs
/// where needed.
pub fn load_inputs(paths: &InputPaths, config: &PipelineConfig) -> Result<ChannelCubes> {
    let mut cubes = ChannelCubes::new();
    let ndvi = match (&paths.ndvi, &paths.red, &paths.nir) {
        (Some(p), _, _) => Some(expect_modality(load_cube_dir(p)?, Channel::Ndvi)?),
        (None, Some(r), Some(n)) => Some(derive_ndvi(&load_cube_dir(r)?, &load_cube_dir(n)?)?),
        _ => None,
    };
    let ratio = match (&paths.ratio, &paths.vv, &paths.vh) {
        (Some(p), _, _) => Some(expect_modality(load_cube_dir(p)?, Channel::Ratio)?),
        (None, Some(v), Some(h)) => Some(derive_ratio(&load_cube_dir(v)?, &load_cube_dir(h)?, config.ratio_units)?),
        _ => None,
    };
    let coherence = match (&paths.coherence, &paths.slc_pairs) {
        (Some(p), _) => Some(expect_modality(load_cube_dir(p)?, Channel::Coherence)?),
        (None, Some(dir)) => {
            let (grid, pairs) = load_complex_pairs(dir)?;
            Some(derive_coherence(&pairs, grid, config.coherence_window)?)
        }
        _ => None,
    };
    for cube in [ndvi, ratio, coherence].into_iter().flatten() {
        cubes.insert(cube)?;
    }
    Ok(cubes)
}

/// Stage timings and bookkeeping for one tile.
#[derive(Debug, Clone, Default)]
struct TileStats {
    timings: BTreeMap<&'static str, f64>,
    detrend_dropped: usize,
    warnings: Vec<String>,
}

impl TileStats {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings.entry(stage).or_default() += start.elapsed().as_secs_f64();
        out
    }
}

fn stage_err(tile: usize, stage: &'static str) -> impl FnOnce(BuddError) -> BuddError {
    move |e| BuddError::Stage {
        tile,
        stage,
        source: Box::new(e),
    }
}

fn denoise_cube(cube: &SceneCube, params: &DenoiseParams) -> Result<SceneCube> {
    if cube.is_empty() || params.lambda == 0.0 {
        return Ok(cube.clone());
    }
    let n = cube.pixel_count();
    let mut values = Vec::with_capacity(n * cube.len());
    let mut valid = Vec::with_capacity(n * cube.len());
    for s in &cube.scenes {
        values.extend_from_slice(&s.values);
        valid.extend((0..n).map(|i| s.is_valid(i)));
    }
    let volume = Volume::new(cube.len(), cube.height, cube.width, values, valid)?;
    let result = tv_denoise(&volume, params)?;
    let mut out = cube.header_only();
    for (k, s) in cube.scenes.iter().enumerate() {
        out.scenes.push(Scene::new(
            s.meta.clone(),
            result.values[k * n..(k + 1) * n].to_vec(),
            s.mask.clone(),
        ));
    }
    Ok(out)
}

/// Masking, detrending and denoising of one tile's cubes.
fn prepare_tile(
    tile: usize,
    cubes: &ChannelCubes,
    forest: &ForestMask,
    config: &PipelineConfig,
    stats: &mut TileStats,
) -> Result<ChannelCubes> {
    let masked = stats
        .time("apply_mask", || cubes.try_map(|_, c| apply_mask(c)))
        .map_err(stage_err(tile, "apply_mask"))?;
    let detrend_stage = |input: &ChannelCubes, stats: &mut TileStats| -> Result<ChannelCubes> {
        if !config.detrend_enabled {
            return Ok(input.clone());
        }
        let mut warnings = Vec::new();
        let mut dropped = 0;
        let out = stats
            .time("detrend", || {
                input.try_map(|_, c| {
                    let outcome = detrend(c, forest, &config.detrend)?;
                    dropped += outcome.dropped.len();
                    warnings.extend(outcome.warnings);
                    Ok(outcome.cube)
                })
            })
            .map_err(stage_err(tile, "detrend"))?;
        stats.detrend_dropped += dropped;
        stats.warnings.extend(warnings.into_iter().map(|w| format!("tile {tile}: {w}")));
        Ok(out)
    };
    let denoise_stage = |input: &ChannelCubes, stats: &mut TileStats| -> Result<ChannelCubes> {
        if !config.denoise_enabled {
            return Ok(input.clone());
        }
        stats
            .time("tv_denoise", || input.try_map(|ch, c| denoise_cube(c, &config.denoise.get(ch))))
            .map_err(stage_err(tile, "tv_denoise"))
    };
    match config.stage_order {
        StageOrder::DetrendThenDenoise => {
            let d = detrend_stage(&masked, stats)?;
            denoise_stage(&d, stats)
        }
        StageOrder::DenoiseThenDetrend => {
            let d = denoise_stage(&masked, stats)?;
            detrend_stage(&d, stats)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub height: usize,
    pub width: usize,
    pub tiles: usize,
    pub workers: usize,
    pub modalities: String,
    pub scenes_loaded: BTreeMap<String, usize>,
    pub scenes_after_cloud_filter: BTreeMap<String, usize>,
    pub dropped_by_cloud: Vec<String>,
    /// Scene drops summed over tiles.
    pub dropped_by_detrend: usize,
    /// Selected channels with no monitoring-period scenes.
    pub missing_modalities: Vec<String>,
    pub unmodeled_pixels: usize,
    pub unmodeled_by_channel: BTreeMap<String, usize>,
    pub detections: usize,
    pub warnings: Vec<String>,
    /// Wall time per stage summed over tiles.
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunReport {
    fn absorb(&mut self, stats: TileStats) {
        for (k, v) in stats.timings {
            *self.stage_seconds.entry(k.to_string()).or_default() += v;
        }
        self.dropped_by_detrend += stats.detrend_dropped;
        self.warnings.extend(stats.warnings);
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: DetectionMap,
    pub alerts: Vec<AlertRecord>,
    pub models: ModelGrid,
    pub report: RunReport,
}

impl PipelineOutput {
    /// Writes `detections.i32` (+ sidecar), `alerts.jsonl` and `report.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.map.save(&dir.join("detections.i32"))?;
        write_alerts(&dir.join("alerts.jsonl"), &self.alerts)?;
        raw::write_json(&dir.join("report.json"), &self.report)
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder
        .build()
        .map_err(|e| BuddError::invalid(format!("cannot build worker pool: {e}")))
}

/// Runs `work` on every tile in a pool of `workers` threads and returns the
/// results in tile order. The first failing tile (in tile order) wins.
fn execute_tiles<T: Send>(
    tiles: &[Rect],
    workers: usize,
    work: impl Fn(usize, Rect) -> Result<T> + Sync,
) -> Result<(Vec<T>, usize)> {
    let pool = thread_pool(workers)?;
    let threads = pool.current_num_threads();
    let results: Vec<Result<T>> =
        pool.install(|| tiles.par_iter().enumerate().map(|(i, &rect)| work(i, rect)).collect());
    Ok((results.into_iter().collect::<Result<Vec<T>>>()?, threads))
}

struct Screened {
    cubes: ChannelCubes,
    report: RunReport,
}

/// Global, scene-level preparation shared by every entry point.
fn screen_inputs(config: &PipelineConfig, cubes: &ChannelCubes, forest: &ForestMask) -> Result<Screened> {
    config.validate()?;
    let grid = cubes
        .grid()
        .ok_or_else(|| BuddError::invalid("no input cubes supplied"))?;
    grid.ensure_matches(
        &Grid::new(grid.height, grid.width, config.resolution_m),
        "configured resolution",
    )?;
    forest.ensure_shape(grid.height, grid.width)?;
    let mut report = RunReport {
        height: grid.height,
        width: grid.width,
        modalities: config.modalities.to_string(),
        ..RunReport::default()
    };
    let split = config.split;
    let mut selected = ChannelCubes::new();
    for (c, cube) in cubes.iter() {
        if config.modalities.contains(c) {
            selected.insert(cube.clone())?;
        }
    }
    let screened = selected.try_map(|c, cube| {
        report.scenes_loaded.insert(c.name().into(), cube.len());
        let outcome = filter_by_cloud(cube, config.cloud_max_fraction);
        report
            .dropped_by_cloud
            .extend(outcome.dropped.iter().map(|k| format!("{c} {k}")));
        report.warnings.extend(outcome.warnings);
        let kept = outcome.cube.between(split.define_start, split.monitor_end);
        report.scenes_after_cloud_filter.insert(c.name().into(), kept.len());
        Ok(kept)
    })?;
    for c in config.modalities.iter() {
        let monitored = screened
            .get(c)
            .map_or(0, |cube| cube.dates().filter(|&d| split.in_monitor(d)).count());
        if monitored == 0 {
            report.missing_modalities.push(c.name().into());
            report
                .warnings
                .push(format!("selected modality {c} has no monitoring-period scenes"));
        }
    }
    Ok(Screened {
        cubes: screened,
        report,
    })
}

fn finish_report(report: &mut RunReport, models: &ModelGrid, map: &DetectionMap, subset: ChannelSet) {
    for c in subset.iter() {
        let n = models
            .channel(c)
            .map_or(models.height * models.width, |g| g.fits.iter().filter(|f| f.model().is_none()).count());
        report.unmodeled_by_channel.insert(c.name().into(), n);
    }
    report.unmodeled_pixels = map.data.iter().filter(|&&v| v == UNMODELED).count();
    report.detections = map.detected_count();
}

fn offset_alerts(alerts: Vec<AlertRecord>, rect: Rect) -> impl Iterator<Item = AlertRecord> {
    alerts.into_iter().map(move |mut a| {
        a.row += rect.row;
        a.col += rect.col;
        a
    })
}

/// End-to-end run: fit on the defining period and detect over the monitoring
/// period, tile by tile.
pub fn run_pipeline(config: &PipelineConfig, cubes: &ChannelCubes, forest: &ForestMask) -> Result<PipelineOutput> {
    let Screened { cubes, mut report } = screen_inputs(config, cubes, forest)?;
    let (h, w) = (report.height, report.width);
    let tiles = plan_tiles(h, w, config.tile_size);
    report.tiles = tiles.len();
    let split = config.split;

    let (outputs, threads) = execute_tiles(&tiles, config.workers, |tile, rect| {
        let mut stats = TileStats::default();
        let local = cubes.crop(rect).map_err(stage_err(tile, "crop"))?;
        let local_forest = forest.crop(rect);
        let prepared = prepare_tile(tile, &local, &local_forest, config, &mut stats)?;
        let define = prepared.between(split.define_start, split.define_end);
        let mut models = stats
            .time("fit_tile", || fit_tile(&define, &split, &config.fit))
            .map_err(stage_err(tile, "fit_tile"))?;
        models
            .restrict_to_forest(&local_forest)
            .map_err(stage_err(tile, "fit_tile"))?;
        let monitor = prepared.between(split.monitor_start, split.monitor_end);
        let detection = stats
            .time("run_tile", || run_tile(&models, &monitor, &config.thresholds, config.modalities))
            .map_err(stage_err(tile, "run_tile"))?;
        Ok((rect, models, detection, stats))
    })?;
    report.workers = threads;

    let mut map = DetectionMap::filled(h, w, NO_DETECTION);
    let mut merged_models = ModelGrid::empty(h, w);
    let mut alerts = Vec::new();
    for (rect, models, detection, stats) in outputs {
        map.paste(rect, &detection.map);
        merged_models.paste(rect, &models);
        alerts.extend(offset_alerts(detection.alerts, rect));
        report.absorb(stats);
    }
    alerts.sort_by_key(|a| (a.row, a.col));
    finish_report(&mut report, &merged_models, &map, config.modalities);
    Ok(PipelineOutput {
        map,
        alerts,
        models: merged_models,
        report,
    })
}

/// Fits forest models only (defining period), tile by tile.
pub fn fit_models(config: &PipelineConfig, cubes: &ChannelCubes, forest: &ForestMask) -> Result<(ModelGrid, RunReport)> {
    let Screened { cubes, mut report } = screen_inputs(config, cubes, forest)?;
    let split = config.split;
    let cubes = cubes.between(split.define_start, split.define_end);
    let (h, w) = (report.height, report.width);
    let tiles = plan_tiles(h, w, config.tile_size);
    report.tiles = tiles.len();
    let (outputs, threads) = execute_tiles(&tiles, config.workers, |tile, rect| {
        let mut stats = TileStats::default();
        let local = cubes.crop(rect).map_err(stage_err(tile, "crop"))?;
        let local_forest = forest.crop(rect);
        let prepared = prepare_tile(tile, &local, &local_forest, config, &mut stats)?;
        let mut models = stats
            .time("fit_tile", || fit_tile(&prepared, &split, &config.fit))
            .map_err(stage_err(tile, "fit_tile"))?;
        models
            .restrict_to_forest(&local_forest)
            .map_err(stage_err(tile, "fit_tile"))?;
        Ok((rect, models, stats))
    })?;
    report.workers = threads;
    let mut merged = ModelGrid::empty(h, w);
    for (rect, models, stats) in outputs {
        merged.paste(rect, &models);
        report.absorb(stats);
    }
    report.missing_modalities.clear();
    report.warnings.retain(|w| !w.starts_with("selected modality"));
    Ok((merged, report))
}

/// Detection over the monitoring period with previously fitted models.
pub fn detect_with_models(
    config: &PipelineConfig,
    cubes: &ChannelCubes,
    forest: &ForestMask,
    models: &ModelGrid,
) -> Result<PipelineOutput> {
    let Screened { cubes, mut report } = screen_inputs(config, cubes, forest)?;
    let split = config.split;
    let cubes = cubes.between(split.monitor_start, split.monitor_end);
    let (h, w) = (report.height, report.width);
    if models.height != h || models.width != w {
        return Err(BuddError::GridMismatch(format!(
            "models {}x{} vs cubes {h}x{w}",
            models.height, models.width
        )));
    }
    let tiles = plan_tiles(h, w, config.tile_size);
    report.tiles = tiles.len();
    let (outputs, threads) = execute_tiles(&tiles, config.workers, |tile, rect| {
        let mut stats = TileStats::default();
        let local = cubes.crop(rect).map_err(stage_err(tile, "crop"))?;
        let local_forest = forest.crop(rect);
        let prepared = prepare_tile(tile, &local, &local_forest, config, &mut stats)?;
        let local_models = models.crop(rect);
        let detection = stats
            .time("run_tile", || run_tile(&local_models, &prepared, &config.thresholds, config.modalities))
            .map_err(stage_err(tile, "run_tile"))?;
        Ok((rect, detection, stats))
    })?;
    report.workers = threads;
    let mut map = DetectionMap::filled(h, w, NO_DETECTION);
    let mut alerts = Vec::new();
    for (rect, detection, stats) in outputs {
        map.paste(rect, &detection.map);
        alerts.extend(offset_alerts(detection.alerts, rect));
        report.absorb(stats);
    }
    alerts.sort_by_key(|a| (a.row, a.col));
    finish_report(&mut report, models, &map, config.modalities);
    Ok(PipelineOutput {
        map,
        alerts,
        models: models.clone(),
        report,
    })
}
