//! Derived modalities (NDVI, VV/VH ratio, windowed coherence), mask
//! materialization, and per-scene forest-percentile detrending.

use std::path::Path;

use chrono::NaiveDate;
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::cube::{ForestMask, Modality, Pass, Scene, SceneCube, SceneKey, SceneMeta};
use crate::error::{BuddError, Result};
use crate::grid::Grid;
use crate::raw;

/// NDVI denominator guard, in reflectance units.
pub const NDVI_EPS: f32 = 1e-6;
/// VH guard for the backscatter ratio, in linear power units.
pub const RATIO_EPS: f32 = 1e-10;
/// Window power below which coherence is undefined.
pub const COHERENCE_EPS: f64 = 1e-20;

/// Values and validity of a freshly derived layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedLayer {
    pub values: Vec<f32>,
    pub mask: Vec<u8>,
}

impl DerivedLayer {
    fn into_scene(self, meta: SceneMeta) -> Scene {
        Scene::new(meta, self.values, Some(self.mask))
    }
}

fn ensure_same_len(a: &Scene, b: &Scene, what: &str) -> Result<()> {
    if a.values.len() != b.values.len() {
        return Err(BuddError::ShapeMismatch {
            what: what.to_string(),
            expected: a.values.len(),
            found: b.values.len(),
        });
    }
    Ok(())
}

/// `(nir - red) / (nir + red)`; invalid where either input is invalid or
/// `nir + red <= NDVI_EPS`.
pub fn compute_ndvi(red: &Scene, nir: &Scene) -> Result<DerivedLayer> {
    ensure_same_len(red, nir, "ndvi red/nir")?;
    let n = red.values.len();
    let mut values = vec![0.0f32; n];
    let mut mask = vec![0u8; n];
    for i in 0..n {
        let (Some(r), Some(ni)) = (red.valid_value(i), nir.valid_value(i)) else {
            continue;
        };
        let sum = ni + r;
        if sum <= NDVI_EPS {
            continue;
        }
        values[i] = ((ni - r) / sum).clamp(-1.0, 1.0);
        mask[i] = 1;
    }
    Ok(DerivedLayer { values, mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioUnits {
    #[default]
    Linear,
    Decibel,
}

/// `vv / max(vh, RATIO_EPS)`; invalid where `vh <= RATIO_EPS`.
pub fn compute_ratio(vv: &Scene, vh: &Scene, units: RatioUnits) -> Result<DerivedLayer> {
    ensure_same_len(vv, vh, "ratio vv/vh")?;
    let n = vv.values.len();
    let mut values = vec![0.0f32; n];
    let mut mask = vec![0u8; n];
    for i in 0..n {
        let (Some(v), Some(h)) = (vv.valid_value(i), vh.valid_value(i)) else {
            continue;
        };
        if h <= RATIO_EPS {
            continue;
        }
        let ratio = v / h.max(RATIO_EPS);
        let value = match units {
            RatioUnits::Linear => ratio,
            RatioUnits::Decibel => {
                if ratio <= 0.0 {
                    continue;
                }
                10.0 * ratio.log10()
            }
        };
        values[i] = value;
        mask[i] = 1;
    }
    Ok(DerivedLayer { values, mask })
}

/// Two co-registered single-look complex acquisitions of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexScenePair {
    pub height: usize,
    pub width: usize,
    pub date_a: NaiveDate,
    pub date_b: NaiveDate,
    pub pass: Option<Pass>,
    pub relative_orbit: Option<u32>,
    pub scene_a: Vec<Complex32>,
    pub scene_b: Vec<Complex32>,
}

impl ComplexScenePair {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        for (name, s) in [("scene_a", &self.scene_a), ("scene_b", &self.scene_b)] {
            if s.len() != n {
                return Err(BuddError::ShapeMismatch {
                    what: format!("complex pair {name}"),
                    expected: n,
                    found: s.len(),
                });
            }
        }
        if self.date_a >= self.date_b {
            return Err(BuddError::invalid(format!(
                "complex pair dates {} >= {}",
                self.date_a, self.date_b
            )));
        }
        Ok(())
    }
}

/// Windowed coherence magnitude
/// `|sum a conj(b)| / sqrt(sum |a|^2 * sum |b|^2)` over a `window`-sized
/// neighbourhood, shrunk at the raster borders.
pub fn compute_coherence(pair: &ComplexScenePair, window: usize) -> Result<DerivedLayer> {
    pair.validate()?;
    if window < 3 || window % 2 == 0 {
        return Err(BuddError::invalid(format!(
            "coherence window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = (pair.height, pair.width);
    let half = window / 2;
    let n = h * w;
    let mut values = vec![0.0f32; n];
    let mut mask = vec![0u8; n];
    for r in 0..h {
        let r0 = r.saturating_sub(half);
        let r1 = (r + half).min(h - 1);
        for c in 0..w {
            let c0 = c.saturating_sub(half);
            let c1 = (c + half).min(w - 1);
            let (mut cross_re, mut cross_im, mut pa, mut pb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let a = pair.scene_a[rr * w + cc];
                    let b = pair.scene_b[rr * w + cc];
                    let (ar, ai) = (a.re as f64, a.im as f64);
                    let (br, bi) = (b.re as f64, b.im as f64);
                    // a * conj(b)
                    cross_re += ar * br + ai * bi;
                    cross_im += ai * br - ar * bi;
                    pa += ar * ar + ai * ai;
                    pb += br * br + bi * bi;
                }
            }
            if pa <= COHERENCE_EPS || pb <= COHERENCE_EPS || !(pa * pb).is_finite() {
                continue;
            }
            let gamma = cross_re.hypot(cross_im) / (pa * pb).sqrt();
            values[r * w + c] = gamma.clamp(0.0, 1.0) as f32;
            mask[r * w + c] = 1;
        }
    }
    Ok(DerivedLayer { values, mask })
}

/// Marks every pixel that is masked out or non-finite as invalid in an
/// explicit mask. Pixel values are left as they are.
pub fn apply_mask(cube: &SceneCube) -> Result<SceneCube> {
    cube.validate()?;
    let mut out = cube.header_only();
    for scene in &cube.scenes {
        let mask = (0..scene.values.len())
            .map(|i| u8::from(scene.is_valid(i)))
            .collect();
        out.scenes.push(Scene::new(scene.meta.clone(), scene.values.clone(), Some(mask)));
    }
    Ok(out)
}

fn paired_scenes<'a>(a: &'a SceneCube, b: &'a SceneCube, what: &str) -> Result<Vec<(&'a Scene, &'a Scene)>> {
    a.grid().ensure_matches(&b.grid(), what)?;
    let a_keys: Vec<SceneKey> = a.scenes.iter().map(|s| s.meta.key()).collect();
    let b_keys: Vec<SceneKey> = b.scenes.iter().map(|s| s.meta.key()).collect();
    if a_keys != b_keys {
        return Err(BuddError::invalid(format!(
            "{what}: input cubes list different acquisitions"
        )));
    }
    Ok(a.scenes.iter().zip(&b.scenes).collect())
}

/// NDVI cube from matching red and NIR cubes.
pub fn derive_ndvi(red: &SceneCube, nir: &SceneCube) -> Result<SceneCube> {
    let mut out = SceneCube::new(Modality::Ndvi, red.grid());
    for (r, n) in paired_scenes(red, nir, "ndvi red/nir")? {
        out.scenes.push(compute_ndvi(r, n)?.into_scene(r.meta.clone()));
    }
    Ok(out)
}

/// VV/VH ratio cube from matching VV and VH cubes.
pub fn derive_ratio(vv: &SceneCube, vh: &SceneCube, units: RatioUnits) -> Result<SceneCube> {
    let mut out = SceneCube::new(Modality::Ratio, vv.grid());
    for (v, h) in paired_scenes(vv, vh, "ratio vv/vh")? {
        out.scenes.push(compute_ratio(v, h, units)?.into_scene(v.meta.clone()));
    }
    Ok(out)
}

/// Coherence cube; each pair becomes one scene dated at its later acquisition.
pub fn derive_coherence(pairs: &[ComplexScenePair], grid: Grid, window: usize) -> Result<SceneCube> {
    let mut out = SceneCube::new(Modality::Coherence, grid);
    for pair in pairs {
        if pair.height != grid.height || pair.width != grid.width {
            return Err(BuddError::GridMismatch(format!(
                "complex pair {}x{} vs {}x{}",
                pair.height, pair.width, grid.height, grid.width
            )));
        }
        let mut meta = SceneMeta::new(pair.date_b);
        meta.pass = pair.pass;
        meta.relative_orbit = pair.relative_orbit;
        out.push(compute_coherence(pair, window)?.into_scene(meta))?;
    }
    out.normalize()?;
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PairEntry {
    date_a: NaiveDate,
    date_b: NaiveDate,
    pass: Option<Pass>,
    relative_orbit: Option<u32>,
    scene_a: String,
    scene_b: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairManifest {
    version: u32,
    height: usize,
    width: usize,
    resolution_m: f64,
    pairs: Vec<PairEntry>,
}

pub const PAIRS_MANIFEST_NAME: &str = "pairs.json";

fn read_complex(path: &Path, n: usize) -> Result<Vec<Complex32>> {
    let bytes = raw::read_exact_len(path, n * 8, "complex scene")?;
    Ok(raw::le_to_f32(&bytes)
        .chunks_exact(2)
        .map(|c| Complex32::new(c[0], c[1]))
        .collect())
}

fn complex_to_le(values: &[Complex32]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|c| c.re.to_le_bytes().into_iter().chain(c.im.to_le_bytes()))
        .collect()
}

/// Loads a directory of complex pairs described by `pairs.json`. Each pair
/// references two files of interleaved `(re, im)` little-endian `f32`.
pub fn load_complex_pairs(dir: &Path) -> Result<(Grid, Vec<ComplexScenePair>)> {
    let manifest: PairManifest = raw::read_json(&dir.join(PAIRS_MANIFEST_NAME))?;
    let grid = Grid::new(manifest.height, manifest.width, manifest.resolution_m);
    let n = grid.len();
    let pairs = manifest
        .pairs
        .into_iter()
        .map(|e| {
            let pair = ComplexScenePair {
                height: grid.height,
                width: grid.width,
                date_a: e.date_a,
                date_b: e.date_b,
                pass: e.pass,
                relative_orbit: e.relative_orbit,
                scene_a: read_complex(&dir.join(&e.scene_a), n)?,
                scene_b: read_complex(&dir.join(&e.scene_b), n)?,
            };
            pair.validate()?;
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, pairs))
}

pub fn save_complex_pairs(dir: &Path, grid: Grid, pairs: &[ComplexScenePair]) -> Result<()> {
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate()?;
        let a = format!("pair{:04}_a.c64", i + 1);
        let b = format!("pair{:04}_b.c64", i + 1);
        raw::write_bytes(&dir.join(&a), &complex_to_le(&pair.scene_a))?;
        raw::write_bytes(&dir.join(&b), &complex_to_le(&pair.scene_b))?;
        entries.push(PairEntry {
            date_a: pair.date_a,
            date_b: pair.date_b,
            pass: pair.pass,
            relative_orbit: pair.relative_orbit,
            scene_a: a,
            scene_b: b,
        });
    }
    raw::write_json(
        &dir.join(PAIRS_MANIFEST_NAME),
        &PairManifest {
            version: 1,
            height: grid.height,
            width: grid.width,
            resolution_m: grid.resolution_m,
            pairs: entries,
        },
    )
}

/// Percentile of an ascending-sorted sample, interpolating linearly between
/// the closest ranks (`rank = q/100 * (n - 1)`).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    Some(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetrendConfig {
    pub percentile: f64,
    pub min_forest_pixels: usize,
}

impl Default for DetrendConfig {
    fn default() -> Self {
        Self {
            percentile: 90.0,
            min_forest_pixels: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetrendOutcome {
    pub cube: SceneCube,
    /// Shift subtracted from each kept scene.
    pub shifts: Vec<(SceneKey, f64)>,
    pub dropped: Vec<SceneKey>,
    pub warnings: Vec<String>,
}

/// Subtracts, scene by scene, the configured percentile of valid forest
/// pixels from every valid pixel. Scenes with too few valid forest pixels
/// are dropped.
pub fn detrend(cube: &SceneCube, forest: &ForestMask, config: &DetrendConfig) -> Result<DetrendOutcome> {
    forest.ensure_shape(cube.height, cube.width)?;
    let mut out = cube.header_only();
    let mut shifts = Vec::new();
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    let mut sample = Vec::new();
    for scene in &cube.scenes {
        sample.clear();
        sample.extend(
            (0..scene.values.len())
                .filter(|&i| forest.is_forest(i))
                .filter_map(|i| scene.valid_value(i))
                .map(f64::from),
        );
        if sample.len() < config.min_forest_pixels {
            warnings.push(format!(
                "{} scene {}: {} valid forest pixels < {}; dropped",
                cube.modality,
                scene.meta.key(),
                sample.len(),
                config.min_forest_pixels
            ));
            dropped.push(scene.meta.key());
            continue;
        }
        sample.sort_by(f64::total_cmp);
        let shift = percentile_sorted(&sample, config.percentile).unwrap_or(0.0);
        let values = scene
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if scene.is_valid(i) {
                    (f64::from(v) - shift) as f32
                } else {
                    v
                }
            })
            .collect();
        shifts.push((scene.meta.key(), shift));
        out.scenes.push(Scene::new(scene.meta.clone(), values, scene.mask.clone()));
    }
    Ok(DetrendOutcome {
        cube: out,
        shifts,
        dropped,
        warnings,
    })
}
