//! Scene stacks on disk and in memory.
//!
//! A cube directory holds `manifest.json` plus one headerless little-endian
//! `f32` raster per scene and optional one-byte validity masks
//! (0 = invalid, 1 = valid). Scenes are kept sorted by
//! `(date, pass, relative_orbit)`; a repeated key is an error.

use std::cmp::Ordering;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{BuddError, Result};
use crate::grid::{crop_slice, Grid, Rect};
use crate::raw;

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ndvi,
    Ratio,
    Coherence,
    Red,
    Nir,
    Vv,
    Vh,
    SlcPair,
}

impl Modality {
    /// Optical modalities are the ones subject to cloud screening.
    pub fn is_optical(self) -> bool {
        matches!(self, Modality::Ndvi | Modality::Red | Modality::Nir)
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ndvi => "ndvi",
            Modality::Ratio => "ratio",
            Modality::Coherence => "coherence",
            Modality::Red => "red",
            Modality::Nir => "nir",
            Modality::Vv => "vv",
            Modality::Vh => "vh",
            Modality::SlcPair => "slc_pair",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub date: NaiveDate,
    pub pass: Option<Pass>,
    pub relative_orbit: Option<u32>,
    pub cloud_fraction: Option<f64>,
    #[serde(rename = "data")]
    pub data_path: String,
    #[serde(rename = "mask")]
    pub mask_path: Option<String>,
}

/// Sort key of a scene within its cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SceneKey {
    pub date: NaiveDate,
    pub pass: Option<Pass>,
    pub relative_orbit: Option<u32>,
}

impl fmt::Display for SceneKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.date)?;
        if let Some(p) = self.pass {
            write!(f, " {p:?}")?;
        }
        if let Some(o) = self.relative_orbit {
            write!(f, " orbit {o}")?;
        }
        Ok(())
    }
}

impl SceneMeta {
    pub fn new(date: NaiveDate) -> Self {
        Self {
            date,
            pass: None,
            relative_orbit: None,
            cloud_fraction: None,
            data_path: String::new(),
            mask_path: None,
        }
    }

    pub fn key(&self) -> SceneKey {
        SceneKey {
            date: self.date,
            pass: self.pass,
            relative_orbit: self.relative_orbit,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(cf) = self.cloud_fraction {
            if !(0.0..=1.0).contains(&cf) {
                return Err(BuddError::invalid(format!(
                    "scene {}: cloud_fraction {cf} outside [0, 1]",
                    self.key()
                )));
            }
        }
        Ok(())
    }
}

/// One acquisition: row-major values plus an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    pub values: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Scene {
    pub fn new(meta: SceneMeta, values: Vec<f32>, mask: Option<Vec<u8>>) -> Self {
        Self { meta, values, mask }
    }

    /// A pixel counts as an observation when its mask bit is set and its
    /// value is finite.
    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[idx] != 0) && self.values[idx].is_finite()
    }

    /// Value at `idx` if the pixel is valid.
    #[inline]
    pub fn valid_value(&self, idx: usize) -> Option<f32> {
        self.is_valid(idx).then(|| self.values[idx])
    }

    pub fn valid_count(&self) -> usize {
        (0..self.values.len()).filter(|&i| self.is_valid(i)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneCube {
    pub modality: Modality,
    pub height: usize,
    pub width: usize,
    pub resolution_m: f64,
    pub scenes: Vec<Scene>,
}

impl SceneCube {
    pub fn new(modality: Modality, grid: Grid) -> Self {
        Self {
            modality,
            height: grid.height,
            width: grid.width,
            resolution_m: grid.resolution_m,
            scenes: Vec::new(),
        }
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.height, self.width, self.resolution_m)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.scenes.iter().map(|s| s.meta.date)
    }

    /// Appends a scene after checking its shape. Call [`SceneCube::normalize`]
    /// once all scenes are in.
    pub fn push(&mut self, scene: Scene) -> Result<()> {
        self.check_scene(&scene)?;
        self.scenes.push(scene);
        Ok(())
    }

    fn check_scene(&self, scene: &Scene) -> Result<()> {
        let n = self.pixel_count();
        if scene.values.len() != n {
            return Err(BuddError::ShapeMismatch {
                what: format!("{} scene {} values", self.modality, scene.meta.key()),
                expected: n,
                found: scene.values.len(),
            });
        }
        if let Some(mask) = &scene.mask {
            if mask.len() != n {
                return Err(BuddError::ShapeMismatch {
                    what: format!("{} scene {} mask", self.modality, scene.meta.key()),
                    expected: n,
                    found: mask.len(),
                });
            }
        }
        scene.meta.validate()
    }

    /// Sorts scenes by key and rejects repeated keys.
    pub fn normalize(&mut self) -> Result<()> {
        self.scenes.sort_by_key(|a| a.meta.key());
        if let Some(w) = self
            .scenes
            .windows(2)
            .find(|w| w[0].meta.key() == w[1].meta.key())
        {
            return Err(BuddError::DuplicateScene(format!(
                "{} {}",
                self.modality,
                w[0].meta.key()
            )));
        }
        Ok(())
    }

    /// Checks shapes, masks and the strict ordering invariant.
    pub fn validate(&self) -> Result<()> {
        for scene in &self.scenes {
            self.check_scene(scene)?;
        }
        for w in self.scenes.windows(2) {
            match w[0].meta.key().cmp(&w[1].meta.key()) {
                Ordering::Less => {}
                Ordering::Equal => {
                    return Err(BuddError::DuplicateScene(format!(
                        "{} {}",
                        self.modality,
                        w[0].meta.key()
                    )))
                }
                Ordering::Greater => {
                    return Err(BuddError::invalid(format!(
                        "{} scenes out of order at {}",
                        self.modality,
                        w[1].meta.key()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Keeps scenes whose metadata satisfies `keep`, preserving order.
    pub fn retain_scenes(&self, mut keep: impl FnMut(&SceneMeta) -> bool) -> SceneCube {
        SceneCube {
            scenes: self.scenes.iter().filter(|s| keep(&s.meta)).cloned().collect(),
            ..self.header_only()
        }
    }

    /// Scenes dated within `[start, end]`.
    pub fn between(&self, start: NaiveDate, end: NaiveDate) -> SceneCube {
        self.retain_scenes(|m| m.date >= start && m.date <= end)
    }

    /// Same modality and grid, no scenes.
    pub fn header_only(&self) -> SceneCube {
        SceneCube {
            modality: self.modality,
            height: self.height,
            width: self.width,
            resolution_m: self.resolution_m,
            scenes: Vec::new(),
        }
    }

    pub fn crop(&self, rect: Rect) -> Result<SceneCube> {
        if !rect.fits_in(self.height, self.width) {
            return Err(BuddError::invalid(format!(
                "window {rect:?} exceeds {}x{} raster",
                self.height, self.width
            )));
        }
        let scenes = self
            .scenes
            .iter()
            .map(|s| Scene {
                meta: s.meta.clone(),
                values: crop_slice(&s.values, self.width, rect),
                mask: s.mask.as_ref().map(|m| crop_slice(m, self.width, rect)),
            })
            .collect();
        Ok(SceneCube {
            modality: self.modality,
            height: rect.height,
            width: rect.width,
            resolution_m: self.resolution_m,
            scenes,
        })
    }

    /// Per-pixel number of valid observations across all scenes.
    pub fn valid_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.pixel_count()];
        for scene in &self.scenes {
            for (i, c) in counts.iter_mut().enumerate() {
                if scene.is_valid(i) {
                    *c += 1;
                }
            }
        }
        counts
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    modality: Modality,
    height: usize,
    width: usize,
    resolution_m: f64,
    scenes: Vec<SceneMeta>,
}

/// Reads a cube from its `manifest.json`.
pub fn load_cube(manifest_path: &Path) -> Result<SceneCube> {
    let manifest: Manifest = raw::read_json(manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(BuddError::invalid(format!(
            "{}: unsupported manifest version {}",
            manifest_path.display(),
            manifest.version
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let n = manifest.height * manifest.width;
    let grid = Grid::new(manifest.height, manifest.width, manifest.resolution_m);
    let mut cube = SceneCube::new(manifest.modality, grid);
    for meta in manifest.scenes {
        meta.validate()?;
        let data = raw::read_exact_len(&dir.join(&meta.data_path), n * 4, "scene data")?;
        let mask = match &meta.mask_path {
            Some(p) => {
                let path = dir.join(p);
                let bytes = raw::read_exact_len(&path, n, "scene mask")?;
                if let Some(bad) = bytes.iter().find(|&&b| b > 1) {
                    return Err(BuddError::invalid(format!(
                        "{}: mask byte {bad} is neither 0 nor 1",
                        path.display()
                    )));
                }
                Some(bytes)
            }
            None => None,
        };
        cube.push(Scene::new(meta, raw::le_to_f32(&data), mask))?;
    }
    cube.normalize()?;
    Ok(cube)
}

/// Accepts either a cube directory or a manifest path.
pub fn load_cube_dir(path: &Path) -> Result<SceneCube> {
    if path.is_dir() {
        load_cube(&path.join(MANIFEST_NAME))
    } else {
        load_cube(path)
    }
}

/// Writes `cube` under `dir` and returns the manifest path.
pub fn save_cube(cube: &SceneCube, dir: &Path) -> Result<PathBuf> {
    cube.validate()?;
    let mut scenes = Vec::with_capacity(cube.scenes.len());
    for (i, scene) in cube.scenes.iter().enumerate() {
        let mut meta = scene.meta.clone();
        meta.data_path = format!("scenes/{:04}.f32", i + 1);
        raw::write_bytes(&dir.join(&meta.data_path), &raw::f32_to_le(&scene.values))?;
        meta.mask_path = match &scene.mask {
            Some(mask) => {
                let p = format!("masks/{:04}.u8", i + 1);
                raw::write_bytes(&dir.join(&p), mask)?;
                Some(p)
            }
            None => None,
        };
        scenes.push(meta);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        modality: cube.modality,
        height: cube.height,
        width: cube.width,
        resolution_m: cube.resolution_m,
        scenes,
    };
    let path = dir.join(MANIFEST_NAME);
    raw::write_json(&path, &manifest)?;
    Ok(path)
}

/// Result of cloud screening.
#[derive(Debug, Clone)]
pub struct CloudFilterOutcome {
    pub cube: SceneCube,
    pub dropped: Vec<SceneKey>,
    pub warnings: Vec<String>,
}

/// Drops scenes whose cloud fraction is strictly greater than `max_fraction`.
///
/// Scenes without a cloud fraction are kept; for optical modalities each one
/// also produces a warning.
pub fn filter_by_cloud(cube: &SceneCube, max_fraction: f64) -> CloudFilterOutcome {
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    let kept = cube.retain_scenes(|meta| match meta.cloud_fraction {
        Some(cf) if cf > max_fraction => {
            dropped.push(meta.key());
            false
        }
        Some(_) => true,
        None => {
            if cube.modality.is_optical() {
                warnings.push(format!(
                    "{} scene {} has no cloud fraction; kept",
                    cube.modality,
                    meta.key()
                ));
            }
            true
        }
    });
    CloudFilterOutcome {
        cube: kept,
        dropped,
        warnings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum ForestClass {
    NonForest = 0,
    Forest = 1,
    Unknown = 2,
}

impl ForestClass {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ForestClass::NonForest),
            1 => Some(ForestClass::Forest),
            2 => Some(ForestClass::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<ForestClass>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ForestMaskHeader {
    height: usize,
    width: usize,
}

impl ForestMask {
    pub fn filled(height: usize, width: usize, class: ForestClass) -> Self {
        Self {
            height,
            width,
            cells: vec![class; height * width],
        }
    }

    pub fn is_forest(&self, idx: usize) -> bool {
        self.cells[idx] == ForestClass::Forest
    }

    pub fn forest_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == ForestClass::Forest).count()
    }

    pub fn ensure_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(BuddError::GridMismatch(format!(
                "forest mask {}x{} vs raster {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn crop(&self, rect: Rect) -> ForestMask {
        ForestMask {
            height: rect.height,
            width: rect.width,
            cells: crop_slice(&self.cells, self.width, rect),
        }
    }

    pub fn load(path: &Path) -> Result<ForestMask> {
        let header: ForestMaskHeader = raw::read_json(&raw::sidecar_path(path))?;
        let bytes = raw::read_exact_len(path, header.height * header.width, "forest mask")?;
        let cells = bytes
            .iter()
            .map(|&b| {
                ForestClass::from_byte(b).ok_or_else(|| {
                    BuddError::invalid(format!("{}: forest class byte {b}", path.display()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForestMask {
            height: header.height,
            width: header.width,
            cells,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.cells.iter().map(|&c| c as u8).collect();
        raw::write_bytes(path, &bytes)?;
        raw::write_json(
            &raw::sidecar_path(path),
            &ForestMaskHeader {
                height: self.height,
                width: self.width,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn small_cube(modality: Modality, dates: &[&str]) -> SceneCube {
        let mut cube = SceneCube::new(modality, Grid::new(4, 4, 20.0));
        for (k, d) in dates.iter().enumerate() {
            let values = (0..16).map(|i| (k * 16 + i) as f32 * 0.25).collect();
            cube.push(Scene::new(SceneMeta::new(date(d)), values, None)).unwrap();
        }
        cube.normalize().unwrap();
        cube
    }

    #[test]
    fn load_three_scenes_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(Modality::Ratio, &["2018-03-01", "2018-01-01", "2018-02-01"]);
        let manifest = save_cube(&cube, dir.path()).unwrap();
        let loaded = load_cube(&manifest).unwrap();
        assert_eq!(loaded.len(), 3);
        let dates: Vec<_> = loaded.dates().collect();
        assert_eq!(dates, vec![date("2018-01-01"), date("2018-02-01"), date("2018-03-01")]);
        assert_eq!(loaded.scenes[0].values, cube.scenes[0].values);
    }

    #[test]
    fn short_scene_file_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(Modality::Ratio, &["2018-01-01"]);
        let manifest = save_cube(&cube, dir.path()).unwrap();
        let data = dir.path().join("scenes/0001.f32");
        let mut bytes = std::fs::read(&data).unwrap();
        bytes.truncate(63);
        std::fs::write(&data, bytes).unwrap();
        match load_cube(&manifest) {
            Err(BuddError::ShapeMismatch { expected, found, .. }) => {
                assert_eq!((expected, found), (64, 63));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_scene_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(Modality::Ratio, &["2018-01-01"]);
        let manifest = save_cube(&cube, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("scenes/0001.f32")).unwrap();
        assert!(matches!(load_cube(&manifest), Err(BuddError::Io { .. })));
    }

    #[test]
    fn duplicate_key_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(Modality::Ratio, &["2018-01-01", "2018-01-02"]);
        let manifest = save_cube(&cube, dir.path()).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("2018-01-02", "2018-01-01")).unwrap();
        assert!(matches!(load_cube(&manifest), Err(BuddError::DuplicateScene(_))));
    }

    #[test]
    fn same_date_different_orbits_are_distinct() {
        let mut cube = SceneCube::new(Modality::Vv, Grid::new(1, 1, 20.0));
        for orbit in [2, 1] {
            let mut meta = SceneMeta::new(date("2018-01-01"));
            meta.pass = Some(Pass::Ascending);
            meta.relative_orbit = Some(orbit);
            cube.push(Scene::new(meta, vec![orbit as f32], None)).unwrap();
        }
        cube.normalize().unwrap();
        assert_eq!(cube.scenes[0].meta.relative_orbit, Some(1));
    }

    #[test]
    fn empty_cube_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cube = SceneCube::new(Modality::Coherence, Grid::new(3, 5, 20.0));
        let manifest = save_cube(&cube, dir.path()).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(text.contains("\"scenes\": []"));
        assert_eq!(load_cube(&manifest).unwrap(), cube);
    }

    #[test]
    fn one_scene_writes_one_file_of_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let cube = small_cube(Modality::Ndvi, &["2018-01-01"]);
        save_cube(&cube, dir.path()).unwrap();
        let files: Vec<_> = std::fs::read_dir(dir.path().join("scenes")).unwrap().collect();
        assert_eq!(files.len(), 1);
        let len = std::fs::metadata(dir.path().join("scenes/0001.f32")).unwrap().len();
        assert_eq!(len, 4 * 4 * 4);
    }

    #[test]
    fn manifest_uses_documented_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut cube = small_cube(Modality::Ndvi, &["2018-01-01"]);
        cube.scenes[0].mask = Some(vec![1; 16]);
        cube.scenes[0].meta.cloud_fraction = Some(0.1);
        let manifest = save_cube(&cube, dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["modality"], "ndvi");
        let s = &v["scenes"][0];
        assert_eq!(s["date"], "2018-01-01");
        assert_eq!(s["pass"], serde_json::Value::Null);
        assert_eq!(s["data"], "scenes/0001.f32");
        assert_eq!(s["mask"], "masks/0001.u8");
        assert_eq!(s["cloud_fraction"], 0.1);
    }

    #[test]
    fn cloud_fraction_out_of_range_rejected() {
        let mut cube = SceneCube::new(Modality::Ndvi, Grid::new(1, 1, 20.0));
        let mut meta = SceneMeta::new(date("2018-01-01"));
        meta.cloud_fraction = Some(1.5);
        assert!(cube.push(Scene::new(meta, vec![0.0], None)).is_err());
    }

    #[test]
    fn cloud_filter_strict_threshold() {
        let mut cube = small_cube(Modality::Ndvi, &["2018-01-01", "2018-01-02", "2018-01-03"]);
        for (s, cf) in cube.scenes.iter_mut().zip([0.10, 0.16, 0.15]) {
            s.meta.cloud_fraction = Some(cf);
        }
        let out = filter_by_cloud(&cube, 0.15);
        let kept: Vec<_> = out.cube.dates().collect();
        assert_eq!(kept, vec![date("2018-01-01"), date("2018-01-03")]);
        assert_eq!(out.dropped.len(), 1);
        assert!(out.warnings.is_empty());

        assert_eq!(filter_by_cloud(&cube, 1.0).cube, cube);
    }

    #[test]
    fn cloud_filter_warns_on_missing_optical_fraction() {
        let cube = small_cube(Modality::Ndvi, &["2018-01-01", "2018-01-02"]);
        let out = filter_by_cloud(&cube, 0.15);
        assert_eq!(out.cube.len(), 2);
        assert_eq!(out.warnings.len(), 2);

        let sar = small_cube(Modality::Ratio, &["2018-01-01"]);
        assert!(filter_by_cloud(&sar, 0.15).warnings.is_empty());
    }

    #[test]
    fn valid_counts_follow_mask_and_finiteness() {
        let mut cube = small_cube(Modality::Ndvi, &["2018-01-01", "2018-01-02"]);
        let mut mask = vec![1u8; 16];
        mask[..8].fill(0);
        cube.scenes[0].mask = Some(mask);
        cube.scenes[1].values[15] = f32::NAN;
        let counts = cube.valid_counts();
        assert_eq!(counts[0], 1);
        assert_eq!(counts[8], 2);
        assert_eq!(counts[15], 1);
    }

    #[test]
    fn forest_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.u8");
        let mut mask = ForestMask::filled(2, 3, ForestClass::Forest);
        mask.cells[1] = ForestClass::NonForest;
        mask.cells[5] = ForestClass::Unknown;
        mask.save(&path).unwrap();
        assert!(raw::sidecar_path(&path).exists());
        assert_eq!(ForestMask::load(&path).unwrap(), mask);
        assert_eq!(std::fs::read(&path).unwrap(), vec![1, 0, 1, 1, 1, 2]);
    }
}
