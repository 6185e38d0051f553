//! Per-pixel forest Gaussians fitted over the defining period, and the
//! non-forest Gaussians obtained by shifting their means.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{ForestMask, Modality, SceneCube};
use crate::error::{BuddError, Result};
use crate::grid::{paste_slice, Grid, Rect};
use crate::raw;

/// The three monitored signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Ndvi,
    Ratio,
    Coherence,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Ndvi, Channel::Ratio, Channel::Coherence];

    pub fn index(self) -> usize {
        self as usize
    }

    /// One-letter code used for modality subsets (`N`, `B`, `C`).
    pub fn letter(self) -> char {
        match self {
            Channel::Ndvi => 'N',
            Channel::Ratio => 'B',
            Channel::Coherence => 'C',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Ndvi => "ndvi",
            Channel::Ratio => "ratio",
            Channel::Coherence => "coherence",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Channel::Ndvi => Modality::Ndvi,
            Channel::Ratio => Modality::Ratio,
            Channel::Coherence => Modality::Coherence,
        }
    }

    pub fn from_modality(m: Modality) -> Option<Channel> {
        match m {
            Modality::Ndvi => Some(Channel::Ndvi),
            Modality::Ratio => Some(Channel::Ratio),
            Modality::Coherence => Some(Channel::Coherence),
            _ => None,
        }
    }

    pub fn from_letter(c: char) -> Option<Channel> {
        match c.to_ascii_uppercase() {
            'N' => Some(Channel::Ndvi),
            'B' => Some(Channel::Ratio),
            'C' => Some(Channel::Coherence),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty-or-empty set of channels, written as letters (`NBC`, `NB`, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ChannelSet(u8);

impl ChannelSet {
    pub const NBC: ChannelSet = ChannelSet(0b111);

    pub fn empty() -> Self {
        ChannelSet(0)
    }

    pub fn of(channels: &[Channel]) -> Self {
        channels.iter().fold(Self::empty(), |s, &c| s.with(c))
    }

    pub fn with(self, c: Channel) -> Self {
        ChannelSet(self.0 | (1 << c.index()))
    }

    pub fn contains(self, c: Channel) -> bool {
        self.0 & (1 << c.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Channel> {
        Channel::ALL.into_iter().filter(move |&c| self.contains(c))
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.iter() {
            write!(f, "{}", c.letter())?;
        }
        Ok(())
    }
}

impl FromStr for ChannelSet {
    type Err = BuddError;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = ChannelSet::empty();
        for ch in s.trim().chars() {
            let c = Channel::from_letter(ch)
                .ok_or_else(|| BuddError::invalid(format!("unknown modality letter `{ch}` in `{s}`")))?;
            set = set.with(c);
        }
        if set.is_empty() {
            return Err(BuddError::invalid("modality subset must not be empty"));
        }
        Ok(set)
    }
}

impl Serialize for ChannelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ChannelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fixed-size per-channel table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerChannel<T> {
    pub ndvi: T,
    pub ratio: T,
    pub coherence: T,
}

impl<T: Copy> PerChannel<T> {
    pub fn get(&self, c: Channel) -> T {
        match c {
            Channel::Ndvi => self.ndvi,
            Channel::Ratio => self.ratio,
            Channel::Coherence => self.coherence,
        }
    }

    pub fn uniform(v: T) -> Self {
        Self {
            ndvi: v,
            ratio: v,
            coherence: v,
        }
    }

    pub fn map<U>(self, f: impl Fn(Channel, T) -> U) -> PerChannel<U> {
        PerChannel {
            ndvi: f(Channel::Ndvi, self.ndvi),
            ratio: f(Channel::Ratio, self.ratio),
            coherence: f(Channel::Coherence, self.coherence),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodSplit {
    pub define_start: NaiveDate,
    pub define_end: NaiveDate,
    pub monitor_start: NaiveDate,
    pub monitor_end: NaiveDate,
}

impl Default for PeriodSplit {
    fn default() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        Self {
            define_start: d(2015, 1, 1),
            define_end: d(2017, 12, 31),
            monitor_start: d(2018, 1, 1),
            monitor_end: d(2019, 12, 31),
        }
    }
}

impl PeriodSplit {
    pub fn validate(&self) -> Result<()> {
        if self.define_start < self.define_end
            && self.define_end < self.monitor_start
            && self.monitor_start <= self.monitor_end
        {
            Ok(())
        } else {
            Err(BuddError::invalid(format!("period split out of order: {self:?}")))
        }
    }

    pub fn in_define(&self, d: NaiveDate) -> bool {
        d >= self.define_start && d <= self.define_end
    }

    pub fn in_monitor(&self, d: NaiveDate) -> bool {
        d >= self.monitor_start && d <= self.monitor_end
    }
}

/// Mean shifts, in forest standard deviations, and the variance floors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub shift: PerChannel<f64>,
    pub sigma_min: PerChannel<f64>,
    pub min_define_obs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            shift: PerChannel {
                ndvi: -6.0,
                ratio: -6.0,
                coherence: 7.0,
            },
            sigma_min: PerChannel {
                ndvi: 0.02,
                ratio: 0.05,
                coherence: 0.02,
            },
            min_define_obs: 5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        for c in Channel::ALL {
            if !(self.sigma_min.get(c) > 0.0) || !self.shift.get(c).is_finite() {
                return Err(BuddError::invalid(format!("fit config for {c}: {self:?}")));
            }
        }
        if self.min_define_obs == 0 {
            return Err(BuddError::invalid("min_define_obs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub mu_f: f64,
    pub sigma: f64,
    pub mu_nf: f64,
    pub n_obs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelFit {
    Modeled(ChannelModel),
    Unmodeled { n_obs: u32 },
}

impl ChannelFit {
    pub fn model(&self) -> Option<&ChannelModel> {
        match self {
            ChannelFit::Modeled(m) => Some(m),
            ChannelFit::Unmodeled { .. } => None,
        }
    }

    pub fn n_obs(&self) -> u32 {
        match self {
            ChannelFit::Modeled(m) => m.n_obs,
            ChannelFit::Unmodeled { n_obs } => *n_obs,
        }
    }
}

/// Median of a sample (mean of the two central values for even length).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

/// Population standard deviation, two-pass.
pub fn population_std(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((ss / n).sqrt())
}

/// Forest Gaussian for one pixel and channel from its defining-period
/// observations.
pub fn fit_pixel(values: &[f64], shift: f64, sigma_min: f64, min_obs: usize) -> ChannelFit {
    let n_obs = values.len().min(u32::MAX as usize) as u32;
    if values.len() < min_obs.max(1) {
        return ChannelFit::Unmodeled { n_obs };
    }
    let mu_f = median(values).expect("non-empty");
    let sigma = population_std(values).expect("non-empty").max(sigma_min);
    ChannelFit::Modeled(ChannelModel {
        mu_f,
        sigma,
        mu_nf: mu_f + shift * sigma,
        n_obs,
    })
}

/// Co-registered cubes for the monitored channels; any may be absent.
#[derive(Debug, Clone, Default)]
pub struct ChannelCubes {
    cubes: [Option<SceneCube>; 3],
}

impl ChannelCubes {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a cube, keyed by its modality. Rejects non-monitored modalities,
    /// repeats, and grids that differ from cubes already present.
    pub fn insert(&mut self, cube: SceneCube) -> Result<()> {
        let channel = Channel::from_modality(cube.modality).ok_or_else(|| {
            BuddError::invalid(format!("{} is not a monitored modality", cube.modality))
        })?;
        if let Some(grid) = self.grid() {
            grid.ensure_matches(&cube.grid(), &format!("{channel} cube"))?;
        }
        if self.cubes[channel.index()].is_some() {
            return Err(BuddError::invalid(format!("{channel} cube supplied twice")));
        }
        self.cubes[channel.index()] = Some(cube);
        Ok(())
    }

    pub fn from_cubes(cubes: impl IntoIterator<Item = SceneCube>) -> Result<Self> {
        let mut out = Self::new();
        for c in cubes {
            out.insert(c)?;
        }
        Ok(out)
    }

    pub fn get(&self, c: Channel) -> Option<&SceneCube> {
        self.cubes[c.index()].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Channel, &SceneCube)> {
        Channel::ALL
            .into_iter()
            .filter_map(move |c| self.get(c).map(|cube| (c, cube)))
    }

    pub fn grid(&self) -> Option<Grid> {
        self.cubes.iter().flatten().next().map(|c| c.grid())
    }

    pub fn channels(&self) -> ChannelSet {
        ChannelSet::of(&self.iter().map(|(c, _)| c).collect::<Vec<_>>())
    }

    /// Applies `f` to every present cube.
    pub fn try_map(&self, mut f: impl FnMut(Channel, &SceneCube) -> Result<SceneCube>) -> Result<Self> {
        let mut out = Self::new();
        for (c, cube) in self.iter() {
            let mapped = f(c, cube)?;
            out.cubes[c.index()] = Some(mapped);
        }
        Ok(out)
    }

    pub fn between(&self, start: NaiveDate, end: NaiveDate) -> Self {
        self.try_map(|_, cube| Ok(cube.between(start, end)))
            .expect("date filtering cannot fail")
    }

    pub fn crop(&self, rect: Rect) -> Result<Self> {
        self.try_map(|_, cube| cube.crop(rect))
    }
}

/// Forest models of one channel over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    pub fits: Vec<ChannelFit>,
}

/// What the detector needs for one pixel: the modeled channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelForestModel {
    pub entries: [Option<ChannelModel>; 3],
}

impl PixelForestModel {
    pub fn get(&self, c: Channel) -> Option<&ChannelModel> {
        self.entries[c.index()].as_ref()
    }

    pub fn modeled_in(&self, subset: ChannelSet) -> bool {
        subset.iter().any(|c| self.get(c).is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrid {
    pub height: usize,
    pub width: usize,
    pub channels: [Option<ChannelGrid>; 3],
}

impl ModelGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: [None, None, None],
        }
    }

    pub fn channel(&self, c: Channel) -> Option<&ChannelGrid> {
        self.channels[c.index()].as_ref()
    }

    pub fn pixel(&self, idx: usize) -> PixelForestModel {
        let mut entries = [None; 3];
        for c in Channel::ALL {
            if let Some(g) = self.channel(c) {
                entries[c.index()] = g.fits[idx].model().copied();
            }
        }
        PixelForestModel { entries }
    }

    /// Pixels with no modeled channel in `subset`.
    pub fn unmodeled_count(&self, subset: ChannelSet) -> usize {
        (0..self.height * self.width)
            .filter(|&i| !self.pixel(i).modeled_in(subset))
            .count()
    }

    /// Turns every pixel that the forest mask does not mark as forest into an
    /// unmodeled pixel.
    pub fn restrict_to_forest(&mut self, forest: &ForestMask) -> Result<()> {
        forest.ensure_shape(self.height, self.width)?;
        for grid in self.channels.iter_mut().flatten() {
            for (i, fit) in grid.fits.iter_mut().enumerate() {
                if !forest.is_forest(i) {
                    *fit = ChannelFit::Unmodeled { n_obs: fit.n_obs() };
                }
            }
        }
        Ok(())
    }

    pub fn crop(&self, rect: Rect) -> ModelGrid {
        let mut out = ModelGrid::empty(rect.height, rect.width);
        for c in Channel::ALL {
            if let Some(g) = self.channel(c) {
                out.channels[c.index()] = Some(ChannelGrid {
                    fits: crate::grid::crop_slice(&g.fits, self.width, rect),
                });
            }
        }
        out
    }

    /// Copies a tile's models into this grid at `rect`.
    pub fn paste(&mut self, rect: Rect, tile: &ModelGrid) {
        let n = self.height * self.width;
        for c in Channel::ALL {
            if let Some(src) = tile.channel(c) {
                let dst = self.channels[c.index()].get_or_insert_with(|| ChannelGrid {
                    fits: vec![ChannelFit::Unmodeled { n_obs: 0 }; n],
                });
                paste_slice(&mut dst.fits, self.width, rect, &src.fits);
            }
        }
    }
}

fn pixel_series(cube: &SceneCube, idx: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(cube.scenes.iter().filter_map(|s| s.valid_value(idx)).map(f64::from));
}

/// Fits every pixel of every present channel using scenes inside the
/// defining period.
pub fn fit_tile(cubes: &ChannelCubes, split: &PeriodSplit, config: &FitConfig) -> Result<ModelGrid> {
    split.validate()?;
    config.validate()?;
    let Some(grid) = cubes.grid() else {
        return Ok(ModelGrid::empty(0, 0));
    };
    let mut out = ModelGrid::empty(grid.height, grid.width);
    for (c, cube) in cubes.iter() {
        let define = cube.between(split.define_start, split.define_end);
        let (shift, floor) = (config.shift.get(c), config.sigma_min.get(c));
        let fits = (0..grid.len())
            .into_par_iter()
            .map_init(Vec::new, |buf, idx| {
                pixel_series(&define, idx, buf);
                fit_pixel(buf, shift, floor, config.min_define_obs)
            })
            .collect();
        out.channels[c.index()] = Some(ChannelGrid { fits });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub mean: f64,
    pub std: f64,
    pub min: u32,
    pub max: u32,
}

/// Statistics of per-pixel valid-observation counts, per channel. The caller
/// selects the period by restricting the cubes.
pub fn summarize_define_period(cubes: &ChannelCubes) -> Vec<(Channel, CountSummary)> {
    cubes
        .iter()
        .map(|(c, cube)| {
            let counts = cube.valid_counts();
            let as_f: Vec<f64> = counts.iter().map(|&v| f64::from(v)).collect();
            let summary = CountSummary {
                mean: if as_f.is_empty() {
                    0.0
                } else {
                    as_f.iter().sum::<f64>() / as_f.len() as f64
                },
                std: population_std(&as_f).unwrap_or(0.0),
                min: counts.iter().copied().min().unwrap_or(0),
                max: counts.iter().copied().max().unwrap_or(0),
            };
            (c, summary)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    height: usize,
    width: usize,
    channels: Vec<Channel>,
    encoding: String,
}

const MODEL_HEADER: &str = "models.json";

/// Writes `mu_f`, `sigma`, `mu_nf` (f32, NaN where unmodeled) and the
/// observation count (u16, saturating) per channel, plus `models.json`.
pub fn save_models(models: &ModelGrid, dir: &Path) -> Result<()> {
    let mut channels = Vec::new();
    for c in Channel::ALL {
        let Some(g) = models.channel(c) else { continue };
        channels.push(c);
        let field = |f: fn(&ChannelModel) -> f64| -> Vec<f32> {
            g.fits
                .iter()
                .map(|fit| fit.model().map_or(f32::NAN, |m| f(m) as f32))
                .collect()
        };
        raw::write_bytes(&dir.join(format!("{c}_mu_f.f32")), &raw::f32_to_le(&field(|m| m.mu_f)))?;
        raw::write_bytes(&dir.join(format!("{c}_sigma.f32")), &raw::f32_to_le(&field(|m| m.sigma)))?;
        raw::write_bytes(&dir.join(format!("{c}_mu_nf.f32")), &raw::f32_to_le(&field(|m| m.mu_nf)))?;
        let counts: Vec<u16> = g.fits.iter().map(|f| f.n_obs().min(u16::MAX as u32) as u16).collect();
        raw::write_bytes(&dir.join(format!("{c}_count.u16")), &raw::u16_to_le(&counts))?;
    }
    raw::write_json(
        &dir.join(MODEL_HEADER),
        &ModelHeader {
            version: 1,
            height: models.height,
            width: models.width,
            channels,
            encoding: "f32le mu_f/sigma/mu_nf (NaN = unmodeled), u16le count".into(),
        },
    )
}

pub fn load_models(dir: &Path) -> Result<ModelGrid> {
    let header: ModelHeader = raw::read_json(&dir.join(MODEL_HEADER))?;
    let n = header.height * header.width;
    let mut out = ModelGrid::empty(header.height, header.width);
    for c in header.channels {
        let read_f32 = |name: &str| -> Result<Vec<f32>> {
            let p = dir.join(format!("{c}_{name}.f32"));
            Ok(raw::le_to_f32(&raw::read_exact_len(&p, n * 4, "model raster")?))
        };
        let mu_f = read_f32("mu_f")?;
        let sigma = read_f32("sigma")?;
        let mu_nf = read_f32("mu_nf")?;
        let counts = raw::le_to_u16(&raw::read_exact_len(
            &dir.join(format!("{c}_count.u16")),
            n * 2,
            "model counts",
        )?);
        let fits = (0..n)
            .map(|i| {
                let n_obs = u32::from(counts[i]);
                if sigma[i].is_finite() && sigma[i] > 0.0 && mu_f[i].is_finite() && mu_nf[i].is_finite() {
                    ChannelFit::Modeled(ChannelModel {
                        mu_f: f64::from(mu_f[i]),
                        sigma: f64::from(sigma[i]),
                        mu_nf: f64::from(mu_nf[i]),
                        n_obs,
                    })
                } else {
                    ChannelFit::Unmodeled { n_obs }
                }
            })
            .collect();
        out.channels[c.index()] = Some(ChannelGrid { fits });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::{Scene, SceneMeta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_series_hits_floor() {
        let fit = fit_pixel(&[0.8, 0.8, 0.8], -6.0, 0.01, 3);
        let m = fit.model().unwrap();
        assert_eq!(m.mu_f, 0.8);
        assert_eq!(m.sigma, 0.01);
        assert!((m.mu_nf - 0.74).abs() < 1e-12);
        assert_eq!(m.n_obs, 3);
    }

    #[test]
    fn median_ignores_outlier() {
        let m = *fit_pixel(&[1.0, 2.0, 3.0, 4.0, 100.0], -6.0, 0.01, 5).model().unwrap();
        assert_eq!(m.mu_f, 3.0);
    }

    #[test]
    fn too_few_observations_unmodeled() {
        assert_eq!(
            fit_pixel(&[0.5, 0.6], -6.0, 0.01, 5),
            ChannelFit::Unmodeled { n_obs: 2 }
        );
    }

    #[test]
    fn gaussian_sample_matches_sort_and_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dist = Normal::new(0.7, 0.05).unwrap();
        let values: Vec<f64> = (0..50).map(|_| dist.sample(&mut rng)).collect();

        // oracle: full sort median, textbook two-pass population std
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = (sorted[24] + sorted[25]) / 2.0;
        let mean: f64 = values.iter().sum::<f64>() / 50.0;
        let var: f64 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        let sd = var.sqrt();

        let m = *fit_pixel(&values, -6.0, 0.02, 5).model().unwrap();
        assert_eq!(m.mu_f, med);
        assert!((m.sigma - sd).abs() < 1e-15);
        assert!((m.mu_nf - (med - 6.0 * sd)).abs() < 1e-12);
        assert!((m.mu_f - 0.7).abs() < 0.03);
    }

    #[test]
    fn default_shift_distances_are_exact() {
        let cfg = FitConfig::default();
        for c in Channel::ALL {
            let m = *fit_pixel(&[0.1, 0.4, 0.2, 0.9, 0.3], cfg.shift.get(c), cfg.sigma_min.get(c), 5)
                .model()
                .unwrap();
            let k = cfg.shift.get(c).abs();
            assert!(((m.mu_nf - m.mu_f).abs() - k * m.sigma).abs() < 1e-12);
        }
        assert!(cfg.shift.ndvi < 0.0 && cfg.shift.ratio < 0.0 && cfg.shift.coherence > 0.0);
    }

    #[test]
    fn channel_set_parsing() {
        assert_eq!("NBC".parse::<ChannelSet>().unwrap(), ChannelSet::NBC);
        let bc: ChannelSet = "bc".parse().unwrap();
        assert!(!bc.contains(Channel::Ndvi) && bc.contains(Channel::Coherence));
        assert_eq!(bc.to_string(), "BC");
        assert!("".parse::<ChannelSet>().is_err());
        assert!("NX".parse::<ChannelSet>().is_err());
    }

    #[test]
    fn period_split_validation() {
        assert!(PeriodSplit::default().validate().is_ok());
        let mut bad = PeriodSplit::default();
        bad.monitor_start = bad.define_end;
        assert!(bad.validate().is_err());
    }

    fn cube_with_masks(h: usize, w: usize, masks: &[Vec<u8>]) -> SceneCube {
        let mut cube = SceneCube::new(Modality::Ndvi, Grid::new(h, w, 20.0));
        for (k, m) in masks.iter().enumerate() {
            let mut meta = SceneMeta::new(NaiveDate::from_ymd_opt(2016, 1, 1).unwrap());
            meta.date += chrono::Duration::days(k as i64 * 10);
            cube.push(Scene::new(meta, vec![0.8; h * w], Some(m.clone()))).unwrap();
        }
        cube
    }

    #[test]
    fn fully_masked_pixel_unmodeled() {
        let masks: Vec<Vec<u8>> = (0..6).map(|_| vec![0, 1]).collect();
        let cubes = ChannelCubes::from_cubes([cube_with_masks(1, 2, &masks)]).unwrap();
        let models = fit_tile(&cubes, &PeriodSplit::default(), &FitConfig::default()).unwrap();
        assert!(models.pixel(0).get(Channel::Ndvi).is_none());
        assert!(models.pixel(1).get(Channel::Ndvi).is_some());
        assert!(models.channel(Channel::Ratio).is_none());
        assert_eq!(models.unmodeled_count(ChannelSet::NBC), 1);
    }

    #[test]
    fn summary_counts() {
        let all = vec![vec![1u8; 4]; 3];
        let cubes = ChannelCubes::from_cubes([cube_with_masks(2, 2, &all)]).unwrap();
        let s = summarize_define_period(&cubes)[0].1;
        assert_eq!((s.mean, s.std, s.min, s.max), (3.0, 0.0, 3, 3));

        let half = vec![vec![1u8; 4], vec![1, 1, 0, 0], vec![1u8; 4]];
        let cubes = ChannelCubes::from_cubes([cube_with_masks(2, 2, &half)]).unwrap();
        let s = summarize_define_period(&cubes)[0].1;
        assert_eq!(s.mean, 2.5);
        assert_eq!((s.min, s.max), (2, 3));
    }

    #[test]
    fn models_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut models = ModelGrid::empty(1, 2);
        models.channels[1] = Some(ChannelGrid {
            fits: vec![
                ChannelFit::Modeled(ChannelModel {
                    mu_f: 6.0,
                    sigma: 0.5,
                    mu_nf: 3.0,
                    n_obs: 70_000,
                }),
                ChannelFit::Unmodeled { n_obs: 3 },
            ],
        });
        save_models(&models, dir.path()).unwrap();
        let back = load_models(dir.path()).unwrap();
        let fits = &back.channel(Channel::Ratio).unwrap().fits;
        assert_eq!(fits[0].model().unwrap().mu_nf, 3.0);
        assert_eq!(fits[0].n_obs(), u16::MAX as u32);
        assert_eq!(fits[1], ChannelFit::Unmodeled { n_obs: 3 });
        assert!(back.channel(Channel::Ndvi).is_none());
    }

    #[test]
    fn restrict_to_forest_unmodels_nonforest() {
        let masks = vec![vec![1u8; 2]; 6];
        let cubes = ChannelCubes::from_cubes([cube_with_masks(1, 2, &masks)]).unwrap();
        let mut models = fit_tile(&cubes, &PeriodSplit::default(), &FitConfig::default()).unwrap();
        let mut forest = ForestMask::filled(1, 2, crate::cube::ForestClass::Forest);
        forest.cells[1] = crate::cube::ForestClass::Unknown;
        models.restrict_to_forest(&forest).unwrap();
        assert!(models.pixel(0).get(Channel::Ndvi).is_some());
        assert!(models.pixel(1).get(Channel::Ndvi).is_none());
        assert_eq!(models.channel(Channel::Ndvi).unwrap().fits[1].n_obs(), 6);
    }
}
