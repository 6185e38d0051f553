//! Synthetic NDVI / ratio / coherence cubes with scripted clearing events,
//! used as ground truth for end-to-end checks.

use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{save_cube, ForestClass, ForestMask, Pass, Scene, SceneCube, SceneMeta};
use crate::detector::{days_since_epoch, DetectionMap, NO_DETECTION, UNMODELED};
use crate::error::{BuddError, Result};
use crate::forest::{Channel, ChannelCubes, PerChannel, PeriodSplit};
use crate::grid::{Grid, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianParams {
    pub const fn new(mu: f64, sigma: f64) -> Self {
        Self { mu, sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub region: Rect,
    pub change_date: NaiveDate,
    pub affected: Vec<Channel>,
}

/// Optical cloud cover. Each scene is cloudy with probability
/// `loss_probability`; cloudy scenes mask a uniform fraction of pixels in
/// `[cloudy_min_fraction, 1]`, clear ones a fraction in `[0, clear_max_fraction]`.
/// The realized masked fraction is recorded as the scene's cloud fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudModel {
    pub loss_probability: f64,
    pub cloudy_min_fraction: f64,
    pub clear_max_fraction: f64,
}

impl Default for CloudModel {
    fn default() -> Self {
        Self {
            loss_probability: 0.6,
            cloudy_min_fraction: 0.5,
            clear_max_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub height: usize,
    pub width: usize,
    pub resolution_m: f64,
    pub split: PeriodSplit,
    pub optical_revisit_days: u32,
    pub sar_revisit_days: u32,
    pub sar_pass: Option<Pass>,
    pub sar_relative_orbit: Option<u32>,
    pub forest: PerChannel<GaussianParams>,
    pub nonforest: PerChannel<GaussianParams>,
    pub events: Vec<ChangeEvent>,
    pub cloud: CloudModel,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        let split = PeriodSplit::default();
        Self {
            height: 128,
            width: 128,
            resolution_m: 20.0,
            split,
            optical_revisit_days: 10,
            sar_revisit_days: 6,
            sar_pass: Some(Pass::Ascending),
            sar_relative_orbit: Some(1),
            forest: PerChannel {
                ndvi: GaussianParams::new(0.8, 0.05),
                ratio: GaussianParams::new(6.0, 0.8),
                coherence: GaussianParams::new(0.25, 0.05),
            },
            nonforest: PerChannel {
                ndvi: GaussianParams::new(0.45, 0.07),
                ratio: GaussianParams::new(2.5, 0.8),
                coherence: GaussianParams::new(0.65, 0.08),
            },
            events: vec![ChangeEvent {
                region: Rect {
                    row: 59,
                    col: 59,
                    height: 10,
                    width: 10,
                },
                change_date: NaiveDate::from_ymd_opt(2018, 6, 15).expect("valid date"),
                affected: Channel::ALL.to_vec(),
            }],
            cloud: CloudModel::default(),
            seed: 42,
        }
    }
}

impl ScenarioSpec {
    pub fn grid(&self) -> Grid {
        Grid::new(self.height, self.width, self.resolution_m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BuddError::invalid(format!("scenario: {msg}")));
        if self.height == 0 || self.width == 0 || !(self.resolution_m > 0.0) {
            return bad(format!("grid {}x{} @ {}", self.height, self.width, self.resolution_m));
        }
        self.split.validate()?;
        if self.optical_revisit_days == 0 || self.sar_revisit_days == 0 {
            return bad("revisit intervals must be positive".into());
        }
        for c in Channel::ALL {
            for p in [self.forest.get(c), self.nonforest.get(c)] {
                if !p.mu.is_finite() || !(p.sigma >= 0.0) || !p.sigma.is_finite() {
                    return bad(format!("{c} parameters {p:?}"));
                }
            }
        }
        let cm = &self.cloud;
        for v in [cm.loss_probability, cm.cloudy_min_fraction, cm.clear_max_fraction] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("cloud model {cm:?}"));
            }
        }
        for e in &self.events {
            if !e.region.fits_in(self.height, self.width) {
                return bad(format!("event region {:?} out of bounds", e.region));
            }
            if !self.split.in_monitor(e.change_date) {
                return bad(format!("change date {} outside monitoring period", e.change_date));
            }
        }
        Ok(())
    }

    fn acquisition_dates(&self, revisit: u32) -> Vec<NaiveDate> {
        let mut dates = Vec::new();
        let mut d = self.split.define_start;
        while d <= self.split.monitor_end {
            dates.push(d);
            d = d + Days::new(u64::from(revisit));
        }
        dates
    }

    /// Change date of each pixel for `channel`, if any event affects it.
    fn change_dates(&self, channel: Channel) -> Vec<Option<NaiveDate>> {
        let mut out = vec![None; self.height * self.width];
        for e in self.events.iter().filter(|e| e.affected.contains(&channel)) {
            for r in e.region.row..e.region.row + e.region.height {
                for c in e.region.col..e.region.col + e.region.width {
                    let slot: &mut Option<NaiveDate> = &mut out[r * self.width + c];
                    *slot = Some(slot.map_or(e.change_date, |d| d.min(e.change_date)));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cubes: ChannelCubes,
    /// Change day per pixel (days since 1970-01-01) or -1.
    pub truth: DetectionMap,
    pub forest: ForestMask,
}

impl SyntheticScene {
    /// Writes `ndvi/`, `ratio/`, `coherence/` cube directories,
    /// `forest_mask.u8` and `truth.i32` (with sidecars) under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (c, cube) in self.cubes.iter() {
            save_cube(cube, &dir.join(c.name()))?;
        }
        self.forest.save(&dir.join("forest_mask.u8"))?;
        self.truth.save(&dir.join("truth.i32"))
    }
}

/// Independent, reproducible stream for one scene of one channel.
fn scene_rng(seed: u64, channel: Channel, scene: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((channel.index() as u64) << 32) | scene as u64);
    rng
}

fn draw(rng: &mut ChaCha8Rng, p: GaussianParams) -> f32 {
    let z: f64 = StandardNormal.sample(rng);
    (p.mu + p.sigma * z) as f32
}

fn generate_channel(spec: &ScenarioSpec, channel: Channel) -> Result<SceneCube> {
    let optical = channel == Channel::Ndvi;
    let dates = spec.acquisition_dates(if optical {
        spec.optical_revisit_days
    } else {
        spec.sar_revisit_days
    });
    let changes = spec.change_dates(channel);
    let n = spec.height * spec.width;
    let (forest, nonforest) = (spec.forest.get(channel), spec.nonforest.get(channel));
    let scenes: Vec<Scene> = dates
        .par_iter()
        .enumerate()
        .map(|(k, &date)| {
            let mut rng = scene_rng(spec.seed, channel, k);
            let values: Vec<f32> = (0..n)
                .map(|i| {
                    let changed = changes[i].is_some_and(|cd| date >= cd);
                    draw(&mut rng, if changed { nonforest } else { forest })
                })
                .collect();
            let mut meta = SceneMeta::new(date);
            let mask = if optical {
                let cm = spec.cloud;
                let fraction = if rng.random::<f64>() < cm.loss_probability {
                    rng.random_range(cm.cloudy_min_fraction..=1.0)
                } else {
                    rng.random_range(0.0..=cm.clear_max_fraction)
                };
                let mask: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() >= fraction)).collect();
                let masked = mask.iter().filter(|&&m| m == 0).count();
                meta.cloud_fraction = Some(masked as f64 / n as f64);
                Some(mask)
            } else {
                meta.pass = spec.sar_pass;
                meta.relative_orbit = spec.sar_relative_orbit;
                None
            };
            Scene::new(meta, values, mask)
        })
        .collect();
    let mut cube = SceneCube::new(channel.modality(), spec.grid());
    for s in scenes {
        cube.push(s)?;
    }
    cube.normalize()?;
    Ok(cube)
}

/// Generates the scenario. The same spec (including seed) reproduces every
/// byte regardless of thread count.
pub fn generate(spec: &ScenarioSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut cubes = ChannelCubes::new();
    for c in Channel::ALL {
        cubes.insert(generate_channel(spec, c)?)?;
    }
    let mut truth = DetectionMap::filled(spec.height, spec.width, NO_DETECTION);
    for c in Channel::ALL {
        for (i, d) in spec.change_dates(c).into_iter().enumerate() {
            if let Some(d) = d {
                let day = days_since_epoch(d);
                if truth.data[i] < 0 || day < truth.data[i] {
                    truth.data[i] = day;
                }
            }
        }
    }
    Ok(SyntheticScene {
        cubes,
        truth,
        forest: ForestMask::filled(spec.height, spec.width, ForestClass::Forest),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    /// Mean of `confirm - change` in days over true positives.
    pub mean_latency_days: Option<f64>,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub unmodeled: usize,
}

/// Scores a detection map against a ground-truth change map. TPR is over all
/// changed pixels; FPR over unchanged pixels that the detector modeled.
pub fn score(detections: &DetectionMap, truth: &DetectionMap) -> Result<Score> {
    detections.ensure_same_shape(truth)?;
    let (mut tp, mut fn_, mut fp, mut tn, mut unmodeled) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut latency_sum = 0.0f64;
    for (&det, &chg) in detections.data.iter().zip(&truth.data) {
        if det == UNMODELED {
            unmodeled += 1;
        }
        match (chg >= 0, det >= 0) {
            (true, true) => {
                tp += 1;
                latency_sum += f64::from(det - chg);
            }
            (true, false) => fn_ += 1,
            (false, _) if det == UNMODELED => {}
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Score {
        true_positive_rate: ratio(tp, tp + fn_),
        false_positive_rate: ratio(fp, fp + tn),
        mean_latency_days: (tp > 0).then(|| latency_sum / tp as f64),
        true_positives: tp,
        false_negatives: fn_,
        false_positives: fp,
        true_negatives: tn,
        unmodeled,
    })
}
