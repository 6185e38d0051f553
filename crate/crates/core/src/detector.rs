//! Per-pixel Bayesian updating state machine.
//!
//! Each monitoring observation is scored against the pixel's forest and
//! non-forest Gaussians. Same-day observations of several channels are fused
//! as a product of likelihoods, i.e. a sum of log-likelihood ratios. A pixel
//! is flagged when the single-step posterior exceeds `flag`, then updated
//! with each later observation until the posterior exceeds `confirm`
//! (deforested, given at least `min_obs` observations since the flag) or
//! drops below `clear` (flag removed).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BuddError, Result};
use crate::forest::{Channel, ChannelCubes, ChannelSet, ModelGrid, PixelForestModel};
use crate::grid::{paste_slice, Rect};
use crate::raw;

/// Smallest density returned by [`gaussian_pdf`].
pub const PDF_FLOOR: f64 = 1e-300;
/// Reported posteriors are kept within `[POSTERIOR_EPS, 1 - POSTERIOR_EPS]`;
/// log-odds are not bounded.
pub const POSTERIOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub flag: f64,
    pub confirm: f64,
    pub clear: f64,
    pub min_obs: u32,
    pub prior: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            flag: 0.6,
            confirm: 0.975,
            clear: 0.5,
            min_obs: 2,
            prior: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.clear
            && self.clear <= self.flag
            && self.flag < self.confirm
            && self.confirm < 1.0
            && self.min_obs >= 1
            && self.prior > 0.0
            && self.prior < 1.0;
        if ok {
            Ok(())
        } else {
            Err(BuddError::invalid(format!("thresholds out of order: {self:?}")))
        }
    }
}

/// Normal density, floored at [`PDF_FLOOR`].
pub fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(BuddError::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let z = (x - mu) / sigma;
    let density = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(density.max(PDF_FLOOR))
}

/// `ln gaussian_pdf(x, mu, sigma)` without the underflow of the direct form.
fn ln_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    let ln = -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    ln.max(PDF_FLOOR.ln())
}

/// Observations of one pixel acquired on one day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub date: NaiveDate,
    pub values: [Option<f64>; 3],
}

impl Observation {
    pub fn new(date: NaiveDate) -> Self {
        Self {
            date,
            values: [None; 3],
        }
    }

    pub fn with(mut self, c: Channel, value: f64) -> Self {
        self.values[c.index()] = Some(value);
        self
    }

    pub fn get(&self, c: Channel) -> Option<f64> {
        self.values[c.index()]
    }

    pub fn channels(&self) -> ChannelSet {
        ChannelSet::of(
            &Channel::ALL
                .into_iter()
                .filter(|&c| self.get(c).is_some())
                .collect::<Vec<_>>(),
        )
    }
}

/// Sum over present, modeled channels of `ln L_nf - ln L_f`, and the channels
/// that contributed. `None` when no channel contributes.
pub fn log_likelihood_ratio(obs: &Observation, model: &PixelForestModel) -> Option<(f64, ChannelSet)> {
    let mut llr = 0.0;
    let mut used = ChannelSet::empty();
    for c in Channel::ALL {
        let (Some(x), Some(m)) = (obs.get(c), model.get(c)) else {
            continue;
        };
        llr += ln_pdf(x, m.mu_nf, m.sigma) - ln_pdf(x, m.mu_f, m.sigma);
        used = used.with(c);
    }
    (!used.is_empty()).then_some((llr, used))
}

/// A posterior probability with its log-odds. Updates accumulate in
/// log-odds, so chained updates lose no precision near 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Belief {
    pub posterior: f64,
    pub log_odds: f64,
}

impl Belief {
    pub fn from_posterior(p: f64) -> Self {
        Self {
            posterior: p,
            log_odds: p.ln() - (-p).ln_1p(),
        }
    }

    /// Bayes update by a likelihood ratio given in log form. A zero ratio
    /// leaves the belief untouched.
    pub fn update(self, llr: f64) -> Self {
        if llr == 0.0 {
            return self;
        }
        let log_odds = self.log_odds + llr;
        let posterior = (1.0 / (1.0 + (-log_odds).exp())).clamp(POSTERIOR_EPS, 1.0 - POSTERIOR_EPS);
        Self { posterior, log_odds }
    }
}

/// Bayes update of `prior` by a likelihood ratio given in log form.
pub fn update_posterior(prior: f64, llr: f64) -> f64 {
    Belief::from_posterior(prior).update(llr).posterior
}

/// Probability that the pixel is non-forest given the same-day observation,
/// `L_nf p / (L_nf p + L_f (1 - p))`. `None` if no modeled channel was observed.
pub fn conditional_nonforest(obs: &Observation, model: &PixelForestModel, prior: f64) -> Option<f64> {
    log_likelihood_ratio(obs, model).map(|(llr, _)| update_posterior(prior, llr))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorState {
    Monitoring,
    Flagged {
        belief: Belief,
        obs_count: u32,
        flag_date: NaiveDate,
        last_date: NaiveDate,
        channels: ChannelSet,
    },
    Deforested {
        flag_date: NaiveDate,
        confirm_date: NaiveDate,
        obs_count: u32,
        channels: ChannelSet,
    },
}

impl DetectorState {
    pub fn is_deforested(&self) -> bool {
        matches!(self, DetectorState::Deforested { .. })
    }

    pub fn alert(&self, row: usize, col: usize) -> Option<AlertRecord> {
        match *self {
            DetectorState::Deforested {
                flag_date,
                confirm_date,
                obs_count,
                channels,
            } => Some(AlertRecord {
                row,
                col,
                flag_date,
                confirm_date,
                obs_count,
                modalities_used: channels.iter().collect(),
            }),
            _ => None,
        }
    }
}

/// Advances one pixel's state by one (fused) observation.
pub fn step(
    state: DetectorState,
    obs: &Observation,
    model: &PixelForestModel,
    thresholds: &Thresholds,
) -> Result<DetectorState> {
    let prior = match state {
        DetectorState::Deforested { .. } => return Ok(state),
        DetectorState::Monitoring => Belief::from_posterior(thresholds.prior),
        DetectorState::Flagged { belief, last_date, .. } => {
            if obs.date <= last_date {
                return Err(BuddError::OutOfOrder {
                    date: obs.date,
                    previous: last_date,
                });
            }
            belief
        }
    };
    let Some((llr, used)) = log_likelihood_ratio(obs, model) else {
        return Ok(state);
    };
    transition(state, obs.date, prior.update(llr), used, thresholds)
}

/// State change given the updated belief for an observation on `date`.
/// From `Monitoring`, `belief` is the conditional probability computed from
/// the prior.
pub fn transition(
    state: DetectorState,
    date: NaiveDate,
    belief: Belief,
    used: ChannelSet,
    thresholds: &Thresholds,
) -> Result<DetectorState> {
    let posterior = belief.posterior;
    match state {
        DetectorState::Deforested { .. } => Ok(state),
        DetectorState::Monitoring => {
            if posterior > thresholds.flag {
                Ok(DetectorState::Flagged {
                    belief,
                    obs_count: 1,
                    flag_date: date,
                    last_date: date,
                    channels: used,
                })
            } else {
                Ok(DetectorState::Monitoring)
            }
        }
        DetectorState::Flagged {
            obs_count,
            flag_date,
            last_date,
            channels,
            ..
        } => {
            if date <= last_date {
                return Err(BuddError::OutOfOrder {
                    date,
                    previous: last_date,
                });
            }
            let obs_count = obs_count + 1;
            let channels = used.iter().fold(channels, ChannelSet::with);
            if posterior > thresholds.confirm && obs_count >= thresholds.min_obs {
                Ok(DetectorState::Deforested {
                    flag_date,
                    confirm_date: date,
                    obs_count,
                    channels,
                })
            } else if posterior < thresholds.clear {
                Ok(DetectorState::Monitoring)
            } else {
                Ok(DetectorState::Flagged {
                    belief,
                    obs_count,
                    flag_date,
                    last_date: date,
                    channels,
                })
            }
        }
    }
}

/// Folds [`step`] over a strictly date-ordered observation series.
pub fn run_pixel(model: &PixelForestModel, observations: &[Observation], thresholds: &Thresholds) -> Result<DetectorState> {
    let mut state = DetectorState::Monitoring;
    let mut previous: Option<NaiveDate> = None;
    for obs in observations {
        if let Some(prev) = previous {
            if obs.date <= prev {
                return Err(BuddError::OutOfOrder {
                    date: obs.date,
                    previous: prev,
                });
            }
        }
        previous = Some(obs.date);
        state = step(state, obs, model, thresholds)?;
        if state.is_deforested() {
            break;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub row: usize,
    pub col: usize,
    pub flag_date: NaiveDate,
    pub confirm_date: NaiveDate,
    pub obs_count: u32,
    pub modalities_used: Vec<Channel>,
}

pub const NO_DETECTION: i32 = -1;
pub const UNMODELED: i32 = -2;

pub fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

pub fn days_since_epoch(d: NaiveDate) -> i32 {
    (d - epoch()).num_days() as i32
}

pub fn date_from_days(days: i32) -> NaiveDate {
    epoch() + chrono::Duration::days(i64::from(days))
}

/// Per-pixel confirmation day (days since 1970-01-01), or [`NO_DETECTION`] /
/// [`UNMODELED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MapHeader {
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_detection: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unmodeled: Option<i32>,
}

pub fn read_map_kind(path: &Path) -> Result<String> {
    let header: MapHeader = raw::read_json(&raw::sidecar_path(path))?;
    Ok(header.kind)
}

impl DetectionMap {
    pub fn filled(height: usize, width: usize, value: i32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn is_detected(&self, idx: usize) -> bool {
        self.data[idx] >= 0
    }

    pub fn is_modeled(&self, idx: usize) -> bool {
        self.data[idx] != UNMODELED
    }

    pub fn detected_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0).count()
    }

    pub fn ensure_same_shape(&self, other: &DetectionMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(BuddError::GridMismatch(format!(
                "detection maps {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn paste(&mut self, rect: Rect, tile: &DetectionMap) {
        paste_slice(&mut self.data, self.width, rect, &tile.data);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        raw::write_bytes(path, &raw::i32_to_le(&self.data))?;
        raw::write_json(
            &raw::sidecar_path(path),
            &MapHeader {
                kind: "detection".into(),
                height: self.height,
                width: self.width,
                dtype: "int32le".into(),
                epoch: Some("1970-01-01".into()),
                no_detection: Some(NO_DETECTION),
                unmodeled: Some(UNMODELED),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: MapHeader = raw::read_json(&raw::sidecar_path(path))?;
        if header.kind != "detection" || header.dtype != "int32le" {
            return Err(BuddError::invalid(format!(
                "{}: expected an int32le detection map, found {} {}",
                path.display(),
                header.kind,
                header.dtype
            )));
        }
        let n = header.height * header.width;
        let bytes = raw::read_exact_len(path, n * 4, "detection map")?;
        Ok(Self {
            height: header.height,
            width: header.width,
            data: raw::le_to_i32(&bytes),
        })
    }
}

pub fn write_alerts(path: &Path, alerts: &[AlertRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| BuddError::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| BuddError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in alerts {
        let line = serde_json::to_string(a).map_err(|e| BuddError::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| BuddError::io(path, e))?;
    }
    w.flush().map_err(|e| BuddError::io(path, e))
}

pub fn read_alerts(path: &Path) -> Result<Vec<AlertRecord>> {
    let file = std::fs::File::open(path).map_err(|e| BuddError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| BuddError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BuddError::json(path, e))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileDetection {
    pub map: DetectionMap,
    pub alerts: Vec<AlertRecord>,
}

/// Distinct acquisition days across the selected cubes, each with the
/// indices of that day's scenes per channel.
struct DayIndex {
    days: Vec<(NaiveDate, [Vec<usize>; 3])>,
}

impl DayIndex {
    fn build(cubes: &ChannelCubes, subset: ChannelSet) -> Self {
        let mut entries: Vec<(NaiveDate, Channel, usize)> = Vec::new();
        for (c, cube) in cubes.iter().filter(|(c, _)| subset.contains(*c)) {
            entries.extend(cube.scenes.iter().enumerate().map(|(i, s)| (s.meta.date, c, i)));
        }
        entries.sort();
        let mut days: Vec<(NaiveDate, [Vec<usize>; 3])> = Vec::new();
        for (date, c, i) in entries {
            if days.last().is_none_or(|(d, _)| *d != date) {
                days.push((date, Default::default()));
            }
            days.last_mut().expect("just pushed").1[c.index()].push(i);
        }
        Self { days }
    }
}

/// Builds the fused observation series of pixel `idx`. Several valid scenes
/// of one channel on the same day are averaged.
fn pixel_observations(
    cubes: &ChannelCubes,
    index: &DayIndex,
    model: &PixelForestModel,
    idx: usize,
    out: &mut Vec<Observation>,
) {
    out.clear();
    for (date, per_channel) in &index.days {
        let mut obs = Observation::new(*date);
        for c in Channel::ALL {
            if per_channel[c.index()].is_empty() || model.get(c).is_none() {
                continue;
            }
            let cube = cubes.get(c).expect("indexed channel present");
            let (mut sum, mut n) = (0.0f64, 0u32);
            for &s in &per_channel[c.index()] {
                if let Some(v) = cube.scenes[s].valid_value(idx) {
                    sum += f64::from(v);
                    n += 1;
                }
            }
            if n > 0 {
                obs.values[c.index()] = Some(sum / f64::from(n));
            }
        }
        if obs.values.iter().any(Option::is_some) {
            out.push(obs);
        }
    }
}

/// Runs every pixel of a tile over the given (monitoring-period) cubes using
/// only the channels in `subset`.
pub fn run_tile(
    models: &ModelGrid,
    cubes: &ChannelCubes,
    thresholds: &Thresholds,
    subset: ChannelSet,
) -> Result<TileDetection> {
    thresholds.validate()?;
    if subset.is_empty() {
        return Err(BuddError::invalid("modality subset must not be empty"));
    }
    let (h, w) = (models.height, models.width);
    if let Some(grid) = cubes.grid() {
        if grid.height != h || grid.width != w {
            return Err(BuddError::GridMismatch(format!(
                "models {h}x{w} vs cubes {}x{}",
                grid.height, grid.width
            )));
        }
    }
    let index = DayIndex::build(cubes, subset);
    let results: Vec<(i32, Option<AlertRecord>)> = (0..h * w)
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let mut model = models.pixel(idx);
            for c in Channel::ALL {
                if !subset.contains(c) {
                    model.entries[c.index()] = None;
                }
            }
            if !model.modeled_in(subset) {
                return Ok((UNMODELED, None));
            }
            pixel_observations(cubes, &index, &model, idx, buf);
            let state = run_pixel(&model, buf, thresholds)?;
            Ok(match state.alert(idx / w, idx % w) {
                Some(a) => (days_since_epoch(a.confirm_date), Some(a)),
                None => (NO_DETECTION, None),
            })
        })
        .collect::<Result<_>>()?;
    let mut map = DetectionMap::filled(h, w, NO_DETECTION);
    let mut alerts = Vec::new();
    for (i, (v, a)) in results.into_iter().enumerate() {
        map.data[i] = v;
        alerts.extend(a);
    }
    Ok(TileDetection { map, alerts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::ChannelModel;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn ndvi_model(mu_f: f64, sigma: f64, mu_nf: f64) -> PixelForestModel {
        let mut m = PixelForestModel::default();
        m.entries[Channel::Ndvi.index()] = Some(ChannelModel {
            mu_f,
            sigma,
            mu_nf,
            n_obs: 10,
        });
        m
    }

    #[test]
    fn pdf_closed_forms() {
        let peak = gaussian_pdf(0.3, 0.3, 0.05).unwrap();
        assert!((peak - 1.0 / (0.05 * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-12);
        let off = gaussian_pdf(0.35, 0.3, 0.05).unwrap();
        assert!((off - (-0.5f64).exp() * peak).abs() < 1e-12);
        assert_eq!(gaussian_pdf(0.3 + 50.0 * 0.05, 0.3, 0.05).unwrap(), PDF_FLOOR);
        assert!(gaussian_pdf(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn ln_pdf_matches_pdf() {
        for x in [-0.2, 0.1, 0.5, 0.77] {
            let direct = gaussian_pdf(x, 0.4, 0.1).unwrap().ln();
            assert!((ln_pdf(x, 0.4, 0.1) - direct).abs() < 1e-12);
        }
        assert_eq!(ln_pdf(100.0, 0.0, 0.01), PDF_FLOOR.ln());
    }

    #[test]
    fn midway_observation_returns_prior() {
        let model = ndvi_model(1.0, 0.25, 0.0);
        let obs = Observation::new(d("2018-01-01")).with(Channel::Ndvi, 0.5);
        assert_eq!(conditional_nonforest(&obs, &model, 0.5), Some(0.5));
        assert_eq!(conditional_nonforest(&obs, &model, 0.3), Some(0.3));
    }

    #[test]
    fn likelihood_ratio_two_gives_two_thirds() {
        assert!((update_posterior(0.5, 2f64.ln()) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn literal_bayes_formula_agrees() {
        let model = ndvi_model(0.8, 0.05, 0.5);
        for (x, prior) in [(0.7, 0.5), (0.62, 0.3), (0.55, 0.8), (0.66, 0.61)] {
            let lnf = gaussian_pdf(x, 0.5, 0.05).unwrap();
            let lf = gaussian_pdf(x, 0.8, 0.05).unwrap();
            let expected = lnf * prior / (lnf * prior + lf * (1.0 - prior));
            let got = conditional_nonforest(&Observation::new(d("2018-01-01")).with(Channel::Ndvi, x), &model, prior)
                .unwrap();
            assert!((got - expected).abs() <= 1e-12 * expected, "{got} vs {expected}");
        }
    }

    #[test]
    fn unmodeled_channel_is_skipped() {
        let model = ndvi_model(0.8, 0.05, 0.5);
        let obs = Observation::new(d("2018-01-01")).with(Channel::Ratio, 3.0);
        assert_eq!(conditional_nonforest(&obs, &model, 0.5), None);
        assert_eq!(step(DetectorState::Monitoring, &obs, &model, &Thresholds::default()).unwrap(), DetectorState::Monitoring);
    }

    fn llr_for(p: f64) -> f64 {
        // observation whose single-step posterior from 0.5 is p
        (p / (1.0 - p)).ln()
    }

    /// Model and observation value producing log-likelihood ratio `llr` on a
    /// unit-variance channel with forest at 0 and non-forest at 1:
    /// llr = x - 1/2.
    fn obs_with_llr(date: &str, llr: f64) -> (PixelForestModel, Observation) {
        (
            ndvi_model(0.0, 1.0, 1.0),
            Observation::new(d(date)).with(Channel::Ndvi, llr + 0.5),
        )
    }

    #[test]
    fn flag_threshold_is_strict() {
        let t = Thresholds::default();
        let (m, o) = obs_with_llr("2018-01-01", llr_for(0.59));
        assert_eq!(step(DetectorState::Monitoring, &o, &m, &t).unwrap(), DetectorState::Monitoring);
        let (m, o) = obs_with_llr("2018-01-01", llr_for(0.61));
        match step(DetectorState::Monitoring, &o, &m, &t).unwrap() {
            DetectorState::Flagged { belief, obs_count, flag_date, .. } => {
                assert!((belief.posterior - 0.61).abs() < 1e-9);
                assert_eq!(obs_count, 1);
                assert_eq!(flag_date, d("2018-01-01"));
            }
            other => panic!("{other:?}"),
        }
    }

    fn flagged(posterior: f64, date: &str) -> DetectorState {
        DetectorState::Flagged {
            belief: Belief::from_posterior(posterior),
            obs_count: 1,
            flag_date: d(date),
            last_date: d(date),
            channels: ChannelSet::of(&[Channel::Ndvi]),
        }
    }

    #[test]
    fn confirmation_needs_second_observation() {
        let t = Thresholds::default();
        // from 0.99, an update landing on 0.995
        let target = 0.995f64;
        let llr = (target / (1.0 - target)).ln() - (0.99f64 / 0.01).ln();
        let (m, o) = obs_with_llr("2018-01-07", llr);
        match step(flagged(0.99, "2018-01-01"), &o, &m, &t).unwrap() {
            DetectorState::Deforested { confirm_date, obs_count, flag_date, .. } => {
                assert_eq!(confirm_date, d("2018-01-07"));
                assert_eq!(flag_date, d("2018-01-01"));
                assert_eq!(obs_count, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn posterior_below_clear_resets() {
        let t = Thresholds::default();
        let llr = (0.49f64 / 0.51).ln() - (0.7f64 / 0.3).ln();
        let (m, o) = obs_with_llr("2018-01-07", llr);
        assert_eq!(step(flagged(0.7, "2018-01-01"), &o, &m, &t).unwrap(), DetectorState::Monitoring);
    }

    #[test]
    fn flagged_rejects_stale_dates() {
        let (m, o) = obs_with_llr("2018-01-01", 1.0);
        assert!(matches!(
            step(flagged(0.7, "2018-01-01"), &o, &m, &Thresholds::default()),
            Err(BuddError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn deforested_is_absorbing() {
        let state = DetectorState::Deforested {
            flag_date: d("2018-01-01"),
            confirm_date: d("2018-01-07"),
            obs_count: 2,
            channels: ChannelSet::of(&[Channel::Ndvi]),
        };
        let (m, o) = obs_with_llr("2018-02-01", -50.0);
        assert_eq!(step(state, &o, &m, &Thresholds::default()).unwrap(), state);
    }

    #[test]
    fn scalar_bayes_chain_confirms_on_second_observation() {
        let model = ndvi_model(0.8, 0.05, 0.5);
        let t = Thresholds::default();
        // oracle: literal densities, literal Bayes
        let pdf = |x: f64, mu: f64| (-(x - mu) * (x - mu) / (2.0 * 0.05 * 0.05)).exp();
        let ratio = pdf(0.5, 0.5) / pdf(0.5, 0.8);
        let p0 = ratio * 0.5 / (ratio * 0.5 + 0.5);
        let p1 = ratio * p0 / (ratio * p0 + (1.0 - p0));
        assert!(p0 > 0.6 && p1 > 0.975);

        let obs = [
            Observation::new(d("2018-01-01")).with(Channel::Ndvi, 0.5),
            Observation::new(d("2018-01-11")).with(Channel::Ndvi, 0.5),
        ];
        let after_one = step(DetectorState::Monitoring, &obs[0], &model, &t).unwrap();
        match after_one {
            DetectorState::Flagged { belief, .. } => {
                assert!((belief.posterior - p0.min(1.0 - POSTERIOR_EPS)).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
        let state = run_pixel(&model, &obs, &t).unwrap();
        let alert = state.alert(3, 4).unwrap();
        assert_eq!(alert.confirm_date, d("2018-01-11"));
        assert_eq!(alert.obs_count, 2);
        assert_eq!((alert.row, alert.col), (3, 4));
        assert_eq!(alert.modalities_used, vec![Channel::Ndvi]);
    }

    #[test]
    fn run_pixel_edge_cases() {
        let model = ndvi_model(0.8, 0.05, 0.5);
        let t = Thresholds::default();
        assert_eq!(run_pixel(&model, &[], &t).unwrap(), DetectorState::Monitoring);
        let at_mean: Vec<_> = (0..20)
            .map(|k| Observation::new(d("2018-01-01") + chrono::Days::new(k)).with(Channel::Ndvi, 0.8))
            .collect();
        assert_eq!(run_pixel(&model, &at_mean, &t).unwrap(), DetectorState::Monitoring);
        let unordered = [at_mean[1], at_mean[0]];
        assert!(run_pixel(&model, &unordered, &t).is_err());
    }

    #[test]
    fn threshold_validation() {
        assert!(Thresholds::default().validate().is_ok());
        let mut t = Thresholds::default();
        t.clear = 0.7;
        assert!(t.validate().is_err());
        t = Thresholds::default();
        t.min_obs = 0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn detection_map_and_alerts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = DetectionMap {
            height: 1,
            width: 3,
            data: vec![17600, NO_DETECTION, UNMODELED],
        };
        let path = dir.path().join("det.i32");
        map.save(&path).unwrap();
        assert_eq!(DetectionMap::load(&path).unwrap(), map);
        assert_eq!(std::fs::read(&path).unwrap().len(), 12);

        let alerts = vec![AlertRecord {
            row: 0,
            col: 0,
            flag_date: d("2018-03-01"),
            confirm_date: d("2018-03-07"),
            obs_count: 2,
            modalities_used: vec![Channel::Ratio, Channel::Coherence],
        }];
        let apath = dir.path().join("alerts.jsonl");
        write_alerts(&apath, &alerts).unwrap();
        assert_eq!(read_alerts(&apath).unwrap(), alerts);
    }

    #[test]
    fn epoch_days() {
        assert_eq!(days_since_epoch(d("1970-01-02")), 1);
        assert_eq!(date_from_days(days_since_epoch(d("2019-06-30"))), d("2019-06-30"));
    }
}
