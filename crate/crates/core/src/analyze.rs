//! Map comparison, detection tallies and PPM rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectionMap, MapHeader, UNMODELED};
use crate::error::{BuddError, Result};
use crate::raw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Agreement {
    AOnly = 0,
    Agree = 1,
    BOnly = 2,
    /// Unmodeled in either map.
    Excluded = 3,
}

impl Agreement {
    fn from_code(b: u8) -> Option<Self> {
        match b {
            0 => Some(Agreement::AOnly),
            1 => Some(Agreement::Agree),
            2 => Some(Agreement::BOnly),
            3 => Some(Agreement::Excluded),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonMap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Agreement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgreementCounts {
    pub a_only: usize,
    pub agree: usize,
    pub b_only: usize,
    pub excluded: usize,
}

impl AgreementCounts {
    pub fn modeled(&self) -> usize {
        self.a_only + self.agree + self.b_only
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub map: ComparisonMap,
    pub counts: AgreementCounts,
}

/// Three-way agreement between two detection maps. Agreement ignores timing
/// and includes joint non-detection.
pub fn compare_maps(a: &DetectionMap, b: &DetectionMap) -> Result<Comparison> {
    a.ensure_same_shape(b)?;
    let mut counts = AgreementCounts::default();
    let cells = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&va, &vb)| {
            let cat = if va == UNMODELED || vb == UNMODELED {
                Agreement::Excluded
            } else {
                match (va >= 0, vb >= 0) {
                    (true, false) => Agreement::AOnly,
                    (false, true) => Agreement::BOnly,
                    _ => Agreement::Agree,
                }
            };
            match cat {
                Agreement::AOnly => counts.a_only += 1,
                Agreement::Agree => counts.agree += 1,
                Agreement::BOnly => counts.b_only += 1,
                Agreement::Excluded => counts.excluded += 1,
            }
            cat
        })
        .collect();
    Ok(Comparison {
        map: ComparisonMap {
            height: a.height,
            width: a.width,
            cells,
        },
        counts,
    })
}

impl ComparisonMap {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.cells.iter().map(|&c| c as u8).collect();
        raw::write_bytes(path, &bytes)?;
        raw::write_json(
            &raw::sidecar_path(path),
            &MapHeader {
                kind: "comparison".into(),
                height: self.height,
                width: self.width,
                dtype: "uint8".into(),
                epoch: None,
                no_detection: None,
                unmodeled: None,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: MapHeader = raw::read_json(&raw::sidecar_path(path))?;
        if header.kind != "comparison" {
            return Err(BuddError::invalid(format!(
                "{}: expected a comparison map, found {}",
                path.display(),
                header.kind
            )));
        }
        let bytes = raw::read_exact_len(path, header.height * header.width, "comparison map")?;
        let cells = bytes
            .iter()
            .map(|&b| Agreement::from_code(b).ok_or_else(|| BuddError::invalid(format!("agreement code {b}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            height: header.height,
            width: header.width,
            cells,
        })
    }
}

/// Pixels detected (non-negative date) by both maps, binned by
/// `b - a` in days.
pub fn timing_histogram(a: &DetectionMap, b: &DetectionMap, bin_days: i32) -> Result<BTreeMap<i32, usize>> {
    a.ensure_same_shape(b)?;
    if bin_days <= 0 {
        return Err(BuddError::invalid("histogram bin width must be positive"));
    }
    let mut bins = BTreeMap::new();
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        if va >= 0 && vb >= 0 {
            *bins.entry((vb - va).div_euclid(bin_days) * bin_days).or_insert(0) += 1;
        }
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCount {
    pub name: String,
    pub detections: usize,
}

pub fn count_detections<'a>(maps: impl IntoIterator<Item = (&'a str, &'a DetectionMap)>) -> Vec<DetectionCount> {
    maps.into_iter()
        .map(|(name, map)| DetectionCount {
            name: name.to_string(),
            detections: map.detected_count(),
        })
        .collect()
}

/// Left-aligned name column, right-aligned counts.
pub fn detection_table(counts: &[DetectionCount]) -> String {
    let name_w = counts.iter().map(|c| c.name.len()).max().unwrap_or(0).max("map".len());
    let num_w = counts
        .iter()
        .map(|c| c.detections.to_string().len())
        .max()
        .unwrap_or(0)
        .max("detections".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<name_w$}  {:>num_w$}", "map", "detections");
    for c in counts {
        let _ = writeln!(out, "{:<name_w$}  {:>num_w$}", c.name, c.detections);
    }
    out
}

pub fn agreement_table(counts: &AgreementCounts) -> String {
    let total = counts.modeled().max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(out, "{:<10}  {:>8}  {:>7}", "category", "pixels", "share");
    for (name, n) in [
        ("a_only", counts.a_only),
        ("agree", counts.agree),
        ("b_only", counts.b_only),
    ] {
        let _ = writeln!(out, "{name:<10}  {n:>8}  {:>6.2}%", 100.0 * n as f64 / total);
    }
    let _ = writeln!(out, "{:<10}  {:>8}  {:>7}", "excluded", counts.excluded, "-");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    /// Detected green, not detected gray, unmodeled black.
    Alerts,
    /// A-only red, agree grey, B-only blue, excluded black.
    Agreement,
}

impl FromStr for Palette {
    type Err = BuddError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alerts" => Ok(Palette::Alerts),
            "agreement" => Ok(Palette::Agreement),
            other => Err(BuddError::invalid(format!("unknown palette `{other}`"))),
        }
    }
}

pub type Rgb = [u8; 3];

/// Alert palette: index 0 = not detected, 1 = detected, 2 = unmodeled.
pub const ALERT_COLORS: [Rgb; 3] = [[128, 128, 128], [0, 200, 0], [0, 0, 0]];
/// Agreement palette, indexed by [`Agreement`] code.
pub const AGREEMENT_COLORS: [Rgb; 4] = [[220, 40, 40], [170, 170, 170], [40, 80, 220], [0, 0, 0]];

impl Palette {
    pub fn colors(self) -> &'static [Rgb] {
        match self {
            Palette::Alerts => &ALERT_COLORS,
            Palette::Agreement => &AGREEMENT_COLORS,
        }
    }
}

/// Something that can be rendered: a categorical raster with its palette.
#[derive(Debug, Clone, Copy)]
pub enum MapView<'a> {
    Detection(&'a DetectionMap),
    Comparison(&'a ComparisonMap),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

/// Category index of each pixel, in palette order.
pub fn categories(view: MapView<'_>) -> Vec<u8> {
    match view {
        MapView::Detection(m) => m
            .data
            .iter()
            .map(|&v| match v {
                v if v >= 0 => 1,
                UNMODELED => 2,
                _ => 0,
            })
            .collect(),
        MapView::Comparison(m) => m.cells.iter().map(|&c| c as u8).collect(),
    }
}

pub fn render(view: MapView<'_>, palette: Palette) -> Result<RgbImage> {
    let (height, width) = match (view, palette) {
        (MapView::Detection(m), Palette::Alerts) => (m.height, m.width),
        (MapView::Comparison(m), Palette::Agreement) => (m.height, m.width),
        _ => {
            return Err(BuddError::invalid(format!(
                "palette {palette:?} does not apply to this kind of map"
            )))
        }
    };
    let colors = palette.colors();
    Ok(RgbImage {
        width,
        height,
        pixels: categories(view).into_iter().map(|c| colors[c as usize]).collect(),
    })
}

/// Maps each pixel color back to its palette index.
pub fn decode(image: &RgbImage, palette: Palette) -> Result<Vec<u8>> {
    let colors = palette.colors();
    image
        .pixels
        .iter()
        .map(|px| {
            colors
                .iter()
                .position(|c| c == px)
                .map(|i| i as u8)
                .ok_or_else(|| BuddError::invalid(format!("color {px:?} not in palette {palette:?}")))
        })
        .collect()
}

impl RgbImage {
    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(BuddError::invalid("truncated PPM header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let parse = |s: String| s.parse::<usize>().map_err(|_| BuddError::invalid(format!("bad PPM number `{s}`")));
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let maxval = parse(token()?)?;
        if magic != "P6" || maxval != 255 {
            return Err(BuddError::invalid(format!("unsupported PPM {magic} maxval {maxval}")));
        }
        // single whitespace byte before the raster
        let data = &bytes[pos + 1..];
        if data.len() != width * height * 3 {
            return Err(BuddError::ShapeMismatch {
                what: "PPM raster".into(),
                expected: width * height * 3,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        raw::write_bytes(path, &self.to_ppm())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| BuddError::io(path, e))?;
        Self::from_ppm(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::NO_DETECTION;

    fn map(data: Vec<i32>, w: usize) -> DetectionMap {
        DetectionMap {
            height: data.len() / w,
            width: w,
            data,
        }
    }

    #[test]
    fn identical_maps_fully_agree() {
        let a = map(vec![100, -1, 200, -1], 2);
        let c = compare_maps(&a, &a).unwrap();
        assert_eq!(c.counts.agree, 4);
        assert!(c.map.cells.iter().all(|&x| x == Agreement::Agree));
    }

    #[test]
    fn all_vs_none() {
        let a = map(vec![5; 6], 3);
        let b = map(vec![NO_DETECTION; 6], 3);
        let c = compare_maps(&a, &b).unwrap();
        assert_eq!(c.counts.a_only, 6);
        assert_eq!(compare_maps(&b, &a).unwrap().counts.b_only, 6);
    }

    #[test]
    fn unmodeled_excluded_and_timing_ignored() {
        let a = map(vec![UNMODELED, 10, 10, -1], 2);
        let b = map(vec![10, 99, -1, -1], 2);
        let c = compare_maps(&a, &b).unwrap();
        assert_eq!(
            c.counts,
            AgreementCounts {
                a_only: 1,
                agree: 2,
                b_only: 0,
                excluded: 1
            }
        );
        assert_eq!(c.counts.modeled() + c.counts.excluded, 4);
    }

    #[test]
    fn compare_shape_mismatch() {
        assert!(compare_maps(&map(vec![1, 2], 2), &map(vec![1, 2], 1)).is_err());
    }

    #[test]
    fn counts_and_table() {
        let empty = map(vec![-1; 4], 2);
        let some = map(vec![3, -1, 7, UNMODELED], 2);
        let counts = count_detections([("empty", &empty), ("NBC", &some)]);
        assert_eq!(counts[0].detections, 0);
        assert_eq!(counts[1].detections, 2);
        let table = detection_table(&counts);
        let lines: Vec<_> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }

    #[test]
    fn timing_histogram_bins() {
        let a = map(vec![0, 10, -1, 5], 2);
        let b = map(vec![3, 30, 4, -2], 2);
        let h = timing_histogram(&a, &b, 10).unwrap();
        assert_eq!(h.into_iter().collect::<Vec<_>>(), vec![(0, 1), (20, 1)]);
    }

    #[test]
    fn render_two_by_two() {
        let m = map(vec![17000, NO_DETECTION, UNMODELED, 17001], 2);
        let img = render(MapView::Detection(&m), Palette::Alerts).unwrap();
        assert_eq!(
            img.pixels,
            vec![ALERT_COLORS[1], ALERT_COLORS[0], ALERT_COLORS[2], ALERT_COLORS[1]]
        );
        assert_eq!(decode(&img, Palette::Alerts).unwrap(), vec![1, 0, 2, 1]);
    }

    #[test]
    fn empty_map_renders_background() {
        let m = map(vec![NO_DETECTION; 9], 3);
        let img = render(MapView::Detection(&m), Palette::Alerts).unwrap();
        assert!(img.pixels.iter().all(|&p| p == ALERT_COLORS[0]));
    }

    #[test]
    fn palette_parsing_and_mismatch() {
        assert!("heat".parse::<Palette>().is_err());
        let m = map(vec![1], 1);
        assert!(render(MapView::Detection(&m), Palette::Agreement).is_err());
    }

    #[test]
    fn palettes_have_distinct_colors() {
        for p in [Palette::Alerts, Palette::Agreement] {
            let c = p.colors();
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    assert_ne!(c[i], c[j]);
                }
            }
        }
    }

    #[test]
    fn ppm_header_and_comments() {
        let img = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![[1, 2, 3], [4, 5, 6]],
        };
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(RgbImage::from_ppm(&bytes).unwrap(), img);
        let mut commented = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        commented.extend([1, 2, 3, 4, 5, 6]);
        assert_eq!(RgbImage::from_ppm(&commented).unwrap(), img);
        assert!(RgbImage::from_ppm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn comparison_map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = compare_maps(&map(vec![1, -1, -2, 4], 2), &map(vec![-1, 3, 1, 4], 2)).unwrap();
        let p = dir.path().join("cmp.u8");
        c.map.save(&p).unwrap();
        assert_eq!(ComparisonMap::load(&p).unwrap(), c.map);
        assert!(DetectionMap::load(&p).is_err());
    }
}
