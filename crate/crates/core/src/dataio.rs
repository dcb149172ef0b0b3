//! Images, label masks, manifests and the synthetic shapes dataset.
//!
//! Images are binary PPM (P6) and masks binary PGM (P5), both 8-bit. Mask
//! value 0 is background; foreground category `i` of the category list is
//! class `i + 1`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::CategoryList;
use crate::error::{CpcError, Result};

pub const BACKGROUND: &str = "background";

/// RGB image with channels in `[0, 1]`, stored pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(CpcError::Shape(format!(
                "{height}x{width} rgb image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self {
            height,
            width,
            data: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * 3;
        &self.data[i..i + 3]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CpcError::Shape(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn present_classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }
}

fn header_error(path: &Path, what: &str) -> CpcError {
    CpcError::format(path, format!("corrupt header: {what}"))
}

/// Parse a binary netpbm header, returning (width, height, maxval, data offset).
fn parse_netpbm(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(header_error(path, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(header_error(path, "truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| header_error(path, "expected a number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(header_error(path, "missing separator"));
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(header_error(path, "only 8-bit maxval supported"));
    }
    Ok((w, h, maxval, pos + 1))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    fs::write(path, out).map_err(|e| CpcError::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CpcError::io(path, e))?;
    let (w, h, maxval, off) = parse_netpbm(&bytes, b"P6", path)?;
    let body = &bytes[off..];
    if body.len() != w * h * 3 {
        return Err(CpcError::format(path, "pixel data length does not match header"));
    }
    RgbImage::new(h, w, body.iter().map(|&b| b as f64 / maxval as f64).collect())
}

pub fn write_pgm(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.labels);
    fs::write(path, out).map_err(|e| CpcError::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CpcError::io(path, e))?;
    let (w, h, _, off) = parse_netpbm(&bytes, b"P5", path)?;
    let body = &bytes[off..];
    if body.len() != w * h {
        return Err(CpcError::format(path, "pixel data length does not match header"));
    }
    LabelMap::new(h, w, body.to_vec())
}

/// One training or evaluation image with its image-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: RgbImage,
    /// Foreground category names, sorted; never empty.
    pub labels: Vec<String>,
    pub gt_mask: Option<LabelMap>,
}

/// Class names of the C-way classifier: background first, then the categories.
pub fn class_names(categories: &CategoryList) -> Vec<String> {
    std::iter::once(BACKGROUND.to_string())
        .chain(categories.names().iter().cloned())
        .collect()
}

/// Multi-hot target over all classes; background is always on.
pub fn label_vector(labels: &[String], categories: &CategoryList) -> Result<Vec<f64>> {
    let mut y = vec![0.0; categories.len() + 1];
    y[0] = 1.0;
    for l in labels {
        let i = categories
            .index_of(l)
            .ok_or_else(|| CpcError::UnknownCategory(l.clone()))?;
        y[i + 1] = 1.0;
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CpcError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CpcError::format(path, e.to_string()))
}

/// Load every sample listed in a manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>, categories: &CategoryList) -> Result<Vec<Sample>> {
    let manifest_path = manifest_path.as_ref();
    let entries = read_manifest(manifest_path)?;
    if entries.is_empty() {
        return Err(CpcError::EmptyDataset);
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    entries
        .par_iter()
        .map(|e| {
            if e.labels.is_empty() {
                return Err(CpcError::format(
                    manifest_path,
                    format!("image `{}` has no labels", e.image_id),
                ));
            }
            if let Some(bad) = e.labels.iter().find(|l| !categories.contains(l)) {
                return Err(CpcError::format(
                    manifest_path,
                    format!("image `{}`: unknown category `{bad}`", e.image_id),
                ));
            }
            let image = read_ppm(resolve(base, &e.image_path))?;
            let gt_mask = e
                .gt_mask_path
                .as_ref()
                .map(|p| {
                    let p = resolve(base, p);
                    let m = read_pgm(&p)?;
                    if m.height() != image.height() || m.width() != image.width() {
                        return Err(CpcError::format(p, "mask and image sizes differ"));
                    }
                    Ok(m)
                })
                .transpose()?;
            let mut labels = e.labels.clone();
            labels.sort();
            labels.dedup();
            Ok(Sample {
                image_id: e.image_id.clone(),
                image,
                labels,
                gt_mask,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_side: usize,
    pub categories: Vec<String>,
    /// Base colors per category; empty selects a built-in palette.
    pub class_colors: Vec<[f64; 3]>,
    pub background_color: [f64; 3],
    pub shapes_per_image: (usize, usize),
    pub shape_side: (usize, usize),
    pub noise_sigma: f64,
    /// Pairs whose second member is recolored to sit `confusable_delta` from the first.
    pub confusable_pairs: Vec<(String, String)>,
    pub confusable_delta: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            categories: vec!["cat".into(), "dog".into(), "car".into(), "bus".into()],
            class_colors: Vec::new(),
            background_color: [0.5, 0.5, 0.5],
            shapes_per_image: (1, 2),
            shape_side: (20, 32),
            noise_sigma: 0.02,
            confusable_pairs: Vec::new(),
            confusable_delta: 0.04,
            count: 40,
            seed: 0,
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
    [0.95, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
];

/// Minimum L∞ distance between a class color and the background.
const MIN_BACKGROUND_SEPARATION: f64 = 0.15;

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl SynthConfig {
    pub fn category_list(&self) -> Result<CategoryList> {
        CategoryList::new(self.categories.iter().cloned())
    }

    /// Final per-category colors after palette defaults and confusable recoloring.
    pub fn resolved_colors(&self) -> Result<Vec<[f64; 3]>> {
        let categories = self.category_list()?;
        let mut colors = if self.class_colors.is_empty() {
            if categories.len() > PALETTE.len() {
                return Err(CpcError::Config(format!(
                    "built-in palette covers {} categories; give class_colors",
                    PALETTE.len()
                )));
            }
            PALETTE[..categories.len()].to_vec()
        } else {
            self.class_colors.clone()
        };
        if colors.len() != categories.len() {
            return Err(CpcError::Config(format!(
                "{} class colors for {} categories",
                colors.len(),
                categories.len()
            )));
        }
        for (a, b) in &self.confusable_pairs {
            let ia = categories
                .index_of(a)
                .ok_or_else(|| CpcError::UnknownCategory(a.clone()))?;
            let ib = categories
                .index_of(b)
                .ok_or_else(|| CpcError::UnknownCategory(b.clone()))?;
            let base = colors[ia];
            colors[ib] = base.map(|v| {
                if v + self.confusable_delta <= 1.0 {
                    v + self.confusable_delta
                } else {
                    v - self.confusable_delta
                }
            });
        }
        Ok(colors)
    }

    pub fn validate(&self) -> Result<()> {
        let categories = self.category_list()?;
        if categories.len() > 254 {
            return Err(CpcError::Config("at most 254 categories fit in an 8-bit mask".into()));
        }
        if self.image_side < 1 || self.count < 1 {
            return Err(CpcError::Config("image_side and count must be positive".into()));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo < 1 || lo > hi {
            return Err(CpcError::Config("shapes_per_image must satisfy 1 <= min <= max".into()));
        }
        let (slo, shi) = self.shape_side;
        if slo < 1 || slo > shi || shi > self.image_side {
            return Err(CpcError::Config("shape_side must satisfy 1 <= min <= max <= image_side".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CpcError::Config("noise_sigma must be non-negative".into()));
        }
        let colors = self.resolved_colors()?;
        for (name, c) in categories.names().iter().zip(&colors) {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CpcError::Config(format!("color of `{name}` leaves [0,1]")));
            }
            if color_distance(c, &self.background_color) < MIN_BACKGROUND_SEPARATION {
                return Err(CpcError::Config(format!(
                    "color of `{name}` collides with the background color"
                )));
            }
        }
        let confusable = |a: usize, b: usize| {
            self.confusable_pairs.iter().any(|(x, y)| {
                let (x, y) = (categories.index_of(x), categories.index_of(y));
                (x == Some(a) && y == Some(b)) || (x == Some(b) && y == Some(a))
            })
        };
        for a in 0..colors.len() {
            for b in a + 1..colors.len() {
                if colors[a] == colors[b] && !confusable(a, b) {
                    return Err(CpcError::Config(format!(
                        "`{}` and `{}` share a color",
                        categories.names()[a],
                        categories.names()[b]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
}

fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn generate_one(cfg: &SynthConfig, colors: &[[f64; 3]], index: usize) -> Result<Sample> {
    let n = cfg.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, index));
    let mut mask = LabelMap::filled(n, n, 0);
    let shapes = rng.random_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let mut boxes: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..shapes {
        let class = rng.random_range(0..colors.len());
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Rect
        } else {
            ShapeKind::Ellipse
        };
        // Shapes never overlap, so every painted class stays visible.
        for _attempt in 0..20 {
            let h = rng.random_range(cfg.shape_side.0..=cfg.shape_side.1);
            let w = rng.random_range(cfg.shape_side.0..=cfg.shape_side.1);
            let y0 = rng.random_range(0..=n - h);
            let x0 = rng.random_range(0..=n - w);
            let clash = boxes
                .iter()
                .any(|&(by, bx, bh, bw)| y0 < by + bh && by < y0 + h && x0 < bx + bw && bx < x0 + w);
            if clash {
                continue;
            }
            boxes.push((y0, x0, h, w));
            let (cy, cx) = (y0 as f64 + h as f64 / 2.0, x0 as f64 + w as f64 / 2.0);
            let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    let inside = match kind {
                        ShapeKind::Rect => true,
                        ShapeKind::Ellipse => {
                            let dy = (y as f64 + 0.5 - cy) / ry;
                            let dx = (x as f64 + 0.5 - cx) / rx;
                            dy * dy + dx * dx <= 1.0
                        }
                    };
                    if inside {
                        mask.set(y, x, class as u8 + 1);
                    }
                }
            }
            break;
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| CpcError::Config(e.to_string()))?;
    let mut bytes = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let base = match mask.get(y, x) {
                0 => cfg.background_color,
                c => colors[c as usize - 1],
            };
            for v in base {
                let jitter = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                bytes.push(((v + jitter).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let labels: Vec<String> = mask
        .present_classes()
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| cfg.categories[c as usize - 1].clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.is_empty() {
        return Err(CpcError::Config(format!(
            "image {index} received no visible shape"
        )));
    }
    Ok(Sample {
        image_id: format!("img_{index:05}"),
        image: RgbImage::from_bytes(n, n, &bytes)?,
        labels,
        gt_mask: Some(mask),
    })
}

/// Generate the synthetic dataset in memory.
pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let colors = cfg.resolved_colors()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| generate_one(cfg, &colors, i))
        .collect()
}

/// Generate the synthetic dataset and write images, masks, `categories.txt`
/// and `manifest.json` under `out_dir`. Returns the manifest path.
pub fn gen_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let samples = generate_samples(cfg)?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| CpcError::io(&d, e))?;
    }
    let entries = samples
        .par_iter()
        .map(|s| {
            let image_path = PathBuf::from("images").join(format!("{}.ppm", s.image_id));
            let mask_path = PathBuf::from("masks").join(format!("{}.pgm", s.image_id));
            write_ppm(out_dir.join(&image_path), &s.image)?;
            write_pgm(out_dir.join(&mask_path), s.gt_mask.as_ref().expect("synthetic mask"))?;
            Ok(ManifestEntry {
                image_id: s.image_id.clone(),
                image_path,
                labels: s.labels.clone(),
                gt_mask_path: Some(mask_path),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.category_list()?.write_file(out_dir.join("categories.txt"))?;
    let manifest = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest, text + "\n").map_err(|e| CpcError::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cat() -> SynthConfig {
        SynthConfig {
            image_side: 32,
            categories: vec!["cat".into()],
            shapes_per_image: (1, 1),
            shape_side: (8, 12),
            noise_sigma: 0.0,
            count: 1,
            ..Default::default()
        }
    }

    #[test]
    fn single_shape_sample_matches_its_mask() {
        let cfg = one_cat();
        let s = &generate_samples(&cfg).unwrap()[0];
        assert_eq!(s.labels, ["cat"]);
        let mask = s.gt_mask.as_ref().unwrap();
        let colors = cfg.resolved_colors().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let want = if mask.get(y, x) == 1 { colors[0] } else { cfg.background_color };
                let got = s.image.pixel(y, x);
                for c in 0..3 {
                    assert_eq!(got[c], (want[c] * 255.0).round() / 255.0);
                }
            }
        }
        assert!(mask.labels().iter().any(|&v| v == 1));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SynthConfig {
            count: 6,
            ..Default::default()
        };
        assert_eq!(generate_samples(&cfg).unwrap(), generate_samples(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_samples(&cfg).unwrap(), generate_samples(&other).unwrap());
    }

    #[test]
    fn labels_equal_mask_classes() {
        let cfg = SynthConfig {
            count: 30,
            shapes_per_image: (1, 3),
            ..Default::default()
        };
        for s in generate_samples(&cfg).unwrap() {
            let mut from_mask: Vec<String> = s
                .gt_mask
                .unwrap()
                .present_classes()
                .into_iter()
                .filter(|&c| c > 0)
                .map(|c| cfg.categories[c as usize - 1].clone())
                .collect();
            from_mask.sort();
            assert_eq!(s.labels, from_mask);
        }
    }

    #[test]
    fn background_collision_is_rejected() {
        let cfg = SynthConfig {
            categories: vec!["cat".into()],
            class_colors: vec![[0.52, 0.5, 0.5]],
            ..Default::default()
        };
        assert!(generate_samples(&cfg).is_err());
        let dup = SynthConfig {
            categories: vec!["cat".into(), "dog".into()],
            class_colors: vec![[0.9, 0.1, 0.1], [0.9, 0.1, 0.1]],
            ..Default::default()
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn confusable_pairs_get_near_identical_colors() {
        let cfg = SynthConfig {
            confusable_pairs: vec![("cat".into(), "dog".into())],
            ..Default::default()
        };
        let c = cfg.resolved_colors().unwrap();
        assert!((color_distance(&c[0], &c[1]) - cfg.confusable_delta).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn netpbm_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_bytes(2, 3, &(0..18).map(|v| v * 10).collect::<Vec<u8>>()).unwrap();
        write_ppm(dir.path().join("a.ppm"), &img).unwrap();
        assert_eq!(read_ppm(dir.path().join("a.ppm")).unwrap(), img);
        let mask = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        write_pgm(dir.path().join("m.pgm"), &mask).unwrap();
        assert_eq!(read_pgm(dir.path().join("m.pgm")).unwrap(), mask);

        fs::write(dir.path().join("bad.ppm"), b"P3\n1 1\n255\n000").unwrap();
        let err = read_ppm(dir.path().join("bad.ppm")).unwrap_err();
        assert!(err.to_string().contains("bad.ppm"));
        fs::write(dir.path().join("short.pgm"), b"P5\n4 4\n255\n\x00").unwrap();
        assert!(read_pgm(dir.path().join("short.pgm")).is_err());
        fs::write(dir.path().join("comment.pgm"), b"P5\n# hi\n1 1\n255\n\x07").unwrap();
        assert_eq!(read_pgm(dir.path().join("comment.pgm")).unwrap().get(0, 0), 7);
    }

    #[test]
    fn gen_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            count: 5,
            ..Default::default()
        };
        let manifest = gen_synthetic(&cfg, dir.path()).unwrap();
        let cats = CategoryList::from_file(dir.path().join("categories.txt")).unwrap();
        let loaded = load_dataset(&manifest, &cats).unwrap();
        assert_eq!(loaded, generate_samples(&cfg).unwrap());

        let again = tempfile::tempdir().unwrap();
        gen_synthetic(&cfg, again.path()).unwrap();
        for f in ["manifest.json", "images/img_00003.ppm", "masks/img_00003.pgm"] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn load_rejects_bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cats = CategoryList::new(["cat"]).unwrap();
        let empty = dir.path().join("empty.json");
        fs::write(&empty, "[]").unwrap();
        assert!(matches!(load_dataset(&empty, &cats), Err(CpcError::EmptyDataset)));

        let cfg = SynthConfig {
            categories: vec!["cat".into()],
            count: 1,
            ..one_cat()
        };
        let manifest = gen_synthetic(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap().replace("\"cat\"", "\"zebra\"");
        fs::write(&manifest, text).unwrap();
        let err = load_dataset(&manifest, &cats).unwrap_err();
        assert!(err.to_string().contains("zebra"));

        let missing = dir.path().join("missing.json");
        fs::write(
            &missing,
            r#"[{"image_id": "x", "image_path": "nope.ppm", "labels": ["cat"]}]"#,
        )
        .unwrap();
        assert!(load_dataset(&missing, &cats).unwrap_err().to_string().contains("nope.ppm"));
    }

    #[test]
    fn label_vector_keeps_background_on() {
        let cats = CategoryList::new(["cat", "dog"]).unwrap();
        assert_eq!(label_vector(&["dog".into()], &cats).unwrap(), vec![1.0, 0.0, 1.0]);
        assert!(label_vector(&["cow".into()], &cats).is_err());
        assert_eq!(class_names(&cats), ["background", "cat", "dog"]);
    }
}
