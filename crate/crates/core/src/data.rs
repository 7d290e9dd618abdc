//! Dataset handling: the driver-group label vocabulary, synthetic
//! deforestation-scene generation, directory loading, and rotated-test-set
//! construction.
//!
//! ## Directory layout
//!
//! ```text
//! images/<id>.png   3-channel 8-bit PNG
//! masks/<id>.png    1-channel 8-bit PNG, 0 = background, 255 = deforestation
//! labels.csv        header `id,category`; category is an expert category
//!                   string or a driver-group name
//! splits/train.txt, splits/val.txt, splits/test.txt
//!                   one id per line, LF-terminated
//! ```
//!
//! ## Determinism
//!
//! Generation is reproducible and platform-independent: every sample draws
//! from its own ChaCha12 stream (a counter-based stream cipher RNG) keyed by
//! `splitmix64(seed, index)`, and splits are assigned by an FNV-1a hash of
//! the sample id (70/15/15). Identical `(n, size, seed)` produce
//! byte-identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::spatial;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Label vocabulary
// ---------------------------------------------------------------------------

/// The four driver groups used as classification targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DriverLabel {
    Plantation,
    GrasslandShrubland,
    SmallholderAgriculture,
    Other,
}

impl DriverLabel {
    pub const ALL: [DriverLabel; 4] = [
        DriverLabel::Plantation,
        DriverLabel::GrasslandShrubland,
        DriverLabel::SmallholderAgriculture,
        DriverLabel::Other,
    ];

    pub fn id(self) -> usize {
        match self {
            DriverLabel::Plantation => 0,
            DriverLabel::GrasslandShrubland => 1,
            DriverLabel::SmallholderAgriculture => 2,
            DriverLabel::Other => 3,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::arg("DriverLabel::from_id", format!("id {} out of range", id)))
    }

    pub fn name(self) -> &'static str {
        match self {
            DriverLabel::Plantation => "Plantation",
            DriverLabel::GrasslandShrubland => "Grassland/shrubland",
            DriverLabel::SmallholderAgriculture => "Smallholder agriculture",
            DriverLabel::Other => "Other",
        }
    }
}

/// Published expert categories and the driver group each maps onto.
/// "Timber plantation" additionally appears in its original misspelled form.
pub const EXPERT_CATEGORIES: [(&str, DriverLabel); 12] = [
    ("Oil palm plantation", DriverLabel::Plantation),
    ("Timber plantation", DriverLabel::Plantation),
    ("Other large-scale plantations", DriverLabel::Plantation),
    ("Grassland/shrubland", DriverLabel::GrasslandShrubland),
    ("Small-scale agriculture", DriverLabel::SmallholderAgriculture),
    ("Small-scale mixed plantation", DriverLabel::SmallholderAgriculture),
    ("Small-scale oil palm plantation", DriverLabel::SmallholderAgriculture),
    ("Mining", DriverLabel::Other),
    ("Fish pond", DriverLabel::Other),
    ("Logging road", DriverLabel::Other),
    ("Secondary forest", DriverLabel::Other),
    ("Other", DriverLabel::Other),
];

/// Maps an expert category string to its driver group. Also accepts the four
/// driver-group names themselves, and the historical misspelling
/// "Timber plantaion".
pub fn map_expert_category(category: &str) -> Result<DriverLabel> {
    for (name, label) in EXPERT_CATEGORIES {
        if name == category {
            return Ok(label);
        }
    }
    if category == "Timber plantaion" {
        return Ok(DriverLabel::Plantation);
    }
    for label in DriverLabel::ALL {
        if label.name() == category {
            return Ok(label);
        }
    }
    let valid: Vec<&str> = EXPERT_CATEGORIES.iter().map(|(n, _)| *n).collect();
    Err(Error::UnknownCategory {
        got: category.to_string(),
        valid: valid.join(", "),
    })
}

// ---------------------------------------------------------------------------
// Samples and splits
// ---------------------------------------------------------------------------

/// One scene: an RGB image in `[0,1]`, a binary deforestation mask, and a
/// driver-group label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]`, values in `{0,1}`, at least one positive pixel.
    pub mask: Tensor<f32>,
    pub label: DriverLabel,
}

impl Sample {
    pub fn new(id: String, image: Tensor<f32>, mask: Tensor<f32>, label: DriverLabel) -> Result<Self> {
        let is = image.shape().to_vec();
        let ms = mask.shape().to_vec();
        if is.len() != 3 || is[0] != 3 {
            return Err(Error::DataIntegrity {
                id,
                detail: format!("image shape {:?}, expected [3,H,W]", is),
            });
        }
        if ms.len() != 3 || ms[0] != 1 || ms[1] != is[1] || ms[2] != is[2] {
            return Err(Error::DataIntegrity {
                id,
                detail: format!("mask shape {:?} does not match image {:?}", ms, is),
            });
        }
        if !mask.data().iter().any(|&v| v == 1.0) {
            return Err(Error::DataIntegrity {
                id,
                detail: "mask has no positive pixels".to_string(),
            });
        }
        Ok(Sample {
            id,
            image,
            mask,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Train/val/test id lists; disjoint, jointly covering the dataset.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn ids(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::arg(
                "DatasetSplit::ids",
                format!("unknown split `{}` (train|val|test)", other),
            )),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// 70/15/15 split by id hash. FNV mixes short strings poorly in the high
/// bits, so the digest is finalized through splitmix64 before use.
fn split_of_id(id: &str) -> &'static str {
    let u = (splitmix64(fnv1a(id.as_bytes())) >> 11) as f64 / (1u64 << 53) as f64;
    if u < 0.70 {
        "train"
    } else if u < 0.85 {
        "val"
    } else {
        "test"
    }
}

// ---------------------------------------------------------------------------
// PNG helpers
// ---------------------------------------------------------------------------

/// Saves a `[3,H,W]` image in `[0,1]` as an 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(data.len(), 3 * h * w);
    let mut buf = vec![0u8; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = data[ch * h * w + r * w + c];
                buf[(r * w + c) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Saves a `[1,H,W]` binary mask (`{0,1}`) as an 8-bit gray PNG with values
/// in `{0, 255}`.
pub fn save_mask_png(path: &Path, data: &[f32], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(data.len(), h * w);
    let buf: Vec<u8> = data.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Loads a 3-channel 8-bit PNG into `([3,H,W] in [0,1], h, w)`.
pub fn load_rgb_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(i) => i,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                detail: format!("expected 3-channel 8-bit PNG, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                data[ch * h * w + r * w + c] = raw[(r * w + c) * 3 + ch] as f32 / 255.0;
            }
        }
    }
    Ok((data, h, w))
}

/// Loads a 1-channel 8-bit PNG mask with values in `{0, 255}` into
/// `([H*W] in {0,1}, h, w)`.
pub fn load_mask_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(i) => i,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                detail: format!("expected 1-channel 8-bit PNG, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let raw = gray.into_raw();
    let mut data = vec![0.0f32; h * w];
    for (d, &b) in data.iter_mut().zip(&raw) {
        *d = match b {
            0 => 0.0,
            255 => 1.0,
            other => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    detail: format!("mask value {} is neither 0 nor 255", other),
                })
            }
        };
    }
    Ok((data, h, w))
}

// ---------------------------------------------------------------------------
// Synthetic scene generation
// ---------------------------------------------------------------------------

struct Painter {
    size: usize,
    image: Vec<f32>,
    mask: Vec<bool>,
}

impl Painter {
    fn paint(&mut self, r: usize, c: usize, color: [f32; 3]) {
        let hw = self.size * self.size;
        for ch in 0..3 {
            self.image[ch * hw + r * self.size + c] = color[ch];
        }
        self.mask[r * self.size + c] = true;
    }
}

fn jitter(rng: &mut ChaCha12Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let mut out = base;
    for v in out.iter_mut() {
        *v += (rng.gen::<f32>() - 0.5) * 2.0 * amount;
    }
    out
}

/// Correlated "forest" background: a coarse random grid bilinearly upsampled
/// plus fine per-pixel noise, over a dark green base.
fn paint_background(p: &mut Painter, rng: &mut ChaCha12Rng) {
    let size = p.size;
    let grid = 9usize;
    let coarse: Vec<f32> = (0..grid * grid).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
    let base = [0.13f32, 0.30, 0.16];
    let amp = [0.035f32, 0.055, 0.040];
    let hw = size * size;
    let step = (size - 1) as f32 / (grid - 1) as f32;
    for r in 0..size {
        for c in 0..size {
            let gr = r as f32 / step;
            let gc = c as f32 / step;
            let (r0, c0) = (gr.floor() as usize, gc.floor() as usize);
            let (fr, fc) = (gr - r0 as f32, gc - c0 as f32);
            let r1 = (r0 + 1).min(grid - 1);
            let c1 = (c0 + 1).min(grid - 1);
            let v = coarse[r0 * grid + c0] * (1.0 - fr) * (1.0 - fc)
                + coarse[r0 * grid + c1] * (1.0 - fr) * fc
                + coarse[r1 * grid + c0] * fr * (1.0 - fc)
                + coarse[r1 * grid + c1] * fr * fc;
            let fine = rng.gen::<f32>() * 2.0 - 1.0;
            for ch in 0..3 {
                p.image[ch * hw + r * size + c] =
                    (base[ch] + amp[ch] * v + 0.02 * fine).clamp(0.0, 1.0);
            }
        }
    }
}

/// Paints a rotated rectangle; `texture(u)` picks the color from the local
/// coordinate along the rectangle's width so the texture rotates with it.
#[allow(clippy::too_many_arguments)]
fn paint_rect(
    p: &mut Painter,
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    theta: f64,
    mut texture: impl FnMut(f64, f64) -> [f32; 3],
) {
    let size = p.size;
    let (sin, cos) = theta.sin_cos();
    for r in 0..size {
        for c in 0..size {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // Rotate into the rectangle's local frame.
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if u.abs() <= half_w && v.abs() <= half_h {
                let color = texture(u, v);
                p.paint(r, c, color);
            }
        }
    }
}

fn paint_disc(p: &mut Painter, cy: f64, cx: f64, radius: f64, color: [f32; 3]) {
    let size = p.size;
    for r in 0..size {
        for c in 0..size {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            if dy * dy + dx * dx <= radius * radius {
                p.paint(r, c, color);
            }
        }
    }
}

/// Plantation: one large rotated rectangle with periodic row texture.
fn paint_plantation(p: &mut Painter, rng: &mut ChaCha12Rng) {
    let s = p.size as f64;
    let theta = rng.gen::<f64>() * std::f64::consts::PI;
    let half_w = s * (0.20 + 0.10 * rng.gen::<f64>());
    let half_h = s * (0.13 + 0.09 * rng.gen::<f64>());
    let max_r = s / 2.0 - 3.0;
    let diag = (half_w * half_w + half_h * half_h).sqrt();
    let scale = if diag > max_r * 0.9 { max_r * 0.9 / diag } else { 1.0 };
    let (half_w, half_h) = (half_w * scale, half_h * scale);
    let off = (max_r - (half_w * half_w + half_h * half_h).sqrt()).max(0.0);
    let off_angle = rng.gen::<f64>() * std::f64::consts::TAU;
    let cy = (s - 1.0) / 2.0 + off * rng.gen::<f64>() * off_angle.sin();
    let cx = (s - 1.0) / 2.0 + off * rng.gen::<f64>() * off_angle.cos();
    let period = 3.0 + 2.0 * rng.gen::<f64>();
    let light = jitter(rng, [0.46, 0.33, 0.19], 0.03);
    let dark = jitter(rng, [0.34, 0.24, 0.13], 0.03);
    paint_rect(p, cy, cx, half_h, half_w, theta, |u, _v| {
        let row = (u / period).rem_euclid(2.0);
        if row < 1.0 {
            light
        } else {
            dark
        }
    });
}

/// Grassland/shrubland: one smooth irregular blob (random star-convex shape).
fn paint_grassland(p: &mut Painter, rng: &mut ChaCha12Rng) {
    let s = p.size as f64;
    let max_r = s / 2.0 - 3.0;
    let r0 = s * (0.18 + 0.08 * rng.gen::<f64>());
    let mut amps = [0.0f64; 4];
    let mut phases = [0.0f64; 4];
    for j in 0..4 {
        amps[j] = rng.gen::<f64>() * 0.22 / (j + 1) as f64;
        phases[j] = rng.gen::<f64>() * std::f64::consts::TAU;
    }
    let peak = r0 * (1.0 + amps.iter().sum::<f64>());
    let scale = if peak > max_r { max_r / peak } else { 1.0 };
    let cy = (s - 1.0) / 2.0 + (rng.gen::<f64>() - 0.5) * 4.0;
    let cx = (s - 1.0) / 2.0 + (rng.gen::<f64>() - 0.5) * 4.0;
    let base = jitter(rng, [0.52, 0.50, 0.24], 0.04);
    let size = p.size;
    for r in 0..size {
        for c in 0..size {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let dist = (dy * dy + dx * dx).sqrt();
            let phi = dy.atan2(dx);
            let mut radius = r0;
            for j in 0..4 {
                radius += r0 * amps[j] * ((j + 1) as f64 * phi + phases[j]).cos();
            }
            if dist <= radius * scale {
                let shade = 1.0 - 0.15 * (dist / (radius * scale + 1e-9)) as f32;
                p.paint(r, c, [base[0] * shade, base[1] * shade, base[2] * shade]);
            }
        }
    }
}

/// Smallholder agriculture: several small scattered patches.
fn paint_smallholder(p: &mut Painter, rng: &mut ChaCha12Rng) {
    let s = p.size as f64;
    let max_r = s / 2.0 - 8.0;
    let count = 3 + (rng.gen::<f64>() * 4.0) as usize; // 3..=6
    for _ in 0..count {
        let ang = rng.gen::<f64>() * std::f64::consts::TAU;
        let dist = rng.gen::<f64>().sqrt() * max_r;
        let cy = (s - 1.0) / 2.0 + dist * ang.sin();
        let cx = (s - 1.0) / 2.0 + dist * ang.cos();
        let color = jitter(rng, [0.50, 0.40, 0.24], 0.06);
        if rng.gen::<f64>() < 0.5 {
            let radius = 2.5 + 3.0 * rng.gen::<f64>();
            paint_disc(p, cy, cx, radius, color);
        } else {
            let half_w = 2.0 + 3.0 * rng.gen::<f64>();
            let half_h = 2.0 + 3.0 * rng.gen::<f64>();
            let theta = rng.gen::<f64>() * std::f64::consts::PI;
            paint_rect(p, cy, cx, half_h, half_w, theta, |_, _| color);
        }
    }
}

/// Other: a thin road-like stroke or a small dark disc.
fn paint_other(p: &mut Painter, rng: &mut ChaCha12Rng) {
    let s = p.size as f64;
    let max_r = s / 2.0 - 3.0;
    if rng.gen::<f64>() < 0.5 {
        // Road: pixels within `width` of a line through a point near center.
        let theta = rng.gen::<f64>() * std::f64::consts::PI;
        let (sin, cos) = theta.sin_cos();
        let off = (rng.gen::<f64>() - 0.5) * 0.5 * max_r;
        let cy = (s - 1.0) / 2.0 + off * cos;
        let cx = (s - 1.0) / 2.0 - off * sin;
        let width = 1.0 + rng.gen::<f64>();
        let color = jitter(rng, [0.36, 0.34, 0.30], 0.03);
        let size = p.size;
        let c0y = (s - 1.0) / 2.0;
        let c0x = (s - 1.0) / 2.0;
        for r in 0..size {
            for c in 0..size {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                // Distance from the line with direction (cos, sin).
                let d = (dy * cos - dx * sin).abs();
                let from_center = ((r as f64 - c0y).powi(2) + (c as f64 - c0x).powi(2)).sqrt();
                if d <= width && from_center <= max_r {
                    p.paint(r, c, color);
                }
            }
        }
    } else {
        let radius = 3.0 + 3.0 * rng.gen::<f64>();
        let ang = rng.gen::<f64>() * std::f64::consts::TAU;
        let dist = rng.gen::<f64>() * (max_r - radius - 2.0).max(0.0);
        let cy = (s - 1.0) / 2.0 + dist * ang.sin();
        let cx = (s - 1.0) / 2.0 + dist * ang.cos();
        paint_disc(p, cy, cx, radius, jitter(rng, [0.25, 0.23, 0.21], 0.03));
    }
}

/// Generates one synthetic sample. Class geometry: Plantation = striped
/// rotated rectangle; Grassland/shrubland = smooth blob; Smallholder = 3-6
/// small patches; Other = thin stroke or small dark disc. All geometry stays
/// within the inscribed disc so rotations about the center keep the mask in
/// frame.
fn generate_sample(idx: usize, size: usize, seed: u64) -> Sample {
    let label = DriverLabel::ALL[idx % 4];
    let id = format!("s{:05}", idx);
    let stream = splitmix64(seed ^ splitmix64(idx as u64));
    let mut rng = ChaCha12Rng::seed_from_u64(stream);
    let mut p = Painter {
        size,
        image: vec![0.0; 3 * size * size],
        mask: vec![false; size * size],
    };
    paint_background(&mut p, &mut rng);
    match label {
        DriverLabel::Plantation => paint_plantation(&mut p, &mut rng),
        DriverLabel::GrasslandShrubland => paint_grassland(&mut p, &mut rng),
        DriverLabel::SmallholderAgriculture => paint_smallholder(&mut p, &mut rng),
        DriverLabel::Other => paint_other(&mut p, &mut rng),
    }
    if !p.mask.iter().any(|&m| m) {
        // Constructively unreachable; keep the sample invariant regardless.
        let mid = size / 2;
        p.paint(mid, mid, [0.4, 0.35, 0.25]);
    }
    let image = Tensor::from_vec(&[3, size, size], p.image).expect("sized buffer");
    let mask_f: Vec<f32> = p.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(&[1, size, size], mask_f).expect("sized buffer");
    Sample::new(id, image, mask, label).expect("generator satisfies sample invariants")
}

/// Picks a deterministic expert-category string for a label.
fn expert_string_for(label: DriverLabel, rng: &mut ChaCha12Rng) -> &'static str {
    let options: Vec<&'static str> = EXPERT_CATEGORIES
        .iter()
        .filter(|(_, l)| *l == label)
        .map(|(n, _)| *n)
        .collect();
    options[rng.gen_range(0..options.len())]
}

/// Generates `n` samples (class-balanced within one) of `size x size` pixels
/// into `out_dir`, writing images, masks, labels, and split files.
pub fn generate_synthetic(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<()> {
    if n < 4 {
        return Err(Error::arg("generate_synthetic", "need n >= 4"));
    }
    if size < 32 {
        return Err(Error::arg("generate_synthetic", "need size >= 32"));
    }
    for sub in ["images", "masks", "splits"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
    }
    let mut labels_csv = String::from("id,category\n");
    let mut splits: [(String, Vec<String>); 3] = [
        ("train".to_string(), Vec::new()),
        ("val".to_string(), Vec::new()),
        ("test".to_string(), Vec::new()),
    ];
    let mut label_rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ 0x6c61626c));
    for idx in 0..n {
        let sample = generate_sample(idx, size, seed);
        let img_path = out_dir.join("images").join(format!("{}.png", sample.id));
        save_rgb_png(&img_path, &sample.image.data(), size, size)?;
        let mask_path = out_dir.join("masks").join(format!("{}.png", sample.id));
        save_mask_png(&mask_path, &sample.mask.data(), size, size)?;
        let category = expert_string_for(sample.label, &mut label_rng);
        labels_csv.push_str(&format!("{},{}\n", sample.id, category));
        let slot = match split_of_id(&sample.id) {
            "train" => 0,
            "val" => 1,
            _ => 2,
        };
        splits[slot].1.push(sample.id.clone());
    }
    let labels_path = out_dir.join("labels.csv");
    fs::write(&labels_path, labels_csv).map_err(|e| Error::io(labels_path.clone(), e))?;
    for (name, ids) in &splits {
        let path = out_dir.join("splits").join(format!("{}.txt", name));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(path.clone(), e))?;
        for id in ids {
            writeln!(f, "{}", id).map_err(|e| Error::io(path.clone(), e))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn read_split_file(path: &PathBuf) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}

/// Loads a dataset directory, validating every sample invariant and the
/// split structure. Errors name the offending sample id.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, DatasetSplit)> {
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(labels_path.clone(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "id,category" => {}
        other => {
            return Err(Error::arg(
                "load_dataset",
                format!("labels.csv must start with `id,category`, got {:?}", other),
            ))
        }
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, category) = line.split_once(',').ok_or_else(|| {
            Error::arg(
                "load_dataset",
                format!("labels.csv line {}: expected `id,category`", lineno + 2),
            )
        })?;
        let id = id.trim().to_string();
        let label = map_expert_category(category.trim())?;
        let img_path = dir.join("images").join(format!("{}.png", id));
        if !img_path.exists() {
            return Err(Error::DataIntegrity {
                id,
                detail: format!("missing image file {}", img_path.display()),
            });
        }
        let (img, h, w) = load_rgb_png(&img_path)?;
        let mask_path = dir.join("masks").join(format!("{}.png", id));
        if !mask_path.exists() {
            return Err(Error::DataIntegrity {
                id,
                detail: format!("missing mask file {}", mask_path.display()),
            });
        }
        let (mask, mh, mw) = load_mask_png(&mask_path)?;
        if (mh, mw) != (h, w) {
            return Err(Error::DataIntegrity {
                id,
                detail: format!("mask is {}x{}, image is {}x{}", mh, mw, h, w),
            });
        }
        let image = Tensor::from_vec(&[3, h, w], img).expect("sized");
        let mask = Tensor::from_vec(&[1, h, w], mask).expect("sized");
        samples.push(Sample::new(id, image, mask, label)?);
    }
    if samples.is_empty() {
        return Err(Error::arg("load_dataset", "dataset contains no samples"));
    }

    let split = DatasetSplit {
        train: read_split_file(&dir.join("splits").join("train.txt"))?,
        val: read_split_file(&dir.join("splits").join("val.txt"))?,
        test: read_split_file(&dir.join("splits").join("test.txt"))?,
    };
    let mut seen = std::collections::HashSet::new();
    for (name, ids) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        for id in ids {
            if !samples.iter().any(|s| &s.id == id) {
                return Err(Error::DataIntegrity {
                    id: id.clone(),
                    detail: format!("listed in splits/{}.txt but absent from labels.csv", name),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DataIntegrity {
                    id: id.clone(),
                    detail: "appears in more than one split".to_string(),
                });
            }
        }
    }
    for s in &samples {
        if !seen.contains(&s.id) {
            return Err(Error::DataIntegrity {
                id: s.id.clone(),
                detail: "not assigned to any split".to_string(),
            });
        }
    }
    Ok((samples, split))
}

// ---------------------------------------------------------------------------
// Rotated test sets
// ---------------------------------------------------------------------------

/// How the rotated evaluation set is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationMode {
    /// Exact multiples of 90 degrees, drawn independently per sample.
    Quarter,
    /// Uniform angles; bilinear image resampling, nearest-neighbor masks.
    Arbitrary,
}

/// Exact quarter-turn rotation of one sample (image and mask together).
pub fn rotate_sample_quarter(sample: &Sample, q: usize) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let img = sample.image.data();
    let hw = h * w;
    let mut planes: Vec<Vec<f32>> = Vec::with_capacity(3);
    let (mut nh, mut nw) = (h, w);
    for ch in 0..3 {
        let (rot, rh, rw) = spatial::rotate_quarter(&img[ch * hw..(ch + 1) * hw], h, w, q);
        nh = rh;
        nw = rw;
        planes.push(rot);
    }
    let image = Tensor::from_vec(&[3, nh, nw], planes.concat()).expect("sized");
    let (mrot, _, _) = spatial::rotate_quarter(&sample.mask.data(), h, w, q);
    let mask = Tensor::from_vec(&[1, nh, nw], mrot).expect("sized");
    Sample::new(sample.id.clone(), image, mask, sample.label)
        .expect("rotation preserves sample invariants")
}

fn rotate_sample_arbitrary(sample: &Sample, angle: f64) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let img = sample.image.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(3 * hw);
    for ch in 0..3 {
        out.extend(spatial::rotate_bilinear(&img[ch * hw..(ch + 1) * hw], h, w, angle));
    }
    let image = Tensor::from_vec(&[3, h, w], out).expect("sized");
    let mrot = spatial::rotate_nearest(&sample.mask.data(), h, w, angle);
    let mask = Tensor::from_vec(&[1, h, w], mrot).expect("sized");
    Sample::new(sample.id.clone(), image, mask, sample.label)
}

/// Rotates every sample by an independently drawn angle; labels unchanged.
pub fn rotated_test_set(samples: &[Sample], mode: RotationMode, seed: u64) -> Result<Vec<Sample>> {
    if samples.is_empty() {
        return Err(Error::arg("rotated_test_set", "empty input"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| match mode {
            RotationMode::Quarter => {
                let q = rng.gen_range(0..4usize);
                Ok(rotate_sample_quarter(s, q))
            }
            RotationMode::Arbitrary => {
                let angle = rng.gen::<f64>() * std::f64::consts::TAU;
                rotate_sample_arbitrary(s, angle)
            }
        })
        .collect()
}

/// Stacks samples into a `[B,3,H,W]` batch plus labels (all samples must
/// share one size).
pub fn batch_images(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::arg("batch_images", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::DataIntegrity {
                id: s.id.clone(),
                detail: format!(
                    "batch mixes sizes: {}x{} vs {}x{}",
                    s.height(),
                    s.width(),
                    h,
                    w
                ),
            });
        }
        data.extend_from_slice(&s.image.data());
        labels.push(s.label.id());
    }
    let batch = Tensor::from_vec(&[samples.len(), 3, h, w], data).expect("sized");
    Ok((batch, labels))
}

/// Stacks masks into `[B,1,H,W]`.
pub fn batch_masks(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::arg("batch_masks", "empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend_from_slice(&s.mask.data());
    }
    Ok(Tensor::from_vec(&[samples.len(), 1, h, w], data).expect("sized"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_category_mapping_matches_published_table() {
        assert_eq!(
            map_expert_category("Oil palm plantation").unwrap(),
            DriverLabel::Plantation
        );
        assert_eq!(
            map_expert_category("Grassland/shrubland").unwrap(),
            DriverLabel::GrasslandShrubland
        );
        assert_eq!(map_expert_category("Logging road").unwrap(), DriverLabel::Other);
        // Every published string maps to its group; the misspelled variant
        // is accepted as an alias.
        for (name, label) in EXPERT_CATEGORIES {
            assert_eq!(map_expert_category(name).unwrap(), label);
        }
        assert_eq!(
            map_expert_category("Timber plantaion").unwrap(),
            DriverLabel::Plantation
        );
        // Driver-group names are accepted directly.
        for label in DriverLabel::ALL {
            assert_eq!(map_expert_category(label.name()).unwrap(), label);
        }
    }

    #[test]
    fn unknown_category_lists_valid_strings() {
        let err = map_expert_category("Parking lot").unwrap_err();
        match err {
            Error::UnknownCategory { got, valid } => {
                assert_eq!(got, "Parking lot");
                assert!(valid.contains("Oil palm plantation"));
                assert!(valid.contains("Secondary forest"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn generated_masks_are_nonempty_and_balanced() {
        for idx in 0..8 {
            let s = generate_sample(idx, 32, 99);
            let positives = s.mask.data().iter().filter(|&&v| v == 1.0).count();
            assert!(positives >= 1, "sample {} has empty mask", idx);
            assert_eq!(s.label, DriverLabel::ALL[idx % 4]);
        }
    }

    #[test]
    fn quarter_rotation_preserves_mask_pixel_count() {
        let s = generate_sample(0, 32, 5);
        let count = |m: &Tensor<f32>| m.data().iter().filter(|&&v| v == 1.0).count();
        for q in 0..4 {
            let r = rotate_sample_quarter(&s, q);
            assert_eq!(count(&s.mask), count(&r.mask));
        }
    }

    #[test]
    fn quarter_rotation_round_trips_bitwise() {
        let s = generate_sample(3, 32, 5);
        for q in 0..4usize {
            let there = rotate_sample_quarter(&s, q);
            let back = rotate_sample_quarter(&there, (4 - q) % 4);
            assert_eq!(*back.image.data(), *s.image.data());
            assert_eq!(*back.mask.data(), *s.mask.data());
        }
    }

    #[test]
    fn zero_quarter_rotation_is_identity() {
        let s = generate_sample(1, 32, 8);
        let r = rotate_sample_quarter(&s, 0);
        assert_eq!(*r.image.data(), *s.image.data());
        assert_eq!(*r.mask.data(), *s.mask.data());
    }

    #[test]
    fn split_hash_is_stable() {
        // Pin a few hash assignments so the split function cannot drift.
        assert_eq!(split_of_id("s00000"), split_of_id("s00000"));
        let (mut tr, mut va, mut te) = (0, 0, 0);
        for i in 0..1000 {
            match split_of_id(&format!("s{:05}", i)) {
                "train" => tr += 1,
                "val" => va += 1,
                _ => te += 1,
            }
        }
        assert!(tr > 600 && tr < 800, "train fraction off: {}", tr);
        assert!(va > 80 && va < 220, "val fraction off: {}", va);
        assert!(te > 80 && te < 220, "test fraction off: {}", te);
    }
}
