//! Patch-level vector-quantized image codec and reconstruction metrics.
//!
//! The encoder splits an image into square patches and maps each to its nearest codebook
//! entry; the decoder pastes entries back. Codebooks are fitted with weighted k-means over
//! the distinct patch vectors of a corpus.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// RGB image with values in [0, 1], row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize) -> Self {
        ImageGrid {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(ImageGrid {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rows `[y0, y0 + h)` as a new image.
    pub fn crop_rows(&self, y0: usize, h: usize) -> ImageGrid {
        let row = self.width * 3;
        ImageGrid {
            width: self.width,
            height: h,
            pixels: self.pixels[y0 * row..(y0 + h) * row].to_vec(),
        }
    }

    /// Reads a binary PPM (P6, maxval 255).
    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::decode_ppm(BufReader::new(f))
    }

    pub fn decode_ppm(mut r: impl BufRead) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Data("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P6" {
            return Err(Error::Data(format!("expected P6 PPM, found {}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Data(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
        }
        let mut raw = vec![0u8; width * height * 3];
        r.read_exact(&mut raw)?;
        Ok(ImageGrid {
            width,
            height,
            pixels: raw.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(&self.encode_ppm())?;
        Ok(())
    }
}

/// Grid of codebook entry indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl TokenMap {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>) -> Result<Self> {
        if rows * cols != ids.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} token map needs {} ids, got {}",
                rows * cols,
                ids.len()
            )));
        }
        Ok(TokenMap { rows, cols, ids })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub patch_size: usize,
    /// `len() * dim()` values; entry `k` occupies `[k * dim, (k + 1) * dim)`.
    pub entries: Vec<f32>,
}

impl Codebook {
    pub fn new(patch_size: usize, entries: Vec<f32>) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        let dim = patch_size * patch_size * 3;
        if entries.is_empty() || !entries.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "codebook data length {} is not a positive multiple of {dim}",
                entries.len()
            )));
        }
        Ok(Codebook {
            patch_size,
            entries,
        })
    }

    /// Uniform random entries; a stand-in when no corpus is available.
    pub fn random(size: usize, patch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = patch_size * patch_size * 3;
        Codebook {
            patch_size,
            entries: (0..size * dim).map(|_| rng.random::<f32>()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        let d = self.dim();
        &self.entries[k * d..(k + 1) * d]
    }

    /// Index of the entry nearest to `v` in squared distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (k, e) in self.entries.chunks_exact(self.dim()).enumerate() {
            let d = sq_dist(e, v);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_divisible(img: &ImageGrid, patch: usize) -> Result<()> {
    if !img.width.is_multiple_of(patch) || !img.height.is_multiple_of(patch) {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible by patch size {patch}",
            img.width, img.height
        )));
    }
    Ok(())
}

/// Patch vectors of `img` in raster order of patches. Within a patch, values run over
/// patch rows, then columns, then channels.
pub fn extract_patches(img: &ImageGrid, patch: usize) -> Result<Vec<Vec<f32>>> {
    check_divisible(img, patch)?;
    let (rows, cols) = (img.height / patch, img.width / patch);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut v = Vec::with_capacity(patch * patch * 3);
            for dy in 0..patch {
                let start = ((r * patch + dy) * img.width + c * patch) * 3;
                v.extend_from_slice(&img.pixels[start..start + patch * 3]);
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Fits a codebook with k-means++ seeding followed by `iterations` Lloyd steps.
///
/// Identical patches are merged into weighted points first, which keeps the cost
/// proportional to the number of distinct patches. An empty cluster is re-seeded with the
/// point currently farthest from its assigned centroid.
pub fn fit_codebook(
    corpus: &[ImageGrid],
    codebook_size: usize,
    patch_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<Codebook> {
    if corpus.is_empty() {
        return Err(Error::invalid("codebook corpus is empty"));
    }
    if codebook_size == 0 || patch_size == 0 {
        return Err(Error::invalid("codebook_size and patch_size must be positive"));
    }
    let dim = patch_size * patch_size * 3;

    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut points: Vec<f32> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for img in corpus {
        for p in extract_patches(img, patch_size)? {
            let key: Vec<u32> = p.iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&i) => weights[i] += 1.0,
                None => {
                    index.insert(key, weights.len());
                    points.extend_from_slice(&p);
                    weights.push(1.0);
                }
            }
        }
    }
    let n = weights.len();
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    // k-means++ seeding.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(codebook_size * dim);
    let first = weighted_pick(&weights, &mut rng);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first)) as f64).collect();
    for _ in 1..codebook_size {
        let mass: Vec<f64> = d2.iter().zip(&weights).map(|(d, w)| d * w).collect();
        let pick = if mass.iter().sum::<f64>() > 0.0 {
            weighted_pick(&mass, &mut rng)
        } else {
            rng.random_range(0..n)
        };
        let c = point(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c) as f64);
        }
        centroids.extend_from_slice(&c);
    }

    let mut cb = Codebook::new(patch_size, centroids)?;
    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        let mut dist = vec![0f32; n];
        for i in 0..n {
            assign[i] = cb.nearest(point(i));
            dist[i] = sq_dist(point(i), cb.entry(assign[i]));
        }
        let mut sums = vec![0f64; codebook_size * dim];
        let mut counts = vec![0f64; codebook_size];
        for i in 0..n {
            let k = assign[i];
            counts[k] += weights[i];
            for (s, &v) in sums[k * dim..(k + 1) * dim].iter_mut().zip(point(i)) {
                *s += weights[i] * v as f64;
            }
        }
        for k in 0..codebook_size {
            let dst = &mut cb.entries[k * dim..(k + 1) * dim];
            if counts[k] > 0.0 {
                for (e, s) in dst.iter_mut().zip(&sums[k * dim..(k + 1) * dim]) {
                    *e = ((s / counts[k]) as f32).clamp(0.0, 1.0);
                }
            } else {
                let far = (0..n)
                    .fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                dst.copy_from_slice(point(far));
                dist[far] = 0.0;
            }
        }
    }
    Ok(cb)
}

fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn encode_image(img: &ImageGrid, cb: &Codebook) -> Result<TokenMap> {
    let p = cb.patch_size;
    let patches = extract_patches(img, p)?;
    let ids = patches.iter().map(|v| cb.nearest(v) as u32).collect();
    TokenMap::new(img.height / p, img.width / p, ids)
}

pub fn decode_tokens(tm: &TokenMap, cb: &Codebook) -> Result<ImageGrid> {
    if tm.ids.len() != tm.rows * tm.cols {
        return Err(Error::invalid("token map shape does not match its id count"));
    }
    if let Some(pos) = tm.ids.iter().position(|&id| id as usize >= cb.len()) {
        return Err(Error::invalid(format!(
            "token {} at position {pos} exceeds codebook of {} entries",
            tm.ids[pos],
            cb.len()
        )));
    }
    let p = cb.patch_size;
    let mut img = ImageGrid::new(tm.cols * p, tm.rows * p);
    for r in 0..tm.rows {
        for c in 0..tm.cols {
            let e = cb.entry(tm.ids[r * tm.cols + c] as usize);
            for dy in 0..p {
                let start = ((r * p + dy) * img.width + c * p) * 3;
                img.pixels[start..start + p * 3].copy_from_slice(&e[dy * p * 3..(dy + 1) * p * 3]);
            }
        }
    }
    Ok(img)
}

fn check_same_dims(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-peak images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.pixels.is_empty() {
        return Ok(PSNR_CAP);
    }
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over non-overlapping 8x8 windows and the three channels.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.width, a.height
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in (0..=a.height - SSIM_WINDOW).step_by(SSIM_WINDOW) {
        for wx in (0..=a.width - SSIM_WINDOW).step_by(SSIM_WINDOW) {
            for ch in 0..3 {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in wy..wy + SSIM_WINDOW {
                    for x in wx..wx + SSIM_WINDOW {
                        let i = (y * a.width + x) * 3 + ch;
                        let (va, vb) = (a.pixels[i] as f64, b.pixels[i] as f64);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let var_a = (saa / n - ma * ma).max(0.0);
                let var_b = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}
