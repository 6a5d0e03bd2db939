//! Synthetic atmospheric degradation, `y = D x + n`.
//!
//! `D` is a spatially variant blur: each tile of a frame draws a PSF from a
//! bank and a random resize factor, and neighbouring tiles are blended
//! bilinearly so there are no seams. `n` is clamped Gaussian noise. Every
//! frame owns an RNG stream keyed by `(seed, frame_index)`, so synthesis is
//! order independent.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::reflect_index;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the unit sum of a PSF.
pub const PSF_SUM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_BANK_SIZE: usize = 9;
pub const GENERATED_PSF_SIDE: usize = 15;

/// Normalized, non-negative blur kernel with odd side lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    height: usize,
    width: usize,
    kernel: Vec<f64>,
}

impl Psf {
    pub fn new(height: usize, width: usize, kernel: Vec<f64>) -> Result<Self> {
        if height % 2 == 0 || width % 2 == 0 {
            return Err(Error::Config(format!("PSF sides must be odd, got {height}x{width}")));
        }
        if kernel.len() != height * width {
            return Err(Error::shape(
                "psf",
                format!("{} values for {height}x{width}", kernel.len()),
            ));
        }
        if let Some(v) = kernel.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Config(format!(
                "PSF entries must be finite and non-negative, found {v}"
            )));
        }
        let sum: f64 = kernel.iter().sum();
        if (sum - 1.0).abs() > PSF_SUM_TOLERANCE {
            return Err(Error::Config(format!("PSF sums to {sum}, expected 1")));
        }
        Ok(Psf { height, width, kernel })
    }

    /// Scales a non-negative array to unit sum.
    pub fn normalized(height: usize, width: usize, mut kernel: Vec<f64>) -> Result<Self> {
        let sum: f64 = kernel.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Config("PSF has no mass".into()));
        }
        kernel.iter_mut().for_each(|v| *v /= sum);
        Psf::new(height, width, kernel)
    }

    pub fn delta() -> Self {
        Psf {
            height: 1,
            width: 1,
            kernel: vec![1.0],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn sum(&self) -> f64 {
        self.kernel.iter().sum()
    }

    /// Intensity-weighted centre `(row, col)`.
    pub fn centroid(&self) -> (f64, f64) {
        let (mut r, mut c) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.kernel[y * self.width + x];
                r += v * y as f64;
                c += v * x as f64;
            }
        }
        let s = self.sum();
        (r / s, c / s)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("psf {} {}\n", self.height, self.width);
        for row in self.kernel.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Config("empty PSF file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (h, w) = match parts.as_slice() {
            ["psf", h, w] => (
                h.parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad PSF height: {e}")))?,
                w.parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad PSF width: {e}")))?,
            ),
            _ => {
                return Err(Error::Config(format!(
                    "bad PSF header {header:?}, expected \"psf <h> <w>\""
                )))
            }
        };
        let mut kernel = Vec::with_capacity(h * w);
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad PSF value {t:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != w {
                return Err(Error::Config(format!(
                    "PSF row {i} has {} values, expected {w}",
                    row.len()
                )));
            }
            kernel.extend(row);
        }
        if kernel.len() != h * w {
            return Err(Error::Config(format!(
                "PSF has {} rows, expected {h}",
                kernel.len() / w.max(1)
            )));
        }
        Psf::new(h, w, kernel)
    }
}

/// Where a bank came from.
#[derive(Debug, Clone, PartialEq)]
pub enum PsfSource {
    Generated { seed: u64 },
    Loaded(PathBuf),
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsfBank {
    pub psfs: Vec<Psf>,
    pub source: PsfSource,
}

impl PsfBank {
    pub fn new(psfs: Vec<Psf>) -> Result<Self> {
        if psfs.is_empty() {
            return Err(Error::Config("PSF bank is empty".into()));
        }
        Ok(PsfBank {
            psfs,
            source: PsfSource::Custom,
        })
    }

    /// Bank whose every entry is the identity kernel.
    pub fn delta(count: usize) -> Self {
        PsfBank {
            psfs: vec![Psf::delta(); count.max(1)],
            source: PsfSource::Custom,
        }
    }

    pub fn len(&self) -> usize {
        self.psfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psfs.is_empty()
    }

    /// Writes `psf_0.txt`, `psf_1.txt`, ... into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, p) in self.psfs.iter().enumerate() {
            let path = dir.join(format!("psf_{i}.txt"));
            fs::write(&path, p.to_text()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads `psf_0.txt` upwards until the first missing index.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut psfs = Vec::new();
        loop {
            let path = dir.join(format!("psf_{}.txt", psfs.len()));
            if !path.exists() {
                break;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            psfs.push(Psf::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?);
        }
        if psfs.is_empty() {
            return Err(Error::Config(format!("no psf_0.txt found in {}", dir.display())));
        }
        Ok(PsfBank {
            psfs,
            source: PsfSource::Loaded(dir.to_path_buf()),
        })
    }
}

/// Seeded bank of anisotropic Gaussian PSFs on a 15x15 support.
///
/// Each kernel has a random orientation, a minor-axis sigma in
/// `[0.6, 1.2]`, an axis ratio in `[1, 3]` and a multiplicative
/// perturbation by box-smoothed uniform noise.
pub fn generate_psf_bank(seed: u64) -> PsfBank {
    generate_psf_bank_sized(seed, DEFAULT_BANK_SIZE)
}

pub fn generate_psf_bank_sized(seed: u64, count: usize) -> PsfBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = GENERATED_PSF_SIDE;
    let c = (n / 2) as f64;
    let psfs = (0..count.max(1))
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let minor = rng.random_range(0.6..1.2);
            let ratio = rng.random_range(1.0..3.0);
            let major = minor * ratio;
            let (st, ct) = theta.sin_cos();
            let noise: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut k = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 - c, x as f64 - c);
                    let u = ct * dx + st * dy;
                    let v = -st * dx + ct * dy;
                    let g = (-0.5 * (u * u / (major * major) + v * v / (minor * minor))).exp();
                    let mut s = 0.0;
                    let mut cnt = 0.0;
                    for ny in y.saturating_sub(1)..(y + 2).min(n) {
                        for nx in x.saturating_sub(1)..(x + 2).min(n) {
                            s += noise[ny * n + nx];
                            cnt += 1.0;
                        }
                    }
                    k[y * n + x] = g * (1.0 + 0.3 * s / cnt);
                }
            }
            Psf::normalized(n, n, k).expect("gaussian has mass")
        })
        .collect();
    PsfBank {
        psfs,
        source: PsfSource::Generated { seed },
    }
}

/// Odd side nearest to `side * scale`.
fn scaled_side(side: usize, scale: f64) -> Result<usize> {
    let target = side as f64 * scale;
    let mut s = target.round();
    if s < 1.0 {
        return Err(Error::Config(format!("resizing side {side} by {scale} leaves nothing")));
    }
    if s as usize % 2 == 0 {
        s += if target < s { -1.0 } else { 1.0 };
    }
    Ok(s as usize)
}

/// Bilinear, centre-aligned rescale to `round(side * scale)` (made odd),
/// renormalized to unit sum.
pub fn resize_psf(psf: &Psf, scale: f64) -> Result<Psf> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("PSF scale must be positive, got {scale}")));
    }
    let (h, w) = (psf.height, psf.width);
    let (oh, ow) = (scaled_side(h, scale)?, scaled_side(w, scale)?);
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (ocy, ocx) = ((oh - 1) as f64 / 2.0, (ow - 1) as f64 / 2.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            psf.kernel[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = (oy as f64 - ocy) / scale + cy;
        let y0 = sy.floor();
        let fy = sy - y0;
        for ox in 0..ow {
            let sx = (ox as f64 - ocx) / scale + cx;
            let x0 = sx.floor();
            let fx = sx - x0;
            let (y0, x0) = (y0 as isize, x0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    Psf::normalized(oh, ow, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub psf_scale_range: (f64, f64),
    pub noise_sigma_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tile_rows: 4,
            tile_cols: 4,
            psf_scale_range: (0.5, 1.5),
            noise_sigma_range: (0.0, 0.02),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(Error::Config("tile grid must be at least 1x1".into()));
        }
        let (lo, hi) = self.psf_scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid PSF scale range [{lo}, {hi}]")));
        }
        let (lo, hi) = self.noise_sigma_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid noise sigma range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

fn draw_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// The PSF drawn for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileDraw {
    pub psf_index: usize,
    pub scale: f64,
    pub psf: Psf,
}

/// Blurs `frame` (`[C, H, W]`) with one drawn PSF per tile, blending the
/// four nearest tile results bilinearly at every pixel. Returns the frame
/// and the draws in row-major tile order.
pub fn spatially_variant_blur(
    frame: &Tensor<f32>,
    bank: &PsfBank,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<TileDraw>)> {
    config.validate()?;
    if frame.shape().len() != 3 {
        return Err(Error::shape(
            "spatially_variant_blur",
            format!("expected [C, H, W], got {:?}", frame.shape()),
        ));
    }
    let (c, h, w) = frame.chw();
    if config.tile_rows > h || config.tile_cols > w {
        return Err(Error::shape(
            "spatially_variant_blur",
            format!(
                "{}x{} tiles do not fit a {h}x{w} frame",
                config.tile_rows, config.tile_cols
            ),
        ));
    }
    if bank.is_empty() {
        return Err(Error::Config("PSF bank is empty".into()));
    }
    let mut draws = Vec::with_capacity(config.tile_rows * config.tile_cols);
    for _ in 0..config.tile_rows * config.tile_cols {
        let psf_index = rng.random_range(0..bank.len());
        let scale = draw_in(rng, config.psf_scale_range);
        let psf = resize_psf(&bank.psfs[psf_index], scale)?;
        if (psf.sum() - 1.0).abs() > PSF_SUM_TOLERANCE {
            return Err(Error::Config(format!("resized PSF sums to {}", psf.sum())));
        }
        draws.push(TileDraw { psf_index, scale, psf });
    }

    // tile coordinate of every row and column: (lower index, upper index, fraction)
    let axis = |n: usize, tiles: usize| -> Vec<(usize, usize, f32)> {
        let size = n as f64 / tiles as f64;
        (0..n)
            .map(|p| {
                let t = ((p as f64 + 0.5) / size - 0.5).clamp(0.0, (tiles - 1) as f64);
                let lo = t.floor() as usize;
                let hi = (lo + 1).min(tiles - 1);
                (lo, hi, (t - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(h, config.tile_rows);
    let cols = axis(w, config.tile_cols);

    let apply = |plane: &[f32], psf: &Psf, y: usize, x: usize| -> f32 {
        let (ph, pw) = (psf.height as isize, psf.width as isize);
        let mut acc = 0.0f64;
        for ky in 0..ph {
            let sy = reflect_index(y as isize + ky - ph / 2, h);
            let row = &plane[sy * w..(sy + 1) * w];
            let krow = &psf.kernel[(ky * pw) as usize..((ky + 1) * pw) as usize];
            for (kx, k) in krow.iter().enumerate() {
                let sx = reflect_index(x as isize + kx as isize - pw / 2, w);
                acc += k * row[sx] as f64;
            }
        }
        acc as f32
    };

    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = frame.plane(ch);
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let (r0, r1, fy) = rows[y];
            for x in 0..w {
                let (c0, c1, fx) = cols[x];
                let tile = |r: usize, cc: usize| &draws[r * config.tile_cols + cc].psf;
                let a = apply(plane, tile(r0, c0), y, x);
                let b = if c1 != c0 && fx != 0.0 {
                    apply(plane, tile(r0, c1), y, x)
                } else {
                    a
                };
                let top = a + fx * (b - a);
                let bottom = if r1 != r0 && fy != 0.0 {
                    let cc = apply(plane, tile(r1, c0), y, x);
                    let d = if c1 != c0 && fx != 0.0 {
                        apply(plane, tile(r1, c1), y, x)
                    } else {
                        cc
                    };
                    cc + fx * (d - cc)
                } else {
                    top
                };
                dst[y * w + x] = top + fy * (bottom - top);
            }
        }
    }
    Ok((out, draws))
}

/// Adds `N(0, sigma^2)` to every element and clamps to `[0, 1]`.
pub fn add_gaussian_noise(frame: &Tensor<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(frame.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = frame.clone();
    for v in out.data_mut() {
        *v = ((*v as f64 + normal.sample(rng)) as f32).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// RNG stream owned by one frame.
pub fn frame_rng(seed: u64, frame_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index as u64);
    rng
}

/// Degrades one frame: blur, then noise with a drawn sigma.
pub fn degrade_frame(
    frame: &Tensor<f32>,
    frame_index: usize,
    bank: &PsfBank,
    config: &SynthConfig,
) -> Result<Tensor<f32>> {
    let mut rng = frame_rng(config.seed, frame_index);
    let (blurred, _) = spatially_variant_blur(frame, bank, config, &mut rng)?;
    let sigma = draw_in(&mut rng, config.noise_sigma_range);
    add_gaussian_noise(&blurred, sigma, &mut rng)
}

/// Degrades every frame independently, in parallel.
pub fn synthesize_sequence(clean: &[Tensor<f32>], bank: &PsfBank, config: &SynthConfig) -> Result<Vec<Tensor<f32>>> {
    if clean.is_empty() {
        return Err(Error::Config("cannot synthesize an empty video".into()));
    }
    config.validate()?;
    clean
        .par_iter()
        .enumerate()
        .map(|(i, f)| degrade_frame(f, i, bank, config))
        .collect()
}

/// Procedural clean video: smooth colour gradients, gratings and a few
/// soft-edged discs drifting at constant sub-pixel velocity. Frames are
/// `[3, height, width]` in `[0, 1]`.
pub fn procedural_scene(width: usize, height: usize, frames: usize, seed: u64) -> Vec<Tensor<f32>> {
    struct Disc {
        cy: f64,
        cx: f64,
        vy: f64,
        vx: f64,
        r: f64,
        color: [f64; 3],
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<[f64; 3]> = (0..2)
        .map(|_| {
            [
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
                rng.random_range(0.15..0.85),
            ]
        })
        .collect();
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let ang = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.04..0.25);
            (
                ang.cos() * freq,
                ang.sin() * freq,
                rng.random_range(0.0..6.3),
                rng.random_range(0.03..0.1),
            )
        })
        .collect();
    let (hf, wf) = (height as f64, width as f64);
    let discs: Vec<Disc> = (0..6)
        .map(|_| Disc {
            cy: rng.random_range(0.0..hf),
            cx: rng.random_range(0.0..wf),
            vy: rng.random_range(-0.5..0.5),
            vx: rng.random_range(-0.5..0.5),
            r: rng.random_range(0.08..0.25) * hf.min(wf),
            color: [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ],
        })
        .collect();
    (0..frames)
        .map(|t| {
            let t = t as f64;
            let mut f = Tensor::zeros(&[3, height, width]);
            let d = f.data_mut();
            for y in 0..height {
                for x in 0..width {
                    let g = (y as f64 / hf + x as f64 / wf) / 2.0;
                    let mut px = [0.0; 3];
                    for (ch, p) in px.iter_mut().enumerate() {
                        *p = base[0][ch] + (base[1][ch] - base[0][ch]) * g;
                    }
                    let tex: f64 = gratings
                        .iter()
                        .map(|(fx, fy, ph, a)| a * ((x as f64 + 0.3 * t) * fx * 6.3 + y as f64 * fy * 6.3 + ph).sin())
                        .sum();
                    px.iter_mut().for_each(|p| *p += tex);
                    for disc in &discs {
                        let dy = y as f64 - (disc.cy + disc.vy * t);
                        let dx = x as f64 - (disc.cx + disc.vx * t);
                        let dist = (dy * dy + dx * dx).sqrt();
                        let alpha = (disc.r - dist + 0.5).clamp(0.0, 1.0);
                        for (p, col) in px.iter_mut().zip(disc.color) {
                            *p += alpha * (col - *p);
                        }
                    }
                    for ch in 0..3 {
                        d[ch * height * width + y * width + x] = px[ch].clamp(0.0, 1.0) as f32;
                    }
                }
            }
            f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_frame(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.random_range(0.0..1.0))
    }

    fn gaussian(side: usize, sigma: f64) -> Psf {
        let c = (side / 2) as f64;
        let k = (0..side * side)
            .map(|i| {
                let (y, x) = ((i / side) as f64 - c, (i % side) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Psf::normalized(side, side, k).unwrap()
    }

    // Direct full-frame convolution with mirrored borders, computed without
    // the blending machinery.
    fn oracle_conv(frame: &Tensor<f32>, psf: &Psf) -> Tensor<f32> {
        let (c, h, w) = frame.chw();
        let (ph, pw) = (psf.height() as isize, psf.width() as isize);
        let mirror = |i: isize, n: isize| -> usize {
            let mut i = i;
            while i < 0 || i >= n {
                i = if i < 0 { -i } else { 2 * (n - 1) - i };
            }
            i as usize
        };
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f64;
                    for ky in 0..ph {
                        for kx in 0..pw {
                            let sy = mirror(y + ky - ph / 2, h as isize);
                            let sx = mirror(x + kx - pw / 2, w as isize);
                            acc += psf.kernel()[(ky * pw + kx) as usize] * frame.plane(ch)[sy * w + sx] as f64;
                        }
                    }
                    out.data_mut()[ch * h * w + (y as usize) * w + x as usize] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn generated_bank_is_normalized_and_seeded() {
        let a = generate_psf_bank(7);
        assert_eq!(a.len(), 9);
        for p in &a.psfs {
            assert_eq!((p.height(), p.width()), (15, 15));
            assert!((p.sum() - 1.0).abs() < 1e-6);
            assert!(p.kernel().iter().all(|v| *v >= 0.0));
        }
        assert_eq!(a, generate_psf_bank(7));
        assert_ne!(a.psfs, generate_psf_bank(8).psfs);
    }

    #[test]
    fn bank_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let bank = generate_psf_bank(3);
        bank.save(dir.path()).unwrap();
        let loaded = PsfBank::load(dir.path()).unwrap();
        assert_eq!(loaded.psfs, bank.psfs);
        assert_eq!(loaded.source, PsfSource::Loaded(dir.path().to_path_buf()));
        for (a, b) in loaded.psfs.iter().zip(&bank.psfs) {
            assert!(a
                .kernel()
                .iter()
                .zip(b.kernel())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn psf_parsing_errors() {
        assert!(Psf::from_text("psf 2 2\n0.25 0.25\n0.25 0.25\n").is_err());
        assert!(Psf::from_text("kernel 1 1\n1\n").is_err());
        assert!(Psf::from_text("psf 1 3\n0.5 0.5\n").is_err());
        assert!(Psf::from_text("psf 1 1\n0.5\n").is_err());
        assert!(Psf::from_text("psf 1 1\n-1\n").is_err());
        assert_eq!(Psf::from_text("psf 1 1\n1\n").unwrap(), Psf::delta());
        assert!(PsfBank::load(Path::new("/nonexistent/psfs")).is_err());
    }

    #[test]
    fn resize_examples() {
        let p = gaussian(15, 2.0);
        let same = resize_psf(&p, 1.0).unwrap();
        assert_eq!((same.height(), same.width()), (15, 15));
        let drift = same
            .kernel()
            .iter()
            .zip(p.kernel())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-6);
        assert_eq!(resize_psf(&p, 1.5).unwrap().height(), 23);
        assert_eq!(resize_psf(&p, 0.5).unwrap().height(), 7);
        // 15 * 0.6 = 9, 15 * 0.7 = 10.5 -> 11 is odd, 15 * 0.73 = 10.95 -> 11
        assert_eq!(resize_psf(&p, 0.6).unwrap().height(), 9);
        assert_eq!(resize_psf(&p, 0.73).unwrap().height(), 11);
        // 10.2 rounds to the even 10 and moves up toward the target
        assert_eq!(resize_psf(&p, 0.68).unwrap().height(), 11);
        assert_eq!(resize_psf(&Psf::delta(), 1.49).unwrap(), Psf::delta());
        assert!(resize_psf(&Psf::delta(), 0.3).is_err());
        assert!(resize_psf(&p, 0.0).is_err());
    }

    #[test]
    fn resize_keeps_symmetric_centroid() {
        for &s in &[0.5, 0.7, 0.9, 1.0, 1.2, 1.5] {
            let r = resize_psf(&gaussian(15, 2.0), s).unwrap();
            let (cy, cx) = r.centroid();
            let c = (r.height() - 1) as f64 / 2.0;
            assert!((cy - c).abs() < 0.5 && (cx - c).abs() < 0.5);
            assert!((r.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn delta_bank_is_identity() {
        let frame = random_frame(3, 33, 40, 1);
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, draws) = spatially_variant_blur(&frame, &PsfBank::delta(9), &cfg, &mut rng).unwrap();
        assert_eq!(draws.len(), 16);
        assert!(out
            .data()
            .iter()
            .zip(frame.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn single_tile_matches_full_convolution() {
        let frame = random_frame(2, 20, 27, 2);
        let psf = gaussian(7, 1.3);
        let bank = PsfBank::new(vec![psf.clone()]).unwrap();
        let cfg = SynthConfig {
            tile_rows: 1,
            tile_cols: 1,
            psf_scale_range: (1.0, 1.0),
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = spatially_variant_blur(&frame, &bank, &cfg, &mut rng).unwrap();
        let want = oracle_conv(&frame, &resize_psf(&psf, 1.0).unwrap());
        assert!(out.zip_map(&want, |a, b| a - b).max_abs() < 1e-6);
    }

    #[test]
    fn blur_preserves_mean_intensity() {
        let bank = generate_psf_bank(11);
        let cfg = SynthConfig::default();
        for i in 0..20 {
            let frame = &procedural_scene(64, 64, 1, 100 + i)[0];
            let mut rng = frame_rng(5, i as usize);
            let (out, _) = spatially_variant_blur(frame, &bank, &cfg, &mut rng).unwrap();
            let (m0, m1) = (frame.sum() as f64, out.sum() as f64);
            assert!((m1 - m0).abs() / m0 < 0.01, "frame {i}: {m0} vs {m1}");
        }
    }

    #[test]
    fn noise_statistics() {
        let frame = Tensor::<f32>::full(&[1, 1000, 1000], 0.5);
        let sigma = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = add_gaussian_noise(&frame, sigma, &mut rng).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = out.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - sigma * sigma).abs() / (sigma * sigma) < 0.05, "{var}");
        assert_eq!(add_gaussian_noise(&frame, 0.0, &mut rng).unwrap(), frame);
        assert!(add_gaussian_noise(&frame, -1.0, &mut rng).is_err());
        let a = add_gaussian_noise(&frame, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = add_gaussian_noise(&frame, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sequence_synthesis_examples() {
        let clean = procedural_scene(48, 40, 4, 1);
        let degenerate = SynthConfig {
            noise_sigma_range: (0.0, 0.0),
            ..SynthConfig::default()
        };
        assert_eq!(
            synthesize_sequence(&clean, &PsfBank::delta(9), &degenerate).unwrap(),
            clean
        );
        assert!(synthesize_sequence(&[], &PsfBank::delta(9), &degenerate).is_err());

        let bank = generate_psf_bank(0);
        let cfg = SynthConfig {
            seed: 42,
            ..SynthConfig::default()
        };
        let all = synthesize_sequence(&clean, &bank, &cfg).unwrap();
        // frame 2 alone, out of order, equals frame 2 of the batch
        assert_eq!(degrade_frame(&clean[2], 2, &bank, &cfg).unwrap(), all[2]);
        for (d, c) in all.iter().zip(&clean) {
            let p = psnr(d, c, 1.0).unwrap();
            assert!(p.is_finite() && p > 15.0, "{p}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn blur_is_linear(seed in 0u64..1000, a in 0.1f32..0.9) {
            let frame = random_frame(1, 16, 16, seed);
            let bank = generate_psf_bank(seed);
            let cfg = SynthConfig { tile_rows: 2, tile_cols: 2, ..SynthConfig::default() };
            let (x, _) = spatially_variant_blur(&frame, &bank, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let scaled = frame.map(|v| v * a);
            let (y, _) = spatially_variant_blur(&scaled, &bank, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(y.zip_map(&x, |p, q| p - a * q).max_abs() < 1e-5);
        }

        #[test]
        fn resized_psfs_sum_to_one(seed in 0u64..200, s in 0.5f64..1.5) {
            let bank = generate_psf_bank(seed);
            for p in &bank.psfs {
                let r = resize_psf(p, s).unwrap();
                prop_assert!((r.sum() - 1.0).abs() < 1e-6);
                prop_assert!(r.height() % 2 == 1 && r.width() % 2 == 1);
            }
        }
    }
}
