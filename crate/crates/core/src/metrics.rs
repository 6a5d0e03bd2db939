//! Image quality metrics.
//!
//! Both metrics are evaluated in `f64` regardless of the tensor precision.
//! SSIM follows the reference formulation: an 11x11 Gaussian window with
//! sigma 1.5, statistics over the valid region only, `K1 = 0.01`,
//! `K2 = 0.03` and dynamic range 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for data with the given peak-to-peak
/// range. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64) -> Result<f64> {
    check_same("psnr", pred.shape(), target.shape())?;
    if pred.len() == 0 {
        return Err(Error::shape("psnr", "empty tensors"));
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity of two single-channel images.
///
/// Accepts `[H, W]` or `[1, H, W]`; both sides must be at least 11 pixels.
pub fn ssim<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same("ssim", pred.shape(), target.shape())?;
    let (h, w) = match *pred.shape() {
        [h, w] | [1, h, w] => (h, w),
        ref s => {
            return Err(Error::shape(
                "ssim",
                format!("expected a single-channel image, got {s:?}"),
            ))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let a: Vec<f64> = pred.data().iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let k = gaussian_window();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Scores of one channel of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelQuality {
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameQuality {
    pub frame_index: usize,
    pub channels: Vec<ChannelQuality>,
}

/// Per-frame, per-channel scores of a restored sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub frames: Vec<FrameQuality>,
}

/// Mean that keeps the `+inf` of lossless frames from swamping the rest:
/// infinite entries are averaged only if every entry is infinite.
fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n, mut inf) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            inf += 1;
        }
    }
    match (n, inf) {
        (0, 0) => f64::NAN,
        (0, _) => f64::INFINITY,
        _ => sum / n as f64,
    }
}

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl QualityReport {
    pub fn channel_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.channels.len())
    }

    /// Mean PSNR over frames for one channel, ignoring lossless frames.
    pub fn mean_psnr_channel(&self, c: usize) -> f64 {
        finite_mean(self.frames.iter().map(|f| f.channels[c].psnr_db))
    }

    pub fn mean_ssim_channel(&self, c: usize) -> f64 {
        self.frames.iter().map(|f| f.channels[c].ssim).sum::<f64>() / self.frames.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        finite_mean(self.frames.iter().flat_map(|f| f.channels.iter().map(|c| c.psnr_db)))
    }

    pub fn mean_ssim(&self) -> f64 {
        let n: usize = self.frames.iter().map(|f| f.channels.len()).sum();
        self.frames
            .iter()
            .flat_map(|f| f.channels.iter().map(|c| c.ssim))
            .sum::<f64>()
            / n as f64
    }

    /// `frame_index,channel,psnr_db,ssim` rows followed by per-channel and
    /// overall mean rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,channel,psnr_db,ssim\n");
        for f in &self.frames {
            for (c, q) in f.channels.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    f.frame_index,
                    c,
                    fmt_metric(q.psnr_db),
                    fmt_metric(q.ssim)
                );
            }
        }
        for c in 0..self.channel_count() {
            let _ = writeln!(
                out,
                "mean,{c},{},{}",
                fmt_metric(self.mean_psnr_channel(c)),
                fmt_metric(self.mean_ssim_channel(c))
            );
        }
        if !self.frames.is_empty() {
            let _ = writeln!(
                out,
                "mean,all,{},{}",
                fmt_metric(self.mean_psnr()),
                fmt_metric(self.mean_ssim())
            );
        }
        out
    }
}

/// Scores `pred` against `reference` frame by frame. Frames are `[C, H, W]`
/// in `[0, 1]`; PSNR uses peak 1.
pub fn sequence_quality<T: Real>(pred: &[Tensor<T>], reference: &[Tensor<T>]) -> Result<QualityReport> {
    if pred.len() != reference.len() {
        return Err(Error::shape(
            "sequence_quality",
            format!("{} frames vs {} reference frames", pred.len(), reference.len()),
        ));
    }
    let mut frames = Vec::with_capacity(pred.len());
    for (i, (p, r)) in pred.iter().zip(reference).enumerate() {
        check_same("sequence_quality", p.shape(), r.shape())?;
        if p.shape().len() != 3 {
            return Err(Error::shape(
                "sequence_quality",
                format!("frame {i} is not [C, H, W]: {:?}", p.shape()),
            ));
        }
        let mut channels = Vec::with_capacity(p.shape()[0]);
        for c in 0..p.shape()[0] {
            let pc = p.slice_channels(c, c + 1);
            let rc = r.slice_channels(c, c + 1);
            channels.push(ChannelQuality {
                psnr_db: psnr(&pc, &rc, 1.0)?,
                ssim: ssim(&pc, &rc)?,
            });
        }
        frames.push(FrameQuality {
            frame_index: i,
            channels,
        });
    }
    Ok(QualityReport { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    // Direct 2-D windowed SSIM, written independently of the separable path.
    fn oracle_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let mut win = [[0.0f64; 11]; 11];
        let mut s = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dy * dy + dx * dx) / 4.5).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        let mut n = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / s;
                        let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total +=
                    ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::zeros(&[1, 4, 4]);
        let b = Tensor::full(&[1, 4, 4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&a, &b, 2.0).unwrap() - (20.0 + 20.0 * 2f64.log10())).abs() < 1e-9);
        assert_eq!(psnr(&b, &b, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        let a = random(&[1, 24, 19], 1);
        let b = a.zip_map(&random(&[1, 24, 19], 2), |x, n| 0.7 * x + 0.3 * n);
        let got = ssim(&a, &b).unwrap();
        let want = oracle_ssim(a.data(), b.data(), 24, 19);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_identity_and_errors() {
        let a = random(&[32, 32], 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&random(&[3, 16, 16], 4), &random(&[3, 16, 16], 5)).is_err());
        assert!(ssim(&random(&[1, 10, 16], 4), &random(&[1, 10, 16], 5)).is_err());
        assert!(ssim(&random(&[1, 16, 16], 4), &random(&[1, 16, 17], 5)).is_err());
    }

    #[test]
    fn ssim_of_constant_offset() {
        // two flat images: only the luminance term remains
        let a = Tensor::<f64>::full(&[16, 16], 0.2);
        let b = Tensor::<f64>::full(&[16, 16], 0.6);
        let want = (2.0 * 0.2 * 0.6 + 1e-4) / (0.04 + 0.36 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn report_csv_layout() {
        let clean: Vec<_> = (0..2).map(|i| random(&[3, 16, 16], 10 + i)).collect();
        let mut pred = clean.clone();
        pred[1] = pred[1].map(|v| (v + 0.05).min(1.0));
        let r = sequence_quality(&pred, &clean).unwrap();
        assert_eq!(r.frames.len(), 2);
        assert_eq!(r.channel_count(), 3);
        assert_eq!(r.frames[0].channels[0].psnr_db, f64::INFINITY);
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "frame_index,channel,psnr_db,ssim");
        assert_eq!(lines.len(), 1 + 6 + 3 + 1);
        assert!(lines[1].starts_with("0,0,inf,1.000000"));
        assert!(lines[7].starts_with("mean,0,"));
        assert!(lines[10].starts_with("mean,all,"));
        // the lossless frame does not enter the PSNR mean
        assert_eq!(r.mean_psnr_channel(0), r.frames[1].channels[0].psnr_db);
        assert!(sequence_quality(&pred[..1], &clean).is_err());
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
            let a = random(&[1, 14, 14], seed);
            let b = random(&[1, 14, 14], seed + 7919);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= 1.0 && ab >= -1.0);
        }

        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..1000, k in 1.0f64..4.0) {
            let a = random(&[1, 8, 8], seed);
            let n = random(&[1, 8, 8], seed + 1).map(|v| v - 0.5);
            let small = a.zip_map(&n, |x, e| x + 0.01 * e);
            let large = a.zip_map(&n, |x, e| x + 0.01 * k * 1.5 * e);
            prop_assert!(psnr(&small, &a, 1.0).unwrap() > psnr(&large, &a, 1.0).unwrap());
        }
    }
}
