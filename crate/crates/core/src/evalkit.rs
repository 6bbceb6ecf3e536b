//! Quantitative evaluation: pixel metrics, pose-following
//! discrimination against the deterministic renderer, the
//! background-control probe, and attention-map binarization with a
//! diagonality score.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f32 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub l1: f32,
    /// Per-frame PSNR averaged over frames.
    pub psnr_db: f32,
    /// Single log of the video-pooled MSE; overflow-safe on frames
    /// with MSE near zero.
    pub psnr_star_db: f32,
    pub ssim: f32,
    pub per_frame_psnr: Vec<f32>,
    pub per_frame_ssim: Vec<f32>,
}

fn psnr_from_mse(mse: f64) -> f32 {
    (10.0 * (1.0 / mse.max(MSE_FLOOR)).log10()).min(PSNR_CAP_DB as f64) as f32
}

/// SSIM of one (3,H,W) frame pair: 7x7 uniform window, standard
/// constants, channel-averaged.
fn ssim_frame(a: &[f32], b: &[f32], h: usize, w: usize) -> f32 {
    const WIN: isize = 7;
    const HALF: isize = 3;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for c in 0..3 {
        let pa = &a[c * h * w..(c + 1) * h * w];
        let pb = &b[c * h * w..(c + 1) * h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                let mut n = 0.0f64;
                for di in -HALF..WIN - HALF {
                    for dj in -HALF..WIN - HALF {
                        let (y, x) = (i + di, j + dj);
                        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                            continue;
                        }
                        let va = pa[y as usize * w + x as usize] as f64;
                        let vb = pb[y as usize * w + x as usize] as f64;
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                        n += 1.0;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                let s = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                total += s;
                count += 1;
            }
        }
    }
    (total / count as f64) as f32
}

/// Pixel metrics between two (F,3,H,W) videos in [0,1].
pub fn frame_metrics(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<MetricsReport> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("expected (F,3,H,W), got {s:?}")));
    }
    let (f, h, w) = (s[0], s[2], s[3]);
    let per = 3 * h * w;
    let mut l1_sum = 0.0f64;
    let mut pooled_se = 0.0f64;
    let mut per_frame_psnr = Vec::with_capacity(f);
    let mut per_frame_ssim = Vec::with_capacity(f);
    for fr in 0..f {
        let fa = &a.data()[fr * per..(fr + 1) * per];
        let fb = &b.data()[fr * per..(fr + 1) * per];
        let mut se = 0.0f64;
        for (x, y) in fa.iter().zip(fb) {
            let d = (*x - *y) as f64;
            l1_sum += d.abs();
            se += d * d;
        }
        pooled_se += se;
        per_frame_psnr.push(psnr_from_mse(se / per as f64));
        per_frame_ssim.push(ssim_frame(fa, fb, h, w));
    }
    let n = (f * per) as f64;
    Ok(MetricsReport {
        l1: (l1_sum / n) as f32,
        psnr_db: per_frame_psnr.iter().sum::<f32>() / f as f32,
        psnr_star_db: psnr_from_mse(pooled_se / n),
        ssim: per_frame_ssim.iter().sum::<f32>() / f as f32,
        per_frame_psnr,
        per_frame_ssim,
    })
}

/// Does the generated video match the oracle render of its own driving
/// poses better than a shuffled-pose render of the same appearance?
pub fn pose_discrimination(
    generated: &Tensor<f32>,
    gt_matched: &Tensor<f32>,
    gt_shuffled: &Tensor<f32>,
) -> Result<(f32, f32, bool)> {
    let m = frame_metrics(generated, gt_matched)?;
    let s = frame_metrics(generated, gt_shuffled)?;
    Ok((m.psnr_db, s.psnr_db, m.psnr_db > s.psnr_db))
}

/// Mean RGB over background pixels across frames, compared against the
/// prompted target color and the reference image's original color.
pub fn background_probe(
    generated: &Tensor<f32>,
    mask: &Tensor<f32>,
    target_color: [f32; 3],
    original_color: [f32; 3],
) -> Result<(f32, f32, bool)> {
    let s = generated.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("expected (F,3,H,W), got {s:?}")));
    }
    let (f, h, w) = (s[0], s[2], s[3]);
    if mask.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} vs frame grid {h}x{w}",
            mask.shape()
        )));
    }
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for fr in 0..f {
        for i in 0..h {
            for j in 0..w {
                if mask.data()[i * w + j] >= 0.5 {
                    for (c, sum) in sums.iter_mut().enumerate() {
                        *sum += generated.data()[((fr * 3 + c) * h + i) * w + j] as f64;
                    }
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Invalid("empty background mask".into()));
    }
    let mean = [
        (sums[0] / count as f64) as f32,
        (sums[1] / count as f64) as f32,
        (sums[2] / count as f64) as f32,
    ];
    let dist = |c: [f32; 3]| -> f32 {
        ((mean[0] - c[0]).powi(2) + (mean[1] - c[1]).powi(2) + (mean[2] - c[2]).powi(2)).sqrt()
    };
    let dt = dist(target_color);
    let d0 = dist(original_color);
    Ok((dt, d0, dt < d0))
}

/// Rescale each row to sum to 1. Attention views sliced out of a
/// longer token sequence keep only part of each softmax row, so they
/// need this before binarization.
pub fn renormalize_rows(map: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected 2D map, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let mut out = map.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if sum <= 0.0 {
            return Err(Error::Invalid(format!("row {r} has no mass")));
        }
        for v in row {
            *v = (*v as f64 / sum) as f32;
        }
    }
    Ok(out)
}

/// Per-row threshold at mean + population std; rows with (near) zero
/// std are all off.
pub fn binarize_attention(map: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected 2D map, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    let mut out = Tensor::zeros(vec![rows, cols]);
    for r in 0..rows {
        let row = &map.data()[r * cols..(r + 1) * cols];
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Invalid(format!("row {r} sums to {sum}, not stochastic")));
        }
        let mean = sum / cols as f64;
        let var: f64 = row
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / cols as f64;
        let std = var.sqrt();
        if std <= 1e-9 {
            continue;
        }
        let threshold = mean + std;
        for c in 0..cols {
            if row[c] as f64 >= threshold {
                out.data_mut()[r * cols + c] = 1.0;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone)]
pub struct DiagonalityReport {
    pub map_kind: MapKind,
    pub band_width: usize,
    pub score: f32,
    pub binarized: Tensor<f32>,
}

/// Fraction of on entries within |i-j| <= w of the main diagonal.
pub fn diagonality(binary_map: &Tensor<f32>, band_width: usize) -> Result<f32> {
    let s = binary_map.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape(format!("expected square map, got {s:?}")));
    }
    let n = s[0];
    let mut on = 0usize;
    let mut on_band = 0usize;
    for i in 0..n {
        for j in 0..n {
            if binary_map.data()[i * n + j] != 0.0 {
                on += 1;
                if i.abs_diff(j) <= band_width {
                    on_band += 1;
                }
            }
        }
    }
    if on == 0 {
        return Err(Error::Invalid("all-off map has no diagonality".into()));
    }
    Ok(on_band as f32 / on as f32)
}

/// Binarize a row-stochastic map and score it in one step.
pub fn diagonality_report(
    map: &Tensor<f32>,
    kind: MapKind,
    band_width: usize,
) -> Result<DiagonalityReport> {
    let binarized = binarize_attention(&renormalize_rows(map)?)?;
    let score = diagonality(&binarized, band_width)?;
    Ok(DiagonalityReport {
        map_kind: kind,
        band_width,
        score,
        binarized,
    })
}
