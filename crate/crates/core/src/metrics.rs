//! Video evaluation: first-frame SSIM, adjacent-frame consistency, and
//! block-matching motion intensity.

use serde::{Deserialize, Serialize};

use crate::codec::Frame;
use crate::error::{dim_err, Result};

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub const BLOCK: usize = 8;
pub const SEARCH_RADIUS: i64 = 4;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g1.iter().sum::<f64>().powi(2);
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w[i * SSIM_WINDOW + j] = g1[i] * g1[j] / total;
        }
    }
    w
}

/// SSIM with a 7×7 Gaussian window (σ = 1.5), dynamic range 1, averaged over
/// all positions where the window fits inside the frame.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(dim_err!(
            "ssim of {}×{} vs {}×{}",
            a.height,
            a.width,
            b.height,
            b.width
        ));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(dim_err!("ssim needs frames of at least {SSIM_WINDOW}×{SSIM_WINDOW}"));
    }
    let win = gaussian_window();
    let (oh, ow) = (a.height - SSIM_WINDOW + 1, a.width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let w = win[i * SSIM_WINDOW + j];
                    let va = a.at(y + i, x + j) as f64;
                    let vb = b.at(y + i, x + j) as f64;
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

fn centered(f: &Frame) -> Vec<f64> {
    let mean = f.pixels.iter().map(|&p| p as f64).sum::<f64>() / f.pixels.len() as f64;
    f.pixels.iter().map(|&p| p as f64 - mean).collect()
}

fn check_video(video: &[Frame]) -> Result<()> {
    if video.len() < 2 {
        return Err(dim_err!("need at least 2 frames, got {}", video.len()));
    }
    if video
        .iter()
        .any(|f| (f.height, f.width) != (video[0].height, video[0].width))
    {
        return Err(dim_err!("frames of differing extents"));
    }
    Ok(())
}

/// Mean cosine similarity of adjacent mean-subtracted frames.
///
/// Identical frames score exactly 1. Otherwise a pair involving a constant
/// frame scores 0.
pub fn temporal_consistency(video: &[Frame]) -> Result<f64> {
    check_video(video)?;
    let total: f64 = video
        .windows(2)
        .map(|pair| {
            if pair[0].pixels == pair[1].pixels {
                return 1.0;
            }
            let (p, q) = (centered(&pair[0]), centered(&pair[1]));
            let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if np == 0.0 || nq == 0.0 {
                return 0.0;
            }
            (p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (np * nq)).clamp(-1.0, 1.0)
        })
        .sum();
    Ok(total / (video.len() - 1) as f64)
}

/// Search offsets ordered by magnitude so the first minimum found is the
/// smallest displacement among ties.
fn search_offsets() -> Vec<(i64, i64)> {
    let mut v: Vec<(i64, i64)> = (-SEARCH_RADIUS..=SEARCH_RADIUS)
        .flat_map(|dy| (-SEARCH_RADIUS..=SEARCH_RADIUS).map(move |dx| (dx, dy)))
        .collect();
    v.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    v
}

/// Integer displacement of the block at `(by, bx)` of `prev` into `next`,
/// minimizing SSD averaged over pixels that stay inside the frame.
fn match_block(prev: &Frame, next: &Frame, by: usize, bx: usize, offsets: &[(i64, i64)]) -> (i64, i64) {
    let (h, w) = (prev.height as i64, prev.width as i64);
    let mut best = (f64::INFINITY, (0, 0));
    for &(dx, dy) in offsets {
        let (mut ssd, mut n) = (0.0, 0usize);
        for i in by..(by + BLOCK).min(prev.height) {
            for j in bx..(bx + BLOCK).min(prev.width) {
                let (y, x) = (i as i64 + dy, j as i64 + dx);
                if y < 0 || x < 0 || y >= h || x >= w {
                    continue;
                }
                let d = prev.at(i, j) as f64 - next.at(y as usize, x as usize) as f64;
                ssd += d * d;
                n += 1;
            }
        }
        if n > 0 && ssd / (n as f64) < best.0 {
            best = (ssd / n as f64, (dx, dy));
        }
    }
    best.1
}

fn block_variance(f: &Frame, by: usize, bx: usize) -> f64 {
    let vals: Vec<f64> = (by..(by + BLOCK).min(f.height))
        .flat_map(|i| (bx..(bx + BLOCK).min(f.width)).map(move |j| (i, j)))
        .map(|(i, j)| f.at(i, j) as f64)
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Variance-weighted mean displacement magnitude of one frame pair, in pixels.
pub fn pair_motion(prev: &Frame, next: &Frame) -> f64 {
    let offsets = search_offsets();
    let (mut num, mut den) = (0.0, 0.0);
    for by in (0..prev.height).step_by(BLOCK) {
        for bx in (0..prev.width).step_by(BLOCK) {
            let weight = block_variance(prev, by, bx);
            if weight <= 0.0 {
                continue;
            }
            let (dx, dy) = match_block(prev, next, by, bx, &offsets);
            num += weight * ((dx * dx + dy * dy) as f64).sqrt();
            den += weight;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Mean over adjacent pairs of [`pair_motion`]; units are pixels at frame
/// resolution.
pub fn motion_intensity(video: &[Frame]) -> Result<f64> {
    check_video(video)?;
    let total: f64 = video.windows(2).map(|p| pair_motion(&p[0], &p[1])).sum();
    Ok(total / (video.len() - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub ssim_first_frame: f64,
    pub temporal_consistency: f64,
    pub motion_intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ssim_first_frame: f64,
    pub temporal_consistency: f64,
    pub motion_intensity: f64,
    pub n_videos: usize,
    pub motion_units: String,
    pub videos: Vec<VideoMetrics>,
}

pub fn evaluate_video(video: &[Frame], reference: &Frame) -> Result<VideoMetrics> {
    let first = video
        .first()
        .ok_or_else(|| dim_err!("empty generated video"))?;
    Ok(VideoMetrics {
        ssim_first_frame: ssim(first, reference)?,
        temporal_consistency: temporal_consistency(video)?,
        motion_intensity: motion_intensity(video)?,
    })
}

pub fn evaluate(generated: &[Vec<Frame>], references: &[Frame]) -> Result<MetricsReport> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(crate::error::Error::Data(format!(
            "{} generated videos vs {} references",
            generated.len(),
            references.len()
        )));
    }
    let videos = generated
        .iter()
        .zip(references)
        .map(|(v, r)| evaluate_video(v, r))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_videos(videos)
}

impl MetricsReport {
    /// Aggregates per-video scores, kept in the given order.
    pub fn from_videos(videos: Vec<VideoMetrics>) -> Result<MetricsReport> {
        if videos.is_empty() {
            return Err(crate::error::Error::Data("no videos to report".into()));
        }
        let n = videos.len() as f64;
        let mean = |f: fn(&VideoMetrics) -> f64| videos.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            ssim_first_frame: mean(|v| v.ssim_first_frame),
            temporal_consistency: mean(|v| v.temporal_consistency),
            motion_intensity: mean(|v| v.motion_intensity),
            n_videos: videos.len(),
            motion_units: "pixels per frame at frame resolution".into(),
            videos,
        })
    }

    /// Tab-separated table: one row per video followed by the mean row.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# motion_intensity units: {}\n", self.motion_units);
        out.push_str("video\tssim_first_frame\ttemporal_consistency\tmotion_intensity\n");
        let row = |name: String, v: (f64, f64, f64)| format!("{name}\t{:.6}\t{:.6}\t{:.6}\n", v.0, v.1, v.2);
        for (i, v) in self.videos.iter().enumerate() {
            out.push_str(&row(
                i.to_string(),
                (v.ssim_first_frame, v.temporal_consistency, v.motion_intensity),
            ));
        }
        out.push_str(&row(
            "mean".into(),
            (self.ssim_first_frame, self.temporal_consistency, self.motion_intensity),
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
