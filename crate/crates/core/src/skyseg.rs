//! Sky segmentation: grayscale conversion, mean blur, Otsu global
//! thresholding, a local-adaptive baseline, and IoU scoring.
//!
//! The Otsu sweep keeps every accumulator in exact integer arithmetic and
//! converts to f64 only for the final between-class variance, so the
//! argmax (and its smallest-t tie-break) is reproducible bit for bit.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SegError {
    #[error("pixel buffer length {got} does not match {expected} for {width}x{height}")]
    DimensionMismatch {
        width: u32,
        height: u32,
        expected: usize,
        got: usize,
    },
    #[error("kernel size {0} must be odd")]
    EvenKernel(u32),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("mask dimensions {0}x{1} vs {2}x{3} differ")]
    MaskDimensionMismatch(u32, u32, u32, u32),
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, SegError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(SegError::DimensionMismatch {
                width,
                height,
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn histogram(&self) -> Histogram {
        let mut counts = [0u64; 256];
        for &p in &self.pixels {
            counts[p as usize] += 1;
        }
        Histogram {
            counts,
            total: self.pixels.len() as u64,
        }
    }
}

/// 256-bin intensity histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: [u64; 256],
    pub total: u64,
}

impl Histogram {
    pub fn from_counts(counts: [u64; 256]) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }
}

/// Otsu sweep output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    /// Smallest t in [1, 255] maximizing the between-class variance.
    pub threshold: u8,
    pub between_class_variance: f64,
    /// True when no threshold separates two nonempty classes
    /// (single-intensity image).
    pub degenerate: bool,
}

/// Binary sky mask; `true` marks sky.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl SkyMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn sky_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// BT.601 luminance conversion of an interleaved 8-bit RGB buffer.
pub fn to_grayscale(width: u32, height: u32, rgb: &[u8]) -> Result<GrayImage, SegError> {
    let expected = width as usize * height as usize * 3;
    if rgb.len() != expected {
        return Err(SegError::DimensionMismatch {
            width,
            height,
            expected,
            got: rgb.len(),
        });
    }
    let pixels = rgb
        .chunks_exact(3)
        .map(|c| {
            let y = 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
            y.round() as u8
        })
        .collect();
    GrayImage::new(width, height, pixels)
}

// Clamped row/column index for border replication.
#[inline]
fn clamp_index(i: i64, len: u32) -> usize {
    i.clamp(0, len as i64 - 1) as usize
}

/// Box blur with border replication; output dimensions match the input.
pub fn mean_blur(img: &GrayImage, kernel: u32) -> Result<GrayImage, SegError> {
    if kernel % 2 == 0 || kernel == 0 {
        return Err(SegError::EvenKernel(kernel));
    }
    if kernel == 1 {
        return Ok(img.clone());
    }
    let half = (kernel / 2) as i64;
    let (w, h) = (img.width as usize, img.height as usize);

    // Separable: horizontal window sums, then vertical, then one division.
    let mut row_sums = vec![0u32; w * h];
    for y in 0..h {
        let row = &img.pixels[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0u32;
            for dx in -half..=half {
                s += row[clamp_index(x as i64 + dx, img.width)] as u32;
            }
            row_sums[y * w + x] = s;
        }
    }
    let area = (kernel * kernel) as f64;
    let mut pixels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0u32;
            for dy in -half..=half {
                s += row_sums[clamp_index(y as i64 + dy, img.height) * w + x];
            }
            pixels[y * w + x] = (s as f64 / area).round() as u8;
        }
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        pixels,
    })
}

/// Global threshold selection maximizing the between-class variance
/// σ_b²(t) = ω₀·ω₁·(μ₀ − μ₁)² with classes split at i < t vs i ≥ t.
pub fn otsu(h: &Histogram) -> Result<OtsuResult, SegError> {
    if h.total == 0 {
        return Err(SegError::EmptyHistogram);
    }
    let total = h.total as f64;

    // Prefix accumulators stay in integers; only the final variance is float.
    let mut count_below = 0u64;
    let mut weighted_below = 0u64;
    let total_count = h.total;
    let total_weighted: u64 = h
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u64 * c)
        .sum();

    let mut best: Option<(u8, f64)> = None;
    for t in 1..=255u16 {
        count_below += h.counts[(t - 1) as usize];
        weighted_below += (t - 1) as u64 * h.counts[(t - 1) as usize];
        let count_above = total_count - count_below;
        if count_below == 0 || count_above == 0 {
            continue;
        }
        let w0 = count_below as f64 / total;
        let w1 = count_above as f64 / total;
        let mu0 = weighted_below as f64 / count_below as f64;
        let mu1 = (total_weighted - weighted_below) as f64 / count_above as f64;
        let sigma_b = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        match best {
            Some((_, b)) if sigma_b <= b => {}
            _ => best = Some((t as u8, sigma_b)),
        }
    }

    Ok(match best {
        Some((threshold, between_class_variance)) => OtsuResult {
            threshold,
            between_class_variance,
            degenerate: false,
        },
        None => OtsuResult {
            threshold: 0,
            between_class_variance: 0.0,
            degenerate: true,
        },
    })
}

/// Binarize: sky where I(i,j) ≥ t.
pub fn apply_threshold(img: &GrayImage, t: u8) -> SkyMask {
    SkyMask {
        width: img.width,
        height: img.height,
        bits: img.pixels.iter().map(|&p| p >= t).collect(),
    }
}

/// Local-adaptive baseline: sky where pixel ≥ window mean − offset.
///
/// The window mean uses border replication like [`mean_blur`]. A negative
/// offset demands the pixel exceed its neighborhood mean.
pub fn local_threshold(img: &GrayImage, window: u32, offset: f64) -> Result<SkyMask, SegError> {
    if window % 2 == 0 || window < 3 {
        return Err(SegError::EvenKernel(window));
    }
    let half = (window / 2) as i64;
    let (w, h) = (img.width as usize, img.height as usize);

    let mut row_sums = vec![0u32; w * h];
    for y in 0..h {
        let row = &img.pixels[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0u32;
            for dx in -half..=half {
                s += row[clamp_index(x as i64 + dx, img.width)] as u32;
            }
            row_sums[y * w + x] = s;
        }
    }
    let area = (window * window) as f64;
    let mut bits = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0u32;
            for dy in -half..=half {
                s += row_sums[clamp_index(y as i64 + dy, img.height) * w + x];
            }
            let mean = s as f64 / area;
            bits[y * w + x] = img.pixels[y * w + x] as f64 >= mean - offset;
        }
    }
    Ok(SkyMask {
        width: img.width,
        height: img.height,
        bits,
    })
}

/// Intersection-over-union of the sky bits; 1 when both masks are empty.
pub fn iou(a: &SkyMask, b: &SkyMask) -> Result<f64, SegError> {
    if a.width != b.width || a.height != b.height {
        return Err(SegError::MaskDimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
