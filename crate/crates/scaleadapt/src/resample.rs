//! Bilinear rescaling of rasters and nearest-neighbor rescaling of masks.
//!
//! Coordinate convention (frozen): half pixel centers with edge clamping.
//! Output pixel center `i` maps to input coordinate `(i + 0.5) / r - 0.5`.

use crate::types::{Raster, SegMask, Tile};

#[derive(Debug, thiserror::Error)]
pub enum ResampleError {
    #[error("scale ratio must lie in (0, 16], got {0}")]
    BadRatio(f64),
    #[error("output dimensions {0}x{1} are degenerate")]
    DegenerateOutput(usize, usize),
    #[error("matched tile would be {0}x{1}, below the 8 px minimum")]
    TooSmall(usize, usize),
    #[error("target gsd must be > 0, got {0}")]
    BadGsd(f64),
}

/// A validated resampling ratio (output size / input size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFactor {
    ratio: f64,
}

impl ScaleFactor {
    pub fn new(ratio: f64) -> Result<Self, ResampleError> {
        if !(ratio > 0.0 && ratio <= 16.0) || !ratio.is_finite() {
            return Err(ResampleError::BadRatio(ratio));
        }
        Ok(ScaleFactor { ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Output size for an input of `n` pixels: floor(n * r + 0.5).
    pub fn out_dim(&self, n: usize) -> usize {
        (n as f64 * self.ratio + 0.5).floor() as usize
    }
}

#[inline]
fn src_coord(i: usize, ratio: f64) -> f64 {
    (i as f64 + 0.5) / ratio - 0.5
}

/// Bilinear interpolation at the half-pixel-center convention with edge clamp.
pub fn resize_bilinear(raster: &Raster, factor: ScaleFactor) -> Result<Raster, ResampleError> {
    let (oh, ow) = (factor.out_dim(raster.height), factor.out_dim(raster.width));
    if oh == 0 || ow == 0 {
        return Err(ResampleError::DegenerateOutput(oh, ow));
    }
    if (raster.height, raster.width) == (oh, ow) && factor.ratio == 1.0 {
        return Ok(raster.clone());
    }
    let (h, w) = (raster.height, raster.width);
    // Per-axis taps are shared across channels and the other axis.
    let xtaps: Vec<(usize, usize, f32)> = (0..ow).map(|i| taps(i, factor.ratio, w)).collect();
    let ytaps: Vec<(usize, usize, f32)> = (0..oh).map(|i| taps(i, factor.ratio, h)).collect();
    let mut out = Raster::zeros(raster.channels, oh, ow);
    for c in 0..raster.channels {
        let plane = raster.channel(c);
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                *out.at_mut(c, oy, ox) = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

/// Lower/upper source index and fractional weight for one output index.
fn taps(i: usize, ratio: f64, n: usize) -> (usize, usize, f32) {
    let s = src_coord(i, ratio);
    let s = s.clamp(0.0, (n - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, (s - lo as f64) as f32)
}

/// Resize a tile so its GSD becomes `target_gsd`; pixels are interpolated
/// bilinearly and the GSD bookkeeping is exact.
pub fn match_scale(tile: &Tile, target_gsd: f64) -> Result<Tile, ResampleError> {
    if !(target_gsd > 0.0) || !target_gsd.is_finite() {
        return Err(ResampleError::BadGsd(target_gsd));
    }
    let factor = ScaleFactor::new(tile.gsd_m / target_gsd)?;
    let (oh, ow) = (factor.out_dim(tile.height()), factor.out_dim(tile.width()));
    if oh < 8 || ow < 8 {
        return Err(ResampleError::TooSmall(oh, ow));
    }
    let pixels = resize_bilinear(&tile.pixels, factor)?;
    Ok(Tile { pixels, gsd_m: target_gsd, location: tile.location, id: tile.id.clone() })
}

/// Nearest-neighbor mask rescaling at the same coordinate convention.
/// Ties (fractional part exactly 0.5) round up.
pub fn resize_mask_nearest(mask: &SegMask, factor: ScaleFactor) -> Result<SegMask, ResampleError> {
    let (oh, ow) = (factor.out_dim(mask.height), factor.out_dim(mask.width));
    if oh == 0 || ow == 0 {
        return Err(ResampleError::DegenerateOutput(oh, ow));
    }
    let nearest = |i: usize, n: usize| -> usize {
        let s = src_coord(i, factor.ratio).clamp(0.0, (n - 1) as f64);
        (s + 0.5).floor() as usize
    };
    let mut labels = vec![0u8; oh * ow];
    for oy in 0..oh {
        let sy = nearest(oy, mask.height);
        for ox in 0..ow {
            labels[oy * ow + ox] = mask.labels[sy * mask.width + nearest(ox, mask.width)];
        }
    }
    Ok(SegMask::new(labels, oh, ow, mask.num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{constant_tile, Location, IGNORE};
    use proptest::prelude::*;

    fn ramp_raster() -> Raster {
        Raster::new(1, 1, 4, vec![0.0, 1.0, 2.0, 3.0])
    }

    #[test]
    fn constant_raster_is_preserved() {
        for &r in &[0.5, 1.0, 1.8, 2.0, 3.3] {
            let input = Raster::constant(2, 8, 8, 0.7);
            let out = resize_bilinear(&input, ScaleFactor::new(r).unwrap()).unwrap();
            assert!(out.data.iter().all(|&v| v == 0.7), "ratio {r}");
        }
    }

    #[test]
    fn ramp_upsample_matches_hand_evaluation() {
        // src coords for ratio 2: (i + 0.5)/2 - 0.5, clamped to [0, 3]:
        // -0.25->0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.25->3.
        let out = resize_bilinear(&ramp_raster(), ScaleFactor::new(2.0).unwrap()).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        assert_eq!(out.width, 8);
        for (got, want) in out.data.iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn identity_factor_is_bit_exact() {
        let input = Raster::new(1, 2, 2, vec![0.1, 0.9, 0.4, 0.3]);
        let out = resize_bilinear(&input, ScaleFactor::new(1.0).unwrap()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn vaihingen_like_gsd_bookkeeping() {
        let t = constant_tile("v", 45, 0.3, 0.09, Location::Target);
        let out = match_scale(&t, 0.05).unwrap();
        assert_eq!(out.gsd_m, 0.05);
        assert_eq!(out.height(), (45.0 * (0.09 / 0.05) + 0.5) as usize);
    }

    #[test]
    fn match_scale_identity() {
        let t = constant_tile("t", 64, 0.4, 0.09, Location::Target);
        let out = match_scale(&t, 0.09).unwrap();
        assert_eq!(out.pixels, t.pixels);
        assert_eq!(out.location, Location::Target);
    }

    #[test]
    fn match_scale_128px_down_to_71() {
        // floor(128 * (5/9) + 0.5) = 71
        let t = constant_tile("t", 128, 0.4, 0.05, Location::Source);
        let out = match_scale(&t, 0.09).unwrap();
        assert_eq!((out.height(), out.width()), (71, 71));
    }

    #[test]
    fn match_scale_64px_up_to_115() {
        // floor(64 * 1.8 + 0.5) = 115
        let t = constant_tile("t", 64, 0.4, 0.09, Location::Source);
        let out = match_scale(&t, 0.05).unwrap();
        assert_eq!((out.height(), out.width()), (115, 115));
    }

    #[test]
    fn match_scale_rejects_tiny_output() {
        let t = constant_tile("t", 16, 0.4, 0.09, Location::Source);
        assert!(matches!(match_scale(&t, 0.5), Err(ResampleError::TooSmall(_, _))));
    }

    #[test]
    fn mask_identity_factor() {
        let m = SegMask::new(vec![0, 1, 2, IGNORE], 2, 2, 3);
        let out = resize_mask_nearest(&m, ScaleFactor::new(1.0).unwrap()).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn checkerboard_downsample_picks_nearest_under_convention() {
        // Output pixel 0 at ratio 1/2 maps to src (0.5)/0.5 - 0.5 = 0.5;
        // the tie rounds up to index 1, so the result is label at (1, 1).
        let m = SegMask::new(vec![0, 1, 1, 0], 2, 2, 2);
        let out = resize_mask_nearest(&m, ScaleFactor::new(0.5).unwrap()).unwrap();
        assert_eq!((out.height, out.width), (1, 1));
        assert_eq!(out.labels, vec![0]);
    }

    #[test]
    fn mask_output_labels_are_subset_of_input() {
        let m = SegMask::new((0..36).map(|i| (i % 5) as u8).collect(), 6, 6, 5);
        let out = resize_mask_nearest(&m, ScaleFactor::new(1.7).unwrap()).unwrap();
        for &l in &out.labels {
            assert!(m.labels.contains(&l));
        }
    }

    #[test]
    fn smooth_round_trip_rmse_small() {
        // Gaussian-blurred random raster down x1/2 then up x2.
        let n = 32usize;
        let mut rng = 12345u64;
        let mut noise = vec![0.0f32; n * n];
        for v in noise.iter_mut() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((rng >> 33) as f32) / (u32::MAX >> 1) as f32;
        }
        // separable blur, sigma ~2
        let kernel: Vec<f32> = (-4i32..=4).map(|i| (-0.5 * (i as f32 / 2.0).powi(2)).exp()).collect();
        let ksum: f32 = kernel.iter().sum();
        let blur_1d = |src: &[f32], horiz: bool| -> Vec<f32> {
            let mut dst = vec![0.0f32; n * n];
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for (ki, &kv) in kernel.iter().enumerate() {
                        let o = ki as i32 - 4;
                        let (sy, sx) = if horiz {
                            (y as i32, (x as i32 + o).clamp(0, n as i32 - 1))
                        } else {
                            ((y as i32 + o).clamp(0, n as i32 - 1), x as i32)
                        };
                        acc += kv * src[sy as usize * n + sx as usize];
                    }
                    dst[y * n + x] = acc / ksum;
                }
            }
            dst
        };
        let smooth = blur_1d(&blur_1d(&noise, true), false);
        let input = Raster::new(1, n, n, smooth);
        let down = resize_bilinear(&input, ScaleFactor::new(0.5).unwrap()).unwrap();
        let up = resize_bilinear(&down, ScaleFactor::new(2.0).unwrap()).unwrap();
        let mse: f64 = input
            .data
            .iter()
            .zip(&up.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / input.data.len() as f64;
        assert!(mse.sqrt() < 0.02, "rmse {}", mse.sqrt());
    }

    proptest! {
        #[test]
        fn range_preservation(
            vals in prop::collection::vec(0.0f32..1.0, 64),
            ratio in 0.3f64..3.0,
        ) {
            let input = Raster::new(1, 8, 8, vals);
            let out = resize_bilinear(&input, ScaleFactor::new(ratio).unwrap()).unwrap();
            let lo = input.data.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = input.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &v in &out.data {
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}
