//! CIELAB conversion, 3-D color histograms and the color-relevance metrics
//! (Hellinger distance and KL divergence) used both for conditioning tokens
//! and for evaluation.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthspace::RasterPatch;

/// L in [0, 100], a and b in [-128, 128).
pub const L_RANGE: (f64, f64) = (0.0, 100.0);
pub const A_RANGE: (f64, f64) = (-128.0, 128.0);
pub const B_RANGE: (f64, f64) = (-128.0, 128.0);

/// Full-resolution histogram shape.
pub const FULL_BINS: (usize, usize, usize) = (10, 8, 9);
/// Toy-scale histogram shape used by the synthetic pipeline.
pub const TOY_BINS: (usize, usize, usize) = (4, 4, 4);

/// Normalized 3-D histogram over CIELAB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogram {
    pub bins: (usize, usize, usize),
    /// Flattened row-major (L, a, b) bin values, summing to 1.
    pub values: Vec<f64>,
}

impl ColorHistogram {
    pub fn bin_count(&self) -> usize {
        self.bins.0 * self.bins.1 * self.bins.2
    }

    pub fn same_layout(&self, other: &ColorHistogram) -> bool {
        self.bins == other.bins
    }

    /// Builds a histogram from raw (possibly unnormalized) nonnegative values.
    pub fn from_values(bins: (usize, usize, usize), values: Vec<f64>) -> Result<Self> {
        if values.len() != bins.0 * bins.1 * bins.2 {
            return Err(Error::invalid("histogram value count does not match bins"));
        }
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("histogram values must be finite and nonnegative"));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("histogram must have positive mass"));
        }
        let values = values.into_iter().map(|v| v / total).collect();
        Ok(ColorHistogram { bins, values })
    }
}

/// Square-root histogram padded to the model width; the conditioning token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorToken {
    pub vec: Vec<f32>,
}

impl ColorToken {
    pub fn as_array(&self) -> Array1<f32> {
        Array1::from(self.vec.clone())
    }
}

/// sRGB (components in [0,1]) to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> Result<(f64, f64, f64)> {
    for c in rgb {
        if !(0.0..=1.0).contains(&c) || !c.is_finite() {
            return Err(Error::invalid(format!("sRGB component {c} outside [0,1]")));
        }
    }
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    // linear RGB -> XYZ (D65)
    let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
    let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
    let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
    // reference white
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    let f = |t: f64| {
        let delta = 6.0f64 / 29.0;
        if t > delta.powi(3) {
            t.cbrt()
        } else {
            t / (3.0 * delta * delta) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    Ok((116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)))
}

fn axis_bin(value: f64, range: (f64, f64), n: usize) -> usize {
    let t = (value - range.0) / (range.1 - range.0);
    let idx = (t * n as f64).floor() as isize;
    idx.clamp(0, n as isize - 1) as usize
}

/// Index of the LAB bin a single sRGB color falls into.
pub fn lab_bin_of_srgb(rgb: [f64; 3], bins: (usize, usize, usize)) -> Result<usize> {
    let (l, a, b) = srgb_to_lab(rgb)?;
    let bl = axis_bin(l, L_RANGE, bins.0);
    let ba = axis_bin(a, A_RANGE, bins.1);
    let bb = axis_bin(b, B_RANGE, bins.2);
    Ok((bl * bins.1 + ba) * bins.2 + bb)
}

/// Per-pixel LAB binning over the uniform partition of the axis ranges.
pub fn lab_histogram(patch: &RasterPatch, bins: (usize, usize, usize)) -> Result<ColorHistogram> {
    let n = bins.0 * bins.1 * bins.2;
    let mut counts = vec![0.0f64; n];
    let px = patch.pixel_count();
    for (r, g, b) in patch.pixels_iter() {
        let idx = lab_bin_of_srgb([r as f64, g as f64, b as f64], bins)?;
        counts[idx] += 1.0;
    }
    for c in counts.iter_mut() {
        *c /= px as f64;
    }
    Ok(ColorHistogram { bins, values: counts })
}

/// sqrt of the histogram, zero-padded at the tail to the model width.
pub fn make_color_token(hist: &ColorHistogram, width: usize) -> Result<ColorToken> {
    let n = hist.bin_count();
    if width < n {
        return Err(Error::invalid(format!(
            "token width {width} smaller than bin count {n}"
        )));
    }
    let mut vec = vec![0.0f32; width];
    for (i, v) in hist.values.iter().enumerate() {
        vec[i] = (v.max(0.0)).sqrt() as f32;
    }
    Ok(ColorToken { vec })
}

fn check_layout(h1: &ColorHistogram, h2: &ColorHistogram) -> Result<()> {
    if !h1.same_layout(h2) {
        return Err(Error::invalid("histogram bin layouts differ"));
    }
    Ok(())
}

/// Hellinger distance sqrt(1 - sum sqrt(p q)), clamped to [0, 1].
pub fn hellinger(h1: &ColorHistogram, h2: &ColorHistogram) -> Result<f64> {
    check_layout(h1, h2)?;
    let bc: f64 = h1
        .values
        .iter()
        .zip(h2.values.iter())
        .map(|(p, q)| (p * q).sqrt())
        .sum();
    Ok((1.0 - bc).clamp(0.0, 1.0).sqrt())
}

/// KL(h1 || h2) with epsilon smoothing and renormalization on both sides.
pub fn kl_divergence(h1: &ColorHistogram, h2: &ColorHistogram) -> Result<f64> {
    check_layout(h1, h2)?;
    let eps = 1e-8;
    let n = h1.values.len() as f64;
    let z1: f64 = h1.values.iter().sum::<f64>() + eps * n;
    let z2: f64 = h2.values.iter().sum::<f64>() + eps * n;
    let kl: f64 = h1
        .values
        .iter()
        .zip(h2.values.iter())
        .map(|(p, q)| {
            let ps = (p + eps) / z1;
            let qs = (q + eps) / z2;
            ps * (ps / qs).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthspace::RasterPatch;

    /// Independent CIE oracle: same standard, different formulation (matrix
    /// written transposed, branch thresholds in rational form, f32 walk-through
    /// avoided by staying in f64). Kept deliberately separate from the
    /// implementation above.
    fn oracle_srgb_to_lab(rgb: [f64; 3]) -> (f64, f64, f64) {
        fn inv_gamma(c: f64) -> f64 {
            if c > 0.04045 {
                ((c + 0.055) / 1.055).powf(2.4)
            } else {
                c * (1.0 / 12.92)
            }
        }
        let r = inv_gamma(rgb[0]);
        let g = inv_gamma(rgb[1]);
        let b = inv_gamma(rgb[2]);
        let m = [
            [0.4124564, 0.2126729, 0.0193339],
            [0.3575761, 0.7151522, 0.1191920],
            [0.1804375, 0.0721750, 0.9503041],
        ];
        let xyz = [
            r * m[0][0] + g * m[1][0] + b * m[2][0],
            r * m[0][1] + g * m[1][1] + b * m[2][1],
            r * m[0][2] + g * m[1][2] + b * m[2][2],
        ];
        let white = [0.95047, 1.0, 1.08883];
        let f = |t: f64| {
            if t > 216.0 / 24389.0 {
                t.powf(1.0 / 3.0)
            } else {
                (24389.0 / 27.0 * t + 16.0) / 116.0
            }
        };
        let fx = f(xyz[0] / white[0]);
        let fy = f(xyz[1] / white[1]);
        let fz = f(xyz[2] / white[2]);
        (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
    }

    fn uniform_patch(color: [f32; 3]) -> RasterPatch {
        RasterPatch::filled(8, 8, color)
    }

    fn one_hot_hist(bins: (usize, usize, usize), idx: usize) -> ColorHistogram {
        let n = bins.0 * bins.1 * bins.2;
        let mut v = vec![0.0; n];
        v[idx] = 1.0;
        ColorHistogram { bins, values: v }
    }

    #[test]
    fn black_maps_to_origin() {
        let (l, a, b) = srgb_to_lab([0.0, 0.0, 0.0]).unwrap();
        assert!(l.abs() < 1e-9 && a.abs() < 1e-9 && b.abs() < 1e-9);
    }

    #[test]
    fn white_is_reference_white() {
        let (l, a, b) = srgb_to_lab([1.0, 1.0, 1.0]).unwrap();
        assert!((l - 100.0).abs() < 0.01);
        assert!(a.abs() < 0.01 && b.abs() < 0.01);
    }

    #[test]
    fn red_matches_cie_oracle() {
        let (l, a, b) = srgb_to_lab([1.0, 0.0, 0.0]).unwrap();
        assert!((l - 53.24).abs() < 0.05);
        assert!((a - 80.09).abs() < 0.05);
        assert!((b - 67.20).abs() < 0.05);
    }

    #[test]
    fn conversion_matches_oracle_on_grid() {
        for r in 0..5 {
            for g in 0..5 {
                for b in 0..5 {
                    let rgb = [r as f64 / 4.0, g as f64 / 4.0, b as f64 / 4.0];
                    let got = srgb_to_lab(rgb).unwrap();
                    let want = oracle_srgb_to_lab(rgb);
                    assert!((got.0 - want.0).abs() < 0.05);
                    assert!((got.1 - want.1).abs() < 0.05);
                    assert!((got.2 - want.2).abs() < 0.05);
                }
            }
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(srgb_to_lab([1.2, 0.0, 0.0]).is_err());
        assert!(srgb_to_lab([-0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_gray_single_bin() {
        let h = lab_histogram(&uniform_patch([0.5, 0.5, 0.5]), TOY_BINS).unwrap();
        let nonzero: Vec<_> = h.values.iter().filter(|v| **v > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert!((*nonzero[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_black_half_white_two_bins() {
        let mut patch = RasterPatch::filled(8, 8, [0.0, 0.0, 0.0]);
        for y in 0..8 {
            for x in 0..4 {
                patch.set(x, y, [1.0, 1.0, 1.0]);
            }
        }
        let h = lab_histogram(&patch, TOY_BINS).unwrap();
        // brute-force oracle: count pixels per bin directly
        let mut oracle = vec![0usize; 64];
        for (r, g, b) in patch.pixels_iter() {
            let idx = lab_bin_of_srgb([r as f64, g as f64, b as f64], TOY_BINS).unwrap();
            oracle[idx] += 1;
        }
        for (i, c) in oracle.iter().enumerate() {
            assert!((h.values[i] - *c as f64 / 64.0).abs() < 1e-12);
        }
        let nonzero: Vec<_> = h.values.iter().filter(|v| **v > 0.0).collect();
        assert_eq!(nonzero.len(), 2);
        assert!(nonzero.iter().all(|v| (**v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn histogram_sums_to_one() {
        let mut patch = RasterPatch::filled(8, 8, [0.1, 0.7, 0.3]);
        patch.set(3, 3, [0.9, 0.2, 0.4]);
        let h = lab_histogram(&patch, TOY_BINS).unwrap();
        let s: f64 = h.values.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_pixel_order_invariant() {
        // same multiset of colors in two spatial arrangements
        let mut a = RasterPatch::filled(4, 4, [0.2, 0.2, 0.9]);
        let mut b = RasterPatch::filled(4, 4, [0.2, 0.2, 0.9]);
        a.set(0, 0, [0.9, 0.1, 0.1]);
        b.set(3, 3, [0.9, 0.1, 0.1]);
        let ha = lab_histogram(&a, TOY_BINS).unwrap();
        let hb = lab_histogram(&b, TOY_BINS).unwrap();
        assert_eq!(ha.values, hb.values);
    }

    #[test]
    fn token_padding_and_full_shape() {
        let h = ColorHistogram {
            bins: FULL_BINS,
            values: vec![1.0 / 720.0; 720],
        };
        let tok = make_color_token(&h, 768).unwrap();
        assert_eq!(tok.vec.len(), 768);
        assert!(tok.vec[720..].iter().all(|v| *v == 0.0));
        assert!(tok.vec[..720].iter().all(|v| *v > 0.0));
    }

    #[test]
    fn one_hot_token_is_one_hot() {
        let h = one_hot_hist(TOY_BINS, 5);
        let tok = make_color_token(&h, 64).unwrap();
        assert_eq!(tok.vec[5], 1.0);
        assert_eq!(tok.vec.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn uniform_token_prefix_unit_norm() {
        let b = 64usize;
        let h = ColorHistogram {
            bins: TOY_BINS,
            values: vec![1.0 / b as f64; b],
        };
        let tok = make_color_token(&h, 80).unwrap();
        let norm: f64 = tok.vec.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!((tok.vec[0] as f64 - 1.0 / (b as f64).sqrt()).abs() < 1e-7);
    }

    #[test]
    fn token_width_too_small_rejected() {
        let h = one_hot_hist(TOY_BINS, 0);
        assert!(make_color_token(&h, 10).is_err());
    }

    #[test]
    fn hellinger_identity_and_disjoint() {
        let h1 = one_hot_hist(TOY_BINS, 0);
        let h2 = one_hot_hist(TOY_BINS, 1);
        assert_eq!(hellinger(&h1, &h1).unwrap(), 0.0);
        assert!((hellinger(&h1, &h2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hellinger_half_case() {
        let bins = (2, 1, 1);
        let h1 = ColorHistogram { bins, values: vec![0.5, 0.5] };
        let h2 = ColorHistogram { bins, values: vec![1.0, 0.0] };
        // oracle: direct evaluation of the definition
        let oracle = (1.0f64 - (0.5f64.sqrt() * 1.0 + 0.0)).sqrt();
        let got = hellinger(&h1, &h2).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.5412).abs() < 1e-4);
    }

    #[test]
    fn hellinger_symmetric() {
        let bins = (2, 2, 1);
        let h1 = ColorHistogram { bins, values: vec![0.1, 0.2, 0.3, 0.4] };
        let h2 = ColorHistogram { bins, values: vec![0.4, 0.3, 0.2, 0.1] };
        let d12 = hellinger(&h1, &h2).unwrap();
        let d21 = hellinger(&h2, &h1).unwrap();
        assert_eq!(d12, d21);
        assert!(d12 > 0.0);
    }

    #[test]
    fn hellinger_layout_mismatch() {
        let h1 = one_hot_hist(TOY_BINS, 0);
        let h2 = one_hot_hist((2, 2, 2), 0);
        assert!(hellinger(&h1, &h2).is_err());
    }

    #[test]
    fn kl_identity_and_one_hot_vs_uniform() {
        let h = ColorHistogram { bins: (2, 2, 1), values: vec![0.1, 0.2, 0.3, 0.4] };
        assert!(kl_divergence(&h, &h).unwrap() < 1e-9);
        let b = 64usize;
        let one = one_hot_hist(TOY_BINS, 3);
        let uni = ColorHistogram { bins: TOY_BINS, values: vec![1.0 / b as f64; b] };
        let kl = kl_divergence(&one, &uni).unwrap();
        assert!((kl - (b as f64).ln()).abs() < 1e-3, "kl={kl}");
    }

    #[test]
    fn kl_nonneg_and_asymmetric() {
        let bins = (2, 1, 1);
        let h1 = ColorHistogram { bins, values: vec![0.9, 0.1] };
        let h2 = ColorHistogram { bins, values: vec![0.5, 0.5] };
        let d12 = kl_divergence(&h1, &h2).unwrap();
        let d21 = kl_divergence(&h2, &h1).unwrap();
        assert!(d12 >= 0.0 && d21 >= 0.0);
        assert!((d12 - d21).abs() > 1e-3);
    }
}
