use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-spaced frequencies in `[1, max(1, extent/2)]`.
pub fn band_frequencies(extent: usize, bands: usize) -> Vec<f64> {
    let top = (extent as f64 / 2.0).max(1.0);
    if bands == 1 {
        return vec![1.0];
    }
    (0..bands)
        .map(|b| top.powf(b as f64 / (bands - 1) as f64))
        .collect()
}

/// Fourier features over a grid with the given extents, row-major over grid
/// cells. Each coordinate is normalized to `[-1, 1]`; per dimension the
/// features are `[sin(π f_b x) for b] ++ [cos(π f_b x) for b]`.
pub fn fourier_pe(extents: &[usize], bands: usize, width: usize) -> Result<Tensor> {
    let dims = extents.len();
    if dims == 0 || bands == 0 || 2 * dims * bands != width {
        return Err(Error::invalid_shape(
            "fourier_pe",
            format!("{dims} dims × {bands} bands × 2 != width {width}"),
        ));
    }
    let freqs: Vec<Vec<f64>> = extents.iter().map(|e| band_frequencies(*e, bands)).collect();
    let cells: usize = extents.iter().product();
    let mut data = Vec::with_capacity(cells * width);
    let mut coord = vec![0usize; dims];
    for _ in 0..cells {
        for (d, &c) in coord.iter().enumerate() {
            let e = extents[d];
            let x = if e > 1 { -1.0 + 2.0 * c as f64 / (e - 1) as f64 } else { 0.0 };
            data.extend(freqs[d].iter().map(|f| (PI * f * x).sin()));
            data.extend(freqs[d].iter().map(|f| (PI * f * x).cos()));
        }
        for d in (0..dims).rev() {
            coord[d] += 1;
            if coord[d] < extents[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Tensor::new(&[cells, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let pe = fourier_pe(&[3], 4, 8).unwrap();
        let mid = pe.row(1);
        assert!(mid[..4].iter().all(|v| *v == 0.0));
        assert!(mid[4..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn paper_patch_grid_rows_distinct() {
        let pe = fourier_pe(&[30, 16], 64, 256).unwrap();
        assert_eq!(pe.shape(), &[480, 256]);
        let mut min_dist = f64::INFINITY;
        for i in 0..480 {
            for j in i + 1..480 {
                let d: f64 = pe.row(i).iter().zip(pe.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        assert!(min_dist > 1e-3, "{min_dist}");
        assert_eq!(pe, fourier_pe(&[30, 16], 64, 256).unwrap());
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(fourier_pe(&[30, 16], 64, 255).is_err());
        assert!(fourier_pe(&[], 4, 0).is_err());
    }

    #[test]
    fn bands_span_one_to_half_extent() {
        let f = band_frequencies(30, 64);
        assert_eq!(f[0], 1.0);
        assert!((f[63] - 15.0).abs() < 1e-12);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }
}
