//! Small helpers over `ndarray` grids: pooling and mask predicates.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Binary mask, one byte per cell, values in `{0, 1}`.
pub type Mask = Array2<u8>;

/// Channel-first pixel or latent grid `(C, H, W)`.
pub type Planes = Array3<f64>;

pub fn is_binary(mask: &Mask) -> bool {
    mask.iter().all(|&v| v <= 1)
}

pub fn active_cells(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v == 1).count()
}

fn pool_factor(len: usize, out: usize, what: &str) -> Result<usize> {
    if out == 0 || len % out != 0 {
        return Err(Error::Shape(format!(
            "{what}: target size {out} does not divide source size {len}"
        )));
    }
    Ok(len / out)
}

/// Block-max pooling: an output cell is 1 if any covered input cell is 1.
pub fn block_max(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    let (h, w) = mask.dim();
    let fy = pool_factor(h, out_h, "block_max rows")?;
    let fx = pool_factor(w, out_w, "block_max cols")?;
    let mut out = Mask::zeros((out_h, out_w));
    for ((y, x), &v) in mask.indexed_iter() {
        if v != 0 {
            out[[y / fy, x / fx]] = 1;
        }
    }
    Ok(out)
}

/// Mean pooling over non-overlapping blocks of a 2-D grid.
pub fn avg_pool2(grid: &Array2<f64>, out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (h, w) = grid.dim();
    let fy = pool_factor(h, out_h, "avg_pool rows")?;
    let fx = pool_factor(w, out_w, "avg_pool cols")?;
    let norm = (fy * fx) as f64;
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for y in oy * fy..(oy + 1) * fy {
                for x in ox * fx..(ox + 1) * fx {
                    acc += grid[[y, x]];
                }
            }
            out[[oy, ox]] = acc / norm;
        }
    }
    Ok(out)
}

/// Mean pooling of every channel by an integer factor.
pub fn avg_pool3(planes: &Planes, factor: usize) -> Result<Planes> {
    let (c, h, w) = planes.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "avg_pool3: factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = Planes::zeros((c, oh, ow));
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        acc += planes[[ch, y, x]];
                    }
                }
                out[[ch, oy, ox]] = acc / norm;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling of every channel by an integer factor.
pub fn upsample_nearest(planes: &Planes, factor: usize) -> Planes {
    let (c, h, w) = planes.dim();
    Planes::from_shape_fn((c, h * factor, w * factor), |(ch, y, x)| {
        planes[[ch, y / factor, x / factor]]
    })
}

pub fn check_same_spatial(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_survives_block_max() {
        let mut m = Mask::zeros((512, 512));
        m[[0, 0]] = 1;
        let latent = block_max(&m, 64, 64).unwrap();
        // brute force over each 8x8 block
        let mut expected = Mask::zeros((64, 64));
        for by in 0..64 {
            for bx in 0..64 {
                let any = (0..8).any(|y| (0..8).any(|x| m[[by * 8 + y, bx * 8 + x]] == 1));
                expected[[by, bx]] = any as u8;
            }
        }
        assert_eq!(latent, expected);
        assert_eq!(active_cells(&latent), 1);
        assert_eq!(latent[[0, 0]], 1);
    }

    #[test]
    fn pooling_rejects_uneven_factor() {
        let m = Mask::zeros((10, 10));
        assert!(block_max(&m, 3, 3).is_err());
        assert!(avg_pool3(&Planes::zeros((1, 10, 10)), 4).is_err());
    }

    #[test]
    fn avg_pool_matches_mean() {
        let g = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let p = avg_pool2(&g, 2, 2).unwrap();
        assert_eq!(p[[0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(p[[1, 1]], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    proptest::proptest! {
        #[test]
        fn block_max_is_monotone(bits in proptest::collection::vec(0u8..2, 64), extra in 0usize..64) {
            let m = Mask::from_shape_vec((8, 8), bits).unwrap();
            let mut grown = m.clone();
            grown[[extra / 8, extra % 8]] = 1;
            let a = block_max(&m, 4, 4).unwrap();
            let b = block_max(&grown, 4, 4).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                proptest::prop_assert!(y >= x);
            }
        }
    }
}
