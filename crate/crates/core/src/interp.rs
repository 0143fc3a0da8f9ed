//! Linear interpolation helpers shared by the synthetic generator, the
//! codec resampling adapters and map rendering.

use ndarray::{Array2, ArrayView2};

/// Per-output-index source pair and blend weights for 1-D linear resampling
/// with endpoint alignment. Weights of each row sum to one.
pub fn linear_interp_weights(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64, f64)> {
    assert!(src_len >= 1 && dst_len >= 1);
    (0..dst_len)
        .map(|i| {
            if dst_len == 1 || src_len == 1 {
                return (0, 0, 1.0, 0.0);
            }
            let pos = i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            let frac = pos - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub fn bilinear_resize(src: &ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let rows = linear_interp_weights(h, out_h);
    let cols = linear_interp_weights(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (r0, r1, rw0, rw1) = rows[i];
        let (c0, c1, cw0, cw1) = cols[j];
        (rw0 * (cw0 * src[[r0, c0]] as f64 + cw1 * src[[r0, c1]] as f64)
            + rw1 * (cw0 * src[[r1, c0]] as f64 + cw1 * src[[r1, c1]] as f64)) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_when_sizes_match() {
        let src = array![[1.0f32, 2.0], [3.0, 4.0]];
        assert_eq!(bilinear_resize(&src.view(), 2, 2), src);
    }

    #[test]
    fn endpoints_are_preserved() {
        let src = array![[0.0f32, 1.0, 2.0, 3.0]];
        let up = bilinear_resize(&src.view(), 1, 7);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[0, 6]], 3.0);
        assert!((up[[0, 3]] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn weights_rows_sum_to_one() {
        for (src, dst) in [(181, 256), (256, 181), (12, 32), (1, 5)] {
            for (_, _, w0, w1) in linear_interp_weights(src, dst) {
                assert!((w0 + w1 - 1.0).abs() < 1e-12);
            }
        }
    }
}
