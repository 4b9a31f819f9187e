//! Valid-padded NHWC max pooling.

use super::{mismatch, Float, Result};

pub fn pool_output_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel > 0 && stride > 0 && len >= kernel).then(|| (len - kernel) / stride + 1)
}

/// Returns the pooled values and, per output element, the flat input index
/// of the maximum (first occurrence in row-major window order on ties).
pub(crate) fn maxpool2d_forward<T: Float>(
    x: &[T],
    shape: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    let &[n, h, w, c] = shape else {
        return Err(mismatch("maxpool2d", format!("expected NHWC input, got {shape:?}")));
    };
    let oh = pool_output_len(h, kernel.0, stride.0)
        .ok_or_else(|| mismatch("maxpool2d", format!("height {h} < kernel {}", kernel.0)))?;
    let ow = pool_output_len(w, kernel.1, stride.1)
        .ok_or_else(|| mismatch("maxpool2d", format!("width {w} < kernel {}", kernel.1)))?;
    let mut out = vec![T::neg_infinity(); n * oh * ow * c];
    let mut arg = vec![0usize; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                let best = &mut out[o..o + c];
                let best_idx = &mut arg[o..o + c];
                for ky in 0..kernel.0 {
                    for kx in 0..kernel.1 {
                        let base = ((b * h + oy * stride.0 + ky) * w + ox * stride.1 + kx) * c;
                        for (ch, &v) in x[base..base + c].iter().enumerate() {
                            if v > best[ch] {
                                best[ch] = v;
                                best_idx[ch] = base + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((vec![n, oh, ow, c], out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_picks_max() {
        let (shape, out, arg) = maxpool2d_forward(&[1.0f32, 2.0, 3.0, 4.0], &[1, 2, 2, 1], (2, 2), (2, 2)).unwrap();
        assert_eq!(shape, vec![1, 1, 1, 1]);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_resolve_to_first_index() {
        let (_, _, arg) = maxpool2d_forward(&[5.0f64, 5.0, 5.0, 5.0], &[1, 2, 2, 1], (2, 2), (2, 2)).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn three_by_one_stride_two_extents() {
        assert_eq!(pool_output_len(16, 3, 2), Some(7));
        assert_eq!(pool_output_len(16, 1, 2), Some(8));
        assert_eq!(pool_output_len(257, 2, 2), Some(128));
        assert_eq!(pool_output_len(2, 3, 2), None);
    }
}
