use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Stretches a learned positional table to `new_len` rows. Output row `j`
/// samples the original at fractional index `j * (P - 1) / (new_len - 1)`
/// with linear interpolation between the two bracketing rows; rows that land
/// on an integer index are copied exactly.
pub fn interpolate_positions(orig: &Matrix, new_len: usize) -> Result<Matrix> {
    let old_len = orig.rows();
    if old_len < 2 || new_len < 2 {
        return Err(Error::invalid(format!(
            "positional interpolation needs at least 2 rows on both sides, got {old_len} -> {new_len}"
        )));
    }
    let denom = new_len - 1;
    let mut out = Matrix::zeros(new_len, orig.cols());
    for j in 0..new_len {
        let num = j * (old_len - 1);
        let (lo, rem) = (num / denom, num % denom);
        if rem == 0 {
            out.row_mut(j).copy_from_slice(orig.row(lo));
            continue;
        }
        let t = rem as f64 / denom as f64;
        let (a, b) = (orig.row(lo), orig.row(lo + 1));
        for (o, (x, y)) in out.row_mut(j).iter_mut().zip(a.iter().zip(b)) {
            *o = (1.0 - t) * x + t * y;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_lengths_match() {
        let m = Matrix::from_fn(7, 3, |r, c| (r * 3 + c) as f64 * 0.37 - 1.0);
        assert_eq!(interpolate_positions(&m, 7).unwrap(), m);
    }

    #[test]
    fn hand_evaluated_midpoints() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0], vec![-5.0, 0.5]]).unwrap();
        let out = interpolate_positions(&m, 5).unwrap();
        let expect = [[1.0, -2.0], [2.0, 1.0], [3.0, 4.0], [-1.0, 2.25], [-5.0, 0.5]];
        for (r, row) in expect.iter().enumerate() {
            assert_eq!(out.row(r), row);
        }
    }

    #[test]
    fn endpoints_preserved() {
        let m = Matrix::from_fn(10, 4, |r, c| ((r + 1) * (c + 2)) as f64 / 7.0);
        let out = interpolate_positions(&m, 23).unwrap();
        assert_eq!(out.row(0), m.row(0));
        assert_eq!(out.row(22), m.row(9));
    }

    #[test]
    fn degenerate_lengths_rejected() {
        assert!(interpolate_positions(&Matrix::zeros(1, 3), 4).is_err());
        assert!(interpolate_positions(&Matrix::zeros(3, 3), 1).is_err());
    }
}
