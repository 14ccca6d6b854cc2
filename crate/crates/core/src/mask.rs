//! Hierarchical construction of layer-wise anatomical masks.
//!
//! A lung mask and a heart mask are fused with logical OR, then smoothed once
//! per decoder layer with a separable Gaussian whose size shrinks with depth:
//! layer 1 sees the most diffuse prior, layer L the sharpest.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Side of the visual-token grid at full scale (1024 tokens).
pub const MASK_GRID_SIDE: usize = 32;

/// Square {0,1} mask over the visual-token grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    side: usize,
    cells: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(side: usize) -> Self {
        BinaryMask {
            side,
            cells: vec![0; side * side],
        }
    }

    pub fn full(side: usize) -> Self {
        BinaryMask {
            side,
            cells: vec![1; side * side],
        }
    }

    /// Builds a mask from row-major cells; every cell must be 0 or 1.
    pub fn from_cells(side: usize, cells: Vec<u8>) -> Result<Self> {
        if side == 0 || cells.len() != side * side {
            return Err(Error::shape(format!(
                "{} cells do not form a {side}x{side} mask",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask cell value {bad} is not binary")));
        }
        Ok(BinaryMask { side, cells })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                cells.push(f(r, c) as u8);
            }
        }
        BinaryMask { side, cells }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.side + c] == 1
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.cells[r * self.side + c] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.side, self.side, |r, c| self.cells[r * self.side + c] as f64)
    }
}

/// Element-wise OR of the lung and heart masks.
pub fn fuse_masks(lung: &BinaryMask, heart: &BinaryMask) -> Result<BinaryMask> {
    if lung.side != heart.side {
        return Err(Error::shape(format!(
            "lung mask is {0}x{0}, heart mask is {1}x{1}",
            lung.side, heart.side
        )));
    }
    let cells = lung.cells.iter().zip(&heart.cells).map(|(a, b)| a | b).collect();
    Ok(BinaryMask { side: lung.side, cells })
}

/// `k_l = k_base + (L - (l - 1)) * k_incr` for 1-based layer `l`.
pub fn kernel_size_for_layer(layer: usize, n_layers: usize, k_base: usize, k_incr: usize) -> Result<usize> {
    if layer == 0 || layer > n_layers {
        return Err(Error::invalid(format!("layer {layer} outside 1..={n_layers}")));
    }
    if k_base % 2 == 0 {
        return Err(Error::invalid(format!("k_base must be odd, got {k_base}")));
    }
    if k_incr % 2 != 0 {
        return Err(Error::invalid(format!("k_incr must be even, got {k_incr}")));
    }
    Ok(k_base + (n_layers - (layer - 1)) * k_incr)
}

/// Per-layer kernel sizes and standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingSchedule {
    pub n_layers: usize,
    pub k_base: usize,
    pub k_incr: usize,
    kernel_sizes: Vec<usize>,
}

impl SmoothingSchedule {
    pub fn new(n_layers: usize, k_base: usize, k_incr: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("schedule needs at least one layer"));
        }
        let kernel_sizes = (1..=n_layers)
            .map(|l| kernel_size_for_layer(l, n_layers, k_base, k_incr))
            .collect::<Result<_>>()?;
        Ok(SmoothingSchedule {
            n_layers,
            k_base,
            k_incr,
            kernel_sizes,
        })
    }

    /// The full-scale ladder: 12 layers, base 3, increment 2 (27 down to 5).
    pub fn standard() -> Self {
        Self::new(12, 3, 2).expect("valid default schedule")
    }

    pub fn kernel_sizes(&self) -> &[usize] {
        &self.kernel_sizes
    }

    /// Kernel size of 1-based `layer`.
    pub fn kernel_size(&self, layer: usize) -> usize {
        self.kernel_sizes[layer - 1]
    }

    /// `(k_l - 1) / 6` for 1-based `layer`.
    pub fn sigma(&self, layer: usize) -> f64 {
        sigma_for_kernel(self.kernel_size(layer))
    }
}

pub fn sigma_for_kernel(k: usize) -> f64 {
    (k as f64 - 1.0) / 6.0
}

/// Normalised, symmetric 1-D Gaussian of odd length.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel1D {
    weights: Vec<f64>,
}

impl GaussianKernel1D {
    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Outer product `g gᵀ`, the equivalent 2-D kernel.
    pub fn outer(&self) -> Matrix {
        let k = self.size();
        Matrix::from_fn(k, k, |r, c| self.weights[r] * self.weights[c])
    }
}

/// Point-sampled Gaussian with σ = (k-1)/6, normalised to unit sum.
/// `k = 1` gives the delta kernel.
pub fn gaussian_kernel_1d(k: usize) -> Result<GaussianKernel1D> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd and positive, got {k}")));
    }
    if k == 1 {
        return Ok(GaussianKernel1D { weights: vec![1.0] });
    }
    let sigma = sigma_for_kernel(k);
    let center = (k / 2) as f64;
    let mut weights: Vec<f64> = (0..k)
        .map(|i| {
            let x = i as f64 - center;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    // Force exact mirror symmetry; summation above is not order-symmetric.
    for i in 0..k / 2 {
        weights[k - 1 - i] = weights[i];
    }
    Ok(GaussianKernel1D { weights })
}

/// Convolves along columns, then rows, with zero padding.
pub fn smooth_separable(mask: &Matrix, kernel: &GaussianKernel1D) -> Matrix {
    let vertical = convolve_axis(mask, kernel.weights(), Axis::Vertical);
    convolve_axis(&vertical, kernel.weights(), Axis::Horizontal)
}

#[derive(Clone, Copy)]
enum Axis {
    Vertical,
    Horizontal,
}

fn convolve_axis(src: &Matrix, w: &[f64], axis: Axis) -> Matrix {
    let (h, wd) = src.shape();
    let half = (w.len() / 2) as isize;
    Matrix::from_fn(h, wd, |r, c| {
        let mut acc = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            let off = half - i as isize;
            let (sr, sc) = match axis {
                Axis::Vertical => (r as isize + off, c as isize),
                Axis::Horizontal => (r as isize, c as isize + off),
            };
            if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < wd {
                acc += wi * src[(sr as usize, sc as usize)];
            }
        }
        acc
    })
}

/// The L smoothed masks, index 0 being decoder layer 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    schedule: SmoothingSchedule,
    layers: Vec<Matrix>,
    normalized: bool,
}

impl MaskStack {
    pub fn schedule(&self) -> &SmoothingSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Smoothed mask of 1-based `layer`.
    pub fn layer(&self, layer: usize) -> &Matrix {
        &self.layers[layer - 1]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Smooths `fused` once per layer of `schedule`. With `normalize` set each
/// layer is rescaled so its maximum is exactly 1 (skipped for an empty mask).
pub fn build_mask_stack(fused: &BinaryMask, schedule: &SmoothingSchedule, normalize: bool) -> Result<MaskStack> {
    let base = fused.to_matrix();
    let layers = schedule
        .kernel_sizes()
        .iter()
        .map(|&k| {
            let g = gaussian_kernel_1d(k)?;
            let mut m = smooth_separable(&base, &g);
            let peak = m.max_value();
            if normalize && peak > 0.0 {
                for v in m.as_mut_slice() {
                    *v = (*v / peak).min(1.0);
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    Ok(MaskStack {
        schedule: schedule.clone(),
        layers,
        normalized: normalize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::conv2d_full;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, side: usize) -> BinaryMask {
        BinaryMask::from_fn(side, |_, _| rng.random_bool(0.3))
    }

    #[test]
    fn fuse_examples() {
        let zero = BinaryMask::empty(32);
        assert_eq!(fuse_masks(&zero, &zero).unwrap(), zero);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mask(&mut rng, 32);
        assert_eq!(fuse_masks(&m, &zero).unwrap(), m);

        let lung = BinaryMask::from_fn(32, |r, c| (4..12).contains(&r) && (3..9).contains(&c));
        let heart = BinaryMask::from_fn(32, |r, c| (20..26).contains(&r) && (14..22).contains(&c));
        let fused = fuse_masks(&lung, &heart).unwrap();
        assert_eq!(fused.count(), lung.count() + heart.count());
    }

    #[test]
    fn fuse_rejects_mismatched_sides() {
        assert!(fuse_masks(&BinaryMask::empty(32), &BinaryMask::empty(8)).is_err());
    }

    #[test]
    fn from_cells_rejects_non_binary() {
        assert!(BinaryMask::from_cells(2, vec![0, 1, 2, 0]).is_err());
        assert!(BinaryMask::from_cells(2, vec![0, 1, 1]).is_err());
    }

    #[test]
    fn kernel_ladder() {
        assert_eq!(kernel_size_for_layer(1, 12, 3, 2).unwrap(), 27);
        assert_eq!(kernel_size_for_layer(12, 12, 3, 2).unwrap(), 5);
        assert_eq!(kernel_size_for_layer(1, 1, 3, 2).unwrap(), 5);
        assert!(kernel_size_for_layer(0, 12, 3, 2).is_err());
        assert!(kernel_size_for_layer(13, 12, 3, 2).is_err());
        assert!(kernel_size_for_layer(1, 12, 4, 2).is_err());
        assert!(kernel_size_for_layer(1, 12, 3, 1).is_err());
    }

    #[test]
    fn default_schedule_sigmas() {
        let s = SmoothingSchedule::standard();
        assert_eq!(s.kernel_sizes(), &[27, 25, 23, 21, 19, 17, 15, 13, 11, 9, 7, 5]);
        assert_eq!(s.sigma(1), 26.0 / 6.0);
        assert_eq!(s.sigma(12), 4.0 / 6.0);
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_kernel_1d(1).unwrap().weights(), &[1.0]);

        // Independent evaluation for k = 3, sigma = 1/3.
        let raw: Vec<f64> = [-1.0f64, 0.0, 1.0]
            .iter()
            .map(|x| (-x * x / (2.0 * (1.0f64 / 3.0).powi(2))).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let g = gaussian_kernel_1d(3).unwrap();
        for (w, r) in g.weights().iter().zip(&raw) {
            assert!((w - r / total).abs() <= 1e-15);
        }

        for k in (1..=41).step_by(2) {
            let g = gaussian_kernel_1d(k).unwrap();
            let w = g.weights();
            assert_eq!(w[0], w[k - 1]);
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let c = k / 2;
            assert!(w[..c].windows(2).all(|p| p[0] <= p[1]));
            assert!(w[c..].windows(2).all(|p| p[0] >= p[1]));
        }
        assert!(gaussian_kernel_1d(0).is_err());
        assert!(gaussian_kernel_1d(4).is_err());
    }

    #[test]
    fn smoothing_trivial_cases() {
        let g = gaussian_kernel_1d(7).unwrap();
        assert_eq!(smooth_separable(&Matrix::zeros(32, 32), &g), Matrix::zeros(32, 32));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_mask(&mut rng, 32).to_matrix();
        assert_eq!(smooth_separable(&m, &gaussian_kernel_1d(1).unwrap()), m);
    }

    #[test]
    fn separable_matches_full_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let m = random_mask(&mut rng, 32).to_matrix();
            for k in [3, 5, 27] {
                let g = gaussian_kernel_1d(k).unwrap();
                let fast = smooth_separable(&m, &g);
                let slow = conv2d_full(&m, &g.outer()).unwrap();
                assert!(fast.max_abs_diff(&slow) <= 1e-12);
            }
        }
    }

    #[test]
    fn stack_examples() {
        let s = SmoothingSchedule::standard();
        let stack = build_mask_stack(&BinaryMask::empty(32), &s, true).unwrap();
        assert_eq!(stack.n_layers(), 12);
        assert!(stack.layers().iter().all(|m| m.max_value() == 0.0));

        let mut impulse = BinaryMask::empty(32);
        impulse.set(13, 17, true);
        let stack = build_mask_stack(&impulse, &s, true).unwrap();
        for m in stack.layers() {
            assert_eq!(m[(13, 17)], 1.0);
            assert_eq!(m.max_value(), 1.0);
        }
    }

    #[test]
    fn impulse_spread_shrinks_with_depth() {
        let s = SmoothingSchedule::standard();
        let mut impulse = BinaryMask::empty(32);
        impulse.set(16, 16, true);
        let stack = build_mask_stack(&impulse, &s, true).unwrap();
        let spread: Vec<usize> = stack
            .layers()
            .iter()
            .map(|m| {
                let thr = 0.01 * m.max_value();
                m.as_slice().iter().filter(|&&v| v > thr).count()
            })
            .collect();
        assert!(spread.windows(2).all(|p| p[0] >= p[1]), "{spread:?}");
        assert!(spread[0] > spread[11]);
    }

    #[test]
    fn unnormalized_stack_is_raw_smoothing() {
        let s = SmoothingSchedule::new(2, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fused = random_mask(&mut rng, 32);
        let stack = build_mask_stack(&fused, &s, false).unwrap();
        let expect = smooth_separable(&fused.to_matrix(), &gaussian_kernel_1d(7).unwrap());
        assert_eq!(stack.layer(1), &expect);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn stack_values_bounded_and_support_preserved(
            seed in any::<u64>(),
            n_layers in 1usize..6,
            normalize in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fused = random_mask(&mut rng, 16);
            let s = SmoothingSchedule::new(n_layers, 3, 2).unwrap();
            let stack = build_mask_stack(&fused, &s, normalize).unwrap();
            prop_assert!(s.kernel_sizes().windows(2).all(|p| p[0] > p[1]));
            for m in stack.layers() {
                prop_assert!(m.min_value() >= 0.0 && m.max_value() <= 1.0 + 1e-12);
                if normalize {
                    prop_assert_eq!(m.max_value() == 1.0, !fused.is_empty());
                }
                for (v, &b) in m.as_slice().iter().zip(fused.cells()) {
                    if b == 1 {
                        prop_assert!(*v > 0.0);
                    }
                }
            }
            let again = build_mask_stack(&fused, &s, normalize).unwrap();
            prop_assert_eq!(stack, again);
        }
    }
}
