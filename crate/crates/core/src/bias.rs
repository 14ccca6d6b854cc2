//! Layer-wise anatomical attention bias.
//!
//! Each smoothed layer mask is flattened to a per-key vector over the visual
//! tokens, zero-extended across the text keys, tiled across query rows and
//! restricted by the causal mask. The result is added to the scaled attention
//! logits of the matching decoder layer before softmax.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskStack};
use crate::numerics::Matrix;

/// A flattened per-visual-key mask vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatMask {
    values: Vec<f64>,
}

impl FlatMask {
    pub fn from_values(values: Vec<f64>) -> Self {
        FlatMask { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Inverse of [`flatten_mask`].
    pub fn unflatten(&self) -> Result<Matrix> {
        let side = (self.values.len() as f64).sqrt().round() as usize;
        if side * side != self.values.len() {
            return Err(Error::shape(format!(
                "{} values are not a square grid",
                self.values.len()
            )));
        }
        Matrix::from_vec(side, side, self.values.clone())
    }
}

/// Row-major flattening: cell (r, c) lands at index `side * r + c`.
pub fn flatten_mask(mask: &Matrix) -> Result<FlatMask> {
    if mask.rows() != mask.cols() || mask.is_empty() {
        return Err(Error::shape(format!(
            "mask must be a non-empty square grid, got {}x{}",
            mask.rows(),
            mask.cols()
        )));
    }
    Ok(FlatMask {
        values: mask.as_slice().to_vec(),
    })
}

/// Which keys each query row may see. Row `i` is the query at absolute
/// sequence position `query_offset + i`; column `s` is key position `s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalMask {
    rows: usize,
    cols: usize,
    query_offset: usize,
    visible: Vec<u8>,
}

impl CausalMask {
    /// Standard causal pattern for the last `t_rep` queries of a
    /// `total_len`-long sequence.
    pub fn causal(t_rep: usize, total_len: usize) -> Result<Self> {
        if t_rep > total_len {
            return Err(Error::shape(format!("{t_rep} query rows exceed {total_len} keys")));
        }
        let query_offset = total_len - t_rep;
        let mut visible = Vec::with_capacity(t_rep * total_len);
        for i in 0..t_rep {
            let pos = query_offset + i;
            visible.extend((0..total_len).map(|s| (s <= pos) as u8));
        }
        Ok(CausalMask {
            rows: t_rep,
            cols: total_len,
            query_offset,
            visible,
        })
    }

    /// Arbitrary visibility grid (`cells` row-major, values 0/1).
    pub fn from_cells(rows: usize, cols: usize, query_offset: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} cells for a {rows}x{cols} causal mask",
                cells.len()
            )));
        }
        if cells.iter().any(|&v| v > 1) {
            return Err(Error::invalid("causal mask cells must be 0 or 1"));
        }
        Ok(CausalMask {
            rows,
            cols,
            query_offset,
            visible: cells,
        })
    }

    /// Hides every key at position `>= valid_len` (right padding).
    pub fn with_key_padding(mut self, valid_len: usize) -> Self {
        for r in 0..self.rows {
            for s in valid_len.min(self.cols)..self.cols {
                self.visible[r * self.cols + s] = 0;
            }
        }
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn query_offset(&self) -> usize {
        self.query_offset
    }

    #[inline]
    pub fn is_visible(&self, row: usize, key: usize) -> bool {
        self.visible[row * self.cols + key] == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BiasMode {
    NoMask,
    Mask,
    HiddenMask,
}

impl BiasMode {
    pub const ALL: [BiasMode; 3] = [BiasMode::NoMask, BiasMode::Mask, BiasMode::HiddenMask];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::NoMask => "nomask",
            BiasMode::Mask => "mask",
            BiasMode::HiddenMask => "hidden",
        }
    }
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nomask" | "no-mask" | "none" => Ok(BiasMode::NoMask),
            "mask" => Ok(BiasMode::Mask),
            "hidden" | "hidden-mask" | "hiddenmask" => Ok(BiasMode::HiddenMask),
            other => Err(Error::invalid(format!("unknown bias mode {other:?}"))),
        }
    }
}

/// Everything needed to produce the bias for any layer and sequence length.
/// Holds no trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasPlan {
    mode: BiasMode,
    layers: Vec<FlatMask>,
    scale: f64,
    visual_len: usize,
}

impl BiasPlan {
    pub fn no_mask(visual_len: usize) -> Self {
        BiasPlan {
            mode: BiasMode::NoMask,
            layers: Vec::new(),
            scale: 1.0,
            visual_len,
        }
    }

    /// Additive bias from the smoothed stack, multiplied by `scale`.
    pub fn mask(stack: &MaskStack, scale: f64) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::invalid(format!("bias scale must be finite, got {scale}")));
        }
        let layers = stack.layers().iter().map(flatten_mask).collect::<Result<Vec<_>>>()?;
        let visual_len = layers[0].len();
        Ok(BiasPlan {
            mode: BiasMode::Mask,
            layers,
            scale,
            visual_len,
        })
    }

    /// Hard elimination of out-of-mask visual keys, identical in every layer.
    pub fn hidden(fused: &BinaryMask, n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("bias plan needs at least one layer"));
        }
        let flat = hidden_mask_flat(fused)?;
        Ok(BiasPlan {
            mode: BiasMode::HiddenMask,
            visual_len: flat.len(),
            layers: vec![flat; n_layers],
            scale: 1.0,
        })
    }

    /// Builds the plan for `mode` from a fused mask and its smoothed stack.
    pub fn for_mode(mode: BiasMode, fused: &BinaryMask, stack: &MaskStack, scale: f64) -> Result<Self> {
        match mode {
            BiasMode::NoMask => Ok(Self::no_mask(fused.side() * fused.side())),
            BiasMode::Mask => Self::mask(stack, scale),
            BiasMode::HiddenMask => Self::hidden(fused, stack.n_layers()),
        }
    }

    pub fn mode(&self) -> BiasMode {
        self.mode
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn visual_len(&self) -> usize {
        self.visual_len
    }

    /// Number of layers carried; zero for `NoMask`, which applies to any depth.
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn flat_masks(&self) -> &[FlatMask] {
        &self.layers
    }
}

/// Rank-1 tiling `1_{t_rep} rowᵀ`, kept factored until restricted.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledBias {
    row: Vec<f64>,
    t_rep: usize,
}

impl TiledBias {
    pub fn t_rep(&self) -> usize {
        self.t_rep
    }

    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.t_rep, self.row.len(), |_, c| self.row[c])
    }
}

/// Replicates `row` across `t_rep` query rows.
pub fn tile_bias(row: &[f64], t_rep: usize) -> Result<TiledBias> {
    if t_rep == 0 {
        return Err(Error::invalid("t_rep must be at least 1"));
    }
    Ok(TiledBias {
        row: row.to_vec(),
        t_rep,
    })
}

/// The bias actually added to one layer's logits (`t_rep` × key length).
#[derive(Clone, Debug, PartialEq)]
pub struct BiasMatrix {
    grid: Matrix,
}

impl BiasMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BiasMatrix {
            grid: Matrix::zeros(rows, cols),
        }
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.grid
    }

    pub fn into_matrix(self) -> Matrix {
        self.grid
    }

    pub fn rows(&self) -> usize {
        self.grid.rows()
    }

    pub fn cols(&self) -> usize {
        self.grid.cols()
    }
}

/// Element-wise product with the causal mask, except that a hidden entry is
/// exactly 0 even when the tile holds `-inf`.
pub fn apply_causal_restriction(tiled: &TiledBias, causal: &CausalMask) -> Result<BiasMatrix> {
    if tiled.t_rep != causal.rows || tiled.row.len() != causal.cols {
        return Err(Error::shape(format!(
            "tile {}x{} vs causal mask {}x{}",
            tiled.t_rep,
            tiled.row.len(),
            causal.rows,
            causal.cols
        )));
    }
    let grid = Matrix::from_fn(causal.rows, causal.cols, |r, s| {
        if causal.is_visible(r, s) {
            tiled.row[s]
        } else {
            0.0
        }
    });
    Ok(BiasMatrix { grid })
}

/// `logits + bias`.
pub fn bias_logits(logits: &Matrix, bias: &BiasMatrix) -> Result<Matrix> {
    logits.add(&bias.grid)
}

/// Zero-pads (or truncates) a visual-key vector to `total_len` keys.
pub fn extend_bias_row(m: &FlatMask, total_len: usize) -> Vec<f64> {
    let mut row = vec![0.0; total_len];
    let n = total_len.min(m.len());
    row[..n].copy_from_slice(&m.values[..n]);
    row
}

/// 0 at in-mask cells, `-inf` elsewhere.
pub fn hidden_mask_flat(fused: &BinaryMask) -> Result<FlatMask> {
    if fused.is_empty() {
        return Err(Error::invalid(
            "hidden-mask bias from an empty mask would eliminate every visual key",
        ));
    }
    let values = fused
        .cells()
        .iter()
        .map(|&b| if b == 1 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Ok(FlatMask { values })
}

/// Bias for 1-based `layer` over the rows and keys described by `causal`.
///
/// `HiddenMask` only eliminates keys for queries at positions at or beyond
/// `visual_len`; visual-prefix queries get zero bias so that no prefix row is
/// left without a visible key.
pub fn make_layer_bias(plan: &BiasPlan, layer: usize, causal: &CausalMask) -> Result<BiasMatrix> {
    let (t_rep, total_len) = (causal.rows, causal.cols);
    if t_rep == 0 {
        return Err(Error::invalid("t_rep must be at least 1"));
    }
    if plan.mode == BiasMode::NoMask {
        return Ok(BiasMatrix::zeros(t_rep, total_len));
    }
    if layer == 0 || layer > plan.layers.len() {
        return Err(Error::invalid(format!(
            "layer {layer} outside 1..={}",
            plan.layers.len()
        )));
    }
    let mut row = extend_bias_row(&plan.layers[layer - 1], total_len);
    if plan.mode == BiasMode::Mask && plan.scale != 1.0 {
        for v in &mut row {
            *v *= plan.scale;
        }
    }
    let mut bias = apply_causal_restriction(&tile_bias(&row, t_rep)?, causal)?;
    if plan.mode == BiasMode::HiddenMask {
        let prefix_rows = plan.visual_len.saturating_sub(causal.query_offset).min(t_rep);
        for r in 0..prefix_rows {
            bias.grid.row_mut(r).fill(0.0);
        }
    }
    Ok(bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_mask_stack, SmoothingSchedule};
    use crate::numerics::softmax_rows;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_is_row_major() {
        let mut m = Matrix::zeros(32, 32);
        m[(0, 0)] = 1.0;
        let f = flatten_mask(&m).unwrap();
        assert_eq!(f.as_slice().iter().position(|&v| v == 1.0), Some(0));
        let mut m = Matrix::zeros(32, 32);
        m[(1, 0)] = 1.0;
        let f = flatten_mask(&m).unwrap();
        assert_eq!(f.as_slice().iter().position(|&v| v == 1.0), Some(32));
        assert!(flatten_mask(&Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn tile_examples() {
        let t = tile_bias(&[0.1, 0.2, 0.3, 0.4], 3).unwrap().to_matrix();
        assert_eq!(t.rows(), 3);
        for r in 0..3 {
            assert_eq!(t.row(r), &[0.1, 0.2, 0.3, 0.4]);
        }
        assert_eq!(tile_bias(&[1.0, 2.0], 1).unwrap().to_matrix().row(0), &[1.0, 2.0]);
        assert!(tile_bias(&[1.0], 0).is_err());
    }

    #[test]
    fn restriction_examples() {
        let tiled = tile_bias(&[0.5; 6], 4).unwrap();
        let ones = CausalMask::from_cells(4, 6, 0, vec![1; 24]).unwrap();
        assert_eq!(
            apply_causal_restriction(&tiled, &ones).unwrap().as_matrix(),
            &tiled.to_matrix()
        );
        let zeros = CausalMask::from_cells(4, 6, 0, vec![0; 24]).unwrap();
        assert_eq!(
            apply_causal_restriction(&tiled, &zeros).unwrap().as_matrix(),
            &Matrix::zeros(4, 6)
        );

        let cells: Vec<u8> = (0..24).map(|i| (((i / 6) + (i % 6)) % 2) as u8).collect();
        let checker = CausalMask::from_cells(4, 6, 0, cells.clone()).unwrap();
        let b = apply_causal_restriction(&tiled, &checker).unwrap();
        for (v, c) in b.as_matrix().as_slice().iter().zip(&cells) {
            assert_eq!(*v, if *c == 1 { 0.5 } else { 0.0 });
        }

        let wrong = CausalMask::causal(3, 6).unwrap();
        assert!(apply_causal_restriction(&tiled, &wrong).is_err());
    }

    #[test]
    fn restriction_wins_over_neg_infinity() {
        let tiled = tile_bias(&[f64::NEG_INFINITY, 0.0], 2).unwrap();
        let causal = CausalMask::from_cells(2, 2, 0, vec![0, 1, 1, 1]).unwrap();
        let b = apply_causal_restriction(&tiled, &causal).unwrap();
        assert_eq!(b.as_matrix().row(0), &[0.0, 0.0]);
        assert_eq!(b.as_matrix()[(1, 0)], f64::NEG_INFINITY);
    }

    #[test]
    fn bias_logits_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Matrix::from_fn(3, 5, |_, _| rng.random_range(-2.0..2.0));
        assert_eq!(bias_logits(&logits, &BiasMatrix::zeros(3, 5)).unwrap(), logits);

        let constant = BiasMatrix {
            grid: Matrix::filled(3, 5, 1.7),
        };
        let a = softmax_rows(&logits).unwrap();
        let b = softmax_rows(&bias_logits(&logits, &constant).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);

        assert!(bias_logits(&logits, &BiasMatrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn subset_bias_raises_subset_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Matrix::from_fn(1, 8, |_, _| rng.random_range(-2.0..2.0));
        let support = [1usize, 4, 6];
        let mut grid = Matrix::zeros(1, 8);
        for &s in &support {
            grid[(0, s)] = 1.0;
        }
        let before = softmax_rows(&logits).unwrap();
        let after = softmax_rows(&bias_logits(&logits, &BiasMatrix { grid }).unwrap()).unwrap();
        let mass = |p: &Matrix| support.iter().map(|&s| p[(0, s)]).sum::<f64>();
        assert!(mass(&after) > mass(&before));
    }

    #[test]
    fn extend_examples() {
        let m = FlatMask::from_values((0..1024).map(|i| (i % 7) as f64 / 7.0).collect());
        assert_eq!(extend_bias_row(&m, 1024), m.as_slice());
        let e = extend_bias_row(&m, 1500);
        assert!(e[1024..].iter().all(|&v| v == 0.0));
        let e = extend_bias_row(&m, 2048);
        assert_eq!(&e[..1024], m.as_slice());
        assert!(e[1024..].iter().all(|&v| v == 0.0));
        assert_eq!(extend_bias_row(&m, 10), &m.as_slice()[..10]);
    }

    #[test]
    fn hidden_flat_examples() {
        let all = hidden_mask_flat(&BinaryMask::full(32)).unwrap();
        assert!(all.as_slice().iter().all(|&v| v == 0.0));
        assert!(hidden_mask_flat(&BinaryMask::empty(32)).is_err());

        let mut single = BinaryMask::empty(4);
        single.set(2, 1, true);
        let flat = hidden_mask_flat(&single).unwrap();
        let logits = Matrix::from_fn(1, 16, |_, c| c as f64 * 0.1);
        let biased = bias_logits(
            &logits,
            &BiasMatrix {
                grid: Matrix::row_vector(flat.as_slice().to_vec()),
            },
        )
        .unwrap();
        let p = softmax_rows(&biased).unwrap();
        assert_eq!(p[(0, 9)], 1.0);
    }

    #[test]
    fn hidden_half_mask_matches_subset_softmax() {
        let half = BinaryMask::from_fn(4, |r, _| r < 2);
        let flat = hidden_mask_flat(&half).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let biased: Vec<f64> = logits.iter().zip(flat.as_slice()).map(|(a, b)| a + b).collect();
        let p = softmax_rows(&Matrix::row_vector(biased)).unwrap();
        let z: f64 = logits[..8].iter().map(|v| v.exp()).sum();
        for i in 0..16 {
            if i < 8 {
                assert!((p[(0, i)] - logits[i].exp() / z).abs() <= 1e-12);
            } else {
                assert_eq!(p[(0, i)], 0.0);
            }
        }
    }

    fn stack_for(fused: &BinaryMask, n_layers: usize) -> MaskStack {
        build_mask_stack(fused, &SmoothingSchedule::new(n_layers, 3, 2).unwrap(), true).unwrap()
    }

    #[test]
    fn layer_bias_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fused = BinaryMask::from_fn(32, |_, _| rng.random_bool(0.4));
        let stack = stack_for(&fused, 3);
        let causal = CausalMask::causal(4, 1100).unwrap();

        let none = make_layer_bias(&BiasPlan::no_mask(1024), 2, &causal).unwrap();
        assert_eq!(none.as_matrix(), &Matrix::zeros(4, 1100));

        let empty_stack = stack_for(&BinaryMask::empty(32), 3);
        let zero = make_layer_bias(&BiasPlan::mask(&empty_stack, 1.0).unwrap(), 1, &causal).unwrap();
        assert_eq!(zero.as_matrix(), &Matrix::zeros(4, 1100));

        let plan = BiasPlan::mask(&stack, 1.0).unwrap();
        let b = make_layer_bias(&plan, 2, &causal).unwrap();
        let m = b.as_matrix();
        // Composition oracle: tile(extend(m_2)) restricted by the causal mask.
        let extended = extend_bias_row(&flatten_mask(stack.layer(2)).unwrap(), 1100);
        for r in 0..4 {
            for s in 0..1100 {
                let expect = if causal.is_visible(r, s) { extended[s] } else { 0.0 };
                assert_eq!(m[(r, s)], expect);
            }
            assert!(m.row(r)[1024..].iter().all(|&v| v == 0.0));
            assert_eq!(&m.row(r)[..1024], &m.row(0)[..1024]);
        }
        assert!(make_layer_bias(&plan, 4, &causal).is_err());
        assert!(make_layer_bias(&plan, 0, &causal).is_err());
    }

    #[test]
    fn scale_multiplies_mask_bias() {
        let fused = BinaryMask::from_fn(8, |r, c| r > 2 && c < 5);
        let stack = stack_for(&fused, 2);
        let causal = CausalMask::causal(3, 70).unwrap();
        let one = make_layer_bias(&BiasPlan::mask(&stack, 1.0).unwrap(), 1, &causal).unwrap();
        let two = make_layer_bias(&BiasPlan::mask(&stack, 2.5).unwrap(), 1, &causal).unwrap();
        assert_eq!(&one.as_matrix().scale(2.5), two.as_matrix());
    }

    #[test]
    fn hidden_bias_spares_prefix_rows_and_text_keys() {
        let fused = BinaryMask::from_fn(4, |r, c| r == 1 || c == 3);
        let plan = BiasPlan::hidden(&fused, 2).unwrap();
        let causal = CausalMask::causal(20, 20).unwrap();
        let b = make_layer_bias(&plan, 1, &causal).unwrap();
        let m = b.as_matrix();
        for r in 0..16 {
            assert!(m.row(r).iter().all(|&v| v == 0.0));
        }
        for r in 16..20 {
            for s in 0..20 {
                let out_of_mask = s < 16 && fused.cells()[s] == 0;
                let expect = if out_of_mask && causal.is_visible(r, s) {
                    f64::NEG_INFINITY
                } else {
                    0.0
                };
                assert_eq!(m[(r, s)], expect, "row {r} key {s}");
            }
        }
        let logits = Matrix::zeros(20, 20);
        let masked = Matrix::from_fn(20, 20, |r, s| {
            if causal.is_visible(r, s) {
                logits[(r, s)]
            } else {
                f64::NEG_INFINITY
            }
        });
        assert!(softmax_rows(&bias_logits(&masked, &b).unwrap()).is_ok());
    }

    #[test]
    fn mode_parsing() {
        for mode in BiasMode::ALL {
            assert_eq!(mode.as_str().parse::<BiasMode>().unwrap(), mode);
        }
        assert!("bogus".parse::<BiasMode>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn flatten_round_trip(values in prop::collection::vec(0.0f64..1.0, 64)) {
            let m = Matrix::from_vec(8, 8, values).unwrap();
            prop_assert_eq!(flatten_mask(&m).unwrap().unflatten().unwrap(), m);
        }

        #[test]
        fn bias_matrix_invariants(
            seed in any::<u64>(),
            t_rep in 1usize..40,
            extra in 0usize..40,
            mode_idx in 0usize..3,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut fused = BinaryMask::from_fn(6, |_, _| rng.random_bool(0.5));
            fused.set(0, 0, true);
            let stack = stack_for(&fused, 3);
            let plan = BiasPlan::for_mode(BiasMode::ALL[mode_idx], &fused, &stack, 1.0).unwrap();
            let total = (t_rep + extra).max(1);
            let causal = CausalMask::causal(t_rep.min(total), total).unwrap();
            let b = make_layer_bias(&plan, 2, &causal).unwrap();
            let m = b.as_matrix();
            for r in 0..causal.rows() {
                for s in 0..total {
                    if !causal.is_visible(r, s) || s >= 36 {
                        prop_assert_eq!(m[(r, s)], 0.0);
                    }
                    if plan.mode() == BiasMode::Mask {
                        for r2 in 0..causal.rows() {
                            if causal.is_visible(r, s) && causal.is_visible(r2, s) {
                                prop_assert_eq!(m[(r, s)], m[(r2, s)]);
                            }
                        }
                    }
                }
            }
        }
    }
}
