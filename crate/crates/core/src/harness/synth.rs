//! Synthetic stand-in for image/report pairs.
//!
//! Each instance places a lung pair and a heart ellipse on the visual-token
//! grid, plants "finding" blobs inside the fused anatomy and distractor blobs
//! outside it, and renders a faint anatomy plus textured blobs into an image
//! of `grid * PATCH` pixels a side. The target lists the in-mask findings in
//! raster order, then the end token. Distractors never appear in the target.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::{fuse_masks, BinaryMask};
use crate::numerics::Matrix;

/// Pixels per visual token along each axis.
pub const PATCH: usize = 4;
/// End-of-report token.
pub const EOS: usize = 0;
pub const N_FINDING_KINDS: usize = 4;
/// `EOS` plus one token per finding kind.
pub const VOCAB_SIZE: usize = 1 + N_FINDING_KINDS;

const ANATOMY_LEVEL: f64 = 0.15;
const NOISE_STD: f64 = 0.05;

pub fn finding_token(kind: usize) -> usize {
    1 + kind
}

pub fn is_finding_token(token: usize) -> bool {
    (1..VOCAB_SIZE).contains(&token)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Blob {
    pub row: usize,
    pub col: usize,
    pub kind: usize,
    pub in_mask: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInstance {
    pub seed: u64,
    pub grid: usize,
    pub image: Matrix,
    pub lung_mask: BinaryMask,
    pub heart_mask: BinaryMask,
    pub blobs: Vec<Blob>,
    pub target: Vec<usize>,
}

impl SyntheticInstance {
    pub fn fused_mask(&self) -> BinaryMask {
        fuse_masks(&self.lung_mask, &self.heart_mask).expect("masks share a grid")
    }

    /// `grid^2 x PATCH^2` features: token-major, pixels row-major within a patch.
    pub fn patches(&self) -> Matrix {
        let g = self.grid;
        Matrix::from_fn(g * g, PATCH * PATCH, |tok, px| {
            let (tr, tc) = (tok / g, tok % g);
            let (pr, pc) = (px / PATCH, px % PATCH);
            self.image[(tr * PATCH + pr, tc * PATCH + pc)]
        })
    }
}

/// Rebuilds the target from a blob list: in-mask kinds in raster order, then `EOS`.
pub fn target_from_blobs(blobs: &[Blob], grid: usize) -> Vec<usize> {
    let mut inside: Vec<&Blob> = blobs.iter().filter(|b| b.in_mask).collect();
    inside.sort_by_key(|b| b.row * grid + b.col);
    inside
        .iter()
        .map(|b| finding_token(b.kind))
        .chain(std::iter::once(EOS))
        .collect()
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        dy * dy + dx * dx <= 1.0
    }
}

/// Anatomy in unit coordinates, randomly shifted and scaled.
fn anatomy(rng: &mut ChaCha8Rng) -> (Vec<Ellipse>, Ellipse) {
    let dy = rng.random_range(-0.06..0.06);
    let dx = rng.random_range(-0.06..0.06);
    let s = rng.random_range(0.9..1.1);
    let lungs = vec![
        Ellipse {
            cy: 0.42 + dy,
            cx: 0.27 + dx,
            ry: 0.30 * s,
            rx: 0.15 * s,
        },
        Ellipse {
            cy: 0.42 + dy,
            cx: 0.73 + dx,
            ry: 0.30 * s,
            rx: 0.15 * s,
        },
    ];
    let heart = Ellipse {
        cy: 0.72 + dy,
        cx: 0.55 + dx,
        ry: 0.13 * s,
        rx: 0.17 * s,
    };
    (lungs, heart)
}

fn blob_pattern(kind: usize, pr: usize, pc: usize) -> bool {
    let last = PATCH - 1;
    match kind {
        0 => pr == 1 || pr == 2,
        1 => pc == 1 || pc == 2,
        2 => pr == pc || pr + pc == last,
        _ => pr == 0 || pc == 0 || pr == last || pc == last,
    }
}

/// Deterministic in `seed`. `grid` is the side of the visual-token grid.
pub fn synth_instance(seed: u64, grid: usize, n_findings: usize, n_distractors: usize) -> Result<SyntheticInstance> {
    if grid < 8 {
        return Err(Error::invalid(format!("grid must be at least 8, got {grid}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lungs, heart) = anatomy(&mut rng);
    let centre = |i: usize| (i as f64 + 0.5) / grid as f64;
    let lung_mask = BinaryMask::from_fn(grid, |r, c| lungs.iter().any(|e| e.contains(centre(r), centre(c))));
    let heart_mask = BinaryMask::from_fn(grid, |r, c| heart.contains(centre(r), centre(c)));
    let fused = fuse_masks(&lung_mask, &heart_mask)?;

    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..grid * grid).partition(|&i| fused.cells()[i] == 1);
    if n_findings > inside.len() || n_distractors > outside.len() {
        return Err(Error::invalid(format!(
            "cannot place {n_findings} findings in {} mask cells and {n_distractors} distractors in {} other cells",
            inside.len(),
            outside.len()
        )));
    }
    let mut blobs = Vec::with_capacity(n_findings + n_distractors);
    for (cells, count, in_mask) in [(&inside, n_findings, true), (&outside, n_distractors, false)] {
        for i in sample(&mut rng, cells.len(), count) {
            let cell = cells[i];
            blobs.push(Blob {
                row: cell / grid,
                col: cell % grid,
                kind: rng.random_range(0..N_FINDING_KINDS),
                in_mask,
            });
        }
    }

    let side = grid * PATCH;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let px_centre = |i: usize| (i as f64 + 0.5) / side as f64;
    let mut image = Matrix::from_fn(side, side, |y, x| {
        let (fy, fx) = (px_centre(y), px_centre(x));
        let organ = lungs.iter().any(|e| e.contains(fy, fx)) || heart.contains(fy, fx);
        if organ {
            ANATOMY_LEVEL
        } else {
            0.0
        }
    });
    for b in &blobs {
        for pr in 0..PATCH {
            for pc in 0..PATCH {
                if blob_pattern(b.kind, pr, pc) {
                    image[(b.row * PATCH + pr, b.col * PATCH + pc)] += 1.0;
                }
            }
        }
    }
    for v in image.as_mut_slice() {
        *v += noise.sample(&mut rng);
    }

    let target = target_from_blobs(&blobs, grid);
    Ok(SyntheticInstance {
        seed,
        grid,
        image,
        lung_mask,
        heart_mask,
        blobs,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn no_findings_means_only_eos() {
        let inst = synth_instance(1, 8, 0, 2).unwrap();
        assert_eq!(inst.target, vec![EOS]);
    }

    #[test]
    fn same_seed_same_instance() {
        assert_eq!(
            synth_instance(42, 8, 2, 2).unwrap(),
            synth_instance(42, 8, 2, 2).unwrap()
        );
        assert_ne!(
            synth_instance(42, 8, 2, 2).unwrap(),
            synth_instance(43, 8, 2, 2).unwrap()
        );
    }

    #[test]
    fn blob_centres_respect_the_mask() {
        for seed in 0..50 {
            let inst = synth_instance(seed, 8, 3, 3).unwrap();
            let fused = inst.fused_mask();
            let inside = inst.blobs.iter().filter(|b| fused.get(b.row, b.col)).count();
            assert_eq!(inside, 3);
            for b in &inst.blobs {
                assert_eq!(fused.get(b.row, b.col), b.in_mask);
            }
            assert_eq!(inst.target.len(), 4);
        }
    }

    #[test]
    fn infeasible_packing_rejected() {
        assert!(synth_instance(3, 8, 64, 0).is_err());
        assert!(synth_instance(3, 8, 0, 64).is_err());
        assert!(synth_instance(3, 7, 1, 1).is_err());
    }

    #[test]
    fn patches_tile_the_image() {
        let inst = synth_instance(5, 8, 2, 1).unwrap();
        let p = inst.patches();
        assert_eq!(p.shape(), (64, 16));
        assert_eq!(p[(9, 5)], inst.image[(PATCH + 1, PATCH + 1)]);
    }

    #[test]
    fn anatomy_has_both_organs_at_full_scale() {
        let inst = synth_instance(6, 32, 3, 3).unwrap();
        assert!(inst.lung_mask.count() > 100);
        assert!(inst.heart_mask.count() > 20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn target_decodes_to_in_mask_blobs(seed in any::<u64>(), nf in 0usize..4, nd in 0usize..4) {
            let inst = synth_instance(seed, 8, nf, nd).unwrap();
            let fused = inst.fused_mask();
            let mut expected: Vec<(usize, usize)> = inst
                .blobs
                .iter()
                .filter(|b| fused.get(b.row, b.col))
                .map(|b| (b.row * 8 + b.col, finding_token(b.kind)))
                .collect();
            expected.sort();
            let mut want: Vec<usize> = expected.into_iter().map(|(_, t)| t).collect();
            want.push(EOS);
            prop_assert_eq!(&inst.target, &want);
            prop_assert_eq!(target_from_blobs(&inst.blobs, 8), want);
        }
    }
}
