//! Patch locality and wrap-around translation analyses.
//!
//! "In isolation" for a patch means masked in place: pixels outside the
//! patch region are zeroed and the patch keeps its original position.
//! Translation convention: `dx` shifts content right, `dy` shifts content
//! up, with wrap-around; offsets are taken modulo the image size.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{NormP, PerturbationKind};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::asr_counts;
use crate::model::Classifier;
use crate::tensor::Tensor;

/// Circular shift of the last two axes: content moves right by `dx` and up
/// by `dy`. Bijective; preserves every lp norm exactly.
pub fn translate_wrap(delta: &Tensor, dx: i64, dy: i64) -> Tensor {
    let dims = delta.shape();
    assert!(dims.len() >= 2, "translate_wrap expects [..., H, W]");
    let w = dims[dims.len() - 1];
    let h = dims[dims.len() - 2];
    let planes = delta.numel() / (h * w);
    let sx = (dx.rem_euclid(w as i64)) as usize;
    let sy = (dy.rem_euclid(h as i64)) as usize;

    let mut out = Tensor::zeros(dims);
    let src = delta.data();
    let dst = out.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            let src_y = (y + sy) % h;
            let src_row = &src[base + src_y * w..base + (src_y + 1) * w];
            let dst_row = &mut dst[base + y * w..base + (y + 1) * w];
            // dst[x] = src[(x - dx) mod w]; split into two contiguous copies.
            let cut = w - sx;
            dst_row[sx..].copy_from_slice(&src_row[..cut]);
            dst_row[..sx].copy_from_slice(&src_row[cut..]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchNormRecord {
    pub original: f32,
    pub normalized: f32,
    pub zero_flagged: bool,
}

/// An image-shaped tensor that is zero outside its patch region.
#[derive(Debug, Clone)]
pub struct Patch {
    /// (row, col) of the top-left corner.
    pub origin: (usize, usize),
    /// (height, width).
    pub size: (usize, usize),
    pub tensor: Tensor,
    pub norm_record: PatchNormRecord,
}

/// `n` square patches of `delta` at seeded uniform origins, each masked in
/// place (zero outside the region, untouched inside).
pub fn extract_random_patches(
    delta: &Tensor,
    n: usize,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<Patch>> {
    let dims = delta.shape();
    if dims.len() != 3 {
        return Err(Error::BadShape(format!(
            "patches want [C,H,W], got {dims:?}"
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if patch_size > h || patch_size > w {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} exceeds image {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(n);
    for _ in 0..n {
        let oy = rng.gen_range(0..=h - patch_size);
        let ox = rng.gen_range(0..=w - patch_size);
        let mut t = Tensor::zeros(dims);
        let dst = t.data_mut();
        for ci in 0..c {
            for y in oy..oy + patch_size {
                let row = ci * h * w + y * w;
                dst[row + ox..row + ox + patch_size]
                    .copy_from_slice(&delta.data()[row + ox..row + ox + patch_size]);
            }
        }
        let norm = t.l2_norm();
        patches.push(Patch {
            origin: (oy, ox),
            size: (patch_size, patch_size),
            tensor: t,
            norm_record: PatchNormRecord {
                original: norm,
                normalized: norm,
                zero_flagged: false,
            },
        });
    }
    Ok(patches)
}

/// l2 mode scales each nonzero patch to the maximum patch l2 norm; linf mode
/// is a bitwise pass-through. All-zero patches pass through flagged.
pub fn normalize_patches(mut patches: Vec<Patch>, norm_p: NormP) -> Result<Vec<Patch>> {
    match norm_p {
        NormP::LInf => Ok(patches),
        NormP::L2 => {
            let max = patches
                .iter()
                .map(|p| p.norm_record.original)
                .fold(0.0f32, f32::max);
            if max == 0.0 {
                return Err(Error::InvalidArgument(
                    "all patches have zero norm".into(),
                ));
            }
            for p in &mut patches {
                if p.norm_record.original == 0.0 {
                    p.norm_record.zero_flagged = true;
                    continue;
                }
                let factor = max / p.norm_record.original;
                p.tensor.scale(factor);
                p.norm_record.normalized = max;
            }
            Ok(patches)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchHighlight {
    Top,
    Bottom,
    None,
}

#[derive(Debug, Clone)]
pub struct RankedPatch {
    pub patch: Patch,
    pub asr: f32,
    pub highlight: PatchHighlight,
}

#[derive(Debug, Clone)]
pub struct LocalityReport {
    /// Patches sorted by descending ASR (ties by extraction order).
    pub ranked: Vec<RankedPatch>,
    /// ASR of the whole (unpatched) perturbation on the same set.
    pub whole_asr: f32,
}

/// Extract, normalize, and score patches of a perturbation in isolation;
/// the top 3 and bottom 2 are flagged for rendering.
#[allow(clippy::too_many_arguments)]
pub fn locality_report(
    model: &Classifier,
    dataset: &LabeledDataset,
    delta: &Tensor,
    target: usize,
    n: usize,
    patch_size: usize,
    seed: u64,
    norm_p: NormP,
    exclude_target_class: bool,
    clamp: bool,
) -> Result<LocalityReport> {
    let patches = extract_random_patches(delta, n, patch_size, seed)?;
    let patches = normalize_patches(patches, norm_p)?;

    let (whole_s, whole_e, _) = asr_counts(
        model,
        &dataset.images,
        &dataset.labels,
        delta,
        target,
        exclude_target_class,
        clamp,
    )?;
    let whole_asr = whole_s as f32 / whole_e.max(1) as f32;

    let mut scored: Vec<(usize, Patch, f32)> = Vec::with_capacity(patches.len());
    for (i, patch) in patches.into_iter().enumerate() {
        let (s, e, _) = asr_counts(
            model,
            &dataset.images,
            &dataset.labels,
            &patch.tensor,
            target,
            exclude_target_class,
            clamp,
        )?;
        scored.push((i, patch, s as f32 / e.max(1) as f32));
    }
    scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));

    let total = scored.len();
    let ranked = scored
        .into_iter()
        .enumerate()
        .map(|(rank, (_, patch, asr))| RankedPatch {
            patch,
            asr,
            highlight: if rank < 3.min(total) {
                PatchHighlight::Top
            } else if rank + 2 >= total {
                PatchHighlight::Bottom
            } else {
                PatchHighlight::None
            },
        })
        .collect();
    Ok(LocalityReport { ranked, whole_asr })
}

// ---------------------------------------------------------------------------
// Translation grids
// ---------------------------------------------------------------------------

/// ASR of translated perturbations over a subsampled offset grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslationGrid {
    pub stride: usize,
    /// Offsets along x (right shifts), ascending from 0.
    pub offsets_x: Vec<usize>,
    /// Offsets along y (up shifts), ascending from 0.
    pub offsets_y: Vec<usize>,
    /// values[iy * offsets_x.len() + ix], each in [0,1].
    pub values: Vec<f32>,
    pub kind: PerturbationKind,
    pub n_perturbations: usize,
}

impl TranslationGrid {
    pub fn value_at(&self, dx: usize, dy: usize) -> Option<f32> {
        let ix = self.offsets_x.iter().position(|&o| o == dx)?;
        let iy = self.offsets_y.iter().position(|&o| o == dy)?;
        Some(self.values[iy * self.offsets_x.len() + ix])
    }
}

/// Grid of ASRs for translated copies of perturbations.
///
/// Standard mode: `perturbations[i]` belongs to image i, and each translated
/// copy is evaluated only on its own image; the grid cell averages success
/// across images. Universal mode: every perturbation is evaluated across all
/// images and the cell averages the per-perturbation ASRs.
#[allow(clippy::too_many_arguments)]
pub fn spatial_asr_grid(
    model: &Classifier,
    images: &Tensor,
    labels: &[usize],
    perturbations: &[Tensor],
    kind: PerturbationKind,
    target: usize,
    stride: usize,
    exclude_target_class: bool,
    clamp: bool,
) -> Result<TranslationGrid> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::EmptySet("spatial grid image set".into()));
    }
    if perturbations.is_empty() {
        return Err(Error::EmptySet("spatial grid perturbation set".into()));
    }
    if kind == PerturbationKind::Standard && perturbations.len() != n {
        return Err(Error::InvalidArgument(format!(
            "standard mode wants one perturbation per image: {} vs {}",
            perturbations.len(),
            n
        )));
    }
    let h = images.shape()[2];
    let w = images.shape()[3];
    let offsets_x: Vec<usize> = (0..w).step_by(stride).collect();
    let offsets_y: Vec<usize> = (0..h).step_by(stride).collect();

    let mut values = Vec::with_capacity(offsets_x.len() * offsets_y.len());
    for &dy in &offsets_y {
        for &dx in &offsets_x {
            let value = match kind {
                PerturbationKind::Standard => {
                    let mut successes = 0usize;
                    let mut evaluated = 0usize;
                    // Batch the per-image evaluations.
                    let mut pending: Vec<(usize, Tensor)> = Vec::with_capacity(n);
                    for i in 0..n {
                        if exclude_target_class && labels[i] == target {
                            continue;
                        }
                        let shifted = translate_wrap(&perturbations[i], dx as i64, dy as i64);
                        let mut img = images.batch_item(i);
                        img.add_scaled(&shifted, 1.0);
                        if clamp {
                            img.clamp(0.0, 1.0);
                        }
                        pending.push((i, img));
                    }
                    if pending.is_empty() {
                        return Err(Error::EmptySet(
                            "no evaluated samples in standard spatial grid".into(),
                        ));
                    }
                    for chunk in pending.chunks(128) {
                        let batch =
                            Tensor::stack(&chunk.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())?;
                        let preds = model.predict(&batch)?;
                        for p in preds {
                            evaluated += 1;
                            if p == target {
                                successes += 1;
                            }
                        }
                    }
                    successes as f32 / evaluated as f32
                }
                PerturbationKind::Universal | PerturbationKind::UniversalDiverse => {
                    let mut sum = 0.0f64;
                    for delta in perturbations {
                        let shifted = translate_wrap(delta, dx as i64, dy as i64);
                        let (s, e, _) = asr_counts(
                            model,
                            images,
                            labels,
                            &shifted,
                            target,
                            exclude_target_class,
                            clamp,
                        )?;
                        sum += s as f64 / e.max(1) as f64;
                    }
                    (sum / perturbations.len() as f64) as f32
                }
            };
            values.push(value);
        }
    }

    Ok(TranslationGrid {
        stride,
        offsets_x,
        offsets_y,
        values,
        kind,
        n_perturbations: perturbations.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn translate_identity_and_full_wrap() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(translate_wrap(&t, 0, 0), t);
        assert_eq!(translate_wrap(&t, 2, 0), t);
        assert_eq!(translate_wrap(&t, 0, 2), t);
    }

    #[test]
    fn translate_right_by_one() {
        // [[1,2],[3,4]] shifted right by 1 -> [[2,1],[4,3]]
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = translate_wrap(&t, 1, 0);
        assert_eq!(s.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn translate_up_by_one() {
        // Content moves up: row 0 becomes old row 1.
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = translate_wrap(&t, 0, 1);
        assert_eq!(s.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn translate_is_group_action_and_norm_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = Tensor::from_vec(
                &[2, 4, 6],
                (0..48).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let (a, b) = (rng.gen_range(-9i64..9), rng.gen_range(-9i64..9));
            let (c, d) = (rng.gen_range(-9i64..9), rng.gen_range(-9i64..9));
            let composed = translate_wrap(&translate_wrap(&t, a, b), c, d);
            let direct = translate_wrap(&t, a + c, b + d);
            assert_eq!(composed, direct);
            assert_eq!(t.l2_norm(), direct.l2_norm());
            assert_eq!(t.linf_norm(), direct.linf_norm());
        }
    }

    #[test]
    fn full_image_patch_equals_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let delta = Tensor::from_vec(&[1, 4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let patches = extract_random_patches(&delta, 1, 4, 0).unwrap();
        assert_eq!(patches[0].tensor, delta);
        assert_eq!(patches[0].origin, (0, 0));
    }

    #[test]
    fn patches_zero_outside_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let delta = Tensor::from_vec(
            &[2, 8, 8],
            (0..128).map(|_| rng.gen_range(0.5..1.0)).collect(),
        )
        .unwrap();
        let a = extract_random_patches(&delta, 5, 3, 42).unwrap();
        let b = extract_random_patches(&delta, 5, 3, 42).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.origin, pb.origin);
        }
        for p in &a {
            let (oy, ox) = p.origin;
            for c in 0..2 {
                for y in 0..8 {
                    for x in 0..8 {
                        let v = p.tensor.data()[(c * 8 + y) * 8 + x];
                        let inside = y >= oy && y < oy + 3 && x >= ox && x < ox + 3;
                        if inside {
                            assert_eq!(v, delta.data()[(c * 8 + y) * 8 + x]);
                        } else {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn patch_size_exceeding_image_rejected() {
        let delta = Tensor::zeros(&[1, 4, 4]);
        assert!(extract_random_patches(&delta, 1, 5, 0).is_err());
    }

    #[test]
    fn l2_normalization_equalizes_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let delta = Tensor::from_vec(
            &[1, 8, 8],
            (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let patches = extract_random_patches(&delta, 6, 3, 1).unwrap();
        let normed = normalize_patches(patches, NormP::L2).unwrap();
        let max = normed
            .iter()
            .map(|p| p.norm_record.original)
            .fold(0.0f32, f32::max);
        for p in &normed {
            if !p.norm_record.zero_flagged {
                assert!((p.tensor.l2_norm() - max).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn linf_normalization_is_passthrough() {
        let delta = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let patches = extract_random_patches(&delta, 3, 2, 2).unwrap();
        let before: Vec<Tensor> = patches.iter().map(|p| p.tensor.clone()).collect();
        let after = normalize_patches(patches, NormP::LInf).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(*b, a.tensor);
        }
    }

    #[test]
    fn patch_scaling_ratio() {
        // patch with norm 2 when max is 6 -> scaled by 3.
        let mut p1 = Tensor::zeros(&[1, 4, 4]);
        p1.data_mut()[0] = 2.0;
        let mut p2 = Tensor::zeros(&[1, 4, 4]);
        p2.data_mut()[5] = 6.0;
        let patches = vec![
            Patch {
                origin: (0, 0),
                size: (1, 1),
                tensor: p1,
                norm_record: PatchNormRecord {
                    original: 2.0,
                    normalized: 2.0,
                    zero_flagged: false,
                },
            },
            Patch {
                origin: (1, 1),
                size: (1, 1),
                tensor: p2,
                norm_record: PatchNormRecord {
                    original: 6.0,
                    normalized: 6.0,
                    zero_flagged: false,
                },
            },
        ];
        let normed = normalize_patches(patches, NormP::L2).unwrap();
        assert!((normed[0].tensor.data()[0] - 6.0).abs() < 1e-6);
    }
}
