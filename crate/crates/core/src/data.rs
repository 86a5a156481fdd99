//! Labeled image datasets and the built-in synthetic family.
//!
//! The synthetic generator produces a CIFAR-shaped task (10 classes,
//! 3x32x32 in [0,1]) whose class evidence comes in two layers:
//!
//! - a smooth, large-norm pattern per class with amplitude and position
//!   jitter (hard to remove with a small-norm perturbation), and
//! - a dictionary of small-norm localized texture atoms per subclass, mixed
//!   with fresh coefficients and placed at uniform wrap-around offsets per
//!   image (perfectly label-correlated, easy to flip inside a small lp ball).
//!
//! Trained on this, a standard CNN leans on the texture atoms, which is what
//! gives desk-scale attacks, universal perturbations, and constructed
//! datasets the same qualitative behavior as their full-scale counterparts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::translate_wrap;
use crate::tensor::Tensor;

/// Images in [0,1] with coarse labels and optional fine (subclass) labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub fine_labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub subclass_count: Option<usize>,
    /// Declared subclass -> class map; present iff fine labels are.
    pub subclass_to_class: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        fine: Option<(Vec<usize>, Vec<usize>)>,
    ) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 {
            return Err(Error::BadShape(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} images",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "image values must lie in [0,1]".into(),
            ));
        }
        let (fine_labels, subclass_to_class) = match fine {
            Some((fine_labels, map)) => {
                if fine_labels.len() != n {
                    return Err(Error::InvalidArgument(
                        "fine label count differs from image count".into(),
                    ));
                }
                for (i, &f) in fine_labels.iter().enumerate() {
                    let cls = *map.get(f).ok_or_else(|| {
                        Error::InvalidArgument(format!("fine label {f} missing from map"))
                    })?;
                    if cls != labels[i] {
                        return Err(Error::InvalidArgument(format!(
                            "fine label {f} maps to class {cls} but sample {i} is labeled {}",
                            labels[i]
                        )));
                    }
                }
                (Some(fine_labels), Some(map))
            }
            None => (None, None),
        };
        let subclass_count = subclass_to_class.as_ref().map(|m| m.len());
        Ok(LabeledDataset {
            images,
            labels,
            fine_labels,
            class_count,
            subclass_count,
            subclass_to_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        ]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.batch_item(i)
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let items: Vec<Tensor> = indices.iter().map(|&i| self.image(i)).collect();
        let images = Tensor::stack(&items)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let fine = match (&self.fine_labels, &self.subclass_to_class) {
            (Some(f), Some(map)) => Some((
                indices.iter().map(|&i| f[i]).collect(),
                map.clone(),
            )),
            _ => None,
        };
        LabeledDataset::new(images, labels, self.class_count, fine)
    }

    /// SHA-256 over shape, pixel bytes, and labels; stable across runs.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for d in self.images.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            hasher.update(v.to_le_bytes());
        }
        for l in &self.labels {
            hasher.update((*l as u64).to_le_bytes());
        }
        if let Some(f) = &self.fine_labels {
            for l in f {
                hasher.update((*l as u64).to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

fn default_classes() -> usize {
    10
}
fn default_subclasses() -> usize {
    2
}
fn default_image_size() -> usize {
    32
}
fn default_robust_amp() -> f32 {
    6.0
}
fn default_robust_shift_jitter() -> usize {
    5
}
fn default_atoms_per_subclass() -> usize {
    4
}
fn default_atom_amp() -> f32 {
    0.5
}
fn default_background_amp() -> f32 {
    3.5
}
fn default_noise_sigma() -> f32 {
    0.06
}

/// Parameters of the synthetic image family. All randomness flows from
/// `seed`; identical specs produce identical datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_subclasses")]
    pub subclasses_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// l2 norm of the per-class smooth pattern.
    #[serde(default = "default_robust_amp")]
    pub robust_amp: f32,
    /// Max wrap-around shift applied to the smooth pattern, per axis.
    #[serde(default = "default_robust_shift_jitter")]
    pub robust_shift_jitter: usize,
    #[serde(default = "default_atoms_per_subclass")]
    pub atoms_per_subclass: usize,
    /// l2 norm of the per-image texture-atom mixture.
    #[serde(default = "default_atom_amp")]
    pub atom_amp: f32,
    /// Upper l2 norm of the label-independent smooth background.
    #[serde(default = "default_background_amp")]
    pub background_amp: f32,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f32,
    #[serde(default)]
    pub emit_fine_labels: bool,
}

impl SyntheticSpec {
    /// The profile the desk-scale experiments run on: 10 classes of 3x32x32.
    pub fn desk(seed: u64, train_per_class: usize, test_per_class: usize) -> Self {
        SyntheticSpec {
            seed,
            train_per_class,
            test_per_class,
            classes: default_classes(),
            subclasses_per_class: default_subclasses(),
            image_size: default_image_size(),
            robust_amp: default_robust_amp(),
            robust_shift_jitter: default_robust_shift_jitter(),
            atoms_per_subclass: default_atoms_per_subclass(),
            atom_amp: default_atom_amp(),
            background_amp: default_background_amp(),
            noise_sigma: default_noise_sigma(),
            emit_fine_labels: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2
            || self.subclasses_per_class == 0
            || self.image_size < 8
            || self.atoms_per_subclass == 0
        {
            return Err(Error::InvalidConfig(format!("degenerate synthetic spec: {self:?}")));
        }
        Ok(())
    }
}

/// Frozen per-class structure: one smooth pattern per class, one atom
/// dictionary per subclass.
struct ClassPatterns {
    robust: Vec<Tensor>,
    atoms: Vec<Vec<Tensor>>, // indexed by fine label
}

fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[3, size, size]);
    let s = size as f32;
    for c in 0..3 {
        for _ in 0..4 {
            let fx: i32 = rng.gen_range(-3..=3);
            let fy: i32 = rng.gen_range(-3..=3);
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let amp: f32 = rng.gen_range(0.3..1.0);
            let data = t.data_mut();
            for y in 0..size {
                for x in 0..size {
                    let arg = std::f32::consts::TAU * (fx as f32 * x as f32 + fy as f32 * y as f32)
                        / s
                        + phase;
                    data[(c * size + y) * size + x] += amp * arg.cos();
                }
            }
        }
    }
    normalize_l2(&mut t);
    t
}

/// Localized oriented texture blob at the image center, unit l2 norm.
fn texture_atom(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[3, size, size]);
    let s = size as f32;
    let cx = s / 2.0;
    let cy = s / 2.0;
    let sigma: f32 = rng.gen_range(2.0..4.0);
    let freq: f32 = rng.gen_range(3.0..7.0);
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let mut wch = [0.0f32; 3];
    for w in &mut wch {
        *w = rng.gen_range(-1.0..1.0);
    }
    let wn = (wch.iter().map(|v| v * v).sum::<f32>()).sqrt().max(1e-3);
    for w in &mut wch {
        *w /= wn;
    }
    let (ct, st) = (theta.cos(), theta.sin());
    let data = t.data_mut();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let carrier = (std::f32::consts::TAU * freq * (ct * dx + st * dy) / s + phase).cos();
            let envelope = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            for c in 0..3 {
                data[(c * size + y) * size + x] = wch[c] * carrier * envelope;
            }
        }
    }
    normalize_l2(&mut t);
    t
}

fn normalize_l2(t: &mut Tensor) {
    let n = t.l2_norm();
    if n > 0.0 {
        t.scale(1.0 / n);
    }
}

fn build_patterns(spec: &SyntheticSpec) -> ClassPatterns {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let robust = (0..spec.classes)
        .map(|_| smooth_field(&mut rng, spec.image_size))
        .collect();
    let atoms = (0..spec.classes * spec.subclasses_per_class)
        .map(|_| {
            (0..spec.atoms_per_subclass)
                .map(|_| texture_atom(&mut rng, spec.image_size))
                .collect()
        })
        .collect();
    ClassPatterns { robust, atoms }
}

fn render_image(
    spec: &SyntheticSpec,
    patterns: &ClassPatterns,
    class: usize,
    fine: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let size = spec.image_size;
    let mut img = Tensor::filled(&[3, size, size], 0.5);

    // Background clutter, label-independent.
    let bg_amp = spec.background_amp * rng.gen_range(0.3..1.0);
    let bg = smooth_field(rng, size);
    img.add_scaled(&bg, bg_amp);

    // Smooth class pattern with amplitude and position jitter.
    let j = spec.robust_shift_jitter as i64;
    let (dx, dy) = if j > 0 {
        (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
    } else {
        (0, 0)
    };
    let robust = translate_wrap(&patterns.robust[class], dx, dy);
    img.add_scaled(&robust, spec.robust_amp * rng.gen_range(0.5..1.5));

    // Texture-atom mixture at uniform wrap-around offsets.
    let dict = &patterns.atoms[fine];
    let mut coeffs: Vec<f32> = (0..dict.len()).map(|_| rng.gen_range(0.25..1.0)).collect();
    let norm = coeffs.iter().map(|c| c * c).sum::<f32>().sqrt();
    for c in &mut coeffs {
        *c *= spec.atom_amp / norm;
    }
    for (atom, &c) in dict.iter().zip(&coeffs) {
        let ox = rng.gen_range(0..size) as i64;
        let oy = rng.gen_range(0..size) as i64;
        let placed = translate_wrap(atom, ox, oy);
        img.add_scaled(&placed, c);
    }

    let normal = Normal::new(0.0f32, spec.noise_sigma).unwrap();
    for v in img.data_mut() {
        *v += normal.sample(rng);
    }
    img.clamp(0.0, 1.0);
    img
}

fn render_split(
    spec: &SyntheticSpec,
    patterns: &ClassPatterns,
    per_class: usize,
    stream: u64,
) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);

    let n = per_class * spec.classes;
    let mut order: Vec<usize> = (0..n).collect();
    // Round-robin class layout, then a seeded shuffle.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut items = Vec::with_capacity(n);
    let mut labels = vec![0usize; n];
    let mut fine_labels = vec![0usize; n];
    let mut images: Vec<Tensor> = vec![Tensor::zeros(&[1]); n];
    for (k, &slot) in order.iter().enumerate() {
        let class = k % spec.classes;
        let fine = class * spec.subclasses_per_class
            + rng.gen_range(0..spec.subclasses_per_class);
        labels[slot] = class;
        fine_labels[slot] = fine;
        images[slot] = render_image(spec, patterns, class, fine, &mut rng);
    }
    items.append(&mut images);
    let images = Tensor::stack(&items)?;

    let fine = if spec.emit_fine_labels {
        let map: Vec<usize> = (0..spec.classes * spec.subclasses_per_class)
            .map(|f| f / spec.subclasses_per_class)
            .collect();
        Some((fine_labels, map))
    } else {
        None
    };
    LabeledDataset::new(images, labels, spec.classes, fine)
}

/// Deterministic (train, test) pair from the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let patterns = build_patterns(spec);
    let train = render_split(spec, &patterns, spec.train_per_class, 2)?;
    let test = render_split(spec, &patterns, spec.test_per_class, 3)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels_and_pixels() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(LabeledDataset::new(images.clone(), vec![0, 5], 3, None).is_err());
        let bad = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 1.5]).unwrap();
        assert!(LabeledDataset::new(bad, vec![0], 3, None).is_err());
    }

    #[test]
    fn fine_labels_must_refine_coarse() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        let map = vec![0, 0, 1, 1];
        let ok = LabeledDataset::new(
            images.clone(),
            vec![0, 1],
            2,
            Some((vec![1, 2], map.clone())),
        );
        assert!(ok.is_ok());
        let bad = LabeledDataset::new(images, vec![0, 1], 2, Some((vec![2, 2], map)));
        assert!(bad.is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let spec = SyntheticSpec::desk(5, 3, 2);
        let (a_train, a_test) = generate_synthetic(&spec).unwrap();
        let (b_train, _) = generate_synthetic(&spec).unwrap();
        assert_eq!(a_train.images, b_train.images);
        assert_eq!(a_train.labels, b_train.labels);
        assert_eq!(a_train.len(), 30);
        assert_eq!(a_test.len(), 20);
        assert!(a_train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // Balanced labels.
        for c in 0..10 {
            assert_eq!(a_train.labels.iter().filter(|&&l| l == c).count(), 3);
        }
    }

    #[test]
    fn subset_keeps_rows_in_order() {
        let spec = SyntheticSpec::desk(5, 2, 1);
        let (train, _) = generate_synthetic(&spec).unwrap();
        let sub = train.subset(&[3, 0]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.labels[0], train.labels[3]);
        assert_eq!(sub.image(1), train.image(0));
    }

    #[test]
    fn digest_distinguishes_datasets() {
        let (a, _) = generate_synthetic(&SyntheticSpec::desk(5, 2, 1)).unwrap();
        let (b, _) = generate_synthetic(&SyntheticSpec::desk(6, 2, 1)).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.digest());
    }

    #[test]
    fn fine_labels_emitted_when_requested() {
        let mut spec = SyntheticSpec::desk(5, 2, 1);
        spec.emit_fine_labels = true;
        let (train, _) = generate_synthetic(&spec).unwrap();
        let fine = train.fine_labels.as_ref().unwrap();
        let map = train.subclass_to_class.as_ref().unwrap();
        assert_eq!(map.len(), 20);
        for (i, &f) in fine.iter().enumerate() {
            assert_eq!(map[f], train.labels[i]);
        }
    }
}
