//! lp-ball projections and targeted projected gradient descent, per-image
//! and universal (shared over a base set of images).
//!
//! Step rules: l2 steps move along the l2-normalized negative gradient
//! scaled by the step size; linf steps move along the sign of the negative
//! gradient. Every step is followed by a Euclidean projection onto the
//! epsilon ball. Zero-gradient steps are skipped (no random restarts), which
//! keeps the loops deterministic under a fixed seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::net;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormP {
    L2,
    LInf,
}

/// The constraint set and attack hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub norm_p: NormP,
    /// Radius of the allowed perturbation set.
    pub epsilon: f32,
    /// Target class the attack pushes toward.
    pub target: usize,
    pub step_size: f32,
    /// Step count for per-image attacks.
    pub steps: usize,
    /// Epoch count over the base set for universal attacks.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Clamp perturbed inputs to [0,1] before every loss evaluation and in
    /// every downstream evaluation.
    pub clamp_input: bool,
}

impl PerturbationSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be nonnegative".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::InvalidArgument("step_size must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.target >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "target {} out of range for {} classes",
                self.target, num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    Standard,
    Universal,
    UniversalDiverse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationProvenance {
    pub kind: PerturbationKind,
    pub source_model_digest: String,
    /// Sample indices of the base set in the source dataset; empty when the
    /// caller attacked a bare image.
    pub base_indices: Vec<usize>,
    pub k: usize,
    pub skipped_zero_grad_steps: usize,
}

/// A concrete delta with the spec it satisfies and where it came from.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub delta: Tensor,
    pub spec: PerturbationSpec,
    pub provenance: PerturbationProvenance,
}

impl Perturbation {
    /// `||delta||_p <= epsilon * (1 + 1e-6)`.
    pub fn norm_feasible(&self) -> bool {
        self.delta.lp_norm(self.spec.norm_p) <= self.spec.epsilon * (1.0 + 1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseSetMode {
    Random,
    SingleClass,
    SingleSubclass,
    AugmentedSingleImage,
}

/// The batch of images a universal perturbation is optimized over.
#[derive(Debug, Clone)]
pub struct BaseSet {
    pub images: Tensor,
    pub indices: Vec<usize>,
    pub mode: BaseSetMode,
}

impl BaseSet {
    pub fn new(images: Tensor, indices: Vec<usize>, mode: BaseSetMode) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if indices.len() != n || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "base set has {n} images but {} indices",
                indices.len()
            )));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::InvalidArgument("base set indices must be distinct".into()));
        }
        Ok(BaseSet {
            images,
            indices,
            mode,
        })
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// Euclidean projection onto the lp ball of radius `epsilon`.
///
/// Feasible inputs (within the 1e-6 slack) are returned bitwise unchanged,
/// which also makes the projection bitwise idempotent.
pub fn project(delta: &Tensor, norm_p: NormP, epsilon: f32) -> Tensor {
    match norm_p {
        NormP::L2 => {
            let n = delta.l2_norm();
            if n <= epsilon * (1.0 + 1e-6) {
                delta.clone()
            } else {
                delta.scaled(epsilon / n)
            }
        }
        NormP::LInf => {
            if delta.linf_norm() <= epsilon * (1.0 + 1e-6) {
                delta.clone()
            } else {
                delta.clamped(-epsilon, epsilon)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// PGD cores
// ---------------------------------------------------------------------------

/// Apply `delta` to every image of a batch, clamping to [0,1] if asked.
/// Returns the perturbed batch and a pass mask for the clamp subgradient
/// (1 where the pre-clamp value is inside [0,1], else 0).
fn apply_delta(images: &Tensor, delta: &Tensor, clamp: bool) -> (Tensor, Option<Vec<f32>>) {
    let n = images.shape()[0];
    let per = delta.numel();
    let mut out = images.clone();
    {
        let data = out.data_mut();
        for ni in 0..n {
            let row = &mut data[ni * per..(ni + 1) * per];
            for (v, d) in row.iter_mut().zip(delta.data()) {
                *v += d;
            }
        }
    }
    if clamp {
        let mut mask = vec![0.0f32; out.numel()];
        for (m, v) in mask.iter_mut().zip(out.data()) {
            if (0.0..=1.0).contains(v) {
                *m = 1.0;
            }
        }
        out.clamp(0.0, 1.0);
        (out, Some(mask))
    } else {
        (out, None)
    }
}

/// Mean cross-entropy toward `target` over the batch, and its gradient with
/// respect to the shared delta (clamp-gated, summed over the batch).
fn delta_gradient(
    model: &Classifier,
    images: &Tensor,
    delta: &Tensor,
    target: usize,
    clamp: bool,
) -> Result<(f32, Tensor)> {
    let n = images.shape()[0];
    let (perturbed, mask) = apply_delta(images, delta, clamp);
    let targets = vec![target; n];
    let (loss, mut grad) = net::backward_input(&model.layers, &model.params, &perturbed, &targets)?;
    if let Some(mask) = mask {
        for (g, m) in grad.data_mut().iter_mut().zip(&mask) {
            *g *= m;
        }
    }
    // d(mean loss)/d(delta) is the sum of the per-image input gradients.
    let per = delta.numel();
    let mut out = Tensor::zeros(delta.shape());
    let out_data = out.data_mut();
    for ni in 0..n {
        let row = &grad.data()[ni * per..(ni + 1) * per];
        for (o, g) in out_data.iter_mut().zip(row) {
            *o += g;
        }
    }
    Ok((loss, out))
}

/// One normalized descent step followed by projection. Returns false (and
/// leaves delta untouched) on a zero gradient.
fn descend_and_project(delta: &mut Tensor, grad: &Tensor, spec: &PerturbationSpec) -> bool {
    match spec.norm_p {
        NormP::L2 => {
            let n = grad.l2_norm();
            if n == 0.0 {
                return false;
            }
            delta.add_scaled(grad, -spec.step_size / n);
        }
        NormP::LInf => {
            if grad.data().iter().all(|&g| g == 0.0) {
                return false;
            }
            for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
                *d -= spec.step_size * g.signum() * if g == 0.0 { 0.0 } else { 1.0 };
            }
        }
    }
    *delta = project(delta, spec.norm_p, spec.epsilon);
    true
}

/// Targeted PGD on a single image. `steps` iterations of descent on the
/// cross-entropy toward `spec.target`.
pub fn pgd_targeted(model: &Classifier, image: &Tensor, spec: &PerturbationSpec) -> Result<Perturbation> {
    pgd_targeted_traced(model, image, spec, false).map(|(p, _)| p)
}

/// As [`pgd_targeted`], optionally recording the delta after every step.
pub fn pgd_targeted_traced(
    model: &Classifier,
    image: &Tensor,
    spec: &PerturbationSpec,
    record: bool,
) -> Result<(Perturbation, Vec<Tensor>)> {
    spec.validate(model.num_classes)?;
    let batch = image.reshaped(&prepend_batch(image.shape()))?;
    let mut delta = Tensor::zeros(image.shape());
    let mut skipped = 0usize;
    let mut trace = Vec::new();
    for _ in 0..spec.steps {
        let (_, grad) = delta_gradient(model, &batch, &delta, spec.target, spec.clamp_input)?;
        if !descend_and_project(&mut delta, &grad, spec) {
            skipped += 1;
        }
        if record {
            trace.push(delta.clone());
        }
    }
    delta = project(&delta, spec.norm_p, spec.epsilon);
    Ok((
        Perturbation {
            delta,
            spec: spec.clone(),
            provenance: PerturbationProvenance {
                kind: PerturbationKind::Standard,
                source_model_digest: model.digest(),
                base_indices: Vec::new(),
                k: 1,
                skipped_zero_grad_steps: skipped,
            },
        },
        trace,
    ))
}

fn prepend_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// Universal targeted PGD over a base set: mini-batch descent on the mean
/// cross-entropy toward the target, on one shared delta. The mini-batch
/// order is a seeded shuffle per epoch.
pub fn pgd_universal(model: &Classifier, base: &BaseSet, spec: &PerturbationSpec) -> Result<Perturbation> {
    pgd_universal_traced(model, base, spec, false).map(|(p, _)| p)
}

pub fn pgd_universal_traced(
    model: &Classifier,
    base: &BaseSet,
    spec: &PerturbationSpec,
    record: bool,
) -> Result<(Perturbation, Vec<Tensor>)> {
    pgd_universal_inner(model, base, spec, record, None)
}

/// Representations of reference-perturbed base images at chosen layers,
/// fixed for the whole run of a diverse-universal attack.
struct DiversityContext<'a> {
    lambda: f32,
    /// Activation indices into the forward trace (layer i's output is
    /// activation i + 1).
    activation_indices: Vec<usize>,
    /// reference_rows[r][a] is the cached activation tensor of reference r
    /// at chosen activation a, over the whole base set.
    reference_rows: Vec<Vec<Tensor>>,
    references: &'a [Perturbation],
}

fn pgd_universal_inner(
    model: &Classifier,
    base: &BaseSet,
    spec: &PerturbationSpec,
    record: bool,
    diversity: Option<&DiversityContext>,
) -> Result<(Perturbation, Vec<Tensor>)> {
    spec.validate(model.num_classes)?;
    let k = base.k();
    if k == 0 {
        return Err(Error::EmptySet("universal attack base set".into()));
    }
    let image_shape = base.images.shape()[1..].to_vec();
    let mut delta = Tensor::zeros(&image_shape);
    let mut skipped = 0usize;
    let mut trace = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<usize> = (0..k).collect();
    for _ in 0..spec.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(spec.batch_size.min(k)) {
            let batch = gather(&base.images, chunk);
            let grad = match diversity {
                None => delta_gradient(model, &batch, &delta, spec.target, spec.clamp_input)?.1,
                Some(ctx) => {
                    diverse_delta_gradient(model, &batch, chunk, &delta, spec, ctx)?
                }
            };
            if !descend_and_project(&mut delta, &grad, spec) {
                skipped += 1;
            }
            if record {
                trace.push(delta.clone());
            }
        }
    }
    delta = project(&delta, spec.norm_p, spec.epsilon);
    let kind = if diversity.is_some() {
        PerturbationKind::UniversalDiverse
    } else {
        PerturbationKind::Universal
    };
    Ok((
        Perturbation {
            delta,
            spec: spec.clone(),
            provenance: PerturbationProvenance {
                kind,
                source_model_digest: model.digest(),
                base_indices: base.indices.clone(),
                k,
                skipped_zero_grad_steps: skipped,
            },
        },
        trace,
    ))
}

/// Universal PGD with a penalty that pushes the perturbed representations
/// away from those of previously found perturbations: the attack loss plus
/// `lambda` times the mean squared cosine similarity between representations
/// of `x + delta` and `x + delta_ref` at the chosen layers.
///
/// `activation_layers` lists layer indices whose outputs are compared; when
/// empty, the penultimate activation (input of the last dense layer) is used.
pub fn pgd_universal_diverse(
    model: &Classifier,
    base: &BaseSet,
    spec: &PerturbationSpec,
    references: &[Perturbation],
    lambda: f32,
    activation_layers: &[usize],
) -> Result<Perturbation> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
    }
    if lambda == 0.0 {
        // Bit-identical to the plain universal attack.
        return pgd_universal(model, base, spec);
    }
    if references.is_empty() {
        return Err(Error::EmptySet(
            "diverse universal attack needs at least one reference perturbation".into(),
        ));
    }
    let activation_indices: Vec<usize> = if activation_layers.is_empty() {
        vec![penultimate_activation_index(model)?]
    } else {
        for &l in activation_layers {
            if l >= model.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer choice {l} out of range for {} layers",
                    model.layers.len()
                )));
            }
        }
        activation_layers.iter().map(|&l| l + 1).collect()
    };

    // Cache reference representations once; they do not change with delta.
    let mut reference_rows = Vec::with_capacity(references.len());
    for r in references {
        let (perturbed, _) = apply_delta(&base.images, &r.delta, spec.clamp_input);
        let (_, trace) = net::forward_trace(&model.layers, &model.params, &perturbed)?;
        let rows: Vec<Tensor> = activation_indices
            .iter()
            .map(|&a| trace.activations[a].clone())
            .collect();
        reference_rows.push(rows);
    }
    let ctx = DiversityContext {
        lambda,
        activation_indices,
        reference_rows,
        references,
    };
    pgd_universal_inner(model, base, spec, false, Some(&ctx)).map(|(p, _)| p)
}

fn penultimate_activation_index(model: &Classifier) -> Result<usize> {
    let last_dense = model
        .layers
        .iter()
        .rposition(|l| matches!(l, crate::net::LayerSpec::Dense { .. }))
        .ok_or_else(|| Error::InvalidArgument("model has no dense layer".into()))?;
    Ok(last_dense) // activation index of the dense layer's input
}

fn diverse_delta_gradient(
    model: &Classifier,
    batch: &Tensor,
    chunk: &[usize],
    delta: &Tensor,
    spec: &PerturbationSpec,
    ctx: &DiversityContext,
) -> Result<Tensor> {
    let n = batch.shape()[0];
    let (perturbed, mask) = apply_delta(batch, delta, spec.clamp_input);
    let targets = vec![spec.target; n];
    let (logits, trace) = net::forward_trace(&model.layers, &model.params, &perturbed)?;
    let (_, logit_grad) = net::softmax_cross_entropy(&logits, &targets)?;

    // Injected gradients at the chosen activations from the cosine penalty.
    let denom = (n * ctx.references.len() * ctx.activation_indices.len()) as f32;
    let mut injections: Vec<(usize, Tensor)> = Vec::new();
    for (ai, &a) in ctx.activation_indices.iter().enumerate() {
        let act = &trace.activations[a];
        let row_len = act.numel() / n;
        let mut inj = Tensor::zeros(act.shape());
        for (r, rows) in ctx.reference_rows.iter().enumerate() {
            let _ = r;
            let ref_act = &rows[ai];
            for ni in 0..n {
                let u = &act.data()[ni * row_len..(ni + 1) * row_len];
                let v = &ref_act.data()[chunk[ni] * row_len..(chunk[ni] + 1) * row_len];
                let (mut uu, mut vv, mut uv) = (0.0f64, 0.0f64, 0.0f64);
                for (&a1, &b1) in u.iter().zip(v) {
                    uu += (a1 as f64) * (a1 as f64);
                    vv += (b1 as f64) * (b1 as f64);
                    uv += (a1 as f64) * (b1 as f64);
                }
                let nu = uu.sqrt().max(1e-12);
                let nv = vv.sqrt().max(1e-12);
                let c = uv / (nu * nv);
                // d(c^2)/du = 2c * (v/(|u||v|) - c*u/|u|^2)
                let s1 = 2.0 * c / (nu * nv);
                let s2 = 2.0 * c * c / (nu * nu);
                let dst = &mut inj.data_mut()[ni * row_len..(ni + 1) * row_len];
                for ((d, &a1), &b1) in dst.iter_mut().zip(u).zip(v) {
                    *d += ((ctx.lambda as f64) * (s1 * b1 as f64 - s2 * a1 as f64) / denom as f64)
                        as f32;
                }
            }
        }
        injections.push((a, inj));
    }

    let bundle = net::backprop_with_injections(
        &model.layers,
        &model.params,
        &trace,
        &logit_grad,
        &injections,
        false,
    );
    let mut grad = bundle.input_grad;
    if let Some(mask) = mask {
        for (g, m) in grad.data_mut().iter_mut().zip(&mask) {
            *g *= m;
        }
    }
    let per = delta.numel();
    let mut out = Tensor::zeros(delta.shape());
    let out_data = out.data_mut();
    for ni in 0..n {
        let row = &grad.data()[ni * per..(ni + 1) * per];
        for (o, g) in out_data.iter_mut().zip(row) {
            *o += g;
        }
    }
    Ok(out)
}

/// Mean squared cosine similarity of penultimate representations between
/// `x + a` and `x + b` over a base set; the quantity the diversity penalty
/// drives down.
pub fn representation_cosine(
    model: &Classifier,
    base: &BaseSet,
    a: &Tensor,
    b: &Tensor,
    clamp: bool,
) -> Result<f32> {
    let idx = penultimate_activation_index(model)?;
    let (pa, _) = apply_delta(&base.images, a, clamp);
    let (pb, _) = apply_delta(&base.images, b, clamp);
    let (_, ta) = net::forward_trace(&model.layers, &model.params, &pa)?;
    let (_, tb) = net::forward_trace(&model.layers, &model.params, &pb)?;
    let ua = &ta.activations[idx];
    let ub = &tb.activations[idx];
    let n = base.k();
    let row_len = ua.numel() / n;
    let mut total = 0.0f64;
    for ni in 0..n {
        let u = &ua.data()[ni * row_len..(ni + 1) * row_len];
        let v = &ub.data()[ni * row_len..(ni + 1) * row_len];
        let (mut uu, mut vv, mut uv) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in u.iter().zip(v) {
            uu += (x as f64) * (x as f64);
            vv += (y as f64) * (y as f64);
            uv += (x as f64) * (y as f64);
        }
        let c = uv / (uu.sqrt() * vv.sqrt()).max(1e-12);
        total += c.abs();
    }
    Ok((total / n as f64) as f32)
}

/// Seeded Fisher-Yates shuffle; the only permutation source in the crate.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Batch tensor built from the given rows of an [N, ...] tensor.
pub fn gather(images: &Tensor, indices: &[usize]) -> Tensor {
    let items: Vec<Tensor> = indices.iter().map(|&i| images.batch_item(i)).collect();
    Tensor::stack(&items).expect("gather from validated batch")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_projection_scales_to_radius() {
        let d = Tensor::from_vec(&[2], vec![6.0, 8.0]).unwrap(); // norm 10
        let p = project(&d, NormP::L2, 6.0);
        assert!((p.l2_norm() - 6.0).abs() < 1e-6);
        assert!((p.data()[0] - 3.6).abs() < 1e-6);
        assert!((p.data()[1] - 4.8).abs() < 1e-6);
    }

    #[test]
    fn projection_inside_ball_is_bitwise_identity() {
        let d = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.05]).unwrap();
        let p = project(&d, NormP::L2, 1.0);
        assert_eq!(p, d);
        let q = project(&d, NormP::LInf, 0.5);
        assert_eq!(q, d);
    }

    #[test]
    fn linf_projection_clamps_coordinatewise() {
        let eps = 8.0 / 255.0;
        let d = Tensor::from_vec(&[2], vec![0.05, -0.02]).unwrap();
        let p = project(&d, NormP::LInf, eps);
        assert!((p.data()[0] - eps).abs() < 1e-7);
        assert_eq!(p.data()[1], -0.02);
    }

    #[test]
    fn projection_is_idempotent_bitwise() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let scale = 10f32.powf(rng.gen_range(-3.0..3.0));
            let d = Tensor::from_vec(
                &[8],
                (0..8).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
            )
            .unwrap();
            for p in [NormP::L2, NormP::LInf] {
                let once = project(&d, p, 0.7);
                let twice = project(&once, p, 0.7);
                assert_eq!(once, twice);
            }
        }
    }

    #[test]
    fn zero_epsilon_projects_to_zero() {
        let d = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        assert!(project(&d, NormP::L2, 0.0).data().iter().all(|&v| v == 0.0));
        assert!(project(&d, NormP::LInf, 0.0).data().iter().all(|&v| v == 0.0));
    }
}
