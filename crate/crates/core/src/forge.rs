//! Construction of perturbed, relabeled datasets and the probes that
//! measure how much generalizable signal the perturbations carry.
//!
//! Pipeline shape, shared by all constructed variants:
//! 1. assign a target class per row (or per base-set batch), balanced so the
//!    new-label marginal differs by at most one across classes;
//! 2. perturb and relabel;
//! 3. (universal variants) keep only rows the source model classifies as the
//!    target, then subsample every admissible (original, new) label cell to
//!    the minimum cell count so the joint is exactly uniform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::attack::{
    gather, pgd_universal, project, shuffle, BaseSet, BaseSetMode, NormP, Perturbation,
    PerturbationKind, PerturbationSpec,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{augment_image, penultimate_features, Classifier};
use crate::net::{self, LayerParams, LayerSpec, ParamPair};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub kind: PerturbationKind,
    /// Index into the UAP pool for universal rows; None for per-image rows.
    pub uap_id: Option<usize>,
    pub per_image: bool,
    pub k: usize,
    pub epsilon: f32,
    pub norm_p: NormP,
    pub source_model_digest: String,
    pub source_index: usize,
    /// Whether the source model classified the stored image as the target.
    pub attack_succeeded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstructionManifest {
    pub seed: u64,
    pub offered: usize,
    pub retained_after_filter: usize,
    pub discarded_by_filter: usize,
    pub dropped_same_label: usize,
    pub min_cell_count: usize,
    pub balanced_rows: usize,
    /// Row count a companion per-image dataset should be cut to.
    pub companion_d_adv_size: usize,
    pub balancing: String,
}

/// A perturbed, relabeled dataset with per-sample provenance.
#[derive(Debug, Clone)]
pub struct ConstructedDataset {
    pub images: Tensor,
    pub new_labels: Vec<usize>,
    pub original_labels: Vec<usize>,
    pub provenance: Vec<SampleProvenance>,
    pub manifest: ConstructionManifest,
    pub class_count: usize,
}

impl ConstructedDataset {
    pub fn len(&self) -> usize {
        self.new_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_labels.is_empty()
    }

    /// View as a trainable dataset labeled with the new labels.
    pub fn to_labeled(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.images.clone(),
            self.new_labels.clone(),
            self.class_count,
            None,
        )
    }
}

struct CandidateRow {
    image: Tensor,
    y: usize,
    t: usize,
    prov: SampleProvenance,
}

/// Which (y, t) cells the balancing step must fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellDomain {
    /// All pairs with y != t.
    OffDiagonal,
    /// Only t == (y + 1) mod C.
    Cyclic,
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

/// A multiset with per-class counts differing by at most one, in seeded
/// random order.
fn balanced_assignment(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut extras: Vec<usize> = (0..classes).collect();
    shuffle(&mut extras, rng);
    let base = n / classes;
    let rem = n % classes;
    let mut out = Vec::with_capacity(n);
    for (rank, &c) in extras.iter().enumerate() {
        let count = base + usize::from(rank < rem);
        out.extend(std::iter::repeat(c).take(count));
    }
    shuffle(&mut out, rng);
    out
}

fn filter_and_balance(
    rows: Vec<CandidateRow>,
    class_count: usize,
    domain: CellDomain,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<CandidateRow>, ConstructionManifest, u64)> {
    let offered = rows.len();
    let mut dropped_same_label = 0usize;
    let mut discarded = 0usize;
    let mut kept: Vec<CandidateRow> = Vec::new();
    for row in rows {
        if !row.prov.attack_succeeded {
            discarded += 1;
            continue;
        }
        if row.y == row.t {
            dropped_same_label += 1;
            continue;
        }
        kept.push(row);
    }
    let retained = kept.len();

    let cells: Vec<(usize, usize)> = match domain {
        CellDomain::OffDiagonal => (0..class_count)
            .flat_map(|y| {
                (0..class_count)
                    .filter(move |&t| t != y)
                    .map(move |t| (y, t))
            })
            .collect(),
        CellDomain::Cyclic => (0..class_count)
            .map(|y| (y, (y + 1) % class_count))
            .collect(),
    };

    let mut buckets: std::collections::BTreeMap<(usize, usize), Vec<CandidateRow>> =
        cells.iter().map(|&c| (c, Vec::new())).collect();
    for row in kept {
        match buckets.get_mut(&(row.y, row.t)) {
            Some(b) => b.push(row),
            None => discarded += 1, // outside the admissible domain
        }
    }
    let min_cell = cells
        .iter()
        .map(|c| buckets[c].len())
        .min()
        .unwrap_or(0);
    if min_cell == 0 {
        let empty = cells.iter().find(|c| buckets[c].is_empty()).unwrap();
        return Err(Error::EmptyCell {
            original: empty.0,
            target: empty.1,
        });
    }

    let mut balanced: Vec<CandidateRow> = Vec::with_capacity(min_cell * cells.len());
    for c in &cells {
        let mut bucket = buckets.remove(c).unwrap();
        let mut order: Vec<usize> = (0..bucket.len()).collect();
        shuffle(&mut order, rng);
        let mut take: Vec<usize> = order.into_iter().take(min_cell).collect();
        take.sort_unstable();
        // Drain in ascending index order to keep removal O(n).
        let mut taken = Vec::with_capacity(min_cell);
        for (shifted, idx) in take.into_iter().enumerate() {
            taken.push(bucket.remove(idx - shifted));
        }
        balanced.extend(taken);
    }
    let mut final_order: Vec<usize> = (0..balanced.len()).collect();
    shuffle(&mut final_order, rng);
    let mut reordered: Vec<CandidateRow> = Vec::with_capacity(balanced.len());
    let mut slots: Vec<Option<CandidateRow>> = balanced.into_iter().map(Some).collect();
    for &i in &final_order {
        reordered.push(slots[i].take().unwrap());
    }

    let manifest = ConstructionManifest {
        seed: 0, // filled by the caller
        offered,
        retained_after_filter: retained,
        discarded_by_filter: discarded,
        dropped_same_label,
        min_cell_count: min_cell,
        balanced_rows: reordered.len(),
        companion_d_adv_size: reordered.len(),
        balancing: "exact-min-cell-subsample".into(),
    };
    Ok((reordered, manifest, 0))
}

fn assemble(rows: Vec<CandidateRow>, manifest: ConstructionManifest, class_count: usize) -> Result<ConstructedDataset> {
    if rows.is_empty() {
        return Err(Error::EmptySet("constructed dataset".into()));
    }
    let images = Tensor::stack(&rows.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
    Ok(ConstructedDataset {
        images,
        new_labels: rows.iter().map(|r| r.t).collect(),
        original_labels: rows.iter().map(|r| r.y).collect(),
        provenance: rows.into_iter().map(|r| r.prov).collect(),
        manifest,
        class_count,
    })
}

/// Per-image targeted PGD over a whole batch at once: the same iteration as
/// [`pgd_targeted`] (normalized per-image steps, per-image projection,
/// clamp-gated gradients), vectorized across images.
pub fn batched_standard_attacks(
    model: &Classifier,
    images: &Tensor,
    targets: &[usize],
    spec: &PerturbationSpec,
) -> Result<Tensor> {
    let n = images.shape()[0];
    if targets.len() != n {
        return Err(Error::InvalidArgument("one target per image".into()));
    }
    let per = images.numel() / n;
    let mut deltas = Tensor::zeros(images.shape());
    for _ in 0..spec.steps {
        let mut perturbed = images.clone();
        perturbed.add_scaled(&deltas, 1.0);
        let mask: Option<Vec<f32>> = if spec.clamp_input {
            let m = perturbed
                .data()
                .iter()
                .map(|v| if (0.0..=1.0).contains(v) { 1.0 } else { 0.0 })
                .collect();
            perturbed.clamp(0.0, 1.0);
            Some(m)
        } else {
            None
        };
        let (_, mut grad) =
            net::backward_input(&model.layers, &model.params, &perturbed, targets)?;
        if let Some(m) = &mask {
            for (g, mv) in grad.data_mut().iter_mut().zip(m) {
                *g *= mv;
            }
        }
        for ni in 0..n {
            let g_row = grad.batch_item(ni);
            let mut d_row = deltas.batch_item(ni);
            match spec.norm_p {
                NormP::L2 => {
                    let gn = g_row.l2_norm();
                    if gn == 0.0 {
                        continue;
                    }
                    d_row.add_scaled(&g_row, -spec.step_size / gn);
                }
                NormP::LInf => {
                    if g_row.data().iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    for (d, &g) in d_row.data_mut().iter_mut().zip(g_row.data()) {
                        if g != 0.0 {
                            *d -= spec.step_size * g.signum();
                        }
                    }
                }
            }
            let projected = project(&d_row, spec.norm_p, spec.epsilon);
            deltas.data_mut()[ni * per..(ni + 1) * per].copy_from_slice(projected.data());
        }
    }
    // Final projection, same as the single-image path.
    for ni in 0..n {
        let d_row = deltas.batch_item(ni);
        let projected = project(&d_row, spec.norm_p, spec.epsilon);
        deltas.data_mut()[ni * per..(ni + 1) * per].copy_from_slice(projected.data());
    }
    Ok(deltas)
}

fn apply_and_flag(
    model: &Classifier,
    images: &Tensor,
    deltas: Option<&Tensor>, // per-image deltas; or
    shared: Option<&Tensor>, // one shared delta
    targets: &[usize],
    clamp: bool,
) -> Result<(Vec<Tensor>, Vec<bool>)> {
    let n = images.shape()[0];
    let per = images.numel() / n;
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut img = images.batch_item(ni);
        match (deltas, shared) {
            (Some(d), None) => {
                let row = &d.data()[ni * per..(ni + 1) * per];
                for (v, dv) in img.data_mut().iter_mut().zip(row) {
                    *v += dv;
                }
            }
            (None, Some(d)) => img.add_scaled(d, 1.0),
            _ => unreachable!("exactly one delta source"),
        }
        if clamp {
            img.clamp(0.0, 1.0);
        }
        out.push(img);
    }
    let batch = Tensor::stack(&out)?;
    let preds = model.predict(&batch)?;
    let flags = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| p == t)
        .collect();
    Ok((out, flags))
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// Per-image perturbed dataset: each source row gets a uniformly drawn
/// (balanced) target and a targeted PGD perturbation; failed attacks are
/// kept and flagged.
pub fn build_d_adv(
    model: &Classifier,
    dataset: &LabeledDataset,
    spec: &PerturbationSpec,
    seed: u64,
    count: usize,
) -> Result<ConstructedDataset> {
    if count == 0 || count > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {count} rows from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut order, &mut rng);
    order.truncate(count);
    let targets = balanced_assignment(count, dataset.class_count, &mut rng);

    let digest = model.digest();
    let mut rows: Vec<CandidateRow> = Vec::with_capacity(count);
    let chunk_size = 64usize;
    for (chunk_idx, chunk) in order.chunks(chunk_size).enumerate() {
        let imgs = gather(&dataset.images, chunk);
        let t_slice = &targets[chunk_idx * chunk_size..chunk_idx * chunk_size + chunk.len()];
        let mut spec_t = spec.clone();
        spec_t.target = 0; // per-row targets live in the slice
        let deltas = batched_standard_attacks(model, &imgs, t_slice, &spec_t)?;
        let (perturbed, flags) =
            apply_and_flag(model, &imgs, Some(&deltas), None, t_slice, spec.clamp_input)?;
        for (bi, img) in perturbed.into_iter().enumerate() {
            rows.push(CandidateRow {
                image: img,
                y: dataset.labels[chunk[bi]],
                t: t_slice[bi],
                prov: SampleProvenance {
                    kind: PerturbationKind::Standard,
                    uap_id: None,
                    per_image: true,
                    k: 1,
                    epsilon: spec.epsilon,
                    norm_p: spec.norm_p,
                    source_model_digest: digest.clone(),
                    source_index: chunk[bi],
                    attack_succeeded: flags[bi],
                },
            });
        }
    }

    let manifest = ConstructionManifest {
        seed,
        offered: count,
        retained_after_filter: count,
        discarded_by_filter: 0,
        dropped_same_label: 0,
        min_cell_count: 0,
        balanced_rows: count,
        companion_d_adv_size: count,
        balancing: "balanced-target-assignment".into(),
    };
    assemble(rows, manifest, dataset.class_count)
}

/// A pool of universal perturbations, at least one per target class.
#[derive(Debug, Clone)]
pub struct UapPool {
    /// per_target[t] holds the UAPs aimed at class t.
    pub per_target: Vec<Vec<Perturbation>>,
}

impl UapPool {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.per_target.len() != classes || self.per_target.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidArgument(
                "UAP pool needs at least one perturbation per target class".into(),
            ));
        }
        Ok(())
    }

    /// Flat id of pool entry (target, index).
    pub fn flat_id(&self, target: usize, idx: usize) -> usize {
        self.per_target[..target].iter().map(Vec::len).sum::<usize>() + idx
    }
}

/// Compute `per_class` UAPs per target class over fresh seeded base sets of
/// size `k` drawn from the dataset.
pub fn build_uap_pool(
    model: &Classifier,
    dataset: &LabeledDataset,
    spec: &PerturbationSpec,
    k: usize,
    per_class: usize,
    seed: u64,
) -> Result<UapPool> {
    let mut per_target = Vec::with_capacity(dataset.class_count);
    for t in 0..dataset.class_count {
        let mut list = Vec::with_capacity(per_class);
        for j in 0..per_class {
            let base_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((t * per_class + j) as u64);
            let base = restricted_base_sets(dataset, BaseSetMode::Random, None, k, base_seed)?;
            let mut s = spec.clone();
            s.target = t;
            s.seed = base_seed;
            list.push(pgd_universal(model, &base, &s)?);
        }
        per_target.push(list);
    }
    Ok(UapPool { per_target })
}

/// Universal-perturbation dataset: targets assigned per batch, one pool UAP
/// per (target, batch), success-filtered, then exactly balanced over all
/// off-diagonal (original, new) label cells.
pub fn build_d_univ(
    model: &Classifier,
    dataset: &LabeledDataset,
    pool: &UapPool,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<ConstructedDataset> {
    pool.validate(dataset.class_count)?;
    build_d_univ_inner(model, dataset, pool, spec, seed, CellDomain::OffDiagonal, None)
}

/// Cyclic-label variant: the new label is (y + 1) mod C instead of random,
/// so the original content points away from the label by construction.
pub fn build_d_det_univ(
    model: &Classifier,
    dataset: &LabeledDataset,
    pool: &UapPool,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<ConstructedDataset> {
    pool.validate(dataset.class_count)?;
    build_d_univ_inner(model, dataset, pool, spec, seed, CellDomain::Cyclic, None)
}

fn build_d_univ_inner(
    model: &Classifier,
    dataset: &LabeledDataset,
    pool: &UapPool,
    spec: &PerturbationSpec,
    seed: u64,
    domain: CellDomain,
    row_subset: Option<&[usize]>,
) -> Result<ConstructedDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = match row_subset {
        Some(s) => s.to_vec(),
        None => (0..dataset.len()).collect(),
    };
    shuffle(&mut order, &mut rng);

    // Batch the rows and assign targets per batch.
    let batch_size = spec.batch_size.max(1);
    let batches: Vec<&[usize]> = order.chunks(batch_size).collect();
    let batch_targets: Vec<usize> = match domain {
        CellDomain::OffDiagonal => balanced_assignment(batches.len(), dataset.class_count, &mut rng),
        // Cyclic mode re-targets per row below; the per-batch value is a
        // placeholder refined by grouping rows by original label.
        CellDomain::Cyclic => vec![0; batches.len()],
    };

    let digest = model.digest();
    let mut rows: Vec<CandidateRow> = Vec::new();
    let mut uses_per_target = vec![0usize; dataset.class_count];

    match domain {
        CellDomain::OffDiagonal => {
            for (b, chunk) in batches.iter().enumerate() {
                let t = batch_targets[b];
                let pool_list = &pool.per_target[t];
                let uap = &pool_list[uses_per_target[t] % pool_list.len()];
                uses_per_target[t] += 1;
                let imgs = gather(&dataset.images, chunk);
                let targets = vec![t; chunk.len()];
                let (perturbed, flags) =
                    apply_and_flag(model, &imgs, None, Some(&uap.delta), &targets, spec.clamp_input)?;
                for (bi, img) in perturbed.into_iter().enumerate() {
                    rows.push(CandidateRow {
                        image: img,
                        y: dataset.labels[chunk[bi]],
                        t,
                        prov: SampleProvenance {
                            kind: PerturbationKind::Universal,
                            uap_id: Some(pool.flat_id(t, (uses_per_target[t] - 1) % pool_list.len())),
                            per_image: false,
                            k: uap.provenance.k,
                            epsilon: spec.epsilon,
                            norm_p: spec.norm_p,
                            source_model_digest: digest.clone(),
                            source_index: chunk[bi],
                            attack_succeeded: flags[bi],
                        },
                    });
                }
            }
        }
        CellDomain::Cyclic => {
            // Group rows by original label so batches share t = y + 1.
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
            for &i in &order {
                by_class[dataset.labels[i]].push(i);
            }
            for (y, members) in by_class.iter().enumerate() {
                let t = (y + 1) % dataset.class_count;
                for chunk in members.chunks(batch_size) {
                    let pool_list = &pool.per_target[t];
                    let uap = &pool_list[uses_per_target[t] % pool_list.len()];
                    uses_per_target[t] += 1;
                    let imgs = gather(&dataset.images, chunk);
                    let targets = vec![t; chunk.len()];
                    let (perturbed, flags) = apply_and_flag(
                        model,
                        &imgs,
                        None,
                        Some(&uap.delta),
                        &targets,
                        spec.clamp_input,
                    )?;
                    for (bi, img) in perturbed.into_iter().enumerate() {
                        rows.push(CandidateRow {
                            image: img,
                            y,
                            t,
                            prov: SampleProvenance {
                                kind: PerturbationKind::Universal,
                                uap_id: Some(
                                    pool.flat_id(t, (uses_per_target[t] - 1) % pool_list.len()),
                                ),
                                per_image: false,
                                k: uap.provenance.k,
                                epsilon: spec.epsilon,
                                norm_p: spec.norm_p,
                                source_model_digest: digest.clone(),
                                source_index: chunk[bi],
                                attack_succeeded: flags[bi],
                            },
                        });
                    }
                }
            }
        }
    }

    let (balanced, mut manifest, _) = filter_and_balance(rows, dataset.class_count, domain, &mut rng)?;
    manifest.seed = seed;
    assemble(balanced, manifest, dataset.class_count)
}

// ---------------------------------------------------------------------------
// K interpolation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KFamilyEntry {
    pub k: usize,
    pub dataset: ConstructedDataset,
    /// Original-test accuracy of a probe trained on the dataset.
    pub probe_accuracy: f32,
}

/// For each K, compute UAPs over fresh base sets of size K (K = 1 reuses
/// per-image attacks), run the universal filtering/balancing pipeline, and
/// train a fixed-config probe on the result.
#[allow(clippy::too_many_arguments)]
pub fn interp_k_family(
    model: &Classifier,
    dataset: &LabeledDataset,
    test: &LabeledDataset,
    ks: &[usize],
    spec: &PerturbationSpec,
    probe_cfg: &crate::model::TrainConfig,
    seed: u64,
) -> Result<Vec<KFamilyEntry>> {
    if ks.is_empty() {
        return Err(Error::EmptySet("K list".into()));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument("each K must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(ks.len());
    for (ki, &k) in ks.iter().enumerate() {
        let k_seed = seed.wrapping_add(1 + ki as u64);
        let constructed = build_k_dataset(model, dataset, k, spec, k_seed)?;
        let probe = crate::model::train_classifier(&constructed.to_labeled()?, probe_cfg)?;
        let (_, acc) = crate::model::predict_and_score(&probe, test)?;
        out.push(KFamilyEntry {
            k,
            dataset: constructed,
            probe_accuracy: acc,
        });
    }
    Ok(out)
}

/// One constructed dataset for a given base-set size K (K = 1 degenerates to
/// per-image attacks with the universal filter applied).
pub fn build_k_dataset(
    model: &Classifier,
    dataset: &LabeledDataset,
    k: usize,
    spec: &PerturbationSpec,
    seed: u64,
) -> Result<ConstructedDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digest = model.digest();
    let mut rows: Vec<CandidateRow> = Vec::new();

    if k == 1 {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        shuffle(&mut order, &mut rng);
        let targets = balanced_assignment(order.len(), dataset.class_count, &mut rng);
        let chunk_size = 64usize;
        for (ci, chunk) in order.chunks(chunk_size).enumerate() {
            let imgs = gather(&dataset.images, chunk);
            let t_slice = &targets[ci * chunk_size..ci * chunk_size + chunk.len()];
            let mut s = spec.clone();
            s.target = 0;
            let deltas = batched_standard_attacks(model, &imgs, t_slice, &s)?;
            let (perturbed, flags) =
                apply_and_flag(model, &imgs, Some(&deltas), None, t_slice, spec.clamp_input)?;
            for (bi, img) in perturbed.into_iter().enumerate() {
                rows.push(CandidateRow {
                    image: img,
                    y: dataset.labels[chunk[bi]],
                    t: t_slice[bi],
                    prov: SampleProvenance {
                        kind: PerturbationKind::Standard,
                        uap_id: None,
                        per_image: true,
                        k: 1,
                        epsilon: spec.epsilon,
                        norm_p: spec.norm_p,
                        source_model_digest: digest.clone(),
                        source_index: chunk[bi],
                        attack_succeeded: flags[bi],
                    },
                });
            }
        }
    } else {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        shuffle(&mut order, &mut rng);
        // Whole base sets only; a trailing partial group is dropped.
        let groups: Vec<&[usize]> = order.chunks_exact(k).collect();
        let targets = balanced_assignment(groups.len(), dataset.class_count, &mut rng);
        for (g, group) in groups.iter().enumerate() {
            let t = targets[g];
            let imgs = gather(&dataset.images, group);
            let base = BaseSet::new(imgs.clone(), group.to_vec(), BaseSetMode::Random)?;
            let mut s = spec.clone();
            s.target = t;
            s.seed = seed.wrapping_mul(0x517c_c1b7_2722_0a95).wrapping_add(g as u64);
            let uap = pgd_universal(model, &base, &s)?;
            let tvec = vec![t; group.len()];
            let (perturbed, flags) =
                apply_and_flag(model, &imgs, None, Some(&uap.delta), &tvec, spec.clamp_input)?;
            for (bi, img) in perturbed.into_iter().enumerate() {
                rows.push(CandidateRow {
                    image: img,
                    y: dataset.labels[group[bi]],
                    t,
                    prov: SampleProvenance {
                        kind: PerturbationKind::Universal,
                        uap_id: Some(g),
                        per_image: false,
                        k,
                        epsilon: spec.epsilon,
                        norm_p: spec.norm_p,
                        source_model_digest: digest.clone(),
                        source_index: group[bi],
                        attack_succeeded: flags[bi],
                    },
                });
            }
        }
    }

    let (balanced, mut manifest, _) =
        filter_and_balance(rows, dataset.class_count, CellDomain::OffDiagonal, &mut rng)?;
    manifest.seed = seed;
    assemble(balanced, manifest, dataset.class_count)
}

// ---------------------------------------------------------------------------
// Base sets
// ---------------------------------------------------------------------------

/// Draw a base set uniformly from a stratum of the dataset: everything, one
/// class, or one subclass. Indices are returned sorted.
pub fn restricted_base_sets(
    dataset: &LabeledDataset,
    mode: BaseSetMode,
    selector: Option<usize>,
    k: usize,
    seed: u64,
) -> Result<BaseSet> {
    let stratum: Vec<usize> = match mode {
        BaseSetMode::Random => (0..dataset.len()).collect(),
        BaseSetMode::SingleClass => {
            let c = selector.ok_or_else(|| {
                Error::InvalidArgument("single-class base set needs a class selector".into())
            })?;
            (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect()
        }
        BaseSetMode::SingleSubclass => {
            let s = selector.ok_or_else(|| {
                Error::InvalidArgument("single-subclass base set needs a subclass selector".into())
            })?;
            let fine = dataset.fine_labels.as_ref().ok_or_else(|| {
                Error::InvalidArgument("dataset has no fine labels".into())
            })?;
            (0..dataset.len()).filter(|&i| fine[i] == s).collect()
        }
        BaseSetMode::AugmentedSingleImage => {
            return Err(Error::InvalidArgument(
                "augmented base sets come from augmented_single_image_base_set".into(),
            ))
        }
    };
    if stratum.len() < k {
        return Err(Error::InvalidArgument(format!(
            "stratum of {} samples is smaller than K = {k}",
            stratum.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = stratum;
    shuffle(&mut picked, &mut rng);
    picked.truncate(k);
    picked.sort_unstable();
    let images = gather(&dataset.images, &picked);
    BaseSet::new(images, picked, mode)
}

/// K augmented copies of a single image (the training augmentation set:
/// padded random crop and horizontal flip).
pub fn augmented_single_image_base_set(
    image: &Tensor,
    k: usize,
    seed: u64,
    augment: bool,
) -> Result<BaseSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(k);
    for _ in 0..k {
        if augment {
            items.push(augment_image(image, &mut rng, 4, true));
        } else {
            items.push(image.clone());
        }
    }
    let images = Tensor::stack(&items)?;
    BaseSet::new(images, (0..k).collect(), BaseSetMode::AugmentedSingleImage)
}

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    #[serde(default = "probe_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
}

fn probe_momentum() -> f32 {
    0.9
}

struct LinearHead {
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
}

fn train_linear_head(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &LinearProbeConfig,
) -> Result<LinearHead> {
    let n = features.shape()[0];
    let dim = features.shape()[1];
    let layers = vec![LayerSpec::Dense {
        in_dim: dim,
        out_dim: classes,
    }];
    let mut params = crate::model::init_params(&layers, cfg.seed);
    let mut velocity = vec![Some(ParamPair {
        weight: Tensor::zeros(&[classes, dim]),
        bias: Tensor::zeros(&[classes]),
    })];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather(features, chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, bundle) = net::backward(&layers, &params, &batch, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "linear probe loss".into(),
                });
            }
            if let (Some(p), Some(v), Some(g)) = (
                params[0].as_mut(),
                velocity[0].as_mut(),
                bundle.param_grads[0].as_ref(),
            ) {
                for ((pv, vv), gv) in p
                    .weight
                    .data_mut()
                    .iter_mut()
                    .zip(v.weight.data_mut())
                    .zip(g.weight.data())
                {
                    *vv = cfg.momentum * *vv + (gv + cfg.weight_decay * *pv);
                    *pv -= cfg.learning_rate * *vv;
                }
                for ((pv, vv), gv) in p
                    .bias
                    .data_mut()
                    .iter_mut()
                    .zip(v.bias.data_mut())
                    .zip(g.bias.data())
                {
                    *vv = cfg.momentum * *vv + (gv + cfg.weight_decay * *pv);
                    *pv -= cfg.learning_rate * *vv;
                }
            }
        }
    }
    Ok(LinearHead { layers, params })
}

fn head_accuracy(head: &LinearHead, features: &Tensor, labels: &[usize]) -> Result<f32> {
    let n = features.shape()[0];
    let classes = match head.layers[0] {
        LayerSpec::Dense { out_dim, .. } => out_dim,
        _ => unreachable!(),
    };
    let mut correct = 0usize;
    for chunk in (0..n).collect::<Vec<_>>().chunks(256) {
        let batch = gather(features, chunk);
        let logits = net::forward(&head.layers, &head.params, &batch)?;
        for (bi, &i) in chunk.iter().enumerate() {
            let row = &logits.data()[bi * classes..(bi + 1) * classes];
            if crate::model::argmax(row) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / n as f32)
}

/// Freeze the feature extractor of `feature_source`, train only a linear
/// head on the constructed dataset, and report original-test accuracy.
pub fn leakage_probe(
    feature_source: &Classifier,
    constructed: &ConstructedDataset,
    test: &LabeledDataset,
    cfg: &LinearProbeConfig,
) -> Result<f32> {
    let train_feats = penultimate_features(feature_source, &constructed.images)?;
    let head = train_linear_head(
        &train_feats,
        &constructed.new_labels,
        constructed.class_count,
        cfg,
    )?;
    let test_feats = penultimate_features(feature_source, &test.images)?;
    head_accuracy(&head, &test_feats, &test.labels)
}

// ---------------------------------------------------------------------------
// Invariant checks and the chi-square oracle
// ---------------------------------------------------------------------------

/// Pearson chi-square p-value against the uniform distribution.
pub fn chi_square_uniform_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let cells = counts.len();
    if cells < 2 || n == 0 {
        return 1.0;
    }
    let expected = n as f64 / cells as f64;
    let stat: f64 = counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new((cells - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Pearson chi-square independence test of the (original, new) label joint.
/// Expected counts come from the observed margins; degrees of freedom are
/// (C - 1)^2.
pub fn chi_square_independence_p(y: &[usize], t: &[usize], classes: usize) -> f64 {
    let n = y.len();
    if n == 0 || classes < 2 {
        return 1.0;
    }
    let mut table = vec![0f64; classes * classes];
    let mut row = vec![0f64; classes];
    let mut col = vec![0f64; classes];
    for (&yi, &ti) in y.iter().zip(t) {
        table[yi * classes + ti] += 1.0;
        row[yi] += 1.0;
        col[ti] += 1.0;
    }
    let mut stat = 0.0f64;
    for yi in 0..classes {
        for ti in 0..classes {
            let e = row[yi] * col[ti] / n as f64;
            if e > 0.0 {
                let d = table[yi * classes + ti] - e;
                stat += d * d / e;
            }
        }
    }
    let dof = ((classes - 1) * (classes - 1)) as f64;
    let dist = ChiSquared::new(dof).unwrap();
    1.0 - dist.cdf(stat)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantReport {
    /// Max over rows of ||image - source||_p, must be <= eps * (1 + 1e-6).
    pub max_budget_norm: f32,
    pub budget_ok: bool,
    /// Fraction of rows the source model classifies as the new label.
    pub filter_correct_fraction: f32,
    /// Max count difference across new-label marginal.
    pub marginal_max_diff: usize,
    pub chi_square_p: f64,
}

/// Recompute the constructed-dataset invariants against the source dataset
/// and model.
pub fn check_dataset_invariants(
    model: &Classifier,
    constructed: &ConstructedDataset,
    source: &LabeledDataset,
) -> Result<InvariantReport> {
    let mut max_norm = 0.0f32;
    let mut eps = 0.0f32;
    for (i, prov) in constructed.provenance.iter().enumerate() {
        let img = constructed.images.batch_item(i);
        let src = source.image(prov.source_index);
        let diff = img.sub(&src);
        max_norm = max_norm.max(diff.lp_norm(prov.norm_p));
        eps = eps.max(prov.epsilon);
    }
    let budget_ok = max_norm <= eps * (1.0 + 1e-6);

    let preds = model.predict(&constructed.images)?;
    let correct = preds
        .iter()
        .zip(&constructed.new_labels)
        .filter(|(p, t)| p == t)
        .count();

    let mut counts = vec![0usize; constructed.class_count];
    for &t in &constructed.new_labels {
        counts[t] += 1;
    }
    let marginal_max_diff = counts.iter().max().unwrap() - counts.iter().min().unwrap();

    Ok(InvariantReport {
        max_budget_norm: max_norm,
        budget_ok,
        filter_correct_fraction: correct as f32 / constructed.len() as f32,
        marginal_max_diff,
        chi_square_p: chi_square_independence_p(
            &constructed.original_labels,
            &constructed.new_labels,
            constructed.class_count,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn balanced_assignment_max_diff_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [10, 95, 1000, 1003] {
            let a = balanced_assignment(n, 10, &mut rng);
            assert_eq!(a.len(), n);
            let mut counts = vec![0usize; 10];
            for &c in &a {
                counts[c] += 1;
            }
            let diff = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            assert!(diff <= 1, "n={n}, diff={diff}");
        }
    }

    #[test]
    fn chi_square_uniform_matches_closed_form() {
        // dof = 2: p = exp(-stat / 2). counts [10,20,30]: stat = 10,
        // p = exp(-5) ~= 6.737947e-3.
        let p = chi_square_uniform_p(&[10, 20, 30]);
        assert!((p - (-5.0f64).exp()).abs() < 1e-12, "p = {p}");
        // Perfectly uniform counts give p = 1.
        assert_eq!(chi_square_uniform_p(&[5, 5, 5, 5]), 1.0);
    }

    #[test]
    fn chi_square_independence_detects_coupling() {
        // Independent-ish: t = (y * 7 + i) patterns scattered.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..10)).collect();
        let t: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..10)).collect();
        assert!(chi_square_independence_p(&y, &t, 10) > 0.01);

        // Deterministic coupling fails hard.
        let t2: Vec<usize> = y.iter().map(|&v| (v + 1) % 10).collect();
        assert!(chi_square_independence_p(&y, &t2, 10) < 1e-6);
    }

    #[test]
    fn cyclic_label_map_wraps() {
        assert_eq!((9 + 1) % 10, 0);
    }

    #[test]
    fn restricted_base_full_random_is_sorted_everything() {
        let (train, _) =
            crate::data::generate_synthetic(&crate::data::SyntheticSpec::desk(3, 3, 1)).unwrap();
        let base = restricted_base_sets(&train, BaseSetMode::Random, None, train.len(), 0).unwrap();
        assert_eq!(base.indices, (0..train.len()).collect::<Vec<_>>());
    }

    #[test]
    fn restricted_base_single_class_filters() {
        let (train, _) =
            crate::data::generate_synthetic(&crate::data::SyntheticSpec::desk(3, 4, 1)).unwrap();
        let base = restricted_base_sets(&train, BaseSetMode::SingleClass, Some(2), 3, 7).unwrap();
        assert_eq!(base.k(), 3);
        for &i in &base.indices {
            assert_eq!(train.labels[i], 2);
        }
        // Stratum smaller than K is rejected.
        assert!(restricted_base_sets(&train, BaseSetMode::SingleClass, Some(2), 5, 7).is_err());
    }

    #[test]
    fn restricted_base_subclass_needs_fine_labels() {
        let (train, _) =
            crate::data::generate_synthetic(&crate::data::SyntheticSpec::desk(3, 4, 1)).unwrap();
        assert!(restricted_base_sets(&train, BaseSetMode::SingleSubclass, Some(0), 2, 7).is_err());
    }

    #[test]
    fn augmented_base_set_copies() {
        let img = Tensor::filled(&[3, 8, 8], 0.4);
        let base = augmented_single_image_base_set(&img, 1, 5, false).unwrap();
        assert_eq!(base.images.batch_item(0), img);
        let base = augmented_single_image_base_set(&img, 4, 5, true).unwrap();
        assert_eq!(base.k(), 4);
    }

    #[test]
    fn augmented_copies_differ_when_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::from_vec(
            &[3, 8, 8],
            (0..192).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let base = augmented_single_image_base_set(&img, 4, 5, true).unwrap();
        let mut distinct = 0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                if base.images.batch_item(i) != base.images.batch_item(j) {
                    distinct += 1;
                }
            }
        }
        assert!(distinct > 0, "seeded augmentations should differ");
    }
}
