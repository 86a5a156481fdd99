//! Attack success rate, cross-model transferability, and scale sweeps.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

/// Success accounting for one perturbation against one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrReport {
    pub target: usize,
    pub successes: usize,
    pub evaluated: usize,
    pub excluded: usize,
    /// successes / evaluated.
    pub asr: f32,
    pub eval_digest: String,
    pub exclude_target_class: bool,
}

/// Success/evaluated/excluded counts without the report envelope; the inner
/// loop shared by every analysis.
pub(crate) fn asr_counts(
    model: &Classifier,
    images: &Tensor,
    labels: &[usize],
    delta: &Tensor,
    target: usize,
    exclude_target_class: bool,
    clamp: bool,
) -> Result<(usize, usize, usize)> {
    let n = images.shape()[0];
    let per = delta.numel();
    if images.numel() / n != per {
        return Err(Error::BadShape(format!(
            "delta shape {:?} does not match images {:?}",
            delta.shape(),
            images.shape()
        )));
    }
    let mut successes = 0usize;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;

    let keep: Vec<usize> = (0..n)
        .filter(|&i| {
            if exclude_target_class && labels[i] == target {
                excluded += 1;
                false
            } else {
                true
            }
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySet("attack evaluation set".into()));
    }

    for chunk in keep.chunks(128) {
        let mut batch = crate::attack::gather(images, chunk);
        {
            let data = batch.data_mut();
            for bi in 0..chunk.len() {
                let row = &mut data[bi * per..(bi + 1) * per];
                for (v, d) in row.iter_mut().zip(delta.data()) {
                    *v += d;
                }
            }
        }
        if clamp {
            batch.clamp(0.0, 1.0);
        }
        let preds = model.predict(&batch)?;
        for p in preds {
            evaluated += 1;
            if p == target {
                successes += 1;
            }
        }
    }
    Ok((successes, evaluated, excluded))
}

/// ASR of a single shared perturbation over a dataset.
pub fn attack_success_rate(
    model: &Classifier,
    dataset: &LabeledDataset,
    delta: &Tensor,
    target: usize,
    exclude_target_class: bool,
    clamp: bool,
) -> Result<AsrReport> {
    let (successes, evaluated, excluded) = asr_counts(
        model,
        &dataset.images,
        &dataset.labels,
        delta,
        target,
        exclude_target_class,
        clamp,
    )?;
    Ok(AsrReport {
        target,
        successes,
        evaluated,
        excluded,
        asr: successes as f32 / evaluated as f32,
        eval_digest: dataset.digest(),
        exclude_target_class,
    })
}

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

/// Already-perturbed inputs with the target each perturbation aimed at and
/// the original label of each source image.
#[derive(Debug, Clone)]
pub struct PerturbedSet {
    pub images: Tensor,
    pub targets: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PerturbedSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassTransfer {
    pub kept: usize,
    pub transferred: usize,
    pub rate: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelTransfer {
    pub kept: usize,
    pub transferred: usize,
    pub overall_rate: f32,
    /// Per original class; `None` where no samples survived the filter.
    pub per_class: Vec<Option<ClassTransfer>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    /// Rows kept by the source filter (source predicts the target class and
    /// the original label differs from it).
    pub kept: usize,
    pub per_model: Vec<ModelTransfer>,
}

/// Transfer rates of perturbed inputs from a source model to target models.
///
/// Keeps only rows where the source model predicts the intended target and
/// the original label differs from it, then measures the fraction each
/// target model also sends to the intended target.
pub fn transfer_rate(
    source: &Classifier,
    targets: &[&Classifier],
    perturbed: &PerturbedSet,
) -> Result<TransferReport> {
    for t in targets {
        if t.input_shape != source.input_shape || t.num_classes != source.num_classes {
            return Err(Error::InvalidArgument(
                "transfer models must share input shape and class count".into(),
            ));
        }
    }
    let preds = source.predict(&perturbed.images)?;
    let kept_idx: Vec<usize> = (0..perturbed.len())
        .filter(|&i| preds[i] == perturbed.targets[i] && perturbed.labels[i] != perturbed.targets[i])
        .collect();
    if kept_idx.is_empty() {
        return Err(Error::EmptySet(
            "no perturbed inputs survive the source filter".into(),
        ));
    }
    let kept_images = crate::attack::gather(&perturbed.images, &kept_idx);

    let mut per_model = Vec::with_capacity(targets.len());
    for t in targets {
        let t_preds = t.predict(&kept_images)?;
        let mut class_kept = vec![0usize; source.num_classes];
        let mut class_hit = vec![0usize; source.num_classes];
        let mut transferred = 0usize;
        for (k, &i) in kept_idx.iter().enumerate() {
            let y = perturbed.labels[i];
            class_kept[y] += 1;
            if t_preds[k] == perturbed.targets[i] {
                class_hit[y] += 1;
                transferred += 1;
            }
        }
        let per_class = class_kept
            .iter()
            .zip(&class_hit)
            .map(|(&kept, &hit)| {
                if kept == 0 {
                    None
                } else {
                    Some(ClassTransfer {
                        kept,
                        transferred: hit,
                        rate: hit as f32 / kept as f32,
                    })
                }
            })
            .collect();
        per_model.push(ModelTransfer {
            kept: kept_idx.len(),
            transferred,
            overall_rate: transferred as f32 / kept_idx.len() as f32,
            per_class,
        });
    }
    Ok(TransferReport {
        kept: kept_idx.len(),
        per_model,
    })
}

// ---------------------------------------------------------------------------
// Scale sweeps
// ---------------------------------------------------------------------------

/// ASR of `s * delta` across scales and models. No re-projection: the sweep
/// deliberately exceeds the training radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleSweep {
    pub scales: Vec<f32>,
    pub per_model: Vec<(String, Vec<AsrReport>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn scale_sweep(
    models: &[(String, &Classifier)],
    dataset: &LabeledDataset,
    delta: &Tensor,
    target: usize,
    scales: &[f32],
    exclude_target_class: bool,
    clamp: bool,
) -> Result<ScaleSweep> {
    if scales.is_empty() {
        return Err(Error::EmptySet("scale list".into()));
    }
    if scales.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidArgument("negative scale".into()));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("scales must be strictly increasing".into()));
    }
    let mut per_model = Vec::with_capacity(models.len());
    for (name, model) in models {
        let mut reports = Vec::with_capacity(scales.len());
        for &s in scales {
            let scaled = delta.scaled(s);
            reports.push(attack_success_rate(
                model,
                dataset,
                &scaled,
                target,
                exclude_target_class,
                clamp,
            )?);
        }
        per_model.push((name.clone(), reports));
    }
    Ok(ScaleSweep {
        scales: scales.to_vec(),
        per_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerSpec, ParamPair};

    /// A linear model whose prediction over index-images is fully
    /// controllable: logit[c] = weight[c, hot] for a one-hot input.
    fn fixed_model(weights: Vec<f32>, classes: usize, dim: usize) -> Classifier {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: dim,
                out_dim: classes,
            },
        ];
        let params = vec![
            None,
            Some(ParamPair {
                weight: Tensor::from_vec(&[classes, dim], weights).unwrap(),
                bias: Tensor::zeros(&[classes]),
            }),
        ];
        Classifier {
            layers,
            params,
            input_shape: [1, 1, dim],
            num_classes: classes,
            provenance: crate::model::Provenance {
                seed: 0,
                config: crate::model::TrainConfig {
                    epochs: 0,
                    learning_rate: 0.1,
                    momentum: 0.0,
                    weight_decay: 0.0,
                    batch_size: 1,
                    lr_drop_epochs: vec![],
                    lr_drop_factor: 1.0,
                    augment: false,
                    crop_padding: 0,
                    horizontal_flip: false,
                    seed: 0,
                    adversarial: None,
                },
                dataset_digest: String::new(),
                robust_epsilon: None,
                final_train_loss: None,
            },
        }
    }

    fn onehot_dataset(hots: &[usize], labels: Vec<usize>, dim: usize, classes: usize) -> LabeledDataset {
        let items: Vec<Tensor> = hots
            .iter()
            .map(|&h| {
                let mut v = vec![0.0f32; dim];
                v[h] = 1.0;
                Tensor::from_vec(&[1, 1, dim], v).unwrap()
            })
            .collect();
        LabeledDataset::new(Tensor::stack(&items).unwrap(), labels, classes, None).unwrap()
    }

    #[test]
    fn degenerate_always_target_model_gives_asr_one() {
        // Weight row for class 1 dominates every input coordinate.
        let model = fixed_model(vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0], 2, 3);
        let data = onehot_dataset(&[0, 1, 2], vec![0, 0, 0], 3, 2);
        let delta = Tensor::zeros(&[1, 1, 3]);
        let r = attack_success_rate(&model, &data, &delta, 1, true, true).unwrap();
        assert_eq!(r.asr, 1.0);
        assert_eq!(r.evaluated, 3);
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn zero_delta_perfect_model_excluding_target_gives_zero() {
        // Identity-ish weights: input coordinate c drives class c.
        let model = fixed_model(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let data = onehot_dataset(&[0, 1, 2, 0], vec![0, 1, 2, 0], 3, 3);
        let delta = Tensor::zeros(&[1, 1, 3]);
        let r = attack_success_rate(&model, &data, &delta, 2, true, true).unwrap();
        assert_eq!(r.asr, 0.0);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.evaluated, 3);
        assert_eq!(r.evaluated + r.excluded, 4);
    }

    #[test]
    fn hand_built_three_of_ten_gives_point_three() {
        // 10 one-hot samples; sending 1.0 at coordinate c yields class c
        // except coordinates 7..10 which all favor class 7.
        let mut w = vec![0.0f32; 100];
        for c in 0..10 {
            w[c * 10 + c] = 1.0;
        }
        // Coordinates 8 and 9 now vote for class 7, twice as strongly.
        w[8 * 10 + 8] = 0.0;
        w[9 * 10 + 9] = 0.0;
        w[7 * 10 + 8] = 2.0;
        w[7 * 10 + 9] = 2.0;
        let model = fixed_model(w, 10, 10);
        let labels: Vec<usize> = (0..10).map(|i| if i >= 8 { 0 } else { i }).collect();
        let data = onehot_dataset(&(0..10).collect::<Vec<_>>(), labels, 10, 10);
        let delta = Tensor::zeros(&[1, 1, 10]);
        // Exactly samples 7, 8, 9 land on class 7; label of sample 7 is 7,
        // so with exclusion ON it is excluded; samples 8 and 9 evaluated.
        let r = attack_success_rate(&model, &data, &delta, 7, false, true).unwrap();
        assert_eq!(r.successes, 3);
        assert!((r.asr - 0.3).abs() < 1e-6);
    }

    #[test]
    fn transfer_to_self_is_one() {
        let model = fixed_model(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let set = PerturbedSet {
            images: onehot_dataset(&[2, 2, 1], vec![0, 1, 0], 3, 3).images,
            targets: vec![2, 2, 1],
            labels: vec![0, 1, 0],
        };
        let report = transfer_rate(&model, &[&model], &set).unwrap();
        assert_eq!(report.per_model[0].overall_rate, 1.0);
        for bucket in report.per_model[0].per_class.iter().flatten() {
            assert_eq!(bucket.rate, 1.0);
        }
    }

    #[test]
    fn transfer_filter_drops_target_label_rows() {
        let model = fixed_model(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let set = PerturbedSet {
            images: onehot_dataset(&[2, 2], vec![2, 0], 3, 3).images,
            targets: vec![2, 2],
            labels: vec![2, 0], // first row has y == t, must be dropped
        };
        let report = transfer_rate(&model, &[&model], &set).unwrap();
        assert_eq!(report.kept, 1);
        assert!(report.per_model[0].per_class[2].is_none());
    }

    #[test]
    fn scale_sweep_endpoints() {
        let model = fixed_model(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let data = onehot_dataset(&[0, 1], vec![0, 1], 3, 3);
        let mut delta = Tensor::zeros(&[1, 1, 3]);
        delta.data_mut()[2] = 2.0;
        let sweep = scale_sweep(
            &[("m".into(), &model)],
            &data,
            &delta,
            2,
            &[0.0, 1.0],
            true,
            false,
        )
        .unwrap();
        let baseline = attack_success_rate(&model, &data, &Tensor::zeros(&[1, 1, 3]), 2, true, false)
            .unwrap();
        let plain = attack_success_rate(&model, &data, &delta, 2, true, false).unwrap();
        assert_eq!(sweep.per_model[0].1[0].asr, baseline.asr);
        assert_eq!(sweep.per_model[0].1[1].asr, plain.asr);
    }

    #[test]
    fn scale_sweep_rejects_bad_scales() {
        let model = fixed_model(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let data = onehot_dataset(&[0, 1], vec![0, 1], 2, 2);
        let delta = Tensor::zeros(&[1, 1, 2]);
        assert!(scale_sweep(&[("m".into(), &model)], &data, &delta, 0, &[], true, true).is_err());
        assert!(
            scale_sweep(&[("m".into(), &model)], &data, &delta, 0, &[-1.0, 0.5], true, true)
                .is_err()
        );
        assert!(
            scale_sweep(&[("m".into(), &model)], &data, &delta, 0, &[0.5, 0.5], true, true)
                .is_err()
        );
    }
}
