//! Config-driven experiment orchestration.
//!
//! A config is a JSON object with a `pipeline` tag and pipeline-specific
//! fields. Unknown keys and unknown pipeline names are rejected before any
//! work starts, every seed is explicit, and reruns with the same config
//! reproduce every output byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::{BaseSetMode, NormP, PerturbationKind, PerturbationSpec};
use crate::data::{generate_synthetic, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::PerturbedSet;
use crate::forge::{self, LinearProbeConfig};
use crate::geometry;
use crate::io;
use crate::model::{self, Classifier, TrainConfig};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// Where a labeled (train, test) pair comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Built-in generated family; always available.
    Synthetic(SyntheticSpec),
    Cifar10(Cifar10Source),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cifar10Source {
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

impl DatasetSource {
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
            DatasetSource::Cifar10(src) => {
                let mut train = io::load_cifar10_binary(&src.train_paths)?;
                let mut test = io::load_cifar10_binary(&src.test_paths)?;
                if let Some(limit) = src.train_limit {
                    train = train.subset(&(0..limit.min(train.len())).collect::<Vec<_>>())?;
                }
                if let Some(limit) = src.test_limit {
                    test = test.subset(&(0..limit.min(test.len())).collect::<Vec<_>>())?;
                }
                Ok((train, test))
            }
        }
    }

    fn input_paths(&self) -> Vec<PathBuf> {
        match self {
            DatasetSource::Synthetic(_) => Vec::new(),
            DatasetSource::Cifar10(src) => src
                .train_paths
                .iter()
                .chain(&src.test_paths)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackJob {
    pub dataset: DatasetSource,
    pub model: PathBuf,
    pub attack: PerturbationSpec,
    /// How many eligible test images to attack.
    pub count: usize,
    #[serde(default)]
    pub save_perturbations: usize,
    #[serde(default = "default_true")]
    pub exclude_target_class: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UapJob {
    pub dataset: DatasetSource,
    pub model: PathBuf,
    pub attack: PerturbationSpec,
    pub k: usize,
    #[serde(default = "default_base_mode")]
    pub base_mode: BaseSetMode,
    #[serde(default)]
    pub selector: Option<usize>,
    #[serde(default = "default_true")]
    pub exclude_target_class: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalityJob {
    pub dataset: DatasetSource,
    pub model: PathBuf,
    pub perturbation: PathBuf,
    pub target: usize,
    pub n_patches: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub norm_p: NormP,
    #[serde(default = "default_true")]
    pub exclude_target_class: bool,
    #[serde(default = "default_true")]
    pub clamp_input: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialJob {
    pub dataset: DatasetSource,
    pub model: PathBuf,
    pub kind: PerturbationKind,
    /// Universal mode: paths of saved perturbations to average over.
    #[serde(default)]
    pub perturbations: Vec<PathBuf>,
    /// Standard mode: per-image attacks computed on the fly.
    #[serde(default)]
    pub attack: Option<PerturbationSpec>,
    pub count: usize,
    pub target: usize,
    pub stride: usize,
    #[serde(default)]
    pub exclude_target_class: bool,
    #[serde(default = "default_true")]
    pub clamp_input: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferJob {
    pub dataset: DatasetSource,
    pub source: PathBuf,
    pub targets: Vec<NamedPath>,
    pub attack: PerturbationSpec,
    pub count: usize,
    /// Universal perturbations to compare against the per-image attacks.
    pub uap_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSweepJob {
    pub dataset: DatasetSource,
    pub models: Vec<NamedPath>,
    pub perturbation: PathBuf,
    pub target: usize,
    pub scales: Vec<f32>,
    #[serde(default)]
    pub exclude_target_class: bool,
    #[serde(default = "default_true")]
    pub clamp_input: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstructedKind {
    Adv,
    Univ,
    DetUniv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolCfg {
    pub k: usize,
    pub per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildDatasetJob {
    pub dataset: DatasetSource,
    pub model: PathBuf,
    pub attack: PerturbationSpec,
    pub kind: ConstructedKind,
    pub seed: u64,
    /// Row count for the per-image variant.
    #[serde(default)]
    pub count: Option<usize>,
    /// UAP pool shape for the universal variants.
    #[serde(default)]
    pub pool: Option<PoolCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpKJob {
    pub dataset: DatasetSource,
    pub model: PathBuf,
    pub attack: PerturbationSpec,
    pub ks: Vec<usize>,
    pub probe: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageJob {
    pub dataset: DatasetSource,
    pub constructed: PathBuf,
    pub features: Vec<NamedPath>,
    pub probe: LinearProbeConfig,
}

fn default_true() -> bool {
    true
}

fn default_base_mode() -> BaseSetMode {
    BaseSetMode::Random
}

#[derive(Debug, Clone)]
pub enum ExperimentConfig {
    Train(TrainJob),
    AdvTrain(TrainJob),
    Attack(AttackJob),
    Uap(UapJob),
    Locality(LocalityJob),
    Spatial(SpatialJob),
    Transfer(TransferJob),
    ScaleSweep(ScaleSweepJob),
    BuildDataset(BuildDatasetJob),
    InterpK(InterpKJob),
    Leakage(LeakageJob),
}

impl ExperimentConfig {
    pub fn pipeline_name(&self) -> &'static str {
        match self {
            ExperimentConfig::Train(_) => "train",
            ExperimentConfig::AdvTrain(_) => "adv-train",
            ExperimentConfig::Attack(_) => "attack",
            ExperimentConfig::Uap(_) => "uap",
            ExperimentConfig::Locality(_) => "locality",
            ExperimentConfig::Spatial(_) => "spatial",
            ExperimentConfig::Transfer(_) => "transfer",
            ExperimentConfig::ScaleSweep(_) => "scale-sweep",
            ExperimentConfig::BuildDataset(_) => "build-dataset",
            ExperimentConfig::InterpK(_) => "interp-k",
            ExperimentConfig::Leakage(_) => "leakage",
        }
    }

    /// Parse a config document, rejecting unknown pipeline names and unknown
    /// keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        let obj = value.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig("config must be a JSON object".into())
        })?;
        let pipeline = obj
            .remove("pipeline")
            .ok_or_else(|| Error::InvalidConfig("missing \"pipeline\" key".into()))?;
        let pipeline = pipeline
            .as_str()
            .ok_or_else(|| Error::InvalidConfig("\"pipeline\" must be a string".into()))?
            .to_string();
        let rest = Value::Object(obj.clone());
        let parsed = match pipeline.as_str() {
            "train" => ExperimentConfig::Train(serde_json::from_value(rest)?),
            "adv-train" => ExperimentConfig::AdvTrain(serde_json::from_value(rest)?),
            "attack" => ExperimentConfig::Attack(serde_json::from_value(rest)?),
            "uap" => ExperimentConfig::Uap(serde_json::from_value(rest)?),
            "locality" => ExperimentConfig::Locality(serde_json::from_value(rest)?),
            "spatial" => ExperimentConfig::Spatial(serde_json::from_value(rest)?),
            "transfer" => ExperimentConfig::Transfer(serde_json::from_value(rest)?),
            "scale-sweep" => ExperimentConfig::ScaleSweep(serde_json::from_value(rest)?),
            "build-dataset" => ExperimentConfig::BuildDataset(serde_json::from_value(rest)?),
            "interp-k" => ExperimentConfig::InterpK(serde_json::from_value(rest)?),
            "leakage" => ExperimentConfig::Leakage(serde_json::from_value(rest)?),
            other => return Err(Error::UnknownPipeline(other.to_string())),
        };
        Ok(parsed)
    }

    /// Replace every `"seed"` field in the document with the override.
    pub fn from_json_with_override(text: &str, seed_override: Option<u64>) -> Result<Self> {
        match seed_override {
            None => Self::from_json(text),
            Some(seed) => {
                let mut value: Value = serde_json::from_str(text)?;
                override_seeds(&mut value, seed);
                Self::from_json(&serde_json::to_string(&value)?)
            }
        }
    }

    fn referenced_paths(&self) -> Vec<PathBuf> {
        let mut paths = Vec::new();
        match self {
            ExperimentConfig::Train(j) | ExperimentConfig::AdvTrain(j) => {
                paths.extend(j.dataset.input_paths())
            }
            ExperimentConfig::Attack(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.model.clone());
            }
            ExperimentConfig::Uap(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.model.clone());
            }
            ExperimentConfig::Locality(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.model.clone());
                paths.push(j.perturbation.clone());
            }
            ExperimentConfig::Spatial(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.model.clone());
                paths.extend(j.perturbations.clone());
            }
            ExperimentConfig::Transfer(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.source.clone());
                paths.extend(j.targets.iter().map(|t| t.path.clone()));
                paths.extend(j.uap_paths.clone());
            }
            ExperimentConfig::ScaleSweep(j) => {
                paths.extend(j.dataset.input_paths());
                paths.extend(j.models.iter().map(|m| m.path.clone()));
                paths.push(j.perturbation.clone());
            }
            ExperimentConfig::BuildDataset(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.model.clone());
            }
            ExperimentConfig::InterpK(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.model.clone());
            }
            ExperimentConfig::Leakage(j) => {
                paths.extend(j.dataset.input_paths());
                paths.push(j.constructed.clone());
                paths.extend(j.features.iter().map(|f| f.path.clone()));
            }
        }
        paths
    }
}

fn override_seeds(value: &mut Value, seed: u64) {
    match value {
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if k == "seed" && (v.is_number()) {
                    *v = Value::from(seed);
                } else {
                    override_seeds(v, seed);
                }
            }
        }
        Value::Array(items) => {
            for v in items {
                override_seeds(v, seed);
            }
        }
        _ => {}
    }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct RunManifest {
    pipeline: String,
    deterministic: bool,
    config: Value,
    input_digests: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// Execution summary: the artifact directory and the files written into it.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outputs: Vec<PathBuf>,
}

/// Execute a parsed pipeline, writing all artifacts under `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    config_echo: Value,
    out_dir: &Path,
    deterministic: bool,
) -> Result<RunSummary> {
    // Missing inputs are structured errors before any work starts.
    for path in config.referenced_paths() {
        if !path.exists() {
            return Err(Error::InvalidConfig(format!(
                "missing input artifact: {}",
                path.display()
            )));
        }
    }
    fs::create_dir_all(out_dir)?;

    let mut digests: BTreeMap<String, String> = BTreeMap::new();
    let mut outputs: Vec<PathBuf> = Vec::new();
    let emit = |name: &str, bytes: &[u8], outputs: &mut Vec<PathBuf>| -> Result<()> {
        let path = out_dir.join(name);
        io::write_atomic(&path, bytes)?;
        outputs.push(path);
        Ok(())
    };

    match config {
        ExperimentConfig::Train(job) | ExperimentConfig::AdvTrain(job) => {
            let adversarial = matches!(config, ExperimentConfig::AdvTrain(_));
            if adversarial && job.train.adversarial.is_none() {
                return Err(Error::InvalidConfig(
                    "adv-train needs the adversarial block in the train config".into(),
                ));
            }
            let (train, test) = job.dataset.load()?;
            digests.insert("train_dataset".into(), train.digest());
            digests.insert("test_dataset".into(), test.digest());
            let model = if adversarial {
                model::adv_train_classifier(&train, &job.train)?
            } else {
                model::train_classifier(&train, &job.train)?
            };
            let (_, train_acc) = model::predict_and_score(&model, &train)?;
            let (_, test_acc) = model::predict_and_score(&model, &test)?;
            io::save_checkpoint(&out_dir.join("model.uapc"), &model)?;
            outputs.push(out_dir.join("model.uapc"));
            let rows = vec![
                ("train".to_string(), train.len(), train_acc),
                ("test".to_string(), test.len(), test_acc),
            ];
            emit("metrics.csv", io::csv_generalization(&rows).as_bytes(), &mut outputs)?;
        }

        ExperimentConfig::Attack(job) => {
            let (_, test) = job.dataset.load()?;
            let model = io::load_checkpoint(&job.model)?;
            digests.insert("model".into(), model.digest());
            digests.insert("test_dataset".into(), test.digest());
            let eligible: Vec<usize> = (0..test.len())
                .filter(|&i| !(job.exclude_target_class && test.labels[i] == job.attack.target))
                .take(job.count)
                .collect();
            if eligible.is_empty() {
                return Err(Error::EmptySet("no eligible rows to attack".into()));
            }
            let images = crate::attack::gather(&test.images, &eligible);
            let targets = vec![job.attack.target; eligible.len()];
            let deltas = forge::batched_standard_attacks(&model, &images, &targets, &job.attack)?;
            let mut perturbed = images.clone();
            perturbed.add_scaled(&deltas, 1.0);
            if job.attack.clamp_input {
                perturbed.clamp(0.0, 1.0);
            }
            let preds = model.predict(&perturbed)?;
            let successes = preds.iter().filter(|&&p| p == job.attack.target).count();
            let report = crate::eval::AsrReport {
                target: job.attack.target,
                successes,
                evaluated: eligible.len(),
                excluded: test.len().saturating_sub(eligible.len()),
                asr: successes as f32 / eligible.len() as f32,
                eval_digest: test.digest(),
                exclude_target_class: job.exclude_target_class,
            };
            emit("asr.csv", io::csv_asr_report(&report).as_bytes(), &mut outputs)?;
            for i in 0..job.save_perturbations.min(eligible.len()) {
                let delta = deltas.batch_item(i);
                let name = format!("perturbation_{i:03}.uapt");
                io::save_tensor(&out_dir.join(&name), &delta)?;
                outputs.push(out_dir.join(&name));
                let ppm = format!("perturbation_{i:03}.ppm");
                io::render_perturbation_ppm(&delta, &out_dir.join(&ppm))?;
                outputs.push(out_dir.join(ppm));
            }
        }

        ExperimentConfig::Uap(job) => {
            let (train, test) = job.dataset.load()?;
            let model = io::load_checkpoint(&job.model)?;
            digests.insert("model".into(), model.digest());
            digests.insert("train_dataset".into(), train.digest());
            let base = forge::restricted_base_sets(
                &train,
                job.base_mode,
                job.selector,
                job.k,
                job.attack.seed,
            )?;
            let uap = crate::attack::pgd_universal(&model, &base, &job.attack)?;
            io::save_tensor(&out_dir.join("uap.uapt"), &uap.delta)?;
            outputs.push(out_dir.join("uap.uapt"));
            io::render_perturbation_ppm(&uap.delta, &out_dir.join("uap.ppm"))?;
            outputs.push(out_dir.join("uap.ppm"));
            let report = crate::eval::attack_success_rate(
                &model,
                &test,
                &uap.delta,
                job.attack.target,
                job.exclude_target_class,
                job.attack.clamp_input,
            )?;
            emit("asr.csv", io::csv_asr_report(&report).as_bytes(), &mut outputs)?;
        }

        ExperimentConfig::Locality(job) => {
            let (_, test) = job.dataset.load()?;
            let model = io::load_checkpoint(&job.model)?;
            let delta = io::load_tensor(&job.perturbation)?;
            digests.insert("model".into(), model.digest());
            let report = geometry::locality_report(
                &model,
                &test,
                &delta,
                job.target,
                job.n_patches,
                job.patch_size,
                job.seed,
                job.norm_p,
                job.exclude_target_class,
                job.clamp_input,
            )?;
            emit("locality.csv", io::csv_locality(&report).as_bytes(), &mut outputs)?;
            io::render_perturbation_ppm(&delta, &out_dir.join("whole.ppm"))?;
            outputs.push(out_dir.join("whole.ppm"));
            for (rank, p) in report.ranked.iter().enumerate() {
                let tag = match p.highlight {
                    geometry::PatchHighlight::Top => "top",
                    geometry::PatchHighlight::Bottom => "bottom",
                    geometry::PatchHighlight::None => continue,
                };
                let name = format!("patch_{tag}_{rank:02}.ppm");
                io::render_perturbation_ppm(&p.patch.tensor, &out_dir.join(&name))?;
                outputs.push(out_dir.join(name));
            }
        }

        ExperimentConfig::Spatial(job) => {
            let (_, test) = job.dataset.load()?;
            let model = io::load_checkpoint(&job.model)?;
            digests.insert("model".into(), model.digest());
            let rows: Vec<usize> = (0..test.len()).take(job.count).collect();
            if rows.is_empty() {
                return Err(Error::EmptySet("spatial image set".into()));
            }
            let images = crate::attack::gather(&test.images, &rows);
            let labels: Vec<usize> = rows.iter().map(|&i| test.labels[i]).collect();
            let perturbations: Vec<Tensor> = match job.kind {
                PerturbationKind::Standard => {
                    let attack = job.attack.as_ref().ok_or_else(|| {
                        Error::InvalidConfig("standard spatial mode needs an attack block".into())
                    })?;
                    let targets = vec![job.target; rows.len()];
                    let deltas = forge::batched_standard_attacks(&model, &images, &targets, attack)?;
                    (0..rows.len()).map(|i| deltas.batch_item(i)).collect()
                }
                _ => {
                    if job.perturbations.is_empty() {
                        return Err(Error::InvalidConfig(
                            "universal spatial mode needs perturbation paths".into(),
                        ));
                    }
                    job.perturbations
                        .iter()
                        .map(|p| io::load_tensor(p))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let grid = geometry::spatial_asr_grid(
                &model,
                &images,
                &labels,
                &perturbations,
                job.kind,
                job.target,
                job.stride,
                job.exclude_target_class,
                job.clamp_input,
            )?;
            emit("spatial.csv", io::csv_translation_grid(&grid).as_bytes(), &mut outputs)?;
        }

        ExperimentConfig::Transfer(job) => {
            let (_, test) = job.dataset.load()?;
            let source = io::load_checkpoint(&job.source)?;
            let target_models: Vec<(String, Classifier)> = job
                .targets
                .iter()
                .map(|t| Ok((t.name.clone(), io::load_checkpoint(&t.path)?)))
                .collect::<Result<Vec<_>>>()?;
            digests.insert("source_model".into(), source.digest());

            let rows: Vec<usize> = (0..test.len())
                .filter(|&i| test.labels[i] != job.attack.target)
                .take(job.count)
                .collect();
            let images = crate::attack::gather(&test.images, &rows);
            let labels: Vec<usize> = rows.iter().map(|&i| test.labels[i]).collect();
            let targets = vec![job.attack.target; rows.len()];

            // Per-image standard perturbations.
            let deltas = forge::batched_standard_attacks(&source, &images, &targets, &job.attack)?;
            let mut std_images = images.clone();
            std_images.add_scaled(&deltas, 1.0);
            if job.attack.clamp_input {
                std_images.clamp(0.0, 1.0);
            }
            let std_set = PerturbedSet {
                images: std_images,
                targets: targets.clone(),
                labels: labels.clone(),
            };
            let refs: Vec<&Classifier> = target_models.iter().map(|(_, m)| m).collect();
            let names: Vec<String> = target_models.iter().map(|(n, _)| n.clone()).collect();
            let std_report = crate::eval::transfer_rate(&source, &refs, &std_set)?;
            // Prefix each data row with its kind.
            let mut combined = String::from("kind,model,original_class,kept,transferred,rate\n");
            for line in io::csv_transfer_report(&names, &std_report).lines().skip(1) {
                combined.push_str(&format!("standard,{line}\n"));
            }

            // Universal perturbations applied to the same rows.
            for (ui, path) in job.uap_paths.iter().enumerate() {
                let delta = io::load_tensor(path)?;
                let mut uap_images = images.clone();
                let per = delta.numel();
                {
                    let data = uap_images.data_mut();
                    for ni in 0..rows.len() {
                        let row = &mut data[ni * per..(ni + 1) * per];
                        for (v, d) in row.iter_mut().zip(delta.data()) {
                            *v += d;
                        }
                    }
                }
                if job.attack.clamp_input {
                    uap_images.clamp(0.0, 1.0);
                }
                let uap_set = PerturbedSet {
                    images: uap_images,
                    targets: targets.clone(),
                    labels: labels.clone(),
                };
                match crate::eval::transfer_rate(&source, &refs, &uap_set) {
                    Ok(report) => {
                        for line in io::csv_transfer_report(&names, &report).lines().skip(1) {
                            combined.push_str(&format!("universal_{ui},{line}\n"));
                        }
                    }
                    Err(Error::EmptySet(_)) => {
                        combined.push_str(&format!("universal_{ui},all,absent,0,0,0\n"));
                    }
                    Err(e) => return Err(e),
                }
            }
            emit("transfer.csv", combined.as_bytes(), &mut outputs)?;
        }

        ExperimentConfig::ScaleSweep(job) => {
            let (_, test) = job.dataset.load()?;
            let models: Vec<(String, Classifier)> = job
                .models
                .iter()
                .map(|m| Ok((m.name.clone(), io::load_checkpoint(&m.path)?)))
                .collect::<Result<Vec<_>>>()?;
            let delta = io::load_tensor(&job.perturbation)?;
            let named: Vec<(String, &Classifier)> =
                models.iter().map(|(n, m)| (n.clone(), m)).collect();
            let sweep = crate::eval::scale_sweep(
                &named,
                &test,
                &delta,
                job.target,
                &job.scales,
                job.exclude_target_class,
                job.clamp_input,
            )?;
            emit("scale_sweep.csv", io::csv_scale_sweep(&sweep).as_bytes(), &mut outputs)?;
        }

        ExperimentConfig::BuildDataset(job) => {
            let (train, _) = job.dataset.load()?;
            let model = io::load_checkpoint(&job.model)?;
            digests.insert("model".into(), model.digest());
            digests.insert("train_dataset".into(), train.digest());
            let constructed = match job.kind {
                ConstructedKind::Adv => {
                    let count = job.count.unwrap_or(train.len());
                    forge::build_d_adv(&model, &train, &job.attack, job.seed, count)?
                }
                ConstructedKind::Univ | ConstructedKind::DetUniv => {
                    let pool_cfg = job.pool.as_ref().ok_or_else(|| {
                        Error::InvalidConfig("universal dataset builds need a pool block".into())
                    })?;
                    let pool = forge::build_uap_pool(
                        &model,
                        &train,
                        &job.attack,
                        pool_cfg.k,
                        pool_cfg.per_class,
                        job.seed,
                    )?;
                    if job.kind == ConstructedKind::Univ {
                        forge::build_d_univ(&model, &train, &pool, &job.attack, job.seed)?
                    } else {
                        forge::build_d_det_univ(&model, &train, &pool, &job.attack, job.seed)?
                    }
                }
            };
            let dir = out_dir.join("constructed");
            io::save_constructed_dataset(&dir, &constructed)?;
            outputs.push(dir.join("images.uapt"));
            outputs.push(dir.join("manifest.json"));
            let report = forge::check_dataset_invariants(&model, &constructed, &train)?;
            let mut csv = String::from(
                "rows,max_budget_norm,budget_ok,filter_correct_fraction,marginal_max_diff,chi_square_p\n",
            );
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                constructed.len(),
                io::fmt_sig(report.max_budget_norm as f64),
                report.budget_ok,
                io::fmt_sig(report.filter_correct_fraction as f64),
                report.marginal_max_diff,
                io::fmt_sig(report.chi_square_p)
            ));
            emit("invariants.csv", csv.as_bytes(), &mut outputs)?;
        }

        ExperimentConfig::InterpK(job) => {
            let (train, test) = job.dataset.load()?;
            let model = io::load_checkpoint(&job.model)?;
            digests.insert("model".into(), model.digest());
            let family = forge::interp_k_family(
                &model,
                &train,
                &test,
                &job.ks,
                &job.attack,
                &job.probe,
                job.seed,
            )?;
            let rows: Vec<(String, usize, f32)> = family
                .iter()
                .map(|e| (format!("k={}", e.k), e.dataset.len(), e.probe_accuracy))
                .collect();
            emit("interp_k.csv", io::csv_generalization(&rows).as_bytes(), &mut outputs)?;
        }

        ExperimentConfig::Leakage(job) => {
            let (_, test) = job.dataset.load()?;
            let constructed = io::load_constructed_dataset(&job.constructed)?;
            let mut rows: Vec<(String, usize, f32)> = Vec::new();
            for f in &job.features {
                let source = io::load_checkpoint(&f.path)?;
                let acc = forge::leakage_probe(&source, &constructed, &test, &job.probe)?;
                rows.push((f.name.clone(), constructed.len(), acc));
            }
            emit("leakage.csv", io::csv_generalization(&rows).as_bytes(), &mut outputs)?;
        }
    }

    let manifest = RunManifest {
        pipeline: config.pipeline_name().to_string(),
        deterministic,
        config: config_echo,
        input_digests: digests,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    io::write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;
    outputs.push(manifest_path);

    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        outputs,
    })
}

/// Parse and run a raw JSON config document.
pub fn run_experiment_json(
    text: &str,
    out_dir: &Path,
    deterministic: bool,
    seed_override: Option<u64>,
) -> Result<RunSummary> {
    let config = ExperimentConfig::from_json_with_override(text, seed_override)?;
    let echo: Value = serde_json::from_str(text)?;
    run_experiment(&config, echo, out_dir, deterministic)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_pipeline_is_rejected() {
        let cfg = r#"{"pipeline": "frobnicate"}"#;
        match ExperimentConfig::from_json(cfg) {
            Err(Error::UnknownPipeline(name)) => assert_eq!(name, "frobnicate"),
            other => panic!("expected unknown pipeline, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let cfg = r#"{
            "pipeline": "train",
            "dataset": {"synthetic": {"seed": 1, "train_per_class": 2, "test_per_class": 1}},
            "train": {"epochs": 0, "learning_rate": 0.1, "batch_size": 8, "seed": 1},
            "epsilonn": 1.0
        }"#;
        assert!(ExperimentConfig::from_json(cfg).is_err());
    }

    #[test]
    fn nested_unknown_key_is_rejected() {
        let cfg = r#"{
            "pipeline": "train",
            "dataset": {"synthetic": {"seed": 1, "train_per_class": 2, "test_per_class": 1, "bogus": 3}},
            "train": {"epochs": 0, "learning_rate": 0.1, "batch_size": 8, "seed": 1}
        }"#;
        assert!(ExperimentConfig::from_json(cfg).is_err());
    }

    #[test]
    fn seed_override_rewrites_all_seeds() {
        let cfg = r#"{
            "pipeline": "train",
            "dataset": {"synthetic": {"seed": 1, "train_per_class": 2, "test_per_class": 1}},
            "train": {"epochs": 0, "learning_rate": 0.1, "batch_size": 8, "seed": 1}
        }"#;
        let parsed = ExperimentConfig::from_json_with_override(cfg, Some(99)).unwrap();
        match parsed {
            ExperimentConfig::Train(job) => {
                assert_eq!(job.train.seed, 99);
                match job.dataset {
                    DatasetSource::Synthetic(s) => assert_eq!(s.seed, 99),
                    _ => panic!("expected synthetic"),
                }
            }
            _ => panic!("expected train"),
        }
    }

    #[test]
    fn missing_input_artifact_fails_before_work() {
        let cfg = r#"{
            "pipeline": "attack",
            "dataset": {"synthetic": {"seed": 1, "train_per_class": 2, "test_per_class": 1}},
            "model": "/nonexistent/model.uapc",
            "attack": {"norm_p": "l2", "epsilon": 1.0, "target": 0, "step_size": 0.33,
                       "steps": 2, "epochs": 1, "batch_size": 8, "seed": 1, "clamp_input": true},
            "count": 4
        }"#;
        let parsed = ExperimentConfig::from_json(cfg).unwrap();
        let echo: Value = serde_json::from_str(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        match run_experiment(&parsed, echo, dir.path(), true) {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("missing input artifact")),
            other => panic!("expected missing-artifact error, got {other:?}"),
        }
    }
}
