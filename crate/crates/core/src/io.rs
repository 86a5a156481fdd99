//! Bit-exact persistence: tensor files, model checkpoints, CIFAR-10 binary
//! ingestion, PPM rendering, and CSV reports.
//!
//! Tensor file ("UAPT"): magic, version u8 = 1, dtype u8 = 1 (f32 LE),
//! ndim u8, dims as ndim x u32 LE, payload row-major f32 LE.
//!
//! Checkpoint ("UAPC"): magic, version u8 = 1, entry count u32 LE, entries
//! of (name length u32 LE, UTF-8 name, embedded tensor file), then a
//! length-prefixed (u32 LE) UTF-8 JSON trailer with the layer stack and
//! provenance.
//!
//! All writes go through a write-temp-then-rename path.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::forge::{ConstructedDataset, ConstructionManifest, SampleProvenance};
use crate::model::{Classifier, Provenance};
use crate::net::{LayerSpec, ParamPair};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"UAPT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"UAPC";
const FORMAT_VERSION: u8 = 1;
const DTYPE_F32_LE: u8 = 1;
const MAX_NDIM: u8 = 8;

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

// ---------------------------------------------------------------------------
// Tensor files
// ---------------------------------------------------------------------------

pub fn tensor_to_bytes(tensor: &Tensor) -> Result<Vec<u8>> {
    let ndim = tensor.shape().len();
    if ndim > MAX_NDIM as usize {
        return Err(Error::Format {
            offset: 6,
            message: format!("ndim {ndim} exceeds limit {MAX_NDIM}"),
        });
    }
    let mut out = Vec::with_capacity(7 + 4 * ndim + 4 * tensor.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(DTYPE_F32_LE);
    out.push(ndim as u8);
    for &d in tensor.shape() {
        if d > u32::MAX as usize {
            return Err(Error::Format {
                offset: out.len() as u64,
                message: format!("dimension {d} overflows u32"),
            });
        }
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let need = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated: wanted {len} bytes at offset {offset}"),
        })
    };
    if need(0, 4)? != TENSOR_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected UAPT".into(),
        });
    }
    if need(4, 1)?[0] != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}", bytes[4]),
        });
    }
    if need(5, 1)?[0] != DTYPE_F32_LE {
        return Err(Error::Format {
            offset: 5,
            message: format!("unsupported dtype {}", bytes[5]),
        });
    }
    let ndim = need(6, 1)?[0];
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Format {
            offset: 6,
            message: format!("ndim {ndim} outside 1..={MAX_NDIM}"),
        });
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    let mut offset = 7usize;
    let mut numel: u64 = 1;
    for _ in 0..ndim {
        let d = u32::from_le_bytes(need(offset, 4)?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: offset as u64,
                message: "zero dimension".into(),
            });
        }
        numel = numel.saturating_mul(d as u64);
        shape.push(d);
        offset += 4;
    }
    if numel > (usize::MAX / 4) as u64 {
        return Err(Error::Format {
            offset: offset as u64,
            message: "dimension product overflows".into(),
        });
    }
    let payload = need(offset, numel as usize * 4)?;
    if bytes.len() != offset + numel as usize * 4 {
        return Err(Error::Format {
            offset: (offset + numel as usize * 4) as u64,
            message: "trailing bytes after payload".into(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_atomic(path, &tensor_to_bytes(tensor)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointTrailer {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    num_classes: usize,
    provenance: Provenance,
}

pub fn checkpoint_to_bytes(model: &Classifier) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
    for (i, slot) in model.params.iter().enumerate() {
        if let Some(pair) = slot {
            entries.push((format!("layer{i}.weight"), tensor_to_bytes(&pair.weight)?));
            entries.push((format!("layer{i}.bias"), tensor_to_bytes(&pair.bias)?));
        }
    }
    let trailer = CheckpointTrailer {
        layers: model.layers.clone(),
        input_shape: model.input_shape,
        num_classes: model.num_classes,
        provenance: model.provenance.clone(),
    };
    let trailer_json = serde_json::to_vec(&trailer)?;

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, bytes) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(bytes);
    }
    out.extend_from_slice(&(trailer_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&trailer_json);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Classifier> {
    let need = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated checkpoint: wanted {len} bytes at {offset}"),
        })
    };
    if need(0, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected UAPC".into(),
        });
    }
    if need(4, 1)?[0] != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}", bytes[4]),
        });
    }
    let count = u32::from_le_bytes(need(5, 4)?.try_into().unwrap()) as usize;
    let mut offset = 9usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(need(offset, 4)?.try_into().unwrap()) as usize;
        offset += 4;
        let name = std::str::from_utf8(need(offset, name_len)?)
            .map_err(|_| Error::Format {
                offset: offset as u64,
                message: "entry name is not UTF-8".into(),
            })?
            .to_string();
        offset += name_len;
        // Parse the embedded tensor to find its length.
        let rest = &bytes[offset..];
        let t_len = embedded_tensor_len(rest).map_err(|e| match e {
            Error::Format { offset: o, message } => Error::Format {
                offset: offset as u64 + o,
                message,
            },
            other => other,
        })?;
        let tensor = tensor_from_bytes(&rest[..t_len])?;
        if entries.iter().any(|(n, _)| n == &name) {
            return Err(Error::Format {
                offset: offset as u64,
                message: format!("duplicate entry name {name}"),
            });
        }
        entries.push((name, tensor));
        offset += t_len;
    }
    let trailer_len = u32::from_le_bytes(need(offset, 4)?.try_into().unwrap()) as usize;
    offset += 4;
    let trailer: CheckpointTrailer = serde_json::from_slice(need(offset, trailer_len)?)?;
    offset += trailer_len;
    if offset != bytes.len() {
        return Err(Error::Format {
            offset: offset as u64,
            message: "trailing bytes after trailer".into(),
        });
    }

    // Rebuild parameter slots from entries and validate against the trailer.
    let mut params: Vec<Option<ParamPair>> = Vec::with_capacity(trailer.layers.len());
    for (i, layer) in trailer.layers.iter().enumerate() {
        if crate::net::param_shapes(layer).is_some() {
            let w = entries
                .iter()
                .find(|(n, _)| n == &format!("layer{i}.weight"))
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("missing entry layer{i}.weight"),
                })?;
            let b = entries
                .iter()
                .find(|(n, _)| n == &format!("layer{i}.bias"))
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("missing entry layer{i}.bias"),
                })?;
            params.push(Some(ParamPair {
                weight: w.1.clone(),
                bias: b.1.clone(),
            }));
        } else {
            params.push(None);
        }
    }
    let model = Classifier {
        layers: trailer.layers,
        params,
        input_shape: trailer.input_shape,
        num_classes: trailer.num_classes,
        provenance: trailer.provenance,
    };
    model.validate().map_err(|e| Error::Format {
        offset: 0,
        message: format!("trailer/tensor mismatch: {e}"),
    })?;
    Ok(model)
}

/// Byte length of a tensor file prefix at the start of `bytes`.
fn embedded_tensor_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 7 {
        return Err(Error::Format {
            offset: 0,
            message: "truncated embedded tensor".into(),
        });
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format {
            offset: 6,
            message: "truncated embedded tensor dims".into(),
        });
    }
    let mut numel = 1usize;
    for d in 0..ndim {
        let dim = u32::from_le_bytes(bytes[7 + 4 * d..11 + 4 * d].try_into().unwrap()) as usize;
        numel = numel.saturating_mul(dim);
    }
    Ok(header + 4 * numel)
}

pub fn save_checkpoint(path: &Path, model: &Classifier) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    checkpoint_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Load CIFAR-10 binary files (records of 1 label byte + 3072 pixel bytes:
/// R plane, G plane, B plane, 32x32 each). Pixels are scaled to [0,1].
pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let mut images: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!(
                    "{} length {} is not a multiple of {CIFAR_RECORD}",
                    path.display(),
                    bytes.len()
                ),
            });
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0];
            if label >= 10 {
                return Err(Error::Format {
                    offset: (rec * CIFAR_RECORD) as u64,
                    message: format!("record {rec} in {} has label {label}", path.display()),
                });
            }
            labels.push(label as usize);
            images.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptySet("no CIFAR-10 records".into()));
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, 3, 32, 32], images)?;
    LabeledDataset::new(images, labels, 10, None)
}

/// Write a dataset in the CIFAR-10 binary layout (pixels quantized to u8).
pub fn write_cifar10_binary(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    if dataset.image_shape() != [3, 32, 32] || dataset.class_count != 10 {
        return Err(Error::InvalidArgument(
            "CIFAR-10 layout wants [3,32,32] images and 10 classes".into(),
        ));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        out.push(dataset.labels[i] as u8);
        let img = dataset.image(i);
        out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    debug_assert_eq!(out.len() % CIFAR_RECORD, 0);
    let _ = CIFAR_PIXELS;
    write_atomic(path, &out)
}

// ---------------------------------------------------------------------------
// PPM rendering
// ---------------------------------------------------------------------------

/// Render a [3,H,W] perturbation as a binary PPM. Values are clamped to
/// +-3 sigma (sigma over all channels and pixels) and mapped affinely onto
/// [0,255]; a constant input maps everything to 128.
pub fn render_perturbation_ppm(delta: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &perturbation_ppm_bytes(delta)?)
}

pub fn perturbation_ppm_bytes(delta: &Tensor) -> Result<Vec<u8>> {
    let dims = delta.shape();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::BadShape(format!(
            "PPM rendering wants [3,H,W], got {dims:?}"
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let n = delta.numel() as f64;
    let mean: f64 = delta.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = delta
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let sigma = var.sqrt() as f32;

    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    if sigma == 0.0 {
        log::warn!("constant perturbation: sigma = 0, rendering mid-gray");
        out.extend(std::iter::repeat(128u8).take(3 * h * w));
        return Ok(out);
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = delta.data()[(c * h + y) * w + x].clamp(-3.0 * sigma, 3.0 * sigma);
                let byte = ((v + 3.0 * sigma) / (6.0 * sigma) * 255.0).round();
                out.push(byte as u8);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

/// Format with 6 significant digits, plain decimal notation.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

pub fn csv_asr_report(report: &crate::eval::AsrReport) -> String {
    let mut s = String::from("target,successes,evaluated,excluded,asr,exclude_target_class,eval_digest\n");
    s.push_str(&format!(
        "{},{},{},{},{},{},{}\n",
        report.target,
        report.successes,
        report.evaluated,
        report.excluded,
        fmt_sig(report.asr as f64),
        report.exclude_target_class,
        report.eval_digest
    ));
    s
}

pub fn csv_translation_grid(grid: &crate::geometry::TranslationGrid) -> String {
    let kind = match grid.kind {
        crate::attack::PerturbationKind::Standard => "standard",
        crate::attack::PerturbationKind::Universal => "universal",
        crate::attack::PerturbationKind::UniversalDiverse => "universal-diverse",
    };
    let mut s = String::from("dx,dy,asr,kind,n_perturbations\n");
    for (iy, &dy) in grid.offsets_y.iter().enumerate() {
        for (ix, &dx) in grid.offsets_x.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                dx,
                dy,
                fmt_sig(grid.values[iy * grid.offsets_x.len() + ix] as f64),
                kind,
                grid.n_perturbations
            ));
        }
    }
    s
}

pub fn csv_transfer_report(names: &[String], report: &crate::eval::TransferReport) -> String {
    let mut s = String::from("model,original_class,kept,transferred,rate\n");
    for (name, m) in names.iter().zip(&report.per_model) {
        s.push_str(&format!(
            "{},overall,{},{},{}\n",
            name,
            m.kept,
            m.transferred,
            fmt_sig(m.overall_rate as f64)
        ));
        for (class, bucket) in m.per_class.iter().enumerate() {
            if let Some(b) = bucket {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    name,
                    class,
                    b.kept,
                    b.transferred,
                    fmt_sig(b.rate as f64)
                ));
            }
        }
    }
    s
}

pub fn csv_scale_sweep(sweep: &crate::eval::ScaleSweep) -> String {
    let mut s = String::from("model,scale,target,successes,evaluated,excluded,asr\n");
    for (name, reports) in &sweep.per_model {
        for (scale, r) in sweep.scales.iter().zip(reports) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                name,
                fmt_sig(*scale as f64),
                r.target,
                r.successes,
                r.evaluated,
                r.excluded,
                fmt_sig(r.asr as f64)
            ));
        }
    }
    s
}

/// Generic (label, rows, accuracy) table for generalization results.
pub fn csv_generalization(rows: &[(String, usize, f32)]) -> String {
    let mut s = String::from("dataset,rows,accuracy\n");
    for (name, n, acc) in rows {
        s.push_str(&format!("{},{},{}\n", name, n, fmt_sig(*acc as f64)));
    }
    s
}

pub fn csv_locality(report: &crate::geometry::LocalityReport) -> String {
    let mut s = String::from("rank,origin_row,origin_col,height,width,asr,original_norm,normalized_norm,highlight\n");
    for (rank, p) in report.ranked.iter().enumerate() {
        let highlight = match p.highlight {
            crate::geometry::PatchHighlight::Top => "top",
            crate::geometry::PatchHighlight::Bottom => "bottom",
            crate::geometry::PatchHighlight::None => "",
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            rank,
            p.patch.origin.0,
            p.patch.origin.1,
            p.patch.size.0,
            p.patch.size.1,
            fmt_sig(p.asr as f64),
            fmt_sig(p.patch.norm_record.original as f64),
            fmt_sig(p.patch.norm_record.normalized as f64),
            highlight
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Constructed-dataset persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifestFile {
    class_count: usize,
    new_labels: Vec<usize>,
    original_labels: Vec<usize>,
    provenance: Vec<SampleProvenance>,
    manifest: ConstructionManifest,
}

/// Persist a constructed dataset as `images.uapt` + `manifest.json` in `dir`.
pub fn save_constructed_dataset(dir: &Path, dataset: &ConstructedDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_tensor(&dir.join("images.uapt"), &dataset.images)?;
    let manifest = DatasetManifestFile {
        class_count: dataset.class_count,
        new_labels: dataset.new_labels.clone(),
        original_labels: dataset.original_labels.clone(),
        provenance: dataset.provenance.clone(),
        manifest: dataset.manifest.clone(),
    };
    write_atomic(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )
}

pub fn load_constructed_dataset(dir: &Path) -> Result<ConstructedDataset> {
    let images = load_tensor(&dir.join("images.uapt"))?;
    let manifest: DatasetManifestFile =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let n = images.shape()[0];
    if manifest.new_labels.len() != n
        || manifest.original_labels.len() != n
        || manifest.provenance.len() != n
    {
        return Err(Error::Format {
            offset: 0,
            message: format!("manifest rows disagree with images tensor ({n})"),
        });
    }
    Ok(ConstructedDataset {
        images,
        new_labels: manifest.new_labels,
        original_labels: manifest.original_labels,
        provenance: manifest.provenance,
        manifest: manifest.manifest,
        class_count: manifest.class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::from_vec(
            &[2, 3, 4],
            (0..24).map(|_| rng.gen_range(-10.0..10.0)).collect(),
        )
        .unwrap();
        let bytes = tensor_to_bytes(&t).unwrap();
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tensor_file_size_formula() {
        // 2x3 tensor: 4 magic + 1 version + 1 dtype + 1 ndim + 8 dims + 24
        // payload = 39 bytes.
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(tensor_to_bytes(&t).unwrap().len(), 39);
    }

    #[test]
    fn bad_magic_and_truncation_are_named() {
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut bytes = tensor_to_bytes(&t).unwrap();
        bytes[0] = b'X';
        match tensor_from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let good = tensor_to_bytes(&t).unwrap();
        assert!(tensor_from_bytes(&good[..good.len() - 2]).is_err());
    }

    #[test]
    fn ppm_bytes_endpoints_and_header() {
        // Two pixels at +-3 sigma map to 255 and 0; header is fixed.
        let mut delta = Tensor::zeros(&[3, 1, 2]);
        delta.data_mut()[0] = 1.0; // R of pixel 0
        delta.data_mut()[1] = -1.0; // R of pixel 1
        let bytes = perturbation_ppm_bytes(&delta).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        let body = &bytes[b"P6\n2 1\n255\n".len()..];
        assert_eq!(body.len(), 6);
        // sigma of [1,-1,0,0,0,0]: mean 0, var 2/6, 3*sigma ~= 1.7321;
        // value 1.0 maps to round((1 + 1.7321)/3.4641 * 255) = 201.
        assert_eq!(body[0], 201);
        assert_eq!(body[3], 54); // -1.0 mirrors to 255 - 201
    }

    #[test]
    fn ppm_constant_zero_maps_to_128() {
        let delta = Tensor::zeros(&[3, 2, 2]);
        let bytes = perturbation_ppm_bytes(&delta).unwrap();
        let body = &bytes[b"P6\n2 2\n255\n".len()..];
        assert!(body.iter().all(|&b| b == 128));
    }

    #[test]
    fn ppm_header_for_32x32() {
        let delta = Tensor::zeros(&[3, 32, 32]);
        let bytes = perturbation_ppm_bytes(&delta).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), b"P6\n32 32\n255\n".len() + 3072);
    }

    #[test]
    fn fmt_sig_six_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333");
        assert_eq!(fmt_sig(123.45678), "123.457");
        assert_eq!(fmt_sig(0.25), "0.250000");
    }

    #[test]
    fn cifar_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) =
            crate::data::generate_synthetic(&crate::data::SyntheticSpec::desk(4, 2, 1)).unwrap();
        let path = dir.path().join("batch.bin");
        write_cifar10_binary(&train, &path).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert_eq!(meta.len(), train.len() as u64 * 3073);
        let loaded = load_cifar10_binary(&[path.clone()]).unwrap();
        assert_eq!(loaded.len(), train.len());
        assert_eq!(loaded.labels, train.labels);
        // Quantization error at most half a step.
        for (a, b) in loaded.images.data().iter().zip(train.images.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }

        // Byte scaling endpoints.
        assert_eq!(255.0f32 / 255.0, 1.0);
        assert_eq!(0.0f32 / 255.0, 0.0);

        // Bad label is rejected with the record index.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = 10;
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        match load_cifar10_binary(&[bad]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("record 0")),
            other => panic!("expected format error, got {other:?}"),
        }

        // Length not a multiple of 3073 is rejected.
        let torn = dir.path().join("torn.bin");
        std::fs::write(&torn, &bytes[..3072]).unwrap();
        assert!(load_cifar10_binary(&[torn]).is_err());
    }
}
