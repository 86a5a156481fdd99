// Scratch calibration harness; not part of the deliverable.
use std::path::{Path, PathBuf};
use std::time::Instant;

use uaplab_core::attack::{self, BaseSetMode, NormP, PerturbationKind, PerturbationSpec};
use uaplab_core::data::{generate_synthetic, LabeledDataset, SyntheticSpec};
use uaplab_core::eval;
use uaplab_core::forge;
use uaplab_core::geometry;
use uaplab_core::io;
use uaplab_core::model::{self, AdvTrainConfig, Classifier, TrainConfig};

fn cache_dir() -> PathBuf {
    PathBuf::from("/tmp/cal")
}

fn desk_spec() -> SyntheticSpec {
    let mut s = SyntheticSpec::desk(424242, 1000, 200);
    s.emit_fine_labels = true;
    s
}

fn natural_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay: 5e-4,
        batch_size: 64,
        lr_drop_epochs: vec![epochs.saturating_sub(3)],
        lr_drop_factor: 0.1,
        augment: true,
        crop_padding: 4,
        horizontal_flip: true,
        seed,
        adversarial: None,
    }
}

fn attack_spec(target: usize, eps: f32) -> PerturbationSpec {
    PerturbationSpec {
        norm_p: NormP::L2,
        epsilon: eps,
        target,
        step_size: eps / 3.0,
        steps: 10,
        epochs: 8,
        batch_size: 64,
        seed: 7,
        clamp_input: true,
    }
}

fn get_or_train(
    name: &str,
    train: &LabeledDataset,
    cfg: &TrainConfig,
    adversarial: bool,
) -> Classifier {
    let path = cache_dir().join(format!("{name}.uapc"));
    if path.exists() {
        return io::load_checkpoint(&path).unwrap();
    }
    let t0 = Instant::now();
    let m = if adversarial {
        model::adv_train_classifier(train, cfg).unwrap()
    } else {
        model::train_classifier(train, cfg).unwrap()
    };
    println!("trained {name} in {:.1}s", t0.elapsed().as_secs_f32());
    io::save_checkpoint(&path, &m).unwrap();
    m
}

fn main() {
    std::fs::create_dir_all(cache_dir()).unwrap();
    let step = std::env::args().nth(1).unwrap_or_else(|| "data".into());

    let t0 = Instant::now();
    let (train, test) = generate_synthetic(&desk_spec()).unwrap();
    println!(
        "data: {} train / {} test in {:.1}s",
        train.len(),
        test.len(),
        t0.elapsed().as_secs_f32()
    );

    match step.as_str() {
        "data" => {}
        "trace" => {
            let lr: f32 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(0.05);
            let epochs: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(10);
            let mut cfg = natural_cfg(1, epochs);
            cfg.learning_rate = lr;
            let (model, trace) = model::train_classifier_traced(&train, &cfg).unwrap();
            for (i, chunk) in trace.chunks(157).enumerate() {
                let mean: f32 = chunk.iter().sum::<f32>() / chunk.len() as f32;
                println!("epoch {i}: mean loss {mean:.4}");
            }
            let (_, te) = model::predict_and_score(&model, &test).unwrap();
            println!("lr {lr} epochs {epochs}: test {te:.3}");
        }
        "bench" => {
            // One epoch on 2000 images to time the training loop.
            let sub = train.subset(&(0..2000).collect::<Vec<_>>()).unwrap();
            let mut cfg = natural_cfg(1, 1);
            cfg.lr_drop_epochs = vec![];
            let t = Instant::now();
            let _ = model::train_classifier(&sub, &cfg).unwrap();
            println!("1 epoch / 2000 imgs: {:.2}s", t.elapsed().as_secs_f32());
        }
        "nat" => {
            let m = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let (_, tr) = model::predict_and_score(&m, &train).unwrap();
            let (_, te) = model::predict_and_score(&m, &test).unwrap();
            println!("natural: train {tr:.3} test {te:.3}");
        }
        "attack" => {
            let m = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            for target in [0, 3, 7] {
                let spec = attack_spec(target, 1.0);
                let rows: Vec<usize> = (0..test.len())
                    .filter(|&i| test.labels[i] != target)
                    .take(256)
                    .collect();
                let images = attack::gather(&test.images, &rows);
                let targets = vec![target; rows.len()];
                let t = Instant::now();
                let deltas =
                    forge::batched_standard_attacks(&m, &images, &targets, &spec).unwrap();
                let mut pert = images.clone();
                pert.add_scaled(&deltas, 1.0);
                pert.clamp(0.0, 1.0);
                let preds = m.predict(&pert).unwrap();
                let asr = preds.iter().filter(|&&p| p == target).count() as f32
                    / rows.len() as f32;
                println!(
                    "targeted t={target}: ASR {asr:.3} over {} imgs ({:.1}s)",
                    rows.len(),
                    t.elapsed().as_secs_f32()
                );
            }
        }
        "uap" => {
            let m = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            for target in [0, 3, 7] {
                for (step_size, epochs) in [(0.33f32, 8usize), (2.0, 8)] {
                    let mut spec = attack_spec(target, 1.0);
                    spec.step_size = step_size;
                    spec.epochs = epochs;
                    let base =
                        forge::restricted_base_sets(&train, BaseSetMode::Random, None, 256, 99)
                            .unwrap();
                    let t = Instant::now();
                    let uap = attack::pgd_universal(&m, &base, &spec).unwrap();
                    let r = eval::attack_success_rate(&m, &test, &uap.delta, target, true, true)
                        .unwrap();
                    println!(
                        "uap t={target} step={step_size} epochs={epochs}: heldout ASR {:.3} ({:.1}s) norm {:.3}",
                        r.asr,
                        t.elapsed().as_secs_f32(),
                        uap.delta.l2_norm()
                    );
                    let path = cache_dir().join(format!("uap_t{target}_s{step_size}.uapt"));
                    io::save_tensor(&path, &uap.delta).unwrap();
                }
            }
        }
        "rob" => {
            let mut cfg = natural_cfg(2, 6);
            cfg.adversarial = Some(AdvTrainConfig::standard(NormP::L2, 1.0));
            let m = get_or_train("rob", &train, &cfg, true);
            let (_, te) = model::predict_and_score(&m, &test).unwrap();
            println!("robust model: test {te:.3}");
            // robust accuracy under untargeted PGD eval on 256 images
            let rows: Vec<usize> = (0..256).collect();
            let images = attack::gather(&test.images, &rows);
            let labels: Vec<usize> = rows.iter().map(|&i| test.labels[i]).collect();
            for (name, mm) in [("nat", get_or_train("nat", &train, &natural_cfg(1, 8), false)), ("rob", m)] {
                let adv = AdvTrainConfig { norm_p: NormP::L2, epsilon: 1.0, steps: 10, step_size: 2.0/30.0*10.0 };
                let pert = untargeted_eval(&mm, &images, &labels, &adv);
                let preds = mm.predict(&pert).unwrap();
                let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f32 / labels.len() as f32;
                println!("{name}: robust acc under 10-step untargeted pgd: {acc:.3}");
            }
        }
        "scale" => {
            let nat = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let mut cfg = natural_cfg(2, 6);
            cfg.adversarial = Some(AdvTrainConfig::standard(NormP::L2, 1.0));
            let rob = get_or_train("rob", &train, &cfg, true);
            let target = 3;
            let uap_path = cache_dir().join("uap_t3_s0.33.uapt");
            let delta = io::load_tensor(&uap_path).unwrap();
            let sweep = eval::scale_sweep(
                &[("nat".into(), &nat), ("rob".into(), &rob)],
                &test,
                &delta,
                target,
                &[0.0, 0.5, 1.0, 2.0, 3.0],
                false,
                true,
            )
            .unwrap();
            for (name, reports) in &sweep.per_model {
                let vals: Vec<String> = reports.iter().map(|r| format!("{:.3}", r.asr)).collect();
                println!("{name}: {}", vals.join(" "));
            }
        }
        "spatial" => {
            let nat = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let target = 3;
            // standard mode over 128 images
            let rows: Vec<usize> = (0..test.len()).take(128).collect();
            let images = attack::gather(&test.images, &rows);
            let labels: Vec<usize> = rows.iter().map(|&i| test.labels[i]).collect();
            let spec = attack_spec(target, 1.0);
            let targets = vec![target; rows.len()];
            let deltas = forge::batched_standard_attacks(&nat, &images, &targets, &spec).unwrap();
            let per_image: Vec<_> = (0..rows.len()).map(|i| deltas.batch_item(i)).collect();
            let t = Instant::now();
            let grid = geometry::spatial_asr_grid(
                &nat, &images, &labels, &per_image,
                PerturbationKind::Standard, target, 4, false, true,
            )
            .unwrap();
            println!("standard grid in {:.0}s:", t.elapsed().as_secs_f32());
            print_grid(&grid);
            // universal mode with cached UAPs
            let mut uaps = Vec::new();
            for t in [0usize, 3, 7] {
                let p = cache_dir().join(format!("uap_t{t}_s0.33.uapt"));
                if t == target && p.exists() {
                    uaps.push(io::load_tensor(&p).unwrap());
                }
            }
            if !uaps.is_empty() {
                let grid = geometry::spatial_asr_grid(
                    &nat, &images, &labels, &uaps,
                    PerturbationKind::Universal, target, 4, false, true,
                )
                .unwrap();
                println!("universal grid:");
                print_grid(&grid);
            }
        }
        "dsets" => {
            let nat = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let spec = attack_spec(0, 1.0);
            // D_univ first to learn companion size.
            let t = Instant::now();
            let pool = forge::build_uap_pool(&nat, &train, &spec, 64, 4, 11).unwrap();
            println!("pool in {:.0}s", t.elapsed().as_secs_f32());
            let t = Instant::now();
            let d_univ = forge::build_d_univ(&nat, &train, &pool, &spec, 12).unwrap();
            println!(
                "d_univ: {} rows (min cell {}) in {:.0}s",
                d_univ.len(),
                d_univ.manifest.min_cell_count,
                t.elapsed().as_secs_f32()
            );
            io::save_constructed_dataset(&cache_dir().join("d_univ"), &d_univ).unwrap();
            let t = Instant::now();
            let d_adv =
                forge::build_d_adv(&nat, &train, &spec, 13, d_univ.manifest.companion_d_adv_size)
                    .unwrap();
            println!("d_adv: {} rows in {:.0}s", d_adv.len(), t.elapsed().as_secs_f32());
            io::save_constructed_dataset(&cache_dir().join("d_adv"), &d_adv).unwrap();
        }
        "probes" => {
            let probe_cfg = natural_cfg(5, std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(8));
            for name in ["d_adv", "d_univ"] {
                let d = io::load_constructed_dataset(&cache_dir().join(name)).unwrap();
                let t = Instant::now();
                let probe = model::train_classifier(&d.to_labeled().unwrap(), &probe_cfg).unwrap();
                let (_, acc) = model::predict_and_score(&probe, &test).unwrap();
                println!(
                    "{name}: rows {} probe acc {acc:.3} in {:.0}s",
                    d.len(),
                    t.elapsed().as_secs_f32()
                );
            }
        }
        "kfam" => {
            let nat = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let mut spec = attack_spec(0, 1.0);
            spec.step_size = 0.33;
            spec.epochs = 8;
            let probe_cfg = natural_cfg(5, 8);
            let sub = train.subset(&(0..6000).collect::<Vec<_>>()).unwrap();
            let t = Instant::now();
            let fam = forge::interp_k_family(&nat, &sub, &test, &[1, 8, 32], &spec, &probe_cfg, 21)
                .unwrap();
            for e in &fam {
                println!("k={}: rows {} acc {:.3}", e.k, e.dataset.len(), e.probe_accuracy);
            }
            println!("k family in {:.0}s", t.elapsed().as_secs_f32());
        }
        "budget" => {
            let nat = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let probe_cfg = natural_cfg(5, 8);
            let sub = train.subset(&(0..6000).collect::<Vec<_>>()).unwrap();
            let mut half = attack_spec(0, 0.5);
            half.step_size = 0.5 / 3.0;
            let d_half = forge::build_k_dataset(&nat, &sub, 1, &half, 31).unwrap();
            let p1 = model::train_classifier(&d_half.to_labeled().unwrap(), &probe_cfg).unwrap();
            let (_, a1) = model::predict_and_score(&p1, &test).unwrap();
            let mut full = attack_spec(0, 1.0);
            full.step_size = 0.33;
            full.epochs = 8;
            let d_two = forge::build_k_dataset(&nat, &sub, 2, &full, 32).unwrap();
            let p2 = model::train_classifier(&d_two.to_labeled().unwrap(), &probe_cfg).unwrap();
            let (_, a2) = model::predict_and_score(&p2, &test).unwrap();
            println!("(eps/2, K=1): {a1:.3} vs (eps, K=2): {a2:.3}");
        }
        "transfer" => {
            let nat = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let nat2 = get_or_train("nat2", &train, &natural_cfg(42, 8), false);
            let target = 3;
            let spec = attack_spec(target, 1.0);
            let rows: Vec<usize> = (0..test.len())
                .filter(|&i| test.labels[i] != target)
                .take(256)
                .collect();
            let images = attack::gather(&test.images, &rows);
            let labels: Vec<usize> = rows.iter().map(|&i| test.labels[i]).collect();
            let targets = vec![target; rows.len()];
            let deltas = forge::batched_standard_attacks(&nat, &images, &targets, &spec).unwrap();
            let mut std_images = images.clone();
            std_images.add_scaled(&deltas, 1.0);
            std_images.clamp(0.0, 1.0);
            let std_set = eval::PerturbedSet {
                images: std_images,
                targets: targets.clone(),
                labels: labels.clone(),
            };
            let r = eval::transfer_rate(&nat, &[&nat2], &std_set).unwrap();
            println!("standard transfer: kept {} rate {:.3}", r.kept, r.per_model[0].overall_rate);

            let uap = io::load_tensor(&cache_dir().join("uap_t3_s0.33.uapt")).unwrap();
            let mut uap_images = images.clone();
            let per = uap.numel();
            for ni in 0..rows.len() {
                let row = &mut uap_images.data_mut()[ni * per..(ni + 1) * per];
                for (v, d) in row.iter_mut().zip(uap.data()) {
                    *v += d;
                }
            }
            uap_images.clamp(0.0, 1.0);
            let uap_set = eval::PerturbedSet {
                images: uap_images,
                targets,
                labels,
            };
            let r = eval::transfer_rate(&nat, &[&nat2], &uap_set).unwrap();
            println!("uap transfer: kept {} rate {:.3}", r.kept, r.per_model[0].overall_rate);
        }
        "leak" => {
            let nat = get_or_train("nat", &train, &natural_cfg(1, 8), false);
            let nat2 = get_or_train("nat2", &train, &natural_cfg(42, 8), false);
            let mut cfg = natural_cfg(2, 6);
            cfg.adversarial = Some(AdvTrainConfig::standard(NormP::L2, 1.0));
            let rob = get_or_train("rob", &train, &cfg, true);
            let d_univ = io::load_constructed_dataset(&cache_dir().join("d_univ")).unwrap();
            let probe = forge::LinearProbeConfig {
                epochs: 10,
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                batch_size: 64,
                seed: 3,
            };
            for (name, m) in [("natural", &nat), ("natural2", &nat2), ("robust", &rob)] {
                let t = Instant::now();
                let acc = forge::leakage_probe(m, &d_univ, &test, &probe).unwrap();
                println!("{name} features: {acc:.3} ({:.0}s)", t.elapsed().as_secs_f32());
            }
            // cyclic from-scratch
            let spec = attack_spec(0, 1.0);
            let pool = forge::build_uap_pool(&nat, &train, &spec, 64, 4, 17).unwrap();
            let det = forge::build_d_det_univ(&nat, &train, &pool, &spec, 18).unwrap();
            println!("det rows {}", det.len());
            let probe_cfg = natural_cfg(5, 8);
            let p = model::train_classifier(&det.to_labeled().unwrap(), &probe_cfg).unwrap();
            let (_, acc) = model::predict_and_score(&p, &test).unwrap();
            println!("cyclic from-scratch: {acc:.3}");
        }
        other => println!("unknown step {other}"),
    }
}

fn print_grid(grid: &geometry::TranslationGrid) {
    for iy in 0..grid.offsets_y.len() {
        let row: Vec<String> = (0..grid.offsets_x.len())
            .map(|ix| format!("{:.2}", grid.values[iy * grid.offsets_x.len() + ix]))
            .collect();
        println!("  dy={:>2}: {}", grid.offsets_y[iy], row.join(" "));
    }
}

fn untargeted_eval(
    m: &Classifier,
    images: &uaplab_core::Tensor,
    labels: &[usize],
    adv: &AdvTrainConfig,
) -> uaplab_core::Tensor {
    // 10-step untargeted PGD for robust-accuracy evaluation.
    use uaplab_core::net;
    let n = images.shape()[0];
    let per = images.numel() / n;
    let mut deltas = uaplab_core::Tensor::zeros(images.shape());
    for _ in 0..adv.steps {
        let mut pert = images.clone();
        pert.add_scaled(&deltas, 1.0);
        let mask: Vec<f32> = pert
            .data()
            .iter()
            .map(|v| if (0.0..=1.0).contains(v) { 1.0 } else { 0.0 })
            .collect();
        pert.clamp(0.0, 1.0);
        let (_, mut grad) = net::backward_input(&m.layers, &m.params, &pert, labels).unwrap();
        for (g, mv) in grad.data_mut().iter_mut().zip(&mask) {
            *g *= mv;
        }
        for ni in 0..n {
            let g = grad.batch_item(ni);
            let mut d = deltas.batch_item(ni);
            let gn = g.l2_norm();
            if gn == 0.0 {
                continue;
            }
            d.add_scaled(&g, adv.step_size / gn);
            let p = attack::project(&d, adv.norm_p, adv.epsilon);
            deltas.data_mut()[ni * per..(ni + 1) * per].copy_from_slice(p.data());
        }
    }
    let mut out = images.clone();
    out.add_scaled(&deltas, 1.0);
    out.clamp(0.0, 1.0);
    out
}
