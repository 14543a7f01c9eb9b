//! Command implementations: dataset generation, the two training stages,
//! pseudo-label export, evaluation, and the gradient sweep.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::seq::SliceRandom;

use fcl_core::config::{hex_of, RunConfig};
use fcl_core::data::{
    self, load_manifest, load_manifest_images_only, GeneratorParams, Manifest, Sample, Split,
};
use fcl_core::metrics;
use fcl_core::msfa::{self, Detector};
use fcl_core::params::{cosine_lr, load_checkpoint, save_checkpoint, ParamSet, Sgd};
use fcl_core::rng;
use fcl_core::segmenter::{Segmenter, SegmenterDims};
use fcl_core::tensor::{Tape, Tensor};
use fcl_core::triadic::{
    self, augmentation_seed, Branch, Stage1Options, TriadicModels,
};

pub struct Stage1Outputs {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub config_hash: String,
}

pub struct Stage2Outputs {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub pred_dir: PathBuf,
    pub config_hash: String,
}

/// Per-split parsing for the `--split` flag.
pub fn parse_splits(s: &str) -> anyhow::Result<Vec<Split>> {
    match s {
        "all" => Ok(vec![Split::Train, Split::Val, Split::Test]),
        other => Ok(vec![Split::parse(other)?]),
    }
}

// ---- gen-data -----------------------------------------------------------------

pub fn gen_data(params: &GeneratorParams, out: &Path) -> anyhow::Result<PathBuf> {
    // Validate before touching the filesystem so failures leave no partial
    // output behind.
    params.validate()?;
    let manifest = data::generate_synthetic_dataset(params, out)?;
    Ok(manifest)
}

// ---- stage 1 ------------------------------------------------------------------

pub struct Stage1Params<'a> {
    pub cfg: &'a RunConfig,
    pub manifest_path: &'a Path,
    pub seed: u64,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub ablate_fora: bool,
    pub ablate_gcl: bool,
    pub dump_diagnostics: bool,
}

fn meta_scalar(params: &ParamSet, name: &str) -> anyhow::Result<f64> {
    Ok(params.get(name)?.scalar_value()?)
}

fn load_split_samples(manifest: &Manifest, split: Split) -> anyhow::Result<Vec<Sample>> {
    let records = manifest.records_in(split);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(manifest.load_sample(r)?);
    }
    Ok(out)
}

fn stage1_checkpoint(
    models: &TriadicModels,
    opt: &Sgd,
    step: usize,
    epochs_done: usize,
    ablate_fora: bool,
) -> ParamSet {
    let mut all = ParamSet::new();
    all.extend_prefixed("student.", &models.student);
    all.extend_prefixed("teacher.", &models.teacher);
    all.extend_prefixed("anchor.", &models.anchor);
    all.extend_prefixed("opt.vel.", &opt.state());
    all.insert("meta.step", Tensor::scalar(step as f64));
    all.insert("meta.epochs_done", Tensor::scalar(epochs_done as f64));
    all.insert("meta.ablate_fora", Tensor::scalar(if ablate_fora { 1.0 } else { 0.0 }));
    all.insert("meta.image", Tensor::scalar(models.arch.dims.image as f64));
    all.insert("meta.patch", Tensor::scalar(models.arch.dims.patch as f64));
    all.insert("meta.dim", Tensor::scalar(models.arch.dims.dim as f64));
    all.insert("meta.rank", Tensor::scalar(models.arch.dims.rank as f64));
    all
}

pub fn segmenter_from_checkpoint(all: &ParamSet) -> anyhow::Result<(Segmenter, bool)> {
    let dims = SegmenterDims {
        image: meta_scalar(all, "meta.image")? as usize,
        patch: meta_scalar(all, "meta.patch")? as usize,
        dim: meta_scalar(all, "meta.dim")? as usize,
        rank: meta_scalar(all, "meta.rank")? as usize,
    };
    let ablate_fora = meta_scalar(all, "meta.ablate_fora")? != 0.0;
    Ok((Segmenter::new(dims)?, ablate_fora))
}

pub fn train_stage1(p: &Stage1Params) -> anyhow::Result<Stage1Outputs> {
    p.cfg.validate()?;
    let cfg_hash = p.cfg.hash();
    let cfg_hex = p.cfg.hash_hex();
    let manifest = load_manifest(p.manifest_path)
        .with_context(|| format!("loading dataset manifest {}", p.manifest_path.display()))?;
    let train = load_split_samples(&manifest, Split::Train)?;
    if train.is_empty() {
        bail!("dataset has no training samples");
    }
    std::fs::create_dir_all(p.out)?;

    let dims = SegmenterDims {
        image: manifest.size,
        patch: p.cfg.model.patch_size,
        dim: p.cfg.model.embed_dim,
        rank: p.cfg.model.rank,
    };
    let arch = Segmenter::new(dims)?;
    let mut opt = Sgd::new(p.cfg.optimizer.momentum, p.cfg.optimizer.weight_decay);

    let (mut models, mut step, start_epoch) = match p.resume {
        Some(ck_path) => {
            let (all, hash) = load_checkpoint(ck_path)?;
            if hash != cfg_hash {
                bail!(
                    "checkpoint {} was produced under a different config (hash mismatch)",
                    ck_path.display()
                );
            }
            let (ck_arch, ck_ablate) = segmenter_from_checkpoint(&all)?;
            if ck_ablate != p.ablate_fora {
                bail!("checkpoint ablation flag disagrees with --ablate");
            }
            let models = TriadicModels {
                arch: ck_arch,
                anchor: all.strip_prefix("anchor."),
                student: all.strip_prefix("student."),
                teacher: all.strip_prefix("teacher."),
            };
            opt.restore_state(&all.strip_prefix("opt.vel."));
            let step = meta_scalar(&all, "meta.step")? as usize;
            let epochs_done = meta_scalar(&all, "meta.epochs_done")? as usize;
            (models, step, epochs_done)
        }
        None => (TriadicModels::init(arch, p.seed), 0usize, 0usize),
    };

    let opts = Stage1Options { ablate_fora: p.ablate_fora, ablate_gcl: p.ablate_gcl };
    let batch = p.cfg.optimizer.batch_size;
    let epochs = p.cfg.optimizer.epochs;
    let steps_per_epoch = train.len().div_ceil(batch);
    let total_steps = (epochs * steps_per_epoch).max(1);

    let log_path = p.out.join("train_stage1.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if step == 0 {
        writeln!(log, "# fclcod stage1 cfg:{cfg_hex} seed:{}", p.seed)?;
    }
    let diag_dir = p.out.join("diag");
    if p.dump_diagnostics {
        std::fs::create_dir_all(&diag_dir)?;
    }

    for epoch in start_epoch..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = rng::stream(p.seed, &format!("shuffle/epoch={epoch}"));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(batch) {
            let samples: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let lr = cosine_lr(p.cfg.optimizer.lr, step as f64 / total_steps as f64);
            if p.dump_diagnostics && epoch_steps == 0 {
                let sample = &samples[0];
                let aug_seed = augmentation_seed(p.seed, step, &sample.id);
                let sl = triadic::stage1_sample_loss(&models, sample, p.cfg, &opts, aug_seed)?;
                if let Some(d) = sl.diagnostics {
                    data::write_matrix_text(
                        &diag_dir.join(format!("epoch{epoch:03}_{}_gcam.txt", sample.id)),
                        &d.cam,
                        &format!("cfg:{cfg_hex}"),
                    )?;
                    data::write_matrix_text(
                        &diag_dir.join(format!("epoch{epoch:03}_{}_protosim.txt", sample.id)),
                        &d.proto_cosine,
                        &format!("cfg:{cfg_hex}"),
                    )?;
                }
            }
            let report =
                triadic::stage1_step(&mut models, &samples, p.cfg, &opts, p.seed, step, lr, &mut opt)?;
            writeln!(
                log,
                "step={step:06} epoch={epoch:03} lr={lr:.9e} dice={:.9e} anchor={:.9e} gcl={:.9e} focal={:.9e} total={:.9e} gcl_pairs={}",
                report.dice, report.anchor, report.gcl, report.focal, report.total, report.gcl_pairs
            )?;
            if report.gcl_pairs == 0 && !opts.ablate_gcl && p.cfg.loss.lambda2 > 0.0 {
                writeln!(log, "# warning step={step:06} gcl degenerated to zero (no instance pairs)")?;
            }
            epoch_total += report.total;
            epoch_steps += 1;
            step += 1;
        }
        println!(
            "stage1 epoch {epoch:03} mean_total={:.6}",
            epoch_total / epoch_steps.max(1) as f64
        );
        let epochs_done = epoch + 1;
        if epochs_done % p.cfg.train.checkpoint_every == 0 && epochs_done < epochs {
            let ck = stage1_checkpoint(&models, &opt, step, epochs_done, p.ablate_fora);
            save_checkpoint(&p.out.join(format!("ckpt_epoch{epochs_done:03}.fclckpt")), &ck, &cfg_hash)?;
        }
    }
    let final_path = p.out.join("ckpt_final.fclckpt");
    let ck = stage1_checkpoint(&models, &opt, step, epochs, p.ablate_fora);
    save_checkpoint(&final_path, &ck, &cfg_hash)?;
    log.flush()?;
    Ok(Stage1Outputs { final_checkpoint: final_path, log_path, config_hash: cfg_hex })
}

// ---- make-pseudo ----------------------------------------------------------------

pub struct MakePseudoParams<'a> {
    pub checkpoint: &'a Path,
    pub manifest_path: &'a Path,
    pub splits: Vec<Split>,
    pub branch: Branch,
    pub out: &'a Path,
    pub workers: usize,
}

pub fn make_pseudo(p: &MakePseudoParams) -> anyhow::Result<usize> {
    let (all, hash) = load_checkpoint(p.checkpoint)?;
    let (arch, ablate_fora) = segmenter_from_checkpoint(&all)?;
    let params = match p.branch {
        Branch::Anchor => all.strip_prefix("anchor."),
        Branch::Student => all.strip_prefix("student."),
        Branch::Teacher => all.strip_prefix("teacher."),
    };
    let manifest = load_manifest(p.manifest_path)?;
    std::fs::create_dir_all(p.out)?;
    let comment = format!("cfg:{}", hex_of(&hash));

    let records: Vec<_> = p
        .splits
        .iter()
        .flat_map(|s| manifest.records_in(*s))
        .collect();
    if records.is_empty() {
        bail!("no samples in the requested splits");
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(p.workers.max(1))
        .build()?;
    let results: Vec<anyhow::Result<()>> = pool.install(|| {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|record| {
                let sample = manifest.load_sample(record)?;
                let mask = triadic::predict_union_mask(&arch, &params, &sample, ablate_fora)?;
                data::write_pgm(&p.out.join(format!("{}.pgm", record.id)), &mask, &comment)?;
                Ok(())
            })
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(records.len())
}

// ---- stage 2 ---------------------------------------------------------------------

pub struct Stage2Params<'a> {
    pub cfg: &'a RunConfig,
    pub manifest_path: &'a Path,
    pub pseudo_dir: &'a Path,
    pub seed: u64,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub ablate_msfa: bool,
    pub workers: usize,
}

fn stage2_checkpoint(
    det: &Detector,
    params: &ParamSet,
    opt: &Sgd,
    step: usize,
    epochs_done: usize,
    ablate_msfa: bool,
) -> ParamSet {
    let mut all = ParamSet::new();
    all.extend_prefixed("detector.", params);
    all.extend_prefixed("opt.vel.", &opt.state());
    all.insert("meta.step", Tensor::scalar(step as f64));
    all.insert("meta.epochs_done", Tensor::scalar(epochs_done as f64));
    all.insert("meta.ablate_msfa", Tensor::scalar(if ablate_msfa { 1.0 } else { 0.0 }));
    all.insert("meta.image", Tensor::scalar(det.image as f64));
    all.insert("meta.channels", Tensor::scalar(det.channels as f64));
    all.insert("meta.reduction", Tensor::scalar(det.reduction as f64));
    all
}

pub fn detector_from_checkpoint(all: &ParamSet) -> anyhow::Result<(Detector, bool)> {
    let det = Detector::new(
        meta_scalar(all, "meta.image")? as usize,
        meta_scalar(all, "meta.channels")? as usize,
        meta_scalar(all, "meta.reduction")? as usize,
    )?;
    Ok((det, meta_scalar(all, "meta.ablate_msfa")? != 0.0))
}

pub fn train_stage2(p: &Stage2Params) -> anyhow::Result<Stage2Outputs> {
    p.cfg.validate()?;
    let cfg_hash = p.cfg.hash();
    let cfg_hex = p.cfg.hash_hex();
    // Stage 2 never reads ground-truth masks or prompt boxes; only images
    // and the supplied pseudo-labels.
    let manifest = load_manifest_images_only(p.manifest_path)?;
    std::fs::create_dir_all(p.out)?;

    let mut train_pairs: Vec<(String, Tensor, Tensor)> = Vec::new();
    for record in manifest.records_in(Split::Train) {
        let image = data::read_ppm(&manifest.root.join(&record.image))?;
        let pseudo_path = p.pseudo_dir.join(format!("{}.pgm", record.id));
        let pseudo = data::read_pgm(&pseudo_path)
            .with_context(|| format!("missing pseudo-label {}", pseudo_path.display()))?
            .binarize_gt(0.5);
        train_pairs.push((record.id.clone(), image, pseudo));
    }
    if train_pairs.is_empty() {
        bail!("no training samples with pseudo-labels");
    }

    let det = Detector::new(manifest.size, p.cfg.model.channels, p.cfg.model.reduction)?;
    let mut opt = Sgd::new(p.cfg.optimizer.momentum, p.cfg.optimizer.weight_decay);
    let (mut params, mut step, start_epoch) = match p.resume {
        Some(ck_path) => {
            let (all, hash) = load_checkpoint(ck_path)?;
            if hash != cfg_hash {
                bail!("checkpoint config hash mismatch");
            }
            let (_det, ck_ablate) = detector_from_checkpoint(&all)?;
            if ck_ablate != p.ablate_msfa {
                bail!("checkpoint ablation flag disagrees with --ablate");
            }
            opt.restore_state(&all.strip_prefix("opt.vel."));
            (
                all.strip_prefix("detector."),
                meta_scalar(&all, "meta.step")? as usize,
                meta_scalar(&all, "meta.epochs_done")? as usize,
            )
        }
        None => (det.init_params(p.seed), 0, 0),
    };

    let batch = p.cfg.optimizer.batch_size;
    let epochs = p.cfg.train.stage2_epochs;
    let steps_per_epoch = train_pairs.len().div_ceil(batch);
    let total_steps = (epochs * steps_per_epoch).max(1);

    let log_path = p.out.join("train_stage2.log");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    if step == 0 {
        writeln!(log, "# fclcod stage2 cfg:{cfg_hex} seed:{}", p.seed)?;
    }

    for epoch in start_epoch..epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut shuffle_rng = rng::stream(p.seed, &format!("stage2/shuffle/epoch={epoch}"));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(batch) {
            let pairs: Vec<(Tensor, Tensor)> = chunk
                .iter()
                .map(|&i| (train_pairs[i].1.clone(), train_pairs[i].2.clone()))
                .collect();
            // Per-iteration schedule granularity.
            let t_progress = (step as f64 / (total_steps.saturating_sub(1)).max(1) as f64).min(1.0);
            let lr = cosine_lr(p.cfg.optimizer.lr, step as f64 / total_steps as f64);
            let report =
                msfa::stage2_step(&det, &mut params, &pairs, t_progress, lr, &mut opt, p.ablate_msfa)?;
            writeln!(
                log,
                "step={step:06} epoch={epoch:03} lr={lr:.9e} alpha={:.12e} bce={:.9e} ual={:.9e} total={:.9e}",
                report.alpha, report.bce, report.ual, report.total
            )?;
            epoch_total += report.total;
            epoch_steps += 1;
            step += 1;
        }
        println!(
            "stage2 epoch {epoch:03} mean_total={:.6}",
            epoch_total / epoch_steps.max(1) as f64
        );
        let epochs_done = epoch + 1;
        if epochs_done % p.cfg.train.checkpoint_every == 0 && epochs_done < epochs {
            let ck = stage2_checkpoint(&det, &params, &opt, step, epochs_done, p.ablate_msfa);
            save_checkpoint(&p.out.join(format!("detector_epoch{epochs_done:03}.fclckpt")), &ck, &cfg_hash)?;
        }
    }

    let final_path = p.out.join("detector_final.fclckpt");
    let ck = stage2_checkpoint(&det, &params, &opt, step, epochs, p.ablate_msfa);
    save_checkpoint(&final_path, &ck, &cfg_hash)?;

    // Probability maps for the held-out split, written as 8-bit grayscale.
    let pred_dir = p.out.join("pred_test");
    predict_split(
        &det,
        &params,
        &manifest,
        Split::Test,
        &pred_dir,
        p.ablate_msfa,
        p.workers,
        &format!("cfg:{cfg_hex}"),
    )?;
    log.flush()?;
    Ok(Stage2Outputs { final_checkpoint: final_path, log_path, pred_dir, config_hash: cfg_hex })
}

#[allow(clippy::too_many_arguments)]
pub fn predict_split(
    det: &Detector,
    params: &ParamSet,
    manifest: &Manifest,
    split: Split,
    out: &Path,
    ablate_msfa: bool,
    workers: usize,
    comment: &str,
) -> anyhow::Result<usize> {
    std::fs::create_dir_all(out)?;
    let records = manifest.records_in(split);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()?;
    let results: Vec<anyhow::Result<()>> = pool.install(|| {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|record| {
                let image = data::read_ppm(&manifest.root.join(&record.image))?;
                let tape = Tape::new();
                let bound = params.bind(&tape, |_| false);
                let p = det.forward(&tape, &bound, &image, ablate_msfa)?;
                data::write_pgm(&out.join(format!("{}.pgm", record.id)), &p, comment)?;
                Ok(())
            })
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(records.len())
}

// ---- eval -----------------------------------------------------------------------

pub struct EvalParams<'a> {
    pub pred_dir: &'a Path,
    pub gt_dir: &'a Path,
    pub out: Option<&'a Path>,
    pub workers: usize,
}

pub fn eval_dirs(p: &EvalParams) -> anyhow::Result<(metrics::MetricSummary, String)> {
    let mut ids: Vec<String> = std::fs::read_dir(p.pred_dir)
        .with_context(|| format!("reading {}", p.pred_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_suffix(".pgm").map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("no .pgm predictions in {}", p.pred_dir.display());
    }
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !p.gt_dir.join(format!("{id}.pgm")).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        bail!(
            "ground truth missing for {} prediction(s): {}",
            missing.len(),
            missing.join(", ")
        );
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(p.workers.max(1))
        .build()?;
    let mut pairs: Vec<(String, Tensor, Tensor)> = pool.install(|| {
        use rayon::prelude::*;
        ids.par_iter()
            .map(|id| {
                let pred = data::read_pgm(&p.pred_dir.join(format!("{id}.pgm")))?;
                let gt = data::read_pgm(&p.gt_dir.join(format!("{id}.pgm")))?.binarize_gt(0.5);
                Ok((id.clone(), pred, gt))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let tensor_pairs: Vec<(Tensor, Tensor)> =
        pairs.into_iter().map(|(_, p, g)| (p, g)).collect();
    let summary = metrics::summarize(&tensor_pairs)?;

    let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
    sha2::Digest::update(&mut hasher, format!("eval pred={} gt={}", p.pred_dir.display(), p.gt_dir.display()));
    let args_hash = hex_of(&sha2::Digest::finalize(hasher));

    let report = format!(
        "FCLCOD-EVAL v1\ninvocation_hash={}\ncount={}\nmae={:.9}\nmiou={:.9}\nmf1={:.9}\n",
        args_hash, summary.count, summary.mae, summary.miou, summary.mf1
    );
    if let Some(out) = p.out {
        std::fs::write(out, &report)?;
    }
    Ok((summary, report))
}

// ---- grad-check -------------------------------------------------------------------

pub fn grad_check(seed: u64, configs: usize, tol: f64, primitives_only: bool) -> anyhow::Result<String> {
    let report = if primitives_only {
        fcl_core::gradcheck::primitive_suite(seed, configs, tol)?
    } else {
        fcl_core::gradcheck::full_suite(seed, configs, tol)?
    };
    let rendered = report.render();
    if !report.all_pass() {
        return Err(anyhow!("gradient check failed:\n{rendered}"));
    }
    Ok(rendered)
}
