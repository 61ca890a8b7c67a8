use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use xfsl_core::active::{run_al, write_outputs};
use xfsl_core::alignment::{binary_iou, hard_dice};
use xfsl_core::attribution::{
    grad_cam_batch, integrated_gradients, write_heatmap_pgm, AttributionMethod, Heatmap, Target,
};
use xfsl_core::backbone::{init_encoder, Encoder, EncoderConfig};
use xfsl_core::fewshot::{classify_query, PrototypeSet, Sample};
use xfsl_core::gradcheck::run_all;
use xfsl_core::synthdata::{chi_square, generate, load_manifest, tag_contingency, Manifest, Split};
use xfsl_core::trainer::{evaluate, evaluation_prototypes, train_with_progress, write_json, write_trace_csv, TrainConfig, TrainMode};
use xfsl_core::Tensor;

use crate::args::{ActiveArgs, EvalArgs, ExplainArgs, GenDataArgs, GradcheckArgs, TargetArg, TrainArgs, TrainingArgs};
use crate::{CliError, CliResult};

pub const RUN_CONFIG: &str = "run_config.json";
pub const MODEL_META: &str = "model.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const EVAL_REPORT: &str = "eval_report.json";

/// What `eval`, `explain` and `report` need to rebuild a trained model.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

fn write_echo(out: &Path, echo: &Value) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    Ok(write_json(&out.join(RUN_CONFIG), echo)?)
}

fn open_dataset(data: &Path) -> CliResult<Manifest> {
    let path = data.join("manifest.jsonl");
    if !path.is_file() {
        return Err(CliError::Validation(format!("{} is not a dataset directory (no manifest.jsonl)", data.display())));
    }
    Ok(load_manifest(&path)?)
}

fn image_size(samples: &[Sample]) -> CliResult<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| CliError::Validation("the training pool is empty".into()))?;
    let shape = first.image.shape();
    Ok((shape[1], shape[2]))
}

/// Applies the baseline-mode α rule, warning when a nonzero α is dropped.
fn resolve_training(args: &TrainingArgs, seed: u64) -> CliResult<TrainConfig> {
    let mut cfg = args.config(seed);
    if cfg.mode == TrainMode::Baseline && cfg.alpha != 0.0 {
        eprintln!("warning: --alpha {} is ignored in baseline mode (using 0)", cfg.alpha);
        cfg.alpha = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_model(out: &Path, encoder: &Encoder, train: &TrainConfig) -> CliResult<()> {
    encoder.save_checkpoint(&out.join(CHECKPOINT))?;
    let meta = ModelMeta {
        encoder: encoder.config().clone(),
        train: train.clone(),
    };
    Ok(write_json(&out.join(MODEL_META), &meta)?)
}

fn load_model(dir: &Path) -> CliResult<(Encoder, ModelMeta)> {
    let meta_path = dir.join(MODEL_META);
    let text = fs::read_to_string(&meta_path).map_err(|e| io_error(&meta_path, e))?;
    let meta: ModelMeta = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", meta_path.display())))?;
    let encoder = Encoder::load_checkpoint(meta.encoder.clone(), &dir.join(CHECKPOINT))?;
    Ok((encoder, meta))
}

fn dump_heatmaps(dir: &Path, samples: &[Sample], maps: &[Heatmap], method: AttributionMethod) -> CliResult<()> {
    for (s, h) in samples.iter().zip(maps) {
        write_heatmap_pgm(dir, &s.id, method, h)?;
    }
    Ok(())
}

fn predicted_heatmaps(encoder: &Encoder, protos: &PrototypeSet, samples: &[Sample]) -> CliResult<Vec<Heatmap>> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Ok(grad_cam_batch(encoder, protos, &images, &Target::Predicted)?
        .into_iter()
        .map(|c| c.heatmap)
        .collect())
}

pub fn gen_data(args: GenDataArgs, seed: Option<u64>) -> CliResult<Value> {
    let seed = seed.unwrap_or(0);
    let cfg = args.config(seed);
    cfg.validate()?;
    let manifest = generate(&cfg, &args.out)?;
    write_echo(
        &args.out,
        &json!({ "subcommand": "gen-data", "seed": seed, "out": path_str(&args.out), "synth": cfg }),
    )?;
    let chi2 = chi_square(&tag_contingency(&manifest, Split::TestDeconfounded));
    Ok(json!({
        "command": "gen-data",
        "out": path_str(&args.out),
        "samples": manifest.entries.len(),
        "deconfounded_tag_chi_square": chi2,
    }))
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> CliResult<Value> {
    let seed = seed.unwrap_or(0);
    let cfg = resolve_training(&args.training, seed)?;
    let manifest = open_dataset(&args.data)?;
    let pool = manifest.load_split(Split::TrainPool)?;
    let enc_cfg = args.encoder.config(image_size(&pool)?, seed);
    let encoder = init_encoder(enc_cfg.clone())?;
    write_echo(
        &args.out,
        &json!({
            "subcommand": "train",
            "seed": seed,
            "data": path_str(&args.data),
            "out": path_str(&args.out),
            "train": cfg,
            "encoder": enc_cfg,
        }),
    )?;
    let outcome = train_with_progress(encoder, &pool, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  l_proto {:.4}  l_exp {:.4}  l_total {:.4}",
            e.epoch, e.l_proto, e.l_exp, e.l_total
        );
    })?;
    save_model(&args.out, &outcome.encoder, &cfg)?;
    write_trace_csv(&args.out.join("loss_trace.csv"), &outcome.trace)?;
    let last = outcome.trace.last();
    Ok(json!({
        "command": "train",
        "out": path_str(&args.out),
        "mode": cfg.mode,
        "alpha": cfg.alpha,
        "epochs": cfg.epochs,
        "final_l_proto": last.map(|e| e.l_proto),
        "final_l_exp": last.map(|e| e.l_exp),
        "final_l_total": last.map(|e| e.l_total),
    }))
}

pub fn eval(args: EvalArgs, seed: Option<u64>) -> CliResult<Value> {
    let (encoder, meta) = load_model(&args.model)?;
    let mut cfg = meta.train;
    cfg.seed = seed.unwrap_or(cfg.seed);
    let split: Split = args.split.into();
    write_echo(
        &args.out,
        &json!({
            "subcommand": "eval",
            "seed": cfg.seed,
            "model": path_str(&args.model),
            "data": path_str(&args.data),
            "out": path_str(&args.out),
            "split": split,
            "dump_heatmaps": args.dump_heatmaps,
            "train": cfg,
            "encoder": meta.encoder,
        }),
    )?;
    let manifest = open_dataset(&args.data)?;
    let support = manifest.load_split(Split::TrainPool)?;
    let test = manifest.load_split(split)?;
    let report = evaluate(&encoder, &support, &test, &cfg)?;
    write_json(&args.out.join(EVAL_REPORT), &report)?;
    if args.dump_heatmaps {
        let (protos, _) = evaluation_prototypes(&encoder, &support, &cfg)?;
        let maps = predicted_heatmaps(&encoder, &protos, &test)?;
        dump_heatmaps(&args.out.join("heatmaps"), &test, &maps, AttributionMethod::GradCam)?;
    }
    Ok(json!({
        "command": "eval",
        "out": path_str(&args.out),
        "split": split,
        "accuracy": report.accuracy,
        "macro_auc": report.macro_auc,
        "iou": report.iou,
    }))
}

pub fn explain(args: ExplainArgs, seed: Option<u64>) -> CliResult<Value> {
    let (encoder, meta) = load_model(&args.model)?;
    let mut cfg = meta.train;
    cfg.seed = seed.unwrap_or(cfg.seed);
    let method: AttributionMethod = args.method.into();
    let split: Split = args.split.into();
    if method == AttributionMethod::IntegratedGradients && args.ig_steps == 0 {
        return Err(CliError::Validation("--ig-steps must be positive".into()));
    }
    write_echo(
        &args.out,
        &json!({
            "subcommand": "explain",
            "seed": cfg.seed,
            "model": path_str(&args.model),
            "data": path_str(&args.data),
            "out": path_str(&args.out),
            "split": split,
            "method": method.file_tag(),
            "target": format!("{:?}", args.target).to_lowercase(),
            "ig_steps": args.ig_steps,
            "limit": args.limit,
            "train": cfg,
        }),
    )?;
    let manifest = open_dataset(&args.data)?;
    let support = manifest.load_split(Split::TrainPool)?;
    let mut samples = manifest.load_split(split)?;
    if let Some(n) = args.limit {
        samples.truncate(n);
    }
    let (protos, _) = evaluation_prototypes(&encoder, &support, &cfg)?;
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let targets: Vec<usize> = match args.target {
        TargetArg::True => samples.iter().map(|s| s.label).collect(),
        TargetArg::Predicted => encoder
            .embed(&images)?
            .iter()
            .map(|e| classify_query(e, &protos).map(|p| p.argmax()))
            .collect::<Result<_, _>>()?,
    };
    let maps: Vec<Heatmap> = match method {
        AttributionMethod::GradCam => grad_cam_batch(&encoder, &protos, &images, &Target::Given(targets.clone()))?
            .into_iter()
            .map(|c| c.heatmap)
            .collect(),
        AttributionMethod::IntegratedGradients => samples
            .par_iter()
            .zip(&targets)
            .map(|(s, &t)| integrated_gradients(&encoder, &protos, &s.image, t, args.ig_steps))
            .collect::<Result<_, _>>()?,
    };
    dump_heatmaps(&args.out.join("heatmaps"), &samples, &maps, method)?;

    let threshold = cfg.alignment.binarize_threshold;
    let mut csv = String::from("sample_id,label,target,dice,iou,degenerate\n");
    let (mut dice_sum, mut iou_sum) = (0.0, 0.0);
    for ((s, h), t) in samples.iter().zip(&maps).zip(&targets) {
        let mask = s.mask_or_err()?;
        let dice = hard_dice(&h.values, mask, threshold)?;
        let iou = binary_iou(&h.values, mask, threshold)?;
        dice_sum += dice;
        iou_sum += iou;
        let _ = writeln!(csv, "{},{},{},{},{},{}", s.id, s.label, t, dice, iou, h.degenerate);
    }
    let csv_path = args.out.join(format!("explain_{}.csv", method.file_tag()));
    fs::write(&csv_path, csv).map_err(|e| io_error(&csv_path, e))?;
    let n = samples.len().max(1) as f64;
    Ok(json!({
        "command": "explain",
        "out": path_str(&args.out),
        "method": method.file_tag(),
        "samples": samples.len(),
        "mean_dice": dice_sum / n,
        "mean_iou": iou_sum / n,
    }))
}

pub fn active(args: ActiveArgs, seed: Option<u64>) -> CliResult<Value> {
    let seed = seed.unwrap_or(0);
    let train_cfg = resolve_training(&args.training, seed)?;
    let al = args.config(seed);
    al.validate()?;
    let split: Split = args.split.into();
    let manifest = open_dataset(&args.data)?;
    let pool = manifest.load_split(Split::TrainPool)?;
    let enc_cfg = args.encoder.config(image_size(&pool)?, seed);
    let encoder = init_encoder(enc_cfg.clone())?;
    write_echo(
        &args.out,
        &json!({
            "subcommand": "active",
            "seed": seed,
            "data": path_str(&args.data),
            "out": path_str(&args.out),
            "split": split,
            "dump_heatmaps": args.dump_heatmaps,
            "al": al,
            "train": train_cfg,
            "encoder": enc_cfg,
        }),
    )?;
    let test = manifest.load_split(split)?;
    let run = run_al(encoder, &pool, &test, &al, &train_cfg)?;
    for (r, report) in run.reports.iter().enumerate() {
        eprintln!("round {r}  accuracy {:.4}  iou {:.4}", report.accuracy, report.iou);
    }
    write_outputs(&args.out, &run)?;
    save_model(&args.out, &run.encoder, &train_cfg)?;
    let labeled_ids = &run.history.last().expect("history holds the initial state").labeled_ids;
    if args.dump_heatmaps {
        let labeled: Vec<Sample> = pool.iter().filter(|s| labeled_ids.binary_search(&s.id).is_ok()).cloned().collect();
        let (protos, _) = evaluation_prototypes(&run.encoder, &labeled, &train_cfg)?;
        let maps = predicted_heatmaps(&run.encoder, &protos, &test)?;
        dump_heatmaps(&args.out.join("heatmaps"), &test, &maps, AttributionMethod::GradCam)?;
    }
    let last = run.reports.last().expect("reports hold the initial entry");
    Ok(json!({
        "command": "active",
        "out": path_str(&args.out),
        "strategy": al.strategy,
        "lambda": al.effective_lambda(),
        "labeled": labeled_ids.len(),
        "final_accuracy": last.accuracy,
        "final_iou": last.iou,
    }))
}

pub fn gradcheck(args: GradcheckArgs, seed: Option<u64>) -> CliResult<Value> {
    let seed = seed.unwrap_or(0);
    if args.trials == 0 {
        return Err(CliError::Validation("--trials must be positive".into()));
    }
    let outcomes = run_all(args.trials, seed)?;
    eprintln!("{:<22} {:>7} {:>12}  result", "suite", "coords", "max rel err");
    for o in &outcomes {
        eprintln!(
            "{:<22} {:>7} {:>12.3e}  {}",
            o.name,
            o.coordinates,
            o.max_relative_error,
            if o.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    if let Some(out) = &args.out {
        write_echo(out, &json!({ "subcommand": "gradcheck", "seed": seed, "trials": args.trials, "out": path_str(out) }))?;
        write_json(&out.join("gradcheck.json"), &outcomes)?;
    }
    let summary = json!({
        "command": "gradcheck",
        "suites": outcomes.len(),
        "failed": failed,
    });
    if failed.is_empty() {
        Ok(summary)
    } else {
        println!("{summary}");
        Err(CliError::Numerical(format!("{} gradient suite(s) failed", failed.len())))
    }
}

/// The directory a path names, for error messages about run inputs.
pub fn require_dir(path: &Path) -> CliResult<PathBuf> {
    if path.is_dir() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Validation(format!("{} is not a directory", path.display())))
    }
}
