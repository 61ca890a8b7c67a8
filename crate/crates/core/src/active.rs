//! Explanation-guided active learning.
//!
//! Each round scores every unlabeled sample by
//! `λ · H(p) + (1 − λ) · D_exp`, where `H` is the predictive entropy and
//! `D_exp` the misalignment between the Grad-CAM map at the predicted class
//! and the expert mask, moves the top `batch_k` into the labeled set,
//! fine-tunes on it and re-evaluates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{hard_dice, soft_dice_loss};
use crate::attribution::{grad_cam_batch, Target};
use crate::backbone::Encoder;
use crate::error::{Error, Result};
use crate::fewshot::{PrototypeSet, ProbVector, Sample, PROB_FLOOR};
use crate::metrics::EvalReport;
use crate::tensor::Tensor;
use crate::trainer::{evaluate, evaluation_prototypes, train, write_json, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Xgal,
    Random,
    EntropyOnly,
    DiceOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub init_labeled: usize,
    pub rounds: usize,
    pub batch_k: usize,
    pub finetune_epochs: usize,
    pub finetune_episodes: usize,
    /// Score misalignment with the smoothed soft Dice loss instead of the
    /// binarized hard Dice complement.
    pub soft_dexp: bool,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            strategy: Strategy::Xgal,
            lambda: 0.5,
            init_labeled: 40,
            rounds: 3,
            batch_k: 24,
            finetune_epochs: 2,
            finetune_episodes: 50,
            soft_dexp: false,
            seed: 0,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidLambda(self.lambda));
        }
        if self.init_labeled == 0 {
            return Err(Error::Config("init_labeled must be positive".into()));
        }
        Ok(())
    }

    /// The λ the strategy scores with; the single-term strategies are the
    /// endpoints of the xgal mix.
    pub fn effective_lambda(&self) -> f64 {
        match self.strategy {
            Strategy::EntropyOnly => 1.0,
            Strategy::DiceOnly => 0.0,
            Strategy::Xgal | Strategy::Random => self.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub round: usize,
    pub sample_id: String,
    pub entropy: f64,
    #[serde(rename = "d_exp")]
    pub misalignment: f64,
    pub score: f64,
    pub predicted_class: usize,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    /// Both sorted by id.
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub round_index: usize,
}

/// Shannon entropy in nats; probabilities below the floor contribute 0.
pub fn entropy(probs: &ProbVector) -> f64 {
    -probs
        .probs
        .iter()
        .filter(|&&p| p >= PROB_FLOOR)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn acquisition_score(entropy: f64, misalignment: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidLambda(lambda));
    }
    Ok(lambda * entropy + (1.0 - lambda) * misalignment)
}

fn d_exp(heatmap: &[f64], sample: &Sample, soft: bool, train: &TrainConfig) -> Result<f64> {
    let mask = sample.mask_or_err()?;
    if soft {
        soft_dice_loss(heatmap, mask, train.alignment.smoothing_eps)
    } else {
        Ok(1.0 - hard_dice(heatmap, mask, train.alignment.binarize_threshold)?)
    }
}

/// `(D_exp, ŷ)` for one sample.
pub fn misalignment(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    sample: &Sample,
    soft: bool,
    train: &TrainConfig,
) -> Result<(f64, usize)> {
    sample.mask_or_err()?;
    let cam = grad_cam_batch(encoder, prototypes, &[&sample.image], &Target::Predicted)?.remove(0);
    Ok((d_exp(&cam.heatmap.values, sample, soft, train)?, cam.target))
}

fn ranking(a: &AcquisitionRecord, b: &AcquisitionRecord) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Ids of the `k` best records by score, ties going to the smaller id.
pub fn select_top_k(records: &[AcquisitionRecord], k: usize) -> Vec<String> {
    let mut refs: Vec<&AcquisitionRecord> = records.iter().collect();
    let k = k.min(refs.len());
    if k == 0 {
        return Vec::new();
    }
    if k < refs.len() {
        refs.select_nth_unstable_by(k - 1, |a, b| ranking(a, b));
        refs.truncate(k);
    }
    refs.sort_unstable_by(|a, b| ranking(a, b));
    refs.into_iter().map(|r| r.sample_id.clone()).collect()
}

/// Scores `samples` against a frozen model. The random strategy still
/// records entropy and misalignment but ranks by a seeded uniform draw.
pub fn score_samples(
    encoder: &Encoder,
    prototypes: &PrototypeSet,
    samples: &[&Sample],
    round: usize,
    al: &ALConfig,
    train: &TrainConfig,
) -> Result<Vec<AcquisitionRecord>> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let cams = grad_cam_batch(encoder, prototypes, &images, &Target::Predicted)?;
    let lambda = al.effective_lambda();
    let mut rng = ChaCha8Rng::seed_from_u64(al.seed);
    rng.set_stream(round as u64 + 1);
    samples
        .iter()
        .zip(cams)
        .map(|(s, cam)| {
            let h = entropy(&cam.probs);
            let d = d_exp(&cam.heatmap.values, s, al.soft_dexp, train)?;
            let score = match al.strategy {
                Strategy::Random => rng.random::<f64>(),
                _ => acquisition_score(h, d, lambda)?,
            };
            Ok(AcquisitionRecord {
                round,
                sample_id: s.id.clone(),
                entropy: h,
                misalignment: d,
                score,
                predicted_class: cam.target,
                selected: false,
            })
        })
        .collect()
}

/// The labeled seed set and the model trained on it. Independent of the
/// strategy, so one initialization can serve several strategies.
#[derive(Clone, Debug)]
pub struct ALInit {
    pub state: PoolState,
    pub encoder: Encoder,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct ALRun {
    /// Entry 0 is the model trained on the seed set; entry r follows round r.
    pub reports: Vec<EvalReport>,
    pub history: Vec<PoolState>,
    pub records: Vec<AcquisitionRecord>,
    pub encoder: Encoder,
}

fn check_capacity(pool: &[Sample], al: &ALConfig) -> Result<()> {
    let needed = al.init_labeled + al.rounds * al.batch_k;
    if pool.len() < needed {
        return Err(Error::PoolExhausted {
            needed,
            available: pool.len(),
        });
    }
    let mut ids = BTreeSet::new();
    for s in pool {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::Config(format!("duplicate sample id {} in pool", s.id)));
        }
    }
    Ok(())
}

fn pick<'a>(pool: &'a [Sample], ids: &[String]) -> Vec<&'a Sample> {
    let by_id: BTreeMap<&str, &Sample> = pool.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter().map(|id| by_id[id.as_str()]).collect()
}

/// Training config for the labeled set: queries per class shrink when the
/// smallest labeled class cannot supply `k_shot + q_per_class` samples.
fn labeled_train_config(labeled: &[&Sample], base: &TrainConfig, epochs: usize, episodes: usize, seed: u64) -> Result<TrainConfig> {
    let mut counts = vec![0usize; base.n_way];
    for s in labeled {
        if s.label >= base.n_way {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                n_classes: base.n_way,
            });
        }
        counts[s.label] += 1;
    }
    let (class, &smallest) = counts
        .iter()
        .enumerate()
        .min_by_key(|&(_, c)| *c)
        .expect("n_way >= 2");
    if smallest < base.k_shot + 1 {
        return Err(Error::InsufficientClass {
            class,
            needed: base.k_shot + 1,
            available: smallest,
        });
    }
    Ok(TrainConfig {
        q_per_class: base.q_per_class.min(smallest - base.k_shot),
        epochs,
        episodes_per_epoch: episodes,
        seed,
        ..base.clone()
    })
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed ^ (round as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Draws the labeled seed set and trains the initial model on it in the
/// trainer's configured mode and schedule.
pub fn initialize(
    encoder: Encoder,
    pool: &[Sample],
    test_set: &[Sample],
    al: &ALConfig,
    train_config: &TrainConfig,
) -> Result<ALInit> {
    al.validate()?;
    train_config.validate()?;
    check_capacity(pool, al)?;
    let mut rng = ChaCha8Rng::seed_from_u64(al.seed);
    let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, pool.len(), al.init_labeled)
        .into_iter()
        .collect();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (i, s) in pool.iter().enumerate() {
        if chosen.contains(&i) {
            labeled.push(s.id.clone());
        } else {
            unlabeled.push(s.id.clone());
        }
    }
    labeled.sort();
    unlabeled.sort();
    let labeled_samples: Vec<Sample> = pick(pool, &labeled).into_iter().cloned().collect();
    let cfg = labeled_train_config(
        &labeled_samples.iter().collect::<Vec<_>>(),
        train_config,
        train_config.epochs,
        train_config.episodes_per_epoch,
        round_seed(train_config.seed, 0),
    )?;
    let encoder = train(encoder, &labeled_samples, &cfg)?.encoder;
    let report = evaluate(&encoder, &labeled_samples, test_set, train_config)?;
    Ok(ALInit {
        state: PoolState {
            labeled_ids: labeled,
            unlabeled_ids: unlabeled,
            round_index: 0,
        },
        encoder,
        report,
    })
}

/// Runs the acquisition rounds from an initialization.
pub fn run_rounds(
    init: &ALInit,
    pool: &[Sample],
    test_set: &[Sample],
    al: &ALConfig,
    train_config: &TrainConfig,
) -> Result<ALRun> {
    al.validate()?;
    check_capacity(pool, al)?;
    let mut state = init.state.clone();
    if state.unlabeled_ids.len() < al.rounds * al.batch_k {
        return Err(Error::PoolExhausted {
            needed: al.rounds * al.batch_k,
            available: state.unlabeled_ids.len(),
        });
    }
    let mut encoder = init.encoder.clone();
    let mut reports = vec![init.report.clone()];
    let mut history = vec![state.clone()];
    let mut records = Vec::new();
    for round in 1..=al.rounds {
        let labeled = pick(pool, &state.labeled_ids);
        let labeled_owned: Vec<Sample> = labeled.iter().map(|&s| s.clone()).collect();
        let (protos, _) = evaluation_prototypes(&encoder, &labeled_owned, train_config)?;
        let unlabeled = pick(pool, &state.unlabeled_ids);
        let mut scored = score_samples(&encoder, &protos, &unlabeled, round, al, train_config)?;
        let chosen: BTreeSet<String> = select_top_k(&scored, al.batch_k).into_iter().collect();
        for r in &mut scored {
            r.selected = chosen.contains(&r.sample_id);
        }
        records.extend(scored);
        state.unlabeled_ids.retain(|id| !chosen.contains(id));
        state.labeled_ids.extend(chosen);
        state.labeled_ids.sort();
        state.round_index = round;

        let labeled_samples: Vec<Sample> = pick(pool, &state.labeled_ids).into_iter().cloned().collect();
        let cfg = labeled_train_config(
            &labeled_samples.iter().collect::<Vec<_>>(),
            train_config,
            al.finetune_epochs,
            al.finetune_episodes,
            round_seed(train_config.seed, round),
        )?;
        encoder = train(encoder, &labeled_samples, &cfg)?.encoder;
        reports.push(evaluate(&encoder, &labeled_samples, test_set, train_config)?);
        history.push(state.clone());
    }
    Ok(ALRun {
        reports,
        history,
        records,
        encoder,
    })
}

pub fn run_al(
    encoder: Encoder,
    pool: &[Sample],
    test_set: &[Sample],
    al: &ALConfig,
    train_config: &TrainConfig,
) -> Result<ALRun> {
    let init = initialize(encoder, pool, test_set, al, train_config)?;
    run_rounds(&init, pool, test_set, al, train_config)
}

/// Writes `audit.jsonl` and `round_<r>.json` into `dir`.
pub fn write_outputs(dir: &Path, run: &ALRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("audit.jsonl");
    let mut text = Vec::new();
    for r in &run.records {
        serde_json::to_writer(&mut text, r)?;
        text.push(b'\n');
    }
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&text))
        .map_err(|e| Error::io(&path, e))?;
    for (r, report) in run.reports.iter().enumerate() {
        write_json(&dir.join(format!("round_{r}.json")), report)?;
    }
    write_json(&dir.join("pool_history.json"), &run.history)
}
