//! Episodic training of the joint objective
//! `L_total = L_proto + α · L_exp` and evaluation.
//!
//! Baseline mode is guided mode with α forced to 0: both go through
//! [`build_episode_graph`], and the alignment term is simply not built.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{binary_iou, cell_permutation, soft_dice_loss_node, AlignmentConfig};
use crate::attribution::{grad_cam_batch, grad_cam_node, Target};
use crate::autodiff::{Graph, Var};
use crate::backbone::{BoundParams, Encoder};
use crate::error::{Error, Result};
use crate::fewshot::{compute_prototypes, prototype_groups, sample_episode, Episode, Sample, PROB_FLOOR};
use crate::metrics::{accuracy, confusion_matrix, macro_auc, per_class_f1, EvalReport};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    Guided,
    /// Guided, but each heatmap's cells are shuffled before the Dice term.
    RandomCamControl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub alpha: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub alignment: AlignmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Guided,
            alpha: 0.10,
            n_way: 3,
            k_shot: 5,
            q_per_class: 5,
            epochs: 7,
            episodes_per_epoch: 60,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alignment: AlignmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.q_per_class == 0 {
            return Err(Error::Config("need n_way >= 2, k_shot >= 1, q_per_class >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.alignment.validate()
    }

    /// The α actually applied: 0 in baseline mode.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            TrainMode::Baseline => 0.0,
            _ => self.alpha,
        }
    }

    fn computes_alignment(&self) -> bool {
        self.mode != TrainMode::Baseline
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_proto: f64,
    pub l_exp: f64,
    pub l_total: f64,
}

/// The joint objective for one episode, built in a graph whose encoder
/// parameters require gradients.
#[derive(Debug)]
pub struct EpisodeGraph {
    pub graph: Graph,
    pub params: BoundParams,
    pub l_proto: Var,
    pub l_exp: Option<Var>,
    pub l_total: Var,
}

impl EpisodeGraph {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_proto: self.graph.scalar(self.l_proto),
            l_exp: self.l_exp.map_or(0.0, |v| self.graph.scalar(v)),
            l_total: self.graph.scalar(self.l_total),
        }
    }
}

fn permutation_seed(episode_seed: u64, query: usize) -> u64 {
    episode_seed ^ (query as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Support and query pass through the encoder as one batch; gradients flow
/// into the prototypes as well as the query embeddings.
pub fn build_episode_graph(encoder: &Encoder, episode: &Episode, config: &TrainConfig) -> Result<EpisodeGraph> {
    let n_s = episode.support.len();
    let n_q = episode.query.len();
    if n_q == 0 {
        return Err(Error::Config("episode has no queries".into()));
    }
    let with_exp = config.computes_alignment();
    if with_exp {
        for q in &episode.query {
            q.mask_or_err()?;
        }
    }
    let mut g = Graph::new();
    let params = encoder.bind(&mut g, true);
    let images: Vec<&Tensor> = episode.support.iter().chain(&episode.query).map(|s| &s.image).collect();
    let x = g.constant(Tensor::stack(&images)?);
    let out = encoder.forward(&mut g, &params, x)?;

    let labels: Vec<usize> = episode.support.iter().map(|s| s.label).collect();
    let ids: Vec<&str> = episode.support.iter().map(|s| s.id.as_str()).collect();
    let groups = prototype_groups(&labels, &ids, episode.n_way)?;
    let support_rows: Vec<usize> = (0..n_s).collect();
    let query_rows: Vec<usize> = (n_s..n_s + n_q).collect();
    let support = g.select_rows(out.embedding, &support_rows)?;
    let protos = g.group_mean(support, &groups)?;
    let queries = g.select_rows(out.embedding, &query_rows)?;
    let logits = g.neg_sq_euclidean(queries, protos)?;

    let n = episode.n_way;
    let probs = g.softmax(logits);
    let floored = g.clamp_min(probs, PROB_FLOOR);
    let logp = g.log(floored);
    let picks: Vec<usize> = episode
        .query
        .iter()
        .enumerate()
        .map(|(j, s)| j * n + s.label)
        .collect();
    let true_logp = g.gather(logp, &picks)?;
    let mean_logp = g.mean(true_logp);
    let l_proto = g.scalar_mul(mean_logp, -1.0);

    let mut l_exp = None;
    if with_exp {
        let (_, h, w) = encoder.config().input_size;
        let mut terms = Vec::with_capacity(n_q);
        for (j, q) in episode.query.iter().enumerate() {
            let score = g.gather(logits, &[j * n + q.label])?;
            let cam = grad_cam_node(&mut g, out.last_conv_activations, n_s + j, score, h, w)?;
            let mut map = cam.map;
            if config.mode == TrainMode::RandomCamControl {
                let perm = cell_permutation(h * w, permutation_seed(episode.seed, j));
                map = g.gather(map, &perm)?;
            }
            terms.push(soft_dice_loss_node(&mut g, map, q.mask_or_err()?, config.alignment.smoothing_eps)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        l_exp = Some(g.scalar_mul(acc, 1.0 / n_q as f64));
    }

    let alpha = config.effective_alpha();
    let l_total = match l_exp {
        Some(e) if alpha > 0.0 => {
            let weighted = g.scalar_mul(e, alpha);
            g.add(l_proto, weighted)?
        }
        _ => l_proto,
    };
    Ok(EpisodeGraph {
        graph: g,
        params,
        l_proto,
        l_exp,
        l_total,
    })
}

pub fn episode_total_loss(encoder: &Encoder, episode: &Episode, config: &TrainConfig) -> Result<LossBreakdown> {
    Ok(build_episode_graph(encoder, episode, config)?.breakdown())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig, params: &[Tensor]) -> Self {
        Adam {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean loss components over one epoch's episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_proto: f64,
    pub l_exp: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub trace: Vec<EpochLoss>,
}

pub fn train(encoder: Encoder, pool: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(encoder, pool, config, |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    mut encoder: Encoder,
    pool: &[Sample],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config, encoder.params());
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sums = LossBreakdown::default();
        for episode_idx in 0..config.episodes_per_epoch {
            let episode_seed: u64 = rng.random();
            let episode = sample_episode(pool, config.n_way, config.k_shot, config.q_per_class, episode_seed)?;
            let mut eg = build_episode_graph(&encoder, &episode, config)?;
            let loss = eg.breakdown();
            if !(loss.l_total.is_finite() && loss.l_exp.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    episode_seed,
                    epoch,
                    episode: episode_idx,
                });
            }
            eg.graph.backward(eg.l_total)?;
            let grads: Vec<&[f64]> = eg
                .params
                .0
                .iter()
                .map(|&p| eg.graph.grad(p).expect("parameters require grad"))
                .collect();
            if grads.iter().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    episode_seed,
                    epoch,
                    episode: episode_idx,
                });
            }
            adam.step(encoder.params_mut(), &grads);
            sums.l_proto += loss.l_proto;
            sums.l_exp += loss.l_exp;
            sums.l_total += loss.l_total;
        }
        let n = config.episodes_per_epoch.max(1) as f64;
        let entry = EpochLoss {
            epoch,
            l_proto: sums.l_proto / n,
            l_exp: sums.l_exp / n,
            l_total: sums.l_total / n,
        };
        progress(&entry);
        trace.push(entry);
    }
    Ok(TrainOutcome { encoder, trace })
}

pub fn write_trace_csv(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,l_proto,l_exp,l_total\n");
    for e in trace {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.l_proto, e.l_exp, e.l_total));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Draws `k_shot` support samples per class from `support_pool` and returns
/// the prototypes with the chosen ids.
pub fn evaluation_prototypes(
    encoder: &Encoder,
    support_pool: &[Sample],
    config: &TrainConfig,
) -> Result<(crate::fewshot::PrototypeSet, Vec<String>)> {
    let draw = sample_episode(support_pool, config.n_way, config.k_shot, 0, config.seed)?;
    let images: Vec<&Tensor> = draw.support.iter().map(|s| &s.image).collect();
    let embeddings = encoder.embed(&images)?;
    // map episode-local labels back to pool labels
    let labels: Vec<usize> = draw.support.iter().map(|s| draw.classes[s.label]).collect();
    let ids: Vec<&str> = draw.support.iter().map(|s| s.id.as_str()).collect();
    let protos = compute_prototypes(&embeddings, &labels, &ids, config.n_way)?;
    Ok((protos, ids.iter().map(|s| s.to_string()).collect()))
}

pub fn evaluate(
    encoder: &Encoder,
    support_pool: &[Sample],
    test_set: &[Sample],
    config: &TrainConfig,
) -> Result<EvalReport> {
    let (protos, support_ids) = evaluation_prototypes(encoder, support_pool, config)?;
    let images: Vec<&Tensor> = test_set.iter().map(|s| &s.image).collect();
    let cams = grad_cam_batch(encoder, &protos, &images, &Target::Predicted)?;
    let labels: Vec<usize> = test_set.iter().map(|s| s.label).collect();
    let predictions: Vec<usize> = cams.iter().map(|c| c.target).collect();
    let probs: Vec<Vec<f64>> = cams.iter().map(|c| c.probs.probs.clone()).collect();
    let confusion = confusion_matrix(&labels, &predictions, config.n_way)?;
    let auc = macro_auc(&probs, &labels, config.n_way)?;
    let mut iou = 0.0;
    for (s, c) in test_set.iter().zip(&cams) {
        iou += binary_iou(&c.heatmap.values, s.mask_or_err()?, config.alignment.binarize_threshold)?;
    }
    Ok(EvalReport {
        accuracy: accuracy(&confusion),
        macro_auc: auc,
        f1: per_class_f1(&confusion),
        iou: iou / test_set.len() as f64,
        confusion,
        n_classes: config.n_way,
        support_seed: config.seed,
        support_ids,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&text))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Mask;
    use crate::autodiff::finite_difference_at;
    use crate::backbone::{init_encoder, ConvBlock, EncoderConfig};

    fn tiny_encoder(seed: u64) -> Encoder {
        init_encoder(EncoderConfig {
            input_size: (1, 16, 16),
            conv_blocks: vec![ConvBlock::new(3, 3, 1, 2), ConvBlock::new(4, 3, 1, 2)],
            embedding_dim: 4,
            seed,
        })
        .unwrap()
    }

    /// Blob per class at a class-specific position, with a textured
    /// background so no max-pool window is flat.
    fn toy_pool(per_class: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for label in 0..2 {
            for i in 0..per_class {
                let (cy, cx) = if label == 0 { (4.0, 5.0) } else { (11.0, 10.0) };
                let cy = cy + rng.random_range(-1.0..1.0);
                let cx = cx + rng.random_range(-1.0..1.0);
                let inside = |r: usize, c: usize| (r as f64 - cy).hypot(c as f64 - cx) <= 3.0;
                let data: Vec<f64> = (0..256)
                    .map(|k| {
                        let (r, c) = (k / 16, k % 16);
                        let base = if inside(r, c) { 0.9 } else { 0.3 };
                        base + rng.random_range(-0.05..0.05)
                    })
                    .collect();
                let mask = Mask::from_fn(16, 16, inside);
                out.push(
                    Sample::new(
                        format!("s{label}_{i:02}"),
                        Tensor::new(&[1, 16, 16], data).unwrap(),
                        Some(mask),
                        label,
                    )
                    .unwrap(),
                );
            }
        }
        out
    }

    fn micro_config(mode: TrainMode, alpha: f64) -> TrainConfig {
        TrainConfig {
            mode,
            alpha,
            n_way: 2,
            k_shot: 1,
            q_per_class: 1,
            epochs: 2,
            episodes_per_epoch: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_components_combine_linearly() {
        let enc = tiny_encoder(0);
        let pool = toy_pool(4, 0);
        let ep = sample_episode(&pool, 2, 1, 2, 9).unwrap();
        let zero = episode_total_loss(&enc, &ep, &micro_config(TrainMode::Guided, 0.0)).unwrap();
        assert_eq!(zero.l_total, zero.l_proto);
        assert!(zero.l_exp > 0.0);
        let base = episode_total_loss(&enc, &ep, &micro_config(TrainMode::Baseline, 0.3)).unwrap();
        assert_eq!(base.l_total, base.l_proto);
        assert_eq!(base.l_exp, 0.0);
        assert_eq!(base.l_proto, zero.l_proto);
        let a1 = episode_total_loss(&enc, &ep, &micro_config(TrainMode::Guided, 0.1)).unwrap();
        let a2 = episode_total_loss(&enc, &ep, &micro_config(TrainMode::Guided, 0.7)).unwrap();
        assert!((a1.l_total - (a1.l_proto + 0.1 * a1.l_exp)).abs() < 1e-12);
        assert!(((a2.l_total - a1.l_total) - 0.6 * a1.l_exp).abs() < 1e-12);
    }

    #[test]
    fn guided_mode_requires_masks() {
        let enc = tiny_encoder(0);
        let mut pool = toy_pool(3, 1);
        for s in &mut pool {
            s.mask = None;
        }
        let ep = sample_episode(&pool, 2, 1, 1, 0).unwrap();
        assert!(matches!(
            episode_total_loss(&enc, &ep, &micro_config(TrainMode::Guided, 0.1)),
            Err(Error::MissingMask(_))
        ));
        assert!(episode_total_loss(&enc, &ep, &micro_config(TrainMode::Baseline, 0.1)).is_ok());
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let enc = tiny_encoder(3);
        let pool = toy_pool(3, 2);
        let ep = sample_episode(&pool, 2, 1, 1, 4).unwrap();
        for mode in [TrainMode::Guided, TrainMode::RandomCamControl] {
            let mut eg = build_episode_graph(&enc, &ep, &micro_config(mode, 0.5)).unwrap();
            eg.graph.backward(eg.l_total).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..5 {
                let p = rng.random_range(0..eg.params.0.len());
                let var = eg.params.0[p];
                let base = enc.params()[p].clone();
                let coord = rng.random_range(0..base.len());
                let analytic = eg.graph.grad(var).unwrap()[coord];
                let g = &mut eg.graph;
                let numeric = finite_difference_at(
                    |x| {
                        g.evaluate(&[(var, &Tensor::new(base.shape(), x.to_vec())?)])?;
                        Ok(g.scalar(eg.l_total))
                    },
                    base.data(),
                    1e-6,
                    &[coord],
                )
                .unwrap()[0];
                g.evaluate(&[(var, &base)]).unwrap();
                assert!(
                    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8,
                    "{mode:?} param {p}[{coord}]: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let mut adam = Adam::new(&cfg, &p);
        adam.step(&mut p, &[&[0.3, -4.0, 0.0]]);
        let d = p[0].data();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((d[1] - (-2.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_a_no_op() {
        let pool = toy_pool(4, 5);
        let cfg = micro_config(TrainMode::Guided, 0.1);
        let a = train(tiny_encoder(1), &pool, &cfg).unwrap();
        let b = train(tiny_encoder(1), &pool, &cfg).unwrap();
        assert_eq!(a.encoder.checkpoint_bytes(), b.encoder.checkpoint_bytes());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 2);
        assert_ne!(a.encoder.flat_params(), tiny_encoder(1).flat_params());

        let none = train(tiny_encoder(1), &pool, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(none.encoder.flat_params(), tiny_encoder(1).flat_params());
        assert!(none.trace.is_empty());
    }

    #[test]
    fn alpha_zero_guided_matches_baseline_bit_for_bit() {
        let pool = toy_pool(4, 6);
        let guided = train(tiny_encoder(2), &pool, &micro_config(TrainMode::Guided, 0.0)).unwrap();
        let baseline = train(tiny_encoder(2), &pool, &micro_config(TrainMode::Baseline, 0.4)).unwrap();
        assert_eq!(guided.encoder.flat_params(), baseline.encoder.flat_params());
    }

    #[test]
    fn evaluation_report_is_consistent() {
        let pool = toy_pool(6, 7);
        let cfg = micro_config(TrainMode::Guided, 0.1);
        let out = train(tiny_encoder(4), &pool, &cfg).unwrap();
        let test = toy_pool(5, 8);
        let r = evaluate(&out.encoder, &pool, &test, &cfg).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, test.len());
        let trace: usize = (0..2).map(|i| r.confusion[i][i]).sum();
        assert_eq!(r.accuracy, trace as f64 / total as f64);
        assert!((0.0..=1.0).contains(&r.macro_auc) && (0.0..=1.0).contains(&r.iou));
        assert_eq!(r.support_ids.len(), 1 * 2);

        let one_class: Vec<Sample> = test.iter().filter(|s| s.label == 0).cloned().collect();
        assert!(matches!(evaluate(&out.encoder, &pool, &one_class, &cfg), Err(Error::AbsentClass(1))));
    }

    #[test]
    fn trace_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        write_trace_csv(
            &p,
            &[EpochLoss {
                epoch: 0,
                l_proto: 1.0,
                l_exp: 0.5,
                l_total: 1.05,
            }],
        )
        .unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "epoch,l_proto,l_exp,l_total\n0,1,0.5,1.05\n");
    }
}
