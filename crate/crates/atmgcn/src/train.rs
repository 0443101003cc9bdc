//! Training: focal loss, the AdamW epoch loop with exponential learning-rate
//! decay, leave-one-subject-out fold construction, and evaluation reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentOptions};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{
    argmax, forward_model, init_params, ModelConfig, ModelParams, Variant,
};
use crate::motion::FrameSequence;
use crate::optim::{lr_schedule, AdamW};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Focal loss of one prediction:
/// `-alpha * (1 - p_label)^gamma * log(p_label)`,
/// with both `p_label` and `1 - p_label` floored at 1e-12.
///
/// `alpha` is the weight of the label's class. With `gamma = 0` and
/// `alpha = 1` this is exactly cross-entropy.
pub fn focal_loss(tape: &mut Tape, probs: Var, label: usize, gamma: f64, alpha: f64) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != 1 {
        return Err(Error::Usage(format!(
            "focal loss expects a 1×c probability row, got {shape:?}"
        )));
    }
    let c = shape[1];
    if label >= c {
        return Err(Error::Input(format!(
            "label {label} outside [0, {c})"
        )));
    }
    if gamma < 0.0 {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let floor_at = |tape: &mut Tape, x: Var, floor: f64| -> Result<Var> {
        // max(x, floor) = relu(x - floor) + floor
        let f = tape.leaf(Tensor::full(&[1, 1], floor));
        let shifted = tape.sub(x, f)?;
        let pos = tape.relu(shifted)?;
        tape.add(pos, f)
    };

    let p = tape.slice(probs, 1, label, 1)?;
    let p = floor_at(tape, p, 1e-12)?;
    let one = tape.leaf(Tensor::full(&[1, 1], 1.0));
    let q = tape.sub(one, p)?;
    let q = floor_at(tape, q, 1e-12)?;
    // (1-p)^gamma = exp(gamma * log(1-p)); exact 1 at gamma = 0
    let log_q = tape.log(q)?;
    let pow = tape.scale(log_q, gamma)?;
    let factor = tape.exp(pow)?;
    let log_p = tape.log(p)?;
    let prod = tape.mul(factor, log_p)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -alpha)
}

/// How per-class loss weights are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// All classes weigh 1.
    Uniform,
    /// Inverse class frequency over the training split, normalized to mean 1.
    InverseFrequency,
    /// Explicit per-class weights.
    Explicit(Vec<f64>),
}

/// Everything the epoch loop needs besides the model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub weight_decay: f64,
    pub alpha: AlphaMode,
    pub seed: u64,
    pub variant: Variant,
    pub augment: AugmentOptions,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::Config("lr decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal gamma must be >= 0".into()));
        }
        if let AlphaMode::Explicit(w) = &self.alpha {
            if w.iter().any(|v| *v < 0.0) {
                return Err(Error::Config("alpha weights must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// One training epoch in the history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub uf1: f64,
    pub uar: f64,
}

/// Trained parameters plus the per-epoch history.
pub struct TrainedModel {
    pub params: ModelParams<Tensor>,
    pub history: Vec<EpochRecord>,
}

fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-class loss weights for a training split.
fn alpha_weights(mode: &AlphaMode, labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    match mode {
        AlphaMode::Uniform => Ok(vec![1.0; n_classes]),
        AlphaMode::Explicit(w) => {
            if w.len() != n_classes {
                return Err(Error::Config(format!(
                    "{} alpha weights for {n_classes} classes",
                    w.len()
                )));
            }
            Ok(w.clone())
        }
        AlphaMode::InverseFrequency => {
            let mut counts = vec![0usize; n_classes];
            for &l in labels {
                counts[l] += 1;
            }
            let inv: Vec<Option<f64>> = counts
                .iter()
                .map(|&c| (c > 0).then(|| 1.0 / c as f64))
                .collect();
            let present: Vec<f64> = inv.iter().flatten().copied().collect();
            let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
            Ok(inv
                .into_iter()
                .map(|v| v.map_or(1.0, |x| x / mean))
                .collect())
        }
    }
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    predicted: usize,
    label: usize,
}

fn run_sample(
    clip: &FrameSequence,
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    settings: &TrainSettings,
    alpha: &[f64],
    sample_seed: u64,
) -> Result<SampleResult> {
    let augmented;
    let input = if settings.augment.is_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        augmented = augment(clip, &mut rng, &settings.augment)?;
        &augmented
    } else {
        clip
    };
    let mut tape = Tape::recording();
    let bound = params.bind(&mut tape);
    let pass = forward_model(&mut tape, input, &bound, cfg, settings.variant, false)?;
    let label = input.label();
    let loss = focal_loss(
        &mut tape,
        pass.probs,
        label,
        settings.focal_gamma,
        alpha[label],
    )?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::Train(format!("non-finite loss {loss_value}")));
    }
    let predicted = argmax(tape.value(pass.probs).data());
    let grads = tape.backward(loss)?;
    let grad_tensors: Vec<Tensor> = bound.leaves().iter().map(|&&v| grads.wrt(v)).collect();
    Ok(SampleResult {
        loss: loss_value,
        grads: grad_tensors,
        predicted,
        label,
    })
}

/// Train one model on the clips selected by `train_idx`.
///
/// Deterministic for a fixed seed: shuffling, augmentation draws and
/// parameter init all derive from it, and batch gradients are reduced in
/// sample order regardless of thread scheduling.
pub fn train_model(
    clips: &[FrameSequence],
    train_idx: &[usize],
    cfg: &ModelConfig,
    settings: &TrainSettings,
) -> Result<TrainedModel> {
    cfg.validate()?;
    settings.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Input("empty training split".into()));
    }
    for &i in train_idx {
        let label = clips[i].label();
        if label >= cfg.n_classes {
            return Err(Error::Input(format!(
                "clip {i} has label {label} outside [0, {})",
                cfg.n_classes
            )));
        }
    }

    let labels: Vec<usize> = train_idx.iter().map(|&i| clips[i].label()).collect();
    let alpha = alpha_weights(&settings.alpha, &labels, cfg.n_classes)?;

    let mut params = init_params(cfg, &mut ChaCha8Rng::seed_from_u64(mix_seed(settings.seed, 1)));
    let names: Vec<String> = params.named_leaves().into_iter().map(|(n, _)| n).collect();
    let mut optimizer = AdamW::with_decay(settings.weight_decay);
    let mut history = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let lr = lr_schedule(epoch, settings.lr0, settings.lr_decay);
        let mut order = train_idx.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            settings.seed,
            2 + epoch as u64,
        )));

        let mut epoch_loss = 0.0;
        let mut predictions = Vec::with_capacity(order.len());
        let mut epoch_labels = Vec::with_capacity(order.len());

        for (batch_no, batch) in order.chunks(settings.batch_size).enumerate() {
            let base = batch_no * settings.batch_size;
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &clip_idx)| {
                    let sample_seed = mix_seed(
                        settings.seed,
                        0x1000_0000 + (epoch as u64) * 1_000_003 + (base + slot) as u64,
                    );
                    run_sample(&clips[clip_idx], &params, cfg, settings, &alpha, sample_seed)
                })
                .collect();

            // fixed-order reduction
            let mut summed: Option<Vec<Tensor>> = None;
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let r = r?;
                epoch_loss += r.loss;
                predictions.push(r.predicted);
                epoch_labels.push(r.label);
                match &mut summed {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(r.grads.iter()) {
                            for (av, gv) in a.data_mut().iter_mut().zip(g.data().iter()) {
                                *av += gv * scale;
                            }
                        }
                    }
                    None => {
                        let mut grads = r.grads;
                        for g in &mut grads {
                            for v in g.data_mut() {
                                *v *= scale;
                            }
                        }
                        summed = Some(grads);
                    }
                }
            }
            let grads = summed.expect("non-empty batch");
            let mut entries: Vec<(&str, &mut Tensor)> = names
                .iter()
                .map(|n| n.as_str())
                .zip(params.leaves_mut())
                .collect();
            optimizer.step(&mut entries, &grads, lr)?;
        }

        let m = compute_metrics(&predictions, &epoch_labels, cfg.n_classes)?;
        history.push(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss / order.len() as f64,
            uf1: m.uf1,
            uar: m.uar,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} uf1 {:.3} uar {:.3}",
            history[epoch].loss,
            m.uf1,
            m.uar
        );
    }

    Ok(TrainedModel { params, history })
}

/// Tape-free predictions over the selected clips.
pub fn evaluate(
    clips: &[FrameSequence],
    idx: &[usize],
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    variant: Variant,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let preds: Vec<Result<usize>> = idx
        .par_iter()
        .map(|&i| {
            crate::model::predict(&clips[i], params, cfg, variant, false).map(|p| p.predicted)
        })
        .collect();
    let mut predictions = Vec::with_capacity(idx.len());
    for p in preds {
        predictions.push(p?);
    }
    let labels = idx.iter().map(|&i| clips[i].label()).collect();
    Ok((predictions, labels))
}

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub subject_id: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject, ordered by subject id; the fold's test set
/// is exactly that subject's clips.
pub fn loso_split(clips: &[FrameSequence]) -> Result<Vec<Fold>> {
    let mut subjects: Vec<String> = clips.iter().map(|c| c.subject_id().to_string()).collect();
    subjects.sort();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::Protocol(format!(
            "LOSO needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|subject| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..clips.len()).partition(|&i| clips[i].subject_id() == subject);
            Fold {
                subject_id: subject,
                train,
                test,
            }
        })
        .collect())
}

/// Mean-over-folds aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub uf1: f64,
    pub uar: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject_id: String,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
}

/// Full LOSO result: per-fold reports plus both aggregation conventions
/// (unweighted mean over subjects, and metrics over pooled counts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LosoReport {
    pub variant: String,
    pub folds: Vec<FoldReport>,
    pub subject_mean: AggregateMetrics,
    pub pooled: Metrics,
}

type FoldOutcome = (FoldReport, Vec<usize>, Vec<usize>);

/// Run the LOSO protocol: one model trained from scratch per subject.
/// Folds are independent and run in parallel; per-fold seeds derive from the
/// base seed and the fold's position in subject order.
pub fn run_loso(
    clips: &[FrameSequence],
    cfg: &ModelConfig,
    settings: &TrainSettings,
) -> Result<LosoReport> {
    let folds = loso_split(clips)?;
    let reports: Vec<Result<FoldOutcome>> = folds
        .par_iter()
        .enumerate()
        .map(|(fold_idx, fold)| {
            let mut fold_settings = settings.clone();
            fold_settings.seed = mix_seed(settings.seed, 0xF01D + fold_idx as u64);
            let trained = train_model(clips, &fold.train, cfg, &fold_settings)?;
            let (preds, labels) = evaluate(clips, &fold.test, &trained.params, cfg, settings.variant)?;
            let metrics = compute_metrics(&preds, &labels, cfg.n_classes)?;
            Ok((
                FoldReport {
                    subject_id: fold.subject_id.clone(),
                    n_train: fold.train.len(),
                    n_test: fold.test.len(),
                    metrics,
                    history: trained.history,
                },
                preds,
                labels,
            ))
        })
        .collect();

    let mut fold_reports = Vec::with_capacity(folds.len());
    let mut all_preds = Vec::new();
    let mut all_labels = Vec::new();
    for r in reports {
        let (report, preds, labels) = r?;
        fold_reports.push(report);
        all_preds.extend(preds);
        all_labels.extend(labels);
    }

    let n = fold_reports.len() as f64;
    let subject_mean = AggregateMetrics {
        uf1: fold_reports.iter().map(|f| f.metrics.uf1).sum::<f64>() / n,
        uar: fold_reports.iter().map(|f| f.metrics.uar).sum::<f64>() / n,
        acc: fold_reports.iter().map(|f| f.metrics.acc).sum::<f64>() / n,
    };
    let pooled = compute_metrics(&all_preds, &all_labels, cfg.n_classes)?;

    Ok(LosoReport {
        variant: settings.variant.name().to_string(),
        folds: fold_reports,
        subject_mean,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::EncoderConfig;
    use rand::Rng;

    fn probs_on_tape(tape: &mut Tape, probs: &[f64]) -> Var {
        tape.leaf(Tensor::from_vec(vec![1, probs.len()], probs.to_vec()).unwrap())
    }

    #[test]
    fn focal_zero_for_confident_correct_prediction() {
        let mut tape = Tape::recording();
        let p = probs_on_tape(&mut tape, &[0.0, 1.0, 0.0]);
        let loss = focal_loss(&mut tape, p, 1, 2.0, 1.0).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut tape = Tape::recording();
        let p = probs_on_tape(&mut tape, &[0.5, 0.5]);
        let loss = focal_loss(&mut tape, p, 0, 0.0, 1.0).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);

        // random simplex points
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let label = rng.gen_range(0..4);
            let mut tape = Tape::recording();
            let p = probs_on_tape(&mut tape, &probs);
            let loss = focal_loss(&mut tape, p, label, 0.0, 1.0).unwrap();
            let ce = -probs[label].ln();
            assert!((tape.value(loss).item().unwrap() - ce).abs() <= 1e-12);
        }
    }

    #[test]
    fn focal_anchor_gamma_two() {
        let mut tape = Tape::recording();
        let p = probs_on_tape(&mut tape, &[0.9, 0.05, 0.05]);
        let loss = focal_loss(&mut tape, p, 0, 2.0, 1.0).unwrap();
        let expect = 0.01 * -(0.9f64.ln());
        let got = tape.value(loss).item().unwrap();
        assert!(
            (got - expect).abs() / expect < 1e-4,
            "focal(0.9, gamma 2) = {got}, want ~{expect}"
        );
        assert!((got - 0.0010536).abs() < 5e-8);
    }

    #[test]
    fn focal_rejects_out_of_range_label() {
        let mut tape = Tape::recording();
        let p = probs_on_tape(&mut tape, &[0.5, 0.5]);
        assert!(matches!(
            focal_loss(&mut tape, p, 2, 2.0, 1.0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn focal_gradient_checks() {
        use crate::gradcheck::check_gradients;
        let logits = Tensor::from_vec(vec![1, 3], vec![0.3, -0.8, 1.1]).unwrap();
        let err = check_gradients(
            |tape, xs| {
                let probs = tape.softmax_lastdim(xs[0])?;
                focal_loss(tape, probs, 2, 2.0, 1.3)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "focal gradcheck error {err}");
    }

    fn clip_with_subject(subject: &str, label: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..4)
            .map(|_| {
                let data: Vec<f64> = (0..16)
                    .map(|_| rng.gen_range(0u32..256) as f64 / 256.0)
                    .collect();
                Tensor::from_vec(vec![1, 4, 4], data).unwrap()
            })
            .collect();
        FrameSequence::new(frames, 3, subject, label).unwrap()
    }

    #[test]
    fn loso_fold_sizes() {
        let mut clips = Vec::new();
        for i in 0..4 {
            clips.push(clip_with_subject("A", i % 2, i as u64));
        }
        for i in 0..6 {
            clips.push(clip_with_subject("B", i % 2, 100 + i as u64));
        }
        let folds = loso_split(&clips).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].subject_id, "A");
        assert_eq!(folds[0].test.len(), 4);
        assert_eq!(folds[0].train.len(), 6);
        assert_eq!(folds[1].test.len(), 6);
        assert_eq!(folds[1].train.len(), 4);
    }

    #[test]
    fn loso_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..20 {
            let n = rng.gen_range(4..20);
            let subjects = ["a", "b", "c", "d"];
            let clips: Vec<FrameSequence> = (0..n)
                .map(|i| {
                    clip_with_subject(subjects[rng.gen_range(0..4) % 4], i % 2, i as u64)
                })
                .collect();
            let distinct: std::collections::BTreeSet<&str> =
                clips.iter().map(|c| c.subject_id()).collect();
            if distinct.len() < 2 {
                continue;
            }
            let folds = loso_split(&clips).unwrap();
            assert_eq!(folds.len(), distinct.len());
            let mut seen = vec![0usize; n];
            for f in &folds {
                for &t in &f.test {
                    seen[t] += 1;
                }
                // train/test disjoint
                for &t in &f.test {
                    assert!(!f.train.contains(&t));
                }
                assert_eq!(f.train.len() + f.test.len(), n);
            }
            assert!(seen.iter().all(|&c| c == 1), "each clip in exactly one test fold");
        }
    }

    #[test]
    fn loso_rejects_single_subject() {
        let clips = vec![
            clip_with_subject("only", 0, 1),
            clip_with_subject("only", 1, 2),
        ];
        assert!(matches!(loso_split(&clips), Err(Error::Protocol(_))));
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                frame_h: 4,
                frame_w: 4,
                patch_size: 2,
                feature_dim: 4,
                n_heads: 2,
                n_blocks: 1,
                mlp_hidden: 8,
            },
            seq_len: 4,
            n_gcn_layers: 1,
            n_classes: 2,
            window: 1,
            tau: 10.0,
            lambda_local: 1.0,
            lambda_global: 2.0,
            forgetting: vec![0.5],
            residual: true,
        }
    }

    /// Trivially separable in-memory clips: label 0 brightens the top-left
    /// quadrant toward the apex, label 1 the bottom-right.
    fn separable_clip(subject: &str, label: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..16)
            .map(|_| rng.gen_range(96u32..160) as f64 / 256.0)
            .collect();
        let frames = (0..4)
            .map(|t| {
                let strength = 0.3 * t as f64 / 3.0;
                let mut data = base.clone();
                let idx: &[usize] = if label == 0 {
                    &[0, 1, 4, 5]
                } else {
                    &[10, 11, 14, 15]
                };
                for &i in idx {
                    data[i] = (data[i] + strength).min(1.0);
                }
                Tensor::from_vec(vec![1, 4, 4], data).unwrap()
            })
            .collect();
        FrameSequence::new(frames, 4, subject, label).unwrap()
    }

    fn tiny_settings() -> TrainSettings {
        TrainSettings {
            epochs: 3,
            lr0: 1e-3,
            lr_decay: crate::optim::default_lr_decay(),
            batch_size: 2,
            focal_gamma: 2.0,
            weight_decay: 0.01,
            alpha: AlphaMode::InverseFrequency,
            seed: 7,
            variant: Variant::Full,
            augment: AugmentOptions::disabled(),
        }
    }

    fn tiny_dataset() -> Vec<FrameSequence> {
        let mut clips = Vec::new();
        for s in 0..3 {
            for k in 0..4 {
                clips.push(separable_clip(
                    &format!("subj{s}"),
                    k % 2,
                    (s * 100 + k) as u64,
                ));
            }
        }
        clips
    }

    #[test]
    fn training_is_deterministic() {
        let clips = tiny_dataset();
        let cfg = tiny_model_cfg();
        let settings = tiny_settings();
        let idx: Vec<usize> = (0..clips.len()).collect();
        let a = train_model(&clips, &idx, &cfg, &settings).unwrap();
        let b = train_model(&clips, &idx, &cfg, &settings).unwrap();
        let ja = serde_json::to_string(&a.history).unwrap();
        let jb = serde_json::to_string(&b.history).unwrap();
        assert_eq!(ja, jb);
        for ((_, x), (_, y)) in a.params.named_leaves().iter().zip(b.params.named_leaves()) {
            for (u, v) in x.data().iter().zip(y.data().iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let clips = tiny_dataset();
        let cfg = tiny_model_cfg();
        let mut settings = tiny_settings();
        settings.epochs = 10;
        let idx: Vec<usize> = (0..clips.len()).collect();
        let trained = train_model(&clips, &idx, &cfg, &settings).unwrap();
        let first = trained.history.first().unwrap().loss;
        let last = trained.history.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn loso_emits_one_fold_per_subject() {
        let clips = tiny_dataset();
        let cfg = tiny_model_cfg();
        let settings = tiny_settings();
        let report = run_loso(&clips, &cfg, &settings).unwrap();
        assert_eq!(report.folds.len(), 3);
        for f in &report.folds {
            assert_eq!(f.n_test, 4);
            assert_eq!(f.n_train, 8);
            assert_eq!(f.history.len(), settings.epochs);
        }
        assert!((0.0..=1.0).contains(&report.subject_mean.uar));
    }

    #[test]
    fn alpha_inverse_frequency_normalizes_to_mean_one() {
        let labels = vec![0, 0, 0, 1];
        let w = alpha_weights(&AlphaMode::InverseFrequency, &labels, 2).unwrap();
        assert!((w.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
        assert!(w[1] > w[0]);
        // absent class gets weight 1
        let w3 = alpha_weights(&AlphaMode::InverseFrequency, &labels, 3).unwrap();
        assert_eq!(w3[2], 1.0);
    }
}
