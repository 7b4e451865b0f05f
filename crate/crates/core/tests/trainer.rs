mod common;

use std::fs;

use common::{corpus, tiny_model};
use dae_core::checkpoint::Checkpoint;
use dae_core::model::{DaeModel, Head};
use dae_core::trainer::{
    evaluate_dice, finetune, pretrain, smoothed, FinetuneJob, PretrainJob, TrainConfig, FINETUNE_HEADER,
    PRETRAIN_HEADER,
};
use dae_core::DaeError;

fn pretrain_job(out: &std::path::Path, steps: u64) -> PretrainJob {
    PretrainJob {
        model: tiny_model(),
        disruption: Default::default(),
        loss: Default::default(),
        train: TrainConfig {
            total_iters: steps,
            warmup_iters: steps / 4,
            checkpoint_every: 5,
            ..TrainConfig::default()
        },
        out_dir: out.to_path_buf(),
        resume: None,
        stop_at: None,
    }
}

fn finetune_job(out: &std::path::Path, pretrained: Option<std::path::PathBuf>) -> FinetuneJob {
    FinetuneJob {
        model: tiny_model(),
        classes: 2,
        dice_smooth: 1e-5,
        train: TrainConfig {
            total_iters: 6,
            warmup_iters: 2,
            ..TrainConfig::default()
        },
        pretrained,
        val_every: 3,
        out_dir: out.to_path_buf(),
    }
}

#[test]
fn metrics_csv_has_header_plus_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = corpus(&dir.path().join("data"), 4, [12, 12, 12]);
    let out = pretrain(&train, &pretrain_job(&dir.path().join("run"), 12)).unwrap();
    let text = fs::read_to_string(&out.metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[0], PRETRAIN_HEADER);
    assert!(lines[1].starts_with("1,"));
    assert!(out.checkpoint.ends_with("final.daec"));
    for step in [5, 10, 12] {
        assert!(dir.path().join(format!("run/checkpoints/step_{step:06}.daec")).exists());
    }
    assert_eq!(Checkpoint::load(&out.checkpoint).unwrap().step, 12);
}

#[test]
fn pretraining_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = corpus(&dir.path().join("data"), 4, [12, 12, 12]);
    let full = pretrain(&train, &pretrain_job(&dir.path().join("a"), 12)).unwrap();
    let again = pretrain(&train, &pretrain_job(&dir.path().join("b"), 12)).unwrap();
    let bytes = |p: &std::path::Path| fs::read(p).unwrap();
    assert_eq!(bytes(&full.metrics), bytes(&again.metrics));
    assert_eq!(bytes(&full.checkpoint), bytes(&again.checkpoint));

    let mut first = pretrain_job(&dir.path().join("c"), 12);
    first.stop_at = Some(7);
    let part = pretrain(&train, &first).unwrap();
    assert_eq!(part.rows.len(), 7);
    let mut second = pretrain_job(&dir.path().join("c"), 12);
    second.resume = Some(part.checkpoint.clone());
    let resumed = pretrain(&train, &second).unwrap();
    assert_eq!(resumed.rows.first().unwrap().step, 8);
    assert_eq!(bytes(&full.metrics), bytes(&resumed.metrics));
    assert_eq!(bytes(&full.checkpoint), bytes(&resumed.checkpoint));
}

#[test]
fn resume_with_different_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = corpus(&dir.path().join("data"), 3, [12, 12, 12]);
    let mut job = pretrain_job(&dir.path().join("a"), 4);
    let out = pretrain(&train, &job).unwrap();
    job.model.embed_dim = 12;
    job.resume = Some(out.checkpoint);
    job.out_dir = dir.path().join("b");
    assert!(pretrain(&train, &job).is_err());
}

#[test]
fn contrastive_training_needs_two_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = corpus(&dir.path().join("data"), 3, [12, 12, 12]);
    let mut job = pretrain_job(&dir.path().join("a"), 4);
    job.train.batch_size = 1;
    assert!(matches!(pretrain(&train, &job), Err(DaeError::Config(_))));
    job.loss.cmcl_alpha = 0.0;
    assert!(pretrain(&train, &job).is_ok());
}

#[test]
fn crop_larger_than_volumes_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = corpus(&dir.path().join("data"), 3, [8, 8, 8]);
    let mut job = pretrain_job(&dir.path().join("a"), 4);
    job.model.input = [16, 16, 16];
    assert!(pretrain(&train, &job).is_err());
}

#[test]
fn finetune_writes_metrics_and_dice_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = corpus(&dir.path().join("data"), 4, [12, 12, 12]);
    let pre = pretrain(&train, &pretrain_job(&dir.path().join("pre"), 4)).unwrap();
    let out = finetune(&train, &val, &finetune_job(&dir.path().join("ft"), Some(pre.checkpoint))).unwrap();
    let text = fs::read_to_string(&out.metrics).unwrap();
    assert_eq!(text.lines().next(), Some(FINETUNE_HEADER));
    assert_eq!(text.lines().count(), 7);
    let validated: Vec<u64> = out.rows.iter().filter(|r| r.val_dice.is_some()).map(|r| r.step).collect();
    assert_eq!(validated, [3, 6]);
    assert!((0.0..=1.0).contains(&out.final_val_dice));
    assert_eq!(out.per_volume.len(), val.samples.len());
    assert!(dir.path().join("ft/val_dice.csv").exists());
}

#[test]
fn scratch_and_pretrained_finetunes_share_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = corpus(&dir.path().join("data"), 3, [12, 12, 12]);
    let pre = pretrain(&train, &pretrain_job(&dir.path().join("pre"), 3)).unwrap();
    let a = finetune(&train, &val, &finetune_job(&dir.path().join("a"), Some(pre.checkpoint))).unwrap();
    let b = finetune(&train, &val, &finetune_job(&dir.path().join("b"), None)).unwrap();
    assert_eq!(a.model.architecture_hash(), b.model.architecture_hash());
    assert_eq!(a.model.param_count(), b.model.param_count());
}

#[test]
fn finetune_without_labels_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = corpus(&dir.path().join("data"), 3, [12, 12, 12]);
    let mut unlabeled = train.clone();
    for s in &mut unlabeled.samples {
        s.labels = None;
    }
    let err = finetune(&unlabeled, &val, &finetune_job(&dir.path().join("a"), None)).unwrap_err();
    assert!(matches!(err, DaeError::Data(_)), "{err}");
}

#[test]
fn all_background_prediction_scores_background_only() {
    let dir = tempfile::tempdir().unwrap();
    let (_, val) = corpus(&dir.path().join("data"), 3, [8, 8, 8]);
    let mut model = DaeModel::<f32>::new(tiny_model(), Head::Segmentation { classes: 2 }, 0).unwrap();
    // A large background bias makes every voxel predict class 0.
    let bias = model.params().get("seg_head.bias").unwrap().clone();
    let p = bias.len() / 2;
    let biased = dae_tensor::Tensor::from_fn(bias.shape(), |i| if i % 2 == 0 { 100.0 } else { 0.0 });
    assert_eq!(biased.len(), 2 * p);
    model.params_mut().insert("seg_head.bias", biased);
    let scores = evaluate_dice(&model, &val).unwrap();
    // Background is present in both, foreground only in the truth → mean 0.5·(bg Dice).
    for (path, d) in scores {
        assert!(d <= 0.5 + 1e-12, "{}: {d}", path.display());
    }
}

#[test]
fn smoothing_is_a_trailing_mean() {
    let s = smoothed(&[4.0, 2.0, 6.0, 0.0], 2);
    assert_eq!(s, [4.0, 3.0, 4.0, 3.0]);
}

