use std::path::{Path, PathBuf};

use promptseg::data::{synthetic, DatasetName, DatasetSpec, Split};
use promptseg::metrics::MetricConfig;
use promptseg::train::{
    evaluate, infer, load_generator, train_surrogate, InferOptions, FINAL_CHECKPOINT,
};
use promptseg::{
    fit, train_step, GeneratorConfig, SegmenterConfig, SurrogateConfig, SurrogateDecoder,
    TrainConfig, Trainer,
};

fn tiny_config(dir: &Path) -> TrainConfig {
    let mut c = TrainConfig::generator_recipe(
        DatasetSpec::synthetic_blobs(4, 2),
        SegmenterConfig::stub(),
        GeneratorConfig::tiny_test().with_seed(2),
        dir,
    );
    c.batch_size = 2;
    c.max_epochs = 1;
    c.val_fraction = 0.25;
    c.augment = false;
    c
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let out = fit(&tiny_config(dir)).unwrap();
    assert_eq!(out.final_checkpoint, dir.join(FINAL_CHECKPOINT));
    out.final_checkpoint
}

fn write_blob_png(path: &Path, seed: u64) {
    let s = synthetic::blob_sample(seed, 0, 48).unwrap();
    let img = image::RgbImage::from_fn(48, 48, |x, y| {
        let px = |c| (s.image.get(c, y as usize, x as usize) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).unwrap();
}

fn write_glas_test(root: &Path, n: u64) {
    let split = root.join("test");
    std::fs::create_dir_all(split.join("images")).unwrap();
    std::fs::create_dir_all(split.join("masks")).unwrap();
    for i in 0..n {
        write_blob_png(&split.join("images").join(format!("testA_{i}.png")), i);
        let s = synthetic::blob_sample(i, 0, 48).unwrap();
        let m = image::GrayImage::from_fn(48, 48, |x, y| {
            image::Luma([s.mask.pixels()[y as usize * 48 + x as usize] * 255])
        });
        m.save(split.join("masks").join(format!("testA_{i}_anno.png"))).unwrap();
    }
}

#[test]
fn loss_falls_over_twenty_steps_on_a_fixed_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.learning_rate = 1e-3;
    let batch = synthetic::blobs(2, 5, 64).unwrap();
    let mut trainer = Trainer::new(&config).unwrap();
    let losses: Vec<f64> = (0..20)
        .map(|_| train_step(&mut trainer, &batch).unwrap().total)
        .collect();
    let head = losses[..3].iter().sum::<f64>() / 3.0;
    let tail = losses[17..].iter().sum::<f64>() / 3.0;
    assert!(tail < head, "{losses:?}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn reloaded_checkpoint_gives_bitwise_equal_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(&dir.path().join("run"));
    let root = dir.path().join("glas");
    write_glas_test(&root, 3);
    let spec = DatasetSpec::new(DatasetName::Glas, &root, Split::Test);
    let cfg = MetricConfig::default();
    let a = evaluate(&ckpt, &spec, &SegmenterConfig::stub(), &cfg).unwrap();
    let b = evaluate(&ckpt, &spec, &SegmenterConfig::stub(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_sample.len(), 3);
    for row in a.per_sample.iter().chain([&a.aggregate]) {
        for v in [row.dice, row.iou, row.sen, row.f_beta, row.f_beta_w, row.s_alpha, row.e_phi_mn] {
            assert!((0.0..=1.0).contains(&v), "{row:?}");
        }
    }

    let (g1, _) = load_generator(&ckpt).unwrap();
    let (g2, _) = load_generator(&ckpt).unwrap();
    let s1 = promptseg::snapshot_parameters(&g1).unwrap();
    let s2 = promptseg::snapshot_parameters(&g2).unwrap();
    assert_eq!(s1.global_checksum, s2.global_checksum);
}

#[test]
fn infer_writes_masks_and_collects_failures() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(&dir.path().join("run"));
    let good = dir.path().join("case.png");
    write_blob_png(&good, 4);
    let bad = dir.path().join("broken.jpg");
    std::fs::write(&bad, b"\xff\xd8 not really").unwrap();
    let out_dir = dir.path().join("out");
    let options = InferOptions {
        out_dir: out_dir.clone(),
        save_probabilities: true,
        resize: Some((64, 64)),
        threshold: None,
    };

    let empty = infer(&ckpt, &[], &SegmenterConfig::stub(), &options).unwrap();
    assert!(empty.written.is_empty() && empty.failures.is_empty());
    assert!(!out_dir.exists());

    let summary = infer(&ckpt, &[good, bad.clone()], &SegmenterConfig::stub(), &options).unwrap();
    assert_eq!(summary.written, vec![out_dir.join("case.png"), out_dir.join("case_prob.png")]);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].0, bad);
    let mask = image::open(out_dir.join("case.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (48, 48));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}

#[test]
fn surrogate_training_keeps_generator_frozen_and_learns() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.max_epochs = 5;
    config.learning_rate = 1e-3;
    let g = promptseg::PromptGenerator::build(&config.generator).unwrap();
    let before = promptseg::snapshot_parameters(&g).unwrap();
    let samples = synthetic::blobs(4, 6, 64).unwrap();
    let (train, val) = (samples[..3].to_vec(), samples[3..].to_vec());
    let h = SurrogateDecoder::new(&SurrogateConfig::default()).unwrap();
    let (_, out) = train_surrogate(h, &g, &train, &val, &config).unwrap();
    assert_eq!(promptseg::snapshot_parameters(&g).unwrap().global_checksum, before.global_checksum);
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}
