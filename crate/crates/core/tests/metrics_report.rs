use promptseg::metrics::{evaluate_dataset, MetricConfig, MetricReport, AGGREGATE_ID};
use promptseg::{Mask, ProbabilityMap};

fn case() -> (ProbabilityMap, Mask) {
    let gt = Mask::new(2, 4, vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
    let pred = ProbabilityMap::new(2, 4, vec![0.9, 0.2, 0.8, 0.1, 0.7, 0.6, 0.3, 0.0]).unwrap();
    (pred, gt)
}

// tp = 3, fp = 1, fn = 1 after thresholding at 0.5.
#[test]
fn hand_counted_overlap_scores() {
    let (pred, gt) = case();
    let r = evaluate_dataset(&[("a".into(), pred)], &[gt], &MetricConfig::default()).unwrap();
    let s = &r.per_sample[0];
    assert!((s.dice - 0.75).abs() < 1e-12);
    assert!((s.iou - 0.6).abs() < 1e-12);
    assert!((s.sen - 0.75).abs() < 1e-12);
    assert!((s.f_beta - 0.75).abs() < 1e-12);
}

#[test]
fn csv_has_fixed_columns_and_mean_row() {
    let (pred, gt) = case();
    let perfect = ProbabilityMap::new(2, 4, gt.pixels().iter().map(|&v| v as f64).collect()).unwrap();
    let r = evaluate_dataset(
        &[("b".into(), perfect), ("a".into(), pred)],
        &[gt.clone(), gt],
        &MetricConfig::default(),
    )
    .unwrap();
    let csv = r.to_csv_string().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sample_id,dice,iou,sen,f_beta,f_beta_w,s_alpha,e_phi_mn");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("a,0.75,0.6,0.75,0.75,"), "{}", lines[1]);
    assert_eq!(lines[2], "b,1.0,1.0,1.0,1.0,1.0,1.0,1.0");
    assert!(lines[3].starts_with(&format!("{AGGREGATE_ID},0.875,0.8,0.875,0.875,")), "{}", lines[3]);

    let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn mismatched_counts_are_rejected() {
    let (pred, gt) = case();
    assert!(evaluate_dataset(&[("a".into(), pred)], &[gt.clone(), gt], &MetricConfig::default()).is_err());
}
