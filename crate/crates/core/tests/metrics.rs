use bridgeseg::metrics::{
    accuracy, confusion, evaluate_dataset, f1, format_csv, format_report, jaccard, pixel_accuracy,
    sensitivity, specificity, ConfusionMatrix, IndexMask, MetricSet, ReportRow,
};
use bridgeseg::Error;
use proptest::prelude::*;

fn mask(h: usize, w: usize, data: &[u8]) -> IndexMask {
    IndexMask::new(h, w, data.to_vec()).unwrap()
}

fn cm(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionMatrix {
    ConfusionMatrix { tp, fp, tn, fn_ }
}

#[test]
fn hand_built_confusion_counts() {
    // 8 pixels, positive class 2: TP at 0,1; FP at 2; TN at 3..7; FN at 7.
    let truth = mask(2, 4, &[2, 2, 0, 1, 0, 1, 0, 2]);
    let pred = mask(2, 4, &[2, 2, 2, 1, 0, 0, 1, 0]);
    assert_eq!(confusion(&pred, &truth, 2, 3).unwrap(), cm(2, 1, 4, 1));
}

#[test]
fn perfect_and_vacuous_confusion() {
    let m = mask(2, 3, &[0, 1, 2, 2, 1, 0]);
    let c = confusion(&m, &m, 2, 3).unwrap();
    assert_eq!((c.fp, c.fn_), (0, 0));
    let none = mask(2, 3, &[0, 1, 1, 0, 1, 0]);
    assert_eq!(confusion(&none, &none, 2, 3).unwrap(), cm(0, 0, 6, 0));
}

#[test]
fn confusion_errors() {
    let a = mask(2, 2, &[0; 4]);
    let b = mask(1, 4, &[0; 4]);
    assert!(matches!(confusion(&a, &b, 1, 3), Err(Error::Shape { .. })));
    let bad = mask(2, 2, &[0, 5, 0, 0]);
    assert!(matches!(confusion(&bad, &a, 1, 3), Err(Error::Data(_))));
    assert!(confusion(&a, &a, 3, 3).is_err());
}

#[test]
fn five_metrics_on_known_counts() {
    let c = cm(2, 1, 4, 1);
    assert_eq!(accuracy(&c), 6.0 / 8.0);
    assert_eq!(sensitivity(&c), 2.0 / 3.0);
    assert_eq!(specificity(&c), 4.0 / 5.0);
    assert_eq!(f1(&c), 4.0 / 6.0);
    assert_eq!(jaccard(&c), 2.0 / 4.0);
    assert!((sensitivity(&c) - 0.6667).abs() < 5e-5 && (f1(&c) - 0.6667).abs() < 5e-5);
}

#[test]
fn degenerate_denominators_are_one_and_flagged() {
    let m = MetricSet::from_confusion(&cm(0, 0, 9, 0));
    assert_eq!(m.values(), [1.0; 5]);
    assert!(m.degenerate);
    let m = MetricSet::from_confusion(&cm(3, 0, 5, 0));
    assert_eq!(m.values(), [1.0; 5]);
    assert!(!m.degenerate);
}

#[test]
fn pooling_sums_counts() {
    let t1 = mask(1, 4, &[2, 2, 0, 0]);
    let p1 = mask(1, 4, &[2, 0, 2, 0]);
    let t2 = mask(1, 4, &[2, 0, 0, 0]);
    let p2 = mask(1, 4, &[2, 2, 2, 0]);
    let d = evaluate_dataset(&[p1.clone(), p2.clone()], &[t1.clone(), t2.clone()], 2, 3).unwrap();
    // Image 1: TP1 FP1 TN1 FN1. Image 2: TP1 FP2 TN1 FN0. Sum: 2, 3, 2, 1.
    assert_eq!(d.pooled_confusion, cm(2, 3, 2, 1));
    assert_eq!(d.pooled, MetricSet::from_confusion(&cm(2, 3, 2, 1)));
    assert_eq!(d.per_image.len(), 2);
    let mean_f1 = (f1(&cm(1, 1, 1, 1)) + f1(&cm(1, 2, 1, 0))) / 2.0;
    assert!((d.mean_per_image.f1 - mean_f1).abs() < 1e-15);

    let one = evaluate_dataset(&[p1], &[t1], 2, 3).unwrap();
    assert_eq!(one.pooled, one.per_image[0]);
    assert_eq!(one.pooled, one.mean_per_image);
}

#[test]
fn dataset_errors() {
    assert!(matches!(evaluate_dataset(&[], &[], 2, 3), Err(Error::Data(_))));
    let m = mask(1, 1, &[0]);
    assert!(evaluate_dataset(&[m.clone()], &[], 2, 3).is_err());
    assert!(pixel_accuracy(&[m.clone(), m.clone()], &[m]).is_err());
}

#[test]
fn pixel_accuracy_counts_all_classes() {
    let t = mask(1, 4, &[0, 1, 2, 1]);
    let p = mask(1, 4, &[0, 2, 2, 1]);
    assert_eq!(pixel_accuracy(&[p], &[t]).unwrap(), 0.75);
}

fn paper_rows() -> Vec<ReportRow> {
    [
        ("U-Net", [0.869, 0.910, 0.907, 0.912, 0.899]),
        ("Dual-Attention U-Net", [0.924, 0.913, 0.984, 0.970, 0.970]),
        ("ViT", [0.947, 0.936, 0.988, 0.981, 0.979]),
        ("Proposed Method", [0.951, 0.942, 0.989, 0.986, 0.981]),
    ]
    .into_iter()
    .map(|(n, v)| ReportRow::new(n, &MetricSet::new(v[0], v[1], v[2], v[3], v[4])))
    .collect()
}

#[test]
fn report_table_layout() {
    let text = format_report(&paper_rows()).unwrap();
    let want = "\
Method                   F1     SE     SP     AC     JS
U-Net                 0.869  0.910  0.907  0.912  0.899
Dual-Attention U-Net  0.924  0.913  0.984  0.970  0.970
ViT                   0.947  0.936  0.988  0.981  0.979
Proposed Method       0.951  0.942  0.989  0.986  0.981
";
    assert_eq!(text, want);
}

#[test]
fn report_csv_layout() {
    let csv = format_csv(&paper_rows()[3..]).unwrap();
    assert_eq!(csv, "name,f1,se,sp,ac,js\nProposed Method,0.951,0.942,0.989,0.986,0.981\n");
    let ones = format_csv(&[ReportRow::new("a,b", &MetricSet::new(1.0, 1.0, 1.0, 1.0, 1.0))]).unwrap();
    assert_eq!(ones.lines().nth(1).unwrap(), "\"a,b\",1.000,1.000,1.000,1.000,1.000");
}

#[test]
fn missing_value_is_a_formatting_error() {
    let mut row = paper_rows().remove(0);
    row.values[2] = None;
    let err = format_report(&[row.clone()]).unwrap_err();
    assert!(err.to_string().contains("SP"), "{err}");
    assert!(format_csv(&[row]).is_err());
}

fn arb_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..3, 36), prop::collection::vec(0u8..3, 36))
}

proptest! {
    #[test]
    fn metrics_in_unit_interval_and_identity_holds((p, t) in arb_pair()) {
        let c = confusion(&mask(6, 6, &p), &mask(6, 6, &t), 2, 3).unwrap();
        let m = MetricSet::from_confusion(&c);
        for v in m.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if c.tp + c.fp + c.fn_ > 0 {
            prop_assert!((m.f1 - 2.0 * m.js / (1.0 + m.js)).abs() < 1e-12);
        }
        prop_assert_eq!(c.total(), 36);
    }

    #[test]
    fn swapping_negative_classes_changes_nothing((p, t) in arb_pair()) {
        let swap = |v: &[u8]| v.iter().map(|&c| match c { 0 => 1, 1 => 0, c => c }).collect::<Vec<_>>();
        let a = confusion(&mask(6, 6, &p), &mask(6, 6, &t), 2, 3).unwrap();
        let b = confusion(&mask(6, 6, &swap(&p)), &mask(6, 6, &swap(&t)), 2, 3).unwrap();
        prop_assert_eq!(a, b);
    }
}
