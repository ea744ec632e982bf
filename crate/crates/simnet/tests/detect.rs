mod common;

use pogo_simnet::detection_rate;

#[test]
fn all_or_nothing_tampering() {
    let cfg = common::load("detect", &[]);
    let all = detection_rate(&cfg, 160, 40, 3.0).unwrap();
    assert_eq!(all.num_leaves, 160);
    assert_eq!(all.rate, 1.0);
    let none = detection_rate(&cfg, 0, 40, 3.0).unwrap();
    assert_eq!(none.rate, 0.0);
    assert!(none.within_tolerance);
}

#[test]
fn quarter_of_leaves_with_two_challenges() {
    let cfg = common::load("detect", &["policy.challenges_per_block=2"]);
    let r = detection_rate(&cfg, 40, 400, 3.0).unwrap();
    assert_eq!(r.proposed, 400);
    assert!((r.analytic - 0.4375).abs() < 1e-12);
    assert!(r.within_tolerance, "{r:?}");
}

#[test]
fn detection_is_reproducible() {
    let cfg = common::load("detect", &[]);
    let a = detection_rate(&cfg, 40, 50, 3.0).unwrap();
    let b = detection_rate(&cfg, 40, 50, 3.0).unwrap();
    assert_eq!(a, b);
    assert!(detection_rate(&cfg, 161, 10, 3.0).is_err());
}
