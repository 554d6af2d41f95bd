use sparseview_core::scene::generate;
use sparseview_core::train::{TrainConfig, Trainer};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

#[test]
fn reconstruction_term_falls_over_first_500_steps() {
    let data = generate("two-planes", "narrow", 0).unwrap();
    let (mut first, mut last) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let mut cfg = TrainConfig::desk();
        cfg.seed = seed;
        let mut t = Trainer::new(cfg).unwrap();
        for it in 0..=500 {
            let r = t.step(std::slice::from_ref(&data)).unwrap();
            assert_eq!(r.iteration, it);
            // weighted reconstruction term
            if it == 0 {
                first.push(r.terms[2]);
            } else if it == 500 {
                last.push(r.terms[2]);
            }
        }
    }
    let (a, b) = (median(first), median(last));
    assert!(b < a, "median λ_rec·L_rec {a} at step 0, {b} at step 500");
}

#[test]
fn reconstruction_term_is_weight_times_l1() {
    let data = generate("two-planes", "narrow", 0).unwrap();
    let cfg = TrainConfig::desk();
    let w = cfg.weights.rec;
    let mut t = Trainer::new(cfg).unwrap();
    let r = t.step(std::slice::from_ref(&data)).unwrap();
    assert!((r.terms[2] - w * r.components.rec).abs() <= 1e-9 * r.terms[2].abs().max(1.0));
}
