use jrn_core::datagen::generate_dataset;
use jrn_core::influence::{influence_numbers, run_setups, Setup};
use jrn_core::metrics::evaluate_network;
use jrn_core::{build_jrn, JrnConfig, NoiseConfig, Variant};

#[test]
fn muted_semantic_path_has_no_influence_on_depth() {
    let samples = generate_dataset::<f32>(3, 16, 11, &NoiseConfig::default()).unwrap();
    let mut net = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat10, 5, 2)).unwrap();
    for b in &mut net.branches {
        b.sem_in.weights_mut().fill(0.0);
        b.sem_in.bias_mut().fill(0.0);
    }
    let [a, b, c] = run_setups(&net, &samples).unwrap();
    assert_eq!([a.setup, b.setup, c.setup], Setup::ALL);
    let p = influence_numbers("cat10", &a, &b, &c).unwrap();
    assert!(p.omega_s_to_d.abs() < 1e-6, "omega S->D' = {}", p.omega_s_to_d);
    // muting depth still changes the semantic output
    assert_ne!(c.report, a.report);
}

#[test]
fn setup_a_is_plain_evaluation() {
    let samples = generate_dataset::<f32>(3, 16, 12, &NoiseConfig::default()).unwrap();
    let net = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Sum60, 5, 8)).unwrap();
    let [a, _, _] = run_setups(&net, &samples).unwrap();
    let plain = evaluate_network(&net, &samples).unwrap();
    let bits = |r: &jrn_core::metrics::MetricReport| {
        let mut v: Vec<u64> = r.depth.as_array().iter().map(|x| x.to_bits()).collect();
        v.push(r.seg.mean_iou.to_bits());
        v.push(r.seg.pixel_accuracy.to_bits());
        v
    };
    assert_eq!(bits(&a.report), bits(&plain));
    assert_eq!(a.perf_semantic, 100.0 * plain.seg.mean_iou);
    assert_eq!(a.perf_depth, -100.0 * plain.depth.rel_sqr);
}

#[test]
fn results_from_another_network_are_rejected() {
    let samples = generate_dataset::<f32>(2, 16, 13, &NoiseConfig::default()).unwrap();
    let n1 = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat1, 5, 1)).unwrap();
    let n2 = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat1, 5, 2)).unwrap();
    let [a, b, _] = run_setups(&n1, &samples).unwrap();
    let [_, _, c] = run_setups(&n2, &samples).unwrap();
    assert!(influence_numbers("cat1", &a, &b, &c).is_err());
}
