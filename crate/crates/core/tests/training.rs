use jrn_core::datagen::generate_dataset;
use jrn_core::train::{loss_and_gradients, mean_joint_loss, train};
use jrn_core::{build_jrn, param_count, JrnConfig, NoiseConfig, Sample, TrainConfig, Variant};
use rayon::ThreadPoolBuilder;

fn data(count: usize, size: usize, seed: u64) -> Vec<Sample<f32>> {
    generate_dataset(count, size, seed, &NoiseConfig::default()).unwrap()
}

#[test]
fn every_layer_receives_gradient_in_every_variant() {
    let samples = data(1, 16, 3);
    for v in Variant::ALL {
        let net = build_jrn::<f32>(&JrnConfig::for_variant(v, 5, 1)).unwrap();
        assert_eq!(net.num_params(), param_count(net.config()), "{v}");
        let (ld, ls, grads) = loss_and_gradients(&net, &samples[0]).unwrap();
        assert!(ld.is_finite() && ls.is_finite() && ld >= 0.0 && ls >= 0.0);
        for (name, g) in net.layer_names().iter().zip(&grads) {
            assert!(g.is_finite(), "{v} {name}: non-finite gradient");
            assert!(g.weights().iter().any(|&x| x != 0.0), "{v} {name}: no gradient reaches the weights");
        }
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let samples = data(3, 16, 4);
    let mut net = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat5, 5, 2)).unwrap();
    let before = net.clone();
    let cfg = TrainConfig { epochs: 2, learning_rate: 0.0, ..TrainConfig::default() };
    let trace = train(&mut net, &samples, &cfg).unwrap();
    assert_eq!(trace.len(), 6);
    assert_eq!(net, before);
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let samples = data(6, 16, 5);
    let cfg = TrainConfig { epochs: 6, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut net = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat10, 5, 3)).unwrap();
        let trace = train(&mut net, &samples, &cfg).unwrap();
        (net, trace)
    };
    let (a, trace_a) = run();
    let (b, trace_b) = run();
    assert_eq!(a, b);
    assert_eq!(trace_a, trace_b);
    // every epoch visits every sample once
    for epoch in trace_a.chunks(samples.len()) {
        let mut ids: Vec<_> = epoch.iter().map(|r| r.sample.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), samples.len());
    }
    let first = mean_joint_loss(&trace_a[..6]);
    let last = mean_joint_loss(&trace_a[trace_a.len() - 6..]);
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let samples = data(2, 32, 6);
    let net = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Sum60, 5, 4)).unwrap();
    let run = |threads: usize| {
        let pool = ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = net.forward(&samples[0].input.depth, &samples[0].input.semantics).unwrap();
            let (ld, ls, grads) = loss_and_gradients(&net, &samples[1]).unwrap();
            let regenerated = data(2, 32, 6);
            (out, ld.to_bits(), ls.to_bits(), grads, regenerated)
        })
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.0, b.0);
    assert_eq!((a.1, a.2), (b.1, b.2));
    assert_eq!(a.3, b.3);
    assert_eq!(a.4, b.4);
}

#[test]
fn empty_dataset_is_a_usage_error() {
    let mut net = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat1, 5, 0)).unwrap();
    let err = train(&mut net, &[], &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, jrn_core::Error::Usage(_)));
}

#[test]
fn sum60_and_cat60_share_every_layer_but_the_fuse() {
    let sum = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Sum60, 5, 31)).unwrap();
    let cat = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat60, 5, 31)).unwrap();
    for ((name, a), b) in sum.layer_names().iter().zip(sum.params()).zip(cat.params()) {
        if name.ends_with("fuse") {
            assert_ne!(a.weight_dims(), b.weight_dims(), "{name}");
        } else {
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn one_step_moves_every_layer() {
    // same sample and seed as the gradient-flow test; a width-1 branch can start fully inactive for other seeds
    let samples = data(1, 16, 3);
    for v in Variant::ALL {
        let mut net = build_jrn::<f32>(&JrnConfig::for_variant(v, 5, 1)).unwrap();
        let before = net.clone();
        train(&mut net, &samples, &TrainConfig::default()).unwrap();
        for ((name, a), b) in net.layer_names().iter().zip(net.params()).zip(before.params()) {
            assert!(a.weights().iter().zip(b.weights()).any(|(x, y)| x != y), "{v} {name} did not change");
        }
    }
}
