use super::*;
use crate::data::{Dataset, Split};
use crate::hypergen::{HeadTopology, HypernetSpec};
use crate::init::init_hypernet;
use crate::rng::sample;

#[test]
fn sgd_zero_rate_and_hand_case() {
    let mut p = Tensor::vector(vec![1.0]);
    let g = Tensor::vector(vec![2.0]);
    assert_eq!(sgd_step(&mut [&mut p], &[&g], 0.0).unwrap(), StepStatus::Applied);
    assert_eq!(p.data(), &[1.0]);
    sgd_step(&mut [&mut p], &[&g], 0.1).unwrap();
    assert!((p.data()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn sgd_rejects_non_finite() {
    let mut p = Tensor::vector(vec![1.0, 2.0]);
    let g = Tensor::vector(vec![0.5, f64::NAN]);
    assert_eq!(sgd_step(&mut [&mut p], &[&g], 0.1).unwrap(), StepStatus::Rejected);
    assert_eq!(p.data(), &[1.0, 2.0]);
    let short = Tensor::vector(vec![0.5]);
    assert!(matches!(sgd_step(&mut [&mut p], &[&short], 0.1), Err(Error::Shape(_))));
}

#[test]
fn sgd_converges_on_quadratic() {
    // L = ½ Σ a_i (x_i - c_i)²
    let a = [1.0, 2.0, 0.5];
    let c = [3.0, -1.0, 0.25];
    let mut x = Tensor::vector(vec![0.0; 3]);
    for _ in 0..1000 {
        let g = Tensor::vector((0..3).map(|i| a[i] * (x.data()[i] - c[i])).collect());
        sgd_step(&mut [&mut x], &[&g], 0.1).unwrap();
    }
    for i in 0..3 {
        assert!((x.data()[i] - c[i]).abs() < 1e-6);
    }
}

#[test]
fn config_validation() {
    let base = TrainConfig::new(InitScheme::new(SchemeKind::HyperfanIn), 0.1, 4, 1, 0);
    assert!(base.validate().is_ok());
    let mut c = base.clone();
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.learning_rate = -1.0;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.schedule = Some(LrSchedule {
        milestones: vec![5, 5],
        gamma: 0.1,
    });
    assert!(c.validate().is_err());
    let mut c = base;
    c.schedule = Some(LrSchedule {
        milestones: vec![2, 4],
        gamma: 0.1,
    });
    assert!(c.validate().is_ok());
    assert!((c.rate_at(3) - 0.01).abs() < 1e-15);
    assert!((c.rate_at(4) - 0.001).abs() < 1e-15);
}

fn toy_data(n: usize, d: usize, classes: usize, seed: u64) -> DataSplits {
    let mut rng = Rng::new(seed);
    let make = |rng: &mut Rng, split| {
        let x = sample(&Distribution::normal(1.0).unwrap(), &[n, d], rng).unwrap();
        let labels = (0..n).map(|i| usize::from(x.row(i)[0] > 0.0) % classes).collect();
        Dataset::new(x, Targets::Classes(labels), split).unwrap()
    };
    DataSplits {
        train: make(&mut rng, Split::Train),
        test: make(&mut rng, Split::Test),
    }
}

fn toy_hypernet(bias: bool, seed: u64) -> Model {
    let mut mspec = MainnetSpec::mlp(6, &[8, 8, 8], 2, Activation::Tanh, Loss::SoftmaxCrossEntropy);
    if bias {
        mspec = mspec.with_generated_biases();
    }
    let hspec = HypernetSpec::linear(5)
        .with_topology(HeadTopology::SharedSameSize)
        .with_bias(bias);
    let mut rng = Rng::new(seed);
    Model::Hyper(init_hypernet(&hspec, &mspec, &InitScheme::new(SchemeKind::HyperfanIn), &mut rng).unwrap())
}

fn toy_config(lr: f64) -> TrainConfig {
    let mut c = TrainConfig::new(InitScheme::new(SchemeKind::HyperfanIn), lr, 4, 2, 9);
    c.probe_every = Some(5);
    c.probe_batch = 16;
    c
}

#[test]
fn fast_path_matches_generic_updates() {
    for bias in [false, true] {
        let data = toy_data(40, 6, 2, 3);
        let mut fast_cfg = toy_config(0.05);
        fast_cfg.probe_every = None;
        let mut slow_cfg = fast_cfg.clone();
        slow_cfg.fast_path = false;
        let a = train(toy_hypernet(bias, 1), &data, &fast_cfg).unwrap();
        let b = train(toy_hypernet(bias, 1), &data, &slow_cfg).unwrap();
        assert_eq!(a.steps, b.steps);
        for (p, q) in a.curve.iter().zip(&b.curve) {
            assert!((p.train_loss - q.train_loss).abs() < 1e-10, "{} vs {}", p.train_loss, q.train_loss);
        }
        let (Model::Hyper(ha), Model::Hyper(hb)) = (&a.model, &b.model) else { panic!() };
        for (x, y) in ha.params_with(true).iter().zip(hb.params_with(true)) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy_data(30, 6, 2, 4);
    let a = train(toy_hypernet(true, 2), &data, &toy_config(0.1)).unwrap();
    let b = train(toy_hypernet(true, 2), &data, &toy_config(0.1)).unwrap();
    let la: Vec<u64> = a.curve.iter().map(|p| p.train_loss.to_bits()).collect();
    let lb: Vec<u64> = b.curve.iter().map(|p| p.train_loss.to_bits()).collect();
    assert_eq!(la, lb);
    assert_eq!(a.reports, b.reports);
}

#[test]
fn zero_rate_freezes_everything() {
    let data = toy_data(30, 6, 2, 5);
    let model = toy_hypernet(true, 3);
    let out = train(model.clone(), &data, &toy_config(0.0)).unwrap();
    assert!(out.reports.len() >= 3);
    for r in &out.reports[1..] {
        assert_eq!(r.layers, out.reports[1].layers);
    }
    // Step 0 also carries predictions; the measured values agree.
    for (l0, l1) in out.reports[0].layers.iter().zip(&out.reports[1].layers) {
        for (k, s) in &l0.stats {
            assert_eq!(s.var, l1.stats[k].var);
        }
    }
    assert_eq!(out.model, model);
    assert_eq!(out.start_loss, out.end_loss);
}

#[test]
fn step_zero_report_has_theory() {
    let data = toy_data(30, 6, 2, 6);
    let out = train(toy_hypernet(false, 4), &data, &toy_config(0.1)).unwrap();
    let r0 = &out.reports[0];
    assert_eq!(r0.step, 0);
    assert!(r0.layers[0].get(probe::kind::PRE).unwrap().theory.is_some());
    assert!(out.reports[1].layers[0].get(probe::kind::PRE).unwrap().theory.is_none());
    assert!(r0.layers[1].get(probe::kind::HEAD_OUTPUT).is_some());
}

#[test]
fn divergence_is_flagged_not_raised() {
    let data = toy_data(40, 6, 2, 7);
    let spec = MainnetSpec::mlp(6, &[8], 2, Activation::Identity, Loss::SoftmaxCrossEntropy);
    let mut params = MainnetParams::zeros(&spec).unwrap();
    for l in &mut params.layers {
        l.weight.fill(1e20);
    }
    let mut c = toy_config(0.1);
    c.probe_every = None;
    let out = train(Model::Classical { spec, params }, &data, &c).unwrap();
    let d = out.divergence.expect("diverged");
    assert_eq!(d.step, 0);
    assert!(d.reason.contains("overflow"), "{}", d.reason);
    assert!(out.end_loss.is_infinite());
}

#[test]
fn classical_model_learns() {
    let data = toy_data(200, 6, 2, 8);
    let spec = MainnetSpec::mlp(6, &[16], 2, Activation::Tanh, Loss::SoftmaxCrossEntropy);
    let mut rng = Rng::new(1);
    let model = Model::classical(&spec, &InitScheme::new(SchemeKind::Harmonic), &mut rng).unwrap();
    let mut c = toy_config(0.1);
    c.epochs = 5;
    c.probe_every = None;
    let out = train(model, &data, &c).unwrap();
    assert!(out.end_loss < out.start_loss);
    assert!(out.final_metric().unwrap() > 0.9);
    assert!(out.curve_csv().starts_with("step,epoch,train_loss,test_metric\n"));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for model in [toy_hypernet(true, 5), {
        let spec = MainnetSpec::mlp(3, &[4], 2, Activation::Relu, Loss::SoftmaxCrossEntropy);
        Model::classical(&spec, &InitScheme::new(SchemeKind::FanIn), &mut Rng::new(2)).unwrap()
    }] {
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint {
            model,
            step: 17,
            scheme: Some(InitScheme::new(SchemeKind::HyperfanOut)),
            rng: Some(Rng::new(3).state()),
        };
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
