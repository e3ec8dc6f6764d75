use fastbvp_core::nn::gradcheck::INPUT_GROUP;
use fastbvp_core::nn::{
    check_gradients, Differentiable, GradCheckConfig, Layer, LayerSpec, ParamStore, Sequential,
    Tensor1d,
};
use fastbvp_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random_input(rng: &mut ChaCha8Rng, rows: usize, channels: usize, len: usize) -> Tensor1d {
    let data = (0..rows * channels * len)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    Tensor1d::from_vec(rows, channels, len, data).unwrap()
}

/// One random configuration per trial: a fresh network and input each time.
fn sweep(trials: usize, seed: u64, build: impl Fn(&mut ChaCha8Rng) -> (Vec<LayerSpec>, usize, usize, usize)) {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    for trial in 0..trials {
        let (specs, rows, ch, len) = build(&mut rng);
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::new(format!("l{i}"), s.clone()))
            .collect();
        let mut net = Sequential::new(layers, rng.gen()).unwrap();
        // perturb BN affine terms away from their identity initialization
        for (name, p) in net.params.iter_mut() {
            if p.trainable && (name.ends_with("gamma") || name.ends_with("beta")) {
                p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
        }
        let cfg = GradCheckConfig {
            trials: 1,
            seed: rng.gen(),
            ..Default::default()
        };
        let report = check_gradients(&mut net, |r| random_input(r, rows, ch, len), &cfg);
        assert!(
            report.passed(TOL),
            "trial {trial} {specs:?}: {:?}",
            report
        );
        assert!(report.group(INPUT_GROUP).unwrap().checked > 0);
    }
}

#[test]
fn conv_gradients() {
    sweep(100, 1, |rng| {
        let k = [1, 3, 5, 7][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..=2);
        let (i, o) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let spec = LayerSpec::Conv1d { in_channels: i, out_channels: o, kernel: k, stride, padding: rng.gen_range(0..=k / 2) };
        (vec![spec], rng.gen_range(1..3), i, rng.gen_range(k..12))
    });
}

#[test]
fn deconv_gradients() {
    sweep(100, 2, |rng| {
        let stride = rng.gen_range(1..=3);
        let (i, o) = (rng.gen_range(1..4), rng.gen_range(1..4));
        (vec![LayerSpec::upsample(i, o, stride)], rng.gen_range(1..3), i, rng.gen_range(2..8))
    });
}

#[test]
fn batch_norm_gradients() {
    sweep(100, 3, |rng| {
        let c = rng.gen_range(1..4);
        (vec![LayerSpec::BatchNorm { channels: c }], rng.gen_range(1..3), c, rng.gen_range(3..10))
    });
}

#[test]
fn relu_gradients() {
    sweep(100, 4, |rng| (vec![LayerSpec::Relu], 1, rng.gen_range(1..4), rng.gen_range(1..10)));
}

#[test]
fn elu_gradients() {
    sweep(100, 5, |rng| {
        let alpha = rng.gen_range(0.5..2.0);
        (vec![LayerSpec::Elu { alpha }], 1, rng.gen_range(1..4), rng.gen_range(1..10))
    });
}

#[test]
fn avgpool_gradients() {
    sweep(100, 6, |rng| {
        let f = rng.gen_range(1..4);
        (vec![LayerSpec::AvgPool { factor: f }], 1, rng.gen_range(1..3), f * rng.gen_range(1..5))
    });
}

#[test]
fn attention_gradients() {
    sweep(100, 7, |rng| {
        let seg = rng.gen_range(1..5);
        (vec![LayerSpec::SoftmaxAttention { segment: seg }], 1, rng.gen_range(1..3), seg * rng.gen_range(1..5))
    });
}

#[test]
fn stacked_block_gradients() {
    sweep(20, 8, |_| {
        (
            vec![
                LayerSpec::conv(3, 4, 3),
                LayerSpec::BatchNorm { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::AvgPool { factor: 2 },
                LayerSpec::upsample(4, 2, 2),
                LayerSpec::BatchNorm { channels: 2 },
                LayerSpec::Elu { alpha: 1.0 },
            ],
            2,
            3,
            12,
        )
    });
}

#[test]
fn identity_network_is_exact() {
    let mut net = Sequential::new(Vec::new(), 0).unwrap();
    let report = check_gradients(
        &mut net,
        |r| random_input(r, 2, 2, 6),
        &GradCheckConfig::default(),
    );
    assert!(report.max_error() < 1e-9, "{report:?}");
}

struct Corrupted(Sequential);

impl Differentiable for Corrupted {
    fn params(&self) -> &ParamStore {
        &self.0.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.0.params
    }
    fn forward_train(&self, x: &Tensor1d) -> Result<Tensor1d> {
        self.0.forward_train(x)
    }
    fn gradients(&self, x: &Tensor1d, dy: &Tensor1d) -> Result<(Tensor1d, ParamStore)> {
        let (dx, mut g) = self.0.gradients(x, dy)?;
        g.get_mut("c.bias")?.data[0] *= 1.01;
        Ok((dx, g))
    }
}

#[test]
fn corrupted_gradient_is_flagged() {
    let net = Sequential::new(vec![Layer::new("c", LayerSpec::conv(2, 2, 3))], 9).unwrap();
    let mut bad = Corrupted(net);
    let report = check_gradients(&mut bad, |r| random_input(r, 1, 2, 8), &GradCheckConfig::default());
    assert_eq!(report.flagged(TOL), vec!["c.bias"]);
}

