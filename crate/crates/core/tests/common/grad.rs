//! Central finite differences against analytic gradients, in f64.

use fedseg::dice::{soft_dice_loss, soft_dice_loss_grad, MaskPair};
use fedseg::models::{Architecture, ModelSpec};
use fedseg::nn::{FlatParams, LayerSpec, Mode, Network, OptimizerConfig, Tape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-6;
/// Denominator floor for the relative error. Central differences carry about
/// ε·|L|/h ≈ 1e-11 of roundoff, which is noise only for components far below
/// this scale.
pub const FLOOR: f64 = 1e-6;
pub const SEEDS: u64 = 10;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Scalar objective of a network output. Returns the value and ∂/∂output.
type Objective<'a> = dyn Fn(&Tensor4<f64>) -> (f64, Tensor4<f64>) + 'a;

fn run(
    net: &Network,
    params: &FlatParams<f64>,
    x: &Tensor4<f64>,
    dropout_seed: Option<u64>,
) -> Tape<f64> {
    match dropout_seed {
        // Same seed every call, so every evaluation sees the same dropout mask.
        Some(s) => net.forward(params, x, Mode::Train(&mut ChaCha8Rng::seed_from_u64(s))),
        None => net.forward(params, x, Mode::Eval),
    }
    .unwrap()
}

/// Worst relative error over every parameter and input component.
fn worst_error(
    net: &Network,
    params: &FlatParams<f64>,
    x: &Tensor4<f64>,
    dropout_seed: Option<u64>,
    objective: &Objective<'_>,
) -> f64 {
    let tape = run(net, params, x, dropout_seed);
    let (_, upstream) = objective(tape.output());
    let grads = net.backward(params, &tape, &upstream).unwrap();
    let eval =
        |p: &FlatParams<f64>, x: &Tensor4<f64>| objective(run(net, p, x, dropout_seed).output()).0;

    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] += H;
        let mut minus = params.clone();
        minus.values_mut()[i] -= H;
        let numeric = (eval(&plus, x) - eval(&minus, x)) / (2.0 * H);
        worst = worst.max(rel_err(grads.params[i], numeric));
    }
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let numeric = (eval(params, &plus) - eval(params, &minus)) / (2.0 * H);
        worst = worst.max(rel_err(grads.input.data()[i], numeric));
    }
    worst
}

/// Random parameters kept off ReLU kinks: zero biases would put dead
/// pixels exactly at 0.
fn jittered(net: &Network, rng: &mut ChaCha8Rng) -> FlatParams<f64> {
    let mut params: FlatParams<f64> = net.init_params(rng);
    for v in params.values_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    params
}

pub struct LayerCase {
    pub name: &'static str,
    pub input: [usize; 4],
    pub layers: Vec<LayerSpec>,
    pub dropout: bool,
}

/// One small network per layer kind.
pub fn layer_cases() -> Vec<LayerCase> {
    let case = |name, input, layers, dropout| LayerCase {
        name,
        input,
        layers,
        dropout,
    };
    vec![
        case(
            "conv3x3",
            [2, 2, 5, 4],
            vec![LayerSpec::conv3x3(2, 3)],
            false,
        ),
        case(
            "conv1x1",
            [2, 3, 4, 4],
            vec![LayerSpec::conv1x1(3, 2)],
            false,
        ),
        case(
            "relu",
            [2, 2, 4, 4],
            vec![LayerSpec::conv3x3(2, 2), LayerSpec::relu(2)],
            false,
        ),
        case(
            "sigmoid",
            [2, 2, 4, 4],
            vec![LayerSpec::conv1x1(2, 2), LayerSpec::sigmoid(2)],
            false,
        ),
        case(
            "max_pool2",
            [2, 2, 4, 6],
            vec![LayerSpec::conv1x1(2, 2), LayerSpec::max_pool2(2)],
            false,
        ),
        case(
            "upsample2",
            [2, 2, 3, 2],
            vec![LayerSpec::conv1x1(2, 2), LayerSpec::upsample2(2)],
            false,
        ),
        // The input reaches the output both through the conv and the skip.
        case(
            "concat_skip",
            [2, 2, 4, 4],
            vec![
                LayerSpec::conv3x3(2, 3),
                LayerSpec::concat_skip(3, 2, 0),
                LayerSpec::conv1x1(5, 2),
            ],
            false,
        ),
        case(
            "dropout",
            [2, 3, 4, 4],
            vec![LayerSpec::conv1x1(3, 3), LayerSpec::dropout(3, 0.4)],
            true,
        ),
    ]
}

/// L = Σ r·y for a fixed random r, so ∂L/∂y = r.
pub fn layer_worst(case: &LayerCase, seed: u64) -> f64 {
    let net = Network::new(case.input[1], case.layers.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = jittered(&net, &mut rng);
    let n: usize = case.input.iter().product();
    let x = Tensor4::from_vec(case.input, uniform(&mut rng, n, -1.0, 1.0)).unwrap();
    let dropout = case.dropout.then_some(seed);
    let out_dims = run(&net, &params, &x, dropout).output().dims();
    let r = Tensor4::from_vec(
        out_dims,
        uniform(&mut rng, out_dims.iter().product(), -1.0, 1.0),
    )
    .unwrap();
    let objective = move |y: &Tensor4<f64>| {
        let v = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        (v, r.clone())
    };
    worst_error(&net, &params, &x, dropout, &objective)
}

/// Mini U-Net (two levels, dropout on) under the batch-mean soft Dice loss.
pub fn unet_worst(seed: u64) -> f64 {
    let spec = ModelSpec {
        architecture: Architecture::MiniUnet {
            base_channels: 2,
            depth: 2,
            dropout: 0.25,
        },
        height: 8,
        width: 8,
        optimizer: OptimizerConfig::sgd(0.1),
        batch_size: 2,
    };
    let net = spec.network().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let params = jittered(&net, &mut rng);
    let x = Tensor4::from_vec([2, 1, 8, 8], uniform(&mut rng, 128, 0.0, 1.0)).unwrap();
    let target: Vec<f64> = (0..128)
        .map(|_| f64::from(rng.random_bool(0.3) as u8))
        .collect();
    let objective = |y: &Tensor4<f64>| {
        let mut g = Tensor4::zeros(y.dims());
        let mut total = 0.0;
        for n in 0..2 {
            let pair = MaskPair::new(y.sample(n), &target[n * 64..(n + 1) * 64]).unwrap();
            total += soft_dice_loss(&pair).unwrap() / 2.0;
            for (d, v) in g
                .sample_mut(n)
                .iter_mut()
                .zip(soft_dice_loss_grad(&pair).unwrap())
            {
                *d = v / 2.0;
            }
        }
        (total, g)
    };
    worst_error(&net, &params, &x, Some(seed), &objective)
}

/// The loss alone, against its closed-form gradient.
pub fn loss_worst(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    // Keep p ± h inside [0, 1].
    let p = uniform(&mut rng, 64, 0.01, 0.99);
    let t: Vec<f64> = (0..64)
        .map(|_| f64::from(rng.random_bool(0.4) as u8))
        .collect();
    let grad = soft_dice_loss_grad(&MaskPair::new(&p, &t).unwrap()).unwrap();
    let loss = |q: &[f64]| soft_dice_loss(&MaskPair::new(q, &t).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus[i] += H;
        let mut minus = p.clone();
        minus[i] -= H;
        worst = worst.max(rel_err(grad[i], (loss(&plus) - loss(&minus)) / (2.0 * H)));
    }
    worst
}
