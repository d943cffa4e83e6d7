//! Trainable segmentation models and their local training/evaluation loops.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::SegSample;
use crate::dice::{dice_thresholded, soft_dice_loss_grad_into, MaskPair};
use crate::error::{Error, Result};
use crate::nn::{
    FlatParams, LayerSpec, Mode, Network, OptimizerConfig, OptimizerState, Real, Tensor4,
};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Per-pixel logistic regression over the 3×3 neighbourhood.
    Logistic,
    MiniUnet {
        base_channels: usize,
        depth: usize,
        dropout: f64,
    },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::MiniUnet {
            base_channels: 8,
            depth: 2,
            dropout: 0.2,
        }
    }
}

/// Everything needed to build identical model replicas anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub height: usize,
    pub width: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

impl ModelSpec {
    pub fn network(&self) -> Result<Network> {
        match self.architecture {
            Architecture::Logistic => logistic_network(self.height, self.width),
            Architecture::MiniUnet {
                base_channels,
                depth,
                dropout,
            } => mini_unet_network(base_channels, depth, dropout, self.height, self.width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.optimizer.validate()?;
        self.network().map(|_| ())
    }

    /// Builds a replica whose weights come from `init_seed` and whose
    /// shuffling/dropout stream comes from `stream_seed`.
    pub fn build<T: Real>(&self, init_seed: u64, stream_seed: u64) -> Result<TrainableModel<T>> {
        self.validate()?;
        let network = Arc::new(self.network()?);
        let params = network.init_params(&mut ChaCha8Rng::seed_from_u64(init_seed));
        Ok(TrainableModel::new(
            network,
            params,
            self.optimizer,
            stream_seed,
        ))
    }
}

fn logistic_network(height: usize, width: usize) -> Result<Network> {
    if height == 0 || width == 0 {
        return Err(Error::shape("image dims must be positive"));
    }
    Network::new(1, vec![LayerSpec::conv3x3(1, 1), LayerSpec::sigmoid(1)])
}

/// Contracting blocks `conv3x3+relu ×2 → dropout → maxpool`, a bottleneck
/// `conv3x3+relu ×2`, expanding blocks `upsample → concat skip → conv3x3+relu ×2`,
/// then a `conv1x1 → sigmoid` head. Channels double per level. The skip
/// taken from each contracting block is its dropout output.
fn mini_unet_network(
    base_channels: usize,
    depth: usize,
    dropout: f64,
    height: usize,
    width: usize,
) -> Result<Network> {
    if base_channels == 0 {
        return Err(Error::shape("base channel count must be positive"));
    }
    let factor = 1usize
        .checked_shl(depth as u32)
        .ok_or_else(|| Error::shape("U-Net depth too large"))?;
    if height == 0 || width == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::shape(format!(
            "{height}x{width} input is not divisible by 2^{depth}"
        )));
    }
    let mut layers = Vec::new();
    let mut skips = Vec::with_capacity(depth);
    let mut ch = 1;
    for level in 0..depth {
        let out = base_channels << level;
        layers.push(LayerSpec::conv3x3(ch, out));
        layers.push(LayerSpec::relu(out));
        layers.push(LayerSpec::conv3x3(out, out));
        layers.push(LayerSpec::relu(out));
        layers.push(LayerSpec::dropout(out, dropout));
        skips.push((layers.len(), out));
        layers.push(LayerSpec::max_pool2(out));
        ch = out;
    }
    let bottom = base_channels << depth;
    layers.push(LayerSpec::conv3x3(ch, bottom));
    layers.push(LayerSpec::relu(bottom));
    layers.push(LayerSpec::conv3x3(bottom, bottom));
    layers.push(LayerSpec::relu(bottom));
    ch = bottom;
    for &(node, skip_ch) in skips.iter().rev() {
        layers.push(LayerSpec::upsample2(ch));
        layers.push(LayerSpec::concat_skip(ch, skip_ch, node));
        layers.push(LayerSpec::conv3x3(ch + skip_ch, skip_ch));
        layers.push(LayerSpec::relu(skip_ch));
        layers.push(LayerSpec::conv3x3(skip_ch, skip_ch));
        layers.push(LayerSpec::relu(skip_ch));
        ch = skip_ch;
    }
    layers.push(LayerSpec::conv1x1(ch, 1));
    layers.push(LayerSpec::sigmoid(1));
    Network::new(1, layers)
}

/// Per-pixel logistic classifier with zero-initialised weights.
pub fn build_logistic<T: Real>(
    height: usize,
    width: usize,
    optimizer: OptimizerConfig,
    stream_seed: u64,
) -> Result<TrainableModel<T>> {
    let network = Arc::new(logistic_network(height, width)?);
    let params = FlatParams::zeros(network.manifest().clone());
    Ok(TrainableModel::new(network, params, optimizer, stream_seed))
}

#[allow(clippy::too_many_arguments)]
pub fn build_mini_unet<T: Real>(
    base_channels: usize,
    depth: usize,
    dropout: f64,
    height: usize,
    width: usize,
    optimizer: OptimizerConfig,
    init_seed: u64,
    stream_seed: u64,
) -> Result<TrainableModel<T>> {
    ModelSpec {
        architecture: Architecture::MiniUnet {
            base_channels,
            depth,
            dropout,
        },
        height,
        width,
        optimizer,
        batch_size: 1,
    }
    .build(init_seed, stream_seed)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean thresholded Dice of the training forward passes in each epoch
    /// (dropout active, measured before each batch's update).
    pub per_epoch_train_dice: Vec<f64>,
    /// Empty when no validation samples were supplied.
    pub per_epoch_local_val_dice: Vec<f64>,
    pub samples_seen: usize,
}

/// A network topology with its parameters, optimizer state and private
/// random stream. Not safe to train from two threads at once; replicas are.
#[derive(Debug, Clone)]
pub struct TrainableModel<T> {
    network: Arc<Network>,
    params: FlatParams<T>,
    optimizer: OptimizerState<T>,
    rng: ChaCha8Rng,
    rng_stream: u64,
}

impl<T: Real> TrainableModel<T> {
    pub fn new(
        network: Arc<Network>,
        params: FlatParams<T>,
        optimizer: OptimizerConfig,
        rng_stream: u64,
    ) -> Self {
        let n = params.len();
        Self {
            network,
            params,
            optimizer: OptimizerState::new(optimizer, n),
            rng: ChaCha8Rng::seed_from_u64(rng_stream),
            rng_stream,
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &FlatParams<T> {
        &self.params
    }

    pub fn get_params(&self) -> FlatParams<T> {
        self.params.clone()
    }

    pub fn set_params(&mut self, params: &FlatParams<T>) -> Result<()> {
        if params.manifest() != self.params.manifest() {
            return Err(Error::shape("parameters belong to a different topology"));
        }
        self.params.values_mut().copy_from_slice(params.values());
        Ok(())
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    pub fn set_optimizer_state(&mut self, state: OptimizerState<T>) -> Result<()> {
        if state.first_moment.len() != self.params.len()
            || state.second_moment.len() != self.params.len()
        {
            return Err(Error::shape(
                "optimizer moments do not match the parameters",
            ));
        }
        self.optimizer = state;
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer.reset();
    }

    pub fn rng_stream(&self) -> u64 {
        self.rng_stream
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Soft predictions for `samples` in eval mode (dropout disabled).
    pub fn predict(&self, samples: &[SegSample]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let refs: Vec<&SegSample> = chunk.iter().collect();
            let (x, _) = batch_tensors::<T>(&refs)?;
            let y = self
                .network
                .forward(&self.params, &x, Mode::Eval)?
                .into_output();
            for s in 0..y.batch() {
                out.push(y.sample(s).to_vec());
            }
        }
        Ok(out)
    }

    /// One gradient step on `batch`. Returns the per-sample thresholded Dice
    /// of the pre-update predictions.
    fn train_batch(&mut self, batch: &[&SegSample]) -> Result<Vec<f64>> {
        let (x, targets) = batch_tensors::<T>(batch)?;
        let tape = self
            .network
            .forward(&self.params, &x, Mode::Train(&mut self.rng))?;
        let pred = tape.output();
        let px = pred.sample_len();
        let scale = T::one() / T::of_f64(batch.len() as f64);
        let mut grad = Tensor4::zeros(pred.dims());
        let mut dices = Vec::with_capacity(batch.len());
        for s in 0..batch.len() {
            let p = pred.sample(s);
            let t = &targets[s * px..(s + 1) * px];
            let pair = MaskPair::new(p, t)?;
            soft_dice_loss_grad_into(&pair, scale, grad.sample_mut(s))?;
            dices.push(dice_thresholded(p, t)?);
        }
        let grads = self.network.backward(&self.params, &tape, &grad)?;
        self.optimizer.step(&mut self.params, &grads.params)?;
        Ok(dices)
    }
}

/// Images as a `(n, 1, h, w)` tensor plus the masks flattened in the same order.
pub fn batch_tensors<T: Real>(samples: &[&SegSample]) -> Result<(Tensor4<T>, Vec<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::precondition("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut x = Vec::with_capacity(samples.len() * h * w);
    let mut t = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height != h || s.width != w || s.image.len() != h * w || s.mask.len() != h * w {
            return Err(Error::shape("samples in a batch must share dims"));
        }
        x.extend(s.image.iter().map(|&v| T::of_f64(v as f64)));
        t.extend(
            s.mask
                .iter()
                .map(|&m| if m != 0 { T::one() } else { T::zero() }),
        );
    }
    Ok((Tensor4::from_vec([samples.len(), 1, h, w], x)?, t))
}

/// Exactly `epochs` passes over `train` in shuffled mini-batches of
/// `min(batch_size, train.len())`; the last batch of an epoch may be smaller.
/// When a single batch covers the data it is used in its stored order.
pub fn train_local<T: Real>(
    model: &mut TrainableModel<T>,
    train: &[SegSample],
    val: &[SegSample],
    epochs: usize,
    batch_size: usize,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::precondition("cannot train on an empty shard"));
    }
    if batch_size == 0 {
        return Err(Error::precondition("batch size must be positive"));
    }
    let n = train.len();
    let bs = batch_size.min(n);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..epochs {
        // Fresh order each epoch, so splitting epochs across calls changes nothing.
        order.clear();
        order.extend(0..n);
        if bs < n {
            order.shuffle(&mut model.rng);
        }
        let mut dices = Vec::with_capacity(n);
        for chunk in order.chunks(bs) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &train[i]).collect();
            dices.extend(model.train_batch(&batch)?);
        }
        report.per_epoch_train_dice.push(ordered_mean(dices));
        if !val.is_empty() {
            report.per_epoch_local_val_dice.push(evaluate(model, val)?);
        }
        report.epochs_run += 1;
        report.samples_seen += n;
    }
    Ok(report)
}

/// Mean thresholded Dice over `samples`; independent of their order.
pub fn evaluate<T: Real>(model: &TrainableModel<T>, samples: &[SegSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::precondition(
            "cannot evaluate on an empty sample set",
        ));
    }
    let mut dices = Vec::with_capacity(samples.len());
    for (pred, sample) in model.predict(samples)?.iter().zip(samples) {
        let target: Vec<T> = sample
            .mask
            .iter()
            .map(|&m| if m != 0 { T::one() } else { T::zero() })
            .collect();
        dices.push(dice_thresholded(pred, &target)?);
    }
    Ok(ordered_mean(dices))
}

/// Mean with a canonical summation order, so permuting the inputs cannot
/// change the result.
fn ordered_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}
