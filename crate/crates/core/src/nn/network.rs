use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::nn::layers::{self, LayerKind, LayerSpec};
use crate::nn::params::{FlatParams, Manifest, ManifestEntry, ParamRole};
use crate::nn::{Real, Tensor4};

/// Forward-pass mode. Dropout draws its masks from the supplied generator
/// and is only active in [`Mode::Train`].
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    Mask(Vec<T>),
}

/// Intermediates cached by [`Network::forward`] for [`Network::backward`].
pub struct Tape<T> {
    nodes: Vec<Tensor4<T>>,
    aux: Vec<Aux<T>>,
    training: bool,
    topology_hash: u32,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &Tensor4<T> {
        self.nodes.last().expect("tape always holds the input node")
    }

    pub fn into_output(mut self) -> Tensor4<T> {
        self.nodes.pop().expect("tape always holds the input node")
    }

    pub fn was_training(&self) -> bool {
        self.training
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// Aligned with the network's [`FlatParams`].
    pub params: Vec<T>,
    pub input: Tensor4<T>,
}

/// A feed-forward layer sequence with optional skip concatenations.
#[derive(Debug, Clone)]
pub struct Network {
    input_channels: usize,
    layers: Vec<LayerSpec>,
    manifest: Arc<Manifest>,
    offsets: Vec<usize>,
    downsample: usize,
}

impl Network {
    pub fn new(input_channels: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_channels == 0 {
            return Err(Error::shape("network needs at least one input channel"));
        }
        let mut node_channels = vec![input_channels];
        let mut entries = Vec::new();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        let mut pools = 0u32;
        for (i, layer) in layers.iter().enumerate() {
            let prev = *node_channels.last().unwrap();
            if layer.in_channels != prev {
                return Err(Error::shape(format!(
                    "layer {i} ({:?}) expects {} input channels, previous layer yields {prev}",
                    layer.kind, layer.in_channels
                )));
            }
            match layer.kind {
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                    if layer.out_channels == 0 {
                        return Err(Error::shape(format!("layer {i} has zero output channels")));
                    }
                }
                LayerKind::ConcatSkip { skip_from } => {
                    let Some(&skip) = node_channels.get(skip_from) else {
                        return Err(Error::shape(format!(
                            "layer {i} concatenates node {skip_from}, which is not computed yet"
                        )));
                    };
                    if layer.out_channels != prev + skip {
                        return Err(Error::shape(format!(
                            "layer {i}: concat of {prev} and {skip} channels cannot yield {}",
                            layer.out_channels
                        )));
                    }
                }
                LayerKind::Dropout => {
                    if !(0.0..=1.0).contains(&layer.dropout_rate) {
                        return Err(Error::shape(format!(
                            "layer {i}: dropout rate {} outside [0, 1]",
                            layer.dropout_rate
                        )));
                    }
                }
                _ => {
                    if layer.out_channels != layer.in_channels {
                        return Err(Error::shape(format!(
                            "layer {i} ({:?}) cannot change the channel count",
                            layer.kind
                        )));
                    }
                }
            }
            if layer.kind == LayerKind::MaxPool2 {
                pools += 1;
            }
            offsets.push(offset);
            if let Some((wshape, bias)) = layer.param_shape() {
                offset += wshape.iter().product::<usize>() + bias;
                entries.push(ManifestEntry {
                    layer: i,
                    role: ParamRole::Weight,
                    shape: wshape,
                });
                entries.push(ManifestEntry {
                    layer: i,
                    role: ParamRole::Bias,
                    shape: vec![bias],
                });
            }
            node_channels.push(layer.out_channels);
        }
        Ok(Self {
            input_channels,
            layers,
            manifest: Arc::new(Manifest::new(entries)),
            offsets,
            downsample: 1 << pools,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.out_channels)
            .unwrap_or(self.input_channels)
    }

    pub fn manifest(&self) -> &Arc<Manifest> {
        &self.manifest
    }

    pub fn param_count(&self) -> usize {
        self.manifest.total_len()
    }

    /// Spatial dims of the input must be divisible by this factor.
    pub fn downsample_factor(&self) -> usize {
        self.downsample
    }

    pub fn check_input_dims(&self, height: usize, width: usize) -> Result<()> {
        let f = self.downsample;
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::shape(format!(
                "input {height}x{width} is not divisible by {f} (2^pooling depth)"
            )));
        }
        Ok(())
    }

    /// He-normal weights, zero biases.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> FlatParams<T> {
        use rand_distr::{Distribution, StandardNormal};
        let mut values = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            if let Some((wshape, bias)) = layer.param_shape() {
                let fan_in = (wshape[1] * wshape[2] * wshape[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                let n: usize = wshape.iter().product();
                for _ in 0..n {
                    let z: f64 = StandardNormal.sample(rng);
                    values.push(T::of_f64(z * std));
                }
                values.extend(std::iter::repeat_n(T::zero(), bias));
            }
        }
        FlatParams::new(values, self.manifest.clone()).expect("init follows the manifest")
    }

    fn check_params<T: Real>(&self, params: &FlatParams<T>) -> Result<()> {
        if params.manifest() != self.manifest.as_ref() {
            return Err(Error::shape(
                "parameter manifest does not match the network topology",
            ));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        params: &FlatParams<T>,
        input: &Tensor4<T>,
        mut mode: Mode<'_>,
    ) -> Result<Tape<T>> {
        self.check_params(params)?;
        if input.channels() != self.input_channels {
            return Err(Error::shape(format!(
                "input has {} channels, network expects {}",
                input.channels(),
                self.input_channels
            )));
        }
        self.check_input_dims(input.height(), input.width())?;
        if !input.all_finite() {
            return Err(Error::Numeric("non-finite value in network input".into()));
        }
        let p = params.values();
        let training = mode.is_training();
        let mut nodes: Vec<Tensor4<T>> = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        nodes.push(input.clone());

        for (i, layer) in self.layers.iter().enumerate() {
            let x = nodes.last().unwrap();
            let [n, c, h, w] = x.dims();
            let plane = h * w;
            let (out, a) = match layer.kind {
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                    let co = layer.out_channels;
                    let k = layer.kernel_size().unwrap();
                    let kk = c * k * k;
                    let wts = &p[self.offsets[i]..self.offsets[i] + co * kk];
                    let bias = &p[self.offsets[i] + co * kk..self.offsets[i] + co * kk + co];
                    let mut out = Tensor4::zeros([n, co, h, w]);
                    for s in 0..n {
                        let xs = x.sample(s);
                        let ys = out.sample_mut(s);
                        if k == 3 {
                            layers::conv3x3_forward(xs, c, h, w, wts, bias, co, ys);
                        } else {
                            T::gemm(co, kk, plane, wts, false, xs, false, T::zero(), ys);
                            layers::add_bias(ys, bias, plane);
                        }
                    }
                    (out, Aux::None)
                }
                LayerKind::Relu => {
                    let mut out = x.clone();
                    for v in out.data_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                    (out, Aux::None)
                }
                LayerKind::Sigmoid => {
                    let mut out = x.clone();
                    for v in out.data_mut() {
                        *v = layers::sigmoid(*v);
                    }
                    (out, Aux::None)
                }
                LayerKind::MaxPool2 => {
                    let mut out = Tensor4::zeros([n, c, h / 2, w / 2]);
                    let olen = out.sample_len();
                    let mut argmax = vec![0u32; n * olen];
                    for s in 0..n {
                        layers::max_pool2(
                            x.sample(s),
                            c,
                            h,
                            w,
                            out.sample_mut(s),
                            &mut argmax[s * olen..(s + 1) * olen],
                        );
                    }
                    (out, Aux::Argmax(argmax))
                }
                LayerKind::Upsample2 => {
                    let mut out = Tensor4::zeros([n, c, 2 * h, 2 * w]);
                    for s in 0..n {
                        layers::upsample2(x.sample(s), c, h, w, out.sample_mut(s));
                    }
                    (out, Aux::None)
                }
                LayerKind::ConcatSkip { skip_from } => {
                    (x.concat_channels(&nodes[skip_from])?, Aux::None)
                }
                LayerKind::Dropout => match &mut mode {
                    Mode::Train(rng) if layer.dropout_rate > 0.0 => {
                        let rate = layer.dropout_rate;
                        let keep = if rate >= 1.0 {
                            T::zero()
                        } else {
                            T::of_f64(1.0 / (1.0 - rate))
                        };
                        let mask: Vec<T> = (0..x.data().len())
                            .map(|_| {
                                if rng.random::<f64>() >= rate {
                                    keep
                                } else {
                                    T::zero()
                                }
                            })
                            .collect();
                        let mut out = x.clone();
                        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        (out, Aux::Mask(mask))
                    }
                    _ => (x.clone(), Aux::None),
                },
            };
            nodes.push(out);
            aux.push(a);
        }

        let tape = Tape {
            nodes,
            aux,
            training,
            topology_hash: self.manifest.topology_hash(),
        };
        if !tape.output().all_finite() {
            return Err(Error::Numeric("non-finite value in network output".into()));
        }
        Ok(tape)
    }

    /// Reverse pass. `grad_output` is ∂loss/∂predictions with the output's dims.
    pub fn backward<T: Real>(
        &self,
        params: &FlatParams<T>,
        tape: &Tape<T>,
        grad_output: &Tensor4<T>,
    ) -> Result<Gradients<T>> {
        self.check_params(params)?;
        if tape.topology_hash != self.manifest.topology_hash()
            || tape.nodes.len() != self.layers.len() + 1
        {
            return Err(Error::shape("tape was recorded by a different network"));
        }
        if grad_output.dims() != tape.output().dims() {
            return Err(Error::shape(format!(
                "upstream gradient dims {:?} do not match predictions {:?}",
                grad_output.dims(),
                tape.output().dims()
            )));
        }
        let p = params.values();
        let mut grads = vec![T::zero(); p.len()];
        let mut node_grads: Vec<Option<Tensor4<T>>> = vec![None; self.layers.len() + 1];
        node_grads[self.layers.len()] = Some(grad_output.clone());

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = node_grads[i + 1]
                .take()
                .unwrap_or_else(|| Tensor4::zeros(tape.nodes[i + 1].dims()));
            let x = &tape.nodes[i];
            let y = &tape.nodes[i + 1];
            let [n, c, h, w] = x.dims();
            let plane = h * w;
            let gi = match layer.kind {
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                    let co = layer.out_channels;
                    let k = layer.kernel_size().unwrap();
                    let kk = c * k * k;
                    let off = self.offsets[i];
                    let wts = &p[off..off + co * kk];
                    let (gw, gb) = grads[off..off + co * kk + co].split_at_mut(co * kk);
                    let mut gi = Tensor4::zeros(x.dims());
                    for s in 0..n {
                        let gs = g.sample(s);
                        let xs = x.sample(s);
                        layers::accumulate_bias_grad(gs, gb, plane);
                        if k == 3 {
                            layers::conv3x3_backward(
                                gs,
                                co,
                                xs,
                                c,
                                h,
                                w,
                                wts,
                                gw,
                                gi.sample_mut(s),
                            );
                        } else {
                            T::gemm(co, plane, kk, gs, false, xs, true, T::one(), gw);
                            T::gemm(
                                kk,
                                co,
                                plane,
                                wts,
                                true,
                                gs,
                                false,
                                T::zero(),
                                gi.sample_mut(s),
                            );
                        }
                    }
                    gi
                }
                LayerKind::Relu => {
                    let mut gi = g;
                    for (gv, &yv) in gi.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    gi
                }
                LayerKind::Sigmoid => {
                    let mut gi = g;
                    for (gv, &yv) in gi.data_mut().iter_mut().zip(y.data()) {
                        *gv *= yv * (T::one() - yv);
                    }
                    gi
                }
                LayerKind::MaxPool2 => {
                    let Aux::Argmax(argmax) = &tape.aux[i] else {
                        return Err(Error::shape("tape is missing pooling indices"));
                    };
                    let mut gi = Tensor4::zeros(x.dims());
                    let olen = g.sample_len();
                    for s in 0..n {
                        let gs = g.sample(s);
                        let idx = &argmax[s * olen..(s + 1) * olen];
                        let dst = gi.sample_mut(s);
                        for (o, &src) in idx.iter().enumerate() {
                            dst[src as usize] += gs[o];
                        }
                    }
                    gi
                }
                LayerKind::Upsample2 => {
                    let mut gi = Tensor4::zeros(x.dims());
                    for s in 0..n {
                        layers::upsample2_backward(g.sample(s), c, h, w, gi.sample_mut(s));
                    }
                    gi
                }
                LayerKind::ConcatSkip { skip_from } => {
                    let (gi, gskip) = g.split_channels(c);
                    match &mut node_grads[skip_from] {
                        Some(existing) => existing.add_assign(&gskip),
                        slot @ None => *slot = Some(gskip),
                    }
                    gi
                }
                LayerKind::Dropout => match &tape.aux[i] {
                    Aux::Mask(mask) => {
                        let mut gi = g;
                        for (gv, &m) in gi.data_mut().iter_mut().zip(mask) {
                            *gv *= m;
                        }
                        gi
                    }
                    _ => g,
                },
            };
            match &mut node_grads[i] {
                Some(existing) => existing.add_assign(&gi),
                slot @ None => *slot = Some(gi),
            }
        }

        Ok(Gradients {
            params: grads,
            input: node_grads[0]
                .take()
                .expect("input gradient is always produced"),
        })
    }
}
