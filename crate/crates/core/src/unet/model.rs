//! The U-Net graph: construction, layer summary, forward and backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    dropout, dropout_backward, maxpool2, maxpool2_backward, relu_backward, relu_inplace, upsample2,
    upsample2_backward, BatchNorm, BnCache, Conv2d, Param,
};
use super::tensor::Tensor;
use super::{EpochRecord, Result, UNetConfig, UnetError};
use crate::image::Image;

/// Convolution, optional batch normalization, optional ReLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

pub(crate) struct BlockTrace {
    input: Tensor,
    bn: Option<BnCache>,
    out: Tensor,
}

impl ConvBlock {
    fn new(
        k: usize,
        cin: usize,
        cout: usize,
        batch_norm: bool,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(k, cin, cout, rng),
            bn: batch_norm.then(|| BatchNorm::new(cout)),
            relu,
        }
    }

    fn forward_infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            y = bn.forward_infer(&y);
        }
        if self.relu {
            relu_inplace(&mut y);
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor) -> (Tensor, BlockTrace) {
        let mut y = self.conv.forward(x);
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (out, cache) = bn.forward_train(&y);
            y = out;
            bn_cache = Some(cache);
        }
        if self.relu {
            relu_inplace(&mut y);
        }
        let trace = BlockTrace {
            input: x.clone(),
            bn: bn_cache,
            out: y.clone(),
        };
        (y, trace)
    }

    fn backward(&mut self, trace: &BlockTrace, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        if self.relu {
            relu_backward(&trace.out, &mut dy);
        }
        if let (Some(bn), Some(cache)) = (&mut self.bn, &trace.bn) {
            dy = bn.backward(cache, &dy);
        }
        self.conv.backward(&trace.input, &dy, need_dx)
    }

    fn visit(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.conv.weight);
        f(&mut self.conv.bias);
        if let Some(bn) = &mut self.bn {
            f(&mut bn.gamma);
            f(&mut bn.beta);
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderStage {
    pub up: ConvBlock,
    pub first: ConvBlock,
    pub second: ConvBlock,
}

/// Encoder stages, bridge, decoder stages (deepest first) and the 1x1 head.
#[derive(Clone, Debug)]
pub(crate) struct Network {
    pub encoder: Vec<[ConvBlock; 2]>,
    pub bridge: [ConvBlock; 2],
    pub decoder: Vec<DecoderStage>,
    pub head: ConvBlock,
    pub dropout_rate: f32,
}

pub(crate) struct Trace {
    encoder: Vec<([BlockTrace; 2], Vec<u32>)>,
    bridge: [BlockTrace; 2],
    decoder: Vec<(Option<Vec<f32>>, [BlockTrace; 3])>,
    head: BlockTrace,
}

impl Network {
    fn new(cfg: &UNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let depth = cfg.conv_layers.depth();
        let bn = cfg.batch_norm;
        let f = cfg.base_filters;
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = 1;
        for level in 0..depth {
            let c = f << level;
            encoder.push([
                ConvBlock::new(3, cin, c, bn, true, &mut rng),
                ConvBlock::new(3, c, c, bn, true, &mut rng),
            ]);
            cin = c;
        }
        let cb = f << depth;
        let bridge = [
            ConvBlock::new(3, cin, cb, bn, true, &mut rng),
            ConvBlock::new(3, cb, cb, bn, true, &mut rng),
        ];
        let mut decoder = Vec::with_capacity(depth);
        let mut cin = cb;
        for level in (0..depth).rev() {
            let c = f << level;
            decoder.push(DecoderStage {
                up: ConvBlock::new(2, cin, c, bn, true, &mut rng),
                first: ConvBlock::new(3, 2 * c, c, bn, true, &mut rng),
                second: ConvBlock::new(3, c, c, bn, true, &mut rng),
            });
            cin = c;
        }
        let head = ConvBlock::new(1, f, 1, false, false, &mut rng);
        Network {
            encoder,
            bridge,
            decoder,
            head,
            dropout_rate: cfg.dropout_rate,
        }
    }

    /// Every conv block in Keras creation order.
    fn blocks(&self) -> Vec<&ConvBlock> {
        let mut out: Vec<&ConvBlock> = self.encoder.iter().flatten().collect();
        out.extend(self.bridge.iter());
        for st in &self.decoder {
            out.extend([&st.up, &st.first, &st.second]);
        }
        out.push(&self.head);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut ConvBlock> {
        let mut out: Vec<&mut ConvBlock> = self.encoder.iter_mut().flatten().collect();
        out.extend(self.bridge.iter_mut());
        for st in &mut self.decoder {
            out.extend([&mut st.up, &mut st.first, &mut st.second]);
        }
        out.push(&mut self.head);
        out
    }

    fn forward_infer(&self, x: &Tensor) -> Tensor {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = x.clone();
        for [a, b] in &self.encoder {
            let y = b.forward_infer(&a.forward_infer(&x));
            x = maxpool2(&y).0;
            skips.push(y);
        }
        x = self.bridge[1].forward_infer(&self.bridge[0].forward_infer(&x));
        for st in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let up = st.up.forward_infer(&upsample2(&x));
            let merged = skip.concat_channels(&up);
            x = st.second.forward_infer(&st.first.forward_infer(&merged));
        }
        self.head.forward_infer(&x)
    }

    fn forward_train(&mut self, x: &Tensor, rng: &mut impl Rng) -> (Tensor, Trace) {
        let rate = self.dropout_rate;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut enc_traces = Vec::with_capacity(self.encoder.len());
        let mut x = x.clone();
        for [a, b] in &mut self.encoder {
            let (y1, t1) = a.forward_train(&x);
            let (y2, t2) = b.forward_train(&y1);
            let (pooled, arg) = maxpool2(&y2);
            skips.push(y2);
            enc_traces.push(([t1, t2], arg));
            x = pooled;
        }
        let (y, tb1) = self.bridge[0].forward_train(&x);
        let (y, tb2) = self.bridge[1].forward_train(&y);
        x = y;
        let mut dec_traces = Vec::with_capacity(self.decoder.len());
        for st in &mut self.decoder {
            let mask = (rate > 0.0).then(|| dropout(&mut x, rate, rng));
            let skip = skips.pop().expect("one skip per stage");
            let (up, tu) = st.up.forward_train(&upsample2(&x));
            let merged = skip.concat_channels(&up);
            let (y1, t1) = st.first.forward_train(&merged);
            let (y2, t2) = st.second.forward_train(&y1);
            dec_traces.push((mask, [tu, t1, t2]));
            x = y2;
        }
        let (logits, th) = self.head.forward_train(&x);
        (
            logits,
            Trace {
                encoder: enc_traces,
                bridge: [tb1, tb2],
                decoder: dec_traces,
                head: th,
            },
        )
    }

    fn backward(&mut self, trace: &Trace, dlogits: Tensor) {
        let depth = self.encoder.len();
        let mut d = self.head.backward(&trace.head, dlogits, true).unwrap();
        let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        // Gradients enter at the shallowest stage, the last one built.
        for (i, (st, (mask, [tu, t1, t2]))) in self
            .decoder
            .iter_mut()
            .zip(&trace.decoder)
            .enumerate()
            .rev()
        {
            let dm = st.second.backward(t2, d, true).unwrap();
            let dmerged = st.first.backward(t1, dm, true).unwrap();
            let skip_c = dmerged.c - st.up.conv.cout;
            let (dskip, dup) = dmerged.split_channels(skip_c);
            skip_grads[depth - 1 - i] = Some(dskip);
            let du = st.up.backward(tu, dup, true).unwrap();
            let mut dx = upsample2_backward(&du);
            if let Some(mask) = mask {
                dropout_backward(mask, &mut dx);
            }
            d = dx;
        }
        let [tb1, tb2] = &trace.bridge;
        d = self.bridge[1].backward(tb2, d, true).unwrap();
        d = self.bridge[0].backward(tb1, d, true).unwrap();
        for level in (0..depth).rev() {
            let ([t1, t2], arg) = &trace.encoder[level];
            let mut dy = maxpool2_backward(arg, &d, &t2.out);
            let skip = skip_grads[level]
                .take()
                .expect("decoder visited every level");
            dy.data
                .iter_mut()
                .zip(&skip.data)
                .for_each(|(a, b)| *a += b);
            let [b1, b2] = &mut self.encoder[level];
            let d2 = b2.backward(t2, dy, true).unwrap();
            match b1.backward(t1, d2, level > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

/// One row of the layer table, in the same shape as a Keras model summary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    /// (height, width, channels)
    pub output_shape: (usize, usize, usize),
    pub params: usize,
    pub connected_to: Vec<String>,
}

/// A U-Net plus its configuration and training history.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: UNetConfig,
    pub(crate) net: Network,
    pub training_log: Vec<EpochRecord>,
}

/// Builds a freshly initialised network for `cfg`.
///
/// Weights are He-normal, biases zero, seeded from `cfg.seed`.
pub fn build_model(cfg: &UNetConfig) -> Result<SegModel> {
    cfg.validate()?;
    Ok(SegModel {
        config: cfg.clone(),
        net: Network::new(cfg),
        training_log: Vec::new(),
    })
}

impl SegModel {
    /// Trainable parameters: conv kernels and biases, plus batch-norm scale
    /// and offset when enabled.
    pub fn param_count(&self) -> usize {
        self.net
            .blocks()
            .iter()
            .map(|b| b.conv.param_count() + b.bn.as_ref().map_or(0, |bn| 2 * bn.gamma.value.len()))
            .sum()
    }

    /// Layer-by-layer listing with Keras-style names and parameter counts.
    pub fn summary(&self) -> Vec<LayerSummary> {
        let cfg = &self.config;
        let mut rows = Vec::new();
        let mut counters = std::collections::HashMap::<&str, usize>::new();
        let mut push = |rows: &mut Vec<LayerSummary>,
                        kind: &'static str,
                        shape: (usize, usize, usize),
                        params: usize,
                        inputs: Vec<String>|
         -> String {
            let n = counters.entry(kind).or_insert(0);
            *n += 1;
            let name = format!("{kind}_{n}");
            rows.push(LayerSummary {
                name: name.clone(),
                output_shape: shape,
                params,
                connected_to: inputs,
            });
            name
        };
        let conv_row = |rows: &mut Vec<LayerSummary>,
                        push: &mut dyn FnMut(
            &mut Vec<LayerSummary>,
            &'static str,
            (usize, usize, usize),
            usize,
            Vec<String>,
        ) -> String,
                        block: &ConvBlock,
                        size: usize,
                        input: String|
         -> String {
            let shape = (size, size, block.conv.cout);
            let mut name = push(rows, "conv2d", shape, block.conv.param_count(), vec![input]);
            if let Some(bn) = &block.bn {
                name = push(
                    rows,
                    "batch_normalization",
                    shape,
                    4 * bn.gamma.value.len(),
                    vec![name],
                );
            }
            name
        };

        let mut size = cfg.input_size;
        let mut last = push(&mut rows, "input", (size, size, 1), 0, vec![]);
        let mut skips = Vec::new();
        for [a, b] in &self.net.encoder {
            last = conv_row(&mut rows, &mut push, a, size, last);
            last = conv_row(&mut rows, &mut push, b, size, last);
            skips.push(last.clone());
            size /= 2;
            last = push(
                &mut rows,
                "max_pooling2d",
                (size, size, b.conv.cout),
                0,
                vec![last],
            );
        }
        for b in &self.net.bridge {
            last = conv_row(&mut rows, &mut push, b, size, last);
        }
        let mut channels = self.net.bridge[1].conv.cout;
        for st in &self.net.decoder {
            if cfg.dropout_rate > 0.0 {
                last = push(&mut rows, "dropout", (size, size, channels), 0, vec![last]);
            }
            size *= 2;
            last = push(
                &mut rows,
                "up_sampling2d",
                (size, size, channels),
                0,
                vec![last],
            );
            last = conv_row(&mut rows, &mut push, &st.up, size, last);
            let skip = skips.pop().expect("one skip per stage");
            last = push(
                &mut rows,
                "concatenate",
                (size, size, 2 * st.up.conv.cout),
                0,
                vec![skip, last],
            );
            last = conv_row(&mut rows, &mut push, &st.first, size, last);
            last = conv_row(&mut rows, &mut push, &st.second, size, last);
            channels = st.second.conv.cout;
        }
        conv_row(&mut rows, &mut push, &self.net.head, size, last);
        rows
    }

    /// Sigmoid probability maps, one per input image, in input order.
    pub fn predict(&self, images: &[Image<f32>]) -> Result<Vec<Image<f32>>> {
        const CHUNK: usize = 8;
        let size = self.config.input_size;
        if let Some(bad) = images.iter().find(|im| im.shape() != (size, size)) {
            return Err(UnetError::ShapeMismatch(format!(
                "model expects {size}x{size} images, got {:?}",
                bad.shape()
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let logits = self.net.forward_infer(&batch_tensor(chunk));
            out.extend(unbatch(&logits, sigmoid));
        }
        Ok(out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor, rng: &mut impl Rng) -> (Tensor, Trace) {
        self.net.forward_train(x, rng)
    }

    pub(crate) fn backward(&mut self, trace: &Trace, dlogits: Tensor) {
        self.net.backward(trace, dlogits)
    }

    /// Visits trainable parameters in a fixed order.
    pub(crate) fn visit_params(&mut self, mut f: impl FnMut(&mut Param)) {
        for b in self.net.blocks_mut() {
            b.visit(&mut f);
        }
    }

    /// Every stored array (trainable or not) with a stable name, in a fixed order.
    pub(crate) fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (i, b) in self.net.blocks().into_iter().enumerate() {
            let c = &b.conv;
            let name = format!("conv2d_{}", i + 1);
            out.push((
                format!("{name}/kernel"),
                vec![c.cout, c.cin, c.k, c.k],
                &c.weight.value[..],
            ));
            out.push((format!("{name}/bias"), vec![c.cout], &c.bias.value[..]));
            if let Some(bn) = &b.bn {
                let n = vec![bn.gamma.value.len()];
                out.push((format!("{name}/bn_gamma"), n.clone(), &bn.gamma.value[..]));
                out.push((format!("{name}/bn_beta"), n.clone(), &bn.beta.value[..]));
                out.push((format!("{name}/bn_mean"), n.clone(), &bn.running_mean[..]));
                out.push((format!("{name}/bn_var"), n, &bn.running_var[..]));
            }
        }
        out
    }

    pub(crate) fn named_arrays_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out = Vec::new();
        for (i, b) in self.net.blocks_mut().into_iter().enumerate() {
            let name = format!("conv2d_{}", i + 1);
            out.push((format!("{name}/kernel"), &mut b.conv.weight.value));
            out.push((format!("{name}/bias"), &mut b.conv.bias.value));
            if let Some(bn) = &mut b.bn {
                out.push((format!("{name}/bn_gamma"), &mut bn.gamma.value));
                out.push((format!("{name}/bn_beta"), &mut bn.beta.value));
                out.push((format!("{name}/bn_mean"), &mut bn.running_mean));
                out.push((format!("{name}/bn_var"), &mut bn.running_var));
            }
        }
        out
    }
}

pub(crate) fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Stacks same-sized single-channel images into a `[1][N][H][W]` tensor.
pub(crate) fn batch_tensor(images: &[Image<f32>]) -> Tensor {
    let (h, w) = images.first().map_or((0, 0), Image::shape);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec(1, images.len(), h, w, data)
}

pub(crate) fn unbatch(t: &Tensor, f: impl Fn(f32) -> f32) -> Vec<Image<f32>> {
    t.data
        .chunks_exact(t.plane())
        .map(|p| Image::from_vec(t.h, t.w, p.iter().map(|&v| f(v)).collect()))
        .collect()
}
