//! A small trainable network: affine or convolution blocks, each followed by
//! a normalization layer and a rectifier, with a linear classifier head that
//! grows as tasks add classes. All gradients are written by hand.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::norm::{AblationFlags, BatchComposition, NormCache, NormKind, NormLayer};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Fully-connected layer on `(B, C_in, 1, 1)` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out x in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn new(in_features: usize, out_features: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: (0..in_features * out_features)
                .map(|_| rng.normal_scaled(0.0, std))
                .collect(),
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let b = x.batch();
        assert_eq!(x.channels(), self.in_features);
        assert_eq!(x.spatial(), 1, "affine layers expect H = W = 1");
        let mut out = Tensor::zeros(b, self.out_features, 1, 1);
        for bi in 0..b {
            let row = &x.data()[bi * self.in_features..(bi + 1) * self.in_features];
            for o in 0..self.out_features {
                let weights = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = self.bias[o];
                for (wv, xv) in weights.iter().zip(row) {
                    acc += wv * xv;
                }
                out.data_mut()[bi * self.out_features + o] = acc;
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor, grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let b = x.batch();
        let mut d_input = Tensor::zeros(b, self.in_features, 1, 1);
        let mut d_weight = vec![0.0; self.weight.len()];
        let mut d_bias = vec![0.0; self.out_features];
        for bi in 0..b {
            let row = &x.data()[bi * self.in_features..(bi + 1) * self.in_features];
            let g_row = &grad.data()[bi * self.out_features..(bi + 1) * self.out_features];
            for o in 0..self.out_features {
                let g = g_row[o];
                d_bias[o] += g;
                let weights = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                let dw = &mut d_weight[o * self.in_features..(o + 1) * self.in_features];
                let dx = &mut d_input.data_mut()[bi * self.in_features..(bi + 1) * self.in_features];
                for i in 0..self.in_features {
                    dw[i] += g * row[i];
                    dx[i] += g * weights[i];
                }
            }
        }
        (d_input, d_weight, d_bias)
    }

    /// Appends zero-initialized output rows; existing logits are unchanged.
    pub fn grow_rows(&mut self, extra: usize) {
        self.out_features += extra;
        self.weight.extend(std::iter::repeat(0.0).take(extra * self.in_features));
        self.bias.extend(std::iter::repeat(0.0).take(extra));
    }
}

/// Valid (unpadded) convolution with a square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Row-major `out x in x k x k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: (0..out_channels * fan_in)
                .map(|_| rng.normal_scaled(0.0, std))
                .collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [b, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels);
        let (oh, ow) = self.out_dims(h, w);
        let k = self.kernel;
        let mut out = Tensor::zeros(b, self.out_channels, oh, ow);
        for bi in 0..b {
            for oc in 0..self.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = self.bias[oc];
                        for ic in 0..self.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = self.weight
                                        [((oc * self.in_channels + ic) * k + ky) * k + kx];
                                    acc += wv
                                        * x.get(bi, ic, oy * self.stride + ky, ox * self.stride + kx);
                                }
                            }
                        }
                        out.set(bi, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor, grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let [b, _, h, w] = x.shape();
        let (oh, ow) = self.out_dims(h, w);
        let k = self.kernel;
        let mut d_input = Tensor::zeros(b, self.in_channels, h, w);
        let mut d_weight = vec![0.0; self.weight.len()];
        let mut d_bias = vec![0.0; self.out_channels];
        for bi in 0..b {
            for oc in 0..self.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad.get(bi, oc, oy, ox);
                        d_bias[oc] += g;
                        for ic in 0..self.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                                    let iy = oy * self.stride + ky;
                                    let ix = ox * self.stride + kx;
                                    d_weight[widx] += g * x.get(bi, ic, iy, ix);
                                    let di = d_input.index(bi, ic, iy, ix);
                                    d_input.data_mut()[di] += g * self.weight[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
        (d_input, d_weight, d_bias)
    }
}

/// How the model's normalization layers are configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub groups: usize,
    pub ablation: AblationFlags,
    pub bessel: bool,
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            groups: 1,
            ablation: AblationFlags::default(),
            bessel: false,
        }
    }

    pub fn build(&self, channels: usize) -> NormLayer {
        let mut layer = NormLayer::new(self.kind, channels);
        layer.state.groups = self.groups;
        layer.state.ablation = self.ablation;
        layer.state.bessel_on_running_var = self.bessel;
        layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BodyLayer {
    Affine(AffineLayer),
    Conv(ConvLayer),
    Norm(NormLayer),
    Relu,
    GlobalAvgPool,
}

#[derive(Debug)]
pub enum BodyCache {
    Affine { input: Tensor },
    Conv { input: Tensor },
    Norm(NormCache),
    Relu { output: Tensor },
    Gap { in_shape: [usize; 4] },
}

/// Per-layer parameter gradients, mirroring the body layout.
#[derive(Debug)]
pub enum BodyGrads {
    Affine { d_weight: Vec<f64>, d_bias: Vec<f64> },
    Conv { d_weight: Vec<f64>, d_bias: Vec<f64> },
    Norm { d_gamma: Vec<f64>, d_beta: Vec<f64> },
    None,
}

#[derive(Debug)]
pub struct ForwardCache {
    body: Vec<BodyCache>,
    head_input: Tensor,
}

/// Cache for the eval-mode gradient pass used when retraining gamma/beta
/// under frozen running statistics.
#[derive(Debug)]
pub enum EvalCache {
    Affine { input: Tensor },
    Conv { input: Tensor },
    NormFrozen { input: Tensor },
    NormGn { cache: crate::norm::GnCache },
    NormCn { gn_output: Tensor, gn_cache: crate::norm::GnCache },
    Relu { output: Tensor },
    Gap { in_shape: [usize; 4] },
}

#[derive(Debug)]
pub struct EvalForward {
    body: Vec<EvalCache>,
    head_input: Tensor,
}

#[derive(Debug)]
pub struct ModelGrads {
    pub body: Vec<BodyGrads>,
    pub d_head_weight: Vec<f64>,
    pub d_head_bias: Vec<f64>,
}

/// The harness model: a body of blocks plus a growable linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub body: Vec<BodyLayer>,
    pub head: AffineLayer,
}

impl TinyModel {
    /// Affine+norm+rectifier blocks on flat features; two blocks by default.
    pub fn mlp(
        input_dim: usize,
        hidden: usize,
        norm: NormSpec,
        initial_classes: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self::mlp_with_depth(input_dim, hidden, 2, norm, initial_classes, rng)
    }

    pub fn mlp_with_depth(
        input_dim: usize,
        hidden: usize,
        blocks: usize,
        norm: NormSpec,
        initial_classes: usize,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(blocks >= 1);
        let mut body = Vec::with_capacity(blocks * 3);
        let mut in_dim = input_dim;
        for _ in 0..blocks {
            body.push(BodyLayer::Affine(AffineLayer::new(in_dim, hidden, rng)));
            body.push(BodyLayer::Norm(norm.build(hidden)));
            body.push(BodyLayer::Relu);
            in_dim = hidden;
        }
        Self {
            body,
            head: AffineLayer::new(hidden, initial_classes, rng),
        }
    }

    /// Two conv+norm+rectifier blocks for image tensors, pooled to a vector.
    pub fn cnn(in_channels: usize, norm: NormSpec, initial_classes: usize, rng: &mut SeededRng) -> Self {
        let c1 = 8;
        let c2 = 16;
        let body = vec![
            BodyLayer::Conv(ConvLayer::new(in_channels, c1, 3, 2, rng)),
            BodyLayer::Norm(norm.build(c1)),
            BodyLayer::Relu,
            BodyLayer::Conv(ConvLayer::new(c1, c2, 3, 2, rng)),
            BodyLayer::Norm(norm.build(c2)),
            BodyLayer::Relu,
            BodyLayer::GlobalAvgPool,
        ];
        Self {
            body,
            head: AffineLayer::new(c2, initial_classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.head.out_features
    }

    pub fn grow_head(&mut self, extra: usize) {
        self.head.grow_rows(extra);
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor,
        comp: BatchComposition,
    ) -> Result<(Tensor, ForwardCache)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.body.len());
        for layer in self.body.iter_mut() {
            match layer {
                BodyLayer::Affine(a) => {
                    let out = a.forward(&cur);
                    caches.push(BodyCache::Affine { input: cur });
                    cur = out;
                }
                BodyLayer::Conv(c) => {
                    let out = c.forward(&cur);
                    caches.push(BodyCache::Conv { input: cur });
                    cur = out;
                }
                BodyLayer::Norm(n) => {
                    let (out, cache) = n.forward_train(&cur, comp)?;
                    caches.push(BodyCache::Norm(cache));
                    cur = out;
                }
                BodyLayer::Relu => {
                    let out = cur.map(|v| v.max(0.0));
                    caches.push(BodyCache::Relu { output: out.clone() });
                    cur = out;
                }
                BodyLayer::GlobalAvgPool => {
                    let out = global_avg_pool(&cur);
                    caches.push(BodyCache::Gap { in_shape: cur.shape() });
                    cur = out;
                }
            }
        }
        let logits = self.head.forward(&cur);
        Ok((
            logits,
            ForwardCache {
                body: caches,
                head_input: cur,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.body {
            cur = match layer {
                BodyLayer::Affine(a) => a.forward(&cur),
                BodyLayer::Conv(c) => c.forward(&cur),
                BodyLayer::Norm(n) => n.forward_eval(&cur)?,
                BodyLayer::Relu => cur.map(|v| v.max(0.0)),
                BodyLayer::GlobalAvgPool => global_avg_pool(&cur),
            };
        }
        Ok(self.head.forward(&cur))
    }

    /// Returns the gradient with respect to the model input alongside the
    /// parameter gradients.
    pub fn backward(&self, d_logits: &Tensor, cache: ForwardCache) -> (Tensor, ModelGrads) {
        let ForwardCache { body, head_input } = cache;
        let (mut grad, d_head_weight, d_head_bias) = self.head.backward(&head_input, d_logits);

        let mut body_grads: Vec<BodyGrads> = Vec::with_capacity(self.body.len());
        for (layer, layer_cache) in self.body.iter().zip(body).rev() {
            match (layer, layer_cache) {
                (BodyLayer::Affine(a), BodyCache::Affine { input }) => {
                    let (dx, dw, db) = a.backward(&input, &grad);
                    body_grads.push(BodyGrads::Affine {
                        d_weight: dw,
                        d_bias: db,
                    });
                    grad = dx;
                }
                (BodyLayer::Conv(c), BodyCache::Conv { input }) => {
                    let (dx, dw, db) = c.backward(&input, &grad);
                    body_grads.push(BodyGrads::Conv {
                        d_weight: dw,
                        d_bias: db,
                    });
                    grad = dx;
                }
                (BodyLayer::Norm(n), BodyCache::Norm(norm_cache)) => {
                    let (dx, dg, db) = n.backward(&grad, norm_cache);
                    body_grads.push(BodyGrads::Norm {
                        d_gamma: dg,
                        d_beta: db,
                    });
                    grad = dx;
                }
                (BodyLayer::Relu, BodyCache::Relu { output }) => {
                    let mut dx = grad;
                    for (g, o) in dx.data_mut().iter_mut().zip(output.data()) {
                        if *o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    body_grads.push(BodyGrads::None);
                    grad = dx;
                }
                (BodyLayer::GlobalAvgPool, BodyCache::Gap { in_shape }) => {
                    grad = global_avg_pool_backward(&grad, &in_shape);
                    body_grads.push(BodyGrads::None);
                }
                _ => panic!("cache does not line up with the body"),
            }
        }
        body_grads.reverse();
        (
            grad,
            ModelGrads {
                body: body_grads,
                d_head_weight,
                d_head_bias,
            },
        )
    }

    /// Plain SGD with weight decay on every trainable parameter.
    pub fn sgd_step(&mut self, grads: &ModelGrads, lr: f64, weight_decay: f64) {
        for (layer, grad) in self.body.iter_mut().zip(&grads.body) {
            match (layer, grad) {
                (BodyLayer::Affine(a), BodyGrads::Affine { d_weight, d_bias }) => {
                    apply_sgd(&mut a.weight, d_weight, lr, weight_decay);
                    apply_sgd(&mut a.bias, d_bias, lr, weight_decay);
                }
                (BodyLayer::Conv(c), BodyGrads::Conv { d_weight, d_bias }) => {
                    apply_sgd(&mut c.weight, d_weight, lr, weight_decay);
                    apply_sgd(&mut c.bias, d_bias, lr, weight_decay);
                }
                (BodyLayer::Norm(n), BodyGrads::Norm { d_gamma, d_beta }) => {
                    if n.has_affine() {
                        apply_sgd(&mut n.state.gamma, d_gamma, lr, weight_decay);
                        apply_sgd(&mut n.state.beta, d_beta, lr, weight_decay);
                    }
                }
                (BodyLayer::Relu, BodyGrads::None) | (BodyLayer::GlobalAvgPool, BodyGrads::None) => {}
                _ => panic!("gradients do not line up with the body"),
            }
        }
        apply_sgd(&mut self.head.weight, &grads.d_head_weight, lr, weight_decay);
        apply_sgd(&mut self.head.bias, &grads.d_head_bias, lr, weight_decay);
    }

    /// Updates only the normalization gamma/beta parameters.
    pub fn sgd_step_norm_affine_only(&mut self, grads: &ModelGrads, lr: f64, weight_decay: f64) {
        for (layer, grad) in self.body.iter_mut().zip(&grads.body) {
            if let (BodyLayer::Norm(n), BodyGrads::Norm { d_gamma, d_beta }) = (layer, grad) {
                if n.has_affine() {
                    apply_sgd(&mut n.state.gamma, d_gamma, lr, weight_decay);
                    apply_sgd(&mut n.state.beta, d_beta, lr, weight_decay);
                }
            }
        }
    }

    /// Replaces every normalization layer's running statistics with the exact
    /// aggregate statistics of its input activations over this batch, feeding
    /// each layer the activations produced under the already-updated earlier
    /// layers. Idempotent for a fixed input.
    pub fn recompute_norm_stats(&mut self, x: &Tensor) -> Result<()> {
        let mut cur = x.clone();
        for layer in self.body.iter_mut() {
            cur = match layer {
                BodyLayer::Affine(a) => a.forward(&cur),
                BodyLayer::Conv(c) => c.forward(&cur),
                BodyLayer::Norm(n) => n.recompute_stats(&cur)?,
                BodyLayer::Relu => cur.map(|v| v.max(0.0)),
                BodyLayer::GlobalAvgPool => global_avg_pool(&cur),
            };
        }
        Ok(())
    }

    /// Eval-mode forward that also records what a gradient pass needs. Under
    /// frozen running statistics the batch-style layers are fixed per-channel
    /// affine maps, so this graph differs from the training one.
    pub fn forward_eval_cached(&self, x: &Tensor) -> Result<(Tensor, EvalForward)> {
        use crate::norm::gn_forward_train;
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.body.len());
        for layer in &self.body {
            match layer {
                BodyLayer::Affine(a) => {
                    let out = a.forward(&cur);
                    caches.push(EvalCache::Affine { input: cur });
                    cur = out;
                }
                BodyLayer::Conv(c) => {
                    let out = c.forward(&cur);
                    caches.push(EvalCache::Conv { input: cur });
                    cur = out;
                }
                BodyLayer::Norm(n) => match n.kind {
                    NormKind::Gn => {
                        let (out, cache) = gn_forward_train(&cur, n.state.groups, n.state.epsilon)?;
                        caches.push(EvalCache::NormGn { cache });
                        cur = out;
                    }
                    NormKind::Cn => {
                        let (z, gn_cache) =
                            gn_forward_train(&cur, n.state.groups, n.state.epsilon)?;
                        let out = frozen_norm_forward(&z, n);
                        caches.push(EvalCache::NormCn {
                            gn_output: z,
                            gn_cache,
                        });
                        cur = out;
                    }
                    _ => {
                        let out = frozen_norm_forward(&cur, n);
                        caches.push(EvalCache::NormFrozen { input: cur });
                        cur = out;
                    }
                },
                BodyLayer::Relu => {
                    let out = cur.map(|v| v.max(0.0));
                    caches.push(EvalCache::Relu { output: out.clone() });
                    cur = out;
                }
                BodyLayer::GlobalAvgPool => {
                    caches.push(EvalCache::Gap { in_shape: cur.shape() });
                    cur = global_avg_pool(&cur);
                }
            }
        }
        let logits = self.head.forward(&cur);
        Ok((
            logits,
            EvalForward {
                body: caches,
                head_input: cur,
            },
        ))
    }

    /// Backward through the eval-mode graph (frozen running statistics).
    pub fn backward_eval(&self, d_logits: &Tensor, cache: EvalForward) -> ModelGrads {
        use crate::norm::gn_backward;
        let EvalForward { body, head_input } = cache;
        let (mut grad, d_head_weight, d_head_bias) = self.head.backward(&head_input, d_logits);

        let mut body_grads: Vec<BodyGrads> = Vec::with_capacity(self.body.len());
        for (layer, layer_cache) in self.body.iter().zip(body).rev() {
            match (layer, layer_cache) {
                (BodyLayer::Affine(a), EvalCache::Affine { input }) => {
                    let (dx, dw, db) = a.backward(&input, &grad);
                    body_grads.push(BodyGrads::Affine { d_weight: dw, d_bias: db });
                    grad = dx;
                }
                (BodyLayer::Conv(c), EvalCache::Conv { input }) => {
                    let (dx, dw, db) = c.backward(&input, &grad);
                    body_grads.push(BodyGrads::Conv { d_weight: dw, d_bias: db });
                    grad = dx;
                }
                (BodyLayer::Norm(n), EvalCache::NormFrozen { input }) => {
                    let (dx, dg, db) = frozen_norm_backward(&input, &grad, n);
                    body_grads.push(BodyGrads::Norm { d_gamma: dg, d_beta: db });
                    grad = dx;
                }
                (BodyLayer::Norm(n), EvalCache::NormCn { gn_output, gn_cache }) => {
                    let (dz, dg, db) = frozen_norm_backward(&gn_output, &grad, n);
                    body_grads.push(BodyGrads::Norm { d_gamma: dg, d_beta: db });
                    grad = gn_backward(&dz, gn_cache);
                }
                (BodyLayer::Norm(n), EvalCache::NormGn { cache }) => {
                    let channels = n.state.channels();
                    body_grads.push(BodyGrads::Norm {
                        d_gamma: vec![0.0; channels],
                        d_beta: vec![0.0; channels],
                    });
                    grad = gn_backward(&grad, cache);
                }
                (BodyLayer::Relu, EvalCache::Relu { output }) => {
                    let mut dx = grad;
                    for (g, o) in dx.data_mut().iter_mut().zip(output.data()) {
                        if *o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    body_grads.push(BodyGrads::None);
                    grad = dx;
                }
                (BodyLayer::GlobalAvgPool, EvalCache::Gap { in_shape }) => {
                    grad = global_avg_pool_backward(&grad, &in_shape);
                    body_grads.push(BodyGrads::None);
                }
                _ => panic!("eval cache does not line up with the body"),
            }
        }
        body_grads.reverse();
        ModelGrads {
            body: body_grads,
            d_head_weight,
            d_head_bias,
        }
    }

    /// All trainable parameters flattened (body, then head); used by tests
    /// and the checkpoint format.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.body {
            match layer {
                BodyLayer::Affine(a) => {
                    out.extend_from_slice(&a.weight);
                    out.extend_from_slice(&a.bias);
                }
                BodyLayer::Conv(c) => {
                    out.extend_from_slice(&c.weight);
                    out.extend_from_slice(&c.bias);
                }
                BodyLayer::Norm(n) => {
                    out.extend_from_slice(&n.state.gamma);
                    out.extend_from_slice(&n.state.beta);
                    out.extend_from_slice(&n.state.running_mean);
                    out.extend_from_slice(&n.state.running_var);
                }
                BodyLayer::Relu | BodyLayer::GlobalAvgPool => {}
            }
        }
        out.extend_from_slice(&self.head.weight);
        out.extend_from_slice(&self.head.bias);
        out
    }

    /// Restores parameters from a [`flat_params`](Self::flat_params) vector.
    pub fn load_flat_params(&mut self, params: &[f64]) -> std::result::Result<(), String> {
        let mut offset = 0;
        let mut take = |len: usize| -> std::result::Result<std::ops::Range<usize>, String> {
            if offset + len > params.len() {
                return Err(format!(
                    "parameter vector too short: need {} more at offset {offset}",
                    len
                ));
            }
            let range = offset..offset + len;
            offset += len;
            Ok(range)
        };
        for layer in self.body.iter_mut() {
            match layer {
                BodyLayer::Affine(a) => {
                    let r = take(a.weight.len())?;
                    a.weight.copy_from_slice(&params[r]);
                    let r = take(a.bias.len())?;
                    a.bias.copy_from_slice(&params[r]);
                }
                BodyLayer::Conv(c) => {
                    let r = take(c.weight.len())?;
                    c.weight.copy_from_slice(&params[r]);
                    let r = take(c.bias.len())?;
                    c.bias.copy_from_slice(&params[r]);
                }
                BodyLayer::Norm(n) => {
                    let channels = n.state.channels();
                    let r = take(channels)?;
                    n.state.gamma.copy_from_slice(&params[r]);
                    let r = take(channels)?;
                    n.state.beta.copy_from_slice(&params[r]);
                    let r = take(channels)?;
                    n.state.running_mean.copy_from_slice(&params[r]);
                    let r = take(channels)?;
                    n.state.running_var.copy_from_slice(&params[r]);
                }
                BodyLayer::Relu | BodyLayer::GlobalAvgPool => {}
            }
        }
        let r = take(self.head.weight.len())?;
        self.head.weight.copy_from_slice(&params[r]);
        let r = take(self.head.bias.len())?;
        self.head.bias.copy_from_slice(&params[r]);
        if offset != params.len() {
            return Err(format!(
                "parameter vector too long: {} of {} consumed",
                offset,
                params.len()
            ));
        }
        Ok(())
    }

    /// Parameters excluding normalization layers; used to verify freezing.
    pub fn non_norm_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.body {
            match layer {
                BodyLayer::Affine(a) => {
                    out.extend_from_slice(&a.weight);
                    out.extend_from_slice(&a.bias);
                }
                BodyLayer::Conv(c) => {
                    out.extend_from_slice(&c.weight);
                    out.extend_from_slice(&c.bias);
                }
                _ => {}
            }
        }
        out.extend_from_slice(&self.head.weight);
        out.extend_from_slice(&self.head.bias);
        out
    }
}

fn frozen_norm_forward(z: &Tensor, layer: &NormLayer) -> Tensor {
    crate::norm::bn_forward_eval(z, &layer.state)
}

/// Backward for `y = gamma * (z - rm)/sqrt(rv + eps) + beta` with the running
/// statistics treated as constants.
fn frozen_norm_backward(
    z: &Tensor,
    grad: &Tensor,
    layer: &NormLayer,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = z.shape();
    let spatial = h * w;
    let state = &layer.state;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut dx = Tensor::zeros(b, c, h, w);
    for bi in 0..b {
        for ci in 0..c {
            let inv = 1.0 / (state.running_var[ci] + state.epsilon).sqrt();
            let start = z.index(bi, ci, 0, 0);
            for off in 0..spatial {
                let g = grad.data()[start + off];
                let zn = (z.data()[start + off] - state.running_mean[ci]) * inv;
                d_gamma[ci] += g * zn;
                d_beta[ci] += g;
                dx.data_mut()[start + off] = g * state.gamma[ci] * inv;
            }
        }
    }
    (dx, d_gamma, d_beta)
}

fn apply_sgd(params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + weight_decay * *p);
    }
}

fn global_avg_pool(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.shape();
    let inv = 1.0 / (h * w) as f64;
    Tensor::from_fn(b, c, 1, 1, |bi, ci, _, _| {
        let start = x.index(bi, ci, 0, 0);
        x.data()[start..start + h * w].iter().sum::<f64>() * inv
    })
}

fn global_avg_pool_backward(grad: &Tensor, in_shape: &[usize; 4]) -> Tensor {
    let [b, c, h, w] = *in_shape;
    let inv = 1.0 / (h * w) as f64;
    Tensor::from_fn(b, c, h, w, |bi, ci, _, _| grad.get(bi, ci, 0, 0) * inv)
}
