//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Parameters of a network live in one flat `Vec<f64>`; each layer is a
//! window into it. Gradients use the same layout, so optimizers, clipping
//! and finite-difference checks work on plain slices.
//!
//! Activations are batched row-major matrices (`batch × width`).

use rand::Rng;

/// Layer-norm epsilon, matching the common framework default.
const LN_EPS: f64 = 1e-5;

// Branch-free on purpose: the sign of activations is close to random, and `exp` saturates cleanly at both ends.
#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// SiLU values and their derivatives, sharing one exponential per element.
fn silu_and_grad(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut f = Vec::with_capacity(x.len());
    let mut g = Vec::with_capacity(x.len());
    for &v in x {
        let s = sigmoid(v);
        f.push(v * s);
        g.push(s * (1.0 + v * (1.0 - s)));
    }
    (f, g)
}

/// `out[b×o] = x[b×i] · w[o×i]ᵀ + bias[o]`
fn linear_forward(x: &[f64], batch: usize, w: &[f64], bias: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), batch * n_in);
    let mut out = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    unsafe {
        matrixmultiply::dgemm(
            batch,
            n_in,
            n_out,
            1.0,
            x.as_ptr(),
            n_in as isize,
            1,
            w.as_ptr(),
            1,
            n_in as isize,
            1.0,
            out.as_mut_ptr(),
            n_out as isize,
            1,
        );
    }
    out
}

/// Accumulates `dw += dyᵀ x`, `db += Σ_rows dy` and optionally returns `dx = dy · w`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    w: &[f64],
    n_in: usize,
    n_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    unsafe {
        matrixmultiply::dgemm(
            n_out,
            batch,
            n_in,
            1.0,
            dy.as_ptr(),
            1,
            n_out as isize,
            x.as_ptr(),
            n_in as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
    for row in dy.chunks_exact(n_out) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![0.0; batch * n_in];
    unsafe {
        matrixmultiply::dgemm(
            batch,
            n_out,
            n_in,
            1.0,
            dy.as_ptr(),
            n_out as isize,
            1,
            w.as_ptr(),
            n_in as isize,
            1,
            0.0,
            dx.as_mut_ptr(),
            n_in as isize,
            1,
        );
    }
    Some(dx)
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm_forward(x: &[f64], width: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let batch = x.len() / width;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; batch];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        let row = &x[b * width..(b + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[b] = rs;
        for k in 0..width {
            let xh = (row[k] - mean) * rs;
            xhat[b * width + k] = xh;
            y[b * width + k] = xh * gain[k] + bias[k];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &[f64], width: usize, cache: &LnCache, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let batch = dy.len() / width;
    let mut dx = vec![0.0; dy.len()];
    let inv_w = 1.0 / width as f64;
    for b in 0..batch {
        let dyr = &dy[b * width..(b + 1) * width];
        let xh = &cache.xhat[b * width..(b + 1) * width];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for k in 0..width {
            dgain[k] += dyr[k] * xh[k];
            dbias[k] += dyr[k];
            let dxh = dyr[k] * gain[k];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[k];
        }
        let rs = cache.rstd[b];
        for k in 0..width {
            let dxh = dyr[k] * gain[k];
            dx[b * width + k] = rs * (dxh - inv_w * sum_dxh - xh[k] * inv_w * sum_dxh_xh);
        }
    }
    dx
}

/// Fills `w` with `U(-1/√fan_in, 1/√fan_in)`.
fn init_uniform<R: Rng>(w: &mut [f64], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in w {
        *v = rng.random_range(-bound..bound);
    }
}

/// Window into a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len]
    }
    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len]
    }
}

/// A named tensor in a network layout, with its shape (rows, cols) or (len,).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub span: Span,
}

struct LayoutBuilder {
    slots: Vec<TensorSlot>,
    len: usize,
}

impl LayoutBuilder {
    fn new() -> Self {
        Self { slots: Vec::new(), len: 0 }
    }
    fn push(&mut self, name: String, shape: Vec<usize>) -> Span {
        let len = shape.iter().product();
        let span = Span { offset: self.len, len };
        self.len += len;
        self.slots.push(TensorSlot { name, shape, span });
        span
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockSpans {
    ln1_g: Span,
    ln1_b: Span,
    fc1_w: Span,
    fc1_b: Span,
    ln2_g: Span,
    ln2_b: Span,
    fc2_w: Span,
    fc2_b: Span,
}

/// Shape of a residual bottleneck MLP:
/// `Linear(in→H) → SiLU → blocks × [LN → SiLU → Linear(H→H/2) → LN → SiLU → dropout → Linear(H/2→H)] + skip → Linear(H→out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResMlpShape {
    pub input: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub output: usize,
}

impl ResMlpShape {
    pub fn bottleneck(&self) -> usize {
        (self.hidden / 2).max(1)
    }
}

/// Residual bottleneck MLP with flat parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ResMlp {
    shape: ResMlpShape,
    slots: Vec<TensorSlot>,
    in_w: Span,
    in_b: Span,
    blocks: Vec<BlockSpans>,
    out_w: Span,
    out_b: Span,
    pub params: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    s1: Vec<f64>,
    g1: Vec<f64>,
    ln2: LnCache,
    g2: Vec<f64>,
    mask: Option<Vec<f64>>,
    d2: Vec<f64>,
}

/// Activations saved by [`ResMlp::forward`] for the backward pass.
pub struct ResMlpCache {
    batch: usize,
    input: Vec<f64>,
    g0: Vec<f64>,
    blocks: Vec<BlockCache>,
    last: Vec<f64>,
}

/// Dropout masks for one forward pass, one `batch × H/2` matrix per block,
/// already scaled by `1/(1-p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks(pub Vec<Vec<f64>>);

impl DropoutMasks {
    pub fn sample<R: Rng>(shape: &ResMlpShape, batch: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = batch * shape.bottleneck();
        DropoutMasks(
            (0..shape.blocks)
                .map(|_| (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 }).collect())
                .collect(),
        )
    }
}

impl ResMlp {
    /// Zero-initialized network (layer-norm gains set to one).
    pub fn zeros(shape: ResMlpShape) -> Self {
        let h = shape.hidden;
        let hb = shape.bottleneck();
        let mut lb = LayoutBuilder::new();
        let in_w = lb.push("in.weight".into(), vec![h, shape.input]);
        let in_b = lb.push("in.bias".into(), vec![h]);
        let mut blocks = Vec::with_capacity(shape.blocks);
        for k in 0..shape.blocks {
            blocks.push(BlockSpans {
                ln1_g: lb.push(format!("block{k}.ln1.weight"), vec![h]),
                ln1_b: lb.push(format!("block{k}.ln1.bias"), vec![h]),
                fc1_w: lb.push(format!("block{k}.fc1.weight"), vec![hb, h]),
                fc1_b: lb.push(format!("block{k}.fc1.bias"), vec![hb]),
                ln2_g: lb.push(format!("block{k}.ln2.weight"), vec![hb]),
                ln2_b: lb.push(format!("block{k}.ln2.bias"), vec![hb]),
                fc2_w: lb.push(format!("block{k}.fc2.weight"), vec![h, hb]),
                fc2_b: lb.push(format!("block{k}.fc2.bias"), vec![h]),
            });
        }
        let out_w = lb.push("out.weight".into(), vec![shape.output, h]);
        let out_b = lb.push("out.bias".into(), vec![shape.output]);
        let mut params = vec![0.0; lb.len];
        for b in &blocks {
            b.ln1_g.of_mut(&mut params).fill(1.0);
            b.ln2_g.of_mut(&mut params).fill(1.0);
        }
        Self { shape, slots: lb.slots, in_w, in_b, blocks, out_w, out_b, params }
    }

    /// Uniform fan-in initialization for every linear layer.
    pub fn init<R: Rng>(shape: ResMlpShape, rng: &mut R) -> Self {
        let mut net = Self::zeros(shape);
        let h = shape.hidden;
        let hb = shape.bottleneck();
        let mut fill = |span: Span, fan: usize, params: &mut Vec<f64>| init_uniform(span.of_mut(params), fan, rng);
        fill(net.in_w, shape.input, &mut net.params);
        fill(net.in_b, shape.input, &mut net.params);
        for b in net.blocks.clone() {
            fill(b.fc1_w, h, &mut net.params);
            fill(b.fc1_b, h, &mut net.params);
            fill(b.fc2_w, hb, &mut net.params);
            fill(b.fc2_b, hb, &mut net.params);
        }
        fill(net.out_w, h, &mut net.params);
        fill(net.out_b, h, &mut net.params);
        net
    }

    pub fn shape(&self) -> ResMlpShape {
        self.shape
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    /// Span of the output head (weight, bias).
    pub fn head_spans(&self) -> (Span, Span) {
        (self.out_w, self.out_b)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensors_json(&self) -> Vec<serde_json::Value> {
        tensors_to_json(&self.slots, &self.params)
    }

    pub fn load_tensors_json(&mut self, values: &[serde_json::Value]) -> Result<(), String> {
        tensors_from_json(&self.slots, &mut self.params, values)
    }

    /// Batched forward pass. `x` is `batch × input`; returns `batch × output`.
    pub fn forward(&self, x: &[f64], batch: usize, masks: Option<&DropoutMasks>) -> (Vec<f64>, ResMlpCache) {
        let s = &self.shape;
        let h = s.hidden;
        let hb = s.bottleneck();
        let p = &self.params;
        let a0 = linear_forward(x, batch, self.in_w.of(p), self.in_b.of(p), s.input, h);
        let (mut cur, g0) = silu_and_grad(&a0);
        let mut caches = Vec::with_capacity(s.blocks);
        for (k, b) in self.blocks.iter().enumerate() {
            let (y1, ln1) = layer_norm_forward(&cur, h, b.ln1_g.of(p), b.ln1_b.of(p));
            let (s1, g1) = silu_and_grad(&y1);
            let f1 = linear_forward(&s1, batch, b.fc1_w.of(p), b.fc1_b.of(p), h, hb);
            let (y2, ln2) = layer_norm_forward(&f1, hb, b.ln2_g.of(p), b.ln2_b.of(p));
            let mask = masks.map(|m| m.0[k].clone());
            let (mut d2, g2) = silu_and_grad(&y2);
            if let Some(m) = &mask {
                d2.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
            }
            let mut f2 = linear_forward(&d2, batch, b.fc2_w.of(p), b.fc2_b.of(p), hb, h);
            for (o, xi) in f2.iter_mut().zip(&cur) {
                *o += xi;
            }
            caches.push(BlockCache { ln1, s1, g1, ln2, g2, mask, d2 });
            cur = f2;
        }
        let out = linear_forward(&cur, batch, self.out_w.of(p), self.out_b.of(p), h, s.output);
        (out, ResMlpCache { batch, input: x.to_vec(), g0, blocks: caches, last: cur })
    }

    /// First stage whose output is not finite, if any: 0 is the input projection,
    /// `k + 1` is residual block `k`, `blocks + 1` is the output layer.
    pub fn nonfinite_stage(&self, cache: &ResMlpCache, out: &[f64]) -> Option<usize> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        // Each block's first activation reflects the stage that feeds it.
        for (k, b) in cache.blocks.iter().enumerate() {
            if !finite(&b.s1) {
                return Some(k);
            }
        }
        if !finite(&cache.last) {
            return Some(self.shape.blocks);
        }
        (!finite(out)).then_some(self.shape.blocks + 1)
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns `d loss / d input`.
    pub fn backward(&self, cache: &ResMlpCache, dout: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let s = &self.shape;
        let h = s.hidden;
        let hb = s.bottleneck();
        let p = &self.params;
        let batch = cache.batch;
        // A throwaway buffer keeps the code path identical when only input gradients are wanted.
        let mut scratch;
        let g: &mut [f64] = match grad.as_deref_mut() {
            Some(g) => g,
            None => {
                scratch = vec![0.0; p.len()];
                &mut scratch
            }
        };
        let mut dcur = {
            let (dw, rest) = split_two(g, self.out_w, self.out_b);
            linear_backward(&cache.last, dout, batch, self.out_w.of(p), h, s.output, dw, rest, true).unwrap()
        };
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dw2, db2) = split_two(g, b.fc2_w, b.fc2_b);
            let mut dd2 = linear_backward(&c.d2, &dcur, batch, b.fc2_w.of(p), hb, h, dw2, db2, true).unwrap();
            match &c.mask {
                Some(m) => {
                    for ((d, &g), &m) in dd2.iter_mut().zip(&c.g2).zip(m) {
                        *d *= m * g;
                    }
                }
                None => {
                    for (d, &g) in dd2.iter_mut().zip(&c.g2) {
                        *d *= g;
                    }
                }
            }
            let (dg2, dbeta2) = split_two(g, b.ln2_g, b.ln2_b);
            let df1 = layer_norm_backward(&dd2, hb, &c.ln2, b.ln2_g.of(p), dg2, dbeta2);
            let (dw1, db1) = split_two(g, b.fc1_w, b.fc1_b);
            let mut ds1 = linear_backward(&c.s1, &df1, batch, b.fc1_w.of(p), h, hb, dw1, db1, true).unwrap();
            for (d, &g) in ds1.iter_mut().zip(&c.g1) {
                *d *= g;
            }
            let (dg1, dbeta1) = split_two(g, b.ln1_g, b.ln1_b);
            let dx = layer_norm_backward(&ds1, h, &c.ln1, b.ln1_g.of(p), dg1, dbeta1);
            for (d, v) in dcur.iter_mut().zip(dx) {
                *d += v;
            }
        }
        for (d, &g) in dcur.iter_mut().zip(&cache.g0) {
            *d *= g;
        }
        let (dwi, dbi) = split_two(g, self.in_w, self.in_b);
        linear_backward(&cache.input, &dcur, batch, self.in_w.of(p), s.input, h, dwi, dbi, true).unwrap()
    }
}

/// Two disjoint mutable windows of the same buffer.
fn split_two(g: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    assert!(a.offset + a.len <= b.offset, "spans must be ordered and disjoint");
    let (lo, hi) = g.split_at_mut(b.offset);
    (&mut lo[a.offset..a.offset + a.len], &mut hi[..b.len])
}

/// Plain MLP: `Linear → SiLU → … → Linear`, widths given by `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<(Span, Span)>,
    slots: Vec<TensorSlot>,
    pub params: Vec<f64>,
}

pub struct MlpCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut lb = LayoutBuilder::new();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| (lb.push(format!("fc{k}.weight"), vec![w[1], w[0]]), lb.push(format!("fc{k}.bias"), vec![w[1]])))
            .collect();
        Self { dims: dims.to_vec(), layers, slots: lb.slots, params: vec![0.0; lb.len] }
    }

    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(dims);
        for (k, (w, b)) in net.layers.clone().into_iter().enumerate() {
            init_uniform(w.of_mut(&mut net.params), dims[k], rng);
            init_uniform(b.of_mut(&mut net.params), dims[k], rng);
        }
        net
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn tensors_json(&self) -> Vec<serde_json::Value> {
        tensors_to_json(&self.slots, &self.params)
    }

    pub fn load_tensors_json(&mut self, values: &[serde_json::Value]) -> Result<(), String> {
        tensors_from_json(&self.slots, &mut self.params, values)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpCache) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut cur = x.to_vec();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let z = linear_forward(&cur, batch, w.of(&self.params), b.of(&self.params), self.dims[k], self.dims[k + 1]);
            let next = if k + 1 < n { z.iter().map(|&v| silu(v)).collect() } else { z.clone() };
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(z);
        }
        (cur, MlpCache { batch, inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = self.layers.len();
        let mut d = dout.to_vec();
        for k in (0..n).rev() {
            if k + 1 < n {
                for (dv, &z) in d.iter_mut().zip(&cache.pre[k]) {
                    *dv *= silu_grad(z);
                }
            }
            let (w, b) = self.layers[k];
            let (dw, db) = split_two(grad, w, b);
            d = linear_backward(&cache.inputs[k], &d, cache.batch, w.of(&self.params), self.dims[k], self.dims[k + 1], dw, db, true)
                .unwrap();
        }
        d
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p *= 1.0 - lr * self.weight_decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Rescales the gradient blocks so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(parts: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = parts.iter().flat_map(|p| p.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        parts.iter_mut().for_each(|p| p.iter_mut().for_each(|g| *g *= s));
    }
    norm
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `t_max`.
pub fn cosine_lr(step: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    let t = step.min(t_max) as f64 / t_max.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Reads/writes named tensors as nested JSON arrays (matrices as rows).
fn tensors_to_json(slots: &[TensorSlot], params: &[f64]) -> Vec<serde_json::Value> {
    slots
        .iter()
        .map(|slot| {
            let data = slot.span.of(params);
            match slot.shape.as_slice() {
                [_, cols] => serde_json::Value::Array(data.chunks(*cols).map(|row| serde_json::json!(row)).collect()),
                _ => serde_json::json!(data),
            }
        })
        .collect()
}

fn tensors_from_json(slots: &[TensorSlot], params: &mut [f64], values: &[serde_json::Value]) -> Result<(), String> {
    if values.len() != slots.len() {
        return Err(format!("expected {} tensors, found {}", slots.len(), values.len()));
    }
    for (slot, value) in slots.iter().zip(values) {
        let mut flat = Vec::with_capacity(slot.span.len);
        flatten_json(value, &mut flat).map_err(|e| format!("{}: {e}", slot.name))?;
        if flat.len() != slot.span.len {
            return Err(format!("{}: expected {} values, found {}", slot.name, slot.span.len, flat.len()));
        }
        slot.span.of_mut(params).copy_from_slice(&flat);
    }
    Ok(())
}

fn flatten_json(v: &serde_json::Value, out: &mut Vec<f64>) -> Result<(), String> {
    match v {
        serde_json::Value::Array(items) => items.iter().try_for_each(|i| flatten_json(i, out)),
        serde_json::Value::Number(n) => {
            out.push(n.as_f64().ok_or("non-finite number")?);
            Ok(())
        }
        other => Err(format!("unexpected value {other}")),
    }
}
