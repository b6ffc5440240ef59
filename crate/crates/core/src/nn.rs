//! Fully-connected networks with manual backpropagation and Adam.
//!
//! Hidden layers apply an element-wise activation to `W·x + b`; the output
//! layer is affine only. Batches are row-major: one sample per row.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolfitError};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            t => Err(VolfitError::Checkpoint(format!(
                "unknown activation tag {t}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Weight matrix (`out × in`) and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inp: usize, out: usize) -> Self {
        Dense {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// Parameter gradients, laid out like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|x| x * k);
            l.bias.mapv_inplace(|x| x * k);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Flattened in checkpoint order (each layer's weights row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

/// Activations recorded by [`Mlp::forward`], consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

/// A fully-connected network together with its Adam moments.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden: Activation,
    adam_m: Vec<Dense>,
    adam_v: Vec<Dense>,
    step: u64,
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.hidden == other.hidden
            && self.adam_m == other.adam_m
            && self.adam_v == other.adam_v
            && self.step == other.step
    }
}

impl Mlp {
    /// All-zero network with layer sizes `dims = [d_0, …, d_K]`.
    pub fn zeros(dims: &[usize], hidden: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(VolfitError::Shape(format!("invalid layer sizes {dims:?}")));
        }
        let layers: Vec<Dense> = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let adam_m = layers.iter().map(Dense::zeros_like).collect();
        let adam_v = layers.iter().map(Dense::zeros_like).collect();
        Ok(Mlp {
            layers,
            hidden,
            adam_m,
            adam_v,
            step: 0,
            version: fresh_version(),
        })
    }

    /// Xavier-uniform weights `U(±√(6/(d_in+d_out)))`, zero biases.
    pub fn xavier<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden)?;
        for layer in &mut net.layers {
            let (out, inp) = layer.weight.dim();
            let bound = (6.0 / (inp + out) as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    /// Redraws the output layer as `U(±bound)` with zero bias so a fresh
    /// policy starts near the zero action.
    pub fn shrink_output<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        self.version = fresh_version();
        let last = self.layers.last_mut().unwrap();
        for w in last.weight.iter_mut() {
            *w = rng.random_range(-bound..=bound);
        }
        last.bias.fill(0.0);
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.ncols()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn adam_step_count(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(VolfitError::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(layer: &Dense, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = Self::affine(&self.layers[0], &x);
        for layer in &self.layers[1..] {
            let act = self.hidden;
            h.mapv_inplace(|v| act.apply(v));
            h = Self::affine(layer, &h.view());
        }
        Ok(h)
    }

    /// Single-sample convenience wrapper around [`Mlp::predict`].
    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| VolfitError::Shape(e.to_string()))?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass recording every layer input for [`Mlp::backward`].
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &inputs[i].view());
            if i == last {
                return Ok(ForwardCache {
                    inputs,
                    output: z,
                    version: self.version,
                });
            }
            let act = self.hidden;
            z.mapv_inplace(|v| act.apply(v));
            inputs.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse-mode gradients for a loss whose gradient with respect to the
    /// outputs is `out_grad`. Returns parameter gradients (when
    /// `with_params`) and the gradient with respect to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        out_grad: ArrayView2<f64>,
        with_params: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(VolfitError::StaleCache(
                "network changed since the forward pass".into(),
            ));
        }
        if out_grad.dim() != cache.output.dim() {
            return Err(VolfitError::Shape(format!(
                "output gradient {:?} vs output {:?}",
                out_grad.dim(),
                cache.output.dim()
            )));
        }
        let mut grads: Vec<Dense> = Vec::new();
        let mut delta = out_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            if with_params {
                grads.push(Dense {
                    weight: delta.t().dot(input),
                    bias: delta.sum_axis(Axis(0)),
                });
            }
            let mut dx = delta.dot(&layer.weight);
            if i > 0 {
                let act = self.hidden;
                Zip::from(&mut dx)
                    .and(input)
                    .for_each(|d, &y| *d *= act.derivative_from_output(y));
            }
            delta = dx;
        }
        let grads = with_params.then(|| {
            grads.reverse();
            Gradients { layers: grads }
        });
        Ok((grads, delta))
    }

    fn check_like(&self, layers: &[Dense]) -> Result<()> {
        let ok = layers.len() == self.layers.len()
            && layers
                .iter()
                .zip(&self.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim());
        if ok {
            Ok(())
        } else {
            Err(VolfitError::Shape("parameter layouts differ".into()))
        }
    }

    /// One bias-corrected Adam descent step.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        self.check_like(&grads.layers)?;
        self.step += 1;
        self.version = fresh_version();
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.lr, cfg.eps);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, m), v), g) in self
            .layers
            .iter_mut()
            .zip(&mut self.adam_m)
            .zip(&mut self.adam_v)
            .zip(&grads.layers)
        {
            Zip::from(&mut layer.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(update);
        }
        Ok(())
    }

    /// `self ← τ·online + (1 − τ)·self`.
    pub fn polyak_update(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        self.check_like(&online.layers)?;
        self.version = fresh_version();
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weight)
                .and(&o.weight)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
            Zip::from(&mut t.bias)
                .and(&o.bias)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        Ok(())
    }

    /// Copies parameters from `other` (Adam state untouched).
    pub fn copy_params_from(&mut self, other: &Mlp) -> Result<()> {
        self.polyak_update(other, 1.0)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Parameter `index` in [`Mlp::params_flat`] order.
    pub fn param_mut(&mut self, index: usize) -> Option<&mut f64> {
        self.version = fresh_version();
        let mut i = index;
        for layer in &mut self.layers {
            if i < layer.weight.len() {
                return layer.weight.as_slice_mut().map(|w| &mut w[i]);
            }
            i -= layer.weight.len();
            if i < layer.bias.len() {
                return Some(&mut layer.bias[i]);
            }
            i -= layer.bias.len();
        }
        None
    }

    /// Largest absolute parameter difference to `other`.
    pub fn max_abs_diff(&self, other: &Mlp) -> f64 {
        self.params_flat()
            .iter()
            .zip(other.params_flat())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Order-sensitive fingerprint of the parameters and Adam state.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: f64| {
            for byte in x.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for group in [&self.layers, &self.adam_m, &self.adam_v] {
            for x in flatten(group) {
                eat(x);
            }
        }
        eat(self.step as f64);
        h
    }

    /// Binary container:
    ///
    /// ```text
    /// b"VFNN" | u32 version = 1 | u32 layer count L | (L+1) × u64 dims
    /// | u8 hidden activation (0 relu, 1 tanh) | u64 adam step
    /// | params | adam first moments | adam second moments
    /// ```
    ///
    /// Each parameter block lists every layer's weights row-major followed by
    /// its bias, as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"VFNN")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for d in self.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[self.hidden.tag()])?;
        w.write_all(&self.step.to_le_bytes())?;
        for group in [&self.layers, &self.adam_m, &self.adam_v] {
            for x in flatten(group) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"VFNN" {
            return Err(VolfitError::Checkpoint("bad network magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(VolfitError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let n_layers = read_u32(&mut r)? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(VolfitError::Checkpoint(format!(
                "bad layer count {n_layers}"
            )));
        }
        let dims = (0..=n_layers)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let mut net = Mlp::zeros(&dims, Activation::from_tag(tag[0])?)?;
        net.step = read_u64(&mut r)?;
        for group in [&mut net.layers, &mut net.adam_m, &mut net.adam_v] {
            for layer in group.iter_mut() {
                for x in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                    *x = read_f64(&mut r)?;
                }
            }
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Adam state for a single scalar parameter (used for the log-temperature).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub step: u64,
}

impl ScalarAdam {
    /// Applies one descent step to `param` for gradient `grad`.
    pub fn step(&mut self, param: &mut f64, grad: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad;
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - cfg.beta1.powi(t));
        let v_hat = self.v / (1.0 - cfg.beta2.powi(t));
        *param -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Free-function form of [`Mlp::polyak_update`].
/// Largest relative gap between [`Mlp::backward`] and central differences
/// with step `h` of `L = Σ weights ⊙ F(x)`, over the listed parameters.
///
/// The relative gap is `|g − ĝ| / max(|g|, |ĝ|, 1e-6)`.
pub fn gradient_check(
    net: &Mlp,
    x: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    params: &[usize],
    h: f64,
) -> Result<f64> {
    let cache = net.forward(x)?;
    let (grads, _) = net.backward(&cache, weights, true)?;
    let analytic = grads.expect("parameter gradients requested").to_flat();
    let loss = |n: &Mlp| -> Result<f64> { Ok((&n.predict(x)? * &weights).sum()) };
    let flat = net.params_flat();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for &p in params {
        let g = *analytic
            .get(p)
            .ok_or_else(|| VolfitError::Shape(format!("parameter {p} out of range")))?;
        let base = flat[p];
        *probe.param_mut(p).expect("index checked") = base + h;
        let up = loss(&probe)?;
        *probe.param_mut(p).expect("index checked") = base - h;
        let down = loss(&probe)?;
        *probe.param_mut(p).expect("index checked") = base;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    Ok(worst)
}

pub fn polyak_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    target.polyak_update(online, tau)
}
