//! Residual reconstruction network `X_rec = X_u + f_cnn(X_u | θ)`.
//!
//! A network of depth `d > 0` has `d − 1` 3×3 convolutions (ReLU after each,
//! zero padding of one pixel so spatial size is preserved) followed by a 1×1
//! single-channel fusion convolution. Depth 0 has no CNN branch at all.
//!
//! The backward pass is written out by hand for the node types used here:
//! convolution, ReLU, the global skip addition and the Frobenius loss.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{ensure_shape, RealImage};

pub const DEFAULT_CHANNELS: usize = 16;
const CHECKPOINT_MAGIC: &[u8; 4] = b"KRN1";
const CHECKPOINT_VERSION: u32 = 1;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    w_off: usize,
    b_off: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.ksize * self.ksize
    }

    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        self.w_off + ((o * self.in_ch + i) * self.ksize + ky) * self.ksize + kx
    }
}

fn layer_plan(depth: usize, channels: usize) -> (Vec<LayerShape>, usize) {
    let mut layers = Vec::with_capacity(depth);
    let mut offset = 0;
    let mut in_ch = 1;
    for l in 0..depth {
        let last = l + 1 == depth;
        let (out_ch, ksize) = if last { (1, 1) } else { (channels, 3) };
        let w_len = out_ch * in_ch * ksize * ksize;
        layers.push(LayerShape {
            in_ch,
            out_ch,
            ksize,
            w_off: offset,
            b_off: offset + w_len,
        });
        offset += w_len + out_ch;
        in_ch = out_ch;
    }
    (layers, offset)
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// One Adam step with decoupled weight decay, applied in place.
pub fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if values.len() != grads.len() || state.m.len() != values.len() {
        return Err(Error::ShapeMismatch {
            expected: (values.len(), 1),
            got: (grads.len(), 1),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in values.iter_mut().enumerate() {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
    Ok(())
}

/// Weights, biases and optimizer state of the reconstruction network.
///
/// Equality compares shape, values and optimizer state. Each clone gets its
/// own identity, so a tape recorded on one copy is rejected by another.
#[derive(Debug)]
pub struct RecNetParams {
    depth: usize,
    channels: usize,
    layers: Vec<LayerShape>,
    values: Vec<f64>,
    adam: AdamState,
    id: u64,
    version: u64,
}

impl Clone for RecNetParams {
    fn clone(&self) -> Self {
        Self {
            depth: self.depth,
            channels: self.channels,
            layers: self.layers.clone(),
            values: self.values.clone(),
            adam: self.adam.clone(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl PartialEq for RecNetParams {
    fn eq(&self, other: &Self) -> bool {
        self.depth == other.depth
            && self.channels == other.channels
            && self.values == other.values
            && self.adam == other.adam
    }
}

impl RecNetParams {
    /// All-zero parameters; the network then returns its input unchanged.
    pub fn zeros(depth: usize, channels: usize) -> Result<Self> {
        if depth > 0 && channels == 0 {
            return Err(Error::param("channel count must be positive"));
        }
        let (layers, len) = layer_plan(depth, channels);
        Ok(Self {
            depth,
            channels,
            layers,
            values: vec![0.0; len],
            adam: AdamState::new(len),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    /// Seeded He-style uniform initialization, `U(±√(6/fan_in))`, zero biases.
    pub fn init(depth: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(depth, channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &params.layers {
            let fan_in = (layer.in_ch * layer.ksize * layer.ksize) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for w in &mut params.values[layer.w_off..layer.w_off + layer.weight_len()] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw parameter vector. Any outstanding tape
    /// becomes stale.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in out.values_mut() {
            *v *= s;
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.depth as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        for block in [&self.values, &self.adam.m, &self.adam.v] {
            for v in block.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r).map_err(|e| match e {
            Error::Io(io) => Error::format(path, io.to_string()),
            other => other,
        })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("<checkpoint>", "bad magic"));
        }
        let mut w4 = [0u8; 4];
        let mut w8 = [0u8; 8];
        r.read_exact(&mut w4)?;
        let version = u32::from_le_bytes(w4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("<checkpoint>", format!("unsupported version {version}")));
        }
        r.read_exact(&mut w4)?;
        let depth = u32::from_le_bytes(w4) as usize;
        r.read_exact(&mut w4)?;
        let channels = u32::from_le_bytes(w4) as usize;
        r.read_exact(&mut w8)?;
        let len = u64::from_le_bytes(w8) as usize;
        r.read_exact(&mut w8)?;
        let step = u64::from_le_bytes(w8);

        let mut params = Self::zeros(depth, channels)?;
        if params.values.len() != len {
            return Err(Error::format("<checkpoint>", "parameter count does not match header"));
        }
        params.adam.step = step;
        for block in [&mut params.values, &mut params.adam.m, &mut params.adam.v] {
            for v in block.iter_mut() {
                r.read_exact(&mut w8)?;
                *v = f64::from_le_bytes(w8);
            }
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(params)
    }
}

/// Layer inputs recorded by [`recnet_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape {
    params_id: u64,
    params_version: u64,
    dim: (usize, usize),
    inputs: Vec<Vec<f64>>,
}

impl ActivationTape {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn conv_forward(
    layer: &LayerShape,
    values: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let pad = (layer.ksize / 2) as isize;
    let mut out = vec![0.0; layer.out_ch * plane];
    for o in 0..layer.out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(values[layer.b_off + o]);
        for i in 0..layer.in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..layer.ksize {
                let dy = ky as isize - pad;
                for kx in 0..layer.ksize {
                    let dx = kx as isize - pad;
                    let wv = values[layer.weight(o, i, ky, kx)];
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grads` and returns the gradient
/// with respect to the layer input.
fn conv_backward(
    layer: &LayerShape,
    values: &[f64],
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    grads: &mut [f64],
) -> Vec<f64> {
    let plane = h * w;
    let pad = (layer.ksize / 2) as isize;
    let mut grad_in = vec![0.0; layer.in_ch * plane];
    for o in 0..layer.out_ch {
        let g = &grad_out[o * plane..(o + 1) * plane];
        grads[layer.b_off + o] += g.iter().sum::<f64>();
        for i in 0..layer.in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            let gin = &mut grad_in[i * plane..(i + 1) * plane];
            for ky in 0..layer.ksize {
                let dy = ky as isize - pad;
                for kx in 0..layer.ksize {
                    let dx = kx as isize - pad;
                    let widx = layer.weight(o, i, ky, kx);
                    let wv = values[widx];
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let gs = &g[y * w + x0..y * w + x1];
                        let lo = sy * w + (x0 as isize + dx) as usize;
                        let hi = sy * w + (x1 as isize + dx) as usize;
                        for ((gv, sv), gi) in gs.iter().zip(&src[lo..hi]).zip(&mut gin[lo..hi]) {
                            acc += gv * sv;
                            *gi += wv * gv;
                        }
                    }
                    grads[widx] += acc;
                }
            }
        }
    }
    grad_in
}

/// Forward pass. The returned tape must be handed to [`recnet_backward`]
/// before the parameters change.
pub fn recnet_forward(x_u: &RealImage, params: &RecNetParams) -> Result<(RealImage, ActivationTape)> {
    let (h, w) = x_u.dim();
    let mut tape = ActivationTape {
        params_id: params.id,
        params_version: params.version,
        dim: (h, w),
        inputs: Vec::with_capacity(params.layers.len()),
    };
    if params.layers.is_empty() {
        return Ok((x_u.clone(), tape));
    }
    let mut act: Vec<f64> = x_u.pixels().iter().cloned().collect();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut out = conv_forward(layer, &params.values, &act, h, w);
        if l != last {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        tape.inputs.push(std::mem::replace(&mut act, out));
    }
    let residual = Array2::from_shape_vec((h, w), act).expect("single-channel output");
    let out = x_u.pixels() + &residual;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reconstruction output"));
    }
    Ok((RealImage::from_array(out), tape))
}

/// Backward pass. Consumes the tape; returns parameter gradients (flat, in
/// the layout of [`RecNetParams::values`]) and the gradient w.r.t. `X_u`,
/// which includes the identity contribution of the skip connection.
pub fn recnet_backward(
    tape: ActivationTape,
    params: &RecNetParams,
    grad_loss: &Array2<f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    if tape.params_id != params.id
        || tape.params_version != params.version
        || tape.inputs.len() != params.layers.len()
    {
        return Err(Error::StaleTape);
    }
    ensure_shape(tape.dim, grad_loss.dim())?;
    let (h, w) = tape.dim;
    let mut grads = vec![0.0; params.values.len()];
    let mut grad_x = grad_loss.clone();
    if params.layers.is_empty() {
        return Ok((grads, grad_x));
    }
    let mut g: Vec<f64> = grad_loss.iter().cloned().collect();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let input = &tape.inputs[l];
        let mut gin = conv_backward(layer, &params.values, input, &g, h, w, &mut grads);
        if l > 0 {
            // The input of layer l is ReLU of layer l-1's output.
            for (gi, &a) in gin.iter_mut().zip(input) {
                if a <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        g = gin;
    }
    for (gx, gv) in grad_x.iter_mut().zip(&g) {
        *gx += gv;
    }
    Ok((grads, grad_x))
}

/// `½‖a − b‖²_F`.
pub fn euclidean_loss(a: &RealImage, b: &RealImage) -> Result<f64> {
    ensure_shape(a.dim(), b.dim())?;
    Ok(0.5
        * a.pixels()
            .iter()
            .zip(b.pixels().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>())
}

/// Adam update of the network parameters with their own optimizer state.
pub fn adam_step(params: &mut RecNetParams, grads: &[f64], cfg: &AdamConfig) -> Result<()> {
    let mut adam = std::mem::replace(&mut params.adam, AdamState::new(0));
    let result = adam_update(&mut params.values, grads, &mut adam, cfg);
    params.adam = adam;
    result?;
    params.version += 1;
    Ok(())
}
