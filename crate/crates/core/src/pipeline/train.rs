//! Joint optimization of the probability matrix and the reconstruction
//! network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fourier::{center_shift, ift_backward, inverse_2d, CenterShift};
use crate::grid::{ensure_shape, ComplexGrid, ProbabilityMatrix, RealImage, SamplingMask, TwoChannelGrid};
use crate::recnet::{
    adam_step, adam_update, recnet_backward, recnet_forward, AdamConfig, AdamState, RecNetParams,
};
use crate::sampler::{
    apply_mask, generate_stable_mask, mask_backward, merge_channels, project_probabilities,
    split_channels, RegionReport, StableConstraintConfig,
};

use super::eval::mean_psnr;
use super::metrics::{psnr, zero_filled};

/// Training hyperparameters. Defaults are the full-scale settings;
/// [`TrainConfig::desk`] gives the small single-core setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub target_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub decay_step: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub recnet_depth: usize,
    pub recnet_channels: usize,
    /// Adam step size for the probability matrix, decayed on the same
    /// schedule as the network learning rate.
    pub prob_lr: f64,
    /// Epochs during which the probability matrix is updated; afterwards
    /// the mask is frozen and only the network trains. `None` means all.
    pub prob_epochs: Option<usize>,
    pub epsilon: f64,
    pub region_size: usize,
    pub p_min: f64,
    pub init_seed: u64,
    pub mask_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_rate: 0.3,
            lambda1: 1.0,
            lambda2: 1.0,
            batch_size: 16,
            max_epochs: 200,
            initial_lr: 1e-3,
            lr_decay_factor: 10f64.sqrt(),
            decay_step: 20,
            min_lr: 1e-8,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            recnet_depth: 5,
            recnet_channels: crate::recnet::DEFAULT_CHANNELS,
            prob_lr: 2e-2,
            prob_epochs: None,
            epsilon: StableConstraintConfig::DEFAULT_EPSILON,
            region_size: StableConstraintConfig::DEFAULT_REGION_SIZE,
            p_min: StableConstraintConfig::DEFAULT_P_MIN,
            init_seed: 1,
            mask_seed: 2,
            shuffle_seed: 3,
        }
    }
}

impl TrainConfig {
    pub fn desk(target_rate: f64) -> Self {
        Self {
            target_rate,
            batch_size: 8,
            max_epochs: 50,
            prob_epochs: Some(20),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("min_lr", self.min_lr),
            ("prob_lr", self.prob_lr),
            ("epsilon", self.epsilon),
            ("p_min", self.p_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::param("lambda values must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("beta values must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.decay_step == 0 {
            return Err(Error::param("batch_size, max_epochs and decay_step must be positive"));
        }
        if self.recnet_depth > 1 && self.recnet_channels == 0 {
            return Err(Error::param("recnet_channels must be positive"));
        }
        self.constraints().validate()
    }

    /// `max(min_lr, initial_lr · decay^(−⌊epoch/decay_step⌋))`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_step) as i32;
        (self.initial_lr * self.lr_decay_factor.powi(-k)).max(self.min_lr)
    }

    pub fn constraints(&self) -> StableConstraintConfig {
        StableConstraintConfig {
            target_rate: self.target_rate,
            epsilon: self.epsilon,
            region_size: self.region_size,
            p_min: self.p_min,
            p_max: 1.0,
            seed: self.mask_seed,
        }
    }

    fn adam(&self, lr: f64, weight_decay: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Losses and gradients of one training image.
#[derive(Debug, Clone)]
pub struct JointGradients {
    /// `½‖x_u − y‖²`
    pub loss_ift: f64,
    /// `½‖x_rec − y‖²`
    pub loss_rec: f64,
    pub grad_params: Vec<f64>,
    /// Straight-through gradient w.r.t. the DC-centered probabilities.
    pub grad_probs: Array2<f64>,
    /// Gradient w.r.t. the unshifted k-space input.
    pub grad_kspace: TwoChannelGrid,
}

struct Pass {
    loss_ift: f64,
    loss_rec: f64,
    grad_params: Vec<f64>,
    grad_probs: Array2<f64>,
    grad_kspace: TwoChannelGrid,
}

fn joint_pass(
    k: &ComplexGrid,
    y: &RealImage,
    mask_unshifted: &SamplingMask,
    params: &RecNetParams,
    lambda1: f64,
    lambda2: f64,
) -> Result<Pass> {
    ensure_shape(y.dim(), k.dim())?;
    let x_in = split_channels(k);
    let masked = apply_mask(&x_in, mask_unshifted)?;
    let z = inverse_2d(&merge_channels(&masked));
    let mag = z.magnitude();
    let x_u = RealImage::from_array(mag.clone());
    let (x_rec, tape) = recnet_forward(&x_u, params)?;

    let du = &mag - y.pixels();
    let dr = x_rec.pixels() - y.pixels();
    let loss_ift = 0.5 * du.iter().map(|v| v * v).sum::<f64>();
    let loss_rec = 0.5 * dr.iter().map(|v| v * v).sum::<f64>();

    let (grad_params, mut g) = recnet_backward(tape, params, &(lambda2 * &dr))?;
    g.scaled_add(lambda1, &du);

    // d|z|/dRe = Re/|z|, d|z|/dIm = Im/|z|; zero where |z| = 0.
    let mut g_re = Array2::zeros(g.dim());
    let mut g_im = Array2::zeros(g.dim());
    Zip::from(&mut g_re)
        .and(&mut g_im)
        .and(&g)
        .and(z.re())
        .and(z.im())
        .and(&mag)
        .for_each(|gr, gi, &gv, &re, &im, &a| {
            if a > 0.0 {
                *gr = gv * re / a;
                *gi = gv * im / a;
            }
        });
    let grad_z = ComplexGrid::new(g_re, g_im)?;
    let grad_masked = split_channels(&ift_backward(&grad_z));
    let (grad_kspace, grad_probs) = mask_backward(&grad_masked, &x_in, mask_unshifted)?;
    Ok(Pass {
        loss_ift,
        loss_rec,
        grad_params,
        grad_probs,
        grad_kspace,
    })
}

/// Forward and backward pass of `L_joint` for one image. `k` is the unshifted
/// spectrum of `y`; `mask` is DC-centered.
pub fn joint_gradients(
    k: &ComplexGrid,
    y: &RealImage,
    mask: &SamplingMask,
    params: &RecNetParams,
    lambda1: f64,
    lambda2: f64,
) -> Result<JointGradients> {
    ensure_shape(k.dim(), mask.dim())?;
    let pass = joint_pass(k, y, &mask.unshifted(), params, lambda1, lambda2)?;
    Ok(JointGradients {
        loss_ift: pass.loss_ift,
        loss_rec: pass.loss_rec,
        grad_params: pass.grad_params,
        grad_probs: center_shift(&pass.grad_probs),
        grad_kspace: pass.grad_kspace,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ift: f64,
    pub loss_rec: f64,
    pub loss_joint: f64,
    pub val_psnr_u: f64,
    pub val_psnr_rec: f64,
    pub realized_rate: f64,
}

pub const LOG_CSV_HEADER: &str = "epoch,lr,L_IFT,L_rec,L_joint,val_psnr_u,val_psnr_rec,realized_rate";

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.4}",
            self.epoch,
            self.lr,
            self.loss_ift,
            self.loss_rec,
            self.loss_joint,
            self.val_psnr_u,
            self.val_psnr_rec,
            self.realized_rate
        )
    }
}

pub fn write_log_csv(rows: &[LogRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{LOG_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Where the epoch mask comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskMode {
    /// Projected from the trainable probability matrix every epoch.
    Learned,
    /// A fixed DC-centered mask; only the network is trained.
    Fixed(SamplingMask),
}

/// Everything needed to continue a run after the last completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub next_epoch: usize,
    /// DC-centered probability matrix as last updated (not yet projected).
    pub probs: ProbabilityMatrix,
    pub prob_adam: AdamState,
    pub params: RecNetParams,
    pub log: Vec<LogRow>,
}

const STATE_MAGIC: &[u8; 4] = b"KTS1";

fn write_f64s(w: &mut impl Write, vals: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

impl TrainState {
    pub fn fresh(dim: (usize, usize), cfg: &TrainConfig) -> Result<Self> {
        let probs = ProbabilityMatrix::uniform(dim.0, dim.1, cfg.target_rate)?;
        Ok(Self {
            next_epoch: 0,
            prob_adam: AdamState::new(dim.0 * dim.1),
            probs,
            params: RecNetParams::init(cfg.recnet_depth, cfg.recnet_channels, cfg.init_seed)?,
            log: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(STATE_MAGIC)?;
        w.write_all(&(self.next_epoch as u64).to_le_bytes())?;
        let (m, n) = self.probs.dim();
        w.write_all(&(m as u64).to_le_bytes())?;
        w.write_all(&(n as u64).to_le_bytes())?;
        write_f64s(&mut w, self.probs.probs().iter().copied())?;
        w.write_all(&self.prob_adam.step.to_le_bytes())?;
        write_f64s(&mut w, self.prob_adam.m.iter().copied())?;
        write_f64s(&mut w, self.prob_adam.v.iter().copied())?;
        self.params.write_to(&mut w)?;
        w.write_all(&(self.log.len() as u64).to_le_bytes())?;
        for r in &self.log {
            w.write_all(&(r.epoch as u64).to_le_bytes())?;
            write_f64s(
                &mut w,
                [
                    r.lr,
                    r.loss_ift,
                    r.loss_rec,
                    r.loss_joint,
                    r.val_psnr_u,
                    r.val_psnr_rec,
                    r.realized_rate,
                ],
            )?;
        }
        w.flush()?;
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

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::format("<train state>", "bad magic"));
        }
        let next_epoch = read_u64(r)? as usize;
        let m = read_u64(r)? as usize;
        let n = read_u64(r)? as usize;
        if m == 0 || n == 0 || m.saturating_mul(n) > 1 << 28 {
            return Err(Error::format("<train state>", "implausible probability dimensions"));
        }
        let probs = Array2::from_shape_vec((m, n), read_f64s(r, m * n)?)
            .map_err(|e| Error::format("<train state>", e.to_string()))?;
        let step = read_u64(r)?;
        let am = read_f64s(r, m * n)?;
        let av = read_f64s(r, m * n)?;
        let params = RecNetParams::read_from(r)?;
        let rows = read_u64(r)? as usize;
        let mut log = Vec::with_capacity(rows.min(1 << 16));
        for _ in 0..rows {
            let epoch = read_u64(r)? as usize;
            let v = read_f64s(r, 7)?;
            log.push(LogRow {
                epoch,
                lr: v[0],
                loss_ift: v[1],
                loss_rec: v[2],
                loss_joint: v[3],
                val_psnr_u: v[4],
                val_psnr_rec: v[5],
                realized_rate: v[6],
            });
        }
        Ok(Self {
            next_epoch,
            probs: ProbabilityMatrix::new(probs)?,
            prob_adam: AdamState { m: am, v: av, step },
            params,
            log,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final projected probability matrix (DC-centered).
    pub probabilities: ProbabilityMatrix,
    /// Stable mask generated from the final probabilities (DC-centered).
    pub mask: SamplingMask,
    pub region_reports: Vec<RegionReport>,
    pub params: RecNetParams,
    pub log: Vec<LogRow>,
}

fn epoch_mask(
    state: &mut TrainState,
    mode: &MaskMode,
    cfg: &TrainConfig,
) -> Result<(SamplingMask, Vec<RegionReport>)> {
    match mode {
        MaskMode::Learned => {
            let constraints = cfg.constraints();
            state.probs = project_probabilities(&state.probs, &constraints)?;
            generate_stable_mask(&state.probs, &constraints)
        }
        MaskMode::Fixed(mask) => Ok((mask.clone(), Vec::new())),
    }
}

/// Mean undersampling and reconstruction PSNR over `val`; NaN when empty.
fn validate(val: &Dataset, mask_unshifted: &SamplingMask, params: &RecNetParams) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut pu = Vec::with_capacity(val.len());
    let mut pr = Vec::with_capacity(val.len());
    for item in val.items() {
        let x_u = zero_filled(&item.kspace, mask_unshifted)?;
        let (x_rec, _) = recnet_forward(&x_u, params)?;
        pu.push(psnr(&x_u, &item.image, 1.0)?);
        pr.push(psnr(&x_rec, &item.image, 1.0)?);
    }
    Ok((mean_psnr(&pu), mean_psnr(&pr)))
}

fn diverged(epoch: usize, reason: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        reason: reason.into(),
    }
}

/// Runs epochs `state.next_epoch..cfg.max_epochs`, calling `on_epoch` after
/// each completed epoch (for checkpointing). A non-finite loss or gradient
/// stops the run with [`Error::Diverged`]; the last state passed to
/// `on_epoch` is the last good one.
pub fn train_with(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mode: MaskMode,
    state: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dim = train
        .dim()
        .ok_or_else(|| Error::param("training set is empty"))?;
    if let Some(vd) = val.dim() {
        ensure_shape(dim, vd)?;
    }
    if let MaskMode::Fixed(mask) = &mode {
        ensure_shape(dim, mask.dim())?;
    }
    let mut state = match state {
        Some(s) => {
            ensure_shape(dim, s.probs.dim())?;
            s
        }
        None => TrainState::fresh(dim, cfg)?,
    };
    let learn_probs = matches!(mode, MaskMode::Learned);

    for epoch in state.next_epoch..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let (mask, _) = epoch_mask(&mut state, &mode, cfg)?;
        let mask_u = mask.unshifted();
        let net_adam = cfg.adam(lr, cfg.weight_decay);
        let prob_adam = cfg.adam(cfg.prob_lr * lr / cfg.initial_lr, 0.0);
        let learn_probs = learn_probs && cfg.prob_epochs.is_none_or(|e| epoch < e);

        let (mut sum_ift, mut sum_rec) = (0.0, 0.0);
        for batch in train.batches(cfg.batch_size, cfg.shuffle_seed.wrapping_add(epoch as u64)) {
            let mut g_params = vec![0.0; state.params.len()];
            let mut g_probs = Array2::<f64>::zeros(dim);
            for &idx in &batch {
                let item = &train.items()[idx];
                let pass = joint_pass(
                    &item.kspace,
                    &item.image,
                    &mask_u,
                    &state.params,
                    cfg.lambda1,
                    cfg.lambda2,
                )
                .map_err(|e| match e {
                    Error::NonFinite(what) => diverged(epoch, what),
                    other => other,
                })?;
                if !(pass.loss_ift.is_finite() && pass.loss_rec.is_finite()) {
                    return Err(diverged(epoch, "non-finite loss"));
                }
                sum_ift += pass.loss_ift;
                sum_rec += pass.loss_rec;
                for (a, b) in g_params.iter_mut().zip(&pass.grad_params) {
                    *a += b;
                }
                g_probs += &pass.grad_probs;
            }
            let scale = 1.0 / batch.len() as f64;
            g_params.iter_mut().for_each(|g| *g *= scale);
            adam_step(&mut state.params, &g_params, &net_adam)
                .map_err(|e| diverged(epoch, e.to_string()))?;
            if learn_probs {
                let g = center_shift(&g_probs);
                // Only the component tangent to the rate constraint survives projection.
                let mean = g.mean().unwrap_or(0.0);
                let grads: Vec<f64> = g.iter().map(|v| (v - mean) * scale).collect();
                let mut values: Vec<f64> = state.probs.probs().iter().copied().collect();
                adam_update(&mut values, &grads, &mut state.prob_adam, &prob_adam)
                    .map_err(|e| diverged(epoch, e.to_string()))?;
                state.probs = ProbabilityMatrix::new(
                    Array2::from_shape_vec(dim, values).expect("matrix shape"),
                )
                .map_err(|e| diverged(epoch, e.to_string()))?;
            }
        }

        let n = train.len() as f64;
        let (loss_ift, loss_rec) = (sum_ift / n, sum_rec / n);
        let loss_joint = cfg.lambda1 * loss_ift + cfg.lambda2 * loss_rec;
        let (val_psnr_u, val_psnr_rec) =
            validate(val, &mask_u, &state.params).map_err(|e| match e {
                Error::NonFinite(what) => diverged(epoch, what),
                other => other,
            })?;
        let row = LogRow {
            epoch,
            lr,
            loss_ift,
            loss_rec,
            loss_joint,
            val_psnr_u,
            val_psnr_rec,
            realized_rate: mask.rate(),
        };
        log::info!(
            "epoch {epoch}: L_joint {loss_joint:.6} val psnr_u {val_psnr_u:.3} psnr_rec {val_psnr_rec:.3} rate {:.4}",
            row.realized_rate
        );
        state.log.push(row);
        state.next_epoch = epoch + 1;
        on_epoch(&state)?;
    }

    let (mask, region_reports) = epoch_mask(&mut state, &mode, cfg)?;
    Ok(TrainOutcome {
        probabilities: state.probs,
        mask,
        region_reports,
        params: state.params,
        log: state.log,
    })
}

/// Joint training from scratch without checkpointing.
pub fn train(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(train, val, cfg, MaskMode::Learned, None, &mut |_| Ok(()))
}

/// Trains only the network behind a fixed DC-centered mask.
pub fn train_fixed_mask(
    train: &Dataset,
    val: &Dataset,
    mask: &SamplingMask,
    cfg: &TrainConfig,
) -> Result<RecNetParams> {
    let out = train_with(train, val, cfg, MaskMode::Fixed(mask.clone()), None, &mut |_| Ok(()))?;
    Ok(out.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_phantom_set;
    use crate::fourier::forward_2d;
    use crate::recnet::euclidean_loss;
    use crate::sampler::sample_bernoulli;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn joint_value(
        k: &ComplexGrid,
        y: &RealImage,
        mask: &SamplingMask,
        params: &RecNetParams,
        l1: f64,
        l2: f64,
    ) -> f64 {
        let x_u = super::super::metrics::undersampled_image(k, mask).unwrap();
        let (x_rec, _) = recnet_forward(&x_u, params).unwrap();
        l1 * euclidean_loss(&x_u, y).unwrap() + l2 * euclidean_loss(&x_rec, y).unwrap()
    }

    fn toy_problem() -> (ComplexGrid, RealImage, SamplingMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = RealImage::new(Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0))).unwrap();
        let k = forward_2d(&ComplexGrid::from_real(y.pixels().clone()).unwrap());
        let mask = sample_bernoulli(&ProbabilityMatrix::uniform(8, 8, 0.5).unwrap(), 4);
        (k, y, mask)
    }

    #[test]
    fn end_to_end_parameter_gradient_matches_finite_differences() {
        let (k, y, mask) = toy_problem();
        let params = RecNetParams::init(2, 4, 9).unwrap();
        let g = joint_gradients(&k, &y, &mask, &params, 1.0, 1.0).unwrap();
        assert_eq!(g.grad_params.len(), params.len());
        assert!(g.grad_probs.iter().all(|v| v.is_finite()));
        assert_eq!(g.grad_probs.dim(), (8, 8));

        let h = 1e-6;
        for idx in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[idx] += h;
            let mut minus = params.clone();
            minus.values_mut()[idx] -= h;
            let fd = (joint_value(&k, &y, &mask, &plus, 1.0, 1.0)
                - joint_value(&k, &y, &mask, &minus, 1.0, 1.0))
                / (2.0 * h);
            let an = g.grad_params[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {idx}: analytic {an} fd {fd}");
        }
    }

    #[test]
    fn end_to_end_kspace_gradient_matches_finite_differences() {
        let (k, y, mask) = toy_problem();
        let params = RecNetParams::init(2, 3, 5).unwrap();
        let g = joint_gradients(&k, &y, &mask, &params, 1.0, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            for j in 0..8 {
                for c in 0..2 {
                    let bump = |s: f64| {
                        let (mut re, mut im) = (k.re().clone(), k.im().clone());
                        if c == 0 {
                            re[[i, j]] += s;
                        } else {
                            im[[i, j]] += s;
                        }
                        ComplexGrid::new(re, im).unwrap()
                    };
                    let fd = (joint_value(&bump(h), &y, &mask, &params, 1.0, 0.5)
                        - joint_value(&bump(-h), &y, &mask, &params, 1.0, 0.5))
                        / (2.0 * h);
                    let an = g.grad_kspace.channel(c)[[i, j]];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel < 1e-4, "({i},{j},{c}): analytic {an} fd {fd}");
                }
            }
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        for epoch in 0..400 {
            let expect = (1e-3 * 10f64.sqrt().powi(-((epoch / 20) as i32))).max(1e-8);
            assert_eq!(cfg.lr_at(epoch), expect, "epoch {epoch}");
        }
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(20) - 1e-3 / 10f64.sqrt()).abs() < 1e-18);
        assert_eq!(cfg.lr_at(1000), 1e-8);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::desk(0.3);
        c.lambda1 = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(0.3);
        c.target_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(0.3);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn tiny_config(rate: f64, depth: usize) -> TrainConfig {
        TrainConfig {
            target_rate: rate,
            batch_size: 2,
            max_epochs: 2,
            recnet_depth: depth,
            recnet_channels: 4,
            region_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn full_sampling_gives_exact_validation() {
        let set = make_phantom_set(4, 16, 1).unwrap();
        let out = train(&set, &set, &tiny_config(1.0, 0)).unwrap();
        assert!(out.log.iter().all(|r| r.val_psnr_u == f64::INFINITY));
        assert_eq!(out.mask.count(), 256);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let set = make_phantom_set(6, 16, 2).unwrap();
        let train_set = set.subset(0..4, crate::data::Split::Train).unwrap();
        let val_set = set.subset(4..6, crate::data::Split::Val).unwrap();
        let mut cfg = tiny_config(0.3, 2);
        cfg.max_epochs = 3;
        let a = train(&train_set, &val_set, &cfg).unwrap();
        let b = train(&train_set, &val_set, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.probabilities, b.probabilities);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        assert!((a.probabilities.mean() - 0.3).abs() < cfg.epsilon);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        let mut saved = 0;
        let mut save_first = |s: &TrainState| {
            if s.next_epoch == 1 {
                s.save(&path)?;
                saved += 1;
            }
            Ok(())
        };
        train_with(&train_set, &val_set, &cfg, MaskMode::Learned, None, &mut save_first).unwrap();
        assert_eq!(saved, 1);
        let state = TrainState::load(&path).unwrap();
        assert_eq!(state.next_epoch, 1);
        let resumed =
            train_with(&train_set, &val_set, &cfg, MaskMode::Learned, Some(state), &mut |_| Ok(()))
                .unwrap();
        assert_eq!(resumed.params, a.params);
        assert_eq!(resumed.probabilities, a.probabilities);
        assert_eq!(resumed.log, a.log);
    }

    #[test]
    fn fixed_mask_training_leaves_mask_alone() {
        let set = make_phantom_set(4, 16, 3).unwrap();
        let mask = sample_bernoulli(&ProbabilityMatrix::uniform(16, 16, 0.4).unwrap(), 1);
        let cfg = tiny_config(0.4, 2);
        let out = train_with(&set, &set, &cfg, MaskMode::Fixed(mask.clone()), None, &mut |_| Ok(()))
            .unwrap();
        assert_eq!(out.mask, mask);
        assert!(out.log.iter().all(|r| r.realized_rate == mask.rate()));
    }

    #[test]
    fn probabilities_freeze_after_prob_epochs() {
        let set = make_phantom_set(4, 16, 5).unwrap();
        let mut cfg = tiny_config(0.3, 2);
        cfg.max_epochs = 4;
        cfg.prob_epochs = Some(1);
        let mut seen = Vec::new();
        let out = train_with(&set, &set, &cfg, MaskMode::Learned, None, &mut |s| {
            seen.push(s.probs.clone());
            Ok(())
        })
        .unwrap();
        assert_ne!(seen[0], ProbabilityMatrix::uniform(16, 16, 0.3).unwrap());
        assert!(seen[2..].iter().all(|p| *p == seen[1]));
        let rates: Vec<f64> = out.log.iter().skip(1).map(|r| r.realized_rate).collect();
        assert!(rates.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn log_csv_layout() {
        let row = LogRow {
            epoch: 3,
            lr: 1e-3,
            loss_ift: 1.5,
            loss_rec: 0.25,
            loss_joint: 1.75,
            val_psnr_u: 20.0,
            val_psnr_rec: f64::INFINITY,
            realized_rate: 0.30004,
        };
        let mut buf = Vec::new();
        write_log_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{LOG_CSV_HEADER}\n3,0.001,1.5,0.25,1.75,20,inf,0.3000\n"));
    }

    #[test]
    fn diverging_run_reports_epoch() {
        let set = make_phantom_set(2, 8, 0).unwrap();
        let mut cfg = tiny_config(0.5, 2);
        cfg.initial_lr = 1e300;
        cfg.min_lr = 1e300;
        cfg.region_size = 4;
        let err = train(&set, &set, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }
}
