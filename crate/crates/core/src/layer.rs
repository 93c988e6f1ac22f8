//! One HGConv block: normalize, holographically encode each token, mix the
//! whole sequence with an FFT-domain global convolution, decode with the
//! clamped exact inverse of the decoder filter, gate through a GLU, drop out,
//! and add the residual. Forward caches exactly what the hand-derived
//! backward needs; the adjoint of every circular convolution is a circular
//! correlation.
//!
//! Tensors are `[T, H]` or `[B, T, H]`; a `[T, H]` input is the
//! single-example case. Pad handling is the caller's contract: pad rows of
//! the input are zero, the row mask re-zeroes them after any op that could
//! leak values into them (normalization bias, sequence mixing), so padded
//! and unpadded runs agree on the real tokens.

use crate::error::{HgError, Result};
use crate::hrr::EPSILON_INV;
use crate::numerics::fft::{spectrum_mul_conj_inplace, spectrum_mul_inplace, Fft};
use crate::numerics::{
    gelu_from_tanh, gelu_grad_cached, gelu_inner_tanh, matmul_acc, matmul_at_acc, matmul_bt_acc,
    sigmoid, Scalar, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Variance floor inside both normalizations.
pub const NORM_EPS: f64 = 1e-5;

/// Momentum for batch-norm running statistics.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Layer,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
}

/// Learnable state of one block. Doubles as the gradient container: a
/// backward pass returns one value of this type per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HGConvLayerParams<F: Scalar> {
    /// encoder filter, length H
    pub w_e: Vec<F>,
    /// global conv kernel, K rows x H channels, zero-padded to T at use
    pub w_c: Tensor<F>,
    /// bias filter, length H
    pub w_b: Vec<F>,
    /// decoder filter, length H (used through its clamped exact inverse)
    pub w_d: Vec<F>,
    pub w_alpha: Tensor<F>,
    pub b_alpha: Vec<F>,
    pub w_beta: Tensor<F>,
    pub b_beta: Vec<F>,
    pub norm_gain: Vec<F>,
    pub norm_bias: Vec<F>,
}

impl<F: Scalar> HGConvLayerParams<F> {
    /// Fresh block: filters N(0, 1/H), kernel N(0, 1/(K*H)), GLU N(0, 1/H),
    /// biases zero, norm affine at identity.
    pub fn init<R: Rng>(h: usize, k: usize, rng: &mut R) -> Result<Self> {
        if h == 0 || k == 0 {
            return Err(HgError::Config(format!(
                "layer dims must be positive, got H={h} K={k}"
            )));
        }
        let filt = Normal::new(0.0f64, (1.0 / h as f64).sqrt()).expect("positive std");
        let kern = Normal::new(0.0f64, (1.0 / (k * h) as f64).sqrt()).expect("positive std");
        let draw = |d: &Normal<f64>, n: usize, rng: &mut R| -> Vec<F> {
            (0..n).map(|_| F::from_f64(d.sample(rng))).collect()
        };
        Ok(HGConvLayerParams {
            w_e: draw(&filt, h, rng),
            w_c: Tensor::from_vec(&[k, h], draw(&kern, k * h, rng))?,
            w_b: draw(&filt, h, rng),
            w_d: draw(&filt, h, rng),
            w_alpha: Tensor::from_vec(&[h, h], draw(&filt, h * h, rng))?,
            b_alpha: vec![F::ZERO; h],
            w_beta: Tensor::from_vec(&[h, h], draw(&filt, h * h, rng))?,
            b_beta: vec![F::ZERO; h],
            norm_gain: vec![F::ONE; h],
            norm_bias: vec![F::ZERO; h],
        })
    }

    /// All-zero block of the given geometry.
    pub fn zeros(h: usize, k: usize) -> Self {
        HGConvLayerParams {
            w_e: vec![F::ZERO; h],
            w_c: Tensor::zeros(&[k, h]),
            w_b: vec![F::ZERO; h],
            w_d: vec![F::ZERO; h],
            w_alpha: Tensor::zeros(&[h, h]),
            b_alpha: vec![F::ZERO; h],
            w_beta: Tensor::zeros(&[h, h]),
            b_beta: vec![F::ZERO; h],
            norm_gain: vec![F::ZERO; h],
            norm_bias: vec![F::ZERO; h],
        }
    }

    /// Zero tensors of the same shapes, for accumulating gradients.
    pub fn zeros_like(&self) -> Self {
        HGConvLayerParams {
            w_e: vec![F::ZERO; self.w_e.len()],
            w_c: Tensor::zeros(self.w_c.shape()),
            w_b: vec![F::ZERO; self.w_b.len()],
            w_d: vec![F::ZERO; self.w_d.len()],
            w_alpha: Tensor::zeros(self.w_alpha.shape()),
            b_alpha: vec![F::ZERO; self.b_alpha.len()],
            w_beta: Tensor::zeros(self.w_beta.shape()),
            b_beta: vec![F::ZERO; self.b_beta.len()],
            norm_gain: vec![F::ZERO; self.norm_gain.len()],
            norm_bias: vec![F::ZERO; self.norm_bias.len()],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_e.len()
    }

    pub fn kernel_dim(&self) -> usize {
        self.w_c.shape()[0]
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let h = self.feature_dim();
        let k = self.kernel_dim();
        if k > max_seq_len {
            return Err(HgError::Config(format!(
                "kernel length {k} exceeds max sequence length {max_seq_len}"
            )));
        }
        if self.w_c.shape() != [k, h] || self.w_alpha.shape() != [h, h] {
            return Err(HgError::Shape("layer parameter shapes disagree".into()));
        }
        for (name, t) in self.named_slices() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(HgError::Contract(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order shared by gradients, the
    /// optimizer, and the checkpoint format.
    pub fn named_slices(&self) -> Vec<(&'static str, &[F])> {
        vec![
            ("w_e", self.w_e.as_slice()),
            ("w_c", self.w_c.data()),
            ("w_b", self.w_b.as_slice()),
            ("w_d", self.w_d.as_slice()),
            ("w_alpha", self.w_alpha.data()),
            ("b_alpha", self.b_alpha.as_slice()),
            ("w_beta", self.w_beta.data()),
            ("b_beta", self.b_beta.as_slice()),
            ("norm_gain", self.norm_gain.as_slice()),
            ("norm_bias", self.norm_bias.as_slice()),
        ]
    }

    pub fn named_slices_mut(&mut self) -> Vec<(&'static str, &mut [F])> {
        vec![
            ("w_e", self.w_e.as_mut_slice()),
            ("w_c", self.w_c.data_mut()),
            ("w_b", self.w_b.as_mut_slice()),
            ("w_d", self.w_d.as_mut_slice()),
            ("w_alpha", self.w_alpha.data_mut()),
            ("b_alpha", self.b_alpha.as_mut_slice()),
            ("w_beta", self.w_beta.data_mut()),
            ("b_beta", self.b_beta.as_mut_slice()),
            ("norm_gain", self.norm_gain.as_mut_slice()),
            ("norm_bias", self.norm_bias.as_mut_slice()),
        ]
    }

    /// `self += s * other`, tensorwise; used for gradient reduction.
    pub fn axpy(&mut self, s: F, other: &Self) -> Result<()> {
        let rhs = other.named_slices();
        for ((name, dst), (_, src)) in self.named_slices_mut().into_iter().zip(rhs) {
            if dst.len() != src.len() {
                return Err(HgError::Shape(format!("axpy length mismatch in {name}")));
            }
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d += s * v;
            }
        }
        Ok(())
    }
}

/// Batch-norm running statistics, carried between steps and checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<F: Scalar> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub batches_seen: u64,
}

impl<F: Scalar> NormState<F> {
    pub fn new(h: usize) -> Self {
        NormState {
            running_mean: vec![F::ZERO; h],
            running_var: vec![F::ZERO; h],
            batches_seen: 0,
        }
    }
}

/// What the normalization backward needs from its forward.
#[derive(Debug, Clone)]
pub struct NormCache<F: Scalar> {
    kind: NormKind,
    /// normalized values before the affine (same shape as the input)
    xhat: Tensor<F>,
    /// per-row (layer kind) or per-feature (batch kind) reciprocal stddev
    inv_std: Vec<F>,
    /// batch kind: whether statistics came from this batch (train) or the
    /// running estimates (eval); eval stats are constants in backward
    stats_from_batch: bool,
    /// batch kind: rows included in the statistics
    counted: usize,
}

/// Everything the backward pass reads; produced by [`layer_forward`].
#[derive(Debug, Clone)]
pub struct LayerActivations<F: Scalar> {
    /// what the encoder saw: normalized+masked input (prenorm) or the raw
    /// block input (postnorm)
    pub branch_in: Tensor<F>,
    /// post-encoder
    pub y: Tensor<F>,
    /// pre-gelu conv sum
    pub conv_pre: Tensor<F>,
    /// tanh of the gelu inner polynomial at `conv_pre`
    pub conv_tanh: Tensor<F>,
    /// post-gelu
    pub h_post: Tensor<F>,
    /// post-decoder
    pub z: Tensor<F>,
    /// GLU linear branch `z W_alpha + b_alpha`
    pub glu_lin: Tensor<F>,
    /// GLU gate pre-activation `z W_beta + b_beta`
    pub glu_gate_pre: Tensor<F>,
    /// inverted-dropout multipliers, present only when dropout ran
    pub dropout_mask: Option<Tensor<F>>,
    pub norm: NormCache<F>,
    /// clamped reciprocal spectrum of `w_d` and which bins were clamped
    pub sinv_re: Vec<F>,
    pub sinv_im: Vec<F>,
    pub sinv_clamped: Vec<bool>,
}

/// Per-call context: placement/kind of the norm, train/eval switch, dropout
/// plan, and the row mask (one entry per (batch, token) position).
#[derive(Debug, Clone, Copy)]
pub struct LayerRun<'a, F: Scalar> {
    pub placement: NormPlacement,
    pub norm_kind: NormKind,
    pub train: bool,
    pub dropout_rate: f64,
    /// one seed per batch item; required when training with dropout > 0
    pub dropout_seeds: Option<&'a [u64]>,
    /// 1/0 per row; `None` means nothing is padded
    pub mask: Option<&'a [F]>,
}

impl<F: Scalar> LayerRun<'_, F> {
    pub fn eval(placement: NormPlacement, norm_kind: NormKind) -> Self {
        LayerRun {
            placement,
            norm_kind,
            train: false,
            dropout_rate: 0.0,
            dropout_seeds: None,
            mask: None,
        }
    }
}

fn rows_of<F: Scalar>(x: &Tensor<F>) -> Result<(usize, usize)> {
    let h = *x
        .shape()
        .last()
        .ok_or_else(|| HgError::Shape("expected a tensor of rank >= 1".into()))?;
    if h == 0 {
        return Err(HgError::Shape("feature dimension must be positive".into()));
    }
    Ok((x.len() / h, h))
}

fn bth_of<F: Scalar>(x: &Tensor<F>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [t, h] => Ok((1, t, h)),
        [b, t, h] => Ok((b, t, h)),
        ref s => Err(HgError::Shape(format!(
            "expected a (T,H) or (B,T,H) tensor, got {s:?}"
        ))),
    }
}

fn check_mask_len<F: Scalar>(mask: Option<&[F]>, rows: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != rows {
            return Err(HgError::Shape(format!(
                "row mask has {} entries for {} rows",
                m.len(),
                rows
            )));
        }
    }
    Ok(())
}

fn apply_row_mask<F: Scalar>(x: &mut Tensor<F>, mask: Option<&[F]>) {
    if let Some(m) = mask {
        let h = *x.shape().last().expect("checked rank");
        let data = x.data_mut();
        for (r, &mv) in m.iter().enumerate() {
            if mv == F::ZERO {
                for v in &mut data[r * h..(r + 1) * h] {
                    *v = F::ZERO;
                }
            } else if mv != F::ONE {
                for v in &mut data[r * h..(r + 1) * h] {
                    *v *= mv;
                }
            }
        }
    }
}

/// Apply one fixed spectral multiplier to every length-H row:
/// `out_row = ifft(fft(row) * s)` (or `* conj(s)` for the adjoint).
fn rows_spectral_apply<F: Scalar>(
    x: &Tensor<F>,
    plan: &Fft<F>,
    sre: &[F],
    sim: &[F],
    conjugate: bool,
) -> Tensor<F> {
    let h = plan.len();
    let rows = x.len() / h;
    let mut out = Tensor::zeros(x.shape());
    let mut re = vec![F::ZERO; h];
    let mut im = vec![F::ZERO; h];
    let xd = x.data();
    let od = out.data_mut();
    for r in 0..rows {
        re.copy_from_slice(&xd[r * h..(r + 1) * h]);
        for v in im.iter_mut() {
            *v = F::ZERO;
        }
        plan.forward(&mut re, &mut im);
        if conjugate {
            spectrum_mul_conj_inplace(&mut re, &mut im, sre, sim);
        } else {
            spectrum_mul_inplace(&mut re, &mut im, sre, sim);
        }
        plan.inverse(&mut re, &mut im);
        od[r * h..(r + 1) * h].copy_from_slice(&re);
    }
    out
}

/// `acc_k = sum over rows of fft(g_row)_k * conj(fft(x_row)_k)` — the
/// spectral-domain accumulation behind every shared-filter gradient.
fn rows_cross_spectrum<F: Scalar>(
    g: &Tensor<F>,
    x: &Tensor<F>,
    plan: &Fft<F>,
) -> (Vec<F>, Vec<F>) {
    let h = plan.len();
    let rows = g.len() / h;
    let mut acc_re = vec![F::ZERO; h];
    let mut acc_im = vec![F::ZERO; h];
    let mut gre = vec![F::ZERO; h];
    let mut gim = vec![F::ZERO; h];
    let mut xre = vec![F::ZERO; h];
    let mut xim = vec![F::ZERO; h];
    let gd = g.data();
    let xd = x.data();
    for r in 0..rows {
        gre.copy_from_slice(&gd[r * h..(r + 1) * h]);
        xre.copy_from_slice(&xd[r * h..(r + 1) * h]);
        for v in gim.iter_mut() {
            *v = F::ZERO;
        }
        for v in xim.iter_mut() {
            *v = F::ZERO;
        }
        plan.forward(&mut gre, &mut gim);
        plan.forward(&mut xre, &mut xim);
        for k in 0..h {
            acc_re[k] += gre[k] * xre[k] + gim[k] * xim[k];
            acc_im[k] += -gre[k] * xim[k] + gim[k] * xre[k];
        }
    }
    (acc_re, acc_im)
}

/// Per-token circular convolution of every feature row with the shared
/// encoder filter. Token-local: row n of the output depends only on row n
/// of the input.
pub fn encode<F: Scalar>(x: &Tensor<F>, w_e: &[F]) -> Result<Tensor<F>> {
    let (_rows, h) = rows_of(x)?;
    if w_e.len() != h {
        return Err(HgError::Shape(format!(
            "encoder filter length {} vs feature dim {h}",
            w_e.len()
        )));
    }
    let plan = Fft::new(h)?;
    let spec = plan.forward_real(w_e)?;
    Ok(rows_spectral_apply(x, &plan, &spec.re, &spec.im, false))
}

/// Adjoints of [`encode`]: per-row correlation for the input, a spectral
/// accumulation over rows for the shared filter.
pub fn encode_backward<F: Scalar>(
    g_y: &Tensor<F>,
    x: &Tensor<F>,
    w_e: &[F],
) -> Result<(Tensor<F>, Vec<F>)> {
    if g_y.shape() != x.shape() {
        return Err(HgError::Contract(format!(
            "encode backward: grad shape {:?} vs cached input {:?}",
            g_y.shape(),
            x.shape()
        )));
    }
    let (_rows, h) = rows_of(x)?;
    if w_e.len() != h {
        return Err(HgError::Shape(format!(
            "encoder filter length {} vs feature dim {h}",
            w_e.len()
        )));
    }
    let plan = Fft::new(h)?;
    let spec = plan.forward_real(w_e)?;
    let g_x = rows_spectral_apply(g_y, &plan, &spec.re, &spec.im, true);
    let (mut acc_re, mut acc_im) = rows_cross_spectrum(g_y, x, &plan);
    plan.inverse(&mut acc_re, &mut acc_im);
    Ok((g_x, acc_re))
}

/// The conv-sum of the block: per-channel circular convolution along the
/// sequence with the zero-padded kernel column, plus the elementwise bias
/// path `y * w_b`. No activation.
fn conv_sum<F: Scalar>(y: &Tensor<F>, w_c: &Tensor<F>, w_b: Option<&[F]>) -> Result<Tensor<F>> {
    let (b, t, h) = bth_of(y)?;
    let (k, hk) = match *w_c.shape() {
        [k, hk] => (k, hk),
        ref s => return Err(HgError::Shape(format!("kernel must be K x H, got {s:?}"))),
    };
    if hk != h {
        return Err(HgError::Shape(format!(
            "kernel channels {hk} vs feature dim {h}"
        )));
    }
    if k > t {
        return Err(HgError::Config(format!(
            "kernel length {k} exceeds sequence length {t}"
        )));
    }
    if let Some(wb) = w_b {
        if wb.len() != h {
            return Err(HgError::Shape(format!(
                "bias filter length {} vs feature dim {h}",
                wb.len()
            )));
        }
    }
    let plan = Fft::new(t)?;
    let mut out = Tensor::zeros(y.shape());
    let yd = y.data();
    let od = out.data_mut();
    let mut kre = vec![F::ZERO; t];
    let mut kim = vec![F::ZERO; t];
    let mut re = vec![F::ZERO; t];
    let mut im = vec![F::ZERO; t];
    for ch in 0..h {
        for v in kre.iter_mut() {
            *v = F::ZERO;
        }
        for v in kim.iter_mut() {
            *v = F::ZERO;
        }
        for row in 0..k {
            kre[row] = w_c.data()[row * h + ch];
        }
        plan.forward(&mut kre, &mut kim);
        for bi in 0..b {
            let base = bi * t * h + ch;
            for tt in 0..t {
                re[tt] = yd[base + tt * h];
            }
            for v in im.iter_mut() {
                *v = F::ZERO;
            }
            plan.forward(&mut re, &mut im);
            spectrum_mul_inplace(&mut re, &mut im, &kre, &kim);
            plan.inverse(&mut re, &mut im);
            match w_b {
                Some(wb) => {
                    let bias = wb[ch];
                    for tt in 0..t {
                        od[base + tt * h] = re[tt] + yd[base + tt * h] * bias;
                    }
                }
                None => {
                    for tt in 0..t {
                        od[base + tt * h] = re[tt];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Global convolution with bias path and gelu, returning the cached
/// intermediates: (pre-gelu sum, tanh cache, activated output).
pub fn global_conv_parts<F: Scalar>(
    y: &Tensor<F>,
    w_c: &Tensor<F>,
    w_b: &[F],
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let a = conv_sum(y, w_c, Some(w_b))?;
    let tanh_u = a.map(gelu_inner_tanh);
    let mut h_post = Tensor::zeros(a.shape());
    for ((o, &av), &tv) in h_post
        .data_mut()
        .iter_mut()
        .zip(a.data())
        .zip(tanh_u.data())
    {
        *o = gelu_from_tanh(av, tv);
    }
    Ok((a, tanh_u, h_post))
}

/// Sequence-mixing step of the block: conv + bias path, then gelu.
pub fn global_conv<F: Scalar>(y: &Tensor<F>, w_c: &Tensor<F>, w_b: &[F]) -> Result<Tensor<F>> {
    Ok(global_conv_parts(y, w_c, w_b)?.2)
}

/// Test hook: the bare sequence convolution with no bias path and no
/// activation, for shift-equivariance checks.
pub fn global_conv_linear<F: Scalar>(y: &Tensor<F>, w_c: &Tensor<F>) -> Result<Tensor<F>> {
    conv_sum(y, w_c, None)
}

/// Adjoints of the conv-sum (gelu is handled by the caller): gradients for
/// the input, the K x H kernel region only, and the bias filter.
pub fn global_conv_backward<F: Scalar>(
    g_a: &Tensor<F>,
    y: &Tensor<F>,
    w_c: &Tensor<F>,
    w_b: &[F],
) -> Result<(Tensor<F>, Tensor<F>, Vec<F>)> {
    if g_a.shape() != y.shape() {
        return Err(HgError::Contract(format!(
            "conv backward: grad shape {:?} vs cached input {:?}",
            g_a.shape(),
            y.shape()
        )));
    }
    let (b, t, h) = bth_of(y)?;
    let k = w_c.shape()[0];
    let plan = Fft::new(t)?;
    let mut g_y = Tensor::zeros(y.shape());
    let mut g_wc = Tensor::zeros(&[k, h]);
    let mut g_wb = vec![F::ZERO; h];
    let yd = y.data();
    let gd = g_a.data();
    let gyd = g_y.data_mut();
    let mut kre = vec![F::ZERO; t];
    let mut kim = vec![F::ZERO; t];
    let mut gre = vec![F::ZERO; t];
    let mut gim = vec![F::ZERO; t];
    let mut yre = vec![F::ZERO; t];
    let mut yim = vec![F::ZERO; t];
    let mut cre = vec![F::ZERO; t];
    let mut cim = vec![F::ZERO; t];
    let mut acc_re = vec![F::ZERO; t];
    let mut acc_im = vec![F::ZERO; t];
    for ch in 0..h {
        for v in kre.iter_mut() {
            *v = F::ZERO;
        }
        for v in kim.iter_mut() {
            *v = F::ZERO;
        }
        for row in 0..k {
            kre[row] = w_c.data()[row * h + ch];
        }
        plan.forward(&mut kre, &mut kim);
        for v in acc_re.iter_mut() {
            *v = F::ZERO;
        }
        for v in acc_im.iter_mut() {
            *v = F::ZERO;
        }
        let bias = w_b[ch];
        for bi in 0..b {
            let base = bi * t * h + ch;
            for tt in 0..t {
                gre[tt] = gd[base + tt * h];
                yre[tt] = yd[base + tt * h];
            }
            for v in gim.iter_mut() {
                *v = F::ZERO;
            }
            for v in yim.iter_mut() {
                *v = F::ZERO;
            }
            plan.forward(&mut gre, &mut gim);
            plan.forward(&mut yre, &mut yim);
            // input gradient: correlation with the kernel
            cre.copy_from_slice(&gre);
            cim.copy_from_slice(&gim);
            spectrum_mul_conj_inplace(&mut cre, &mut cim, &kre, &kim);
            plan.inverse(&mut cre, &mut cim);
            for tt in 0..t {
                let ga = gd[base + tt * h];
                gyd[base + tt * h] = cre[tt] + ga * bias;
                g_wb[ch] += ga * yd[base + tt * h];
            }
            // kernel gradient accumulates in the spectrum
            for kk in 0..t {
                acc_re[kk] += gre[kk] * yre[kk] + gim[kk] * yim[kk];
                acc_im[kk] += -gre[kk] * yim[kk] + gim[kk] * yre[kk];
            }
        }
        plan.inverse(&mut acc_re, &mut acc_im);
        for row in 0..k {
            g_wc.data_mut()[row * h + ch] = acc_re[row];
        }
    }
    Ok((g_y, g_wc, g_wb))
}

/// Clamped reciprocal spectrum of the decoder filter. Bins with magnitude
/// below `eps` are pushed out to `eps` phase-preservingly before inversion;
/// those bins are flagged and treated as constants by the backward pass.
pub fn decoder_inverse_spectrum<F: Scalar>(
    w_d: &[F],
    eps: f64,
) -> Result<(Vec<F>, Vec<F>, Vec<bool>)> {
    let h = w_d.len();
    let plan = Fft::new(h)?;
    let spec = plan.forward_real(w_d)?;
    let mut inv_re = vec![F::ZERO; h];
    let mut inv_im = vec![F::ZERO; h];
    let mut clamped = vec![false; h];
    for k in 0..h {
        let mut re = spec.re[k].to_f64();
        let mut im = spec.im[k].to_f64();
        let mag = (re * re + im * im).sqrt();
        if mag < eps {
            clamped[k] = true;
            if mag == 0.0 {
                re = eps;
                im = 0.0;
            } else {
                let scale = eps / mag;
                re *= scale;
                im *= scale;
            }
        }
        let denom = re * re + im * im;
        inv_re[k] = F::from_f64(re / denom);
        inv_im[k] = F::from_f64(-im / denom);
    }
    Ok((inv_re, inv_im, clamped))
}

/// Per-token binding of each feature row with the exact (clamped) inverse
/// of the decoder filter. Token-local like [`encode`].
pub fn decode<F: Scalar>(hh: &Tensor<F>, w_d: &[F]) -> Result<Tensor<F>> {
    let (_rows, h) = rows_of(hh)?;
    if w_d.len() != h {
        return Err(HgError::Shape(format!(
            "decoder filter length {} vs feature dim {h}",
            w_d.len()
        )));
    }
    let (sre, sim, _) = decoder_inverse_spectrum(w_d, EPSILON_INV)?;
    let plan = Fft::new(h)?;
    Ok(rows_spectral_apply(hh, &plan, &sre, &sim, false))
}

/// Adjoints of [`decode`]: correlation against the inverse spectrum for the
/// input; for `w_d` the chain runs through the spectral reciprocal —
/// clamped bins contribute nothing.
pub fn decode_backward<F: Scalar>(
    g_z: &Tensor<F>,
    hh: &Tensor<F>,
    sinv_re: &[F],
    sinv_im: &[F],
    clamped: &[bool],
) -> Result<(Tensor<F>, Vec<F>)> {
    if g_z.shape() != hh.shape() {
        return Err(HgError::Contract(format!(
            "decode backward: grad shape {:?} vs cached input {:?}",
            g_z.shape(),
            hh.shape()
        )));
    }
    let (_rows, h) = rows_of(hh)?;
    let plan = Fft::new(h)?;
    let g_h = rows_spectral_apply(g_z, &plan, sinv_re, sinv_im, true);
    // A_k = sum over rows of fft(g)_k * conj(fft(h))_k; with S~ the clamped
    // spectrum and Sinv = 1/S~, the filter gradient is
    //   g_wd = Re(ifft(-conj(Sinv^2) * A))
    // (the normalizing 1/H of the inverse transform is exactly the 1/H the
    // derivation produces).
    let (acc_re, acc_im) = rows_cross_spectrum(g_z, hh, &plan);
    let mut gs_re = vec![F::ZERO; h];
    let mut gs_im = vec![F::ZERO; h];
    for k in 0..h {
        if clamped[k] {
            continue;
        }
        // conj(Sinv^2)
        let cr = sinv_re[k] * sinv_re[k] - sinv_im[k] * sinv_im[k];
        let ci = -(sinv_re[k] * sinv_im[k] + sinv_re[k] * sinv_im[k]);
        gs_re[k] = -(cr * acc_re[k] - ci * acc_im[k]);
        gs_im[k] = -(cr * acc_im[k] + ci * acc_re[k]);
    }
    plan.inverse(&mut gs_re, &mut gs_im);
    Ok((g_h, gs_re))
}

/// Gated linear unit applied per token: `(z Wa + ba) * sigmoid(z Wb + bb)`,
/// returning (linear branch, gate pre-activation, output).
pub fn glu_parts<F: Scalar>(
    z: &Tensor<F>,
    w_alpha: &Tensor<F>,
    b_alpha: &[F],
    w_beta: &Tensor<F>,
    b_beta: &[F],
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (rows, h) = rows_of(z)?;
    for (name, w) in [("w_alpha", w_alpha), ("w_beta", w_beta)] {
        if w.shape() != [h, h] {
            return Err(HgError::Shape(format!(
                "{name} must be {h}x{h}, got {:?}",
                w.shape()
            )));
        }
    }
    if b_alpha.len() != h || b_beta.len() != h {
        return Err(HgError::Shape(format!(
            "GLU bias lengths {}/{} vs feature dim {h}",
            b_alpha.len(),
            b_beta.len()
        )));
    }
    let mut p = Tensor::zeros(z.shape());
    let mut q = Tensor::zeros(z.shape());
    for r in 0..rows {
        p.data_mut()[r * h..(r + 1) * h].copy_from_slice(b_alpha);
        q.data_mut()[r * h..(r + 1) * h].copy_from_slice(b_beta);
    }
    matmul_acc(z.data(), w_alpha.data(), p.data_mut(), rows, h, h);
    matmul_acc(z.data(), w_beta.data(), q.data_mut(), rows, h, h);
    let mut out = Tensor::zeros(z.shape());
    for ((o, &pv), &qv) in out.data_mut().iter_mut().zip(p.data()).zip(q.data()) {
        *o = pv * sigmoid(qv);
    }
    Ok((p, q, out))
}

pub fn glu<F: Scalar>(
    z: &Tensor<F>,
    w_alpha: &Tensor<F>,
    b_alpha: &[F],
    w_beta: &Tensor<F>,
    b_beta: &[F],
) -> Result<Tensor<F>> {
    Ok(glu_parts(z, w_alpha, b_alpha, w_beta, b_beta)?.2)
}

/// Adjoints of the GLU given the cached linear branch and gate
/// pre-activation.
#[allow(clippy::type_complexity)]
pub fn glu_backward<F: Scalar>(
    g_out: &Tensor<F>,
    z: &Tensor<F>,
    p: &Tensor<F>,
    q: &Tensor<F>,
    w_alpha: &Tensor<F>,
    w_beta: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Vec<F>, Tensor<F>, Vec<F>)> {
    if g_out.shape() != z.shape() || p.shape() != z.shape() || q.shape() != z.shape() {
        return Err(HgError::Contract(
            "glu backward: cached shapes disagree with the gradient".into(),
        ));
    }
    let (rows, h) = rows_of(z)?;
    let mut gp = Tensor::zeros(z.shape());
    let mut gq = Tensor::zeros(z.shape());
    for i in 0..z.len() {
        let s = sigmoid(q.data()[i]);
        let g = g_out.data()[i];
        gp.data_mut()[i] = g * s;
        gq.data_mut()[i] = g * p.data()[i] * s * (F::ONE - s);
    }
    let mut g_z = Tensor::zeros(z.shape());
    matmul_bt_acc(gp.data(), w_alpha.data(), g_z.data_mut(), rows, h, h);
    matmul_bt_acc(gq.data(), w_beta.data(), g_z.data_mut(), rows, h, h);
    let mut g_wa = Tensor::zeros(&[h, h]);
    let mut g_wb = Tensor::zeros(&[h, h]);
    matmul_at_acc(z.data(), gp.data(), g_wa.data_mut(), rows, h, h);
    matmul_at_acc(z.data(), gq.data(), g_wb.data_mut(), rows, h, h);
    let mut g_ba = vec![F::ZERO; h];
    let mut g_bb = vec![F::ZERO; h];
    for r in 0..rows {
        for j in 0..h {
            g_ba[j] += gp.data()[r * h + j];
            g_bb[j] += gq.data()[r * h + j];
        }
    }
    Ok((g_z, g_wa, g_ba, g_wb, g_bb))
}

/// Normalization forward. Layer kind standardizes each row over its H
/// features; batch kind standardizes each feature over the masked rows and
/// maintains running statistics for eval. Pad rows never enter batch
/// statistics.
pub fn norm_forward<F: Scalar>(
    x: &Tensor<F>,
    mask: Option<&[F]>,
    kind: NormKind,
    gain: &[F],
    bias: &[F],
    train: bool,
    state: Option<&mut NormState<F>>,
) -> Result<(Tensor<F>, NormCache<F>)> {
    let (rows, h) = rows_of(x)?;
    if gain.len() != h || bias.len() != h {
        return Err(HgError::Shape(format!(
            "norm affine lengths {}/{} vs feature dim {h}",
            gain.len(),
            bias.len()
        )));
    }
    check_mask_len(mask, rows)?;
    let eps = F::from_f64(NORM_EPS);
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    match kind {
        NormKind::Layer => {
            let mut inv_std = vec![F::ZERO; rows];
            let xd = x.data();
            let xh = xhat.data_mut();
            let od = out.data_mut();
            let hn = F::from_f64(h as f64);
            for r in 0..rows {
                let row = &xd[r * h..(r + 1) * h];
                let mean = row.iter().copied().sum::<F>() / hn;
                let mut var = F::ZERO;
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var /= hn;
                let istd = F::ONE / (var + eps).sqrt();
                inv_std[r] = istd;
                for j in 0..h {
                    let xv = (row[j] - mean) * istd;
                    xh[r * h + j] = xv;
                    od[r * h + j] = gain[j] * xv + bias[j];
                }
            }
            Ok((
                out,
                NormCache {
                    kind,
                    xhat,
                    inv_std,
                    stats_from_batch: true,
                    counted: rows,
                },
            ))
        }
        NormKind::Batch => {
            let xd = x.data();
            let counted = match mask {
                Some(m) => m.iter().filter(|&&v| v != F::ZERO).count(),
                None => rows,
            };
            let (mean, var, stats_from_batch) = if train {
                if counted == 0 {
                    return Err(HgError::State(
                        "batch norm saw no unmasked positions".into(),
                    ));
                }
                let mut mean = vec![F::ZERO; h];
                let mut var = vec![F::ZERO; h];
                let cn = F::from_f64(counted as f64);
                for r in 0..rows {
                    if mask.map(|m| m[r] == F::ZERO).unwrap_or(false) {
                        continue;
                    }
                    for j in 0..h {
                        mean[j] += xd[r * h + j];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= cn;
                }
                for r in 0..rows {
                    if mask.map(|m| m[r] == F::ZERO).unwrap_or(false) {
                        continue;
                    }
                    for j in 0..h {
                        let d = xd[r * h + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= cn;
                }
                (mean, var, true)
            } else {
                let state = state.as_ref().ok_or_else(|| {
                    HgError::State("eval-mode batch norm requires running statistics".into())
                })?;
                if state.batches_seen == 0 {
                    return Err(HgError::State(
                        "eval-mode batch norm before any training batch".into(),
                    ));
                }
                (
                    state.running_mean.clone(),
                    state.running_var.clone(),
                    false,
                )
            };
            let mut inv_std = vec![F::ZERO; h];
            for j in 0..h {
                inv_std[j] = F::ONE / (var[j] + eps).sqrt();
            }
            let xh = xhat.data_mut();
            let od = out.data_mut();
            for r in 0..rows {
                for j in 0..h {
                    let xv = (xd[r * h + j] - mean[j]) * inv_std[j];
                    xh[r * h + j] = xv;
                    od[r * h + j] = gain[j] * xv + bias[j];
                }
            }
            if train {
                if let Some(state) = state {
                    let m = F::from_f64(RUNNING_STAT_MOMENTUM);
                    let keep = F::ONE - m;
                    for j in 0..h {
                        state.running_mean[j] = keep * state.running_mean[j] + m * mean[j];
                        state.running_var[j] = keep * state.running_var[j] + m * var[j];
                    }
                    state.batches_seen += 1;
                }
            }
            Ok((
                out,
                NormCache {
                    kind,
                    xhat,
                    inv_std,
                    stats_from_batch,
                    counted,
                },
            ))
        }
    }
}

/// Normalization backward: gradients for the input and the affine pair.
/// Statistic terms only involve the rows that produced the statistics.
pub fn norm_backward<F: Scalar>(
    g: &Tensor<F>,
    cache: &NormCache<F>,
    mask: Option<&[F]>,
    gain: &[F],
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    if g.shape() != cache.xhat.shape() {
        return Err(HgError::Contract(format!(
            "norm backward: grad shape {:?} vs cached {:?}",
            g.shape(),
            cache.xhat.shape()
        )));
    }
    let (rows, h) = rows_of(g)?;
    check_mask_len(mask, rows)?;
    let gd = g.data();
    let xh = cache.xhat.data();
    let mut g_x = Tensor::zeros(g.shape());
    let mut g_gain = vec![F::ZERO; h];
    let mut g_bias = vec![F::ZERO; h];
    for r in 0..rows {
        for j in 0..h {
            g_gain[j] += gd[r * h + j] * xh[r * h + j];
            g_bias[j] += gd[r * h + j];
        }
    }
    match cache.kind {
        NormKind::Layer => {
            let gx = g_x.data_mut();
            let hn = F::from_f64(h as f64);
            for r in 0..rows {
                let istd = cache.inv_std[r];
                let mut m1 = F::ZERO;
                let mut m2 = F::ZERO;
                for j in 0..h {
                    let gxh = gd[r * h + j] * gain[j];
                    m1 += gxh;
                    m2 += gxh * xh[r * h + j];
                }
                m1 /= hn;
                m2 /= hn;
                for j in 0..h {
                    let gxh = gd[r * h + j] * gain[j];
                    gx[r * h + j] = istd * (gxh - m1 - xh[r * h + j] * m2);
                }
            }
        }
        NormKind::Batch => {
            let gx = g_x.data_mut();
            if cache.stats_from_batch {
                let cn = F::from_f64(cache.counted as f64);
                let mut m1 = vec![F::ZERO; h];
                let mut m2 = vec![F::ZERO; h];
                for r in 0..rows {
                    if mask.map(|m| m[r] == F::ZERO).unwrap_or(false) {
                        continue;
                    }
                    for j in 0..h {
                        let gxh = gd[r * h + j] * gain[j];
                        m1[j] += gxh;
                        m2[j] += gxh * xh[r * h + j];
                    }
                }
                for j in 0..h {
                    m1[j] /= cn;
                    m2[j] /= cn;
                }
                for r in 0..rows {
                    let in_stats = !mask.map(|m| m[r] == F::ZERO).unwrap_or(false);
                    for j in 0..h {
                        let gxh = gd[r * h + j] * gain[j];
                        let stat = if in_stats {
                            m1[j] + xh[r * h + j] * m2[j]
                        } else {
                            F::ZERO
                        };
                        gx[r * h + j] = cache.inv_std[j] * (gxh - stat);
                    }
                }
            } else {
                // eval: running statistics are constants
                for r in 0..rows {
                    for j in 0..h {
                        gx[r * h + j] = gd[r * h + j] * gain[j] * cache.inv_std[j];
                    }
                }
            }
        }
    }
    Ok((g_x, g_gain, g_bias))
}

fn make_dropout_mask<F: Scalar>(
    b: usize,
    t: usize,
    h: usize,
    rate: f64,
    seeds: &[u64],
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(HgError::Config(format!("dropout rate {rate} not in [0,1)")));
    }
    if seeds.len() != b {
        return Err(HgError::Contract(format!(
            "{} dropout seeds for batch of {b}",
            seeds.len()
        )));
    }
    let keep = 1.0 - rate;
    let scale = F::from_f64(1.0 / keep);
    let mut mask = Tensor::zeros(&[b, t, h]);
    let md = mask.data_mut();
    for (bi, &seed) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut md[bi * t * h..(bi + 1) * t * h] {
            if rng.gen::<f64>() < keep {
                *v = scale;
            }
        }
    }
    Ok(mask)
}

fn mul_dropout<F: Scalar>(x: &mut Tensor<F>, mask: &Tensor<F>) {
    for (v, &m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

/// Full block forward. Prenorm:
/// `out = x + mask(drop(glu(decode(conv(encode(mask(norm(x))))))))`;
/// postnorm moves the norm after the dropout, before the residual add.
pub fn layer_forward<F: Scalar>(
    x: &Tensor<F>,
    params: &HGConvLayerParams<F>,
    mut norm_state: Option<&mut NormState<F>>,
    run: &LayerRun<F>,
) -> Result<(Tensor<F>, LayerActivations<F>)> {
    let (b, t, h) = bth_of(x)?;
    if h != params.feature_dim() {
        return Err(HgError::Shape(format!(
            "input feature dim {h} vs layer dim {}",
            params.feature_dim()
        )));
    }
    check_mask_len(run.mask, b * t)?;

    let mut norm_cache = None;
    let branch_in = match run.placement {
        NormPlacement::Pre => {
            let (mut normed, cache) = norm_forward(
                x,
                run.mask,
                run.norm_kind,
                &params.norm_gain,
                &params.norm_bias,
                run.train,
                norm_state.as_deref_mut(),
            )?;
            norm_cache = Some(cache);
            apply_row_mask(&mut normed, run.mask);
            normed
        }
        NormPlacement::Post => x.clone(),
    };

    let y = encode(&branch_in, &params.w_e)?;
    let (conv_pre, conv_tanh, h_post) = global_conv_parts(&y, &params.w_c, &params.w_b)?;
    let (sinv_re, sinv_im, sinv_clamped) = decoder_inverse_spectrum(&params.w_d, EPSILON_INV)?;
    let plan_h = Fft::new(h)?;
    let z = rows_spectral_apply(&h_post, &plan_h, &sinv_re, &sinv_im, false);
    let (glu_lin, glu_gate_pre, mut branch) = glu_parts(
        &z,
        &params.w_alpha,
        &params.b_alpha,
        &params.w_beta,
        &params.b_beta,
    )?;

    let dropout_mask = if run.train && run.dropout_rate > 0.0 {
        let seeds = run.dropout_seeds.ok_or_else(|| {
            HgError::Contract("training with dropout requires per-item seeds".into())
        })?;
        let mask = make_dropout_mask::<F>(b, t, h, run.dropout_rate, seeds)?;
        mul_dropout(&mut branch, &mask);
        Some(mask)
    } else {
        None
    };

    if let NormPlacement::Post = run.placement {
        let (normed, cache) = norm_forward(
            &branch,
            run.mask,
            run.norm_kind,
            &params.norm_gain,
            &params.norm_bias,
            run.train,
            norm_state.as_deref_mut(),
        )?;
        norm_cache = Some(cache);
        branch = normed;
    }
    apply_row_mask(&mut branch, run.mask);

    let out = x.add(&branch)?;
    Ok((
        out,
        LayerActivations {
            branch_in,
            y,
            conv_pre,
            conv_tanh,
            h_post,
            z,
            glu_lin,
            glu_gate_pre,
            dropout_mask,
            norm: norm_cache.expect("norm runs in both placements"),
            sinv_re,
            sinv_im,
            sinv_clamped,
        },
    ))
}

/// Full block backward: exact adjoint of [`layer_forward`] given its cache.
/// Returns the input gradient and a params-shaped gradient set.
pub fn layer_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    acts: &LayerActivations<F>,
    params: &HGConvLayerParams<F>,
    run: &LayerRun<F>,
) -> Result<(Tensor<F>, HGConvLayerParams<F>)> {
    if grad_out.shape() != acts.z.shape() || acts.branch_in.shape() != acts.z.shape() {
        return Err(HgError::Contract(format!(
            "stale activation cache: grad shape {:?} vs cached {:?}",
            grad_out.shape(),
            acts.z.shape()
        )));
    }
    let (b, t, _h) = bth_of(grad_out)?;
    check_mask_len(run.mask, b * t)?;

    let mut g_branch = grad_out.clone();
    apply_row_mask(&mut g_branch, run.mask);

    let mut g_gain = None;
    let mut g_bias = None;
    if let NormPlacement::Post = run.placement {
        let (gx, gg, gb) = norm_backward(&g_branch, &acts.norm, run.mask, &params.norm_gain)?;
        g_branch = gx;
        g_gain = Some(gg);
        g_bias = Some(gb);
    }
    if let Some(dm) = &acts.dropout_mask {
        mul_dropout(&mut g_branch, dm);
    }

    let (g_z, g_wa, g_ba, g_wb2, g_bb) = glu_backward(
        &g_branch,
        &acts.z,
        &acts.glu_lin,
        &acts.glu_gate_pre,
        &params.w_alpha,
        &params.w_beta,
    )?;
    let (g_h, g_wd) = decode_backward(
        &g_z,
        &acts.h_post,
        &acts.sinv_re,
        &acts.sinv_im,
        &acts.sinv_clamped,
    )?;
    let mut g_a = Tensor::zeros(g_h.shape());
    for i in 0..g_a.len() {
        g_a.data_mut()[i] =
            g_h.data()[i] * gelu_grad_cached(acts.conv_pre.data()[i], acts.conv_tanh.data()[i]);
    }
    let (g_y, g_wc, g_wb) = global_conv_backward(&g_a, &acts.y, &params.w_c, &params.w_b)?;
    #[allow(unused_mut)]
    let (mut g_branch_in, mut g_we) = encode_backward(&g_y, &acts.branch_in, &params.w_e)?;

    // Deliberately corrupt one adjoint so the self-test's negative control
    // has something to catch.
    #[cfg(feature = "fault_injection")]
    for v in g_we.iter_mut() {
        *v = -*v;
    }

    let g_in = match run.placement {
        NormPlacement::Pre => {
            apply_row_mask(&mut g_branch_in, run.mask);
            let (gx, gg, gb) =
                norm_backward(&g_branch_in, &acts.norm, run.mask, &params.norm_gain)?;
            g_gain = Some(gg);
            g_bias = Some(gb);
            grad_out.add(&gx)?
        }
        NormPlacement::Post => grad_out.add(&g_branch_in)?,
    };

    let grads = HGConvLayerParams {
        w_e: g_we,
        w_c: g_wc,
        w_b: g_wb,
        w_d: g_wd,
        w_alpha: g_wa,
        b_alpha: g_ba,
        w_beta: g_wb2,
        b_beta: g_bb,
        norm_gain: g_gain.expect("norm backward ran"),
        norm_bias: g_bias.expect("norm backward ran"),
    };
    Ok((g_in, grads))
}
