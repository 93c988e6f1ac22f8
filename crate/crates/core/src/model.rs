//! The full classifier: token (or scalar) embedding plus learned positions,
//! a stack of HGConv blocks, mask-aware global average pooling, and an
//! affine head. Forward returns the caches its hand-derived backward
//! consumes; nothing here is differentiated automatically.

use crate::data::Batch;
use crate::error::{HgError, Result};
use crate::layer::{
    layer_backward, layer_forward, HGConvLayerParams, LayerActivations, LayerRun, NormKind,
    NormPlacement, NormState,
};
use crate::numerics::{matmul_at_acc, matmul_bt_acc, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// integer token ids looked up in an embedding table
    Tokens,
    /// one scalar per position, affinely projected to H channels
    Float,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub feature_dim: usize,
    pub kernel_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub norm_kind: NormKind,
    pub norm_placement: NormPlacement,
    pub label_smoothing: f64,
    pub input_mode: InputMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_seq_len", self.max_seq_len),
            ("feature_dim", self.feature_dim),
            ("kernel_dim", self.kernel_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HgError::Config(format!("{name} must be positive")));
            }
        }
        if self.input_mode == InputMode::Tokens && self.vocab_size == 0 {
            return Err(HgError::Config("vocab_size must be positive".into()));
        }
        if self.kernel_dim > self.max_seq_len {
            return Err(HgError::Config(format!(
                "kernel_dim {} exceeds max_seq_len {}",
                self.kernel_dim, self.max_seq_len
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(HgError::Config(format!(
                "label_smoothing {} not in [0,1)",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HgError::Config(format!(
                "dropout {} not in [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Closed-form number of learnable scalars for this configuration.
    pub fn param_count(&self) -> usize {
        let (h, k, t, c) = (
            self.feature_dim,
            self.kernel_dim,
            self.max_seq_len,
            self.num_classes,
        );
        let input = match self.input_mode {
            InputMode::Tokens => self.vocab_size * h,
            InputMode::Float => 2 * h,
        };
        let per_layer = 2 * h * h + k * h + 7 * h;
        input + t * h + self.num_layers * per_layer + h * c + c
    }
}

/// How positions map into feature space, by input mode.
#[derive(Debug, Clone, PartialEq)]
pub enum InputMap<F: Scalar> {
    /// vocab_size x H lookup table
    Tokens(Tensor<F>),
    /// scalar input x becomes `x * w + b`, both length H
    Float { w: Vec<F>, b: Vec<F> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Scalar> {
    pub input: InputMap<F>,
    /// max_seq_len x H, learned
    pub pos_emb: Tensor<F>,
    pub layers: Vec<HGConvLayerParams<F>>,
    /// H x C
    pub head_w: Tensor<F>,
    pub head_b: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.feature_dim;
        let d = Normal::new(0.0f64, (1.0 / h as f64).sqrt()).expect("positive std");
        let draw = |n: usize, rng: &mut R| -> Vec<F> {
            (0..n).map(|_| F::from_f64(d.sample(rng))).collect()
        };
        let input = match config.input_mode {
            InputMode::Tokens => InputMap::Tokens(Tensor::from_vec(
                &[config.vocab_size, h],
                draw(config.vocab_size * h, rng),
            )?),
            InputMode::Float => InputMap::Float {
                w: draw(h, rng),
                b: vec![F::ZERO; h],
            },
        };
        // Positions start as interleaved sin/cos at geometric wavelengths
        // (still trained afterwards). The smooth code lets nearby positions
        // share structure instead of each table row learning its region from
        // scratch; scaled so a position row's norm is comparable to a token
        // row's and neither drowns the other.
        let pos_scale = (1.0 / h as f64).sqrt();
        let mut pos = Vec::with_capacity(config.max_seq_len * h);
        for t in 0..config.max_seq_len {
            for i in 0..h {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / h as f64);
                let angle = t as f64 * freq;
                let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                pos.push(F::from_f64(v * pos_scale));
            }
        }
        let pos_emb = Tensor::from_vec(&[config.max_seq_len, h], pos)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(HGConvLayerParams::init(h, config.kernel_dim, rng)?);
        }
        let head_w = Tensor::from_vec(&[h, config.num_classes], draw(h * config.num_classes, rng))?;
        Ok(ModelParams {
            input,
            pos_emb,
            layers,
            head_w,
            head_b: vec![F::ZERO; config.num_classes],
        })
    }

    /// Zero tensors shaped for `config` — the target of a checkpoint load.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.feature_dim;
        let input = match config.input_mode {
            InputMode::Tokens => InputMap::Tokens(Tensor::zeros(&[config.vocab_size, h])),
            InputMode::Float => InputMap::Float {
                w: vec![F::ZERO; h],
                b: vec![F::ZERO; h],
            },
        };
        let layers = (0..config.num_layers)
            .map(|_| HGConvLayerParams::zeros(h, config.kernel_dim))
            .collect();
        Ok(ModelParams {
            input,
            pos_emb: Tensor::zeros(&[config.max_seq_len, h]),
            layers,
            head_w: Tensor::zeros(&[h, config.num_classes]),
            head_b: vec![F::ZERO; config.num_classes],
        })
    }

    /// Same shapes, all zero — the gradient container.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            input: match &self.input {
                InputMap::Tokens(t) => InputMap::Tokens(Tensor::zeros(t.shape())),
                InputMap::Float { w, b } => InputMap::Float {
                    w: vec![F::ZERO; w.len()],
                    b: vec![F::ZERO; b.len()],
                },
            },
            pos_emb: Tensor::zeros(self.pos_emb.shape()),
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            head_w: Tensor::zeros(self.head_w.shape()),
            head_b: vec![F::ZERO; self.head_b.len()],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.pos_emb.shape()[1]
    }

    /// Every learnable tensor in a fixed, documented order. The optimizer
    /// and the checkpoint format both key off these names.
    pub fn named_tensors(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = Vec::new();
        match &self.input {
            InputMap::Tokens(t) => out.push(("token_emb".into(), t.data())),
            InputMap::Float { w, b } => {
                out.push(("input_w".into(), w.as_slice()));
                out.push(("input_b".into(), b.as_slice()));
            }
        }
        out.push(("pos_emb".into(), self.pos_emb.data()));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, s) in layer.named_slices() {
                out.push((format!("layer{i}.{name}"), s));
            }
        }
        out.push(("head_w".into(), self.head_w.data()));
        out.push(("head_b".into(), self.head_b.as_slice()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = Vec::new();
        match &mut self.input {
            InputMap::Tokens(t) => out.push(("token_emb".into(), t.data_mut())),
            InputMap::Float { w, b } => {
                out.push(("input_w".into(), w.as_mut_slice()));
                out.push(("input_b".into(), b.as_mut_slice()));
            }
        }
        out.push(("pos_emb".into(), self.pos_emb.data_mut()));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, s) in layer.named_slices_mut() {
                out.push((format!("layer{i}.{name}"), s));
            }
        }
        out.push(("head_w".into(), self.head_w.data_mut()));
        out.push(("head_b".into(), self.head_b.as_mut_slice()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(HgError::Shape(format!(
                "{} layers vs configured {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        for layer in &self.layers {
            layer.validate(config.max_seq_len)?;
        }
        for (name, s) in self.named_tensors() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(HgError::Contract(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }

    /// `self += s * other`, tensorwise.
    pub fn axpy(&mut self, s: F, other: &Self) -> Result<()> {
        let rhs = other.named_tensors();
        for ((name, dst), (rname, src)) in self.named_tensors_mut().into_iter().zip(rhs) {
            if name != rname || dst.len() != src.len() {
                return Err(HgError::Shape(format!(
                    "axpy mismatch at {name}/{rname}"
                )));
            }
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d += s * v;
            }
        }
        Ok(())
    }
}

/// Mutable per-model state that is not optimized: batch-norm running
/// statistics, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F: Scalar> {
    pub norms: Vec<NormState<F>>,
}

impl<F: Scalar> ModelState<F> {
    pub fn new(config: &ModelConfig) -> Self {
        ModelState {
            norms: (0..config.num_layers)
                .map(|_| NormState::new(config.feature_dim))
                .collect(),
        }
    }
}

/// Cheap stateless mixer used wherever one seed has to spawn independent
/// streams (epoch order, dropout, synthetic data splits).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dropout seed for one (run, sample, layer) triple. Keyed by the sample's
/// dataset index, not its slot in the batch, so re-sharding a batch across
/// workers cannot change which units drop.
pub fn dropout_seed_for(base: u64, sample_index: u64, layer: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ sample_index) ^ layer)
}

enum EmbedCache<F: Scalar> {
    Tokens(Vec<u16>),
    Float(Tensor<F>),
}

/// Forward-pass residue consumed by [`backward`].
pub struct ModelCaches<F: Scalar> {
    embed: EmbedCache<F>,
    maskf: Vec<F>,
    batch_size: usize,
    t_eff: usize,
    layer_acts: Vec<LayerActivations<F>>,
    /// mean over live positions of the final stack output, B x H
    pooled: Tensor<F>,
    /// live-position counts per item (floored at one)
    counts: Vec<F>,
    train: bool,
}

fn check_seq_len(t_eff: usize, config: &ModelConfig) -> Result<()> {
    // K <= T_eff is enforced where the sequence conv runs
    if t_eff == 0 || t_eff > config.max_seq_len {
        return Err(HgError::Shape(format!(
            "sequence length {t_eff} outside 1..={}",
            config.max_seq_len
        )));
    }
    Ok(())
}

/// Token + position embedding with the pad mask multiplied in:
/// `x0[b,t] = (token_emb[tok] + pos_emb[t]) * mask[b,t]`.
pub fn embed<F: Scalar>(
    batch: &Batch,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<(Tensor<F>, Vec<F>)> {
    let table = match &params.input {
        InputMap::Tokens(t) => t,
        InputMap::Float { .. } => {
            return Err(HgError::Config(
                "token batch fed to a float-input model".into(),
            ))
        }
    };
    let (b, t) = (batch.batch_size(), batch.seq_len);
    if b == 0 {
        return Err(HgError::Shape("empty batch".into()));
    }
    check_seq_len(t, config)?;
    let h = params.feature_dim();
    let mut x0 = Tensor::zeros(&[b, t, h]);
    let maskf: Vec<F> = batch.mask.iter().map(|&m| F::from_f64(m as f64)).collect();
    let xd = x0.data_mut();
    for bi in 0..b {
        for tt in 0..t {
            let tok = batch.tokens[bi * t + tt] as usize;
            if tok >= config.vocab_size {
                return Err(HgError::Data(format!(
                    "token id {tok} at (item {bi}, position {tt}) outside vocab of {}",
                    config.vocab_size
                )));
            }
            let mv = maskf[bi * t + tt];
            if mv == F::ZERO {
                continue; // row stays zero
            }
            let erow = table.row(tok);
            let prow = params.pos_emb.row(tt);
            let out = &mut xd[(bi * t + tt) * h..(bi * t + tt + 1) * h];
            for j in 0..h {
                out[j] = (erow[j] + prow[j]) * mv;
            }
        }
    }
    Ok((x0, maskf))
}

/// Scalar-sequence embedding (float input mode):
/// `x0[b,t] = (x[b,t] * w + b + pos_emb[t]) * mask[b,t]`.
pub fn embed_float<F: Scalar>(
    x: &Tensor<F>,
    mask: Option<&[F]>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (w, b_vec) = match &params.input {
        InputMap::Float { w, b } => (w, b),
        InputMap::Tokens(_) => {
            return Err(HgError::Config(
                "float input fed to a token-embedding model".into(),
            ))
        }
    };
    let (b, t) = match *x.shape() {
        [b, t] => (b, t),
        ref s => {
            return Err(HgError::Shape(format!(
                "float input must be (B,T), got {s:?}"
            )))
        }
    };
    if b == 0 {
        return Err(HgError::Shape("empty batch".into()));
    }
    check_seq_len(t, config)?;
    if let Some(m) = mask {
        if m.len() != b * t {
            return Err(HgError::Shape(format!(
                "mask has {} entries for {} positions",
                m.len(),
                b * t
            )));
        }
    }
    let h = params.feature_dim();
    let mut x0 = Tensor::zeros(&[b, t, h]);
    let maskf: Vec<F> = match mask {
        Some(m) => m.to_vec(),
        None => vec![F::ONE; b * t],
    };
    let xd = x0.data_mut();
    for bi in 0..b {
        for tt in 0..t {
            let mv = maskf[bi * t + tt];
            if mv == F::ZERO {
                continue;
            }
            let xv = x.data()[bi * t + tt];
            let prow = params.pos_emb.row(tt);
            let out = &mut xd[(bi * t + tt) * h..(bi * t + tt + 1) * h];
            for j in 0..h {
                out[j] = (xv * w[j] + b_vec[j] + prow[j]) * mv;
            }
        }
    }
    Ok((x0, maskf))
}

/// Everything after the embedding: N blocks, masked GAP, affine head.
#[allow(clippy::too_many_arguments)]
fn stack_forward<F: Scalar>(
    x0: Tensor<F>,
    maskf: Vec<F>,
    embed_cache: EmbedCache<F>,
    sample_indices: &[usize],
    params: &ModelParams<F>,
    config: &ModelConfig,
    train: bool,
    dropout_seed: u64,
    mut state: Option<&mut ModelState<F>>,
) -> Result<(Tensor<F>, ModelCaches<F>)> {
    let (b, t, h) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    let c = params.head_b.len();
    let mut x = x0;
    let mut layer_acts = Vec::with_capacity(params.layers.len());
    let use_dropout = train && config.dropout > 0.0;
    for (li, layer) in params.layers.iter().enumerate() {
        let seeds: Vec<u64> = if use_dropout {
            sample_indices
                .iter()
                .map(|&si| dropout_seed_for(dropout_seed, si as u64, li as u64))
                .collect()
        } else {
            Vec::new()
        };
        let run = LayerRun {
            placement: config.norm_placement,
            norm_kind: config.norm_kind,
            train,
            dropout_rate: if use_dropout { config.dropout } else { 0.0 },
            dropout_seeds: if use_dropout { Some(&seeds) } else { None },
            mask: Some(&maskf),
        };
        let layer_state = match state.as_deref_mut() {
            Some(st) => Some(st.norms.get_mut(li).ok_or_else(|| {
                HgError::State(format!("no norm state for layer {li}"))
            })?),
            None => None,
        };
        let (next, acts) = layer_forward(&x, layer, layer_state, &run)?;
        x = next;
        layer_acts.push(acts);
    }

    // mask-aware global average pooling: mean over live positions only,
    // an all-pad item pools to zero
    let mut pooled = Tensor::zeros(&[b, h]);
    let mut counts = vec![F::ZERO; b];
    {
        let xd = x.data();
        let pd = pooled.data_mut();
        for bi in 0..b {
            let mut cnt = F::ZERO;
            for tt in 0..t {
                let mv = maskf[bi * t + tt];
                if mv == F::ZERO {
                    continue;
                }
                cnt += mv;
                for j in 0..h {
                    pd[bi * h + j] += xd[(bi * t + tt) * h + j];
                }
            }
            let denom = if cnt == F::ZERO { F::ONE } else { cnt };
            counts[bi] = denom;
            for j in 0..h {
                pd[bi * h + j] /= denom;
            }
        }
    }

    let mut logits = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        logits.row_mut(bi).copy_from_slice(&params.head_b);
    }
    crate::numerics::matmul_acc(pooled.data(), params.head_w.data(), logits.data_mut(), b, h, c);
    logits.assert_finite("logits")?;

    Ok((
        logits,
        ModelCaches {
            embed: embed_cache,
            maskf,
            batch_size: b,
            t_eff: t,
            layer_acts,
            pooled,
            counts,
            train,
        },
    ))
}

/// Full forward pass over a token batch. `state` carries batch-norm
/// running statistics and is only written in training mode.
pub fn forward<F: Scalar>(
    batch: &Batch,
    params: &ModelParams<F>,
    config: &ModelConfig,
    train: bool,
    dropout_seed: u64,
    state: Option<&mut ModelState<F>>,
) -> Result<(Tensor<F>, ModelCaches<F>)> {
    let (x0, maskf) = embed(batch, params, config)?;
    stack_forward(
        x0,
        maskf,
        EmbedCache::Tokens(batch.tokens.clone()),
        &batch.indices,
        params,
        config,
        train,
        dropout_seed,
        state,
    )
}

/// Full forward pass in float input mode; sample indices for dropout are
/// positional.
pub fn forward_float<F: Scalar>(
    x: &Tensor<F>,
    mask: Option<&[F]>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    train: bool,
    dropout_seed: u64,
    state: Option<&mut ModelState<F>>,
) -> Result<(Tensor<F>, ModelCaches<F>)> {
    let (x0, maskf) = embed_float(x, mask, params, config)?;
    let indices: Vec<usize> = (0..x.shape()[0]).collect();
    stack_forward(
        x0,
        maskf,
        EmbedCache::Float(x.clone()),
        &indices,
        params,
        config,
        train,
        dropout_seed,
        state,
    )
}

/// Exact adjoint of [`forward`] / [`forward_float`]: gradients for every
/// learnable tensor, in a params-shaped container.
pub fn backward<F: Scalar>(
    grad_logits: &Tensor<F>,
    caches: &ModelCaches<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
) -> Result<ModelParams<F>> {
    let (b, t, h) = (caches.batch_size, caches.t_eff, params.feature_dim());
    let c = params.head_b.len();
    if grad_logits.shape() != [b, c] {
        return Err(HgError::Contract(format!(
            "gradient shape {:?} vs cached batch ({b}, {c})",
            grad_logits.shape()
        )));
    }
    if caches.layer_acts.len() != params.layers.len() {
        return Err(HgError::Contract(format!(
            "cache has {} layers, params have {}",
            caches.layer_acts.len(),
            params.layers.len()
        )));
    }
    let mut grads = params.zeros_like();

    // head
    let mut g_pooled = Tensor::zeros(&[b, h]);
    matmul_bt_acc(
        grad_logits.data(),
        params.head_w.data(),
        g_pooled.data_mut(),
        b,
        c,
        h,
    );
    matmul_at_acc(
        caches.pooled.data(),
        grad_logits.data(),
        grads.head_w.data_mut(),
        b,
        h,
        c,
    );
    for bi in 0..b {
        for j in 0..c {
            grads.head_b[j] += grad_logits.data()[bi * c + j];
        }
    }

    // GAP adjoint: spread each pooled gradient evenly over live positions
    let shape: &[usize] = &[b, t, h];
    let mut g = Tensor::zeros(shape);
    {
        let gd = g.data_mut();
        for bi in 0..b {
            let denom = caches.counts[bi];
            for tt in 0..t {
                let mv = caches.maskf[bi * t + tt];
                if mv == F::ZERO {
                    continue;
                }
                for j in 0..h {
                    gd[(bi * t + tt) * h + j] = g_pooled.data()[bi * h + j] / denom;
                }
            }
        }
    }

    // blocks, in reverse
    for li in (0..params.layers.len()).rev() {
        let run = LayerRun {
            placement: config.norm_placement,
            norm_kind: config.norm_kind,
            train: caches.train,
            dropout_rate: 0.0, // backward reads the cached mask, not the rate
            dropout_seeds: None,
            mask: Some(&caches.maskf),
        };
        let (g_in, layer_grads) =
            layer_backward(&g, &caches.layer_acts[li], &params.layers[li], &run)?;
        grads.layers[li] = layer_grads;
        g = g_in;
    }

    // embedding adjoint
    match (&caches.embed, &mut grads.input) {
        (EmbedCache::Tokens(tokens), InputMap::Tokens(g_table)) => {
            let gd = g.data();
            for bi in 0..b {
                for tt in 0..t {
                    let mv = caches.maskf[bi * t + tt];
                    if mv == F::ZERO {
                        continue;
                    }
                    let tok = tokens[bi * t + tt] as usize;
                    let src = &gd[(bi * t + tt) * h..(bi * t + tt + 1) * h];
                    let erow = g_table.row_mut(tok);
                    for j in 0..h {
                        erow[j] += src[j] * mv;
                    }
                    let prow = grads.pos_emb.row_mut(tt);
                    for j in 0..h {
                        prow[j] += src[j] * mv;
                    }
                }
            }
        }
        (EmbedCache::Float(x), InputMap::Float { w, b: gb }) => {
            let gd = g.data();
            let (pw, _) = match &params.input {
                InputMap::Float { w, b } => (w, b),
                _ => unreachable!("cache and params agree by construction"),
            };
            for bi in 0..b {
                for tt in 0..t {
                    let mv = caches.maskf[bi * t + tt];
                    if mv == F::ZERO {
                        continue;
                    }
                    let src = &gd[(bi * t + tt) * h..(bi * t + tt + 1) * h];
                    let xv = x.data()[bi * t + tt];
                    let prow = grads.pos_emb.row_mut(tt);
                    for j in 0..h {
                        let gj = src[j] * mv;
                        w[j] += gj * xv;
                        gb[j] += gj;
                        prow[j] += gj;
                    }
                    let _ = pw;
                }
            }
        }
        _ => {
            return Err(HgError::Contract(
                "embedding cache does not match the parameter input map".into(),
            ))
        }
    }

    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PAD_ID;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(norm_kind: NormKind, norm_placement: NormPlacement) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            max_seq_len: 8,
            feature_dim: 4,
            kernel_dim: 4,
            num_layers: 2,
            num_classes: 3,
            dropout: 0.0,
            norm_kind,
            norm_placement,
            label_smoothing: 0.0,
            input_mode: InputMode::Tokens,
        }
    }

    fn hand_batch(b: usize, t: usize, vocab: usize, pad_tail: &[usize], seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(b * t);
        let mut mask = Vec::with_capacity(b * t);
        for bi in 0..b {
            let pads = pad_tail.get(bi).copied().unwrap_or(0);
            for tt in 0..t {
                if tt < t - pads {
                    tokens.push(rng.gen_range(0..vocab as u16));
                    mask.push(1);
                } else {
                    tokens.push(0); // any in-vocab id; the mask kills it
                    mask.push(0);
                }
            }
        }
        Batch {
            tokens,
            mask,
            labels: vec![0; b],
            indices: (0..b).collect(),
            seq_len: t,
        }
    }

    #[test]
    fn embed_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(2, 3, config.vocab_size, &[0, 1], 2);
        let (x0, _) = embed(&batch, &params, &config).unwrap();
        let table = match &params.input {
            InputMap::Tokens(t) => t,
            _ => unreachable!(),
        };
        for bi in 0..2 {
            for tt in 0..3 {
                let tok = batch.tokens[bi * 3 + tt] as usize;
                let m = batch.mask[bi * 3 + tt] as f64;
                for j in 0..4 {
                    let want = (table.row(tok)[j] + params.pos_emb.row(tt)[j]) * m;
                    assert_eq!(x0.data()[(bi * 3 + tt) * 4 + j], want);
                }
            }
        }
    }

    #[test]
    fn embed_all_pad_row_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(1, 4, config.vocab_size, &[4], 4);
        let (x0, _) = embed(&batch, &params, &config).unwrap();
        assert!(x0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_depends_on_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = Batch {
            tokens: vec![3, 3],
            mask: vec![1, 1],
            labels: vec![0],
            indices: vec![0],
            seq_len: 2,
        };
        let (x0, _) = embed(&batch, &params, &config).unwrap();
        assert_ne!(&x0.data()[0..4], &x0.data()[4..8], "positions must differ");
    }

    #[test]
    fn embed_rejects_out_of_vocab_ids_naming_the_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = Batch {
            tokens: vec![1, 42, 2, 3],
            mask: vec![1; 4],
            labels: vec![0, 0],
            indices: vec![0, 1],
            seq_len: 2,
        };
        match embed(&batch, &params, &config) {
            Err(HgError::Data(msg)) => {
                assert!(msg.contains("item 0") && msg.contains("position 1"), "{msg}");
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn forward_with_no_layers_is_head_of_pooled_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        config.num_layers = 0;
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(2, 6, config.vocab_size, &[0, 2], 8);
        let (logits, _) = forward(&batch, &params, &config, false, 0, None).unwrap();
        let (x0, maskf) = embed(&batch, &params, &config).unwrap();
        for bi in 0..2 {
            let live: Vec<usize> = (0..6).filter(|&t| maskf[bi * 6 + t] != 0.0).collect();
            let mut pooled = vec![0.0; 4];
            for &tt in &live {
                for j in 0..4 {
                    pooled[j] += x0.data()[(bi * 6 + tt) * 4 + j];
                }
            }
            for v in pooled.iter_mut() {
                *v /= live.len() as f64;
            }
            for cj in 0..3 {
                let mut want = params.head_b[cj];
                for j in 0..4 {
                    want += pooled[j] * params.head_w.data()[j * 3 + cj];
                }
                assert!((logits.data()[bi * 3 + cj] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_shape_follows_batch_and_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let config = ModelConfig {
            vocab_size: 257,
            max_seq_len: 16,
            feature_dim: 8,
            kernel_dim: 4,
            num_layers: 1,
            num_classes: 9,
            dropout: 0.0,
            norm_kind: NormKind::Layer,
            norm_placement: NormPlacement::Pre,
            label_smoothing: 0.1,
            input_mode: InputMode::Tokens,
        };
        let params = ModelParams::<f32>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(2, 16, 257, &[0, 3], 10);
        let (logits, _) = forward(&batch, &params, &config, false, 0, None).unwrap();
        assert_eq!(logits.shape(), &[2, 9]);
    }

    #[test]
    fn appending_pads_leaves_eval_logits_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = ModelConfig {
            vocab_size: 257,
            max_seq_len: 24,
            feature_dim: 8,
            kernel_dim: 4,
            num_layers: 2,
            num_classes: 3,
            dropout: 0.0,
            norm_kind: NormKind::Layer,
            norm_placement: NormPlacement::Pre,
            label_smoothing: 0.0,
            input_mode: InputMode::Tokens,
        };
        let params = ModelParams::<f32>::init(&config, &mut rng).unwrap();
        let live = 14usize;
        let bytes: Vec<u16> = (0..live).map(|_| rng.gen_range(0..256u16)).collect();
        let make = |t: usize| -> Batch {
            let mut tokens = vec![PAD_ID; t];
            let mut mask = vec![0u8; t];
            for i in 0..live {
                tokens[i] = bytes[i];
                mask[i] = 1;
            }
            Batch {
                tokens,
                mask,
                labels: vec![0],
                indices: vec![0],
                seq_len: t,
            }
        };
        // padded length already covers live+K-1, so the circular wrap of
        // the sequence conv never touches a live position
        let (short, _) = forward(&make(18), &params, &config, false, 0, None).unwrap();
        let (long, _) = forward(&make(24), &params, &config, false, 0, None).unwrap();
        for (a, b) in short.data().iter().zip(long.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn permuting_the_batch_permutes_logits_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(3, 8, config.vocab_size, &[0, 2, 5], 14);
        let (base, _) = forward(&batch, &params, &config, false, 0, None).unwrap();
        let perm = [2usize, 0, 1];
        let mut tokens = Vec::new();
        let mut mask = Vec::new();
        for &p in &perm {
            tokens.extend_from_slice(batch.token_row(p));
            mask.extend_from_slice(batch.mask_row(p));
        }
        let shuffled = Batch {
            tokens,
            mask,
            labels: perm.iter().map(|&p| batch.labels[p]).collect(),
            indices: perm.iter().map(|&p| batch.indices[p]).collect(),
            seq_len: 8,
        };
        let (permuted, _) = forward(&shuffled, &params, &config, false, 0, None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(permuted.row(i), base.row(p), "row {i}");
        }
    }

    #[test]
    fn kaggle_parameter_count_is_pinned() {
        let config = ModelConfig {
            vocab_size: 257,
            max_seq_len: 4096,
            feature_dim: 256,
            kernel_dim: 32,
            num_layers: 1,
            num_classes: 9,
            dropout: 0.1,
            norm_kind: NormKind::Layer,
            norm_placement: NormPlacement::Pre,
            label_smoothing: 0.1,
            input_mode: InputMode::Tokens,
        };
        assert_eq!(config.param_count(), 1_257_737);
    }

    #[test]
    fn closed_form_count_matches_allocated_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for mode in [InputMode::Tokens, InputMode::Float] {
            let mut config = tiny_config(NormKind::Layer, NormPlacement::Pre);
            config.input_mode = mode;
            let params = ModelParams::<f32>::init(&config, &mut rng).unwrap();
            assert_eq!(params.param_count(), config.param_count(), "{mode:?}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        config.kernel_dim = 100;
        assert!(matches!(config.validate(), Err(HgError::Config(_))));
        let mut config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        config.label_smoothing = 1.0;
        assert!(config.validate().is_err());
        let mut config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        config.dropout = -0.1;
        assert!(config.validate().is_err());
    }

    fn fd_case(norm_kind: NormKind, norm_placement: NormPlacement) {
        let config = tiny_config(norm_kind, norm_placement);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(2, 8, config.vocab_size, &[0, 2], 18);
        let c = {
            let d = Normal::new(0.0, 1.0).unwrap();
            Tensor::from_vec(&[2, 3], (0..6).map(|_| d.sample(&mut rng)).collect()).unwrap()
        };
        let loss = |p: &ModelParams<f64>| -> f64 {
            let mut st = ModelState::new(&config);
            let (logits, _) = forward(&batch, p, &config, true, 0, Some(&mut st)).unwrap();
            logits.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        };
        let mut st = ModelState::new(&config);
        let (_, caches) = forward(&batch, &params, &config, true, 0, Some(&mut st)).unwrap();
        let grads = backward(&c, &caches, &params, &config).unwrap();
        let eps = 1e-5;
        let grad_list = grads.named_tensors();
        for (name, gslice) in &grad_list {
            for i in 0..gslice.len() {
                let mut pp = params.clone();
                for (n, s) in pp.named_tensors_mut() {
                    if &n == name {
                        s[i] += eps;
                    }
                }
                let up = loss(&pp);
                let mut pm = params.clone();
                for (n, s) in pm.named_tensors_mut() {
                    if &n == name {
                        s[i] -= eps;
                    }
                }
                let down = loss(&pm);
                let fd = (up - down) / (2.0 * eps);
                let analytic = gslice[i];
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{norm_kind:?}/{norm_placement:?} {name}[{i}]: {analytic} vs {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn model_gradients_match_fd_prenorm_layernorm() {
        fd_case(NormKind::Layer, NormPlacement::Pre);
    }

    #[test]
    fn model_gradients_match_fd_prenorm_batchnorm() {
        fd_case(NormKind::Batch, NormPlacement::Pre);
    }

    #[test]
    fn model_gradients_match_fd_postnorm_layernorm() {
        fd_case(NormKind::Layer, NormPlacement::Post);
    }

    #[test]
    fn model_gradients_match_fd_postnorm_batchnorm() {
        fd_case(NormKind::Batch, NormPlacement::Post);
    }

    #[test]
    fn pad_positions_and_unused_vocab_rows_get_zero_gradient() {
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        // tokens drawn from {0..4}; ids 5..8 never appear live; item 1 has
        // a padded tail holding id 7
        let batch = Batch {
            tokens: vec![1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1, 2, 7, 7, 7, 7],
            mask: vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0],
            labels: vec![0, 1],
            indices: vec![0, 1],
            seq_len: 8,
        };
        let (_, caches) = forward(&batch, &params, &config, true, 0, None).unwrap();
        let g_logits = Tensor::from_vec(&[2, 3], vec![1.0, -0.5, 0.25, 0.5, 1.5, -1.0]).unwrap();
        let grads = backward(&g_logits, &caches, &params, &config).unwrap();
        let g_table = match &grads.input {
            InputMap::Tokens(t) => t,
            _ => unreachable!(),
        };
        for unused in 5..9 {
            assert!(
                g_table.row(unused).iter().all(|&v| v == 0.0),
                "vocab row {unused} must stay zero"
            );
        }
        for used in 0..5 {
            assert!(
                g_table.row(used).iter().any(|&v| v != 0.0),
                "vocab row {used} should receive gradient"
            );
        }
        // positions 4..8 of item 1 are pads: no positional gradient from them
        // (positions 0..4 are live in both items, so nonzero there)
        assert!(grads.pos_emb.row(3).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn float_mode_embedding_matches_loop_oracle_and_fd() {
        let mut config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        config.input_mode = InputMode::Float;
        config.num_layers = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let d = Normal::new(0.0, 1.0).unwrap();
        let x = Tensor::from_vec(&[2, 8], (0..16).map(|_| d.sample(&mut rng)).collect()).unwrap();
        let (x0, _) = embed_float(&x, None, &params, &config).unwrap();
        let (w, bvec) = match &params.input {
            InputMap::Float { w, b } => (w, b),
            _ => unreachable!(),
        };
        for r in 0..16 {
            for j in 0..4 {
                let want = x.data()[r] * w[j] + bvec[j] + params.pos_emb.row(r % 8)[j];
                assert!((x0.data()[r * 4 + j] - want).abs() < 1e-12);
            }
        }
        // gradient through the projection
        let c = Tensor::from_vec(&[2, 3], (0..6).map(|_| d.sample(&mut rng)).collect()).unwrap();
        let loss = |p: &ModelParams<f64>| -> f64 {
            let (logits, _) = forward_float(&x, None, p, &config, true, 0, None).unwrap();
            logits.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        };
        let (_, caches) = forward_float(&x, None, &params, &config, true, 0, None).unwrap();
        let grads = backward(&c, &caches, &params, &config).unwrap();
        let (gw, gb) = match &grads.input {
            InputMap::Float { w, b } => (w.clone(), b.clone()),
            _ => unreachable!(),
        };
        let eps = 1e-5;
        for (pick, want) in [(0usize, &gw), (1, &gb)] {
            for i in 0..4 {
                let mut pp = params.clone();
                let mut pm = params.clone();
                match (&mut pp.input, &mut pm.input) {
                    (
                        InputMap::Float { w: wp, b: bp },
                        InputMap::Float { w: wm, b: bm },
                    ) => {
                        if pick == 0 {
                            wp[i] += eps;
                            wm[i] -= eps;
                        } else {
                            bp[i] += eps;
                            bm[i] -= eps;
                        }
                    }
                    _ => unreachable!(),
                }
                let fd = (loss(&pp) - loss(&pm)) / (2.0 * eps);
                let rel = (want[i] - fd).abs() / want[i].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "proj grad {pick}[{i}]: {} vs {fd}", want[i]);
            }
        }
    }

    #[test]
    fn sequences_longer_than_max_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(1, 12, config.vocab_size, &[0], 24);
        assert!(matches!(
            forward(&batch, &params, &config, false, 0, None),
            Err(HgError::Shape(_))
        ));
    }

    #[test]
    fn shorter_sequences_use_a_pos_emb_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let config = tiny_config(NormKind::Layer, NormPlacement::Pre);
        let params = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let batch = hand_batch(2, 5, config.vocab_size, &[0, 1], 26);
        let (logits, _) = forward(&batch, &params, &config, false, 0, None).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
    }
}
