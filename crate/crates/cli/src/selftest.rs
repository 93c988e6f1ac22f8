//! Fast property suite behind `hgconv selftest`: FFT-vs-oracle, HRR
//! round-trip, a full-model finite-difference gradient check, and a
//! checkpoint round trip. Each property reports its measured worst error so
//! a pass is evidence, not a shrug. The whole suite stays well under a
//! minute.

use hgconv_core::checkpoint::{load_checkpoint, save_checkpoint};
use hgconv_core::data::Batch;
use hgconv_core::hrr::{bind, unbind, validate_invertible, HrrVector, EPSILON_INV};
use hgconv_core::layer::{NormKind, NormPlacement};
use hgconv_core::model::{
    backward, forward, InputMode, ModelConfig, ModelParams, ModelState,
};
use hgconv_core::train::{smoothed_ce_loss, AdamState};
use hgconv_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct PropertyReport {
    pub name: &'static str,
    pub pass: bool,
    /// worst measured error across the property's trials
    pub error: f64,
    pub limit: f64,
    pub detail: String,
}

impl PropertyReport {
    pub fn line(&self) -> String {
        format!(
            "{} {:<20} max error {:9.3e} (limit {:.1e}){}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.limit,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" — {}", self.detail)
            }
        )
    }
}

fn naive_circ_conv(x: &[f32], w: &[f32]) -> Vec<f32> {
    let n = x.len();
    let mut out = vec![0.0f64; n];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &wj) in w.iter().enumerate() {
            out[(i + j) % n] += xi as f64 * wj as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn fft_conv_oracle() -> Result<PropertyReport> {
    let limit = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for &n in &[3usize, 8, 12, 64] {
        for _ in 0..25 {
            let x: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() - 0.5).collect();
            let w: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() - 0.5).collect();
            let fast = bind(&HrrVector::new(x.clone())?, &HrrVector::new(w.clone())?)?;
            let slow = naive_circ_conv(&x, &w);
            for (a, b) in fast.values().iter().zip(&slow) {
                worst = worst.max((*a as f64 - *b as f64).abs());
            }
        }
    }
    Ok(PropertyReport {
        name: "fft-conv-oracle",
        pass: worst < limit,
        error: worst,
        limit,
        detail: "circular conv vs O(n²) oracle, n ∈ {3,8,12,64}".into(),
    })
}

fn hrr_roundtrip() -> Result<PropertyReport> {
    let limit = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 25 {
        let x = HrrVector::<f32>::random(256, &mut rng)?;
        let y = HrrVector::<f32>::random(256, &mut rng)?;
        if !validate_invertible(&y, EPSILON_INV)?.invertible {
            continue;
        }
        let back = unbind(&bind(&x, &y)?, &y)?;
        for (a, b) in back.values().iter().zip(x.values()) {
            worst = worst.max((*a as f64 - *b as f64).abs());
        }
        done += 1;
    }
    Ok(PropertyReport {
        name: "hrr-roundtrip",
        pass: worst < limit,
        error: worst,
        limit,
        detail: "unbind(bind(x,y),y) vs x at d=256".into(),
    })
}

/// Worst relative error between the analytic gradient and central finite
/// differences over every parameter tensor, plus the name of the tensor
/// that produced it. Shared with the acceptance suite.
pub fn fd_gradient_check(
    norm_kind: NormKind,
    norm_placement: NormPlacement,
    num_layers: usize,
    seed: u64,
) -> Result<(f64, String)> {
    let config = ModelConfig {
        vocab_size: 16,
        max_seq_len: 8,
        feature_dim: 4,
        kernel_dim: 4,
        num_layers,
        num_classes: 3,
        dropout: 0.0,
        norm_kind,
        norm_placement,
        label_smoothing: 0.1,
        input_mode: InputMode::Tokens,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ModelParams<f64> = ModelParams::init(&config, &mut rng)?;
    let (b, t) = (2usize, 8usize);
    let mut tokens: Vec<u16> = (0..b * t).map(|_| rng.gen_range(0..16u16)).collect();
    let mut mask = vec![1u8; b * t];
    // second item carries two masked positions so padding is in the loop;
    // masked token ids still have to be in-vocab (embed checks every slot)
    for tt in 6..8 {
        tokens[t + tt] = 0;
        mask[t + tt] = 0;
    }
    let batch = Batch {
        tokens,
        mask,
        labels: vec![1, 2],
        indices: vec![0, 1],
        seq_len: t,
    };

    let loss_of = |p: &ModelParams<f64>| -> Result<f64> {
        let mut st = ModelState::new(&config);
        let (logits, _) = forward(&batch, p, &config, true, 0, Some(&mut st))?;
        let (loss, _) = smoothed_ce_loss(&logits, &batch.labels, config.label_smoothing)?;
        Ok(loss)
    };

    let mut st = ModelState::new(&config);
    let (logits, caches) = forward(&batch, &params, &config, true, 0, Some(&mut st))?;
    let (_, grad_logits) = smoothed_ce_loss(&logits, &batch.labels, config.label_smoothing)?;
    let analytic = backward(&grad_logits, &caches, &params, &config)?;

    let names: Vec<String> = analytic
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let eps = 1e-5;
    for (ti, name) in names.iter().enumerate() {
        let len = analytic.named_tensors()[ti].1.len();
        for j in 0..len {
            let orig = params.named_tensors()[ti].1[j];
            params.named_tensors_mut()[ti].1[j] = orig + eps;
            let up = loss_of(&params)?;
            params.named_tensors_mut()[ti].1[j] = orig - eps;
            let down = loss_of(&params)?;
            params.named_tensors_mut()[ti].1[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic.named_tensors()[ti].1[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = name.clone();
            }
        }
    }
    Ok((worst, worst_name))
}

fn gradient_check() -> Result<PropertyReport> {
    let limit = 1e-4;
    let (worst, worst_name) =
        fd_gradient_check(NormKind::Layer, NormPlacement::Pre, 1, 17)?;
    Ok(PropertyReport {
        name: "gradient-check",
        pass: worst < limit,
        error: worst,
        limit,
        detail: format!("analytic vs central differences, worst tensor: {worst_name}"),
    })
}

fn checkpoint_roundtrip() -> Result<PropertyReport> {
    let config = ModelConfig {
        vocab_size: 16,
        max_seq_len: 16,
        feature_dim: 8,
        kernel_dim: 4,
        num_layers: 2,
        num_classes: 2,
        dropout: 0.0,
        norm_kind: NormKind::Batch,
        norm_placement: NormPlacement::Post,
        label_smoothing: 0.0,
        input_mode: InputMode::Tokens,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let params: ModelParams<f32> = ModelParams::init(&config, &mut rng)?;
    let state = ModelState::new(&config);
    let adam = AdamState::new_like(&params);
    let path = std::env::temp_dir().join(format!(
        "hgconv-selftest-{}.ckpt",
        std::process::id()
    ));
    save_checkpoint(&params, &config, &state, Some(&adam), &path)?;
    let loaded = load_checkpoint::<f32>(&path);
    let _ = std::fs::remove_file(&path);
    let loaded = loaded?;
    let mut worst = 0.0f64;
    for ((_, a), (_, b)) in params
        .named_tensors()
        .iter()
        .zip(loaded.params.named_tensors().iter())
    {
        for (x, y) in a.iter().zip(b.iter()) {
            worst = worst.max((*x as f64 - *y as f64).abs());
        }
    }
    Ok(PropertyReport {
        name: "checkpoint-roundtrip",
        pass: worst == 0.0 && loaded.config == config,
        error: worst,
        limit: 0.0,
        detail: "save → load is bitwise".into(),
    })
}

/// Runs every property; the caller decides how to print and what exit code
/// to use.
pub fn run_all() -> Result<Vec<PropertyReport>> {
    Ok(vec![
        fft_conv_oracle()?,
        hrr_roundtrip()?,
        gradient_check()?,
        checkpoint_roundtrip()?,
    ])
}
