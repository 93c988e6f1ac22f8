//! Complex FFT of arbitrary length and the circular convolution /
//! correlation pair built on it.
//!
//! Power-of-two lengths run through an iterative radix-2 kernel with
//! precomputed twiddles; every other length goes through Bluestein's
//! chirp-z reduction to a power-of-two convolution, so the transform
//! period always equals the requested length exactly.
//!
//! Convention: forward transform is unnormalized, the inverse carries the
//! `1/n` factor. Round trips and the conv/corr pair cancel the choice.

use crate::error::{HgError, Result};
use crate::numerics::Scalar;

/// Frequency-domain view of a real signal: `length` complex bins stored as
/// separate real/imaginary arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<F: Scalar> {
    pub re: Vec<F>,
    pub im: Vec<F>,
}

impl<F: Scalar> ComplexSpectrum<F> {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Magnitude of bin `k`, computed in f64.
    pub fn bin_magnitude(&self, k: usize) -> f64 {
        let re = self.re[k].to_f64();
        let im = self.im[k].to_f64();
        (re * re + im * im).sqrt()
    }
}

enum Kind<F: Scalar> {
    Radix2(Radix2<F>),
    Bluestein(Bluestein<F>),
}

/// Reusable transform plan for one length.
pub struct Fft<F: Scalar> {
    n: usize,
    kind: Kind<F>,
}

struct Radix2<F: Scalar> {
    // w[k] = e^{-2*pi*i*k/n} for k < n/2
    tw_re: Vec<F>,
    tw_im: Vec<F>,
    // bit-reversal permutation as swap pairs (i < j)
    swaps: Vec<(u32, u32)>,
}

struct Bluestein<F: Scalar> {
    // chirp a_k = e^{-i*pi*k^2/n}
    chirp_re: Vec<F>,
    chirp_im: Vec<F>,
    // FFT_m of the wrapped conjugate chirp, pre-scaled by 1/m
    vspec_re: Vec<F>,
    vspec_im: Vec<F>,
    inner: Box<Fft<F>>,
}

impl<F: Scalar> Fft<F> {
    /// Build a plan for length `n`.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(HgError::InvalidLength("fft length must be >= 1".into()));
        }
        let kind = if n.is_power_of_two() {
            Kind::Radix2(Radix2::new(n))
        } else {
            Kind::Bluestein(Bluestein::new(n)?)
        };
        Ok(Fft { n, kind })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place forward DFT of the complex signal `(re, im)`.
    pub fn forward(&self, re: &mut [F], im: &mut [F]) {
        assert_eq!(re.len(), self.n, "fft buffer length");
        assert_eq!(im.len(), self.n, "fft buffer length");
        match &self.kind {
            Kind::Radix2(p) => p.transform(re, im),
            Kind::Bluestein(p) => p.transform(re, im),
        }
    }

    /// In-place inverse DFT via the conjugation identity
    /// `idft(x) = conj(dft(conj(x))) / n`.
    pub fn inverse(&self, re: &mut [F], im: &mut [F]) {
        for v in im.iter_mut() {
            *v = -*v;
        }
        self.forward(re, im);
        let s = F::from_f64(1.0 / self.n as f64);
        for v in re.iter_mut() {
            *v *= s;
        }
        for v in im.iter_mut() {
            *v = -*v * s;
        }
    }

    /// Forward transform of a real signal zero-padded to the plan length.
    pub fn forward_real(&self, x: &[F]) -> Result<ComplexSpectrum<F>> {
        if x.len() > self.n {
            return Err(HgError::Shape(format!(
                "input length {} exceeds transform length {}",
                x.len(),
                self.n
            )));
        }
        let mut re = vec![F::ZERO; self.n];
        re[..x.len()].copy_from_slice(x);
        let mut im = vec![F::ZERO; self.n];
        self.forward(&mut re, &mut im);
        Ok(ComplexSpectrum { re, im })
    }
}

impl<F: Scalar> Radix2<F> {
    fn new(n: usize) -> Self {
        let half = n / 2;
        let mut tw_re = Vec::with_capacity(half);
        let mut tw_im = Vec::with_capacity(half);
        for k in 0..half {
            let ang = -2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
            tw_re.push(F::from_f64(ang.cos()));
            tw_im.push(F::from_f64(ang.sin()));
        }
        let bits = n.trailing_zeros();
        let mut swaps = Vec::new();
        for i in 0..n {
            let j = (i as u32).reverse_bits() >> (32 - bits.max(1)) as u32;
            let j = if n == 1 { 0 } else { j as usize };
            if i < j {
                swaps.push((i as u32, j as u32));
            }
        }
        Radix2 {
            tw_re,
            tw_im,
            swaps,
        }
    }

    fn transform(&self, re: &mut [F], im: &mut [F]) {
        let n = re.len();
        for &(i, j) in &self.swaps {
            re.swap(i as usize, j as usize);
            im.swap(i as usize, j as usize);
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            let mut start = 0;
            while start < n {
                for j in 0..half {
                    let wr = self.tw_re[j * step];
                    let wi = self.tw_im[j * step];
                    let a = start + j;
                    let b = a + half;
                    let vr = re[b] * wr - im[b] * wi;
                    let vi = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - vr;
                    im[b] = im[a] - vi;
                    re[a] += vr;
                    im[a] += vi;
                }
                start += len;
            }
            len <<= 1;
        }
    }
}

impl<F: Scalar> Bluestein<F> {
    fn new(n: usize) -> Result<Self> {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Box::new(Fft::new(m)?);

        let mut chirp_re = Vec::with_capacity(n);
        let mut chirp_im = Vec::with_capacity(n);
        for k in 0..n {
            // k^2 mod 2n keeps the angle argument small and exact in f64
            let sq = (k * k) % (2 * n);
            let ang = -std::f64::consts::PI * (sq as f64) / (n as f64);
            chirp_re.push(F::from_f64(ang.cos()));
            chirp_im.push(F::from_f64(ang.sin()));
        }

        // v[j] = conj(chirp[|j|]) wrapped onto [0, m)
        let mut vre = vec![F::ZERO; m];
        let mut vim = vec![F::ZERO; m];
        for j in 0..n {
            vre[j] = chirp_re[j];
            vim[j] = -chirp_im[j];
            if j > 0 {
                vre[m - j] = chirp_re[j];
                vim[m - j] = -chirp_im[j];
            }
        }
        inner.forward(&mut vre, &mut vim);
        // fold the inverse-transform 1/m into the kernel spectrum
        let s = F::from_f64(1.0 / m as f64);
        for v in vre.iter_mut() {
            *v *= s;
        }
        for v in vim.iter_mut() {
            *v *= s;
        }

        Ok(Bluestein {
            chirp_re,
            chirp_im,
            vspec_re: vre,
            vspec_im: vim,
            inner,
        })
    }

    fn transform(&self, re: &mut [F], im: &mut [F]) {
        let n = re.len();
        let m = self.inner.len();
        let mut ure = vec![F::ZERO; m];
        let mut uim = vec![F::ZERO; m];
        for k in 0..n {
            let (ar, ai) = (self.chirp_re[k], self.chirp_im[k]);
            ure[k] = re[k] * ar - im[k] * ai;
            uim[k] = re[k] * ai + im[k] * ar;
        }
        self.inner.forward(&mut ure, &mut uim);
        for k in 0..m {
            let (vr, vi) = (self.vspec_re[k], self.vspec_im[k]);
            let r = ure[k] * vr - uim[k] * vi;
            let i = ure[k] * vi + uim[k] * vr;
            ure[k] = r;
            uim[k] = i;
        }
        // inverse of the inner transform with the 1/m already applied above
        for v in uim.iter_mut() {
            *v = -*v;
        }
        self.inner.forward(&mut ure, &mut uim);
        for k in 0..n {
            let (ar, ai) = (self.chirp_re[k], self.chirp_im[k]);
            // conj of the inner result times chirp
            let (ur, ui) = (ure[k], -uim[k]);
            re[k] = ur * ar - ui * ai;
            im[k] = ur * ai + ui * ar;
        }
    }
}

/// Length-`n` DFT of a real vector (zero-padded to `n`).
pub fn fft<F: Scalar>(x: &[F], n: usize) -> Result<ComplexSpectrum<F>> {
    Fft::new(n)?.forward_real(x)
}

/// Inverse transform of a spectrum, discarding the imaginary residue.
pub fn ifft<F: Scalar>(s: &ComplexSpectrum<F>) -> Result<Vec<F>> {
    let (x, _residue) = ifft_with_residue(s)?;
    Ok(x)
}

/// Inverse transform returning the real part plus the max-abs imaginary
/// residue for debug-mode reporting.
pub fn ifft_with_residue<F: Scalar>(s: &ComplexSpectrum<F>) -> Result<(Vec<F>, f64)> {
    if s.is_empty() {
        return Err(HgError::InvalidLength("empty spectrum".into()));
    }
    let plan = Fft::new(s.len())?;
    let mut re = s.re.clone();
    let mut im = s.im.clone();
    plan.inverse(&mut re, &mut im);
    let residue = im
        .iter()
        .map(|v| v.to_f64().abs())
        .fold(0.0f64, f64::max);
    Ok((re, residue))
}

fn check_conv_inputs<F: Scalar>(x: &[F], w: &[F], n: usize) -> Result<()> {
    if n == 0 {
        return Err(HgError::InvalidLength(
            "circular convolution period must be >= 1".into(),
        ));
    }
    if x.len() > n || w.len() > n {
        return Err(HgError::Shape(format!(
            "operands of length {} and {} exceed period {}",
            x.len(),
            w.len(),
            n
        )));
    }
    Ok(())
}

/// Circular convolution of period `n`: `out[t] = sum_j x[j] w[(t-j) mod n]`.
/// Both operands are zero-padded to `n`.
pub fn circ_conv<F: Scalar>(x: &[F], w: &[F], n: usize) -> Result<Vec<F>> {
    check_conv_inputs(x, w, n)?;
    let plan = Fft::new(n)?;
    let sx = plan.forward_real(x)?;
    let sw = plan.forward_real(w)?;
    let mut re = sx.re;
    let mut im = sx.im;
    spectrum_mul_inplace(&mut re, &mut im, &sw.re, &sw.im);
    plan.inverse(&mut re, &mut im);
    Ok(re)
}

/// Circular correlation of period `n`: the adjoint of [`circ_conv`] in its
/// first argument, `out[j] = sum_t g[t] w[(t-j) mod n]`.
pub fn circ_corr<F: Scalar>(g: &[F], w: &[F], n: usize) -> Result<Vec<F>> {
    check_conv_inputs(g, w, n)?;
    let plan = Fft::new(n)?;
    let sg = plan.forward_real(g)?;
    let sw = plan.forward_real(w)?;
    let mut re = sg.re;
    let mut im = sg.im;
    spectrum_mul_conj_inplace(&mut re, &mut im, &sw.re, &sw.im);
    plan.inverse(&mut re, &mut im);
    Ok(re)
}

/// Pointwise complex multiply: `(re, im) *= (sre, sim)`.
pub fn spectrum_mul_inplace<F: Scalar>(re: &mut [F], im: &mut [F], sre: &[F], sim: &[F]) {
    for k in 0..re.len() {
        let r = re[k] * sre[k] - im[k] * sim[k];
        let i = re[k] * sim[k] + im[k] * sre[k];
        re[k] = r;
        im[k] = i;
    }
}

/// Pointwise multiply by the conjugate: `(re, im) *= conj(sre, sim)`.
pub fn spectrum_mul_conj_inplace<F: Scalar>(re: &mut [F], im: &mut [F], sre: &[F], sim: &[F]) {
    for k in 0..re.len() {
        let r = re[k] * sre[k] + im[k] * sim[k];
        let i = -re[k] * sim[k] + im[k] * sre[k];
        re[k] = r;
        im[k] = i;
    }
}
