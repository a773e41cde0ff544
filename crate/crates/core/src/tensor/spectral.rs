//! Frequency-domain evaluation of the causal matrix-valued convolution used by
//! extraction.
//!
//! A batch of sequences of length `t` whose samples are `rows × cols` planes is
//! transformed along time with zero padding to `n = 2t`, so circular products
//! in the frequency domain equal the linear (causal) convolution and
//! correlation for the first `t` lags.

use std::f64::consts::TAU;

use super::matrix::{gemm, GemmOperand};

/// Complex spectra of `rows × cols` element series, laid out `[bin][row][col]`.
pub(crate) struct Spectrum {
    re: Vec<f64>,
    im: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Spectrum {
    fn zeros(bins: usize, rows: usize, cols: usize) -> Self {
        Self {
            re: vec![0.0; bins * rows * cols],
            im: vec![0.0; bins * rows * cols],
            rows,
            cols,
        }
    }

    fn plane(&self) -> usize {
        self.rows * self.cols
    }

    /// Views of bin `f` as real and imaginary matrices in the given form.
    fn at(&self, f: usize, form: Form) -> (GemmOperand<'_>, GemmOperand<'_>) {
        let p = self.plane();
        let transposed = matches!(form, Form::Adjoint);
        (
            GemmOperand::new(&self.re[f * p..(f + 1) * p], self.cols, transposed),
            GemmOperand::new(&self.im[f * p..(f + 1) * p], self.cols, transposed),
        )
    }
}

/// Real DFT of length `n = 2t` restricted to `t` nonzero input samples and
/// `t` output samples, stored as dense matrices so that whole batches of
/// series transform with one matrix product.
pub(crate) struct SpectralPlan {
    t: usize,
    bins: usize,
    /// `bins × t`: `cos(2π f i / n)` and `-sin(2π f i / n)`
    fwd_re: Vec<f64>,
    fwd_im: Vec<f64>,
    /// `t × bins`: inverse weights with the Hermitian fold and `1/n`
    inv_re: Vec<f64>,
    inv_im: Vec<f64>,
}

/// How an operand enters a per-bin complex product.
#[derive(Clone, Copy)]
pub(crate) enum Form {
    Plain,
    /// conjugate transpose
    Adjoint,
}

impl SpectralPlan {
    pub fn new(t: usize) -> Self {
        let n = 2 * t.max(1);
        let bins = n / 2 + 1;
        let angle = |f: usize, i: usize| TAU * ((f * i) % n) as f64 / n as f64;
        let mut plan = Self {
            t,
            bins,
            fwd_re: vec![0.0; bins * t],
            fwd_im: vec![0.0; bins * t],
            inv_re: vec![0.0; t * bins],
            inv_im: vec![0.0; t * bins],
        };
        for f in 0..bins {
            let fold = if f == 0 || f == bins - 1 { 1.0 } else { 2.0 } / n as f64;
            for i in 0..t {
                let (sin, cos) = angle(f, i).sin_cos();
                plan.fwd_re[f * t + i] = cos;
                plan.fwd_im[f * t + i] = -sin;
                plan.inv_re[i * bins + f] = fold * cos;
                plan.inv_im[i * bins + f] = -fold * sin;
            }
        }
        plan
    }

    /// Transforms `t` planes of `rows × cols` samples, plane `i` starting at
    /// `data[i * rows * cols]`.
    pub fn analyze(&self, data: &[f64], rows: usize, cols: usize) -> Spectrum {
        let plane = rows * cols;
        let (t, bins) = (self.t, self.bins);
        assert!(data.len() >= t * plane, "spectral input too short");
        let mut spec = Spectrum::zeros(bins, rows, cols);
        let x = GemmOperand::new(&data[..t * plane], plane, false);
        for (dft, dst) in [(&self.fwd_re, &mut spec.re), (&self.fwd_im, &mut spec.im)] {
            gemm(bins, t, plane, 1.0, GemmOperand::new(dft, t, false), x, 0.0, dst, plane);
        }
        spec
    }

    /// Inverse transform; adds the first `t` samples of every element into
    /// `out` using the same plane layout as [`SpectralPlan::analyze`].
    pub fn synthesize_into(&self, spec: &Spectrum, out: &mut [f64]) {
        let plane = spec.plane();
        let (t, bins) = (self.t, self.bins);
        assert!(out.len() >= t * plane, "spectral output too short");
        let out = &mut out[..t * plane];
        for (idft, src) in [(&self.inv_re, &spec.re), (&self.inv_im, &spec.im)] {
            gemm(
                t,
                bins,
                plane,
                1.0,
                GemmOperand::new(idft, bins, false),
                GemmOperand::new(src, plane, false),
                1.0,
                out,
                plane,
            );
        }
    }

    /// Per-bin complex product `form_a(A_f) · form_b(B_f)`.
    pub fn product(&self, a: &Spectrum, form_a: Form, b: &Spectrum, form_b: Form) -> Spectrum {
        let dims = |s: &Spectrum, form| match form {
            Form::Plain => (s.rows, s.cols),
            Form::Adjoint => (s.cols, s.rows),
        };
        let sign = |form| match form {
            Form::Plain => 1.0,
            Form::Adjoint => -1.0,
        };
        let (m, k) = dims(a, form_a);
        let (k2, n) = dims(b, form_b);
        assert_eq!(k, k2, "spectral product inner dimensions");
        let (sa, sb) = (sign(form_a), sign(form_b));
        let mut c = Spectrum::zeros(self.bins, m, n);
        let pc = m * n;
        for f in 0..self.bins {
            let (ar, ai) = a.at(f, form_a);
            let (br, bi) = b.at(f, form_b);
            // (ar + i sa ai)(br + i sb bi)
            let cr = &mut c.re[f * pc..(f + 1) * pc];
            gemm(m, k, n, 1.0, ar, br, 0.0, cr, n);
            gemm(m, k, n, -sa * sb, ai, bi, 1.0, cr, n);
            let ci = &mut c.im[f * pc..(f + 1) * pc];
            gemm(m, k, n, sb, ar, bi, 0.0, ci, n);
            gemm(m, k, n, sa, ai, br, 1.0, ci, n);
        }
        c
    }
}
