//! The frequency-domain backbone: voxel vector -> patch tokens -> a stack of
//! spectrum-filtering blocks -> a frequency-space projector that resamples
//! the token axis to the target grid. Forward passes can record a trace of
//! intermediates from which `backward` produces exact reverse-mode gradients
//! for every learnable parameter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    add_row_bias, col_sums, layer_norm_bwd, layer_norm_fwd, leaky, leaky_grad, matmul, matmul_nt,
    matmul_tn, LnCache,
};
use crate::numerics::{dft_1d, idft_1d, take_real};
use crate::rng::SplitMix64;
use crate::tensor::{s, ComplexTensor, RealTensor, Scalar};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("input has {actual} voxels, model expects {expected}")]
    InputLength { expected: usize, actual: usize },
    #[error("non-finite value produced by {stage}")]
    NonFinite { stage: String },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Full token-grid output (out_tokens x embed_dim).
    Hidden,
    /// Single-vector output: out_tokens pinned to 1.
    Cls,
}

fn default_slope() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub voxel_len: usize,
    pub patch_size: usize,
    /// Channel width d; the output grid shares it.
    pub embed_dim: usize,
    /// Number of filter blocks.
    pub depth: usize,
    /// Filters per block (the filter library size M).
    pub filter_count: usize,
    /// Output token count n'.
    pub out_tokens: usize,
    pub variant: Variant,
    /// Leaky-ramp slope for the projector nonlinearity (1.0 = identity).
    #[serde(default = "default_slope")]
    pub activation_slope: f64,
    /// Per-block normalization before the spectrum filter. On by default;
    /// disable only for ablations.
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    /// Residual connections around each block stage. On by default.
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Hidden width of the per-block channel MLP; 0 disables the stage.
    #[serde(default)]
    pub mlp_hidden: usize,
}

impl BackboneConfig {
    /// Token count after zero-padding: ceil(voxel_len / patch_size).
    pub fn n_tokens(&self) -> usize {
        self.voxel_len.div_ceil(self.patch_size)
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: &str| Err(BackboneError::BadConfig(m.to_string()));
        if self.voxel_len == 0 {
            return bad("voxel_len must be >= 1");
        }
        if self.patch_size == 0 {
            return bad("patch_size must be >= 1");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be >= 1");
        }
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.filter_count == 0 {
            return bad("filter_count must be >= 1");
        }
        if self.out_tokens == 0 {
            return bad("out_tokens must be >= 1");
        }
        if self.variant == Variant::Cls && self.out_tokens != 1 {
            return bad("cls variant requires out_tokens = 1");
        }
        if !self.activation_slope.is_finite() {
            return bad("activation_slope must be finite");
        }
        Ok(())
    }
}

/// Fixed combination weights c_m = cos((2m-1)pi/(2M)) for m = 1..M. The
/// closed form makes c_1 = 0 when M = 1, which would silence the block
/// entirely, so that single case is overridden to 1 (any scale is absorbable
/// by the learnable filters).
pub fn dct_weights(m_count: usize) -> Vec<f64> {
    assert!(m_count >= 1, "need at least one filter");
    if m_count == 1 {
        return vec![1.0];
    }
    (1..=m_count)
        .map(|m| ((2 * m - 1) as f64 * std::f64::consts::PI / (2.0 * m_count as f64)).cos())
        .collect()
}

// ---------------------------------------------------------------------------
// Patchify + embedding
// ---------------------------------------------------------------------------

/// Zero-pad to a whole number of patches and reshape to [n, p].
pub fn patchify<S: Scalar>(x: &[S], patch_size: usize) -> Result<RealTensor<S>, BackboneError> {
    if x.is_empty() {
        return Err(BackboneError::InputLength {
            expected: 1,
            actual: 0,
        });
    }
    assert!(patch_size >= 1, "patch_size must be >= 1");
    let n = x.len().div_ceil(patch_size);
    let mut data = vec![S::zero(); n * patch_size];
    data[..x.len()].copy_from_slice(x);
    Ok(RealTensor::new(vec![n, patch_size], data).expect("padded layout is consistent"))
}

#[derive(Debug, Clone)]
pub struct PatchEmbedder<S> {
    /// [patch_size, d], shared across patches.
    pub proj: RealTensor<S>,
    /// [d]
    pub bias: Vec<S>,
    /// [n, d] additive positional encoding.
    pub pos: RealTensor<S>,
}

impl<S: Scalar> PatchEmbedder<S> {
    /// tokens[i] = patches[i] . proj + bias + pos[i]
    pub fn embed(&self, patches: &RealTensor<S>) -> RealTensor<S> {
        let mut tokens = matmul(patches, &self.proj);
        add_row_bias(&mut tokens, &self.bias);
        tokens
            .add_assign(&self.pos)
            .expect("pos shape matches token grid");
        tokens
    }

    fn backward(&self, patches: &RealTensor<S>, g_tokens: &RealTensor<S>) -> PatchEmbedder<S> {
        PatchEmbedder {
            proj: matmul_tn(patches, g_tokens),
            bias: col_sums(g_tokens),
            pos: g_tokens.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Filter block
// ---------------------------------------------------------------------------

/// Optional channel MLP appended to a block (normalization -> expand ->
/// leaky-ramp -> contract, residual around the whole stage).
#[derive(Debug, Clone)]
pub struct BlockMlp<S> {
    pub norm_gain: Vec<S>,
    pub norm_bias: Vec<S>,
    pub fc1_w: RealTensor<S>, // [d, h]
    pub fc1_b: Vec<S>,        // [h]
    pub fc2_w: RealTensor<S>, // [h, d]
    pub fc2_b: Vec<S>,        // [d]
}

#[derive(Debug, Clone)]
pub struct FilterBlock<S> {
    /// Learnable filter library, [M, n, d] complex.
    pub filters: ComplexTensor<S>,
    pub norm_gain: Vec<S>,
    pub norm_bias: Vec<S>,
    pub mlp: Option<BlockMlp<S>>,
}

pub struct MlpTrace<S> {
    ln: Option<LnCache<S>>,
    mv: RealTensor<S>, // fc1 input
    z1: RealTensor<S>, // fc1 pre-activation
    h: RealTensor<S>,  // fc1 post-activation
}

pub struct BlockTrace<S> {
    t_in: RealTensor<S>,
    ln: Option<LnCache<S>>,
    /// Spectrum of the (normalized) tokens.
    pub x: ComplexTensor<S>,
    /// Power spectrum (1/n)(re^2 + im^2).
    pub s_pow: RealTensor<S>,
    /// Combined filter sum_m c_m k_m.
    pub kbar: ComplexTensor<S>,
    mlp: Option<MlpTrace<S>>,
}

impl<S> BlockTrace<S> {
    /// The filtered spectrum S (.) kbar, for inspection in tests.
    pub fn filtered_spectrum(&self) -> ComplexTensor<S>
    where
        S: Scalar,
    {
        let re: Vec<S> = self
            .s_pow
            .data()
            .iter()
            .zip(self.kbar.re())
            .map(|(&p, &k)| p * k)
            .collect();
        let im: Vec<S> = self
            .s_pow
            .data()
            .iter()
            .zip(self.kbar.im())
            .map(|(&p, &k)| p * k)
            .collect();
        ComplexTensor::new(self.kbar.shape().to_vec(), re, im).expect("planes match")
    }
}

impl<S: Scalar> FilterBlock<S> {
    fn combined_filter(&self, weights: &[f64]) -> ComplexTensor<S> {
        let m = weights.len();
        let nd = self.filters.len() / m;
        let shape = self.filters.shape()[1..].to_vec();
        let mut re = vec![S::zero(); nd];
        let mut im = vec![S::zero(); nd];
        for (mi, &c) in weights.iter().enumerate() {
            let c = s::<S>(c);
            let off = mi * nd;
            for j in 0..nd {
                re[j] = re[j] + c * self.filters.re()[off + j];
                im[j] = im[j] + c * self.filters.im()[off + j];
            }
        }
        ComplexTensor::new(shape, re, im).expect("filter planes match")
    }

    pub fn forward(&self, t: &RealTensor<S>, cfg: &BackboneConfig) -> (RealTensor<S>, BlockTrace<S>) {
        let n = t.rows();
        let weights = dct_weights(cfg.filter_count);

        let (v, ln) = if cfg.layer_norm {
            let (v, cache) = layer_norm_fwd(t, &self.norm_gain, &self.norm_bias);
            (v, Some(cache))
        } else {
            (t.clone(), None)
        };

        let x = dft_1d(&v);
        let inv_n = s::<S>(1.0 / n as f64);
        let s_pow = RealTensor::from_fn(vec![n, t.cols()], |j| {
            (x.re()[j] * x.re()[j] + x.im()[j] * x.im()[j]) * inv_n
        });
        let kbar = self.combined_filter(&weights);

        // X^ = S (.) kbar, then back to the token domain.
        let xh = ComplexTensor::new(
            x.shape().to_vec(),
            s_pow
                .data()
                .iter()
                .zip(kbar.re())
                .map(|(&p, &k)| p * k)
                .collect(),
            s_pow
                .data()
                .iter()
                .zip(kbar.im())
                .map(|(&p, &k)| p * k)
                .collect(),
        )
        .expect("planes match");
        let (u, _residue) = take_real(&idft_1d(&xh));

        let core_out = if cfg.residual {
            let mut out = t.clone();
            out.add_assign(&u).expect("residual shapes match");
            out
        } else {
            u
        };

        let (out, mlp_trace) = match &self.mlp {
            None => (core_out, None),
            Some(mlp) => {
                let (mv, ln2) = if cfg.layer_norm {
                    let (mv, cache) = layer_norm_fwd(&core_out, &mlp.norm_gain, &mlp.norm_bias);
                    (mv, Some(cache))
                } else {
                    (core_out.clone(), None)
                };
                let slope = s::<S>(cfg.activation_slope);
                let mut z1 = matmul(&mv, &mlp.fc1_w);
                add_row_bias(&mut z1, &mlp.fc1_b);
                let h = z1.map(|z| leaky(z, slope));
                let mut m = matmul(&h, &mlp.fc2_w);
                add_row_bias(&mut m, &mlp.fc2_b);
                let out = if cfg.residual {
                    let mut out = core_out;
                    out.add_assign(&m).expect("residual shapes match");
                    out
                } else {
                    m
                };
                (out, Some(MlpTrace { ln: ln2, mv, z1, h }))
            }
        };

        let trace = BlockTrace {
            t_in: t.clone(),
            ln,
            x,
            s_pow,
            kbar,
            mlp: mlp_trace,
        };
        (out, trace)
    }

    /// Gradients for this block's parameters plus the gradient flowing to
    /// its input. `g_out` is d(loss)/d(block output).
    fn backward(
        &self,
        trace: &BlockTrace<S>,
        g_out: &RealTensor<S>,
        cfg: &BackboneConfig,
    ) -> (FilterBlock<S>, RealTensor<S>) {
        let n = trace.t_in.rows();
        let d = trace.t_in.cols();
        let weights = dct_weights(cfg.filter_count);

        // --- MLP stage (if present) ---------------------------------------
        let (mut g_core, g_mlp) = match (&self.mlp, &trace.mlp) {
            (Some(mlp), Some(mt)) => {
                let g_m = g_out; // gradient into the MLP branch output
                let g_h = matmul_nt(g_m, &mlp.fc2_w);
                let g_w2 = matmul_tn(&mt.h, g_m);
                let g_b2 = col_sums(g_m);
                let slope = s::<S>(cfg.activation_slope);
                let g_z1 = RealTensor::from_fn(mt.z1.shape().to_vec(), |j| {
                    g_h.data()[j] * leaky_grad(mt.z1.data()[j], slope)
                });
                let g_mv = matmul_nt(&g_z1, &mlp.fc1_w);
                let g_w1 = matmul_tn(&mt.mv, &g_z1);
                let g_b1 = col_sums(&g_z1);
                let (g_core_mlp, g_gain2, g_bias2) = match &mt.ln {
                    Some(cache) => layer_norm_bwd(cache, &mlp.norm_gain, &g_mv),
                    None => (g_mv, vec![S::zero(); d], vec![S::zero(); d]),
                };
                let mut g_core = g_core_mlp;
                if cfg.residual {
                    g_core.add_assign(g_out).expect("residual shapes match");
                }
                (
                    g_core,
                    Some(BlockMlp {
                        norm_gain: g_gain2,
                        norm_bias: g_bias2,
                        fc1_w: g_w1,
                        fc1_b: g_b1,
                        fc2_w: g_w2,
                        fc2_b: g_b2,
                    }),
                )
            }
            _ => (g_out.clone(), None),
        };

        // --- Spectrum filter stage -----------------------------------------
        // core_out = t + u (or u); g_u = g_core either way.
        let g_u = &g_core;

        // u = Re(idft(X^)): the adjoint is gX^ = (1/n) dft(g_u), plane-wise.
        let g_xh_full = dft_1d(g_u);
        let inv_n = s::<S>(1.0 / n as f64);
        let nd = n * d;
        let mut g_s = vec![S::zero(); nd];
        let mut g_kbar_re = vec![S::zero(); nd];
        let mut g_kbar_im = vec![S::zero(); nd];
        for j in 0..nd {
            let gxr = g_xh_full.re()[j] * inv_n;
            let gxi = g_xh_full.im()[j] * inv_n;
            g_s[j] = gxr * trace.kbar.re()[j] + gxi * trace.kbar.im()[j];
            g_kbar_re[j] = trace.s_pow.data()[j] * gxr;
            g_kbar_im[j] = trace.s_pow.data()[j] * gxi;
        }

        // kbar = sum_m c_m k_m: each filter inherits c_m * g_kbar.
        let m_count = cfg.filter_count;
        let mut g_filt_re = vec![S::zero(); m_count * nd];
        let mut g_filt_im = vec![S::zero(); m_count * nd];
        for (mi, &c) in weights.iter().enumerate() {
            let c = s::<S>(c);
            for j in 0..nd {
                g_filt_re[mi * nd + j] = c * g_kbar_re[j];
                g_filt_im[mi * nd + j] = c * g_kbar_im[j];
            }
        }

        // S = (1/n)(Xre^2 + Xim^2): gX = (2/n) X (.) gS.
        let two_inv_n = s::<S>(2.0 / n as f64);
        let g_x = ComplexTensor::new(
            trace.x.shape().to_vec(),
            (0..nd)
                .map(|j| two_inv_n * trace.x.re()[j] * g_s[j])
                .collect(),
            (0..nd)
                .map(|j| two_inv_n * trace.x.im()[j] * g_s[j])
                .collect(),
        )
        .expect("planes match");

        // X = dft(v) with v real: g_v = n * Re(idft(gX)).
        let g_v_c = idft_1d(&g_x);
        let n_s = s::<S>(n as f64);
        let g_v = RealTensor::from_fn(vec![n, d], |j| g_v_c.re()[j] * n_s);

        let (g_t_ln, g_gain, g_bias) = match &trace.ln {
            Some(cache) => layer_norm_bwd(cache, &self.norm_gain, &g_v),
            None => (g_v, vec![S::zero(); d], vec![S::zero(); d]),
        };

        let mut g_t = g_t_ln;
        if cfg.residual {
            g_t.add_assign(&g_core).expect("residual shapes match");
        }
        // g_core is fully consumed; avoid accidental reuse.
        g_core = RealTensor::zeros(vec![1, 1]);
        let _ = g_core;

        let g_block = FilterBlock {
            filters: ComplexTensor::new(self.filters.shape().to_vec(), g_filt_re, g_filt_im)
                .expect("filter planes match"),
            norm_gain: g_gain,
            norm_bias: g_bias,
            mlp: g_mlp,
        };
        (g_block, g_t)
    }
}

/// Standalone block application (spec'd entry point; the model's forward
/// uses the method form internally).
pub fn filter_block_forward<S: Scalar>(
    t: &RealTensor<S>,
    blk: &FilterBlock<S>,
    cfg: &BackboneConfig,
) -> RealTensor<S> {
    blk.forward(t, cfg).0
}

// ---------------------------------------------------------------------------
// Frequency projector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FreqProjector<S> {
    /// [n, n'] complex.
    pub w: ComplexTensor<S>,
    /// [n'] complex, broadcast over channels.
    pub b: ComplexTensor<S>,
}

pub struct FremlpTrace<S> {
    /// Input spectrum dft(t), [n, d].
    x: ComplexTensor<S>,
    /// Pre-activation Z = X^T W + B, [d, n'].
    z: ComplexTensor<S>,
    /// Largest |imaginary| discarded by the final take_real.
    pub imag_residue: S,
}

impl<S: Scalar> FreqProjector<S> {
    /// Z = X^T W + B and X' = sigma(Z)^T, with the nonlinearity applied to
    /// the real and imaginary planes independently. Input [n, d], output
    /// ([n', d], Z [d, n']).
    pub fn apply_spectrum(
        &self,
        x: &ComplexTensor<S>,
        slope: S,
    ) -> (ComplexTensor<S>, ComplexTensor<S>) {
        let n = x.shape()[0];
        let d = x.shape()[1];
        let np = self.w.shape()[1];
        assert_eq!(self.w.shape()[0], n, "projector rows match token count");

        let mut z_re = vec![S::zero(); d * np];
        let mut z_im = vec![S::zero(); d * np];
        for c in 0..d {
            for i in 0..n {
                let (ar, ai) = (x.re()[i * d + c], x.im()[i * d + c]);
                if ar == S::zero() && ai == S::zero() {
                    continue;
                }
                for q in 0..np {
                    let (wr, wi) = (self.w.re()[i * np + q], self.w.im()[i * np + q]);
                    z_re[c * np + q] = z_re[c * np + q] + ar * wr - ai * wi;
                    z_im[c * np + q] = z_im[c * np + q] + ar * wi + ai * wr;
                }
            }
            for q in 0..np {
                z_re[c * np + q] = z_re[c * np + q] + self.b.re()[q];
                z_im[c * np + q] = z_im[c * np + q] + self.b.im()[q];
            }
        }
        let z = ComplexTensor::new(vec![d, np], z_re, z_im).expect("planes match");

        // X'[q, c] = sigma(Z[c, q])
        let mut xp_re = vec![S::zero(); np * d];
        let mut xp_im = vec![S::zero(); np * d];
        for c in 0..d {
            for q in 0..np {
                xp_re[q * d + c] = leaky(z.re()[c * np + q], slope);
                xp_im[q * d + c] = leaky(z.im()[c * np + q], slope);
            }
        }
        let xp = ComplexTensor::new(vec![np, d], xp_re, xp_im).expect("planes match");
        (xp, z)
    }

    pub fn fremlp(&self, t: &RealTensor<S>, slope: S) -> (RealTensor<S>, FremlpTrace<S>) {
        let x = dft_1d(t);
        let (xp, z) = self.apply_spectrum(&x, slope);
        let (out, imag_residue) = take_real(&idft_1d(&xp));
        (out, FremlpTrace { x, z, imag_residue })
    }

    /// Gradients of the projector parameters plus the gradient flowing to
    /// the fremlp input.
    fn backward(
        &self,
        trace: &FremlpTrace<S>,
        g_out: &RealTensor<S>,
        slope: S,
    ) -> (FreqProjector<S>, RealTensor<S>) {
        let n = trace.x.shape()[0];
        let d = trace.x.shape()[1];
        let np = self.w.shape()[1];

        // t' = Re(idft_{n'}(X')): gX' = (1/n') dft(g_out).
        let g_xp_full = dft_1d(g_out);
        let inv_np = s::<S>(1.0 / np as f64);

        // g_Z[c, q] = g_X'[q, c] * sigma'(Z[c, q]), per plane.
        let mut g_z_re = vec![S::zero(); d * np];
        let mut g_z_im = vec![S::zero(); d * np];
        for q in 0..np {
            for c in 0..d {
                let gr = g_xp_full.re()[q * d + c] * inv_np;
                let gi = g_xp_full.im()[q * d + c] * inv_np;
                g_z_re[c * np + q] = gr * leaky_grad(trace.z.re()[c * np + q], slope);
                g_z_im[c * np + q] = gi * leaky_grad(trace.z.im()[c * np + q], slope);
            }
        }

        // Z = A W + B with A = X^T (d x n):
        //   gA = gZre W_re^T + gZim W_im^T  (real part)
        //        -gZre W_im^T + gZim W_re^T (imag part)
        //   gW_re = A_re^T gZre + A_im^T gZim
        //   gW_im = -A_im^T gZre + A_re^T gZim
        //   gB = column sums of gZ over channels.
        let mut g_w_re = vec![S::zero(); n * np];
        let mut g_w_im = vec![S::zero(); n * np];
        let mut g_x_re = vec![S::zero(); n * d];
        let mut g_x_im = vec![S::zero(); n * d];
        for c in 0..d {
            for i in 0..n {
                let (ar, ai) = (trace.x.re()[i * d + c], trace.x.im()[i * d + c]);
                let mut gar = S::zero();
                let mut gai = S::zero();
                for q in 0..np {
                    let (gzr, gzi) = (g_z_re[c * np + q], g_z_im[c * np + q]);
                    let (wr, wi) = (self.w.re()[i * np + q], self.w.im()[i * np + q]);
                    gar = gar + gzr * wr + gzi * wi;
                    gai = gai - gzr * wi + gzi * wr;
                    g_w_re[i * np + q] = g_w_re[i * np + q] + ar * gzr + ai * gzi;
                    g_w_im[i * np + q] = g_w_im[i * np + q] - ai * gzr + ar * gzi;
                }
                g_x_re[i * d + c] = gar;
                g_x_im[i * d + c] = gai;
            }
        }
        let mut g_b_re = vec![S::zero(); np];
        let mut g_b_im = vec![S::zero(); np];
        for c in 0..d {
            for q in 0..np {
                g_b_re[q] = g_b_re[q] + g_z_re[c * np + q];
                g_b_im[q] = g_b_im[q] + g_z_im[c * np + q];
            }
        }

        // X = dft(t) with t real: g_t = n * Re(idft(gX)).
        let g_x = ComplexTensor::new(vec![n, d], g_x_re, g_x_im).expect("planes match");
        let g_t_c = idft_1d(&g_x);
        let n_s = s::<S>(n as f64);
        let g_t = RealTensor::from_fn(vec![n, d], |j| g_t_c.re()[j] * n_s);

        let grads = FreqProjector {
            w: ComplexTensor::new(vec![n, np], g_w_re, g_w_im).expect("planes match"),
            b: ComplexTensor::new(vec![np], g_b_re, g_b_im).expect("planes match"),
        };
        (grads, g_t)
    }
}

/// Spec'd free-function form of the frequency projector application.
pub fn fremlp<S: Scalar>(
    t: &RealTensor<S>,
    pr: &FreqProjector<S>,
    slope: S,
) -> RealTensor<S> {
    pr.fremlp(t, slope).0
}

// ---------------------------------------------------------------------------
// The full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DftBackbone<S> {
    pub config: BackboneConfig,
    pub embedder: PatchEmbedder<S>,
    pub blocks: Vec<FilterBlock<S>>,
    pub projector: FreqProjector<S>,
}

/// Gradients are carried in a model-shaped container: same tensors, same
/// traversal order, zero-initialized by `zeros_like`.
pub type Gradients<S> = DftBackbone<S>;

pub struct ForwardTrace<S> {
    patches: RealTensor<S>,
    pub blocks: Vec<BlockTrace<S>>,
    pub fremlp: FremlpTrace<S>,
    /// [n', d] model output.
    pub output: RealTensor<S>,
}

impl<S: Scalar> DftBackbone<S> {
    /// Fresh model with seeded initialization: linear layers uniform in
    /// +-1/sqrt(fan_in), filters and positional encoding N(0, 0.02),
    /// normalization at identity. Parameter draws follow the canonical
    /// traversal order, so a seed pins every weight.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let n = config.n_tokens();
        let (p, d) = (config.patch_size, config.embed_dim);
        let (m, np) = (config.filter_count, config.out_tokens);
        let mut rng = SplitMix64::new(seed);

        let uniform = |fan_in: usize, len: usize, rng: &mut SplitMix64| -> Vec<S> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| s::<S>(rng.uniform(-bound, bound))).collect()
        };
        let gauss = |std: f64, len: usize, rng: &mut SplitMix64| -> Vec<S> {
            (0..len).map(|_| s::<S>(rng.normal() * std)).collect()
        };

        let embedder = PatchEmbedder {
            proj: RealTensor::new(vec![p, d], uniform(p, p * d, &mut rng)).expect("shape"),
            bias: uniform(p, d, &mut rng),
            pos: RealTensor::new(vec![n, d], gauss(0.02, n * d, &mut rng)).expect("shape"),
        };

        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let filt_re = gauss(0.02, m * n * d, &mut rng);
            let filt_im = gauss(0.02, m * n * d, &mut rng);
            let mlp = if config.mlp_hidden > 0 {
                let h = config.mlp_hidden;
                Some(BlockMlp {
                    norm_gain: vec![S::one(); d],
                    norm_bias: vec![S::zero(); d],
                    fc1_w: RealTensor::new(vec![d, h], uniform(d, d * h, &mut rng))
                        .expect("shape"),
                    fc1_b: uniform(d, h, &mut rng),
                    fc2_w: RealTensor::new(vec![h, d], uniform(h, h * d, &mut rng))
                        .expect("shape"),
                    fc2_b: uniform(h, d, &mut rng),
                })
            } else {
                None
            };
            blocks.push(FilterBlock {
                filters: ComplexTensor::new(vec![m, n, d], filt_re, filt_im).expect("shape"),
                norm_gain: vec![S::one(); d],
                norm_bias: vec![S::zero(); d],
                mlp,
            });
        }

        let projector = FreqProjector {
            w: ComplexTensor::new(
                vec![n, np],
                uniform(n, n * np, &mut rng),
                uniform(n, n * np, &mut rng),
            )
            .expect("shape"),
            b: ComplexTensor::new(vec![np], uniform(n, np, &mut rng), uniform(n, np, &mut rng))
                .expect("shape"),
        };

        Ok(Self {
            config,
            embedder,
            blocks,
            projector,
        })
    }

    pub fn forward_traced(&self, x: &[S]) -> Result<ForwardTrace<S>, BackboneError> {
        if x.len() != self.config.voxel_len {
            return Err(BackboneError::InputLength {
                expected: self.config.voxel_len,
                actual: x.len(),
            });
        }
        let patches = patchify(x, self.config.patch_size)?;
        let mut t = self.embedder.embed(&patches);
        if t.validate_finite().is_err() {
            return Err(BackboneError::NonFinite {
                stage: "patch embedding".into(),
            });
        }
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (out, trace) = blk.forward(&t, &self.config);
            if out.validate_finite().is_err() {
                return Err(BackboneError::NonFinite {
                    stage: format!("filter block {i}"),
                });
            }
            block_traces.push(trace);
            t = out;
        }
        let slope = s::<S>(self.config.activation_slope);
        let (output, fremlp_trace) = self.projector.fremlp(&t, slope);
        if output.validate_finite().is_err() {
            return Err(BackboneError::NonFinite {
                stage: "frequency projector".into(),
            });
        }
        Ok(ForwardTrace {
            patches,
            blocks: block_traces,
            fremlp: fremlp_trace,
            output,
        })
    }

    /// [n', d] output grid.
    pub fn forward(&self, x: &[S]) -> Result<RealTensor<S>, BackboneError> {
        Ok(self.forward_traced(x)?.output)
    }

    /// Flattened output row (n' * d), the embedding retrieval consumes. For
    /// the cls variant this is just the single D-width row.
    pub fn embed_voxels(&self, x: &[S]) -> Result<Vec<S>, BackboneError> {
        Ok(self.forward(x)?.into_data())
    }

    /// Exact reverse-mode gradients for all parameters, given the forward
    /// trace and d(loss)/d(output).
    pub fn backward(&self, trace: &ForwardTrace<S>, g_out: &RealTensor<S>) -> Gradients<S> {
        assert_eq!(g_out.shape(), trace.output.shape(), "gradient shape");
        let slope = s::<S>(self.config.activation_slope);
        let (g_proj, mut g_t) = self.projector.backward(&trace.fremlp, g_out, slope);

        let mut g_blocks: Vec<FilterBlock<S>> = Vec::with_capacity(self.blocks.len());
        for (blk, bt) in self.blocks.iter().zip(&trace.blocks).rev() {
            let (g_blk, g_in) = blk.backward(bt, &g_t, &self.config);
            g_blocks.push(g_blk);
            g_t = g_in;
        }
        g_blocks.reverse();

        let g_embedder = self.embedder.backward(&trace.patches, &g_t);
        DftBackbone {
            config: self.config.clone(),
            embedder: g_embedder,
            blocks: g_blocks,
            projector: g_proj,
        }
    }

    /// Same-shaped container with every parameter zeroed.
    pub fn zeros_like(&self) -> Gradients<S> {
        let mut g = self.clone();
        g.for_each_param_mut(|_, slice| slice.iter_mut().for_each(|v| *v = S::zero()));
        g
    }

    /// p += c * q for every parameter pair; shapes must match.
    pub fn axpy_params(&mut self, c: S, other: &Self) {
        let theirs = other.param_tensors();
        let mut idx = 0;
        self.for_each_param_mut(|name, slice| {
            let (oname, _, odata) = &theirs[idx];
            assert_eq!(name, *oname, "parameter traversal order diverged");
            for (a, &b) in slice.iter_mut().zip(odata.iter()) {
                *a = *a + c * b;
            }
            idx += 1;
        });
    }

    pub fn scale_params(&mut self, c: S) {
        self.for_each_param_mut(|_, slice| slice.iter_mut().for_each(|v| *v = *v * c));
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.for_each_param(|_, slice| total += slice.len());
        total
    }

    /// Canonical traversal: embedder, blocks in order (filters re/im, norm,
    /// then MLP tensors), projector planes. Checkpoints, the optimizer and
    /// the gradient checker all index parameters in exactly this order.
    pub fn param_tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out: Vec<(String, Vec<usize>, &[S])> = Vec::new();
        let e = &self.embedder;
        out.push(("embedder.proj".into(), e.proj.shape().to_vec(), e.proj.data()));
        out.push(("embedder.bias".into(), vec![e.bias.len()], &e.bias));
        out.push(("embedder.pos".into(), e.pos.shape().to_vec(), e.pos.data()));
        for (i, b) in self.blocks.iter().enumerate() {
            let fshape = b.filters.shape().to_vec();
            out.push((format!("blocks.{i}.filters.re"), fshape.clone(), b.filters.re()));
            out.push((format!("blocks.{i}.filters.im"), fshape, b.filters.im()));
            out.push((format!("blocks.{i}.norm_gain"), vec![b.norm_gain.len()], &b.norm_gain));
            out.push((format!("blocks.{i}.norm_bias"), vec![b.norm_bias.len()], &b.norm_bias));
            if let Some(m) = &b.mlp {
                out.push((format!("blocks.{i}.mlp.norm_gain"), vec![m.norm_gain.len()], &m.norm_gain));
                out.push((format!("blocks.{i}.mlp.norm_bias"), vec![m.norm_bias.len()], &m.norm_bias));
                out.push((format!("blocks.{i}.mlp.fc1_w"), m.fc1_w.shape().to_vec(), m.fc1_w.data()));
                out.push((format!("blocks.{i}.mlp.fc1_b"), vec![m.fc1_b.len()], &m.fc1_b));
                out.push((format!("blocks.{i}.mlp.fc2_w"), m.fc2_w.shape().to_vec(), m.fc2_w.data()));
                out.push((format!("blocks.{i}.mlp.fc2_b"), vec![m.fc2_b.len()], &m.fc2_b));
            }
        }
        let p = &self.projector;
        out.push(("projector.w.re".into(), p.w.shape().to_vec(), p.w.re()));
        out.push(("projector.w.im".into(), p.w.shape().to_vec(), p.w.im()));
        out.push(("projector.b.re".into(), p.b.shape().to_vec(), p.b.re()));
        out.push(("projector.b.im".into(), p.b.shape().to_vec(), p.b.im()));
        out
    }

    /// Mutable traversal in the same canonical order as `param_tensors`.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut [S])) {
        let e = &mut self.embedder;
        f("embedder.proj", e.proj.data_mut());
        f("embedder.bias", &mut e.bias);
        f("embedder.pos", e.pos.data_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (re, im) = b.filters.planes_mut();
            f(&format!("blocks.{i}.filters.re"), re);
            f(&format!("blocks.{i}.filters.im"), im);
            f(&format!("blocks.{i}.norm_gain"), &mut b.norm_gain);
            f(&format!("blocks.{i}.norm_bias"), &mut b.norm_bias);
            if let Some(m) = &mut b.mlp {
                f(&format!("blocks.{i}.mlp.norm_gain"), &mut m.norm_gain);
                f(&format!("blocks.{i}.mlp.norm_bias"), &mut m.norm_bias);
                f(&format!("blocks.{i}.mlp.fc1_w"), m.fc1_w.data_mut());
                f(&format!("blocks.{i}.mlp.fc1_b"), &mut m.fc1_b);
                f(&format!("blocks.{i}.mlp.fc2_w"), m.fc2_w.data_mut());
                f(&format!("blocks.{i}.mlp.fc2_b"), &mut m.fc2_b);
            }
        }
        let p = &mut self.projector;
        {
            let (re, im) = p.w.planes_mut();
            f("projector.w.re", re);
            f("projector.w.im", im);
        }
        let (re, im) = p.b.planes_mut();
        f("projector.b.re", re);
        f("projector.b.im", im);
    }

    pub fn for_each_param(&self, mut f: impl FnMut(&str, &[S])) {
        for (name, _, data) in self.param_tensors() {
            f(&name, data);
        }
    }
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Multiply-accumulate estimate for one forward pass. Counted terms, with
/// n tokens, d channels, n' output tokens, M filters, h MLP width:
///   embed            n * p * d          (padded patch projection)
///   per block        2 n d log2(n)      (transform pair)
///                    + n d M            (filter application)
///                    + 2 n d h          (channel MLP, if enabled)
///   projector        2 n d log2(n) + 2 n n' d + n' d
/// The projector terms are linear in n' by construction (the short inverse
/// transform is costed linearly), and the total is exactly linear in depth.
#[derive(Debug, Clone, Serialize)]
pub struct FlopsBreakdown {
    pub embed: f64,
    pub per_block: f64,
    pub blocks_total: f64,
    pub projector: f64,
    pub total: f64,
}

pub fn flops_estimate(cfg: &BackboneConfig) -> FlopsBreakdown {
    let n = cfg.n_tokens() as f64;
    let d = cfg.embed_dim as f64;
    let np = cfg.out_tokens as f64;
    let m = cfg.filter_count as f64;
    let h = cfg.mlp_hidden as f64;
    let log_n = if cfg.n_tokens() > 1 { n.log2() } else { 0.0 };

    let embed = n * cfg.patch_size as f64 * d;
    let per_block = 2.0 * n * d * log_n + n * d * m + 2.0 * n * d * h;
    let blocks_total = cfg.depth as f64 * per_block;
    let projector = 2.0 * n * d * log_n + 2.0 * n * np * d + np * d;
    FlopsBreakdown {
        embed,
        per_block,
        blocks_total,
        projector,
        total: embed + blocks_total + projector,
    }
}
