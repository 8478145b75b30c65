//! Forward pass, composite loss and hand-derived reverse-mode gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::{Mlp, Model, RequestFeatures};
use crate::math::{axpy, dot, exp, ln, sigmoid, sqrt, tanh};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Supervision for one (candidate, channel) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub intensity: f64,
    /// Intensity cap of the channel, used to scale the calibration target.
    pub cap: f64,
    pub value: bool,
    pub unique: bool,
}

/// One request with targets laid out `[candidate * channels + channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: RequestFeatures,
    pub targets: Vec<Target>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
}

/// Batch loss, each term averaged over (request, candidate) samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub value: f64,
    pub calibration: f64,
    pub diversity: f64,
    pub samples: usize,
    /// Log arguments that hit the probability clamp.
    pub clamps: usize,
}

pub(crate) struct HeadCache {
    pub value_hidden: Vec<f64>,
    pub base: f64,
    pub calib_hidden: Vec<f64>,
    pub calib_out: f64,
    pub unclipped: f64,
    pub calibrated: f64,
    pub uniq_hidden: Vec<f64>,
    pub uniqueness: f64,
}

pub(crate) struct CandidateCache {
    pub h_t: Vec<f64>,
    pub query: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `[attention summary; h_t; h_u]`
    pub z: Vec<f64>,
    pub channels: Vec<HeadCache>,
}

pub(crate) struct ForwardCache {
    pub x: Vec<f64>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub candidates: Vec<CandidateCache>,
}

fn add_row(params: &[f64], base: usize, row: usize, d: usize, out: &mut [f64]) {
    axpy(1.0, &params[base + row * d..base + (row + 1) * d], out);
}

fn scatter_row(grad: &mut [f64], base: usize, row: usize, d: usize, g: &[f64]) {
    axpy(1.0, g, &mut grad[base + row * d..base + (row + 1) * d]);
}

/// `out = W x` for a row-major `rows x cols` block at `w`.
fn matvec(params: &[f64], w: usize, rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&params[w + r * cols..w + (r + 1) * cols], x);
    }
}

fn mlp_forward(params: &[f64], m: &Mlp, x: &[f64], hidden: &mut Vec<f64>) -> f64 {
    hidden.clear();
    for h in 0..m.hidden {
        let pre = params[m.b1 + h] + dot(&params[m.w1 + h * m.input..m.w1 + (h + 1) * m.input], x);
        hidden.push(tanh(pre));
    }
    params[m.b2] + dot(&params[m.w2..m.w2 + m.hidden], hidden)
}

/// Accumulates parameter gradients into `grad` and input gradients into `dx`.
fn mlp_backward(params: &[f64], grad: &mut [f64], m: &Mlp, x: &[f64], hidden: &[f64], dout: f64, dx: &mut [f64]) {
    grad[m.b2] += dout;
    for h in 0..m.hidden {
        grad[m.w2 + h] += dout * hidden[h];
        let dpre = dout * params[m.w2 + h] * (1.0 - hidden[h] * hidden[h]);
        if dpre == 0.0 {
            continue;
        }
        grad[m.b1 + h] += dpre;
        let row = m.w1 + h * m.input..m.w1 + (h + 1) * m.input;
        axpy(dpre, x, &mut grad[row.clone()]);
        axpy(dpre, &params[row], dx);
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Weighted binary cross-entropy and its derivative in `p` (zero when clamped).
pub(crate) fn bce(p: f64, label: bool, weight: f64) -> (f64, f64, bool) {
    let (pc, clamped) = clamp_prob(p);
    let y = label as u8 as f64;
    let loss = -weight * (y * ln(pc) + (1.0 - y) * ln(1.0 - pc));
    let d = if clamped { 0.0 } else { -weight * (y / pc - (1.0 - y) / (1.0 - pc)) };
    (loss, d, clamped)
}

impl Model {
    pub(crate) fn forward(&self, f: &RequestFeatures) -> ForwardCache {
        let cfg = &self.config;
        let (d, da, p, o) = (cfg.d, cfg.d_a, &self.params, &self.off);
        let seq = &f.sequence[..f.sequence.len().min(cfg.seq_len)];
        let n = seq.len();

        let mut x = vec![0.0; n * d];
        let mut keys = vec![0.0; n * da];
        let mut values = vec![0.0; n * da];
        for (j, t) in seq.iter().enumerate() {
            let xj = &mut x[j * d..(j + 1) * d];
            add_row(p, o.item, t.item as usize, d, xj);
            add_row(p, o.tag, t.tag as usize, d, xj);
            add_row(p, o.age, t.age as usize, d, xj);
            matvec(p, o.wk, da, d, xj, &mut keys[j * da..(j + 1) * da]);
            matvec(p, o.wv, da, d, xj, &mut values[j * da..(j + 1) * da]);
        }
        let mut h_u = vec![0.0; d];
        add_row(p, o.user, f.user as usize, d, &mut h_u);
        add_row(p, o.daypart, f.daypart as usize, d, &mut h_u);

        let scale = 1.0 / sqrt(da as f64);
        let mut candidates = Vec::with_capacity(f.candidates.len());
        for c in &f.candidates {
            let mut h_t = vec![0.0; d];
            add_row(p, o.item, c.item as usize, d, &mut h_t);
            add_row(p, o.tag, c.tag as usize, d, &mut h_t);
            add_row(p, o.age, c.age as usize, d, &mut h_t);
            add_row(p, o.engagement, c.engagement as usize, d, &mut h_t);
            add_row(p, o.rank, c.rank as usize, d, &mut h_t);
            let mut query = vec![0.0; da];
            matvec(p, o.wq, da, d, &h_t, &mut query);

            // masked attention; an empty sequence yields a zero summary
            let mut alpha: Vec<f64> = (0..n).map(|j| dot(&query, &keys[j * da..(j + 1) * da]) * scale).collect();
            let mut z = vec![0.0; cfg.head_input()];
            if n > 0 {
                let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                alpha.iter_mut().for_each(|a| *a = exp(*a - m));
                let total: f64 = alpha.iter().sum();
                alpha.iter_mut().for_each(|a| *a /= total);
                for j in 0..n {
                    axpy(alpha[j], &values[j * da..(j + 1) * da], &mut z[..da]);
                }
            }
            z[da..da + d].copy_from_slice(&h_t);
            z[da + d..].copy_from_slice(&h_u);

            let mut channels = Vec::with_capacity(o.heads.len());
            let mut zc = Vec::new();
            for heads in &o.heads {
                let mut value_hidden = Vec::new();
                let base = sigmoid(mlp_forward(p, &heads.value, &z, &mut value_hidden));
                let mut calib_hidden = Vec::new();
                let (calib_out, unclipped, calibrated) = if cfg.calibrator {
                    zc.clear();
                    zc.extend_from_slice(&z);
                    zc.push(base);
                    let g = mlp_forward(p, &heads.calib, &zc, &mut calib_hidden);
                    let raw = base + cfg.beta * tanh(g);
                    (g, raw, raw.clamp(0.0, 1.0))
                } else {
                    (0.0, base, base)
                };
                let mut uniq_hidden = Vec::new();
                let uniqueness = sigmoid(mlp_forward(p, &heads.uniq, &z, &mut uniq_hidden));
                channels.push(HeadCache {
                    value_hidden,
                    base,
                    calib_hidden,
                    calib_out,
                    unclipped,
                    calibrated,
                    uniq_hidden,
                    uniqueness,
                });
            }
            candidates.push(CandidateCache { h_t, query, alpha, z, channels });
        }
        ForwardCache { x, keys, values, candidates }
    }

    /// Composite loss over `batch`; when `grad` is given, accumulates the
    /// gradient of `total` into it (the caller zeroes it).
    pub fn loss(&self, batch: &[Example], weights: LossWeights, grad: Option<&mut [f64]>) -> LossBreakdown {
        self.loss_over(batch.iter(), weights, grad)
    }

    pub(crate) fn loss_over<'a>(
        &self,
        batch: impl Iterator<Item = &'a Example> + Clone,
        weights: LossWeights,
        mut grad: Option<&mut [f64]>,
    ) -> LossBreakdown {
        let samples: usize = batch.clone().map(|e| e.features.candidates.len()).sum();
        let mut out = LossBreakdown { samples, ..Default::default() };
        if samples == 0 {
            return out;
        }
        let inv = 1.0 / samples as f64;
        let nc = self.off.heads.len();
        for ex in batch {
            let cache = self.forward(&ex.features);
            debug_assert_eq!(ex.targets.len(), cache.candidates.len() * nc);
            let mut dcand: Vec<Vec<f64>> = Vec::with_capacity(cache.candidates.len());
            for (ci, cand) in cache.candidates.iter().enumerate() {
                let mut dz = vec![0.0; cand.z.len()];
                for (k, h) in cand.channels.iter().enumerate() {
                    let t = &ex.targets[ci * nc + k];
                    let w = 1.0 + t.intensity;
                    let (lv, dv, cv) = bce(h.calibrated, t.value, w);
                    let wc = 1.0 + sigmoid(t.intensity);
                    let resid = h.calibrated - t.intensity / t.cap;
                    let lc = wc * resid * resid;
                    let (ld, du, cu) = bce(h.uniqueness, t.unique, w);
                    out.value += lv * inv;
                    out.calibration += lc * inv;
                    out.diversity += ld * inv;
                    out.clamps += cv as usize + cu as usize;
                    if let Some(g) = grad.as_deref_mut() {
                        let dcal = (dv + weights.lambda * 2.0 * wc * resid) * inv;
                        let drho = weights.mu * du * inv;
                        self.head_backward(g, k, cand, h, dcal, drho, &mut dz);
                    }
                }
                dcand.push(dz);
            }
            if let Some(g) = grad.as_deref_mut() {
                self.encoder_backward(g, &ex.features, &cache, &dcand);
            }
        }
        out.total = out.value + weights.lambda * out.calibration + weights.mu * out.diversity;
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn head_backward(&self, g: &mut [f64], k: usize, cand: &CandidateCache, h: &HeadCache, dcal: f64, drho: f64, dz: &mut [f64]) {
        let p = &self.params;
        let heads = &self.off.heads[k];
        let mut dbase = dcal;
        if self.config.calibrator {
            dbase = 0.0;
            // the clip is flat outside (0, 1)
            let draw = if h.unclipped > 0.0 && h.unclipped < 1.0 { dcal } else { 0.0 };
            dbase += draw;
            let th = tanh(h.calib_out);
            let dg = draw * self.config.beta * (1.0 - th * th);
            if dg != 0.0 {
                let mut zc = Vec::with_capacity(cand.z.len() + 1);
                zc.extend_from_slice(&cand.z);
                zc.push(h.base);
                let mut dzc = vec![0.0; zc.len()];
                mlp_backward(p, g, &heads.calib, &zc, &h.calib_hidden, dg, &mut dzc);
                axpy(1.0, &dzc[..cand.z.len()], dz);
                dbase += dzc[cand.z.len()];
            }
        }
        let df = dbase * h.base * (1.0 - h.base);
        if df != 0.0 {
            mlp_backward(p, g, &heads.value, &cand.z, &h.value_hidden, df, dz);
        }
        let du = drho * h.uniqueness * (1.0 - h.uniqueness);
        if du != 0.0 {
            mlp_backward(p, g, &heads.uniq, &cand.z, &h.uniq_hidden, du, dz);
        }
    }

    fn encoder_backward(&self, g: &mut [f64], f: &RequestFeatures, cache: &ForwardCache, dcand: &[Vec<f64>]) {
        let cfg = &self.config;
        let (d, da, p, o) = (cfg.d, cfg.d_a, &self.params, &self.off);
        let n = cache.x.len() / d;
        let scale = 1.0 / sqrt(da as f64);
        let mut dkeys = vec![0.0; n * da];
        let mut dvalues = vec![0.0; n * da];
        let mut dh_u = vec![0.0; d];
        let mut dalpha = vec![0.0; n];
        let mut dh_t = vec![0.0; d];
        let mut dq = vec![0.0; da];
        for ((c, cand), dz) in f.candidates.iter().zip(&cache.candidates).zip(dcand) {
            let dsum = &dz[..da];
            dh_t.copy_from_slice(&dz[da..da + d]);
            axpy(1.0, &dz[da + d..], &mut dh_u);
            if n > 0 {
                for j in 0..n {
                    dalpha[j] = dot(dsum, &cache.values[j * da..(j + 1) * da]);
                    axpy(cand.alpha[j], dsum, &mut dvalues[j * da..(j + 1) * da]);
                }
                let mean = dot(&cand.alpha, &dalpha);
                dq.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..n {
                    let ds = cand.alpha[j] * (dalpha[j] - mean) * scale;
                    axpy(ds, &cache.keys[j * da..(j + 1) * da], &mut dq);
                    axpy(ds, &cand.query, &mut dkeys[j * da..(j + 1) * da]);
                }
                for r in 0..da {
                    let row = o.wq + r * d..o.wq + (r + 1) * d;
                    axpy(dq[r], &cand.h_t, &mut g[row.clone()]);
                    axpy(dq[r], &p[row], &mut dh_t);
                }
            }
            scatter_row(g, o.item, c.item as usize, d, &dh_t);
            scatter_row(g, o.tag, c.tag as usize, d, &dh_t);
            scatter_row(g, o.age, c.age as usize, d, &dh_t);
            scatter_row(g, o.engagement, c.engagement as usize, d, &dh_t);
            scatter_row(g, o.rank, c.rank as usize, d, &dh_t);
        }
        scatter_row(g, o.user, f.user as usize, d, &dh_u);
        scatter_row(g, o.daypart, f.daypart as usize, d, &dh_u);

        let mut dx = vec![0.0; d];
        for (j, t) in f.sequence.iter().take(n).enumerate() {
            let xj = &cache.x[j * d..(j + 1) * d];
            dx.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..da {
                let (dk, dv) = (dkeys[j * da + r], dvalues[j * da + r]);
                let krow = o.wk + r * d..o.wk + (r + 1) * d;
                axpy(dk, xj, &mut g[krow.clone()]);
                axpy(dk, &p[krow], &mut dx);
                let vrow = o.wv + r * d..o.wv + (r + 1) * d;
                axpy(dv, xj, &mut g[vrow.clone()]);
                axpy(dv, &p[vrow], &mut dx);
            }
            scatter_row(g, o.item, t.item as usize, d, &dx);
            scatter_row(g, o.tag, t.tag as usize, d, &dx);
            scatter_row(g, o.age, t.age as usize, d, &dx);
        }
    }
}
