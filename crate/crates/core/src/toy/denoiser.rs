//! Small conditional noise predictor for 2-D points with one cross-attention
//! block, plus its DDPM schedule and ancestral sampler.
//!
//! Per point: `h0 = tanh(W_in·f(x,t) + b_in)`, attention of `q = W_q·h0` over
//! the conditioning tokens with `k_j = W_k·e_j`, `v_j = W_v·e_j`,
//! `h1 = h0 + W_o·Σ a_j v_j`, `h2 = tanh(W_mid·h1 + b_mid)`,
//! `ε = W_out·h2 + b_out`. Gradients are written out by hand.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, DiffusionBackend, ParamGroup, ParamKind};
use crate::tensor::Tensor;

const WEIGHTS_MAGIC: &[u8; 8] = b"CRCETOY1";
const FREQS: usize = 4;
const FEATURES: usize = 2 + 2 * FREQS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub hidden: usize,
    pub attn: usize,
    pub width: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Points per training latent.
    pub latent_points: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            attn: 8,
            width: 8,
            timesteps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
            latent_points: 32,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    w_in: usize,
    b_in: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    w_mid: usize,
    b_mid: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    groups: Vec<ParamGroup>,
    layout: Layout,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    null_cond: Tensor,
}

struct PointCache {
    f: [f64; FEATURES],
    h0: Vec<f64>,
    q: Vec<f64>,
    a: Vec<f64>,
    ctx: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Keys and values of one conditioning sequence.
struct TokenProj {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn matvec_t(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let gr = g[r];
        for c in 0..cols {
            out[c] += row[c] * gr;
        }
    }
}

fn outer_add(grad: &mut [f64], rows: usize, cols: usize, g: &[f64], x: &[f64]) {
    for r in 0..rows {
        let gr = g[r];
        let row = &mut grad[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += gr * x[c];
        }
    }
}

impl ToyBackend {
    pub fn new(config: ToyConfig, null_cond: Tensor) -> Self {
        let (h, a, e) = (config.hidden, config.attn, config.width);
        let mut groups = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, len: usize, kind: ParamKind| {
            groups.push(ParamGroup {
                name: name.to_string(),
                offset,
                len,
                kind,
            });
            offset += len;
            offset - len
        };
        let layout = Layout {
            w_in: push("input.weight", h * FEATURES, ParamKind::Other),
            b_in: push("input.bias", h, ParamKind::Other),
            q: push("attn.to_q", a * h, ParamKind::CrossAttentionQuery),
            k: push("attn.to_k", a * e, ParamKind::CrossAttentionKey),
            v: push("attn.to_v", h * e, ParamKind::CrossAttentionValue),
            o: push("attn.to_out", h * h, ParamKind::CrossAttentionOut),
            w_mid: push("mid.weight", h * h, ParamKind::Other),
            b_mid: push("mid.bias", h, ParamKind::Other),
            w_out: push("out.weight", 2 * h, ParamKind::Other),
            b_out: push("out.bias", 2, ParamKind::Other),
        };
        let betas: Vec<f64> = (0..config.timesteps)
            .map(|i| {
                let frac = if config.timesteps > 1 {
                    i as f64 / (config.timesteps - 1) as f64
                } else {
                    0.0
                };
                config.beta_start + frac * (config.beta_end - config.beta_start)
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            config,
            groups,
            layout,
            betas,
            alphas,
            alpha_bars,
            null_cond,
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Scaled-normal initialization, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.num_params()];
        let (h, a, e) = (self.config.hidden, self.config.attn, self.config.width);
        let l = &self.layout;
        let mut fill = |start: usize, len: usize, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[start..start + len] {
                *v = s * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(l.w_in, h * FEATURES, FEATURES);
        fill(l.q, a * h, h);
        fill(l.k, a * e, e);
        fill(l.v, h * e, e);
        fill(l.o, h * h, h);
        fill(l.w_mid, h * h, h);
        fill(l.w_out, 2 * h, h);
        p
    }

    fn check(&self, params: &[f64], latent: &Tensor, t: usize) -> Result<(), BackendError> {
        if params.len() != self.num_params() {
            return Err(BackendError::ParamCount {
                got: params.len(),
                expected: self.num_params(),
            });
        }
        if t >= self.config.timesteps {
            return Err(BackendError::Timestep {
                t,
                steps: self.config.timesteps,
            });
        }
        if latent.shape().len() != 2 || latent.shape()[1] != 2 {
            return Err(BackendError::Shape(crate::tensor::ShapeError {
                left: latent.shape().to_vec(),
                right: vec![0, 2],
            }));
        }
        Ok(())
    }

    fn features(&self, x: &[f64], t: usize) -> [f64; FEATURES] {
        let tau = t as f64 / self.config.timesteps as f64;
        let mut f = [0.0; FEATURES];
        f[0] = x[0];
        f[1] = x[1];
        for i in 0..FREQS {
            let w = std::f64::consts::PI * (1 << i) as f64 * tau;
            f[2 + 2 * i] = w.sin();
            f[3 + 2 * i] = w.cos();
        }
        f
    }

    fn project_tokens(&self, params: &[f64], cond: &Tensor) -> Result<TokenProj, BackendError> {
        let (h, a, e) = (self.config.hidden, self.config.attn, self.config.width);
        if cond.shape().len() != 2 || cond.shape()[1] != e {
            return Err(BackendError::Shape(crate::tensor::ShapeError {
                left: cond.shape().to_vec(),
                right: vec![0, e],
            }));
        }
        let l = &self.layout;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for tok in cond.data().chunks(e) {
            let mut k = vec![0.0; a];
            matvec(&params[l.k..l.k + a * e], a, e, tok, &mut k);
            let mut v = vec![0.0; h];
            matvec(&params[l.v..l.v + h * e], h, e, tok, &mut v);
            keys.push(k);
            values.push(v);
        }
        Ok(TokenProj { keys, values })
    }

    fn forward_point(&self, params: &[f64], x: &[f64], t: usize, tokens: &TokenProj, out: &mut [f64]) -> PointCache {
        let (h, a) = (self.config.hidden, self.config.attn);
        let l = &self.layout;
        let f = self.features(x, t);

        let mut h0 = params[l.b_in..l.b_in + h].to_vec();
        matvec(&params[l.w_in..l.w_in + h * FEATURES], h, FEATURES, &f, &mut h0);
        h0.iter_mut().for_each(|v| *v = v.tanh());

        let mut q = vec![0.0; a];
        matvec(&params[l.q..l.q + a * h], a, h, &h0, &mut q);
        let scale = 1.0 / (a as f64).sqrt();
        let scores: Vec<f64> = tokens
            .keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let att: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let mut ctx = vec![0.0; h];
        for (aj, v) in att.iter().zip(&tokens.values) {
            for (c, vv) in ctx.iter_mut().zip(v) {
                *c += aj * vv;
            }
        }
        let mut h1 = h0.clone();
        matvec(&params[l.o..l.o + h * h], h, h, &ctx, &mut h1);

        let mut h2 = params[l.b_mid..l.b_mid + h].to_vec();
        matvec(&params[l.w_mid..l.w_mid + h * h], h, h, &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());

        out.copy_from_slice(&params[l.b_out..l.b_out + 2]);
        matvec(&params[l.w_out..l.w_out + 2 * h], 2, h, &h2, out);

        PointCache {
            f,
            h0,
            q,
            a: att,
            ctx,
            h1,
            h2,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_point(
        &self,
        params: &[f64],
        cache: &PointCache,
        tokens: &TokenProj,
        cond: &Tensor,
        g_out: &[f64],
        grad: &mut [f64],
    ) {
        let (h, a, e) = (self.config.hidden, self.config.attn, self.config.width);
        let l = &self.layout;

        outer_add(&mut grad[l.w_out..l.w_out + 2 * h], 2, h, g_out, &cache.h2);
        for (g, go) in grad[l.b_out..l.b_out + 2].iter_mut().zip(g_out) {
            *g += go;
        }
        let mut g_h2 = vec![0.0; h];
        matvec_t(&params[l.w_out..l.w_out + 2 * h], 2, h, g_out, &mut g_h2);
        let g_z2: Vec<f64> = g_h2.iter().zip(&cache.h2).map(|(g, y)| g * (1.0 - y * y)).collect();

        outer_add(&mut grad[l.w_mid..l.w_mid + h * h], h, h, &g_z2, &cache.h1);
        for (g, gz) in grad[l.b_mid..l.b_mid + h].iter_mut().zip(&g_z2) {
            *g += gz;
        }
        let mut g_h1 = vec![0.0; h];
        matvec_t(&params[l.w_mid..l.w_mid + h * h], h, h, &g_z2, &mut g_h1);

        outer_add(&mut grad[l.o..l.o + h * h], h, h, &g_h1, &cache.ctx);
        let mut g_ctx = vec![0.0; h];
        matvec_t(&params[l.o..l.o + h * h], h, h, &g_h1, &mut g_ctx);

        // softmax attention
        let scale = 1.0 / (a as f64).sqrt();
        let g_att: Vec<f64> = tokens
            .values
            .iter()
            .map(|v| v.iter().zip(&g_ctx).map(|(x, y)| x * y).sum())
            .collect();
        let mean: f64 = cache.a.iter().zip(&g_att).map(|(p, g)| p * g).sum();
        let g_scores: Vec<f64> = cache.a.iter().zip(&g_att).map(|(p, g)| p * (g - mean)).collect();

        let mut g_q = vec![0.0; a];
        for (j, tok) in cond.data().chunks(e).enumerate() {
            let gs = g_scores[j] * scale;
            for (gq, k) in g_q.iter_mut().zip(&tokens.keys[j]) {
                *gq += gs * k;
            }
            let g_k: Vec<f64> = cache.q.iter().map(|q| gs * q).collect();
            outer_add(&mut grad[l.k..l.k + a * e], a, e, &g_k, tok);
            let g_v: Vec<f64> = g_ctx.iter().map(|g| cache.a[j] * g).collect();
            outer_add(&mut grad[l.v..l.v + h * e], h, e, &g_v, tok);
        }
        outer_add(&mut grad[l.q..l.q + a * h], a, h, &g_q, &cache.h0);

        let mut g_h0 = g_h1;
        matvec_t(&params[l.q..l.q + a * h], a, h, &g_q, &mut g_h0);
        let g_z0: Vec<f64> = g_h0.iter().zip(&cache.h0).map(|(g, y)| g * (1.0 - y * y)).collect();
        outer_add(&mut grad[l.w_in..l.w_in + h * FEATURES], h, FEATURES, &g_z0, &cache.f);
        for (g, gz) in grad[l.b_in..l.b_in + h].iter_mut().zip(&g_z0) {
            *g += gz;
        }
    }

    /// One ancestral DDPM step from `x_t` to `x_{t-1}` given the predicted noise.
    pub fn ancestral_step<R: Rng + ?Sized>(&self, x: &mut [f64], eps: &[f64], t: usize, rng: &mut R) {
        let beta = self.betas[t];
        let coef = beta / (1.0 - self.alpha_bars[t]).sqrt();
        let inv_sqrt_alpha = 1.0 / self.alphas[t].sqrt();
        let sigma = if t > 0 {
            (beta * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])).sqrt()
        } else {
            0.0
        };
        for (xi, ei) in x.iter_mut().zip(eps) {
            let mean = inv_sqrt_alpha * (*xi - coef * ei);
            *xi = if t > 0 {
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            };
        }
    }

    /// Runs the full reverse chain for `n` points with classifier-free
    /// guidance `ε_u + guidance·(ε_c − ε_u)`.
    pub fn sample(
        &self,
        params: &[f64],
        cond: Option<&Tensor>,
        n: usize,
        guidance: f64,
        seed: u64,
    ) -> Result<Vec<[f64; 2]>, BackendError> {
        let x = self.denoise_until(params, cond, 0, n, guidance, seed, true)?;
        Ok(x.data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn denoise_until(
        &self,
        params: &[f64],
        cond: Option<&Tensor>,
        t: usize,
        n: usize,
        guidance: f64,
        seed: u64,
        inclusive: bool,
    ) -> Result<Tensor, BackendError> {
        let steps = self.config.timesteps;
        if t >= steps {
            return Err(BackendError::Timestep { t, steps });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = Tensor::new(vec![n, 2], data)?;
        let stop = if inclusive { t } else { t + 1 };
        for s in (stop..steps).rev() {
            let eps = if guidance == 1.0 {
                self.predict_noise(params, &x, s, cond)?
            } else {
                let e_c = self.predict_noise(params, &x, s, cond)?;
                let e_u = self.predict_noise(params, &x, s, None)?;
                e_u.zip_with(&e_c, |u, c| u + guidance * (c - u))?
            };
            self.ancestral_step(x.data_mut(), eps.data(), s, &mut rng);
        }
        Ok(x)
    }

    /// Forward-noises clean points: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn noisy(&self, x0: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bars[t];
        x0.iter().zip(eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect()
    }
}

impl DiffusionBackend for ToyBackend {
    fn backend_id(&self) -> String {
        format!(
            "toy-mixture-h{}-a{}-w{}-T{}",
            self.config.hidden, self.config.attn, self.config.width, self.config.timesteps
        )
    }

    fn num_timesteps(&self) -> usize {
        self.config.timesteps
    }

    fn param_groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    fn predict_noise(
        &self,
        params: &[f64],
        latent: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Result<Tensor, BackendError> {
        self.check(params, latent, t)?;
        let cond = cond.unwrap_or(&self.null_cond);
        let tokens = self.project_tokens(params, cond)?;
        let mut out = vec![0.0; latent.len()];
        for (x, o) in latent.data().chunks(2).zip(out.chunks_mut(2)) {
            self.forward_point(params, x, t, &tokens, o);
        }
        Ok(Tensor::new(latent.shape().to_vec(), out)?)
    }

    fn accumulate_grad(
        &self,
        params: &[f64],
        latent: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        upstream: &Tensor,
        grad: &mut [f64],
    ) -> Result<(), BackendError> {
        self.check(params, latent, t)?;
        latent.check_same_shape(upstream)?;
        if grad.len() != params.len() {
            return Err(BackendError::ParamCount {
                got: grad.len(),
                expected: params.len(),
            });
        }
        let cond = cond.unwrap_or(&self.null_cond);
        let tokens = self.project_tokens(params, cond)?;
        let mut out = [0.0; 2];
        for (x, g) in latent.data().chunks(2).zip(upstream.data().chunks(2)) {
            let cache = self.forward_point(params, x, t, &tokens, &mut out);
            self.backward_point(params, &cache, &tokens, cond, g, grad);
        }
        Ok(())
    }

    fn generate_latent(
        &self,
        params: &[f64],
        cond: Option<&Tensor>,
        t: usize,
        seed: u64,
    ) -> Result<Tensor, BackendError> {
        self.denoise_until(params, cond, t, self.config.latent_points, 1.0, seed, false)
    }

    fn save_weights(&self, params: &[f64], path: &Path) -> Result<(), BackendError> {
        let err = |message: String| BackendError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let mut bytes = Vec::with_capacity(16 + params.len() * 8);
        bytes.extend_from_slice(WEIGHTS_MAGIC);
        bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(e.to_string()))?;
        tmp.write_all(&bytes).map_err(|e| err(e.to_string()))?;
        tmp.persist(path).map_err(|e| err(e.to_string()))?;
        Ok(())
    }

    fn load_weights(&self, path: &Path) -> Result<Vec<f64>, BackendError> {
        let err = |message: String| BackendError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(err("not a toy weights file".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if n != self.num_params() || bytes.len() != 16 + 8 * n {
            return Err(err(format!("expected {} parameters, file holds {n}", self.num_params())));
        }
        Ok(bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> ToyBackend {
        let width = ToyConfig::default().width;
        let null = Tensor::new(vec![2, width], (0..2 * width).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        ToyBackend::new(ToyConfig::default(), null)
    }

    #[test]
    fn param_budget() {
        let b = backend();
        assert!(b.num_params() <= 10_000, "{}", b.num_params());
        let total: usize = b.param_groups().iter().map(|g| g.len).sum();
        assert_eq!(total, b.num_params());
    }

    #[test]
    fn schedule_reaches_noise() {
        let b = backend();
        assert!(b.alpha_bar(b.num_timesteps() - 1) < 0.01);
    }

    #[test]
    fn grad_matches_finite_difference_on_a_few_params() {
        let b = backend();
        let p = b.init_params(3);
        let x = Tensor::new(vec![3, 2], vec![0.3, -0.2, 1.0, 0.5, -1.2, 0.1]).unwrap();
        let cond = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64).cos()).collect()).unwrap();
        let up = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.2, 0.7, -0.3, 0.4]).unwrap();
        let f = |p: &[f64]| -> f64 {
            let y = b.predict_noise(p, &x, 7, Some(&cond)).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = vec![0.0; p.len()];
        b.accumulate_grad(&p, &x, 7, Some(&cond), &up, &mut g).unwrap();
        for group in b.param_groups() {
            let i = group.offset + group.len / 2;
            let mut hi = p.clone();
            hi[i] += 1e-5;
            let mut lo = p.clone();
            lo[i] -= 1e-5;
            let num = (f(&hi) - f(&lo)) / 2e-5;
            assert!((num - g[i]).abs() < 1e-6 * (1.0 + num.abs()), "{}: {num} vs {}", group.name, g[i]);
        }
    }

    #[test]
    fn weights_round_trip() {
        let b = backend();
        let p = b.init_params(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        b.save_weights(&p, &path).unwrap();
        assert_eq!(b.load_weights(&path).unwrap(), p);
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = backend();
        let p = b.init_params(0);
        let x = Tensor::zeros(vec![1, 2]);
        assert!(b.predict_noise(&p[1..], &x, 0, None).is_err());
        assert!(b.predict_noise(&p, &x, 50, None).is_err());
        assert!(b.predict_noise(&p, &Tensor::zeros(vec![3]), 0, None).is_err());
    }
}
