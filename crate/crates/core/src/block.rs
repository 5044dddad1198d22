//! Pre-norm transformer block shared by the backbone and the detector head.
//!
//! `x ← x + Attn(LN₁(x))`, then `x ← x + MLP(LN₂(x))`. Weights are stored
//! `[in, out]` so a linear layer is `x·W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{LtdError, Result};
use crate::tensor::{c, matmul_into, Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh-approximated GELU.
    #[default]
    Gelu,
    /// `x·σ(1.702x)`, the variant used by OpenAI CLIP.
    QuickGelu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => crate::autodiff::gelu(x),
            Activation::QuickGelu => x * sigmoid(c::<T>(1.702) * x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl BlockShape {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(LtdError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(LtdError::Config("mlp hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count: `4D² + 2DH + 9D + H`.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let h = self.mlp_hidden;
        4 * d * d + 2 * d * h + 9 * d + h
    }

    /// (name, shape) of every tensor in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.width;
        let h = self.mlp_hidden;
        vec![
            ("ln1.weight", vec![d]),
            ("ln1.bias", vec![d]),
            ("attn.q.weight", vec![d, d]),
            ("attn.q.bias", vec![d]),
            ("attn.k.weight", vec![d, d]),
            ("attn.k.bias", vec![d]),
            ("attn.v.weight", vec![d, d]),
            ("attn.v.bias", vec![d]),
            ("attn.out.weight", vec![d, d]),
            ("attn.out.bias", vec![d]),
            ("ln2.weight", vec![d]),
            ("ln2.bias", vec![d]),
            ("mlp.fc1.weight", vec![d, h]),
            ("mlp.fc1.bias", vec![h]),
            ("mlp.fc2.weight", vec![h, d]),
            ("mlp.fc2.bias", vec![d]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = f32> {
    pub shape: BlockShape,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Real> BlockParams<T> {
    /// Truncated-normal(0.02) projections, zero biases, unit layer norms.
    pub fn init<R: Rng + ?Sized>(shape: BlockShape, std: f64, rng: &mut R) -> Self {
        let d = shape.width;
        let h = shape.mlp_hidden;
        BlockParams {
            shape,
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::trunc_normal(&[d, d], std, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::trunc_normal(&[d, d], std, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::trunc_normal(&[d, d], std, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::trunc_normal(&[d, d], std, rng),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            fc1_w: Tensor::trunc_normal(&[d, h], std, rng),
            fc1_b: Tensor::zeros(&[h]),
            fc2_w: Tensor::trunc_normal(&[h, d], std, rng),
            fc2_b: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    /// (name, tensor) pairs in canonical order, names prefixed.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.shape
            .tensor_shapes()
            .into_iter()
            .zip(self.tensors())
            .map(|((n, _), t)| (format!("{prefix}{n}"), t))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> BlockParams<U> {
        let t = self.tensors();
        BlockParams {
            shape: self.shape,
            ln1_g: t[0].cast(),
            ln1_b: t[1].cast(),
            wq: t[2].cast(),
            bq: t[3].cast(),
            wk: t[4].cast(),
            bk: t[5].cast(),
            wv: t[6].cast(),
            bv: t[7].cast(),
            wo: t[8].cast(),
            bo: t[9].cast(),
            ln2_g: t[10].cast(),
            ln2_b: t[11].cast(),
            fc1_w: t[12].cast(),
            fc1_b: t[13].cast(),
            fc2_w: t[14].cast(),
            fc2_b: t[15].cast(),
        }
    }

    /// Zeroes the attention and MLP output projections, making the block an identity.
    pub fn zero_residual_branches(&mut self) {
        for t in [&mut self.wo, &mut self.bo, &mut self.fc2_w, &mut self.fc2_b] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl BlockParams<f32> {
    pub fn from_archive(shape: BlockShape, archive: &mut Archive, prefix: &str) -> Result<Self> {
        let mut ts = Vec::with_capacity(16);
        for (name, s) in shape.tensor_shapes() {
            ts.push(archive.take(&format!("{prefix}{name}"), &s)?);
        }
        let mut it = ts.into_iter();
        let mut next = || it.next().expect("16 tensors");
        Ok(BlockParams {
            shape,
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        })
    }

    /// In-place forward over `tokens` (row-major `[n, D]`), no tape.
    pub fn forward_inplace(&self, tokens: &mut [f32], n: usize, act: Activation) {
        let d = self.shape.width;
        let heads = self.shape.heads;
        let dh = d / heads;
        let hidden = self.shape.mlp_hidden;

        let normed = layer_norm_rows(tokens, n, d, self.ln1_g.data(), self.ln1_b.data());
        let q = linear(&normed, n, d, d, self.wq.data(), self.bq.data());
        let k = linear(&normed, n, d, d, self.wk.data(), self.bk.data());
        let v = linear(&normed, n, d, d, self.wv.data(), self.bv.data());
        let scale = 1.0 / (dh as f32).sqrt();
        let mut attn_out = vec![0.0f32; n * d];
        let mut scores = vec![0.0f32; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + dh];
                let mut mx = f32::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                    mx = mx.max(*s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    total += *s;
                }
                let orow = &mut attn_out[i * d + off..i * d + off + dh];
                for (j, &s) in scores.iter().enumerate() {
                    let w = s / total;
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
        let proj = linear(&attn_out, n, d, d, self.wo.data(), self.bo.data());
        for (t, p) in tokens.iter_mut().zip(&proj) {
            *t += p;
        }

        let normed = layer_norm_rows(tokens, n, d, self.ln2_g.data(), self.ln2_b.data());
        let mut mid = linear(&normed, n, d, hidden, self.fc1_w.data(), self.fc1_b.data());
        mid.iter_mut().for_each(|x| *x = act.apply(*x));
        let out = linear(&mid, n, hidden, d, self.fc2_w.data(), self.fc2_b.data());
        for (t, o) in tokens.iter_mut().zip(&out) {
            *t += o;
        }
    }
}

/// Tape-bound handles to one block's parameters.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub shape: BlockShape,
    pub vars: [Var; 16],
}

impl BlockVars {
    pub fn bind<T: Real>(tape: &mut Tape<T>, p: &BlockParams<T>, trainable: bool) -> Self {
        let vars = p.tensors().map(|t| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        });
        BlockVars { shape: p.shape, vars }
    }

    /// Records the block forward over `x` (`[n, D]`).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, act: Activation) -> Result<Var> {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = self.vars;
        let d = self.shape.width;
        let heads = self.shape.heads;
        let dh = d / heads;

        let h = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let q = tape.linear(h, wq, bq)?;
        let k = tape.linear(h, wk, bk)?;
        let v = tape.linear(h, wv, bv)?;
        let scale: T = c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let proj = tape.linear(cat, wo, bo)?;
        let x = tape.add(x, proj)?;

        let h = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let m = tape.linear(h, fc1_w, fc1_b)?;
        let m = match act {
            Activation::Gelu => tape.gelu(m)?,
            Activation::QuickGelu => tape.quick_gelu(m)?,
        };
        let m = tape.linear(m, fc2_w, fc2_b)?;
        tape.add(x, m)
    }
}

pub(crate) fn layer_norm_rows(x: &[f32], n: usize, d: usize, g: &[f32], b: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + LN_EPS as f32).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    out
}

pub(crate) fn linear(x: &[f32], n: usize, din: usize, dout: usize, w: &[f32], b: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    matmul_into(x, w, &mut out, n, din, dout);
    out
}
