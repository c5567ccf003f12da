//! ε-prediction network with one K/V-split cross-attention block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::GuidanceCondition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Width of the hidden state and attention space.
    pub width: usize,
    /// Dimension of the condition features.
    pub cond_dim: usize,
    /// Condition tokens per factor.
    pub tokens: usize,
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            width: 32,
            cond_dim: 32,
            tokens: 1,
            steps: super::schedule::DEFAULT_STEPS,
        }
    }
}

/// Names in checkpoint order.
pub const PARAM_NAMES: [&str; 13] = [
    "temb", "w_in", "b_in", "w_q", "w_k", "w_v", "w_o", "w1", "b1", "w2", "b2", "pos", "b_o",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    /// T×W time embedding.
    pub temb: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// L×C positional offsets added to condition tokens (zeros and unused
    /// when L = 1).
    pub pos: Tensor,
    pub b_o: Tensor,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let (w, c, l, t) = (cfg.width, cfg.cond_dim, cfg.tokens, cfg.steps);
        if w == 0 || c == 0 || l == 0 || t == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        let lin =
            |rows: usize, cols: usize, rng: &mut R| Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng);
        let mut temb = Tensor::zeros(&[t, w]);
        for step in 0..t {
            for j in 0..w {
                let freq = 10000f64.powf(-((j / 2 * 2) as f64) / w as f64);
                let arg = step as f64 * freq;
                temb.row_mut(step)[j] = if j % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
        Ok(DenoiserParams {
            temb,
            w_in: lin(2, w, rng),
            b_in: Tensor::zeros(&[w]),
            w_q: lin(w, w, rng),
            w_k: lin(c, w, rng),
            w_v: lin(c, w, rng),
            w_o: lin(w, w, rng),
            w1: lin(w, w, rng),
            b1: Tensor::zeros(&[w]),
            w2: lin(w, 2, rng),
            b2: Tensor::zeros(&[2]),
            pos: if l > 1 {
                Tensor::normal(&[l, c], 0.1, rng)
            } else {
                Tensor::zeros(&[l, c])
            },
            b_o: Tensor::zeros(&[w]),
        })
    }

    pub fn width(&self) -> usize {
        self.w_in.cols()
    }

    pub fn tokens(&self) -> usize {
        self.pos.rows()
    }

    pub fn steps(&self) -> usize {
        self.temb.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 13] {
        [
            &self.temb, &self.w_in, &self.b_in, &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w1, &self.b1,
            &self.w2, &self.b2, &self.pos, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.temb,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.pos,
            &mut self.b_o,
        ]
    }

    pub fn from_vec(v: Vec<Tensor>) -> Result<Self> {
        let arr: [Tensor; 13] = v
            .try_into()
            .map_err(|v: Vec<Tensor>| Error::InvalidInput(format!("denoiser needs 13 tensors, got {}", v.len())))?;
        let [temb, w_in, b_in, w_q, w_k, w_v, w_o, w1, b1, w2, b2, pos, b_o] = arr;
        let p = DenoiserParams {
            temb,
            w_in,
            b_in,
            w_q,
            w_k,
            w_v,
            w_o,
            w1,
            b1,
            w2,
            b2,
            pos,
            b_o,
        };
        let (w, c) = (p.width(), p.w_k.rows());
        let ok = p.temb.cols() == w
            && p.w_in.shape() == [2, w]
            && p.b_in.shape() == [w]
            && p.w_q.shape() == [w, w]
            && p.w_k.shape() == [c, w]
            && p.w_v.shape() == [c, w]
            && p.w_o.shape() == [w, w]
            && p.w1.shape() == [w, w]
            && p.b1.shape() == [w]
            && p.w2.shape() == [w, 2]
            && p.b2.shape() == [2]
            && p.pos.cols() == c
            && p.b_o.shape() == [w];
        if !ok {
            return Err(Error::InvalidInput("inconsistent denoiser shapes".into()));
        }
        Ok(p)
    }

    pub fn attach(&self, g: &mut Graph) -> DenoiserVars {
        let v: Vec<Var> = self.tensors().iter().map(|t| g.param((*t).clone())).collect();
        DenoiserVars::from_slice(&v)
    }

    pub fn attach_frozen(&self, g: &mut Graph) -> DenoiserVars {
        let v: Vec<Var> = self.tensors().iter().map(|t| g.constant((*t).clone())).collect();
        DenoiserVars::from_slice(&v)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenoiserVars {
    pub temb: Var,
    pub w_in: Var,
    pub b_in: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub pos: Var,
    pub b_o: Var,
}

impl DenoiserVars {
    fn from_slice(v: &[Var]) -> Self {
        DenoiserVars {
            temb: v[0],
            w_in: v[1],
            b_in: v[2],
            w_q: v[3],
            w_k: v[4],
            w_v: v[5],
            w_o: v[6],
            w1: v[7],
            b1: v[8],
            w2: v[9],
            b2: v[10],
            pos: v[11],
            b_o: v[12],
        }
    }

    pub fn vars(&self) -> [Var; 13] {
        [
            self.temb, self.w_in, self.b_in, self.w_q, self.w_k, self.w_v, self.w_o, self.w1, self.b1, self.w2,
            self.b2, self.pos, self.b_o,
        ]
    }

    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars()
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect()
    }
}

/// `softmax(Q Kᵀ / √d) V` with the softmax over keys.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (
        g.value(q).shape().to_vec(),
        g.value(k).shape().to_vec(),
        g.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape {
            op: "attention",
            left: qs,
            right: ks,
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let w = g.softmax(scores, 1)?;
    g.matmul(w, v)
}

fn condition_tokens(g: &mut Graph, p: &DenoiserVars, tau: &Tensor) -> Result<Var> {
    let t = g.constant(tau.clone());
    if tau.rows() > 1 {
        g.add(t, p.pos)
    } else {
        Ok(t)
    }
}

/// `h + attention(h W_Q, τ_style W_K, τ_category W_V) W_O`.
pub fn split_cross_attention(g: &mut Graph, h: Var, cond: &GuidanceCondition, p: &DenoiserVars) -> Result<Var> {
    let ts = condition_tokens(g, p, &cond.style)?;
    let tc = condition_tokens(g, p, &cond.category)?;
    attend(g, h, ts, tc, p)
}

/// Single-condition cross-attention: keys and values from the same tokens.
pub fn cross_attention(g: &mut Graph, h: Var, tau: &Tensor, p: &DenoiserVars) -> Result<Var> {
    let t = condition_tokens(g, p, tau)?;
    attend(g, h, t, t, p)
}

fn attend(g: &mut Graph, h: Var, key_src: Var, value_src: Var, p: &DenoiserVars) -> Result<Var> {
    let q = g.matmul(h, p.w_q)?;
    let k = g.matmul(key_src, p.w_k)?;
    let v = g.matmul(value_src, p.w_v)?;
    let a = attention(g, q, k, v)?;
    let o = g.matmul(a, p.w_o)?;
    let o = g.add_row(o, p.b_o)?;
    g.add(h, o)
}

/// Rows of a batch that share one condition; segments are contiguous and
/// in order.
#[derive(Clone, Debug)]
pub struct Segment<'a> {
    pub cond: &'a GuidanceCondition,
    pub len: usize,
}

/// Predicted noise for `z` (n×2) at per-row steps `t`.
pub fn denoise(g: &mut Graph, p: &DenoiserVars, z: Var, t: &[usize], segments: &[Segment]) -> Result<Var> {
    let n = g.value(z).rows();
    if t.len() != n || segments.iter().map(|s| s.len).sum::<usize>() != n {
        return Err(Error::InvalidInput(format!(
            "denoise: {n} rows, {} steps, {} segmented rows",
            t.len(),
            segments.iter().map(|s| s.len).sum::<usize>()
        )));
    }
    let h = g.matmul(z, p.w_in)?;
    let h = g.add_row(h, p.b_in)?;
    let te = g.gather_rows(p.temb, t)?;
    let h = g.add(h, te)?;
    let mut parts = Vec::with_capacity(segments.len());
    let mut start = 0;
    for s in segments.iter().filter(|s| s.len > 0) {
        let hs = g.slice_rows(h, start, s.len)?;
        parts.push(split_cross_attention(g, hs, s.cond, p)?);
        start += s.len;
    }
    let a = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    let m = g.matmul(a, p.w1)?;
    let m = g.add_row(m, p.b1)?;
    let m = g.relu(m);
    let out = g.matmul(m, p.w2)?;
    g.add_row(out, p.b2)
}
