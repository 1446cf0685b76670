//! Attention and normalization blocks: scaled dot-product attention, rotary
//! position embedding, the stacked style-alignment attention, and the band
//! transformer block with zero-initialized gated cross-attention and
//! adaptive layer norm.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Init, Linear};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `softmax(Q Kᵀ / √d) V` for `Q[Tq×d]`, `K[Tk×d]`, `V[Tk×dv]`.
pub fn sdp_attention<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::dim("sdp_attention", &sq, &sk));
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(Error::dim("sdp_attention", &sk, &sv));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, S::one() / S::count(sq[1]).sqrt());
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}

/// Applies rotary position embedding to `x[T×d]`.
pub fn rope_rotate<S: Scalar>(tape: &mut Tape<S>, x: Var, positions: &[usize]) -> Result<Var> {
    tape.rope(x, positions)
}

fn split_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, heads: usize) -> Result<Vec<Var>> {
    let d = tape.value(x).cols();
    let hd = d / heads;
    (0..heads).map(|h| tape.slice(x, 1, h * hd, hd)).collect()
}

/// Repeated attention of content queries over prompt tokens.
///
/// Each layer computes `z ← z + Attention(z, p, p)` where `p` is the prompt
/// plus a sinusoidal position table; the result is concatenated with the
/// original query along the feature axis, giving `[T × 2d]`.
#[derive(Clone, Debug)]
pub struct StyleAlignment {
    pub layers: usize,
    pub width: usize,
    pub null_token: String,
}

impl StyleAlignment {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        width: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let null_token = format!("{name}.null");
        store.insert(null_token.clone(), crate::params::init_normal(&[1, width], 0.1, rng))?;
        Ok(Self {
            layers,
            width,
            null_token,
        })
    }

    /// `prompt = None` substitutes the learned null token.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        query: Var,
        prompt: Option<Var>,
    ) -> Result<Var> {
        if tape.value(query).cols() != self.width {
            return Err(Error::dim("style_alignment", tape.shape(query), &[self.width]));
        }
        let p = match prompt {
            Some(p) => p,
            None => tape.param(store, &self.null_token)?,
        };
        if tape.value(p).cols() != self.width {
            return Err(Error::dim("style_alignment", tape.shape(p), &[self.width]));
        }
        let pos = tape.constant(sinusoidal_positions(tape.shape(p)[0], self.width));
        let p = tape.add(p, pos)?;
        let mut z = query;
        for _ in 0..self.layers {
            let a = sdp_attention(tape, z, p, p)?;
            z = tape.add(z, a)?;
        }
        tape.concat(&[z, query], 1)
    }
}

/// Global style vector: temporal means of the prompt tokens and the vocal
/// embedding plus the time embedding, shape `[1 × d]`.
pub fn global_style<S: Scalar>(tape: &mut Tape<S>, z_p: Var, z_v: Var, time_emb: Var) -> Result<Var> {
    let d = tape.value(z_v).cols();
    let mp = tape.mean_axis(z_p, 0)?;
    let mv = tape.mean_axis(z_v, 0)?;
    let s = tape.add(mp, mv)?;
    let s = tape.reshape(s, &[1, d])?;
    tape.add(s, time_emb)
}

/// Self-attention with RoPE plus a `tanh(α)`-gated cross-attention branch.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub width: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    /// Scalar gate α, initialised to zero.
    pub gate: String,
}

impl AttentionParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) || !(width / heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "width {width} must split into {heads} heads of even size"
            )));
        }
        let lin = |store: &mut ParameterStore<S>, part: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), width, width, false, Init::Uniform, rng)
        };
        let q = lin(store, "q", rng)?;
        let k = lin(store, "k", rng)?;
        let v = lin(store, "v", rng)?;
        let out = lin(store, "out", rng)?;
        let cross_k = lin(store, "cross_k", rng)?;
        let cross_v = lin(store, "cross_v", rng)?;
        let gate = format!("{name}.gate");
        store.insert(gate.clone(), Tensor::zeros(&[1]))?;
        Ok(Self {
            heads,
            width,
            q,
            k,
            v,
            out,
            cross_k,
            cross_v,
            gate,
        })
    }

    /// Returns `(total, cross_branch)` where `cross_branch` is the gated
    /// cross-attention contribution before the output projection.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x: Var,
        prompt: Var,
    ) -> Result<(Var, Var)> {
        let t = tape.shape(x)[0];
        let positions: Vec<usize> = (0..t).collect();
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let kz = self.cross_k.forward(tape, store, prompt)?;
        let vz = self.cross_v.forward(tape, store, prompt)?;
        let qs = split_heads(tape, q, self.heads)?;
        let ks = split_heads(tape, k, self.heads)?;
        let vs = split_heads(tape, v, self.heads)?;
        let kzs = split_heads(tape, kz, self.heads)?;
        let vzs = split_heads(tape, vz, self.heads)?;
        let mut self_heads = Vec::with_capacity(self.heads);
        let mut cross_heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qr = tape.rope(qs[h], &positions)?;
            let kr = tape.rope(ks[h], &positions)?;
            self_heads.push(sdp_attention(tape, qr, kr, vs[h])?);
            cross_heads.push(sdp_attention(tape, qr, kzs[h], vzs[h])?);
        }
        let sa = tape.concat(&self_heads, 1)?;
        let ca = tape.concat(&cross_heads, 1)?;
        let alpha = tape.param(store, &self.gate)?;
        let g = tape.tanh(alpha);
        let gated = tape.scale_by(ca, g)?;
        let mixed = tape.add(sa, gated)?;
        let out = self.out.forward(tape, store, mixed)?;
        Ok((out, gated))
    }
}

/// One band transformer block (pre-norm residual form).
///
/// `(x + z_v) → rmsnorm → attention → AdaLN(z_g) → residual`, then
/// `rmsnorm → feed-forward → AdaLN(z_g) → residual`. The AdaLN projection is
/// zero-initialised, so a fresh block is the identity on its residual stream.
#[derive(Clone, Debug)]
pub struct BandBlock {
    pub width: usize,
    pub attn_norm: String,
    pub ffn_norm: String,
    pub attn: AttentionParams,
    pub modulation: Linear,
}

/// Intermediate values of one block evaluation.
pub struct BlockOutput {
    pub out: Var,
    pub cross_branch: Var,
}

impl BandBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParameterStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let attn_norm = format!("{name}.attn_norm");
        let ffn_norm = format!("{name}.ffn_norm");
        store.insert(attn_norm.clone(), Tensor::ones(&[width]))?;
        store.insert(ffn_norm.clone(), Tensor::ones(&[width]))?;
        let attn = AttentionParams::new(store, &format!("{name}.attn"), width, heads, rng)?;
        let modulation = Linear::new(
            store,
            &format!("{name}.adaln"),
            width,
            4 * width,
            true,
            Init::Zeros,
            rng,
        )?;
        Ok(Self {
            width,
            attn_norm,
            ffn_norm,
            attn,
            modulation,
        })
    }

    /// `z_v` is added to the stream when given; `ffn` maps the normalised
    /// stream `[T×d]` to `[T×d]` (a dense FFN or a Band-MOE).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParameterStore<S>,
        x: Var,
        z_v: Option<Var>,
        z_p: Var,
        z_g: Var,
        ffn: &mut dyn FnMut(&mut Tape<S>, Var) -> Result<Var>,
    ) -> Result<BlockOutput> {
        let mut h = x;
        if let Some(zv) = z_v {
            if tape.shape(zv) != tape.shape(x) {
                return Err(Error::dim("band_block", tape.shape(x), tape.shape(zv)));
            }
            h = tape.add(h, zv)?;
        }
        let d = self.width;
        let m = self.modulation.forward(tape, store, z_g)?;
        let gamma1 = tape.slice(m, 1, 0, d)?;
        let beta1 = tape.slice(m, 1, d, d)?;
        let gamma2 = tape.slice(m, 1, 2 * d, d)?;
        let beta2 = tape.slice(m, 1, 3 * d, d)?;

        let g1 = tape.param(store, &self.attn_norm)?;
        let a = tape.rmsnorm(h, g1)?;
        let (att, cross_branch) = self.attn.forward(tape, store, a, z_p)?;
        let att = tape.adaln(att, gamma1, beta1)?;
        h = tape.add(h, att)?;

        let g2 = tape.param(store, &self.ffn_norm)?;
        let f = tape.rmsnorm(h, g2)?;
        let f = ffn(tape, f)?;
        let f = tape.adaln(f, gamma2, beta2)?;
        h = tape.add(h, f)?;
        Ok(BlockOutput {
            out: h,
            cross_branch,
        })
    }
}
