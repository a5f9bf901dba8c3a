//! Convolutional encoder, iterative slot attention and a spatial-broadcast
//! decoder that composites per-slot RGB through slot-softmaxed alpha masks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OceanError, Result};
use crate::numcore::{bind, Activation, Bound, Gru, Linear, Mlp, ParamStore, Real, Tape, Tensor, Var, LOG_FLOOR};
use crate::rng::{stream_rng, streams};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotcoderConfig {
    pub resolution: usize,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub mlp_hidden: usize,
    pub iters: usize,
    /// Side of the decoder's broadcast grid.
    pub broadcast: usize,
    /// Stride-1 convolutions on the broadcast grid before upsampling.
    pub dec_pre: usize,
    pub attn_eps: f64,
    pub empty_tau: f64,
}

impl SlotcoderConfig {
    pub fn desk32() -> Self {
        SlotcoderConfig {
            resolution: 32,
            num_slots: 7,
            slot_dim: 32,
            enc_channels: 16,
            dec_channels: 32,
            mlp_hidden: 64,
            iters: 3,
            broadcast: 8,
            dec_pre: 2,
            attn_eps: 1e-8,
            empty_tau: 0.5,
        }
    }

    pub fn desk64() -> Self {
        SlotcoderConfig {
            resolution: 64,
            slot_dim: 64,
            mlp_hidden: 128,
            ..Self::desk32()
        }
    }

    /// Smallest layout that still exercises every layer; used by gradient
    /// checks.
    pub fn tiny() -> Self {
        SlotcoderConfig {
            resolution: 8,
            num_slots: 3,
            slot_dim: 4,
            enc_channels: 3,
            dec_channels: 3,
            mlp_hidden: 5,
            iters: 2,
            broadcast: 4,
            dec_pre: 1,
            attn_eps: 1e-8,
            empty_tau: 0.5,
        }
    }

    /// Encoder output side (two stride-2 layers).
    pub fn feature_side(&self) -> usize {
        self.resolution / 4
    }

    pub fn num_locations(&self) -> usize {
        self.feature_side() * self.feature_side()
    }

    fn upsamplings(&self) -> Result<usize> {
        let ratio = self.resolution / self.broadcast.max(1);
        if self.resolution % 4 != 0 || ratio * self.broadcast != self.resolution || !ratio.is_power_of_two() {
            return Err(OceanError::invalid(format!(
                "resolution {} must be a multiple of 4 and a power-of-two multiple of the broadcast grid {}",
                self.resolution, self.broadcast
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    transposed: bool,
}

impl Conv {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        let k = 3;
        let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = store.normal(format!("{name}.w"), &shape, std, rng);
        let b = store.zeros(format!("{name}.b"), &[cout]);
        Conv {
            w,
            b,
            stride,
            pad: 1,
            out_pad: if transposed { stride - 1 } else { 0 },
            transposed,
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if self.transposed {
            tape.conv_transpose2d(x, p.get(self.w), p.get(self.b), self.stride, self.pad, self.out_pad)
        } else {
            tape.conv2d(x, p.get(self.w), p.get(self.b), self.stride, self.pad)
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gain), p.get(self.bias), T::lit(1e-5))
    }
}

/// Block layout of a slot autoencoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SlotcoderArch {
    pub cfg: SlotcoderConfig,
    enc: Vec<Conv>,
    enc_pos: Linear,
    norm_in: Norm,
    to_k: Linear,
    to_v: Linear,
    norm_slots: Norm,
    to_q: Linear,
    gru: Gru,
    norm_mlp: Norm,
    mlp: Mlp,
    pub mu: usize,
    pub log_sigma: usize,
    dec_pos: Linear,
    dec: Vec<Conv>,
}

/// Handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    /// `[3, P]`
    pub recon: Var,
    /// `[N, 3, P]`
    pub rgb: Var,
    /// `[N, P]`
    pub alpha: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub init: Var,
    pub slots: Var,
    /// `[L, N]`, softmax over slots per location.
    pub attn: Var,
    pub decode: DecodeVars,
    pub loss: Var,
}

/// `[side², 4]` rows of `(y, x, 1−y, 1−x)` on a uniform grid.
fn grid<T: Real>(side: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(side * side * 4);
    let denom = (side.max(2) - 1) as f64;
    for i in 0..side {
        for j in 0..side {
            let (y, x) = (i as f64 / denom, j as f64 / denom);
            data.extend([y, x, 1.0 - y, 1.0 - x].map(T::lit));
        }
    }
    Tensor::new(&[side * side, 4], data).expect("sized")
}

impl SlotcoderArch {
    pub fn build<T: Real, R: Rng>(cfg: &SlotcoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let ups = cfg.upsamplings()?;
        let (c, d) = (cfg.enc_channels, cfg.slot_dim);
        if cfg.iters == 0 || cfg.num_slots == 0 || d == 0 {
            return Err(OceanError::invalid("slotcoder needs iters ≥ 1 and nonzero slot count/dim"));
        }
        let enc = [(3, 1), (c, 2), (c, 2), (c, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(cin, s))| Conv::new(store, &format!("enc{i}"), cin, c, s, false, rng))
            .collect();
        let enc_pos = Linear::new(store, "enc_pos", 4, c, 1.0, rng);
        let norm_in = Norm::new(store, "norm_in", c);
        let to_k = Linear::new(store, "to_k", c, d, 1.0, rng);
        let to_v = Linear::new(store, "to_v", c, d, 1.0, rng);
        let norm_slots = Norm::new(store, "norm_slots", d);
        let to_q = Linear::new(store, "to_q", d, d, 1.0, rng);
        let gru = Gru::new(store, "slot_gru", d, d, rng);
        let norm_mlp = Norm::new(store, "norm_mlp", d);
        let mlp = Mlp::new(store, "slot_mlp", d, cfg.mlp_hidden, d, Activation::Relu, 1.0, rng);
        let mu = store.normal("slot_mu", &[d], (1.0 / d as f64).sqrt(), rng);
        let log_sigma = store.add("slot_log_sigma", Tensor::full(&[d], T::lit(0.5f64.ln())));
        let dec_pos = Linear::new(store, "dec_pos", 4, d, 1.0, rng);
        let dc = cfg.dec_channels;
        let mut dec = Vec::new();
        let mut cin = d;
        for i in 0..cfg.dec_pre {
            dec.push(Conv::new(store, &format!("dec_pre{i}"), cin, dc, 1, false, rng));
            cin = dc;
        }
        // channels halve with every upsampling after the first
        for i in 0..ups {
            let cout = (dc >> i.saturating_sub(1)).max(dc.min(8));
            dec.push(Conv::new(store, &format!("dec{i}"), cin, cout, 2, true, rng));
            cin = cout;
        }
        dec.push(Conv::new(store, "dec_out", cin, 4, 1, false, rng));
        Ok(SlotcoderArch {
            cfg: cfg.clone(),
            enc,
            enc_pos,
            norm_in,
            to_k,
            to_v,
            norm_slots,
            to_q,
            gru,
            norm_mlp,
            mlp,
            mu,
            log_sigma,
            dec_pos,
            dec,
        })
    }

    /// Conv features plus positional embedding, `[L, C]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: &Tensor<T>) -> Result<Var> {
        let r = self.cfg.resolution;
        if image.shape() != [3, r, r] {
            return Err(OceanError::shape("encode(resolution)", image.shape(), &[3, r, r]));
        }
        let mut x = tape.constant(image.clone().reshaped(&[1, 3, r, r])?);
        for conv in &self.enc {
            x = conv.forward(tape, p, x)?;
            x = tape.relu(x);
        }
        let (c, l) = (self.cfg.enc_channels, self.cfg.num_locations());
        let x = tape.reshape(x, &[c, l])?;
        let x = tape.transpose(x)?;
        let g = tape.constant(grid(self.cfg.feature_side()));
        let pos = self.enc_pos.forward(tape, p, g)?;
        tape.add(x, pos)
    }

    /// `mu + exp(log_sigma) ⊙ noise` for `noise: [N, D]`.
    pub fn init_slots<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, noise: &Tensor<T>) -> Result<Var> {
        let z = tape.constant(noise.clone());
        let sigma = tape.exp(p.get(self.log_sigma));
        let s = tape.mul_trailing(z, sigma)?;
        tape.add_trailing(s, p.get(self.mu))
    }

    /// Keys (pre-scaled by `1/√D`) and values from normalized features.
    pub fn keys_values<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let x = self.norm_in.forward(tape, p, features)?;
        let k = self.to_k.forward(tape, p, x)?;
        let k = tape.scale(k, T::lit(1.0 / (self.cfg.slot_dim as f64).sqrt()));
        let v = self.to_v.forward(tape, p, x)?;
        Ok((k, v))
    }

    /// One attention round. Returns `(attn [L,N], updates [N,D], slots')`.
    pub fn attend<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, k: Var, v: Var, slots: Var) -> Result<(Var, Var, Var)> {
        let s = self.norm_slots.forward(tape, p, slots)?;
        let q = self.to_q.forward(tape, p, s)?;
        let logits = tape.matmul_t(k, false, q, true)?;
        let a = tape.softmax_axis(logits, 1, None)?;
        // weighted mean over locations: (a+ε)/Σ_L(a+ε), written as a softmax
        // of the log
        let shifted = tape.shift(a, T::lit(self.cfg.attn_eps));
        let la = tape.log(shifted, T::lit(LOG_FLOOR));
        let w = tape.softmax_axis(la, 0, None)?;
        let updates = tape.matmul_t(w, true, v, false)?;
        let next = self.gru.step(tape, p, updates, slots)?;
        let h = self.norm_mlp.forward(tape, p, next)?;
        let h = self.mlp.forward(tape, p, h)?;
        let next = tape.add(next, h)?;
        Ok((a, updates, next))
    }

    /// Iterative slot attention; returns final slots `[N, D]` and the final
    /// iteration's attention `[L, N]` (softmax over slots).
    pub fn slot_attention<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, features: Var, init: Var) -> Result<(Var, Var)> {
        let (k, v) = self.keys_values(tape, p, features)?;
        let mut slots = init;
        let mut attn = None;
        for it in 0..self.cfg.iters {
            let (a, _, next) = self.attend(tape, p, k, v, slots).map_err(|e| iteration_error(it, e))?;
            if !tape.value(next).is_finite() {
                return Err(OceanError::NonFinite(format!("slot attention iteration {it}")));
            }
            slots = next;
            attn = Some(a);
        }
        Ok((slots, attn.expect("iters ≥ 1")))
    }

    /// Spatial-broadcast decode of `[N, D]` slots.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, slots: Var) -> Result<DecodeVars> {
        let (d, g, r) = (self.cfg.slot_dim, self.cfg.broadcast, self.cfg.resolution);
        let sh = tape.shape(slots);
        if sh.len() != 2 || sh[1] != d {
            return Err(OceanError::shape("decode", sh, &[0, d]));
        }
        let n = sh[0];
        let x = tape.repeat_last(slots, g * g);
        let x = tape.reshape(x, &[n, d, g, g])?;
        let gv = tape.constant(grid(g));
        let pos = self.dec_pos.forward(tape, p, gv)?;
        let pos = tape.transpose(pos)?;
        let pos = tape.reshape(pos, &[d, g, g])?;
        let mut x = tape.add_trailing(x, pos)?;
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate() {
            x = conv.forward(tape, p, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        let px = r * r;
        let x = tape.reshape(x, &[n, 4, px])?;
        let rgb = tape.narrow(x, 1, 0, 3)?;
        let logits = tape.narrow(x, 1, 3, 1)?;
        let logits = tape.reshape(logits, &[n, px])?;
        let alpha = tape.softmax_axis(logits, 0, None)?;
        let recon = tape.mix(alpha, rgb)?;
        Ok(DecodeVars { recon, rgb, alpha })
    }

    /// Full pass: encode, slot attention from `noise`, decode, MSE loss.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: &Tensor<T>, noise: &Tensor<T>) -> Result<ForwardVars> {
        let features = self.encode(tape, p, image)?;
        let init = self.init_slots(tape, p, noise)?;
        let (slots, attn) = self.slot_attention(tape, p, features, init)?;
        let decode = self.decode(tape, p, slots)?;
        let loss = recon_loss(tape, decode.recon, image)?;
        Ok(ForwardVars {
            features,
            init,
            slots,
            attn,
            decode,
            loss,
        })
    }
}

fn iteration_error(it: usize, e: OceanError) -> OceanError {
    match e {
        OceanError::NonFinite(what) => OceanError::NonFinite(format!("slot attention iteration {it}: {what}")),
        other => other,
    }
}

/// Mean squared error between a `[3, P]` reconstruction and the image.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, recon: Var, image: &Tensor<T>) -> Result<Var> {
    let target = tape.constant(image.clone().reshaped(tape.shape(recon))?);
    tape.mse(recon, target)
}

/// Standard-normal slot noise for `key`.
pub fn slot_noise<T: Real>(seed: u64, key: u64, n: usize, d: usize) -> Tensor<T> {
    let mut rng = stream_rng(seed, streams::SLOT_NOISE, key);
    let data = (0..n * d).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(&[n, d], data).expect("sized")
}

/// Object vectors of one image plus the final attention, `[N, L]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSet {
    pub slots: Tensor<f32>,
    pub attention: Tensor<f32>,
    pub image_id: u64,
}

impl SlotSet {
    pub fn num_slots(&self) -> usize {
        self.slots.dim(0)
    }

    pub fn slot(&self, i: usize) -> &[f32] {
        self.slots.row(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecon {
    pub recon: Tensor<f32>,
    pub rgb: Tensor<f32>,
    pub alpha: Tensor<f32>,
}

/// Slot `n` is empty iff its total attention mass is below `τ·L/N`.
pub fn empty_slot_mask(set: &SlotSet, tau: f64) -> Vec<bool> {
    let (n, l) = (set.attention.dim(0), set.attention.dim(1));
    let threshold = tau * l as f64 / n as f64;
    (0..n)
        .map(|i| set.attention.row(i).iter().map(|&a| a as f64).sum::<f64>() < threshold)
        .collect()
}

/// Transposes a `[L, N]` tensor into `[N, L]`.
pub(crate) fn attention_rows<T: Real>(attn: &Tensor<T>) -> Tensor<f32> {
    let (l, n) = (attn.dim(0), attn.dim(1));
    let mut out = vec![0f32; n * l];
    for li in 0..l {
        for ni in 0..n {
            out[ni * l + li] = attn.data()[li * n + ni].as_f64() as f32;
        }
    }
    Tensor::new(&[n, l], out).expect("sized")
}

/// A trained (or trainable) slot autoencoder with its own parameters.
#[derive(Clone, Debug)]
pub struct Slotcoder {
    pub arch: SlotcoderArch,
    pub params: ParamStore<f32>,
}

pub const SLOTCODER_TAG: u32 = 0;

impl Slotcoder {
    pub fn new(cfg: &SlotcoderConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, streams::INIT_SLOTCODER, 0);
        let mut params = ParamStore::new(SLOTCODER_TAG);
        let arch = SlotcoderArch::build(cfg, &mut params, &mut rng)?;
        Ok(Slotcoder { arch, params })
    }

    pub fn cfg(&self) -> &SlotcoderConfig {
        &self.arch.cfg
    }

    /// Slots and attention for one image, no gradients.
    pub fn extract(&self, image: &Tensor<f32>, noise: &Tensor<f32>, image_id: u64) -> Result<SlotSet> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, false);
        let features = self.arch.encode(&mut tape, &p, image)?;
        let init = self.arch.init_slots(&mut tape, &p, noise)?;
        let (slots, attn) = self.arch.slot_attention(&mut tape, &p, features, init)?;
        Ok(SlotSet {
            slots: tape.value(slots).clone(),
            attention: attention_rows(tape.value(attn)),
            image_id,
        })
    }

    /// Reconstruction and its loss for one image, no gradients.
    pub fn reconstruct(&self, image: &Tensor<f32>, noise: &Tensor<f32>) -> Result<(SlotRecon, f32)> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, false);
        let out = self.arch.forward(&mut tape, &p, image, noise)?;
        let (n, r) = (self.cfg().num_slots, self.cfg().resolution);
        Ok((
            SlotRecon {
                recon: tape.value(out.decode.recon).clone().reshaped(&[3, r, r])?,
                rgb: tape.value(out.decode.rgb).clone().reshaped(&[n, 3, r, r])?,
                alpha: tape.value(out.decode.alpha).clone().reshaped(&[n, r, r])?,
            },
            tape.scalar(out.loss),
        ))
    }
}
