//! Transformer-style context encoder over the deepest backbone tap.
//!
//! The feature map is cut into `P x P` patches, linearly embedded, offset by
//! learned position embeddings, and prefixed with a trainable quality token.
//! One multi-head attention block follows; the encoded quality token is then
//! mapped to the context vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TAP_STRIDES;
use crate::error::{config, Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{lecun_normal, normal, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Patch side on the deepest feature map.
    #[serde(rename = "P")]
    pub patch: usize,
    /// Embedding width.
    #[serde(rename = "D")]
    pub dim: usize,
    /// Per-head width; the head count is `D / D_h`.
    #[serde(rename = "D_h")]
    pub head_dim: usize,
    /// Hidden width of the first perceptron.
    pub mlp_hidden: usize,
    /// Width of the context vector.
    pub context_dim: usize,
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        Self {
            patch: 1,
            dim: 32,
            head_dim: 16,
            mlp_hidden: 32,
            context_dim: 32,
        }
    }

    pub fn full() -> Self {
        Self {
            patch: 1,
            dim: 224,
            head_dim: 32,
            mlp_hidden: 224,
            context_dim: 32,
        }
    }

    pub fn heads(&self) -> usize {
        self.dim / self.head_dim
    }

    /// Patch count `N` for a square input of side `input_size`.
    pub fn patch_count(&self, input_size: usize) -> Result<usize> {
        let stride = TAP_STRIDES[3];
        let block = stride * self.patch;
        if self.patch == 0 || !input_size.is_multiple_of(block) {
            return config(format!(
                "input side {input_size} is not divisible by {stride} x P = {block}"
            ));
        }
        let side = input_size / block;
        Ok(side * side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 || self.head_dim == 0 {
            return config("P, D and D_h must be positive");
        }
        if !self.dim.is_multiple_of(self.head_dim) {
            return config(format!(
                "D = {} is not divisible by D_h = {}",
                self.dim, self.head_dim
            ));
        }
        if self.mlp_hidden == 0 || self.context_dim == 0 {
            return config("encoder perceptron widths must be positive");
        }
        Ok(())
    }
}

/// Handles to the encoder's trainable tensors.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// `[P^2 C, D]`.
    pub w_pe: ParamId,
    /// `[N, D]`.
    pub position: ParamId,
    /// `[1, D]`.
    pub quality_token: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    /// `[D, 3D]`; head `h` owns columns `3 D_h h .. 3 D_h (h + 1)` as Q|K|V.
    pub w_sa: ParamId,
    /// `[D, D]`.
    pub w_ma: ParamId,
    pub b_ma: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp1_w1: ParamId,
    pub mlp1_b1: ParamId,
    pub mlp1_w2: ParamId,
    pub mlp1_b2: ParamId,
    pub mlp2_w: ParamId,
    pub mlp2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    cfg: EncoderConfig,
    channels: usize,
    /// Side of the expected deepest feature map.
    side: usize,
    pub params: EncoderParams,
}

/// Attention block result with the per-head attention matrices.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub maps: Vec<Var>,
}

impl ContextEncoder {
    /// `channels` and `side` describe the deepest feature map; `input_size` is
    /// the image side used to derive the patch count.
    pub fn new(
        cfg: &EncoderConfig,
        channels: usize,
        input_size: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.patch_count(input_size)?;
        let side = input_size / TAP_STRIDES[3];
        let d = cfg.dim;
        let patch_len = cfg.patch * cfg.patch * channels;
        let g = ParamGroup::Other;
        let mut add = |name: &str, t: Tensor| store.add(format!("encoder.{name}"), g, t);
        let params = EncoderParams {
            w_pe: add(
                "patch_embed.weight",
                lecun_normal([patch_len, d], patch_len, rng),
            ),
            position: add("position", normal([n, d], 0.02, rng)),
            quality_token: add("quality_token", normal([1, d], 0.02, rng)),
            ln1_gamma: add("ln1.gamma", Tensor::filled([d], 1.0)),
            ln1_beta: add("ln1.beta", Tensor::zeros([d])),
            w_sa: add("attn.qkv", lecun_normal([d, 3 * d], d, rng)),
            w_ma: add("attn.proj.weight", lecun_normal([d, d], d, rng)),
            b_ma: add("attn.proj.bias", Tensor::zeros([d])),
            ln2_gamma: add("ln2.gamma", Tensor::filled([d], 1.0)),
            ln2_beta: add("ln2.beta", Tensor::zeros([d])),
            mlp1_w1: add("mlp1.fc1.weight", lecun_normal([d, cfg.mlp_hidden], d, rng)),
            mlp1_b1: add("mlp1.fc1.bias", Tensor::zeros([cfg.mlp_hidden])),
            mlp1_w2: add(
                "mlp1.fc2.weight",
                lecun_normal([cfg.mlp_hidden, d], cfg.mlp_hidden, rng),
            ),
            mlp1_b2: add("mlp1.fc2.bias", Tensor::zeros([d])),
            mlp2_w: add("mlp2.weight", lecun_normal([d, cfg.context_dim], d, rng)),
            mlp2_b: add("mlp2.bias", Tensor::zeros([cfg.context_dim])),
        };
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            side,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn patch_count(&self) -> usize {
        let s = self.side / self.cfg.patch;
        s * s
    }

    /// Embeds `fm4` into the `(N + 1) x D` token matrix.
    pub fn patch_embed(&self, tape: &mut Tape, store: &ParamStore, fm4: Var) -> Result<Var> {
        let (c, h, w) = tape.value(fm4).chw();
        let p = self.cfg.patch;
        if c != self.channels || h != self.side || w != self.side {
            return config(format!(
                "encoder expects a [{}, {s}, {s}] map, got [{c}, {h}, {w}]",
                self.channels,
                s = self.side
            ));
        }
        if h % p != 0 || w % p != 0 {
            return config(format!("map side {h}x{w} is not divisible by P = {p}"));
        }
        let (ph, pw) = (h / p, w / p);
        let n = ph * pw;
        let patch_len = p * p * c;
        let mut index = Vec::with_capacity(n * patch_len);
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            index.push(ch * h * w + (py * p + dy) * w + px * p + dx);
                        }
                    }
                }
            }
        }
        let patches = tape.gather(fm4, index, [n, patch_len]);
        let w_pe = tape.param(store, self.params.w_pe);
        let embedded = tape.matmul(patches, w_pe);
        let pos = tape.param(store, self.params.position);
        let embedded = tape.add(embedded, pos);
        let token = tape.param(store, self.params.quality_token);
        Ok(tape.concat(&[token, embedded], [n + 1, self.cfg.dim]))
    }

    /// Multi-head self-attention with residual and trailing normalization.
    pub fn attention_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<AttentionOutput> {
        let (rows, d) = tape.value(x).rc();
        if d != self.cfg.dim {
            return config(format!(
                "token width {d} does not match D = {}",
                self.cfg.dim
            ));
        }
        let p = &self.params;
        let dh = self.cfg.head_dim;
        let g1 = tape.param(store, p.ln1_gamma);
        let b1 = tape.param(store, p.ln1_beta);
        let normed = tape.layer_norm_rows(x, g1, b1);
        let w_sa = tape.param(store, p.w_sa);
        let qkv = tape.matmul(normed, w_sa);
        let mut heads = Vec::with_capacity(self.cfg.heads());
        let mut maps = Vec::with_capacity(self.cfg.heads());
        for h in 0..self.cfg.heads() {
            let base = 3 * dh * h;
            let q = tape.slice_cols(qkv, base, dh);
            let k = tape.slice_cols(qkv, base + dh, dh);
            let v = tape.slice_cols(qkv, base + 2 * dh, dh);
            let logits = tape.matmul_nt(q, k);
            let logits = tape.affine(logits, 1.0 / (dh as f64).sqrt(), 0.0);
            let a = tape.softmax_rows(logits);
            heads.push(tape.matmul(a, v));
            maps.push(a);
        }
        let merged = tape.concat_cols(&heads);
        let w_ma = tape.param(store, p.w_ma);
        let b_ma = tape.param(store, p.b_ma);
        let projected = tape.linear(merged, w_ma, b_ma);
        let residual = tape.add(projected, x);
        let g2 = tape.param(store, p.ln2_gamma);
        let b2 = tape.param(store, p.ln2_beta);
        let output = tape.layer_norm_rows(residual, g2, b2);
        if !tape.value(output).all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite attention output over {rows} tokens"
            )));
        }
        Ok(AttentionOutput { output, maps })
    }

    /// Row 0 through both perceptrons, giving `[1, context_dim]`.
    pub fn context_vector(&self, tape: &mut Tape, store: &ParamStore, encoded: Var) -> Var {
        let p = &self.params;
        let token = tape.slice_rows(encoded, 0, 1);
        let w1 = tape.param(store, p.mlp1_w1);
        let b1 = tape.param(store, p.mlp1_b1);
        let hidden = tape.linear(token, w1, b1);
        let hidden = tape.gelu(hidden);
        let w2 = tape.param(store, p.mlp1_w2);
        let b2 = tape.param(store, p.mlp1_b2);
        let refined = tape.linear(hidden, w2, b2);
        let w = tape.param(store, p.mlp2_w);
        let b = tape.param(store, p.mlp2_b);
        tape.linear(refined, w, b)
    }

    /// `fm4` to context vector.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, fm4: Var) -> Result<Var> {
        let x = self.patch_embed(tape, store, fm4)?;
        let encoded = self.attention_block(tape, store, x)?.output;
        Ok(self.context_vector(tape, store, encoded))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    fn encoder(cfg: &EncoderConfig, channels: usize, input: usize) -> (ContextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ContextEncoder::new(cfg, channels, input, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn full_size_token_matrix() {
        let cfg = EncoderConfig::full();
        assert_eq!(cfg.patch_count(224).unwrap(), 49);
        assert_eq!(cfg.heads(), 7);
        let (enc, store) = encoder(&cfg, 16, 224);
        let mut tape = Tape::new();
        let fm = tape.constant(random(&[16, 7, 7], 1));
        let x = enc.patch_embed(&mut tape, &store, fm).unwrap();
        assert_eq!(tape.shape(x), &[50, 224]);
        let v = enc.forward(&mut tape, &store, fm).unwrap();
        assert_eq!(tape.shape(v), &[1, 32]);
    }

    #[test]
    fn shape_pipeline_across_sizes() {
        for input in [32, 64, 96, 128] {
            let (enc, store) = encoder(&EncoderConfig::tiny(), 8, input);
            let s = input / 32;
            let mut tape = Tape::new();
            let fm = tape.constant(random(&[8, s, s], 2));
            let x = enc.patch_embed(&mut tape, &store, fm).unwrap();
            assert_eq!(tape.shape(x), &[s * s + 1, 32]);
            let out = enc.attention_block(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(out.output), tape.shape(x));
            let v = enc.context_vector(&mut tape, &store, out.output);
            assert_eq!(tape.shape(v), &[1, 32]);
        }
        let cfg = EncoderConfig {
            patch: 2,
            ..EncoderConfig::tiny()
        };
        assert_eq!(cfg.patch_count(128).unwrap(), 4);
        assert!(cfg.patch_count(96).is_err());
        let (enc, store) = encoder(&cfg, 3, 128);
        let mut tape = Tape::new();
        let fm = tape.constant(random(&[3, 4, 4], 3));
        let x = enc.patch_embed(&mut tape, &store, fm).unwrap();
        assert_eq!(tape.shape(x), &[5, 32]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::tiny();
        cfg.head_dim = 12;
        assert!(cfg.validate().is_err());
        cfg.head_dim = 0;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::tiny().patch_count(100).is_err());
        let (enc, store) = encoder(&EncoderConfig::tiny(), 8, 64);
        let mut tape = Tape::new();
        let fm = tape.constant(random(&[8, 3, 3], 2));
        assert!(enc.patch_embed(&mut tape, &store, fm).is_err());
    }

    #[test]
    fn quality_token_leads_and_zero_map_embeds_to_zero() {
        let (enc, mut store) = encoder(&EncoderConfig::tiny(), 8, 64);
        store.get_mut(enc.params.position).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let fm = tape.constant(Tensor::zeros([8, 2, 2]));
        let x = enc.patch_embed(&mut tape, &store, fm).unwrap();
        let xv = tape.value(x).data();
        assert_eq!(&xv[..32], store.get(enc.params.quality_token).data());
        assert!(xv[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (enc, store) = encoder(&EncoderConfig::tiny(), 8, 128);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[17, 32], 5).reshape([17, 32]));
        let out = enc.attention_block(&mut tape, &store, x).unwrap();
        assert_eq!(out.maps.len(), 2);
        for a in out.maps {
            for row in tape.value(a).data().chunks(17) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn permuting_patches_permutes_outputs() {
        let (enc, store) = encoder(&EncoderConfig::tiny(), 8, 128);
        let base = random(&[17, 32], 6);
        let perm = [0, 5, 3, 16, 1, 2, 9, 4, 8, 7, 6, 12, 11, 10, 15, 13, 14];
        let mut permuted = Tensor::zeros([17, 32]);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * 32..(dst + 1) * 32]
                .copy_from_slice(&base.data()[src * 32..(src + 1) * 32]);
        }
        let run = |t: Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(t);
            let out = enc.attention_block(&mut tape, &store, x).unwrap().output;
            tape.value(out).clone()
        };
        let a = run(base);
        let b = run(permuted);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..32 {
                let (u, v) = (a.data()[src * 32 + j], b.data()[dst * 32 + j]);
                assert!((u - v).abs() < 1e-12, "row {dst} col {j}");
            }
        }
    }

    #[test]
    fn zero_token_with_zero_biases_gives_zero_context() {
        let (enc, store) = encoder(&EncoderConfig::tiny(), 8, 64);
        let mut tape = Tape::new();
        let mut t = random(&[5, 32], 7);
        t.data_mut()[..32].fill(0.0);
        let encoded = tape.constant(t);
        let v = enc.context_vector(&mut tape, &store, encoded);
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic() {
        let (enc, store) = encoder(&EncoderConfig::tiny(), 8, 64);
        let go = || {
            let mut tape = Tape::new();
            let fm = tape.constant(random(&[8, 2, 2], 8));
            let v = enc.forward(&mut tape, &store, fm).unwrap();
            tape.value(v).clone()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // N = 4, D = 8, D_h = 4
        let cfg = EncoderConfig {
            patch: 1,
            dim: 8,
            head_dim: 4,
            mlp_hidden: 8,
            context_dim: 5,
        };
        let (enc, store) = encoder(&cfg, 3, 64);
        let fm = random(&[3, 2, 2], 9);
        let build = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.constant(fm.clone());
            enc.forward(tape, s, x).unwrap()
        };
        let ids: Vec<_> = store.ids().collect();
        let err = crate::testutil::param_fd_error(&store, &ids, build, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }
}
