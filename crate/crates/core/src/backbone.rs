//! Patch-transformer backbone: patch embedding with CLS token and learned
//! positions, pre-norm attention/FFN layers, and the final LayerNorm whose
//! CLS row is the instance feature used everywhere else.

use crate::autodiff::{Tape, Value};
use crate::error::{CoreError, Result};
use crate::params::{BackboneParams, LayerParams};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// 0 means "size the classifier from the training split".
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_h: 32,
            image_w: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            num_classes: 0,
        }
    }
}

impl BackboneConfig {
    /// Everything except the classifier width, which stays open until the
    /// training split is known.
    pub fn validate_geometry(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(CoreError::Config(msg))
        };
        if self.patch_size == 0 || self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return fail(format!(
                "image {}x{} not divisible into {}px patches",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return fail("channels, embed_dim, and ffn_dim must be positive".into());
        }
        if self.num_patches() == 0 {
            return fail("image yields zero patches".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.num_classes == 0 {
            return Err(CoreError::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// N, the patch count.
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// N + 1 (patches plus CLS).
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch length, P^2 * C_in.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// One layer's token matrix with its position in the stack.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Value,
    pub layer_index: usize,
}

/// All intermediate token sequences of one image plus the instance feature.
/// `per_layer[i]` is Z_i, so the list has L+1 entries; `f_ins` is the
/// layer-normed CLS row of the last entry, shaped `[1, D]`.
#[derive(Debug, Clone)]
pub struct InstanceForward {
    pub per_layer: Vec<TokenSequence>,
    pub f_ins: Value,
}

/// Rearranges `[C, H, W]` pixels into `[N, P*P*C]` rows, patches in
/// row-major grid order, each patch flattened channel-major.
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let expect = vec![cfg.channels, cfg.image_h, cfg.image_w];
    if image.shape() != expect.as_slice() {
        return Err(CoreError::ShapeMismatch {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: expect,
        });
    }
    let p = cfg.patch_size;
    let (gh, gw) = (cfg.image_h / p, cfg.image_w / p);
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    let px_of = |c: usize, y: usize, x: usize| image.data()[(c * cfg.image_h + y) * cfg.image_w + x];
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..cfg.channels {
                for py in 0..p {
                    for px in 0..p {
                        out.push(px_of(c, gy * p + py, gx * p + px));
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Embeds an image to the layer-0 token sequence: linear patch projection,
/// CLS token prepended, learned position embeddings added.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<T>,
    image: &Tensor,
    embed: &crate::params::EmbedParams<Value>,
    cfg: &BackboneConfig,
) -> Result<Value> {
    let patches = patchify(image, cfg)?;
    let p = tape.constant(&patches.cast::<T>());
    let proj = tape.matmul(p, embed.patch_w)?;
    let proj = tape.add_row(proj, embed.patch_b)?;
    let tokens = tape.concat(0, &[embed.cls, proj])?;
    tape.add(tokens, embed.pos)
}

/// Multi-head attention with the layer's shared projection weights:
/// per head, `softmax(Q K^T / sqrt(d_k)) V`; heads concatenated and passed
/// through the output projection.
pub fn mha<T: Real>(
    tape: &mut Tape<T>,
    q_in: Value,
    k_in: Value,
    v_in: Value,
    lw: &LayerParams<Value>,
    num_heads: usize,
) -> Result<Value> {
    let kr = tape.shape(k_in)[0];
    let vr = tape.shape(v_in)[0];
    if kr != vr {
        return Err(CoreError::ShapeMismatch {
            op: "mha",
            lhs: tape.shape(k_in).to_vec(),
            rhs: tape.shape(v_in).to_vec(),
        });
    }
    let d = tape.shape(q_in)[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(CoreError::InvalidDimension {
            op: "mha",
            msg: format!("dim {d} not divisible into {num_heads} heads"),
        });
    }
    let dk = d / num_heads;
    let q = tape.matmul(q_in, lw.wq)?;
    let q = tape.add_row(q, lw.bq)?;
    let k = tape.matmul(k_in, lw.wk)?;
    let k = tape.add_row(k, lw.bk)?;
    let v = tape.matmul(v_in, lw.wv)?;
    let v = tape.add_row(v, lw.bv)?;
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice(q, 1, h * dk, dk)?;
        let kh = tape.slice(k, 1, h * dk, dk)?;
        let vh = tape.slice(v, 1, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let probs = tape.attention_softmax(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat(1, &heads)?;
    let out = tape.matmul(ctx, lw.wo)?;
    tape.add_row(out, lw.bo)
}

pub(crate) fn ffn<T: Real>(tape: &mut Tape<T>, x: Value, lw: &LayerParams<Value>) -> Result<Value> {
    let h = tape.matmul(x, lw.ffn_w1)?;
    let h = tape.add_row(h, lw.ffn_b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, lw.ffn_w2)?;
    tape.add_row(out, lw.ffn_b2)
}

/// Pre-norm transformer block:
/// `z' = z + MHA(LN(z)); out = z' + FFN(LN(z'))`.
pub fn instance_layer<T: Real>(
    tape: &mut Tape<T>,
    z: Value,
    lw: &LayerParams<Value>,
    num_heads: usize,
) -> Result<Value> {
    let n1 = tape.layer_norm(z, lw.ln1.gamma, lw.ln1.beta, LN_EPS)?;
    let att = mha(tape, n1, n1, n1, lw, num_heads)?;
    let z1 = tape.add(z, att)?;
    let n2 = tape.layer_norm(z1, lw.ln2.gamma, lw.ln2.beta, LN_EPS)?;
    let f = ffn(tape, n2, lw)?;
    tape.add(z1, f)
}

/// Runs the full instance stream, caching every layer's token sequence
/// (the X-stacks consume them as queries and keys) and extracting f_Ins.
pub fn forward_instance<T: Real>(
    tape: &mut Tape<T>,
    image: &Tensor,
    params: &BackboneParams<Value>,
    cfg: &BackboneConfig,
) -> Result<InstanceForward> {
    if params.layers.len() != cfg.num_layers {
        return Err(CoreError::Config(format!(
            "config says {} layers but params carry {}",
            cfg.num_layers,
            params.layers.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(cfg.num_layers + 1);
    let mut z = patch_embed(tape, image, &params.embed, cfg)?;
    per_layer.push(TokenSequence { tokens: z, layer_index: 0 });
    for (i, lw) in params.layers.iter().enumerate() {
        z = instance_layer(tape, z, lw, cfg.num_heads)?;
        per_layer.push(TokenSequence { tokens: z, layer_index: i + 1 });
    }
    let f_ins = extract_feature(tape, z, &params.final_ln)?;
    Ok(InstanceForward { per_layer, f_ins })
}

/// Final LayerNorm then CLS row: the `[1, D]` feature of a token matrix.
pub fn extract_feature<T: Real>(
    tape: &mut Tape<T>,
    tokens: Value,
    final_ln: &crate::params::LnParams<Value>,
) -> Result<Value> {
    let normed = tape.layer_norm(tokens, final_ln.gamma, final_ln.beta, LN_EPS)?;
    tape.slice_rows(normed, 0, 1)
}

/// Fresh master weights for a backbone of the given geometry.
pub fn init_params(cfg: &BackboneConfig, rng: &mut crate::rng::Rng) -> BackboneParams<Tensor> {
    use crate::params::{EmbedParams, LnParams};
    BackboneParams {
        embed: EmbedParams::init(cfg.patch_dim(), cfg.embed_dim, cfg.tokens(), rng),
        layers: (0..cfg.num_layers)
            .map(|_| LayerParams::init(cfg.embed_dim, cfg.ffn_dim, rng))
            .collect(),
        final_ln: LnParams::init(cfg.embed_dim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ConstBinder, EmbedParams, LnParams};
    use crate::rng::Rng;
    use crate::testutil::{
        block_oracle, desk_cfg, init_backbone, mha_oracle, micro_cfg, random_image, to64,
    };

    #[test]
    fn config_invariants_enforced() {
        assert!(micro_cfg().validate().is_ok());
        let mut bad = micro_cfg();
        bad.patch_size = 3;
        assert!(bad.validate().is_err());
        let mut bad = micro_cfg();
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_embed_shapes() {
        // 8x8 image, P=8 -> N=1, two tokens
        let cfg = micro_cfg();
        assert_eq!(cfg.num_patches(), 1);
        let mut rng = Rng::seed_from_u64(0);
        let bb = init_backbone(&cfg, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = bb.bind(&mut tape, "backbone", &mut ConstBinder).unwrap();
        let img = random_image(&cfg, &mut rng);
        let tokens = patch_embed(&mut tape, &img, &bound.embed, &cfg).unwrap();
        assert_eq!(tape.shape(tokens), &[2, 8]);

        // desk scale: 32x16, P=8 -> N=8, nine tokens
        let cfg = desk_cfg();
        assert_eq!(cfg.num_patches(), 8);
        let bb = init_backbone(&cfg, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = bb.bind(&mut tape, "backbone", &mut ConstBinder).unwrap();
        let img = random_image(&cfg, &mut rng);
        let tokens = patch_embed(&mut tape, &img, &bound.embed, &cfg).unwrap();
        assert_eq!(tape.shape(tokens), &[9, 64]);
    }

    #[test]
    fn zero_image_zero_embeddings_leaves_cls_param() {
        let cfg = micro_cfg();
        let mut rng = Rng::seed_from_u64(1);
        let mut bb = init_backbone(&cfg, &mut rng);
        bb.embed.pos = Tensor::zeros(vec![cfg.tokens(), cfg.embed_dim]);
        bb.embed.patch_b = Tensor::zeros(vec![cfg.embed_dim]);
        let mut tape = Tape::<f32>::new();
        let bound = bb.bind(&mut tape, "backbone", &mut ConstBinder).unwrap();
        let img = Tensor::zeros(vec![1, 8, 8]);
        let tokens = patch_embed(&mut tape, &img, &bound.embed, &cfg).unwrap();
        let v = tape.value(tokens);
        assert_eq!(v.row(0), bb.embed.cls.data());
        assert!(v.row(1).iter().all(|&x| x == 0.0));
    }

    /// Identity projections, one head: a single-token attention must pass
    /// the value row straight through.
    #[test]
    fn mha_single_token_passthrough() {
        let d = 4;
        let mut tape = Tape::<f32>::new();
        let eye = Tensor::eye(d);
        let zeros = Tensor::zeros(vec![d]);
        let lw = LayerParams {
            ln1: LnParams::init(d),
            wq: eye.clone(),
            bq: zeros.clone(),
            wk: eye.clone(),
            bk: zeros.clone(),
            wv: eye.clone(),
            bv: zeros.clone(),
            wo: eye.clone(),
            bo: zeros.clone(),
            ln2: LnParams::init(d),
            ffn_w1: Tensor::zeros(vec![d, d]),
            ffn_b1: Tensor::zeros(vec![d]),
            ffn_w2: Tensor::zeros(vec![d, d]),
            ffn_b2: Tensor::zeros(vec![d]),
        };
        let bound = lw.bind(&mut tape, "t", &mut ConstBinder).unwrap();
        let q = tape.constant(&Tensor::from_vec(vec![1, d], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let v = tape.constant(&Tensor::from_vec(vec![1, d], vec![7.0, -2.0, 0.1, 3.0]).unwrap());
        let out = mha(&mut tape, q, v, v, &bound, 1).unwrap();
        for (o, e) in tape.data(out).iter().zip([7.0, -2.0, 0.1, 3.0]) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn mha_key_value_row_mismatch_is_error() {
        let cfg = micro_cfg();
        let mut rng = Rng::seed_from_u64(3);
        let layer = LayerParams::init(cfg.embed_dim, cfg.ffn_dim, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = layer.bind(&mut tape, "t", &mut ConstBinder).unwrap();
        let q = tape.constant(&Tensor::zeros(vec![2, 8]));
        let k = tape.constant(&Tensor::zeros(vec![3, 8]));
        let v = tape.constant(&Tensor::zeros(vec![4, 8]));
        assert!(mha(&mut tape, q, k, v, &bound, 2).is_err());
    }

    #[test]
    fn mha_matches_per_head_oracle() {
        let d = 8;
        let heads = 2;
        let mut rng = Rng::seed_from_u64(9);
        let lw = LayerParams::init(d, 16, &mut rng);
        let q_data: Vec<f32> = (0..3 * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let kv_data: Vec<f32> = (0..5 * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut tape = Tape::<f32>::new();
        let bound = lw.bind(&mut tape, "t", &mut ConstBinder).unwrap();
        let q = tape.constant(&Tensor::from_vec(vec![3, d], q_data.clone()).unwrap());
        let kv = tape.constant(&Tensor::from_vec(vec![5, d], kv_data.clone()).unwrap());
        let out = mha(&mut tape, q, kv, kv, &bound, heads).unwrap();
        let (q64, kv64) = (to64(&q_data), to64(&kv_data));
        let expect = mha_oracle(&q64, 3, &kv64, &kv64, 5, d, heads, &lw);
        for (o, e) in tape.data(out).iter().zip(expect) {
            assert!((*o as f64 - e).abs() < 1e-5, "{o} vs {e}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_across_random_inputs() {
        let cfg = micro_cfg();
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..20 {
            let layer = LayerParams::init(cfg.embed_dim, cfg.ffn_dim, &mut rng);
            let mut tape = Tape::<f32>::new();
            let bound = layer.bind(&mut tape, "t", &mut ConstBinder).unwrap();
            let data: Vec<f32> = (0..6 * cfg.embed_dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let z = tape.constant(&Tensor::from_vec(vec![6, cfg.embed_dim], data).unwrap());
            instance_layer(&mut tape, z, &bound, cfg.num_heads).unwrap();
            for &probs in tape.attention_probs() {
                let t = tape.value(probs);
                for r in 0..t.shape()[0] {
                    let sum: f64 = t.row(r).iter().map(|&x| x as f64).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    /// Zero attention and FFN weights reduce the block to the identity.
    #[test]
    fn zero_weight_layer_is_residual_identity() {
        let d = 8;
        let mut tape = Tape::<f32>::new();
        let lw = LayerParams {
            ln1: LnParams::init(d),
            wq: Tensor::zeros(vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            wk: Tensor::zeros(vec![d, d]),
            bk: Tensor::zeros(vec![d]),
            wv: Tensor::zeros(vec![d, d]),
            bv: Tensor::zeros(vec![d]),
            wo: Tensor::zeros(vec![d, d]),
            bo: Tensor::zeros(vec![d]),
            ln2: LnParams::init(d),
            ffn_w1: Tensor::zeros(vec![d, 16]),
            ffn_b1: Tensor::zeros(vec![16]),
            ffn_w2: Tensor::zeros(vec![16, d]),
            ffn_b2: Tensor::zeros(vec![d]),
        };
        let bound = lw.bind(&mut tape, "t", &mut ConstBinder).unwrap();
        let mut rng = Rng::seed_from_u64(6);
        let data: Vec<f32> = (0..3 * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let z = tape.constant(&Tensor::from_vec(vec![3, d], data.clone()).unwrap());
        let out = instance_layer(&mut tape, z, &bound, 2).unwrap();
        assert_eq!(tape.data(out), &data[..]);
    }

    /// Step-by-step f64 oracle for one full pre-norm block at D=4, h=1.
    #[test]
    fn instance_layer_matches_step_oracle() {
        let d = 4;
        let mut rng = Rng::seed_from_u64(11);
        let lw = LayerParams::init(d, 8, &mut rng);
        let z_data: Vec<f32> = (0..2 * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let expect = block_oracle(&to64(&z_data), 2, d, 1, &lw, None);

        let mut tape = Tape::<f32>::new();
        let bound = lw.bind(&mut tape, "t", &mut ConstBinder).unwrap();
        let z = tape.constant(&Tensor::from_vec(vec![2, d], z_data).unwrap());
        let out = instance_layer(&mut tape, z, &bound, 1).unwrap();
        for (o, e) in tape.data(out).iter().zip(expect) {
            assert!((*o as f64 - e).abs() < 1e-5, "{o} vs {e}");
        }
    }

    #[test]
    fn forward_instance_depth_zero_and_bookkeeping() {
        let mut cfg = micro_cfg();
        cfg.num_layers = 0;
        let mut rng = Rng::seed_from_u64(12);
        let bb = BackboneParams {
            embed: EmbedParams::init(cfg.patch_dim(), cfg.embed_dim, cfg.tokens(), &mut rng),
            layers: vec![],
            final_ln: LnParams::init(cfg.embed_dim),
        };
        let img = random_image(&cfg, &mut rng);
        let mut tape = Tape::<f32>::new();
        let bound = bb.bind(&mut tape, "backbone", &mut ConstBinder).unwrap();
        let fwd = forward_instance(&mut tape, &img, &bound, &cfg).unwrap();
        assert_eq!(fwd.per_layer.len(), 1);
        assert_eq!(fwd.per_layer[0].layer_index, 0);
        // f_ins must equal layer_norm(Z_0) row 0
        let z0 = fwd.per_layer[0].tokens;
        let normed = tape
            .layer_norm(z0, bound.final_ln.gamma, bound.final_ln.beta, LN_EPS)
            .unwrap();
        let expect = tape.value(normed);
        assert_eq!(tape.data(fwd.f_ins), expect.row(0));
    }

    #[test]
    fn forward_instance_is_deterministic() {
        let cfg = desk_cfg();
        let mut rng = Rng::seed_from_u64(13);
        let bb = init_backbone(&cfg, &mut rng);
        let img = random_image(&cfg, &mut rng);
        let run = || {
            let mut tape = Tape::<f32>::new();
            let bound = bb.bind(&mut tape, "backbone", &mut ConstBinder).unwrap();
            let fwd = forward_instance(&mut tape, &img, &bound, &cfg).unwrap();
            assert_eq!(fwd.per_layer.len(), cfg.num_layers + 1);
            for (i, ts) in fwd.per_layer.iter().enumerate() {
                assert_eq!(ts.layer_index, i);
            }
            tape.data(fwd.f_ins).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
