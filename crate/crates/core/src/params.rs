//! Parameter trees for the backbone and the X-modules.
//!
//! Every structure is generic over its leaf type `P`, so one definition
//! serves three uses: `P = Tensor` for master weights (and for the frozen
//! EMA teacher, which is deliberately a *tensor* tree, not a trainable one),
//! `P = ParamGroup` for optimizer state, and `P = Value` once bound onto a
//! tape. Field visitation is explicit rather than reflective; the visit
//! order is fixed by the source and shared by initialization, binding, EMA
//! updates, and checkpointing, which is what keeps runs reproducible.

use crate::autodiff::{Tape, Value};
use crate::error::{CoreError, Result};
use crate::optim::ParamGroup;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct LnParams<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Debug, Clone)]
pub struct LayerParams<P> {
    pub ln1: LnParams<P>,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub ln2: LnParams<P>,
    pub ffn_w1: P,
    pub ffn_b1: P,
    pub ffn_w2: P,
    pub ffn_b2: P,
}

#[derive(Debug, Clone)]
pub struct EmbedParams<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls: P,
    pub pos: P,
}

#[derive(Debug, Clone)]
pub struct ClassifierParams<P> {
    pub w: P,
    pub b: P,
}

/// Patch embedding, L transformer layers, and the final LayerNorm that
/// produces the instance feature.
#[derive(Debug, Clone)]
pub struct BackboneParams<P> {
    pub embed: EmbedParams<P>,
    pub layers: Vec<LayerParams<P>>,
    pub final_ln: LnParams<P>,
}

/// An X-module (IntraX teacher or InterX): per-layer weights mirroring the
/// backbone layers plus a final LayerNorm. No embedding of its own; X-stacks
/// consume the instance stream's tokens.
#[derive(Debug, Clone)]
pub struct XParams<P> {
    pub layers: Vec<LayerParams<P>>,
    pub final_ln: LnParams<P>,
}

impl<P> LnParams<P> {
    pub fn for_each(&self, f: &mut impl FnMut(&str, &P)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }

    pub fn try_map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<LnParams<Q>> {
        Ok(LnParams {
            gamma: f("gamma", &self.gamma)?,
            beta: f("beta", &self.beta)?,
        })
    }

    pub fn zip_mut<B>(&mut self, other: &LnParams<B>, f: &mut impl FnMut(&mut P, &B)) {
        f(&mut self.gamma, &other.gamma);
        f(&mut self.beta, &other.beta);
    }
}

impl<P> LayerParams<P> {
    pub fn for_each(&self, f: &mut impl FnMut(&str, &P)) {
        self.ln1.for_each(&mut |n, p| f(&format!("ln1.{n}"), p));
        f("wq", &self.wq);
        f("bq", &self.bq);
        f("wk", &self.wk);
        f("bk", &self.bk);
        f("wv", &self.wv);
        f("bv", &self.bv);
        f("wo", &self.wo);
        f("bo", &self.bo);
        self.ln2.for_each(&mut |n, p| f(&format!("ln2.{n}"), p));
        f("ffn_w1", &self.ffn_w1);
        f("ffn_b1", &self.ffn_b1);
        f("ffn_w2", &self.ffn_w2);
        f("ffn_b2", &self.ffn_b2);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        self.ln1.for_each_mut(&mut |n, p| f(&format!("ln1.{n}"), p));
        f("wq", &mut self.wq);
        f("bq", &mut self.bq);
        f("wk", &mut self.wk);
        f("bk", &mut self.bk);
        f("wv", &mut self.wv);
        f("bv", &mut self.bv);
        f("wo", &mut self.wo);
        f("bo", &mut self.bo);
        self.ln2.for_each_mut(&mut |n, p| f(&format!("ln2.{n}"), p));
        f("ffn_w1", &mut self.ffn_w1);
        f("ffn_b1", &mut self.ffn_b1);
        f("ffn_w2", &mut self.ffn_w2);
        f("ffn_b2", &mut self.ffn_b2);
    }

    pub fn try_map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<LayerParams<Q>> {
        Ok(LayerParams {
            ln1: self.ln1.try_map(&mut |n, p| f(&format!("ln1.{n}"), p))?,
            wq: f("wq", &self.wq)?,
            bq: f("bq", &self.bq)?,
            wk: f("wk", &self.wk)?,
            bk: f("bk", &self.bk)?,
            wv: f("wv", &self.wv)?,
            bv: f("bv", &self.bv)?,
            wo: f("wo", &self.wo)?,
            bo: f("bo", &self.bo)?,
            ln2: self.ln2.try_map(&mut |n, p| f(&format!("ln2.{n}"), p))?,
            ffn_w1: f("ffn_w1", &self.ffn_w1)?,
            ffn_b1: f("ffn_b1", &self.ffn_b1)?,
            ffn_w2: f("ffn_w2", &self.ffn_w2)?,
            ffn_b2: f("ffn_b2", &self.ffn_b2)?,
        })
    }

    pub fn zip_mut<B>(&mut self, other: &LayerParams<B>, f: &mut impl FnMut(&mut P, &B)) {
        self.ln1.zip_mut(&other.ln1, f);
        f(&mut self.wq, &other.wq);
        f(&mut self.bq, &other.bq);
        f(&mut self.wk, &other.wk);
        f(&mut self.bk, &other.bk);
        f(&mut self.wv, &other.wv);
        f(&mut self.bv, &other.bv);
        f(&mut self.wo, &other.wo);
        f(&mut self.bo, &other.bo);
        self.ln2.zip_mut(&other.ln2, f);
        f(&mut self.ffn_w1, &other.ffn_w1);
        f(&mut self.ffn_b1, &other.ffn_b1);
        f(&mut self.ffn_w2, &other.ffn_w2);
        f(&mut self.ffn_b2, &other.ffn_b2);
    }
}

impl<P> EmbedParams<P> {
    pub fn for_each(&self, f: &mut impl FnMut(&str, &P)) {
        f("patch_w", &self.patch_w);
        f("patch_b", &self.patch_b);
        f("cls", &self.cls);
        f("pos", &self.pos);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        f("patch_w", &mut self.patch_w);
        f("patch_b", &mut self.patch_b);
        f("cls", &mut self.cls);
        f("pos", &mut self.pos);
    }

    pub fn try_map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<EmbedParams<Q>> {
        Ok(EmbedParams {
            patch_w: f("patch_w", &self.patch_w)?,
            patch_b: f("patch_b", &self.patch_b)?,
            cls: f("cls", &self.cls)?,
            pos: f("pos", &self.pos)?,
        })
    }
}

impl<P> ClassifierParams<P> {
    pub fn for_each(&self, f: &mut impl FnMut(&str, &P)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }

    pub fn try_map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<ClassifierParams<Q>> {
        Ok(ClassifierParams {
            w: f("w", &self.w)?,
            b: f("b", &self.b)?,
        })
    }
}

fn layer_name(i: usize, field: &str) -> String {
    format!("layer{i:02}.{field}")
}

impl<P> BackboneParams<P> {
    pub fn for_each(&self, f: &mut impl FnMut(&str, &P)) {
        self.embed.for_each(&mut |n, p| f(&format!("embed.{n}"), p));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(&mut |n, p| f(&layer_name(i, n), p));
        }
        self.final_ln.for_each(&mut |n, p| f(&format!("final_ln.{n}"), p));
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        self.embed.for_each_mut(&mut |n, p| f(&format!("embed.{n}"), p));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&mut |n, p| f(&layer_name(i, n), p));
        }
        self.final_ln.for_each_mut(&mut |n, p| f(&format!("final_ln.{n}"), p));
    }

    pub fn try_map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<BackboneParams<Q>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let embed = self.embed.try_map(&mut |n, p| f(&format!("embed.{n}"), p))?;
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.try_map(&mut |n, p| f(&layer_name(i, n), p))?);
        }
        let final_ln = self.final_ln.try_map(&mut |n, p| f(&format!("final_ln.{n}"), p))?;
        Ok(BackboneParams { embed, layers, final_ln })
    }
}

impl<P> XParams<P> {
    pub fn for_each(&self, f: &mut impl FnMut(&str, &P)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(&mut |n, p| f(&layer_name(i, n), p));
        }
        self.final_ln.for_each(&mut |n, p| f(&format!("final_ln.{n}"), p));
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&mut |n, p| f(&layer_name(i, n), p));
        }
        self.final_ln.for_each_mut(&mut |n, p| f(&format!("final_ln.{n}"), p));
    }

    pub fn try_map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<XParams<Q>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.try_map(&mut |n, p| f(&layer_name(i, n), p))?);
        }
        let final_ln = self.final_ln.try_map(&mut |n, p| f(&format!("final_ln.{n}"), p))?;
        Ok(XParams { layers, final_ln })
    }

}

impl XParams<Tensor> {
    pub fn init(d: usize, ffn_dim: usize, num_layers: usize, rng: &mut Rng) -> Self {
        XParams {
            layers: (0..num_layers)
                .map(|_| LayerParams::init(d, ffn_dim, rng))
                .collect(),
            final_ln: LnParams::init(d),
        }
    }

    /// Clones the backbone's layer weights and final LayerNorm; how both the
    /// EMA teacher and (by default) the InterX layers start out.
    pub fn from_backbone<B: AsRef<Tensor>>(bb: &BackboneParams<B>) -> Self {
        fn cloned<B: AsRef<Tensor>>(_: &str, p: &B) -> Result<Tensor> {
            Ok(p.as_ref().clone())
        }
        XParams {
            layers: bb
                .layers
                .iter()
                .map(|l| l.try_map(&mut cloned).expect("clone cannot fail"))
                .collect(),
            final_ln: bb.final_ln.try_map(&mut cloned).expect("clone cannot fail"),
        }
    }

    /// `self <- lambda self + (1 - lambda) student`, elementwise over every
    /// leaf; the EMA teacher update against the backbone's layer stack.
    pub fn blend_from_backbone<B: AsRef<Tensor>>(
        &mut self,
        student: &BackboneParams<B>,
        lambda: f32,
    ) -> Result<()> {
        if self.layers.len() != student.layers.len() {
            return Err(CoreError::ShapeMismatch {
                op: "ema_update",
                lhs: vec![self.layers.len()],
                rhs: vec![student.layers.len()],
            });
        }
        let mut err = None;
        let mut blend = |a: &mut Tensor, b: &B| {
            let b = b.as_ref();
            if a.shape() != b.shape() {
                err.get_or_insert(CoreError::ShapeMismatch {
                    op: "ema_update",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
                return;
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = lambda * *x + (1.0 - lambda) * *y;
            }
        };
        for (t, s) in self.layers.iter_mut().zip(&student.layers) {
            t.zip_mut(s, &mut blend);
        }
        self.final_ln.zip_mut(&student.final_ln, &mut blend);
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ── Initialization ──────────────────────────────────────────────────────

impl LnParams<Tensor> {
    pub fn init(d: usize) -> Self {
        LnParams {
            gamma: Tensor::ones(vec![d]),
            beta: Tensor::zeros(vec![d]),
        }
    }
}

impl LayerParams<Tensor> {
    /// Truncated-normal projections, zero biases, identity LayerNorms.
    pub fn init(d: usize, ffn_dim: usize, rng: &mut Rng) -> Self {
        LayerParams {
            ln1: LnParams::init(d),
            wq: rng.trunc_normal_tensor(vec![d, d], INIT_STD),
            bq: Tensor::zeros(vec![d]),
            wk: rng.trunc_normal_tensor(vec![d, d], INIT_STD),
            bk: Tensor::zeros(vec![d]),
            wv: rng.trunc_normal_tensor(vec![d, d], INIT_STD),
            bv: Tensor::zeros(vec![d]),
            wo: rng.trunc_normal_tensor(vec![d, d], INIT_STD),
            bo: Tensor::zeros(vec![d]),
            ln2: LnParams::init(d),
            ffn_w1: rng.trunc_normal_tensor(vec![d, ffn_dim], INIT_STD),
            ffn_b1: Tensor::zeros(vec![ffn_dim]),
            ffn_w2: rng.trunc_normal_tensor(vec![ffn_dim, d], INIT_STD),
            ffn_b2: Tensor::zeros(vec![d]),
        }
    }
}

impl EmbedParams<Tensor> {
    pub fn init(patch_dim: usize, d: usize, tokens: usize, rng: &mut Rng) -> Self {
        EmbedParams {
            patch_w: rng.trunc_normal_tensor(vec![patch_dim, d], INIT_STD),
            patch_b: Tensor::zeros(vec![d]),
            cls: rng.trunc_normal_tensor(vec![1, d], INIT_STD),
            pos: rng.trunc_normal_tensor(vec![tokens, d], INIT_STD),
        }
    }
}

impl ClassifierParams<Tensor> {
    pub fn init(d: usize, classes: usize, rng: &mut Rng) -> Self {
        ClassifierParams {
            w: rng.trunc_normal_tensor(vec![d, classes], INIT_STD),
            b: Tensor::zeros(vec![classes]),
        }
    }
}

// ── Tape binding ────────────────────────────────────────────────────────

/// Strategy for putting master weights onto a tape. Training binds named
/// gradient-tracked leaves; teacher passes bind constants; the gradient
/// checker splices perturbed coordinates in place of selected groups.
pub trait Binder<T: Real> {
    fn bind(&mut self, tape: &mut Tape<T>, name: &str, master: &Tensor) -> Result<Value>;
}

/// Named, gradient-tracked leaves: the normal training path.
pub struct TrainBinder;

impl<T: Real> Binder<T> for TrainBinder {
    fn bind(&mut self, tape: &mut Tape<T>, name: &str, master: &Tensor) -> Result<Value> {
        Ok(tape.param(name, &master.cast::<T>()))
    }
}

/// Gradient-free constants (teacher weights, frozen evaluation).
pub struct ConstBinder;

impl<T: Real> Binder<T> for ConstBinder {
    fn bind(&mut self, tape: &mut Tape<T>, _name: &str, master: &Tensor) -> Result<Value> {
        Ok(tape.constant(&master.cast::<T>()))
    }
}

/// Replaces selected parameter groups with slices of one flat coordinate
/// vector already on the tape; everything else binds as a constant. Drives
/// finite-difference checking of whole-model losses.
pub struct SpliceBinder<'a> {
    pub offsets: &'a std::collections::BTreeMap<String, (usize, usize)>,
    pub x: Value,
}

impl<T: Real> Binder<T> for SpliceBinder<'_> {
    fn bind(&mut self, tape: &mut Tape<T>, name: &str, master: &Tensor) -> Result<Value> {
        match self.offsets.get(name) {
            Some(&(start, len)) => {
                debug_assert_eq!(len, master.numel());
                let flat = tape.slice(self.x, 0, start, len)?;
                tape.reshape(flat, master.shape().to_vec())
            }
            None => Ok(tape.constant(&master.cast::<T>())),
        }
    }
}

fn bind_with<T: Real>(
    binder: &mut dyn Binder<T>,
    tape: &mut Tape<T>,
    prefix: &str,
    name: &str,
    master: &Tensor,
) -> Result<Value> {
    binder.bind(tape, &format!("{prefix}.{name}"), master)
}

impl<P: AsRef<Tensor>> LayerParams<P> {
    pub fn bind<T: Real>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        binder: &mut dyn Binder<T>,
    ) -> Result<LayerParams<Value>> {
        self.try_map(&mut |n, p| bind_with(binder, tape, prefix, n, p.as_ref()))
    }
}

impl<P: AsRef<Tensor>> BackboneParams<P> {
    pub fn bind<T: Real>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        binder: &mut dyn Binder<T>,
    ) -> Result<BackboneParams<Value>> {
        self.try_map(&mut |n, p| bind_with(binder, tape, prefix, n, p.as_ref()))
    }
}

impl<P: AsRef<Tensor>> XParams<P> {
    pub fn bind<T: Real>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        binder: &mut dyn Binder<T>,
    ) -> Result<XParams<Value>> {
        self.try_map(&mut |n, p| bind_with(binder, tape, prefix, n, p.as_ref()))
    }
}

impl<P: AsRef<Tensor>> ClassifierParams<P> {
    pub fn bind<T: Real>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        binder: &mut dyn Binder<T>,
    ) -> Result<ClassifierParams<Value>> {
        self.try_map(&mut |n, p| bind_with(binder, tape, prefix, n, p.as_ref()))
    }
}

// ── Leaf access shared by Tensor and ParamGroup trees ───────────────────

impl AsRef<Tensor> for ParamGroup {
    fn as_ref(&self) -> &Tensor {
        &self.value
    }
}

/// Total element count across a layer's leaves.
pub fn layer_param_count<P>(layer: &LayerParams<P>, numel: impl Fn(&P) -> usize) -> usize {
    let mut total = 0;
    layer.for_each(&mut |_, p| total += numel(p));
    total
}
