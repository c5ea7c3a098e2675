//! One optimization step over a P x K batch and the loop around it:
//! instance forwards, gradient-isolated EMA-teacher targets, hard-fusion
//! passes, loss assembly, backward, SGD with cosine learning rate, and the
//! per-step EMA teacher update. Also owns checkpoint serialization and the
//! whole-model finite-difference harness.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use crate::autodiff::{Tape, Value};
use crate::backbone::{self, forward_instance, BackboneConfig, InstanceForward, TokenSequence};
use crate::container::TensorContainer;
use crate::data::{pk_sample, Batch, LabeledImage};
use crate::error::{CoreError, Result};
use crate::gradcheck::{self, FdConfig};
use crate::loss::{
    assemble_total, batch_hard_mine, id_loss, intrax_loss, softmax_distribution, triplet_loss,
    xtriplet_loss, LossBreakdown, TripletSelection,
};
use crate::metrics::{calinski_harabasz, compactness, retrieval_eval, EmbeddingSet, MetricsReport, Role};
use crate::optim::{ParamGroup, Sgd};
use crate::params::{
    Binder, ClassifierParams, ConstBinder, SpliceBinder, TrainBinder, XParams,
};
use crate::params::BackboneParams;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::xattn::{build_interx_keys, build_intrax_keys, run_x_stack, KeyBundle};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub num_ids_per_batch: usize,
    pub instances_per_id: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the intra-identity distillation term.
    pub lambda1: f64,
    /// Weight of the inter-identity fusion term.
    pub lambda2: f64,
    /// Distillation temperature.
    pub tau: f64,
    pub ema_base: f64,
    /// Whether the EMA teacher is maintained at all; required when
    /// `lambda1 > 0`, optional otherwise (the teacher-only ablation).
    pub ema_enabled: bool,
    /// Start the fusion layers as copies of the backbone layers instead of
    /// fresh truncated-normal weights.
    pub interx_copy_init: bool,
    pub label_smoothing: f64,
    /// L2-normalize features before every triplet distance (mining included).
    pub normalize_triplet: bool,
    /// Reuse the instance classifier for the fused features instead of the
    /// separate fusion classifier.
    pub share_classifier: bool,
    /// Stop the fused-triplet gradient at the positive/negative instance
    /// features so only the fusion path is trained by that term.
    pub detach_xtriplet_refs: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            num_ids_per_batch: 4,
            instances_per_id: 4,
            lr0: 0.008,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda1: 5.0,
            lambda2: 0.4,
            tau: 0.05,
            ema_base: 0.999,
            ema_enabled: true,
            interx_copy_init: true,
            label_smoothing: 0.0,
            normalize_triplet: false,
            share_classifier: false,
            detach_xtriplet_refs: false,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if self.batch_size != self.num_ids_per_batch * self.instances_per_id {
            return fail(format!(
                "batch_size {} != {} ids x {} instances",
                self.batch_size, self.num_ids_per_batch, self.instances_per_id
            ));
        }
        if self.instances_per_id < 2 || self.num_ids_per_batch < 2 {
            return fail("need at least 2 identities and 2 instances per identity".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(self.lr0 > 0.0) || !(self.tau > 0.0) {
            return fail("lr0 and tau must be positive".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return fail("loss weights must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must be in [0, 1) and weight_decay nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_base) {
            return fail(format!("ema_base {} outside [0, 1]", self.ema_base));
        }
        if self.lambda1 > 0.0 && !self.ema_enabled {
            return fail("distillation (lambda1 > 0) requires the EMA teacher".into());
        }
        Ok(())
    }
}

// ── Schedules ───────────────────────────────────────────────────────────

/// Teacher momentum `λ(t) = 1 - (1-base) (cos(πt/T)+1)/2`: starts at `base`,
/// rises monotonically to 1 at the final step.
pub fn ema_lambda(step: usize, total_steps: usize, base: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let t = step as f64 / total_steps as f64;
    1.0 - (1.0 - base) * ((PI * t).cos() + 1.0) / 2.0
}

/// Cosine decay `lr(t) = lr0 (cos(πt/T)+1)/2` from `lr0` to 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step as f64 / total_steps as f64;
    lr0 * ((PI * t).cos() + 1.0) / 2.0
}

// ── Model state ─────────────────────────────────────────────────────────

/// Every master weight of the system. The teacher is a plain tensor tree:
/// it can be blended but never handed to the optimizer, and the name audit
/// below relies on `trainable_*` enumerating only the other four trees.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub backbone: BackboneParams<ParamGroup>,
    pub teacher: XParams<Tensor>,
    pub interx: XParams<ParamGroup>,
    pub head_ins: ClassifierParams<ParamGroup>,
    pub head_interx: ClassifierParams<ParamGroup>,
}

impl ModelParams {
    pub fn init(bb: &BackboneConfig, seed: u64, interx_copy_init: bool) -> Result<Self> {
        bb.validate()?;
        let root = Rng::seed_from_u64(seed);
        let backbone_t = backbone::init_params(bb, &mut root.derive(0));
        let teacher = XParams::from_backbone(&backbone_t);
        let interx_t = if interx_copy_init {
            XParams::from_backbone(&backbone_t)
        } else {
            XParams::init(bb.embed_dim, bb.ffn_dim, bb.num_layers, &mut root.derive(1))
        };
        let head_ins_t = ClassifierParams::init(bb.embed_dim, bb.num_classes, &mut root.derive(2));
        let head_interx_t =
            ClassifierParams::init(bb.embed_dim, bb.num_classes, &mut root.derive(3));

        fn group(prefix: &'static str) -> impl FnMut(&str, &Tensor) -> Result<ParamGroup> {
            move |n, t| Ok(ParamGroup::new(format!("{prefix}.{n}"), t.clone()))
        }
        Ok(ModelParams {
            backbone: backbone_t.try_map(&mut group("backbone"))?,
            teacher,
            interx: interx_t.try_map(&mut group("interx"))?,
            head_ins: head_ins_t.try_map(&mut group("head_ins"))?,
            head_interx: head_interx_t.try_map(&mut group("head_interx"))?,
        })
    }

    /// `(qualified name, master weights)` of every optimizable group, in the
    /// fixed traversal order. The teacher tree is deliberately absent.
    pub fn trainable_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |_: &str, g: &ParamGroup| out.push((g.name.clone(), g.value.clone()));
        self.backbone.for_each(&mut push);
        self.interx.for_each(&mut push);
        self.head_ins.for_each(&mut push);
        self.head_interx.for_each(&mut push);
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable_tensors().into_iter().map(|(n, _)| n).collect()
    }

    fn for_each_tensor(&self, f: &mut impl FnMut(&str, &Tensor)) {
        self.backbone.for_each(&mut |_, g: &ParamGroup| f(&g.name, &g.value));
        self.teacher.for_each(&mut |n, t| f(&format!("teacher.{n}"), t));
        self.interx.for_each(&mut |_, g: &ParamGroup| f(&g.name, &g.value));
        self.head_ins.for_each(&mut |_, g: &ParamGroup| f(&g.name, &g.value));
        self.head_interx.for_each(&mut |_, g: &ParamGroup| f(&g.name, &g.value));
    }

    fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        self.backbone.for_each_mut(&mut |_, g: &mut ParamGroup| {
            let name = g.name.clone();
            f(&name, &mut g.value);
        });
        self.teacher.for_each_mut(&mut |n, t| f(&format!("teacher.{n}"), t));
        self.interx.for_each_mut(&mut |_, g: &mut ParamGroup| {
            let name = g.name.clone();
            f(&name, &mut g.value);
        });
        self.head_ins.for_each_mut(&mut |_, g: &mut ParamGroup| {
            let name = g.name.clone();
            f(&name, &mut g.value);
        });
        self.head_interx.for_each_mut(&mut |_, g: &mut ParamGroup| {
            let name = g.name.clone();
            f(&name, &mut g.value);
        });
    }
}

// ── Checkpointing ───────────────────────────────────────────────────────

const META_BACKBONE: &str = "meta.backbone";

fn config_to_meta(bb: &BackboneConfig) -> Tensor {
    let fields = [
        bb.image_h, bb.image_w, bb.patch_size, bb.channels, bb.embed_dim, bb.num_layers,
        bb.num_heads, bb.ffn_dim, bb.num_classes,
    ];
    Tensor::from_vec(vec![fields.len()], fields.iter().map(|&v| v as f32).collect())
        .expect("fixed-size meta vector")
}

fn config_from_meta(t: &Tensor) -> Result<BackboneConfig> {
    if t.numel() != 9 {
        return Err(CoreError::Container(format!(
            "checkpoint tensor {META_BACKBONE}: expected 9 fields, got {}",
            t.numel()
        )));
    }
    let d = t.data();
    let at = |i: usize| d[i] as usize;
    let cfg = BackboneConfig {
        image_h: at(0),
        image_w: at(1),
        patch_size: at(2),
        channels: at(3),
        embed_dim: at(4),
        num_layers: at(5),
        num_heads: at(6),
        ffn_dim: at(7),
        num_classes: at(8),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every master weight plus the backbone geometry into one container.
pub fn save_checkpoint(model: &ModelParams, bb: &BackboneConfig, path: &Path) -> Result<()> {
    let mut c = TensorContainer::new();
    c.insert(META_BACKBONE, config_to_meta(bb))?;
    let mut err = None;
    model.for_each_tensor(&mut |name, t| {
        if err.is_none() {
            if let Err(e) = c.insert(name, t.clone()) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => c.save(path),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, BackboneConfig)> {
    let c = TensorContainer::load(path)?;
    let bb = config_from_meta(c.require(META_BACKBONE)?)?;
    let mut model = ModelParams::init(&bb, 0, true)?;
    let mut err = None;
    model.for_each_tensor_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match c.require(name) {
            Ok(stored) if stored.shape() == t.shape() => *t = stored.clone(),
            Ok(stored) => {
                err = Some(CoreError::Container(format!(
                    "checkpoint tensor {name}: shape {:?}, model expects {:?}",
                    stored.shape(),
                    t.shape()
                )))
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((model, bb)),
    }
}

// ── The step objective ──────────────────────────────────────────────────

/// The masters bound onto one tape. Trees the configuration does not use
/// (fusion layers and their classifier when `lambda2 == 0`) are not bound
/// at all, so they are absent from the tape's parameter list and the
/// optimizer leaves them untouched.
pub struct BoundModel {
    pub backbone: BackboneParams<Value>,
    pub interx: Option<XParams<Value>>,
    pub head_ins: ClassifierParams<Value>,
    pub head_interx: Option<ClassifierParams<Value>>,
}

pub fn bind_model<T: Real>(
    tape: &mut Tape<T>,
    model: &ModelParams,
    cfg: &TrainConfig,
    binder: &mut dyn Binder<T>,
) -> Result<BoundModel> {
    let head_ins = model.head_ins.bind(tape, "head_ins", binder)?;
    let head_interx = if cfg.lambda2 == 0.0 {
        None
    } else if cfg.share_classifier {
        // both heads are the same tape nodes, so fused-feature gradients
        // accumulate into head_ins and the separate masters stay untouched
        Some(head_ins.clone())
    } else {
        Some(model.head_interx.bind(tape, "head_interx", binder)?)
    };
    Ok(BoundModel {
        backbone: model.backbone.bind(tape, "backbone", binder)?,
        interx: if cfg.lambda2 > 0.0 {
            Some(model.interx.bind(tape, "interx", binder)?)
        } else {
            None
        },
        head_ins,
        head_interx,
    })
}

/// Discrete choices and gradient-isolated targets of one step: the mined
/// triplets and the teacher's target distributions. Training derives a
/// fresh plan every step; the finite-difference harness replays one fixed
/// plan so the objective it probes is smooth.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub selections: Vec<TripletSelection>,
    pub teacher_targets: Vec<Vec<f64>>,
}

fn mean_scalars<T: Real>(tape: &mut Tape<T>, terms: &[Value]) -> Result<Value> {
    let stacked = tape.concat(0, terms)?;
    Ok(tape.mean(stacked))
}

/// Runs the teacher stack for every anchor on a scratch tape. Both the
/// teacher weights and the student token streams enter as constants, which
/// is the gradient isolation the distillation loss requires; only the
/// resulting f64 distributions leave this function.
fn teacher_targets<T: Real>(
    main: &Tape<T>,
    fwds: &[InstanceForward],
    teacher: &XParams<Tensor>,
    labels: &[usize],
    num_heads: usize,
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut scratch = Tape::<T>::new();
    let mirrored: Vec<InstanceForward> = fwds
        .iter()
        .map(|f| InstanceForward {
            per_layer: f
                .per_layer
                .iter()
                .map(|ts| TokenSequence {
                    tokens: scratch.constant(&main.value(ts.tokens)),
                    layer_index: ts.layer_index,
                })
                .collect(),
            f_ins: scratch.constant(&main.value(f.f_ins)),
        })
        .collect();
    let tx = teacher.bind(&mut scratch, "teacher", &mut ConstBinder)?;
    let depth = teacher.layers.len();
    let mut out = Vec::with_capacity(fwds.len());
    for a in 0..fwds.len() {
        let bundles: Vec<KeyBundle> = (0..depth)
            .map(|j| build_intrax_keys(&mut scratch, &mirrored, labels, a, j))
            .collect::<Result<_>>()?;
        let stack = run_x_stack(&mut scratch, &mirrored[a], &bundles, &tx, num_heads, depth)?;
        let feature: Vec<f64> = scratch.data(stack.f_x).iter().map(|v| v.as_f64()).collect();
        out.push(softmax_distribution(&feature, tau)?);
    }
    Ok(out)
}

/// Builds the full objective for one batch on the given tape and returns the
/// total-loss node, the f64 breakdown, and the plan that was used.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    teacher: &XParams<Tensor>,
    batch: &Batch,
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    frozen: Option<&StepPlan>,
) -> Result<(Value, LossBreakdown, StepPlan)> {
    let b = batch.labels.len();
    if b == 0 || b != batch.images.len() {
        return Err(CoreError::Batch(format!(
            "batch carries {b} labels for {} images",
            batch.images.len()
        )));
    }
    if let Some(plan) = frozen {
        if plan.selections.len() != b {
            return Err(CoreError::Batch(format!(
                "frozen plan has {} selections for a batch of {b}",
                plan.selections.len()
            )));
        }
    }

    let mut fwds = Vec::with_capacity(b);
    for img in &batch.images {
        fwds.push(forward_instance(tape, &img.pixels, &bound.backbone, bb)?);
    }
    let features: Vec<Value> = fwds.iter().map(|f| f.f_ins).collect();
    let f_all = tape.concat(0, &features)?;

    let l_id = id_loss(tape, f_all, &batch.labels, &bound.head_ins, cfg.label_smoothing)?;
    // the identity loss always sees raw features; the normalize flag only
    // changes the metric the triplet terms (and their mining) live in
    let tri_feats: Vec<Value> = if cfg.normalize_triplet {
        let mut scaled = Vec::with_capacity(b);
        for f in &features {
            scaled.push(l2_normalize(tape, *f)?);
        }
        scaled
    } else {
        features.clone()
    };
    let selections = match frozen {
        Some(plan) => plan.selections.clone(),
        None => {
            let mined = if cfg.normalize_triplet {
                let all = tape.concat(0, &tri_feats)?;
                tape.value(all)
            } else {
                tape.value(f_all)
            };
            batch_hard_mine(&mined, &batch.labels)?
        }
    };
    let mut tri_terms = Vec::with_capacity(b);
    for s in &selections {
        tri_terms.push(triplet_loss(
            tape,
            tri_feats[s.anchor_idx],
            tri_feats[s.pos_idx],
            tri_feats[s.neg_idx],
        )?);
    }
    let l_tri = mean_scalars(tape, &tri_terms)?;
    let l_ins = tape.add(l_id, l_tri)?;

    let (l_intrax, intrax_f64, targets) = if cfg.lambda1 > 0.0 {
        let targets = match frozen {
            Some(plan) => plan.teacher_targets.clone(),
            None => teacher_targets(tape, &fwds, teacher, &batch.labels, bb.num_heads, cfg.tau)?,
        };
        if targets.len() != b {
            return Err(CoreError::Batch(format!(
                "{} teacher targets for a batch of {b}",
                targets.len()
            )));
        }
        let mut terms = Vec::with_capacity(b);
        for (fwd, target) in fwds.iter().zip(&targets) {
            terms.push(intrax_loss(tape, target, fwd.f_ins, cfg.tau)?);
        }
        let v = mean_scalars(tape, &terms)?;
        (Some(v), tape.item(v).as_f64(), targets)
    } else {
        (None, 0.0, Vec::new())
    };

    let (l_interx, xid_f64, xtri_f64) = if cfg.lambda2 > 0.0 {
        let ix = bound.interx.as_ref().ok_or_else(|| {
            CoreError::Config("lambda2 > 0 but fusion layers were not bound".into())
        })?;
        let hx = bound.head_interx.as_ref().ok_or_else(|| {
            CoreError::Config("lambda2 > 0 but fusion classifier was not bound".into())
        })?;
        let depth = ix.layers.len();
        let mut fused = Vec::with_capacity(b);
        let mut xtri_terms = Vec::with_capacity(b);
        for s in &selections {
            let bundles: Vec<KeyBundle> = (0..depth)
                .map(|j| {
                    build_interx_keys(
                        tape,
                        &fwds,
                        &batch.labels,
                        s.anchor_idx,
                        s.pos_idx,
                        s.neg_idx,
                        j,
                    )
                })
                .collect::<Result<_>>()?;
            let stack = run_x_stack(tape, &fwds[s.anchor_idx], &bundles, ix, bb.num_heads, depth)?;
            let f_x = if cfg.normalize_triplet {
                l2_normalize(tape, stack.f_x)?
            } else {
                stack.f_x
            };
            let (p_ref, n_ref) = if cfg.detach_xtriplet_refs {
                (tape.detach(tri_feats[s.pos_idx]), tape.detach(tri_feats[s.neg_idx]))
            } else {
                (tri_feats[s.pos_idx], tri_feats[s.neg_idx])
            };
            xtri_terms.push(xtriplet_loss(tape, f_x, p_ref, n_ref)?);
            fused.push(stack.f_x);
        }
        let f_x_all = tape.concat(0, &fused)?;
        let l_xid = id_loss(tape, f_x_all, &batch.labels, hx, cfg.label_smoothing)?;
        let l_xtri = mean_scalars(tape, &xtri_terms)?;
        let both = tape.add(l_xid, l_xtri)?;
        (Some(both), tape.item(l_xid).as_f64(), tape.item(l_xtri).as_f64())
    } else {
        (None, 0.0, 0.0)
    };

    let total = assemble_total(tape, l_ins, l_intrax, l_interx, cfg.lambda1, cfg.lambda2)?;
    let breakdown = LossBreakdown::assemble(
        tape.item(l_id).as_f64(),
        tape.item(l_tri).as_f64(),
        intrax_f64,
        xid_f64,
        xtri_f64,
        cfg.lambda1,
        cfg.lambda2,
    );
    Ok((total, breakdown, StepPlan { selections, teacher_targets: targets }))
}

// ── One optimization step ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub lr: f64,
    pub ema_lambda: f64,
}

pub fn train_step(
    model: &mut ModelParams,
    batch: &Batch,
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    step: usize,
    total_steps: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::<f32>::new();
    let bound = bind_model(&mut tape, model, cfg, &mut TrainBinder)?;
    let (total, breakdown, _) = batch_loss(&mut tape, &bound, &model.teacher, batch, bb, cfg, None)?;
    if !breakdown.l_total.is_finite() {
        return Err(CoreError::NonFiniteLoss { step, value: breakdown.l_total });
    }
    tape.backward(total)?;
    let grads: BTreeMap<String, Vec<f32>> = tape.param_grads().into_iter().collect();
    drop(tape);

    let lr = cosine_lr(step, total_steps, cfg.lr0);
    let sgd = Sgd::new(cfg.momentum as f32, cfg.weight_decay as f32);
    let mut sgd_err = None;
    let mut apply = |g: &mut ParamGroup| {
        if sgd_err.is_some() {
            return;
        }
        // only groups bound into this step's tape move; with the fusion
        // terms ablated their weights stay bitwise untouched
        if let Some(grad) = grads.get(&g.name) {
            g.value.grad = Some(grad.clone());
            if let Err(e) = sgd.step([&mut *g], lr as f32) {
                sgd_err = Some(e);
            }
        }
    };
    model.backbone.for_each_mut(&mut |_, g| apply(g));
    model.interx.for_each_mut(&mut |_, g| apply(g));
    model.head_ins.for_each_mut(&mut |_, g| apply(g));
    model.head_interx.for_each_mut(&mut |_, g| apply(g));
    if let Some(e) = sgd_err {
        return Err(e);
    }

    let lam = if cfg.ema_enabled {
        let lam = ema_lambda(step, total_steps, cfg.ema_base);
        model.teacher.blend_from_backbone(&model.backbone, lam as f32)?;
        lam
    } else {
        1.0
    };
    Ok(StepOutcome { breakdown, lr, ema_lambda: lam })
}

// ── Inference and evaluation ────────────────────────────────────────────

/// Embeddings of a set of images plus the access log: which named
/// parameters the pass bound. Inference uses the instance stream only, so
/// the log must never contain teacher or fusion names.
pub struct InferencePass {
    pub embeddings: EmbeddingSet,
    pub touched_params: Vec<String>,
}

pub fn extract_embeddings(
    model: &ModelParams,
    bb: &BackboneConfig,
    images: &[LabeledImage],
    role: Role,
) -> Result<InferencePass> {
    if images.is_empty() {
        return Err(CoreError::Batch("no images to embed".into()));
    }
    let d = bb.embed_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    let mut touched: Vec<String> = Vec::new();
    for img in images {
        let mut tape = Tape::<f32>::new();
        let bbv = model.backbone.bind(&mut tape, "backbone", &mut TrainBinder)?;
        let fwd = forward_instance(&mut tape, &img.pixels, &bbv, bb)?;
        data.extend_from_slice(tape.data(fwd.f_ins));
        if touched.is_empty() {
            touched = tape.param_names().into_iter().map(String::from).collect();
        }
    }
    let vectors = Tensor::from_vec(vec![images.len(), d], data)?;
    let labels = images.iter().map(|i| i.identity).collect();
    let views = images.iter().map(|i| i.view).collect();
    Ok(InferencePass {
        embeddings: EmbeddingSet::with_views(vectors, labels, views, role)?,
        touched_params: touched,
    })
}

fn take_rows(set: &EmbeddingSet, keep: &[bool], role: Role) -> Result<EmbeddingSet> {
    let d = set.dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut views = Vec::new();
    for r in 0..set.len() {
        if keep[r] {
            data.extend_from_slice(set.vectors.row(r));
            labels.push(set.labels[r]);
            views.push(set.views[r]);
        }
    }
    let m = labels.len();
    EmbeddingSet::with_views(Tensor::from_vec(vec![m, d], data)?, labels, views, role)
}

/// Retrieval on the query/gallery pair plus cluster geometry over their
/// union.
pub fn evaluate_sets(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    epoch: usize,
) -> Result<MetricsReport> {
    let (map, cmc1) = retrieval_eval(query, gallery)?;
    let mut data = query.vectors.data().to_vec();
    data.extend_from_slice(gallery.vectors.data());
    let mut labels = query.labels.clone();
    labels.extend_from_slice(&gallery.labels);
    let union = EmbeddingSet::new(
        Tensor::from_vec(vec![labels.len(), query.dim()], data)?,
        labels,
        Role::Gallery,
    )?;
    let (cp, _) = compactness(&union)?;
    let ch = calinski_harabasz(&union)?;
    let report = MetricsReport { epoch, map, cmc1, cp, ch };
    report.validate()?;
    Ok(report)
}

/// Metrics over the training images themselves: view 0 of each identity
/// queries the remaining views. This is the per-epoch progress line; the
/// held-out evaluation goes through [`evaluate_sets`] on the test split.
pub fn train_split_metrics(
    model: &ModelParams,
    bb: &BackboneConfig,
    images: &[LabeledImage],
    epoch: usize,
) -> Result<MetricsReport> {
    let pass = extract_embeddings(model, bb, images, Role::Gallery)?;
    split_metrics_of(&pass.embeddings, epoch)
}

fn split_metrics_of(set: &EmbeddingSet, epoch: usize) -> Result<MetricsReport> {
    let is_query: Vec<bool> = set.views.iter().map(|&v| v == 0).collect();
    let is_gallery: Vec<bool> = is_query.iter().map(|q| !q).collect();
    let query = take_rows(set, &is_query, Role::Query)?;
    let gallery = take_rows(set, &is_gallery, Role::Gallery)?;
    evaluate_sets(&query, &gallery, epoch)
}

// ── The epoch loop ──────────────────────────────────────────────────────

/// One JSON line of the experiment log. Losses, lr, and the teacher
/// momentum are sampled at the epoch's first step, so same-seed runs in
/// different ablation modes log the same starting numbers; the retrieval
/// metrics describe the model after the epoch's last update.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ins: f64,
    pub l_intrax: f64,
    pub l_interx: f64,
    pub l_total: f64,
    pub lr: f64,
    pub ema_lambda: f64,
    pub map: f64,
    pub cmc1: f64,
    pub cp: f64,
    pub ch: f64,
}

/// Trains for `cfg.epochs` passes over `train`, calling `on_epoch` after
/// each epoch's metrics are computed (the hook writes logs and checkpoints;
/// aborting mid-run therefore retains the last completed epoch's files).
pub fn run_training(
    model: &mut ModelParams,
    train: &[LabeledImage],
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if let Some(max_id) = train.iter().map(|i| i.identity).max() {
        if max_id >= bb.num_classes {
            return Err(CoreError::Config(format!(
                "training identities reach {max_id} but the classifier has {} classes",
                bb.num_classes
            )));
        }
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut sampler = Rng::seed_from_u64(cfg.seed).derive(1);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut first = None;
        for _ in 0..steps_per_epoch {
            let batch = pk_sample(train, cfg.num_ids_per_batch, cfg.instances_per_id, &mut sampler)?;
            let out = train_step(model, &batch, bb, cfg, step, total_steps)?;
            first.get_or_insert(out);
            step += 1;
        }
        let out = first.expect("steps_per_epoch >= 1");
        // the per-step check sees the loss before the update; the epoch's
        // final update can still blow the model up, which surfaces as
        // non-finite embeddings here before poisoning the metrics
        let pass = extract_embeddings(model, bb, train, Role::Gallery)?;
        if let Some(&v) = pass.embeddings.vectors.data().iter().find(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteLoss { step: step - 1, value: v as f64 });
        }
        let metrics = split_metrics_of(&pass.embeddings, epoch)?;
        let record = EpochRecord {
            epoch,
            l_ins: out.breakdown.l_ins,
            l_intrax: out.breakdown.l_intrax,
            l_interx: out.breakdown.l_interx,
            l_total: out.breakdown.l_total,
            lr: out.lr,
            ema_lambda: out.ema_lambda,
            map: metrics.map,
            cmc1: metrics.cmc1,
            cp: metrics.cp,
            ch: metrics.ch,
        };
        on_epoch(&record, model)?;
        records.push(record);
    }
    Ok(records)
}

// ── Whole-model gradient checking ───────────────────────────────────────

/// Finite-difference settings for the whole-step objective. The
/// distillation temperature puts third derivatives at the 1/tau^3 scale,
/// so the step must be finer than the generic default for truncation error
/// to stay well under the pass threshold.
pub fn step_fd_config() -> FdConfig {
    FdConfig { step: 3e-5, floor: 1e-8 }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

struct SplicedLoss<'a> {
    model: &'a ModelParams,
    batch: &'a Batch,
    bb: &'a BackboneConfig,
    cfg: &'a TrainConfig,
    plan: &'a StepPlan,
    offsets: BTreeMap<String, (usize, usize)>,
}

impl gradcheck::ScalarFn for SplicedLoss<'_> {
    fn build<T: Real>(&self, tape: &mut Tape<T>, x: Value) -> Result<Value> {
        let mut binder = SpliceBinder { offsets: &self.offsets, x };
        let bound = bind_model(tape, self.model, self.cfg, &mut binder)?;
        let (total, _, _) = batch_loss(
            tape,
            &bound,
            &self.model.teacher,
            self.batch,
            self.bb,
            self.cfg,
            Some(self.plan),
        )?;
        Ok(total)
    }
}

/// Central-difference check of the whole step objective, one parameter
/// group at a time against a single shared backward pass, all in f64 with
/// the step plan frozen at the base point. `corrupt` scales one group's
/// analytic gradient by 1.02 first; it exists so the negative-control test
/// can prove the check actually fails on a wrong gradient.
pub fn model_grad_check(
    model: &ModelParams,
    batch: &Batch,
    bb: &BackboneConfig,
    cfg: &TrainConfig,
    fd: FdConfig,
    corrupt: Option<&str>,
) -> Result<Vec<GroupReport>> {
    let plan = {
        let mut tape = Tape::<f64>::new();
        let bound = bind_model(&mut tape, model, cfg, &mut ConstBinder)?;
        let (_, _, plan) =
            batch_loss(&mut tape, &bound, &model.teacher, batch, bb, cfg, None)?;
        plan
    };
    let analytic: BTreeMap<String, Vec<f64>> = {
        let mut tape = Tape::<f64>::new();
        let bound = bind_model(&mut tape, model, cfg, &mut TrainBinder)?;
        let (total, _, _) =
            batch_loss(&mut tape, &bound, &model.teacher, batch, bb, cfg, Some(&plan))?;
        tape.backward(total)?;
        tape.param_grads().into_iter().collect()
    };
    let mut reports = Vec::new();
    for (name, master) in model.trainable_tensors() {
        let Some(grad) = analytic.get(&name) else {
            continue; // tree not bound under this configuration
        };
        let mut grad = grad.clone();
        if corrupt == Some(name.as_str()) {
            for g in grad.iter_mut() {
                *g *= 1.02;
            }
        }
        let mut offsets = BTreeMap::new();
        offsets.insert(name.clone(), (0, master.numel()));
        let f = SplicedLoss { model, batch, bb, cfg, plan: &plan, offsets };
        let numeric = gradcheck::numeric_gradient(&f, master.data(), fd.step)?;
        let report = gradcheck::compare(&grad, &numeric, fd.floor);
        reports.push(GroupReport {
            name,
            coords: master.numel(),
            max_rel_err: report.max_rel_err,
            worst_index: report.worst_index,
        });
    }
    Ok(reports)
}
