//! Deterministic synthetic identity data. Each identity owns a random
//! prototype pattern plus a "back view" blended from a second pattern, so
//! same-identity images share signal while differing more than noise alone
//! would allow. Views add pixel shift, Gaussian noise, and occlusion.
//! Also: the P-identities-times-K-instances batch sampler and the
//! identity-disjoint train/query/gallery split.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-view corruption knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Nuisance {
    pub noise_std: f32,
    pub shift_max: usize,
    pub occlusion_prob: f64,
    pub view_flip: bool,
}

impl Default for Nuisance {
    fn default() -> Self {
        Nuisance { noise_std: 0.05, shift_max: 2, occlusion_prob: 0.25, view_flip: true }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub views_per_id: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub nuisance: Nuisance,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_ids: 8,
            views_per_id: 8,
            image_h: 32,
            image_w: 16,
            channels: 1,
            nuisance: Nuisance::default(),
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(CoreError::Config(format!(
                "need at least 2 identities, got {}",
                self.num_ids
            )));
        }
        if self.views_per_id == 0 {
            return Err(CoreError::Config("views_per_id must be positive".into()));
        }
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return Err(CoreError::Config("image dimensions must be positive".into()));
        }
        if self.nuisance.noise_std < 0.0 {
            return Err(CoreError::Config("noise_std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.nuisance.occlusion_prob) {
            return Err(CoreError::Config("occlusion_prob must lie in [0,1]".into()));
        }
        if self.nuisance.shift_max >= self.image_h.min(self.image_w) {
            return Err(CoreError::Config(format!(
                "shift_max {} too large for a {}x{} image",
                self.nuisance.shift_max, self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_h * self.image_w
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// `[C, H, W]`, every value in [0, 1].
    pub pixels: Tensor,
    pub identity: usize,
    pub view: usize,
}

/// One P x K mini-batch in identity-major order: each sampled identity's K
/// instances are contiguous.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<LabeledImage>,
    pub labels: Vec<usize>,
    /// Positions in the source dataset, for replay checks.
    pub indices: Vec<usize>,
    pub p_ids: usize,
    pub k: usize,
}

impl Batch {
    /// Batch positions holding the same identity as `a`, excluding `a`.
    pub fn positives_of(&self, a: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&b| b != a && self.labels[b] == self.labels[a])
            .collect()
    }
}

/// A spatially smooth random pattern: a coarse uniform grid bilinearly
/// interpolated to full resolution. Smoothness is what keeps small pixel
/// shifts from decorrelating views of the same identity, which white-noise
/// patterns would.
fn smooth_pattern(rng: &mut Rng, c: usize, h: usize, w: usize) -> Vec<f32> {
    const STEP: usize = 4;
    let gh = h.div_ceil(STEP) + 1;
    let gw = w.div_ceil(STEP) + 1;
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let grid: Vec<f32> = (0..gh * gw).map(|_| rng.uniform(0.0, 1.0)).collect();
        for y in 0..h {
            let (gy, fy) = (y / STEP, (y % STEP) as f32 / STEP as f32);
            for x in 0..w {
                let (gx, fx) = (x / STEP, (x % STEP) as f32 / STEP as f32);
                let at = |dy: usize, dx: usize| grid[(gy + dy) * gw + gx + dx];
                let top = at(0, 0) * (1.0 - fx) + at(0, 1) * fx;
                let bottom = at(1, 0) * (1.0 - fx) + at(1, 1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Generates the full dataset, id-major then view-minor. Every pixel is a
/// pure function of (spec, identity, view).
pub fn generate(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let root = Rng::seed_from_u64(spec.seed);
    let (c, h, w) = (spec.channels, spec.image_h, spec.image_w);
    let mut out = Vec::with_capacity(spec.num_ids * spec.views_per_id);
    for id in 0..spec.num_ids {
        let id_rng = root.derive(id as u64);
        let front = smooth_pattern(&mut id_rng.derive(0), c, h, w);
        // The "back view": halfway between the identity's own pattern and an
        // independent one, so flipped views stay closer to their identity
        // than to any other.
        let back: Vec<f32> = if spec.nuisance.view_flip {
            let alt = smooth_pattern(&mut id_rng.derive(1), c, h, w);
            front.iter().zip(&alt).map(|(f, a)| 0.5 * (f + a)).collect()
        } else {
            front.clone()
        };
        for view in 0..spec.views_per_id {
            let mut view_rng = id_rng.derive(2 + view as u64);
            let base = if spec.nuisance.view_flip && view % 2 == 1 { &back } else { &front };
            let pixels = corrupt(base, spec, &mut view_rng);
            out.push(LabeledImage {
                pixels: Tensor::from_vec(
                    vec![spec.channels, spec.image_h, spec.image_w],
                    pixels,
                )?,
                identity: id,
                view,
            });
        }
    }
    Ok(out)
}

/// Cyclic pixel shift, additive Gaussian noise, optional zeroed rectangle,
/// then a clamp back to [0, 1].
fn corrupt(base: &[f32], spec: &SynthSpec, rng: &mut Rng) -> Vec<f32> {
    let (c, h, w) = (spec.channels, spec.image_h, spec.image_w);
    let s = spec.nuisance.shift_max as isize;
    let (dy, dx) = if s > 0 {
        (
            rng.below((2 * s + 1) as usize) as isize - s,
            rng.below((2 * s + 1) as usize) as isize - s,
        )
    } else {
        (0, 0)
    };
    let mut px = vec![0f32; base.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                px[(ch * h + y) * w + x] = base[(ch * h + sy) * w + sx];
            }
        }
    }
    if spec.nuisance.noise_std > 0.0 {
        for v in px.iter_mut() {
            *v += spec.nuisance.noise_std * rng.normal();
        }
    }
    if rng.chance(spec.nuisance.occlusion_prob) {
        let rh = 1 + rng.below((h / 2).max(1));
        let rw = 1 + rng.below((w / 2).max(1));
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        for ch in 0..c {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    px[(ch * h + y) * w + x] = 0.0;
                }
            }
        }
    }
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    px
}

/// Samples a P x K batch: identities uniformly without replacement, then K
/// views without replacement per identity, laid out identity-major.
pub fn pk_sample(
    dataset: &[LabeledImage],
    p_ids: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if p_ids == 0 || k == 0 {
        return Err(CoreError::Batch("P and K must be positive".into()));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, img) in dataset.iter().enumerate() {
        by_id.entry(img.identity).or_default().push(i);
    }
    let mut eligible: Vec<usize> = by_id
        .iter()
        .filter(|(_, views)| views.len() >= k)
        .map(|(&id, _)| id)
        .collect();
    if eligible.len() < p_ids {
        return Err(CoreError::Batch(format!(
            "need {p_ids} identities with at least {k} views, dataset offers {}",
            eligible.len()
        )));
    }
    rng.shuffle(&mut eligible);
    let mut batch = Batch {
        images: Vec::with_capacity(p_ids * k),
        labels: Vec::with_capacity(p_ids * k),
        indices: Vec::with_capacity(p_ids * k),
        p_ids,
        k,
    };
    for &id in eligible.iter().take(p_ids) {
        let mut views = by_id[&id].clone();
        rng.shuffle(&mut views);
        for &idx in views.iter().take(k) {
            batch.images.push(dataset[idx].clone());
            batch.labels.push(id);
            batch.indices.push(idx);
        }
    }
    Ok(batch)
}

/// Identity-disjoint split: the first `round(train_frac * num_ids)` ids (in
/// id order) train; each remaining id contributes view 0 as a query and its
/// other views as gallery.
pub fn split(
    dataset: &[LabeledImage],
    train_frac: f64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, Vec<LabeledImage>)> {
    if !(0.0..1.0).contains(&train_frac) || train_frac == 0.0 {
        return Err(CoreError::Config(format!(
            "train_frac must lie strictly between 0 and 1, got {train_frac}"
        )));
    }
    let mut ids: Vec<usize> = dataset.iter().map(|img| img.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    let n_train = (ids.len() as f64 * train_frac).round() as usize;
    if n_train < 2 || ids.len() - n_train < 2 {
        return Err(CoreError::Config(format!(
            "split needs at least 2 train and 2 test identities, got {} and {}",
            n_train,
            ids.len() - n_train
        )));
    }
    let train_ids = &ids[..n_train];
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for img in dataset {
        if train_ids.contains(&img.identity) {
            train.push(img.clone());
        } else if img.view == 0 {
            query.push(img.clone());
        } else {
            gallery.push(img.clone());
        }
    }
    for q in &query {
        if !gallery.iter().any(|g| g.identity == q.identity) {
            return Err(CoreError::Config(format!(
                "query identity {} has no gallery views; need views_per_id >= 2",
                q.identity
            )));
        }
    }
    Ok((train, query, gallery))
}

// ── On-disk form ────────────────────────────────────────────────────────

/// Stacks a dataset into one container: `images` as `[M, C, H, W]` plus
/// `labels` and `views`.
pub fn save_dataset(images: &[LabeledImage], path: &std::path::Path) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| CoreError::Batch("refusing to write an empty dataset".into()))?;
    let per = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.pixels.numel());
    for img in images {
        if img.pixels.shape() != per.as_slice() {
            return Err(CoreError::ShapeMismatch {
                op: "save_dataset",
                lhs: img.pixels.shape().to_vec(),
                rhs: per,
            });
        }
        data.extend_from_slice(img.pixels.data());
    }
    let shape = vec![images.len(), per[0], per[1], per[2]];
    let mut c = crate::container::TensorContainer::new();
    c.insert("images", Tensor::from_vec(shape, data)?)?;
    c.insert(
        "labels",
        crate::container::indices_to_tensor(&images.iter().map(|i| i.identity).collect::<Vec<_>>())?,
    )?;
    c.insert(
        "views",
        crate::container::indices_to_tensor(&images.iter().map(|i| i.view).collect::<Vec<_>>())?,
    )?;
    c.save(path)
}

pub fn load_dataset(path: &std::path::Path) -> Result<Vec<LabeledImage>> {
    let c = crate::container::TensorContainer::load(path)?;
    let stacked = c.require("images")?;
    if stacked.rank() != 4 {
        return Err(CoreError::InvalidDimension {
            op: "load_dataset",
            msg: format!("images must be [M, C, H, W], got {:?}", stacked.shape()),
        });
    }
    let labels = crate::container::tensor_to_indices(c.require("labels")?, "labels")?;
    let views = crate::container::tensor_to_indices(c.require("views")?, "views")?;
    let m = stacked.shape()[0];
    if labels.len() != m || views.len() != m {
        return Err(CoreError::Container(format!(
            "{m} images but {} labels and {} views",
            labels.len(),
            views.len()
        )));
    }
    let per: Vec<usize> = stacked.shape()[1..].to_vec();
    let numel: usize = per.iter().product();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let slice = stacked.data()[i * numel..(i + 1) * numel].to_vec();
        out.push(LabeledImage {
            pixels: Tensor::from_vec(per.clone(), slice)?,
            identity: labels[i],
            view: views[i],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> SynthSpec {
        SynthSpec {
            num_ids: 10,
            views_per_id: 8,
            nuisance: Nuisance {
                noise_std: 0.0,
                shift_max: 0,
                occlusion_prob: 0.0,
                view_flip: false,
            },
            ..SynthSpec::default()
        }
    }

    fn pixel_dist(a: &LabeledImage, b: &LabeledImage) -> f64 {
        a.pixels.sq_euclidean_to(&b.pixels).unwrap()
    }

    #[test]
    fn nuisance_free_views_are_bitwise_identical() {
        let data = generate(&quiet_spec()).unwrap();
        for id in 0..10 {
            let first = &data[id * 8];
            for v in 1..8 {
                assert_eq!(first.pixels.data(), data[id * 8 + v].pixels.data());
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let spec = SynthSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.len(), spec.num_ids * spec.views_per_id);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.identity, y.identity);
            assert_eq!(x.view, y.view);
            assert_eq!(
                x.pixels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.pixels.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert!(x.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let other = generate(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a[0].pixels.data(), other[0].pixels.data());
    }

    /// Front/back flipping must add intra-identity variation without
    /// swamping the identity signal.
    #[test]
    fn flip_widens_intra_identity_distance_but_keeps_it_below_inter() {
        let mut flip_spec = quiet_spec();
        flip_spec.nuisance.view_flip = true;
        let quiet = generate(&quiet_spec()).unwrap();
        let flipped = generate(&flip_spec).unwrap();

        let mean_intra = |data: &[LabeledImage]| {
            let (mut total, mut count) = (0f64, 0usize);
            for a in 0..data.len() {
                for b in a + 1..data.len() {
                    if data[a].identity == data[b].identity {
                        total += pixel_dist(&data[a], &data[b]);
                        count += 1;
                    }
                }
            }
            total / count as f64
        };
        let mean_inter = |data: &[LabeledImage]| {
            let (mut total, mut count) = (0f64, 0usize);
            for a in 0..data.len() {
                for b in a + 1..data.len() {
                    if data[a].identity != data[b].identity {
                        total += pixel_dist(&data[a], &data[b]);
                        count += 1;
                    }
                }
            }
            total / count as f64
        };
        let quiet_intra = mean_intra(&quiet);
        let flip_intra = mean_intra(&flipped);
        assert!(flip_intra > quiet_intra);
        assert!(flip_intra < mean_inter(&flipped));
    }

    #[test]
    fn nearest_centroid_on_pixels_beats_chance() {
        // full nuisances on: the learnability floor for the whole pipeline
        let spec = SynthSpec { num_ids: 10, ..SynthSpec::default() };
        let data = generate(&spec).unwrap();
        let v = spec.views_per_id;
        let centroids: Vec<Vec<f32>> = (0..spec.num_ids)
            .map(|id| {
                let mut c = vec![0f32; spec.pixels()];
                for view in 0..v / 2 {
                    for (acc, &p) in c.iter_mut().zip(data[id * v + view].pixels.data()) {
                        *acc += p / (v / 2) as f32;
                    }
                }
                c
            })
            .collect();
        let (mut hits, mut total) = (0, 0);
        for img in data.iter().filter(|img| img.view >= v / 2) {
            let best = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(img.pixels.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
                    let db: f64 = b.iter().zip(img.pixels.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            hits += usize::from(best == img.identity);
            total += 1;
        }
        let accuracy = hits as f64 / total as f64;
        assert!(accuracy > 0.5, "nearest-centroid accuracy {accuracy}");
    }

    #[test]
    fn pk_sample_layout_and_replay() {
        let data = generate(&SynthSpec::default()).unwrap();
        let mut rng = Rng::seed_from_u64(50);
        let batch = pk_sample(&data, 2, 2, &mut rng).unwrap();
        assert_eq!(batch.labels.len(), 4);
        assert_eq!(batch.labels[0], batch.labels[1]);
        assert_eq!(batch.labels[2], batch.labels[3]);
        assert_ne!(batch.labels[0], batch.labels[2]);
        assert_eq!(batch.positives_of(0), vec![1]);
        assert_eq!(batch.positives_of(3), vec![2]);

        let mut replay = Rng::seed_from_u64(50);
        let again = pk_sample(&data, 2, 2, &mut replay).unwrap();
        assert_eq!(batch.indices, again.indices);
    }

    #[test]
    fn pk_sample_gives_every_identity_exactly_k_instances() {
        let data = generate(&SynthSpec::default()).unwrap();
        let mut rng = Rng::seed_from_u64(51);
        for _ in 0..100 {
            let batch = pk_sample(&data, 4, 4, &mut rng).unwrap();
            assert_eq!(batch.labels.len(), 16);
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for (&label, &idx) in batch.labels.iter().zip(&batch.indices) {
                *counts.entry(label).or_default() += 1;
                assert_eq!(data[idx].identity, label);
            }
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|&c| c == 4));
            let mut sorted = batch.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 16, "sampled a view twice");
        }
    }

    #[test]
    fn pk_sample_rejects_thin_datasets() {
        let spec = SynthSpec { num_ids: 3, views_per_id: 2, ..SynthSpec::default() };
        let data = generate(&spec).unwrap();
        let mut rng = Rng::seed_from_u64(52);
        assert!(pk_sample(&data, 4, 2, &mut rng).is_err());
        assert!(pk_sample(&data, 2, 3, &mut rng).is_err());
        assert!(pk_sample(&data, 2, 2, &mut rng).is_ok());
    }

    #[test]
    fn split_is_identity_disjoint_partition() {
        let spec = SynthSpec { num_ids: 10, ..SynthSpec::default() };
        let data = generate(&spec).unwrap();
        let (train, query, gallery) = split(&data, 0.5).unwrap();
        let ids = |xs: &[LabeledImage]| {
            let mut v: Vec<usize> = xs.iter().map(|x| x.identity).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        assert_eq!(ids(&train), vec![0, 1, 2, 3, 4]);
        assert_eq!(ids(&query), vec![5, 6, 7, 8, 9]);
        assert_eq!(ids(&gallery), vec![5, 6, 7, 8, 9]);
        assert_eq!(train.len() + query.len() + gallery.len(), data.len());
        assert!(query.iter().all(|q| q.view == 0));
        assert!(gallery.iter().all(|g| g.view != 0));
        for q in &query {
            assert!(gallery.iter().any(|g| g.identity == q.identity));
        }
    }

    #[test]
    fn split_rejects_bad_fractions_and_tiny_datasets() {
        let data = generate(&SynthSpec { num_ids: 10, ..SynthSpec::default() }).unwrap();
        assert!(split(&data, 0.0).is_err());
        assert!(split(&data, 1.0).is_err());
        assert!(split(&data, 0.95).is_err());
        let small = generate(&SynthSpec { num_ids: 3, ..SynthSpec::default() }).unwrap();
        assert!(split(&small, 0.5).is_err());
    }

    #[test]
    fn dataset_file_roundtrip_is_bitwise() {
        let spec = SynthSpec { num_ids: 3, views_per_id: 2, ..SynthSpec::default() };
        let data = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.xrid");
        save_dataset(&data, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.view, b.view);
            assert_eq!(a.pixels.shape(), b.pixels.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.pixels), bits(&b.pixels));
        }
        assert!(load_dataset(&dir.path().join("missing.xrid")).is_err());
        assert!(save_dataset(&[], &path).is_err());
    }
}
