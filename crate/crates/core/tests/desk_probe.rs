use xreid_core::backbone::BackboneConfig;
use xreid_core::data::{generate, LabeledImage, Nuisance, SynthSpec};
use xreid_core::rng::Rng;
use xreid_core::tensor::Tensor;
use xreid_core::train::{run_training, train_split_metrics, ModelParams, TrainConfig};

fn desk_bb() -> BackboneConfig {
    BackboneConfig {
        image_h: 32, image_w: 16, patch_size: 8, channels: 1,
        embed_dim: 64, num_layers: 4, num_heads: 4, ffn_dim: 128, num_classes: 8,
    }
}

fn binary_pattern(rng: &mut Rng, c: usize, h: usize, w: usize) -> Vec<f32> {
    const STEP: usize = 4;
    let gh = h.div_ceil(STEP) + 1;
    let gw = w.div_ceil(STEP) + 1;
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let grid: Vec<f32> = (0..gh * gw)
            .map(|_| if rng.uniform(0.0, 1.0) < 0.5 { 0.1 } else { 0.9 })
            .collect();
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

fn corrupt(base: &[f32], spec: &SynthSpec, rng: &mut Rng) -> Vec<f32> {
    let (c, h, w) = (spec.channels, spec.image_h, spec.image_w);
    let s = spec.nuisance.shift_max as isize;
    let (dy, dx) = if s > 0 {
        (rng.below((2 * s + 1) as usize) as isize - s, rng.below((2 * s + 1) as usize) as isize - s)
    } else { (0, 0) };
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
        for v in px.iter_mut() { *v += spec.nuisance.noise_std * rng.normal(); }
    }
    if rng.chance(spec.nuisance.occlusion_prob) {
        let rh = 1 + rng.below((h / 2).max(1));
        let rw = 1 + rng.below((w / 2).max(1));
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        for ch in 0..c {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw { px[(ch * h + y) * w + x] = 0.0; }
            }
        }
    }
    for v in px.iter_mut() { *v = v.clamp(0.0, 1.0); }
    px
}

fn gen_binary(spec: &SynthSpec) -> Vec<LabeledImage> {
    let root = Rng::seed_from_u64(spec.seed);
    let (c, h, w) = (spec.channels, spec.image_h, spec.image_w);
    let mut out = Vec::new();
    for id in 0..spec.num_ids {
        let id_rng = root.derive(id as u64);
        let front = binary_pattern(&mut id_rng.derive(0), c, h, w);
        let back = front.clone();
        for view in 0..spec.views_per_id {
            let mut view_rng = id_rng.derive(2 + view as u64);
            let base = if spec.nuisance.view_flip && view % 2 == 1 { &back } else { &front };
            let pixels = corrupt(base, spec, &mut view_rng);
            out.push(LabeledImage {
                pixels: Tensor::from_vec(vec![c, h, w], pixels).unwrap(),
                identity: id,
                view,
            });
        }
    }
    out
}

fn run(tag: &str, data: &[LabeledImage], full: bool) {
    let bb = desk_bb();
    let cfg = if full {
        TrainConfig { epochs: 25, ..TrainConfig::default() }
    } else {
        TrainConfig { epochs: 25, lambda1: 0.0, lambda2: 0.0, ema_enabled: false, ..TrainConfig::default() }
    };
    let mut model = ModelParams::init(&bb, cfg.seed, true).unwrap();
    match run_training(&mut model, data, &bb, &cfg, |_, _| Ok(())) {
        Ok(recs) => {
            let last = recs.last().unwrap();
            let m = train_split_metrics(&model, &bb, data, 0).unwrap();
            println!("{tag}: l_ins {:.3} cmc1 {:.3} map {:.3}", last.l_ins, m.cmc1, m.map);
        }
        Err(e) => println!("{tag}: ERROR {e}"),
    }
}

#[test]
fn probe_c8_grid() {
    for occl in [0.25, 0.10] {
        let nuis = Nuisance { view_flip: false, occlusion_prob: occl, ..Nuisance::default() };
        let spec = SynthSpec {
            num_ids: 8, views_per_id: 16, image_h: 32, image_w: 16, channels: 1,
            nuisance: nuis, seed: 7,
        };
        let smooth = generate(&spec).unwrap();
        run(&format!("smooth occl{occl} full"), &smooth, true);
        let binary = gen_binary(&spec);
        run(&format!("binary occl{occl} full"), &binary, true);
        run(&format!("binary occl{occl} base"), &binary, false);
    }
}
