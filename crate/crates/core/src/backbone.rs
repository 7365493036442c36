//! Stride-16 convolutional features and their projections.

use rand::Rng;

use crate::config::ModelConfig;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::numerics::{init, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Projected visual features for one image.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatures {
    /// `[D_e × w_f × w_f]`
    pub v: Var,
    /// `[D_a × D_f]`, column `j` is cell `(j / w_f, j % w_f)`
    pub v_a: Var,
    /// `[D_e]`
    pub v_g: Var,
    pub grid: usize,
}

/// Parameter handles for the four conv blocks and the two 1×1 projections.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    in_channels: usize,
    blocks: Vec<(ParamId, ParamId)>,
    proj: (ParamId, ParamId),
    attn: (ParamId, ParamId),
}

impl BackboneParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let in_channels = if cfg.coord_channels { 5 } else { 3 };
        let mut chans = vec![in_channels];
        chans.extend(cfg.backbone_channels);
        chans.push(cfg.feature_channels);
        let mut blocks = Vec::new();
        for (i, pair) in chans.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let w = store.insert(format!("backbone.conv{i}.w"), init::he(&[cout, cin, 3, 3], cin * 9, rng))?;
            let b = store.insert(format!("backbone.conv{i}.b"), init::zeros(&[cout]))?;
            blocks.push((w, b));
        }
        let (dc, de, da) = (cfg.feature_channels, cfg.visual_dim, cfg.attn_dim);
        let proj = (
            store.insert("visual.proj.w", init::he(&[de, dc, 1, 1], dc, rng))?,
            store.insert("visual.proj.b", init::zeros(&[de]))?,
        );
        let attn = (
            store.insert("visual.attn.w", init::glorot(&[da, de, 1, 1], de, da, rng))?,
            store.insert("visual.attn.b", init::zeros(&[da]))?,
        );
        Ok(BackboneParams { in_channels, blocks, proj, attn })
    }
}

impl BackboneParams {
    /// Channels expected by the first block: RGB, plus two coordinate planes
    /// when enabled.
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
}

/// Network input for an `S×S` image: its RGB planes, followed when
/// `coords` is set by x and y planes running from −1 to 1 across pixel
/// centers.
pub fn network_input<T: Real>(image: &Image, coords: bool) -> Tensor<T> {
    let rgb = image.to_tensor::<T>();
    if !coords {
        return rgb;
    }
    let (h, w) = (image.height(), image.width());
    let mut data = rgb.into_data();
    data.reserve(2 * h * w);
    let pos = |i: usize, n: usize| T::of(2.0 * (i as f64 + 0.5) / n as f64 - 1.0);
    for _ in 0..h {
        data.extend((0..w).map(|x| pos(x, w)));
    }
    for y in 0..h {
        data.extend(std::iter::repeat_n(pos(y, h), w));
    }
    Tensor::new(vec![5, h, w], data).expect("plane sizes agree")
}

/// Four 3×3 stride-2 conv+ReLU blocks: `[C_in×S×S] → [D_c × S/16 × S/16]`.
pub fn extract_features<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &BackboneParams,
    image: Var,
) -> Result<Var> {
    let c = params.in_channels;
    match tape.shape(image) {
        [k, h, w] if *k == c && h == w && *h > 0 && h % 16 == 0 => {}
        [k, h, w] if *k == c && h == w => {
            return Err(Error::config(format!("image side {h} is not a positive multiple of 16")))
        }
        s => return Err(Error::shape(format!("expected a square {c}×S×S input, got {s:?}"))),
    }
    let mut x = image;
    for &(w, b) in &params.blocks {
        let (w, b) = (tape.param(store, w), tape.param(store, b));
        let y = tape.conv2d(x, w, Some(b), 2, 1)?;
        x = tape.relu(y);
    }
    Ok(x)
}

/// `V = ReLU(conv1×1(raw))`, `v_a = conv1×1(V)` flattened, `v_g = mean(V)`.
pub fn project_visual<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &BackboneParams,
    raw: Var,
) -> Result<VisualFeatures> {
    let (h, w) = match tape.shape(raw) {
        [_, h, w] => (*h, *w),
        s => return Err(Error::shape(format!("expected C×h×w features, got {s:?}"))),
    };
    let (pw, pb) = (tape.param(store, params.proj.0), tape.param(store, params.proj.1));
    let pre = tape.conv2d(raw, pw, Some(pb), 1, 0)?;
    let v = tape.relu(pre);
    let (aw, ab) = (tape.param(store, params.attn.0), tape.param(store, params.attn.1));
    let a = tape.conv2d(v, aw, Some(ab), 1, 0)?;
    let da = tape.shape(a)[0];
    let v_a = tape.reshape(a, &[da, h * w])?;
    let de = tape.shape(v)[0];
    let flat = tape.reshape(v, &[de, h * w])?;
    let v_g = tape.mean_cols(flat)?;
    Ok(VisualFeatures { v, v_a, v_g, grid: w })
}

/// Pixel box of feature cell `j` on an `S×S` input with a `w_f×w_f` grid.
pub fn cell_to_region(j: usize, s: usize, w_f: usize) -> Result<Bbox> {
    if w_f == 0 || j >= w_f * w_f {
        return Err(Error::contract(format!("cell {j} outside a {w_f}×{w_f} grid")));
    }
    let cell = s as f64 / w_f as f64;
    let (r, c) = ((j / w_f) as f64, (j % w_f) as f64);
    Bbox::new(c * cell, r * cell, (c + 1.0) * cell, (r + 1.0) * cell)
}

/// Resizes to fit inside `s×s` preserving aspect, anchored top-left and
/// zero-padded. Returns the new image and the applied scale factor.
pub fn letterbox(image: &Image, s: usize) -> Result<(Image, f64)> {
    if s == 0 {
        return Err(Error::config("target size must be positive"));
    }
    let (h, w) = (image.height(), image.width());
    if h == s && w == s {
        return Ok((image.clone(), 1.0));
    }
    let scale = s as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, s);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, s);
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let mut out = Image::filled(s, s, [0.0; 3]);
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let top = image.get(c, y0, x0) as f64 * (1.0 - tx) + image.get(c, y0, x1) as f64 * tx;
                let bot = image.get(c, y1, x0) as f64 * (1.0 - tx) + image.get(c, y1, x1) as f64 * tx;
                out.set(c, y, x, (top * (1.0 - ty) + bot * ty) as f32);
            }
        }
    }
    Ok((out, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Coverage, Tensor};
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            backbone_channels: [2, 2, 3],
            feature_channels: 3,
            visual_dim: 3,
            attn_dim: 4,
            coord_channels: false,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn coordinate_planes() {
        let img = Image::filled(2, 4, [0.25, 0.5, 0.75]);
        let t = network_input::<f64>(&img, true);
        assert_eq!(t.shape(), [5, 2, 4]);
        assert_eq!(&t.data()[..8], &[0.25; 8]);
        assert_eq!(&t.data()[24..32], &[-0.75, -0.25, 0.25, 0.75, -0.75, -0.25, 0.25, 0.75]);
        assert_eq!(&t.data()[32..40], &[-0.5, -0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5]);
        assert_eq!(network_input::<f64>(&img, false).shape(), [3, 2, 4]);

        let cfg = ModelConfig { coord_channels: true, ..small_cfg() };
        let (store, p) = setup(&cfg);
        assert_eq!(p.in_channels(), 5);
        let mut tape = Tape::inference();
        let x = tape.constant(network_input(&Image::filled(32, 32, [0.1; 3]), true));
        let raw = extract_features(&mut tape, &store, &p, x).unwrap();
        assert_eq!(tape.shape(raw), [3, 2, 2]);
        let rgb = tape.constant(network_input(&Image::filled(32, 32, [0.1; 3]), false));
        assert!(matches!(extract_features(&mut tape, &store, &p, rgb), Err(Error::Shape(_))));
    }

    fn setup(cfg: &ModelConfig) -> (ParamStore<f64>, BackboneParams) {
        let mut store = ParamStore::new();
        let p = BackboneParams::init(&mut store, cfg, &mut SplitMix64::seed_from_u64(1)).unwrap();
        (store, p)
    }

    #[test]
    fn output_grid_is_one_sixteenth() {
        for (s, grid) in [(512, 32), (128, 8)] {
            let cfg = ModelConfig { image_size: s, ..small_cfg() };
            let (store, p) = setup(&cfg);
            let mut tape = Tape::inference();
            let img = tape.constant(Tensor::<f64>::zeros(&[3, s, s]));
            let raw = extract_features(&mut tape, &store, &p, img).unwrap();
            assert_eq!(tape.shape(raw), [3, grid, grid]);
            let f = project_visual(&mut tape, &store, &p, raw).unwrap();
            assert_eq!(tape.shape(f.v_a), [4, grid * grid]);
            assert_eq!(tape.shape(f.v_g), [3]);
        }
    }

    #[test]
    fn zero_image_and_biases_give_zero_map() {
        let (store, p) = setup(&small_cfg());
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::<f64>::zeros(&[3, 32, 32]));
        let raw = extract_features(&mut tape, &store, &p, img).unwrap();
        assert!(tape.value(raw).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn side_not_multiple_of_sixteen_is_config_error() {
        let (store, p) = setup(&small_cfg());
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::<f64>::zeros(&[3, 40, 40]));
        assert!(matches!(extract_features(&mut tape, &store, &p, img), Err(Error::Config(_))));
    }

    #[test]
    fn identity_projection_and_constant_pooling() {
        let cfg = small_cfg();
        let (mut store, p) = setup(&cfg);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        *store.get_mut(p.proj.0) = Tensor::new(vec![3, 3, 1, 1], eye).unwrap();
        let raw_vals: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        let mut tape = Tape::inference();
        let raw = tape.constant(Tensor::new(vec![3, 2, 2], raw_vals.clone()).unwrap());
        let f = project_visual(&mut tape, &store, &p, raw).unwrap();
        let relu: Vec<f64> = raw_vals.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(f.v), relu.as_slice());

        let raw = tape.constant(Tensor::full(&[3, 2, 2], 0.75));
        let f = project_visual(&mut tape, &store, &p, raw).unwrap();
        assert_eq!(tape.value(f.v_g), [0.75; 3]);
    }

    #[test]
    fn cell_regions() {
        assert_eq!(cell_to_region(0, 512, 32).unwrap(), Bbox::new(0.0, 0.0, 16.0, 16.0).unwrap());
        assert_eq!(cell_to_region(31, 512, 32).unwrap(), Bbox::new(496.0, 0.0, 512.0, 16.0).unwrap());
        assert_eq!(cell_to_region(1023, 512, 32).unwrap(), Bbox::new(496.0, 496.0, 512.0, 512.0).unwrap());
        assert!(matches!(cell_to_region(1024, 512, 32), Err(Error::Contract(_))));
    }

    #[test]
    fn cells_tile_the_image() {
        let (s, w_f) = (128, 8);
        let boxes: Vec<Bbox> = (0..w_f * w_f).map(|j| cell_to_region(j, s, w_f).unwrap()).collect();
        let total: f64 = boxes.iter().map(Bbox::area).sum();
        assert_eq!(total, (s * s) as f64);
        for (i, a) in boxes.iter().enumerate() {
            for b in &boxes[i + 1..] {
                assert_eq!(crate::geometry::iou(a, b), 0.0);
            }
        }
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let (mut store, p) = setup(&cfg);
        // move biases off zero so no pre-activation lands on the ReLU kink
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.name(id).ends_with(".b") {
                for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                    *v = 0.05 + 0.013 * ((i + k) % 7) as f64;
                }
            }
        }
        let img: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let img = Tensor::new(vec![3, 32, 32], img).unwrap();
        let report = grad_check(&store, 1e-5, Coverage::AtMost(12), |tape, s| {
            let x = tape.constant(img.clone());
            let raw = extract_features(tape, s, &p, x)?;
            let f = project_visual(tape, s, &p, raw)?;
            let a = tape.tanh(f.v_a);
            let g = tape.tanh(f.v_g);
            let (a, g) = (tape.sum(a), tape.sum(g));
            let sq = tape.mul(a, a)?;
            Ok(tape.add(sq, g)?)
        })
        .unwrap();
        assert!(report.missing.is_empty(), "{:?}", report.missing);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn letterbox_preserves_aspect() {
        let img = Image::filled(32, 64, [1.0, 0.5, 0.25]);
        let (out, scale) = letterbox(&img, 128).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(out.pixel(63, 127), [1.0, 0.5, 0.25]);
        assert_eq!(out.pixel(64, 0), [0.0; 3]);
        let same = Image::filled(16, 16, [0.3; 3]);
        assert_eq!(letterbox(&same, 16).unwrap(), (same, 1.0));
    }
}
