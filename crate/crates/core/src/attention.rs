//! Spatial attention over visual feature cells, conditioned on the decoder
//! state and, optionally, on the global phrase embedding.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Real, Tape, Var};

/// Score projections act per cell on `D_a`-vectors; `w_ctx` maps the global
/// embedding to one weight per cell.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `[D_a × D_a]`, applied to each column of `v_a`
    pub w_v: ParamId,
    /// `[D_a × D_a]`, applied to `h_t`
    pub w_h: ParamId,
    /// `[D_a × D_a]`, applied to `H`; absent in the no-H variant
    pub w_g: Option<ParamId>,
    /// `[1 × D_a]`
    pub w_z: ParamId,
    /// `[D_f × D_a]`; absent in the no-H variant
    pub w_ctx: Option<ParamId>,
    pub d_a: usize,
    pub d_f: usize,
}

impl AttentionParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        d_a: usize,
        d_f: usize,
        with_global: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_v = store.insert("attention.w_v", init::glorot(&[d_a, d_a], d_a, d_a, rng))?;
        let w_h = store.insert("attention.w_h", init::glorot(&[d_a, d_a], d_a, d_a, rng))?;
        let w_g = if with_global {
            Some(store.insert("attention.w_g", init::glorot(&[d_a, d_a], d_a, d_a, rng))?)
        } else {
            None
        };
        let w_z = store.insert("attention.w_z", init::glorot(&[1, d_a], d_a, 1, rng))?;
        let w_ctx = if with_global {
            Some(store.insert("attention.w_ctx", init::glorot(&[d_f, d_a], d_a, d_f, rng))?)
        } else {
            None
        };
        Ok(AttentionParams { w_v, w_h, w_g, w_z, w_ctx, d_a, d_f })
    }

    pub fn uses_global(&self) -> bool {
        self.w_g.is_some()
    }
}

/// One timestep of attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionStep {
    /// `[D_f]`
    pub alpha: Var,
    /// `[D_a × D_f]`
    pub context: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AveragedContext {
    /// `[D_a × D_f]`
    pub c_hat: Var,
    pub t_used: usize,
}

/// Per-phrase quantities that do not depend on the timestep.
#[derive(Clone, Copy, Debug)]
pub struct Prepared {
    v_a: Var,
    proj_v: Var,
    global_bias: Option<Var>,
    /// `v_a (W_ctx H)`, one weight per channel
    ctx_vector: Option<Var>,
}

/// Precomputes `W_v v_a` and, when `h` is given, the global terms.
pub fn prepare<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    v_a: Var,
    h: Option<Var>,
) -> Result<Prepared> {
    if tape.shape(v_a) != [p.d_a, p.d_f] {
        return Err(Error::shape(format!(
            "attention: v_a {:?} against D_a={}, D_f={}",
            tape.shape(v_a),
            p.d_a,
            p.d_f
        )));
    }
    let w_v = tape.param(store, p.w_v);
    let proj_v = tape.matmul(w_v, v_a)?;
    let (global_bias, ctx_vector) = match (h, p.w_g, p.w_ctx) {
        (Some(h), Some(w_g), Some(w_ctx)) => {
            if tape.shape(h) != [p.d_a] {
                return Err(Error::shape(format!("attention: H {:?} against D_a={}", tape.shape(h), p.d_a)));
            }
            let w_g = tape.param(store, w_g);
            let w_ctx = tape.param(store, w_ctx);
            let g = tape.matvec(w_g, h)?;
            let cell_weights = tape.matvec(w_ctx, h)?;
            let u = tape.matvec(v_a, cell_weights)?;
            (Some(g), Some(u))
        }
        (None, None, None) => (None, None),
        _ => return Err(Error::contract("attention: global embedding and parameters must both be present or absent")),
    };
    Ok(Prepared { v_a, proj_v, global_bias, ctx_vector })
}

/// Scores `z[j] = w_zᵀ tanh(W_v v_a[:,j] + W_h h_t (+ W_g H))`, `α = softmax(z)`,
/// and the context: `v_a (W_ctx H) αᵀ` with the global embedding, otherwise
/// `v_a` with column `j` scaled by `α[j]`.
pub fn step<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    prep: &Prepared,
    h_t: Var,
) -> Result<AttentionStep> {
    if tape.shape(h_t) != [p.d_a] {
        return Err(Error::shape(format!("attention: h_t {:?} against D_a={}", tape.shape(h_t), p.d_a)));
    }
    let w_h = tape.param(store, p.w_h);
    let mut query = tape.matvec(w_h, h_t)?;
    if let Some(g) = prep.global_bias {
        query = tape.add(query, g)?;
    }
    let pre = tape.add_col(prep.proj_v, query)?;
    let act = tape.tanh(pre);
    let w_z = tape.param(store, p.w_z);
    let z = tape.matmul(w_z, act)?;
    let z = tape.reshape(z, &[p.d_f])?;
    let alpha = tape.softmax(z)?;
    let context = match prep.ctx_vector {
        Some(u) => tape.outer(u, alpha)?,
        None => tape.mul_cols(prep.v_a, alpha)?,
    };
    Ok(AttentionStep { alpha, context })
}

/// Single step with the global embedding.
pub fn attention_step<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    v_a: Var,
    h_t: Var,
    h: Var,
) -> Result<AttentionStep> {
    let prep = prepare(tape, store, p, v_a, Some(h))?;
    step(tape, store, p, &prep, h_t)
}

/// Single step of the variant without the global embedding.
pub fn attention_step_no_h<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    v_a: Var,
    h_t: Var,
) -> Result<AttentionStep> {
    let prep = prepare(tape, store, p, v_a, None)?;
    step(tape, store, p, &prep, h_t)
}

/// Mean context over the first `true_length` steps.
pub fn average_context<T: Real>(
    tape: &mut Tape<T>,
    steps: &[AttentionStep],
    true_length: usize,
) -> Result<AveragedContext> {
    if steps.is_empty() || true_length == 0 {
        return Err(Error::contract("average_context: no steps to average"));
    }
    if true_length > steps.len() {
        return Err(Error::contract(format!(
            "average_context: true length {true_length} exceeds {} steps",
            steps.len()
        )));
    }
    let parts: Vec<Var> = steps[..true_length].iter().map(|s| s.context).collect();
    let c_hat = tape.mean_of(&parts)?;
    Ok(AveragedContext { c_hat, t_used: true_length })
}

/// Reshapes a flattened attention vector into `w_f` rows of `w_f` cells.
pub fn export_heatmap(alpha: &[f64], w_f: usize) -> Result<Vec<Vec<f64>>> {
    if w_f == 0 || alpha.len() != w_f * w_f {
        return Err(Error::shape(format!("heatmap: {} cells is not {w_f}×{w_f}", alpha.len())));
    }
    Ok(alpha.chunks(w_f).map(<[f64]>::to_vec).collect())
}

pub fn heatmap_csv(grid: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Binary 8-bit PGM, min-max normalized; a constant grid maps to zeros.
pub fn heatmap_pgm(grid: &[Vec<f64>]) -> Vec<u8> {
    let h = grid.len();
    let w = grid.first().map_or(0, Vec::len);
    let (lo, hi) = grid
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in grid.iter().flatten() {
        let x = if span > 0.0 { (v - lo) / span } else { 0.0 };
        out.push((x * 255.0).round() as u8);
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
pub fn write_heatmap(stem: &Path, grid: &[Vec<f64>]) -> Result<()> {
    let csv = stem.with_extension("csv");
    std::fs::write(&csv, heatmap_csv(grid)).map_err(|e| Error::io(format!("writing {}", csv.display()), e))?;
    let pgm = stem.with_extension("pgm");
    std::fs::write(&pgm, heatmap_pgm(grid)).map_err(|e| Error::io(format!("writing {}", pgm.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Coverage, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    fn params(store: &mut ParamStore<f64>, d_a: usize, d_f: usize, global: bool) -> AttentionParams {
        AttentionParams::init(store, d_a, d_f, global, &mut SplitMix64::seed_from_u64(5)).unwrap()
    }

    fn zeroed(store: &mut ParamStore<f64>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn mat(rows: usize, cols: usize, salt: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|i| ((i * 31 + salt * 17) % 23) as f64 / 11.0 - 1.0).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn zero_network_is_uniform_with_zero_context() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 4, true);
        zeroed(&mut store);
        let mut tape = Tape::inference();
        let v_a = tape.constant(mat(3, 4, 1));
        let h_t = tape.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.5, 0.0]).unwrap());
        let s = attention_step(&mut tape, &store, &p, v_a, h_t, h).unwrap();
        assert_eq!(tape.value(s.alpha), [0.25; 4]);
        assert!(tape.value(s.context).iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(s.context), tape.shape(v_a));
    }

    #[test]
    fn context_is_outer_product_of_weighted_features() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 2, true);
        // uniform attention, W_ctx H = [1, 1]
        store.get_mut(p.w_z).data_mut().iter_mut().for_each(|v| *v = 0.0);
        *store.get_mut(p.w_ctx.unwrap()) = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::inference();
        let v_a = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let h_t = tape.constant(Tensor::from_f64(&[2], &[0.3, 0.7]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[2], &[1.0, 5.0]).unwrap());
        let s = attention_step(&mut tape, &store, &p, v_a, h_t, h).unwrap();
        assert_eq!(tape.value(s.alpha), [0.5, 0.5]);
        assert_eq!(tape.value(s.context), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_cell_weights_give_zero_context() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 4, true);
        store.get_mut(p.w_ctx.unwrap()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::inference();
        let v_a = tape.constant(mat(3, 4, 2));
        let h_t = tape.constant(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
        let h = tape.constant(Tensor::from_f64(&[3], &[0.4, 0.5, 0.6]).unwrap());
        let s = attention_step(&mut tape, &store, &p, v_a, h_t, h).unwrap();
        assert!(tape.value(s.context).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_h_variant_reweights_columns() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 4, false);
        assert!(!p.uses_global());
        store.get_mut(p.w_z).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::inference();
        let va = mat(3, 4, 3);
        let v_a = tape.constant(va.clone());
        let h_t = tape.constant(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap());
        let s = attention_step_no_h(&mut tape, &store, &p, v_a, h_t).unwrap();
        for (c, v) in tape.value(s.context).iter().zip(va.data()) {
            assert!((c - v / 4.0).abs() < 1e-15);
        }
        let onehot = tape.constant(Tensor::from_f64(&[4], &[0.0, 0.0, 1.0, 0.0]).unwrap());
        let c = tape.mul_cols(v_a, onehot).unwrap();
        for (i, &x) in tape.value(c).iter().enumerate() {
            let expect = if i % 4 == 2 { va.data()[i] } else { 0.0 };
            assert_eq!(x, expect);
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 4, true);
        let mut tape = Tape::inference();
        let v_a = tape.constant(mat(3, 5, 0));
        let h_t = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(attention_step(&mut tape, &store, &p, v_a, h_t, h_t), Err(Error::Shape(_))));
        let v_a = tape.constant(mat(3, 4, 0));
        assert!(matches!(attention_step_no_h(&mut tape, &store, &p, v_a, h_t), Err(Error::Contract(_))));
    }

    #[test]
    fn averaging_examples() {
        let mut tape = Tape::<f64>::inference();
        let c = tape.constant(mat(2, 3, 1));
        let neg = tape.scale(c, -1.0);
        let a = tape.constant(Tensor::zeros(&[3]));
        let steps = [AttentionStep { alpha: a, context: c }, AttentionStep { alpha: a, context: neg }];
        let one = average_context(&mut tape, &steps, 1).unwrap();
        assert_eq!(tape.value(one.c_hat), tape.value(c));
        let both = average_context(&mut tape, &steps, 2).unwrap();
        assert!(tape.value(both.c_hat).iter().all(|&v| v == 0.0));
        assert_eq!(both.t_used, 2);
        let same = [steps[0]; 3];
        let avg = average_context(&mut tape, &same, 3).unwrap();
        for (x, y) in tape.value(avg.c_hat).iter().zip(tape.value(c)) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(average_context(&mut tape, &[], 1), Err(Error::Contract(_))));
        assert!(matches!(average_context(&mut tape, &steps, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn heatmap_examples() {
        assert_eq!(export_heatmap(&[0.25; 4], 2).unwrap(), vec![vec![0.25; 2]; 2]);
        let g = export_heatmap(&[0.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(g[1][1], 1.0);
        assert_eq!(g.iter().flatten().sum::<f64>(), 1.0);
        assert!(matches!(export_heatmap(&[0.2; 5], 2), Err(Error::Shape(_))));
        assert_eq!(heatmap_csv(&g), "0.000000,0.000000\n0.000000,1.000000\n");
        let pgm = heatmap_pgm(&g);
        assert_eq!(&pgm[..11], b"P5\n2 2\n255\n");
        assert_eq!(&pgm[11..], [0, 0, 0, 255]);
    }

    #[test]
    fn both_variants_pass_gradient_check() {
        for global in [true, false] {
            let mut store = ParamStore::new();
            let p = params(&mut store, 3, 4, global);
            let va = mat(3, 4, 7);
            let report = grad_check(&store, 1e-5, Coverage::All, |tape, s| {
                let v_a = tape.constant(va.clone());
                let h = tape.constant(Tensor::from_f64(&[3], &[0.3, -0.6, 0.9])?);
                let prep = prepare(tape, s, &p, v_a, global.then_some(h))?;
                let mut steps = Vec::new();
                for t in 0..3 {
                    let h_t = tape.constant(Tensor::from_f64(&[3], &[0.1 * t as f64, -0.2, 0.4])?);
                    steps.push(step(tape, s, &p, &prep, h_t)?);
                }
                let avg = average_context(tape, &steps, 3)?;
                let sq = tape.mul(avg.c_hat, avg.c_hat)?;
                let l = tape.sum(sq);
                let a = tape.mul(steps[1].alpha, steps[1].alpha)?;
                let a = tape.sum(a);
                tape.add(l, a)
            })
            .unwrap();
            assert!(report.missing.is_empty(), "{:?}", report.missing);
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    proptest! {
        #[test]
        fn alpha_is_a_distribution_and_context_matches_v_a(
            seed in 0u64..1000, d_a in 1usize..5, d_f in 1usize..7, global in any::<bool>()
        ) {
            let mut store = ParamStore::new();
            let p = AttentionParams::init(&mut store, d_a, d_f, global, &mut SplitMix64::seed_from_u64(seed)).unwrap();
            let mut tape = Tape::inference();
            let v_a = tape.constant(crate::numerics::init::normal(&[d_a, d_f], 2.0, &mut SplitMix64::seed_from_u64(seed + 1)));
            let h_t = tape.constant(crate::numerics::init::normal(&[d_a], 2.0, &mut SplitMix64::seed_from_u64(seed + 2)));
            let prep = prepare(&mut tape, &store, &p, v_a, global.then_some(h_t)).unwrap();
            let s = step(&mut tape, &store, &p, &prep, h_t).unwrap();
            let alpha = tape.value(s.alpha);
            prop_assert!(alpha.iter().all(|&a| a >= 0.0));
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(tape.shape(s.context), tape.shape(v_a));
        }

        #[test]
        fn context_scales_with_features_at_fixed_scores(lambda in 0.1f64..10.0) {
            let va = mat(3, 4, 9);
            let mut tape = Tape::inference();
            let v_a = tape.constant(va.clone());
            let alpha = tape.constant(Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
            let c = tape.mul_cols(v_a, alpha).unwrap();
            let scaled = tape.scale(v_a, lambda);
            let c2 = tape.mul_cols(scaled, alpha).unwrap();
            for (x, y) in tape.value(c).iter().zip(tape.value(c2)) {
                prop_assert!((x * lambda - y).abs() < 1e-12);
            }
        }

        #[test]
        fn average_is_order_invariant(perm in Just(vec![2usize, 0, 1]).prop_shuffle()) {
            let mut tape = Tape::<f64>::inference();
            let a = tape.constant(Tensor::zeros(&[2]));
            let steps: Vec<AttentionStep> = (0..3)
                .map(|i| AttentionStep { alpha: a, context: tape.constant(mat(2, 2, i)) })
                .collect();
            let shuffled: Vec<AttentionStep> = perm.iter().map(|&i| steps[i]).collect();
            let x = average_context(&mut tape, &steps, 3).unwrap();
            let y = average_context(&mut tape, &shuffled, 3).unwrap();
            for (p, q) in tape.value(x.c_hat).iter().zip(tape.value(y.c_hat)) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
