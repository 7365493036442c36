//! Bidirectional GRU encoder and decoder, the word head, and the caption loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::textproc::TokenizedPhrase;

/// One GRU direction. Gate blocks are packed in `(update, reset, candidate)`
/// order along the `3·D_h` axis.
#[derive(Clone, Debug)]
pub struct GruParams {
    /// `[D_in × 3D_h]`
    pub w_x: ParamId,
    /// `[3D_h]`
    pub b: ParamId,
    /// `[2D_h × D_h]`, update and reset rows
    pub u_zr: ParamId,
    /// `[D_h × D_h]`
    pub u_n: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GruParams {
            w_x: store.insert(format!("{prefix}.w_x"), init::glorot(&[d_in, 3 * d_h], d_in, d_h, rng))?,
            b: store.insert(format!("{prefix}.b"), init::zeros(&[3 * d_h]))?,
            u_zr: store.insert(format!("{prefix}.u_zr"), init::glorot(&[2 * d_h, d_h], d_h, d_h, rng))?,
            u_n: store.insert(format!("{prefix}.u_n"), init::glorot(&[d_h, d_h], d_h, d_h, rng))?,
            d_in,
            d_h,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl BiGruParams {
    /// Two directions of `d_out / 2` units each.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_out == 0 || d_out % 2 != 0 {
            return Err(Error::config(format!("bidirectional width {d_out} must be positive and even")));
        }
        Ok(BiGruParams {
            fwd: GruParams::init(store, &format!("{prefix}.fwd"), d_in, d_out / 2, rng)?,
            bwd: GruParams::init(store, &format!("{prefix}.bwd"), d_in, d_out / 2, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        2 * self.fwd.d_h
    }
}

/// Encoder BiGRU plus the projection producing the global embedding.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub gru: BiGruParams,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl EncoderParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, d_in: usize, d_a: usize, rng: &mut impl Rng) -> Result<Self> {
        let gru = BiGruParams::init(store, "encoder", d_in, d_a, rng)?;
        Ok(EncoderParams {
            gru,
            w_h: store.insert("encoder.w_h", init::glorot(&[d_a, d_a], d_a, d_a, rng))?,
            b_h: store.insert("encoder.b_h", init::zeros(&[d_a]))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncodingResult {
    /// global phrase embedding `[D_a]`
    pub h: Var,
    /// `[T × D_a]`
    pub states: Var,
    pub final_fwd: Var,
    pub final_bwd: Var,
}

/// One GRU update `h' = (1 − z)⊙h + z⊙h̃` for input `x[D_in]`.
pub fn gru_cell_step<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &GruParams,
    x: Var,
    h_prev: Var,
) -> Result<Var> {
    if tape.shape(x) != [p.d_in] || tape.shape(h_prev) != [p.d_h] {
        return Err(Error::shape(format!(
            "gru step: x {:?}, h {:?} against D_in={}, D_h={}",
            tape.shape(x),
            tape.shape(h_prev),
            p.d_in,
            p.d_h
        )));
    }
    let x_row = tape.reshape(x, &[1, p.d_in])?;
    let w_x = tape.param(store, p.w_x);
    let b = tape.param(store, p.b);
    let proj = tape.matmul(x_row, w_x)?;
    let proj = tape.reshape(proj, &[3 * p.d_h])?;
    let proj = tape.add(proj, b)?;
    step_projected(tape, store, p, proj, h_prev)
}

/// GRU update given the precomputed input projection `W x + b` of width `3D_h`.
fn step_projected<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &GruParams,
    proj: Var,
    h: Var,
) -> Result<Var> {
    let d = p.d_h;
    let u_zr = tape.param(store, p.u_zr);
    let u_n = tape.param(store, p.u_n);
    let x_zr = tape.slice(proj, 0, 2 * d)?;
    let x_n = tape.slice(proj, 2 * d, d)?;
    let h_zr = tape.matvec(u_zr, h)?;
    let pre = tape.add(x_zr, h_zr)?;
    let gates = tape.sigmoid(pre);
    let z = tape.slice(gates, 0, d)?;
    let r = tape.slice(gates, d, d)?;
    let rh = tape.mul(r, h)?;
    let h_n = tape.matvec(u_n, rh)?;
    let pre_n = tape.add(x_n, h_n)?;
    let cand = tape.tanh(pre_n);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Runs one direction over `x_seq[T × D_in]`; states are returned in time order.
fn run_direction<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &GruParams,
    x_seq: Var,
    reverse: bool,
) -> Result<Vec<Var>> {
    let t_len = match tape.shape(x_seq) {
        [t, d] if *d == p.d_in && *t > 0 => *t,
        s => return Err(Error::shape(format!("gru: sequence {s:?} against D_in={}", p.d_in))),
    };
    let w_x = tape.param(store, p.w_x);
    let b = tape.param(store, p.b);
    let proj = tape.matmul(x_seq, w_x)?;
    let proj = tape.add_row(proj, b)?;
    let mut h = tape.constant(Tensor::zeros(&[p.d_h]));
    let mut states = vec![h; t_len];
    let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
    for t in order {
        let xp = tape.row(proj, t)?;
        h = step_projected(tape, store, p, xp, h)?;
        states[t] = h;
    }
    Ok(states)
}

/// Per-step concatenated states plus each direction's final state.
fn run_bigru<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &BiGruParams,
    x_seq: Var,
) -> Result<(Var, Var, Var)> {
    let fwd = run_direction(tape, store, &p.fwd, x_seq, false)?;
    let bwd = run_direction(tape, store, &p.bwd, x_seq, true)?;
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let states = tape.stack_rows(&rows)?;
    Ok((states, *fwd.last().expect("non-empty sequence"), bwd[0]))
}

/// Encoder pass over `x_seq[T × (D_w + D_e)]`; `H = W_H [h_fwd_T ; h_bwd_1] + b`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &EncoderParams,
    x_seq: Var,
) -> Result<EncodingResult> {
    let (states, final_fwd, final_bwd) = run_bigru(tape, store, &p.gru, x_seq)?;
    let last = tape.concat(&[final_fwd, final_bwd])?;
    let w = tape.param(store, p.w_h);
    let b = tape.param(store, p.b_h);
    let proj = tape.matvec(w, last)?;
    let h = tape.add(proj, b)?;
    Ok(EncodingResult { h, states, final_fwd, final_bwd })
}

/// Decoder pass over per-step inputs `[x_t ; H]`; output is `[T × D_a]`.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &BiGruParams,
    x_seq: Var,
    h: Var,
) -> Result<Var> {
    let t_len = match tape.shape(x_seq) {
        [t, _] => *t,
        s => return Err(Error::shape(format!("decode: sequence must be T×D, got {s:?}"))),
    };
    let rep = tape.repeat_rows(h, t_len)?;
    let input = tape.hconcat(x_seq, rep)?;
    Ok(run_bigru(tape, store, p, input)?.0)
}

/// Logits over the vocabulary from `mean_j(c_t + h_t 1ᵀ)`.
pub fn word_logits<T: Real>(tape: &mut Tape<T>, w_p: Var, h_t: Var, c_t: Var) -> Result<Var> {
    let pooled = pool_step(tape, h_t, c_t)?;
    tape.matvec(w_p, pooled)
}

/// Softmax of [`word_logits`].
pub fn word_distribution<T: Real>(tape: &mut Tape<T>, w_p: Var, h_t: Var, c_t: Var) -> Result<Var> {
    let logits = word_logits(tape, w_p, h_t, c_t)?;
    tape.softmax(logits)
}

fn pool_step<T: Real>(tape: &mut Tape<T>, h_t: Var, c_t: Var) -> Result<Var> {
    let (d_a, _) = match tape.shape(c_t) {
        [a, f] => (*a, *f),
        s => return Err(Error::shape(format!("word head: context must be D_a×D_f, got {s:?}"))),
    };
    if tape.shape(h_t) != [d_a] {
        return Err(Error::shape(format!("word head: h_t {:?} against D_a={d_a}", tape.shape(h_t))));
    }
    let sum = tape.add_col(c_t, h_t)?;
    tape.mean_cols(sum)
}

/// Row-stacked logits `[T × |V|]` for decoder states `h[T × D_a]` and one
/// context per step.
pub fn word_logits_seq<T: Real>(tape: &mut Tape<T>, w_p: Var, h: Var, contexts: &[Var]) -> Result<Var> {
    let pooled = contexts
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let h_t = tape.row(h, t)?;
            pool_step(tape, h_t, c)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&pooled)?;
    let w_t = tape.transpose(w_p)?;
    tape.matmul(stacked, w_t)
}

/// Mean cross-entropy of predicting token `y_t` at each position `t < true_length`.
pub fn caption_loss<T: Real>(tape: &mut Tape<T>, logits_seq: Var, tokens: &TokenizedPhrase) -> Result<Var> {
    let rows = match tape.shape(logits_seq) {
        [n, _] => *n,
        s => return Err(Error::shape(format!("caption loss: logits must be T×|V|, got {s:?}"))),
    };
    if rows < tokens.true_length || tokens.true_length == 0 {
        return Err(Error::shape(format!(
            "caption loss: {rows} logit rows for a phrase of true length {}",
            tokens.true_length
        )));
    }
    let picks: Vec<(usize, usize)> = tokens.token_ids[..tokens.true_length].iter().copied().enumerate().collect();
    tape.cross_entropy(logits_seq, &picks)
}
