//! Recurrent and attention building blocks on top of the tape ops.

use rand::Rng;

use super::{ParamStore, Tape, Tensor, TensorError, TensorResult, Var};

/// Handles to one LSTM's weights already leased onto a tape.
///
/// Gate layout in the stacked `[4H, *]` matrices is `i, f, g, o`.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

impl LstmWeights {
    pub fn lease(tape: &mut Tape, store: &ParamStore, prefix: &str) -> TensorResult<Self> {
        Ok(Self {
            wx: tape.param(store, &format!("{prefix}_wx"))?,
            wh: tape.param(store, &format!("{prefix}_wh"))?,
            b: tape.param(store, &format!("{prefix}_b"))?,
        })
    }
}

/// Standard LSTM cell: returns `(h', c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    w: &LstmWeights,
    x: Var,
    h: Var,
    c: Var,
) -> TensorResult<(Var, Var)> {
    let hidden = tape.shape(h).first().copied().unwrap_or(0);
    let gates_x = tape.matvec(w.wx, x)?;
    let gates_h = tape.matvec(w.wh, h)?;
    let pre = tape.add(gates_x, gates_h)?;
    let pre = tape.add(pre, w.b)?;
    if tape.shape(pre) != [4 * hidden] {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            lhs: tape.shape(pre).to_vec(),
            rhs: vec![4 * hidden],
        });
    }
    let i_pre = tape.slice(pre, 0, hidden)?;
    let f_pre = tape.slice(pre, hidden, hidden)?;
    let g_pre = tape.slice(pre, 2 * hidden, hidden)?;
    let o_pre = tape.slice(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let g = tape.tanh(g_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let c_tanh = tape.tanh(c_new)?;
    let h_new = tape.mul(o, c_tanh)?;
    Ok((h_new, c_new))
}

/// Per-step states of a bidirectional LSTM encoder.
pub struct BiLstmOut {
    /// Forward and backward hidden states concatenated per input step.
    pub steps: Vec<Var>,
    /// Concatenated final hidden state (forward last, backward first).
    pub final_h: Var,
    /// Concatenated final cell state.
    pub final_c: Var,
}

/// Run forward and backward LSTMs over a sequence and concatenate the
/// per-step hidden states.
pub fn bilstm_encode(
    tape: &mut Tape,
    fw: &LstmWeights,
    bw: &LstmWeights,
    inputs: &[Var],
    hidden: usize,
) -> TensorResult<BiLstmOut> {
    if inputs.is_empty() {
        return Err(TensorError::Invalid("bilstm over empty sequence".into()));
    }
    let zero = tape.constant(Tensor::zeros(vec![hidden]));
    let (mut h_f, mut c_f) = (zero, zero);
    let mut fw_states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (h, c) = lstm_cell(tape, fw, x, h_f, c_f)?;
        h_f = h;
        c_f = c;
        fw_states.push(h);
    }
    let (mut h_b, mut c_b) = (zero, zero);
    let mut bw_states = vec![zero; inputs.len()];
    for (i, &x) in inputs.iter().enumerate().rev() {
        let (h, c) = lstm_cell(tape, bw, x, h_b, c_b)?;
        h_b = h;
        c_b = c;
        bw_states[i] = h;
    }
    let mut steps = Vec::with_capacity(inputs.len());
    for (f, b) in fw_states.iter().zip(&bw_states) {
        steps.push(tape.concat(&[*f, *b])?);
    }
    let final_h = tape.concat(&[h_f, h_b])?;
    let final_c = tape.concat(&[c_f, c_b])?;
    Ok(BiLstmOut {
        steps,
        final_h,
        final_c,
    })
}

/// Dot-product attention: project the query, score against each key,
/// softmax, and return the weighted sum plus the weights.
pub fn attention(
    tape: &mut Tape,
    query_proj: Var,
    query: Var,
    keys: &[Var],
) -> TensorResult<(Var, Var)> {
    if keys.is_empty() {
        return Err(TensorError::Invalid("attention over zero keys".into()));
    }
    let q = tape.matvec(query_proj, query)?;
    let key_mat = tape.stack_rows(keys)?;
    let scores = tape.matvec(key_mat, q)?;
    let weights = tape.softmax(scores)?;
    let context = tape.matvec_t(key_mat, weights)?;
    Ok((context, weights))
}

/// Uniform init scaled by 1/sqrt(fan_in), the usual small-LSTM choice.
pub fn init_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| rng.random::<f32>() * 2.0 * bound - bound)
        .collect();
    Tensor { shape, data }
}

/// Insert `prefix_{wx,wh,b}` LSTM parameters into the store.
pub fn init_lstm<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> TensorResult<()> {
    store.insert(
        &format!("{prefix}_wx"),
        init_uniform(rng, vec![4 * hidden, input], input),
    )?;
    store.insert(
        &format!("{prefix}_wh"),
        init_uniform(rng, vec![4 * hidden, hidden], hidden),
    )?;
    store.insert(&format!("{prefix}_b"), Tensor::zeros(vec![4 * hidden]))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lstm_store(input: usize, hidden: usize, zero: bool) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_lstm(&mut store, &mut rng, "t/lstm", input, hidden).unwrap();
        if zero {
            for name in ["t/lstm_wx", "t/lstm_wh", "t/lstm_b"] {
                let t = store.get_mut(name).unwrap();
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        store
    }

    #[test]
    fn lstm_zero_weights_zero_state_gives_zero_h() {
        let store = lstm_store(3, 4, true);
        let mut tape = Tape::new(false);
        let w = LstmWeights::lease(&mut tape, &store, "t/lstm").unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, -1.0, 0.5]));
        let h0 = tape.constant(Tensor::zeros(vec![4]));
        let (h, _) = lstm_cell(&mut tape, &w, x, h0, h0).unwrap();
        assert_eq!(tape.data(h), &[0.0; 4]);
    }

    #[test]
    fn single_step_bilstm_is_concat_of_both_cells() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_lstm(&mut store, &mut rng, "t/fw", 3, 4).unwrap();
        init_lstm(&mut store, &mut rng, "t/bw", 3, 4).unwrap();

        let mut tape = Tape::new(false);
        let fw = LstmWeights::lease(&mut tape, &store, "t/fw").unwrap();
        let bw = LstmWeights::lease(&mut tape, &store, "t/bw").unwrap();
        let x = tape.constant(Tensor::vector(vec![0.2, -0.4, 0.9]));
        let out = bilstm_encode(&mut tape, &fw, &bw, &[x], 4).unwrap();

        let zero = tape.constant(Tensor::zeros(vec![4]));
        let (hf, _) = lstm_cell(&mut tape, &fw, x, zero, zero).unwrap();
        let (hb, _) = lstm_cell(&mut tape, &bw, x, zero, zero).unwrap();
        let expect: Vec<f32> = tape
            .data(hf)
            .iter()
            .chain(tape.data(hb))
            .copied()
            .collect();
        assert_eq!(tape.data(out.steps[0]), expect.as_slice());
    }

    #[test]
    fn attention_single_key_returns_key() {
        let mut tape = Tape::new(false);
        let proj = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let q = tape.constant(Tensor::vector(vec![0.3, -0.7]));
        let k = tape.constant(Tensor::vector(vec![2.0, 5.0]));
        let (ctx, w) = attention(&mut tape, proj, q, &[k]).unwrap();
        assert_eq!(tape.data(w), &[1.0]);
        assert_eq!(tape.data(ctx), &[2.0, 5.0]);
    }

    #[test]
    fn attention_identical_keys_uniform_weights() {
        let mut tape = Tape::new(false);
        let proj = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let q = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let k = tape.constant(Tensor::vector(vec![0.5, -0.5]));
        let (_, w) = attention(&mut tape, proj, q, &[k, k, k]).unwrap();
        for x in tape.data(w) {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_two_keys_hand_softmax() {
        // Orthogonal keys; identity projection. Scores are plain dots.
        let mut tape = Tape::new(false);
        let proj = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let q = tape.constant(Tensor::vector(vec![2.0, 1.0]));
        let k1 = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let k2 = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let (_, w) = attention(&mut tape, proj, q, &[k1, k2]).unwrap();
        let e2 = (2.0f64).exp();
        let e1 = (1.0f64).exp();
        let expect = [(e2 / (e1 + e2)) as f32, (e1 / (e1 + e2)) as f32];
        let got = tape.data(w);
        assert!((got[0] - expect[0]).abs() < 1e-6);
        assert!((got[1] - expect[1]).abs() < 1e-6);
    }

    #[test]
    fn attention_empty_keys_is_error() {
        let mut tape = Tape::new(false);
        let proj = tape.constant(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let q = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        assert!(attention(&mut tape, proj, q, &[]).is_err());
    }
}
