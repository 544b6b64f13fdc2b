use rand::Rng;

use super::{Graph, Init, Matrix, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W: in × out` and `b: 1 × out`. The bias is
/// optional: a map whose outputs only ever feed a shift-invariant softmax
/// gains nothing from one.
#[derive(Clone, Debug)]
pub struct Linear {
    name: String,
    weight: ParamId,
    bias: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut lin = Self::unbiased(store, name, in_dim, out_dim, rng)?;
        lin.bias = Some(store.register(&format!("{name}.bias"), 1, out_dim, Init::FanIn(in_dim), rng)?);
        Ok(lin)
    }

    /// Linear map `x·W` without a bias term.
    pub fn unbiased<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(&format!("{name}.weight"), in_dim, out_dim, Init::FanIn(in_dim), rng)?;
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    /// Re-attaches to parameters already present in `store`; the bias is
    /// picked up if one was registered.
    pub fn attach(store: &ParameterStore, name: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"))?;
        let bias = store.id(&format!("{name}.bias"));
        let (in_dim, out_dim) = store.value(weight).shape();
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.shape(x).1;
        if cols != self.in_dim {
            return Err(Error::Config(format!(
                "`{}` expects input width {}, got {cols}",
                self.name, self.in_dim
            )));
        }
        let w = g.param(self.weight);
        let xw = g.matmul(x, w);
        Ok(self.add_bias(g, xw))
    }

    /// Adds the bias row, if any, to `x`.
    pub fn add_bias(&self, g: &mut Graph, x: Var) -> Var {
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(x, b)
            }
            None => x,
        }
    }
}

pub(crate) fn lookup(store: &ParameterStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// Lookup table of row vectors. A lookup is a linear map from a one-hot
/// input, so entries start uniform in [-1, 1].
#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    width: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        entries: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.register(name, entries, width, Init::FanIn(1), rng)?;
        Ok(Embedding { table, width })
    }

    pub fn attach(store: &ParameterStore, name: &str) -> Result<Self> {
        let table = lookup(store, name)?;
        let width = store.value(table).cols();
        Ok(Embedding { table, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn entries(&self, store: &ParameterStore) -> usize {
        store.value(self.table).rows()
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let table = g.param(self.table);
        g.gather_rows(table, ids)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, width: usize) -> Result<Self> {
        let gain = store.insert(&format!("{name}.gain"), Matrix::filled(1, width, 1.0))?;
        let bias = store.insert(&format!("{name}.bias"), Matrix::zeros(1, width))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn attach(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(LayerNorm {
            gain: lookup(store, &format!("{name}.gain"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
}

/// Attention output plus one `queries × keys` weight matrix per head.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(name, width, heads)?;
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng)?,
            // a key bias only shifts every score of a query row by the same amount
            key: Linear::unbiased(store, &format!("{name}.key"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.value"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.output"), width, width, rng)?,
            heads,
        })
    }

    pub fn attach(store: &ParameterStore, name: &str, heads: usize) -> Result<Self> {
        let query = Linear::attach(store, &format!("{name}.query"))?;
        check_heads(name, query.out_dim(), heads)?;
        Ok(MultiHeadAttention {
            query,
            key: Linear::attach(store, &format!("{name}.key"))?,
            value: Linear::attach(store, &format!("{name}.value"))?,
            output: Linear::attach(store, &format!("{name}.output"))?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, values: Var) -> Result<Attended> {
        if g.shape(keys).0 != g.shape(values).0 {
            return Err(Error::InvalidArgument(format!(
                "attention keys have {} rows but values have {}",
                g.shape(keys).0,
                g.shape(values).0
            )));
        }
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, values)?;
        let head_dim = self.query.out_dim() / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outputs.push(g.matmul(attn, vh));
            weights.push(attn);
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_cols(&outputs)
        };
        Ok(Attended {
            output: self.output.forward(g, joined)?,
            weights,
        })
    }
}

fn check_heads(name: &str, width: usize, heads: usize) -> Result<()> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "`{name}`: width {width} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Single-direction LSTM with gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    input: Linear,
    recurrent: ParamId,
    hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, 4 * hidden, rng)?;
        let recurrent = store.register(
            &format!("{name}.recurrent"),
            hidden,
            4 * hidden,
            Init::FanIn(hidden),
            rng,
        )?;
        Ok(Lstm {
            input,
            recurrent,
            hidden,
        })
    }

    pub fn attach(store: &ParameterStore, name: &str) -> Result<Self> {
        let input = Linear::attach(store, &format!("{name}.input"))?;
        let recurrent = lookup(store, &format!("{name}.recurrent"))?;
        let hidden = store.value(recurrent).rows();
        Ok(Lstm {
            input,
            recurrent,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.input.in_dim()
    }

    /// Runs `batch` independent sequences of `steps` steps. `inputs` holds
    /// `steps · batch` rows, step-major. Returns the hidden state (`batch ×
    /// hidden`) at every time position, in time order regardless of
    /// direction.
    pub fn run(&self, g: &mut Graph, inputs: Var, steps: usize, batch: usize, reverse: bool) -> Result<Vec<Var>> {
        let projected = self.input.forward(g, inputs)?;
        let recurrent = g.param(self.recurrent);
        let h = self.hidden;
        let mut states: Vec<Option<Var>> = vec![None; steps];
        let mut prev: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let mut gates = g.slice_rows(projected, t * batch, batch);
            if let Some((h_prev, _)) = prev {
                let rec = g.matmul(h_prev, recurrent);
                gates = g.add(gates, rec);
            }
            let i = g.slice_cols(gates, 0, h);
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h, h);
            let f = g.sigmoid(f);
            let cand = g.slice_cols(gates, 2 * h, h);
            let cand = g.tanh(cand);
            let o = g.slice_cols(gates, 3 * h, h);
            let o = g.sigmoid(o);
            let mut cell = g.mul(i, cand);
            if let Some((_, c_prev)) = prev {
                let kept = g.mul(f, c_prev);
                cell = g.add(cell, kept);
            }
            let squashed = g.tanh(cell);
            let hidden = g.mul(o, squashed);
            states[t] = Some(hidden);
            prev = Some((hidden, cell));
        }
        Ok(states.into_iter().map(|s| s.expect("every step visited")).collect())
    }
}

/// Forward and backward LSTMs whose states are concatenated.
#[derive(Clone, Debug)]
pub struct BiLstm {
    forward: Lstm,
    backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BiLstm {
            forward: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng)?,
            backward: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng)?,
        })
    }

    pub fn attach(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(BiLstm {
            forward: Lstm::attach(store, &format!("{name}.fwd"))?,
            backward: Lstm::attach(store, &format!("{name}.bwd"))?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden() + self.backward.hidden()
    }

    pub fn in_dim(&self) -> usize {
        self.forward.in_dim()
    }

    /// Per-row `[forward state; backward state]` for an `N × in` sequence.
    pub fn forward_sequence(&self, g: &mut Graph, sequence: Var) -> Result<Var> {
        let steps = g.shape(sequence).0;
        if steps == 0 {
            return Err(Error::InvalidArgument("bilstm needs at least one row".into()));
        }
        let fwd = self.forward.run(g, sequence, steps, 1, false)?;
        let bwd = self.backward.run(g, sequence, steps, 1, true)?;
        let fwd = g.concat_rows(&fwd);
        let bwd = g.concat_rows(&bwd);
        Ok(g.concat_cols(&[fwd, bwd]))
    }

    /// Final states `[forward at last step; backward at first step]` of a
    /// batch of equal-length sequences laid out step-major.
    pub fn final_states(&self, g: &mut Graph, inputs: Var, steps: usize, batch: usize) -> Result<Var> {
        let fwd = self.forward.run(g, inputs, steps, batch, false)?;
        let bwd = self.backward.run(g, inputs, steps, batch, true)?;
        Ok(g.concat_cols(&[fwd[steps - 1], bwd[0]]))
    }
}

/// Softmax of a finite, non-empty vector, computed with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("softmax input is not finite".into()));
    }
    let mut out = logits.to_vec();
    super::graph::softmax_in_place(&mut out);
    Ok(out)
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales
/// the survivors.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, rng: &mut R) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    g.mask_mul(x, mask)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn linear_with(weight: Matrix, bias: Matrix) -> (ParameterStore, Linear) {
        let mut store = ParameterStore::new();
        store.insert("lin.weight", weight).unwrap();
        store.insert("lin.bias", bias).unwrap();
        let lin = Linear::attach(&store, "lin").unwrap();
        (store, lin)
    }

    fn apply(store: &ParameterStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new(store);
        let x = g.input(Matrix::row_vector(x.to_vec()));
        let y = lin.forward(&mut g, x).unwrap();
        g.value(y).values().to_vec()
    }

    #[test]
    fn linear_identity_and_bias() {
        let (store, lin) = linear_with(
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            Matrix::zeros(1, 2),
        );
        assert_eq!(apply(&store, &lin, &[1.0, 2.0]), vec![1.0, 2.0]);

        let (store, lin) = linear_with(Matrix::from_rows(&[[1.0], [1.0]]).unwrap(), Matrix::scalar(0.5));
        assert_eq!(apply(&store, &lin, &[1.0, 2.0]), vec![3.5]);

        let (store, lin) = linear_with(Matrix::from_rows(&[[0.3], [-2.0]]).unwrap(), Matrix::scalar(7.0));
        assert_eq!(apply(&store, &lin, &[0.0, 0.0]), vec![7.0]);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let (store, lin) = linear_with(Matrix::zeros(2, 1), Matrix::zeros(1, 1));
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::zeros(1, 3));
        let err = lin.forward(&mut g, x).unwrap_err();
        assert!(err.to_string().contains("`lin`"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    fn attention(width: usize, heads: usize) -> (ParameterStore, MultiHeadAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", width, heads, &mut rng).unwrap();
        (store, mha)
    }

    #[test]
    fn attention_single_key_returns_projected_value() {
        let (store, mha) = attention(4, 2);
        let mut g = Graph::new(&store);
        let q1 = g.input(Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4]]).unwrap());
        let q2 = g.input(Matrix::from_rows(&[[-3.0, 1.0, 0.0, 2.0]]).unwrap());
        let kv = g.input(Matrix::from_rows(&[[1.0, -1.0, 0.5, 0.0]]).unwrap());
        let a = mha.forward(&mut g, q1, kv, kv).unwrap();
        let b = mha.forward(&mut g, q2, kv, kv).unwrap();
        assert!(g.value(a.output).max_abs_diff(g.value(b.output)) < 1e-12);
        for w in a.weights {
            assert_eq!(g.value(w).values(), &[1.0]);
        }
    }

    #[test]
    fn attention_identical_keys_split_evenly() {
        let (store, mha) = attention(4, 2);
        let mut g = Graph::new(&store);
        let q = g.input(Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4]]).unwrap());
        let kv = g.input(Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]]).unwrap());
        let a = mha.forward(&mut g, q, kv, kv).unwrap();
        for w in a.weights {
            for v in g.value(w).values() {
                assert!((v - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_shapes_and_normalization() {
        let (store, mha) = attention(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(&store);
        let rand_m = |rng: &mut ChaCha8Rng, r: usize| {
            Matrix::from_vec(r, 6, (0..r * 6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        let q = g.input(rand_m(&mut rng, 3));
        let kv = g.input(rand_m(&mut rng, 5));
        let a = mha.forward(&mut g, q, kv, kv).unwrap();
        assert_eq!(g.shape(a.output), (3, 6));
        assert_eq!(a.weights.len(), 3);
        for w in &a.weights {
            for row in g.value(*w).row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let err = MultiHeadAttention::new(&mut store, "attn", 6, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bilstm_zero_parameters_give_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        BiLstm::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).values_mut().fill(0.0);
        }
        let lstm = BiLstm::attach(&store, "lstm").unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::filled(5, 3, 1.5));
        let y = lstm.forward_sequence(&mut g, x).unwrap();
        assert_eq!(g.shape(y), (5, 8));
        assert!(g.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_reversal_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParameterStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 3, 2, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let original = {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let y = lstm.forward_sequence(&mut g, xv).unwrap();
            g.value(y).clone()
        };

        // swap the parameter blocks of the two directions
        let mut swapped = ParameterStore::new();
        for id in store.ids() {
            let name = store.name(id);
            let other = if name.contains(".fwd.") {
                name.replace(".fwd.", ".bwd.")
            } else {
                name.replace(".bwd.", ".fwd.")
            };
            swapped
                .insert(name, store.value(store.id(&other).unwrap()).clone())
                .unwrap();
        }
        let reversed_rows: Vec<Vec<f64>> = (0..4).rev().map(|r| x.row(r).to_vec()).collect();
        let mut g = Graph::new(&swapped);
        let xv = g.input(Matrix::from_rows(&reversed_rows).unwrap());
        let y = lstm_attach(&swapped).forward_sequence(&mut g, xv).unwrap();
        let y = g.value(y);
        for r in 0..4 {
            let expect = original.row(3 - r);
            let got = y.row(r);
            // halves trade places: forward of the reversed input is the original backward
            for c in 0..2 {
                assert!((got[c] - expect[c + 2]).abs() < 1e-14);
                assert!((got[c + 2] - expect[c]).abs() < 1e-14);
            }
        }
    }

    fn lstm_attach(store: &ParameterStore) -> BiLstm {
        BiLstm::attach(store, "lstm").unwrap()
    }

    #[test]
    fn batched_final_states_match_single_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParameterStore::new();
        let lstm = BiLstm::new(&mut store, "chars", 2, 3, &mut rng).unwrap();
        let seqs: Vec<Matrix> = (0..3)
            .map(|_| Matrix::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        // step-major layout: row t*batch + b
        let mut rows = Vec::new();
        for t in 0..4 {
            for s in &seqs {
                rows.push(s.row(t).to_vec());
            }
        }
        let mut g = Graph::new(&store);
        let batch = g.input(Matrix::from_rows(&rows).unwrap());
        let finals = lstm.final_states(&mut g, batch, 4, 3).unwrap();
        let finals = g.value(finals).clone();
        for (b, s) in seqs.iter().enumerate() {
            let mut g = Graph::new(&store);
            let x = g.input(s.clone());
            let f = lstm.final_states(&mut g, x, 4, 1).unwrap();
            assert!(g
                .value(f)
                .row(0)
                .iter()
                .zip(finals.row(b))
                .all(|(a, c)| (a - c).abs() < 1e-14));
        }
    }
}
