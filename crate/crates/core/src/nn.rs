//! Layer building blocks recorded on a [`Tape`].
//!
//! Layers own only [`ParamId`]s; their tensors live in the model's
//! [`ParamStore`] and are bound per forward pass, so the same layer code runs
//! trainable (gradients flow to the store) or frozen (recorded as constants).

use dialogeval_tape::params::xavier;
use dialogeval_tape::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, input, output));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, output));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// Zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(input, output));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, output));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, t: &mut Tape, b: &Bindings, x: Var) -> Var {
        t.affine(x, b[self.weight], b[self.bias])
    }
}

/// Single-layer LSTM with fused gate matrices (gate order i, f, g, o).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_input = store.add(format!("{name}.w_input"), xavier(rng, input, 4 * hidden));
        let w_hidden = store.add(format!("{name}.w_hidden"), xavier(rng, hidden, 4 * hidden));
        // Forget-gate bias starts at 1.
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        let bias = store.add(format!("{name}.bias"), bias);
        Self {
            w_input,
            w_hidden,
            bias,
            hidden,
        }
    }

    pub fn zero_state(&self, t: &mut Tape) -> (Var, Var) {
        (
            t.leaf(Tensor::zeros(1, self.hidden)),
            t.leaf(Tensor::zeros(1, self.hidden)),
        )
    }

    pub fn step(&self, t: &mut Tape, b: &Bindings, x: Var, state: (Var, Var)) -> (Var, Var) {
        let (h, c) = state;
        let xi = t.matmul(x, b[self.w_input]);
        let hh = t.matmul(h, b[self.w_hidden]);
        let pre = t.add(xi, hh);
        let pre = t.add_row(pre, b[self.bias]);
        let n = self.hidden;
        let i = t.slice_cols(pre, 0, n);
        let f = t.slice_cols(pre, n, n);
        let g = t.slice_cols(pre, 2 * n, n);
        let o = t.slice_cols(pre, 3 * n, n);
        let i = t.sigmoid(i);
        let f = t.sigmoid(f);
        let g = t.tanh(g);
        let o = t.sigmoid(o);
        let fc = t.mul(f, c);
        let ig = t.mul(i, g);
        let c_new = t.add(fc, ig);
        let tc = t.tanh(c_new);
        let h_new = t.mul(o, tc);
        (h_new, c_new)
    }

    /// Runs over the rows of `xs` and returns the final hidden state.
    pub fn run(&self, t: &mut Tape, b: &Bindings, xs: Var) -> Var {
        let mut state = self.zero_state(t);
        for r in 0..t.shape(xs).0 {
            let x = t.row(xs, r);
            state = self.step(t, b, x, state);
        }
        state.0
    }
}

/// Single-layer GRU (gate order r, z, n) with separate input and hidden
/// biases, so `n = tanh(x W_n + b_in + r * (h U_n + b_hn))`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w_input: store.add(format!("{name}.w_input"), xavier(rng, input, 3 * hidden)),
            w_hidden: store.add(format!("{name}.w_hidden"), xavier(rng, hidden, 3 * hidden)),
            b_input: store.add(format!("{name}.b_input"), Tensor::zeros(1, 3 * hidden)),
            b_hidden: store.add(format!("{name}.b_hidden"), Tensor::zeros(1, 3 * hidden)),
            hidden,
        }
    }

    /// Input projections for a whole sequence at once (`len x 3h`).
    pub fn project_inputs(&self, t: &mut Tape, b: &Bindings, xs: Var) -> Var {
        t.affine(xs, b[self.w_input], b[self.b_input])
    }

    /// One step given the precomputed input projection row `xp` (`1 x 3h`).
    pub fn step_projected(&self, t: &mut Tape, b: &Bindings, xp: Var, h: Var) -> Var {
        let n = self.hidden;
        let hp = t.affine(h, b[self.w_hidden], b[self.b_hidden]);
        let xr = t.slice_cols(xp, 0, n);
        let xz = t.slice_cols(xp, n, n);
        let xn = t.slice_cols(xp, 2 * n, n);
        let hr = t.slice_cols(hp, 0, n);
        let hz = t.slice_cols(hp, n, n);
        let hn = t.slice_cols(hp, 2 * n, n);
        let r = t.add(xr, hr);
        let r = t.sigmoid(r);
        let z = t.add(xz, hz);
        let z = t.sigmoid(z);
        let rh = t.mul(r, hn);
        let cand = t.add(xn, rh);
        let cand = t.tanh(cand);
        // h' = n + z * (h - n)
        let diff = t.sub(h, cand);
        let zd = t.mul(z, diff);
        t.add(cand, zd)
    }

    pub fn step(&self, t: &mut Tape, b: &Bindings, x: Var, h: Var) -> Var {
        let xp = self.project_inputs(t, b, x);
        self.step_projected(t, b, xp, h)
    }
}

/// Stack of `Linear -> ReLU` blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { input } else { hidden };
                Linear::new(store, &format!("{name}.{i}"), fan_in, hidden, rng)
            })
            .collect();
        Self { layers }
    }

    /// `dropout` holds one optional keep-mask per layer output.
    pub fn forward(&self, t: &mut Tape, b: &Bindings, mut x: Var, masks: Option<&[Tensor]>) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            let h = l.forward(t, b, x);
            x = t.relu(h);
            if let Some(m) = masks.and_then(|m| m.get(i)) {
                x = t.mul_const(x, m.clone());
            }
        }
        x
    }
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask(rng: &mut impl Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    let keep = 1.0 - p;
    let data = (0..rows * cols)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Sinusoidal position table (`len x dim`).
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use dialogeval_tape::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_step_matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", 3, 2, &mut rng);
        let x = [0.3, -0.2, 0.9];
        let h = [0.1, -0.4];
        let mut t = Tape::new();
        let b = t.bind(&store, false);
        let xv = t.leaf(Tensor::row_vector(x.to_vec()));
        let hv = t.leaf(Tensor::row_vector(h.to_vec()));
        let out = gru.step(&mut t, &b, xv, hv);

        let wi = store.get(gru.w_input);
        let wh = store.get(gru.w_hidden);
        let dot_x = |col: usize| (0..3).map(|k| x[k] * wi.get(k, col)).sum::<f64>();
        let dot_h = |col: usize| (0..2).map(|k| h[k] * wh.get(k, col)).sum::<f64>();
        for j in 0..2 {
            let r = sigmoid(dot_x(j) + dot_h(j));
            let z = sigmoid(dot_x(2 + j) + dot_h(2 + j));
            let n = (dot_x(4 + j) + r * dot_h(4 + j)).tanh();
            let expect = (1.0 - z) * n + z * h[j];
            assert!((t.value(out).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_are_distinct() {
        let p = sinusoidal_positions(6, 8);
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(p.row(i) != p.row(j));
            }
        }
    }
}
