//! Parameter layouts for the fixed layers used across the crate. Each layer
//! remembers the block indices it owns inside a [`ParamStore`]; at forward
//! time the store's blocks are bound onto a tape (one `Var` per block) and
//! the layer reads its `Var`s from that binding.

use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{OceanError, Result};

/// One `Var` per block of a store, in block order.
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn get(&self, index: usize) -> Var {
        self.0[index]
    }
}

/// Loads every block of `store` onto `tape`, as trainable leaves or as
/// constants.
pub fn bind<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Bound {
    Bound(
        (0..store.len())
            .map(|i| {
                if trainable {
                    tape.param(store, i)
                } else {
                    tape.frozen(store, i)
                }
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        }
    }
}

/// `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Gaussian weights with variance `gain / fan_in`, zero bias.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = if gain > 0.0 {
            store.normal(format!("{name}.w"), &[fan_in, fan_out], (gain / fan_in as f64).sqrt(), rng)
        } else {
            store.zeros(format!("{name}.w"), &[fan_in, fan_out])
        };
        let b = store.zeros(format!("{name}.b"), &[fan_out]);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p.get(self.w), p.get(self.b))
    }
}

/// Two-layer perceptron `W2·act(W1·x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp {
    /// `out_gain == 0` zero-initializes the output layer.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        act: Activation,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let l1 = Linear::new(store, &format!("{name}.l1"), input, hidden, act.gain(), rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), hidden, output, out_gain, rng);
        Mlp { l1, l2, act }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = self.act.apply(tape, h);
        self.l2.forward(tape, p, h)
    }
}

/// Gated recurrent cell; see [`Tape::gru_combine`] for the update.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: usize,
    pub wh: usize,
    pub bx: usize,
    pub bh: usize,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = store.normal(format!("{name}.wx"), &[input, 3 * hidden], (1.0 / input as f64).sqrt(), rng);
        let wh = store.normal(format!("{name}.wh"), &[hidden, 3 * hidden], (1.0 / hidden as f64).sqrt(), rng);
        let bx = store.zeros(format!("{name}.bx"), &[3 * hidden]);
        let bh = store.zeros(format!("{name}.bh"), &[3 * hidden]);
        Gru {
            wx,
            wh,
            bx,
            bh,
            input,
            hidden,
        }
    }

    /// Input projection `x·Wx + bx` (`[B, 3H]`), shareable across steps.
    pub fn project_input<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p.get(self.wx), p.get(self.bx))
    }

    /// One step from a pre-computed input projection.
    pub fn step_projected<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, gx: Var, h: Var) -> Result<Var> {
        let hv = tape.value(h);
        if !hv.is_finite() {
            return Err(OceanError::NonFinite("gru hidden state".into()));
        }
        let gh = tape.affine(h, p.get(self.wh), p.get(self.bh))?;
        tape.gru_combine(gx, gh, h)
    }

    /// `h' = (1 − z) ⊙ h + z ⊙ h̃`.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        if !tape.value(x).is_finite() {
            return Err(OceanError::NonFinite("gru input".into()));
        }
        let gx = self.project_input(tape, p, x)?;
        self.step_projected(tape, p, gx, h)
    }

    pub fn zero_state<T: Real>(&self, tape: &mut Tape<T>, batch: usize) -> Var {
        tape.constant(Tensor::zeros(&[batch, self.hidden]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::finite_diff_check;
    use crate::numcore::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_halves_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new(0);
        let gru = Gru::new(&mut store, "g", 2, 2, &mut rng);
        for i in 0..store.len() {
            store.block_mut(i).value.fill(0.0);
        }
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store, false);
        let e = tape.constant(Tensor::zeros(&[1, 2]));
        let h = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let h1 = gru.step(&mut tape, &p, e, h).unwrap();
        assert_eq!(tape.value(h1).data(), &[0.5, 0.0]);
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let h2 = gru.step(&mut tape, &p, e, z).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (i_dim, h_dim) = (3, 2);
        let mut store = ParamStore::<f64>::new(0);
        let gru = Gru::new(&mut store, "g", i_dim, h_dim, &mut rng);
        // nonzero biases too
        for idx in [gru.bx, gru.bh] {
            for (k, v) in store.block_mut(idx).value.data_mut().iter_mut().enumerate() {
                *v = 0.1 * k as f64 - 0.2;
            }
        }
        let x = [0.3, -0.7, 1.1];
        let h = [0.4, -0.2];
        let mut tape = Tape::new();
        let p = bind(&mut tape, &store, false);
        let xv = tape.constant(Tensor::from_f64(&[1, 3], &x).unwrap());
        let hv = tape.constant(Tensor::from_f64(&[1, 2], &h).unwrap());
        let out = gru.step(&mut tape, &p, xv, hv).unwrap();

        let wx = store.block(gru.wx).value.data();
        let wh = store.block(gru.wh).value.data();
        let bx = store.block(gru.bx).value.data();
        let bh = store.block(gru.bh).value.data();
        let proj = |col: usize| -> (f64, f64) {
            let mut gx = bx[col];
            for i in 0..i_dim {
                gx += x[i] * wx[i * 3 * h_dim + col];
            }
            let mut gh = bh[col];
            for j in 0..h_dim {
                gh += h[j] * wh[j * 3 * h_dim + col];
            }
            (gx, gh)
        };
        for j in 0..h_dim {
            let (xr, hr) = proj(j);
            let (xz, hz) = proj(h_dim + j);
            let (xn, hn) = proj(2 * h_dim + j);
            let r = sigmoid(xr + hr);
            let z = sigmoid(xz + hz);
            let n = (xn + r * hn).tanh();
            let want = (1.0 - z) * h[j] + z * n;
            assert!((tape.value(out).data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_and_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new(0);
        let gru = Gru::new(&mut store, "g", 3, 4, &mut rng);
        let mlp = Mlp::new(&mut store, "m", 4, 5, 2, Activation::Tanh, 1.0, &mut rng);
        let x = Tensor::from_f64(&[2, 3], &[0.1, 0.5, -0.3, 0.9, -1.2, 0.4]).unwrap();
        let rep = finite_diff_check(
            &store,
            |t, v| {
                let p = Bound(v.to_vec());
                let xv = t.constant(x.clone());
                let h0 = gru.zero_state(t, 2);
                let h1 = gru.step(t, &p, xv, h0)?;
                let h2 = gru.step(t, &p, xv, h1)?;
                let y = mlp.forward(t, &p, h2)?;
                let s = t.softmax(y)?;
                let s = t.pick(s, 1)?;
                Ok(s)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
