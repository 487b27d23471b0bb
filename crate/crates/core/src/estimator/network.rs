//! Fully connected tanh network with manual backpropagation.
//!
//! Generic over the float type: production models run in `f32`, gradient
//! checks instantiate the same code in `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub trait Real:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite")
    }

    fn to64(self) -> f64 {
        self.to_f64().expect("finite")
    }

    /// Hidden-layer activation.
    fn act(self) -> Self {
        self.tanh()
    }
}

impl Real for f64 {}

impl Real for f32 {
    /// Rational minimax tanh, within a few ulp of the exact value. Unlike
    /// the libm call it vectorizes.
    fn act(self) -> f32 {
        const CLAMP: f32 = 7.905_311;
        const A: [f32; 7] =
            [4.893_524_6e-3, 6.372_619_3e-4, 1.485_722_4e-5, 5.122_297e-8, -8.604_672e-11, 2.000_188e-13, -2.760_768_5e-16];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347e-4, 1.198_258_4e-6];
        if self.abs() < 4e-4 {
            return self;
        }
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let mut p = A[6];
        for &c in A[..6].iter().rev() {
            p = p * x2 + c;
        }
        let mut q = B[3];
        for &c in B[..3].iter().rev() {
            q = q * x2 + c;
        }
        x * p / q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    /// `fan_in x fan_out`, applied as `x · W + b`.
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub frozen: bool,
}

impl<F: Real> Layer<F> {
    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn cast<G: Real>(&self) -> Layer<G> {
        Layer { w: self.w.mapv(|x| G::of(x.to64())), b: self.b.mapv(|x| G::of(x.to64())), frozen: self.frozen }
    }
}

/// Hidden layers use tanh, the last layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    pub layers: Vec<Layer<F>>,
}

/// Parameter gradients, one entry per layer. Frozen layers keep zeros.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub w: Vec<Array2<F>>,
    pub b: Vec<Array1<F>>,
}

impl<F: Real> Network<F> {
    /// `dims = [input, hidden.., output]`; weights and biases uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn new(dims: &[usize], seed: u64) -> Network<F> {
        assert!(dims.len() >= 2, "need at least an input and an output width");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let bound = 1.0 / (d[0] as f64).sqrt();
                let w = Array2::from_shape_simple_fn((d[0], d[1]), || F::of(rng.random_range(-bound..bound)));
                let b = Array1::from_shape_simple_fn(d[1], || F::of(rng.random_range(-bound..bound)));
                Layer { w, b, frozen: false }
            })
            .collect();
        Network { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.fan_out()));
        d
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Network<G> {
        Network { layers: self.layers.iter().map(Layer::cast).collect() }
    }

    /// Activations `[x, a1, .., out]` for a batch `x` of shape `B x input`.
    pub fn forward_all(&self, x: ArrayView2<F>) -> Vec<Array2<F>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = acts.last().expect("nonempty");
            let mut z = layer.b.broadcast((input.nrows(), layer.fan_out())).expect("bias row").to_owned();
            general_mat_mul(F::one(), input, &layer.w, F::one(), &mut z);
            if i < last {
                z.mapv_inplace(F::act);
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        self.forward_all(x).pop().expect("nonempty")
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads {
            w: self.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            b: self.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
        }
    }

    /// Mean squared error of the batch and its gradient, written into `grads`.
    /// Backpropagation stops below the lowest trainable layer.
    pub fn loss_and_grad(&self, x: ArrayView2<F>, y: ArrayView2<F>, grads: &mut Grads<F>) -> F {
        let acts = self.forward_all(x);
        let (loss, mut delta) = output_delta(&acts, y);
        let Some(lowest) = self.layers.iter().position(|l| !l.frozen) else {
            return loss;
        };
        for l in (lowest..self.layers.len()).rev() {
            if !self.layers[l].frozen {
                layer_grads(&acts[l], &delta, grads, l);
            }
            if l == lowest {
                break;
            }
            delta = self.propagate(l, &delta, &acts[l]);
        }
        loss
    }

    /// Error at the input of layer `l`, through its weights and the tanh below.
    fn propagate(&self, l: usize, delta: &Array2<F>, input: &Array2<F>) -> Array2<F> {
        let mut back = Array2::<F>::zeros(input.raw_dim());
        general_mat_mul(F::one(), delta, &self.layers[l].w.t(), F::zero(), &mut back);
        Zip::from(&mut back).and(input).for_each(|d, &a| *d = *d * (F::one() - a * a));
        back
    }
}

/// Batch MSE and its gradient with respect to the network output.
fn output_delta<F: Real>(acts: &[Array2<F>], y: ArrayView2<F>) -> (F, Array2<F>) {
    let out = acts.last().expect("nonempty");
    let scale = F::of(2.0 / out.len() as f64);
    let mut delta = out - &y;
    let loss = delta.iter().fold(F::zero(), |acc, &d| acc + d * d) / F::of(out.len() as f64);
    delta.mapv_inplace(|d| d * scale);
    (loss, delta)
}

fn layer_grads<F: Real>(input: &Array2<F>, delta: &Array2<F>, grads: &mut Grads<F>, l: usize) {
    general_mat_mul(F::one(), &input.t(), delta, F::zero(), &mut grads.w[l]);
    grads.b[l].assign(&delta.sum_axis(Axis(0)));
}

/// Mean over all entries of `(pred - target)^2`.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim(), "shape mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    Zip::from(pred).and(target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / pred.len() as f64
}
