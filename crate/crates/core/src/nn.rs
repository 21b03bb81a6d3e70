//! Small feed-forward networks: the parameter maps, samplers and
//! discriminators are all realized as these.

use rand::Rng;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Activation applied between (and optionally after) affine layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply<'t, S: Scalar>(self, x: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Affine-activation chain with owned parameter tensors.
#[derive(Clone, Debug)]
pub struct Mlp<S> {
    pub weights: Vec<Tensor<S>>,
    pub biases: Vec<Tensor<S>>,
    pub hidden_act: Activation,
    pub out_act: Activation,
    dims: Vec<usize>,
}

impl<S: Scalar> Mlp<S> {
    /// `dims` = [in, hidden.., out]. Weights drawn uniformly scaled by
    /// 1/sqrt(fan_in), biases zero.
    pub fn new<R: Rng>(
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = if fan_in == 0 {
                1.0
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            let data: Vec<S> = (0..fan_in * fan_out)
                .map(|_| S::from_f64_c(rng.gen_range(-bound..bound)))
                .collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], data).expect("shape/data agree"));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Mlp {
            weights,
            biases,
            hidden_act,
            out_act,
            dims: dims.to_vec(),
        }
    }

    /// All-zero parameters (useful for tests: sigmoid head outputs 0.5).
    pub fn zeroed(dims: &[usize], hidden_act: Activation, out_act: Activation) -> Self {
        let mut m = Self::new(dims, hidden_act, out_act, &mut rand::rngs::mock::StepRng::new(0, 0));
        for w in &mut m.weights {
            *w = Tensor::zeros(w.shape());
        }
        m
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Register parameters on a tape for one forward/backward cycle.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BoundMlp<'t, S> {
        BoundMlp {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
            hidden_act: self.hidden_act,
            out_act: self.out_act,
        }
    }

    /// Flat view of parameter tensors, weights interleaved with biases.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    /// Convenience: evaluate without keeping gradients.
    pub fn eval(&self, input: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = self.bind(&tape).forward(x)?;
        Ok(y.value())
    }
}

/// An [`Mlp`] whose parameters are recorded on a tape.
pub struct BoundMlp<'t, S> {
    pub weights: Vec<Var<'t, S>>,
    pub biases: Vec<Var<'t, S>>,
    hidden_act: Activation,
    out_act: Activation,
}

impl<'t, S: Scalar> BoundMlp<'t, S> {
    pub fn forward(&self, input: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        let mut x = input;
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            x = x.matmul(*w)?.add(*b)?;
            x = if i == last {
                self.out_act.apply(x)?
            } else {
                self.hidden_act.apply(x)?
            };
        }
        Ok(x)
    }

    /// Parameter vars in the same order as [`Mlp::params`].
    pub fn param_vars(&self) -> Vec<Var<'t, S>> {
        self.weights.iter().chain(self.biases.iter()).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{finite_diff_grad, rel_err};
    use rand::SeedableRng;

    #[test]
    fn zero_net_sigmoid_outputs_half() {
        let m = Mlp::<f64>::zeroed(&[3, 4, 1], Activation::Tanh, Activation::Sigmoid);
        let x = Tensor::new(vec![2, 3], vec![1., -2., 3., 0., 5., -1.]).unwrap();
        let y = m.eval(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut m = Mlp::<f64>::zeroed(&[2, 2], Activation::Identity, Activation::Identity);
        m.weights[0] = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        m.biases[0] = Tensor::new(vec![2], vec![10., 20.]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1., 1.]).unwrap();
        let y = m.eval(&x).unwrap();
        assert_eq!(y.data(), &[14., 26.]);
    }

    #[test]
    fn first_layer_grads_match_finite_diff() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::<f64>::new(&[3, 6, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64) * 0.1 - 0.6).collect()).unwrap();

        let eval = |w0: &Tensor<f64>| -> Result<(f64, Tensor<f64>), TensorError> {
            let tape = Tape::new();
            let mut mm = m.clone();
            mm.weights[0] = w0.clone();
            let b = mm.bind(&tape);
            let y = b.forward(tape.leaf(x.clone()))?;
            let loss = y.sum()?;
            let g = tape.backward(loss.id)?;
            Ok((loss.value().item()?, g.wrt(b.weights[0])))
        };
        let (_, grad) = eval(&m.weights[0]).unwrap();
        let mut params = vec![m.weights[0].clone()];
        let fd = finite_diff_grad(&mut params, |p| eval(&p[0]).map(|r| r.0), 1e-5).unwrap();
        for (&a, &b) in grad.data().iter().zip(fd[0].data()) {
            assert!(rel_err(a, b) < 1e-4);
        }
    }
}
