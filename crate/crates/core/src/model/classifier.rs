use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `(in, hidden)`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `(hidden, classes)`
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn uniform(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl ClassifierParams {
    pub fn init(rng: &mut impl Rng, in_dim: usize, hidden: usize, classes: usize) -> Self {
        ClassifierParams {
            w1: uniform(rng, in_dim, &[in_dim, hidden]).with_grad(true),
            b1: uniform(rng, in_dim, &[hidden]).with_grad(true),
            w2: uniform(rng, hidden, &[hidden, classes]).with_grad(true),
            b2: uniform(rng, hidden, &[classes]).with_grad(true),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> ClassifierVars {
        let mut b = |t: &Tensor| {
            if track {
                tape.leaf(t)
            } else {
                tape.constant(t.detached())
            }
        };
        ClassifierVars {
            w1: b(&self.w1),
            b1: b(&self.b1),
            w2: b(&self.w2),
            b2: b(&self.b2),
        }
    }

    /// `(B, in) -> (B, classes)` logits.
    pub fn forward(&self, tape: &mut Tape, v: &ClassifierVars, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 2 || s[1] != self.in_dim() {
            return Err(Error::shape("classifier", &[s, self.w1.shape()]));
        }
        let h = tape.matmul(x, v.w1)?;
        let h = tape.add_row(h, v.b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, v.w2)?;
        tape.add_row(out, v.b2)
    }
}

/// Logits for a plain `(B, in)` matrix.
pub fn classifier(x: &Tensor, params: &ClassifierParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = params.bind(&mut tape, false);
    let xv = tape.constant(x.detached());
    let out = params.forward(&mut tape, &v, xv)?;
    Ok(tape.value(out).detached())
}
