//! Dense layers and parameter bookkeeping.
//!
//! Parameter-owning structs hand out their tensors in a fixed order through
//! [`Parameterized`]; binding a struct to a tape records the same tensors as
//! leaves in the same order, so gradients line up with `params_mut`.

use gdcn_tensor::{Result, Tape, Tensor, TensorError, Var};
use rand::Rng;

/// Ordered access to named parameter tensors.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn with_prefix<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// `y = x·W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("sized buffer"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    /// Takes the weight and bias vars, in that order, from `vars`.
    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> BoundLinear {
        BoundLinear {
            weight: vars.next().expect("missing weight var"),
            bias: vars.next().expect("missing bias var"),
        }
    }
}

impl Parameterized for Linear {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of linear layers with relu between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden…, out]`.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(self.layers.iter().map(Linear::out_dim));
        w
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            in_dim: self.in_dim(),
        }
    }

    pub fn attach(&self, vars: &mut impl Iterator<Item = Var>) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.attach(vars)).collect(),
            in_dim: self.in_dim(),
        }
    }
}

impl Parameterized for Mlp {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| with_prefix(&i.to_string(), l.named_params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    in_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward_named(tape, x, "mlp")
    }

    /// As [`forward`](Self::forward) but reports width mismatches under `op`.
    pub fn forward_named(&self, tape: &mut Tape, x: Var, op: &'static str) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(TensorError::Shape {
                op,
                shapes: vec![shape.to_vec(), vec![self.in_dim]],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn glorot_bounds() {
        let mut rng = seed::rng(3);
        let l = Linear::init(30, 20, &mut rng);
        let a = (6.0f64 / 50.0).sqrt();
        assert!(l.weight.data().iter().all(|w| w.abs() <= a));
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn names_and_mut_order_agree() {
        let mut rng = seed::rng(1);
        let mut mlp = Mlp::init(&[4, 3, 2], &mut rng);
        let names: Vec<String> = mlp.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["0.weight", "0.bias", "1.weight", "1.bias"]);
        let shapes: Vec<Vec<usize>> = mlp.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 3], vec![3], vec![3, 2], vec![2]]);
        assert_eq!(mlp.param_count(), 12 + 3 + 6 + 2);
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut rng = seed::rng(1);
        let mlp = Mlp::init(&[4, 3], &mut rng);
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            bound.forward_named(&mut tape, x, "encode"),
            Err(TensorError::Shape { op: "encode", .. })
        ));
    }
}
