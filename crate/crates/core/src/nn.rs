//! Parameter storage and the fully connected building blocks.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter groups; each network of the model owns exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    ContentEncoder,
    StyleEncoder,
    TaskHead,
    Generator,
    ImageCritic,
    DualCritic,
    Perceptual,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::ContentEncoder,
        Group::StyleEncoder,
        Group::TaskHead,
        Group::Generator,
        Group::ImageCritic,
        Group::DualCritic,
        Group::Perceptual,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::ContentEncoder => "e_c",
            Group::StyleEncoder => "e_d",
            Group::TaskHead => "e_t",
            Group::Generator => "g",
            Group::ImageCritic => "d_x",
            Group::DualCritic => "d_c",
            Group::Perceptual => "e_p",
        }
    }

    /// Critic groups are updated in the critic phase, everything else
    /// except the frozen perceptual map in the generator phase.
    pub fn is_critic(self) -> bool {
        matches!(self, Group::ImageCritic | Group::DualCritic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape variables for the parameters of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    /// The variable bound for `id`; an error if its group was left unbound.
    pub fn var(&self, id: ParamId) -> Result<Var> {
        self.vars[id.0].ok_or_else(|| {
            Error::Contract(format!("parameter #{} is not bound on this tape", id.0))
        })
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn count_in(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`. Parameters whose group is not
    /// `trainable` (and the perceptual group, always) enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> Bindings {
        self.bind_groups(tape, &Group::ALL, trainable)
    }

    /// Like [`ParamStore::bind`] but records only parameters of `groups`.
    pub fn bind_groups(
        &self,
        tape: &mut Tape,
        groups: &[Group],
        trainable: impl Fn(Group) -> bool,
    ) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if !groups.contains(&p.group) {
                    return None;
                }
                let mut t = p.value.clone();
                let on = p.group != Group::Perceptual && trainable(p.group);
                t.set_requires_grad(on);
                Some(tape.leaf(t))
            })
            .collect();
        Bindings { vars }
    }

    /// Gradients left on the bound variables after a backward pass; `None`
    /// for parameters that were constants or did not influence the loss.
    pub fn grads(&self, tape: &Tape, bind: &Bindings) -> Vec<Option<Vec<f64>>> {
        bind.vars
            .iter()
            .map(|v| v.and_then(|v| tape.grad(v)).map(<[f64]>::to_vec))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
}

/// Slope of the leaky ReLU used by the critics.
pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform fan-in initialization `U(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let weight = store.add(
            format!("{}.{name}.weight", group.prefix()),
            group,
            Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
        );
        let bias = store.add(
            format!("{}.{name}.bias", group.prefix()),
            group,
            Tensor::zeros(&[fan_out]),
        );
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.fan_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape.to_vec(),
                rhs: vec![self.fan_in, self.fan_out],
            });
        }
        let h = tape.matmul(x, bind.var(self.weight)?)?;
        tape.add(h, bind.var(self.bias)?)
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// (none after the last one).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}{i}"), group, w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bind, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_bounded_with_zero_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(&mut store, "fc", Group::TaskHead, 16, 4, &mut rng);
        let w = &store.get(l.weight).value;
        assert_eq!(w.shape(), &[16, 4]);
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        assert!(store.get(l.bias).value.data().iter().all(|v| *v == 0.0));
        assert_eq!(store.get(l.weight).name, "e_t.fc.weight");
    }

    #[test]
    fn perceptual_group_never_trainable() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Linear::new(&mut store, "p", Group::Perceptual, 3, 2, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::full(&[2, 3], 0.5));
        let y = l.forward(&mut tape, &b, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(store.grads(&tape, &b).iter().all(Option::is_none));
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Linear::new(&mut store, "fc", Group::Generator, 3, 2, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(l.forward(&mut tape, &b, x).is_err());
    }
}
