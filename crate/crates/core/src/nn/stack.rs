use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv2d, ConvGeom, Float, Maps, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    fn apply<T: Float>(self, data: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(T::zero())),
            Activation::LeakyRelu(a) => {
                let a = T::of(a);
                data.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = *v * a
                    }
                })
            }
            Activation::Sigmoid => data.iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
    }

    /// Multiplies `grad` by the activation derivative, expressed through the
    /// activation output `out`.
    fn backprop<T: Float>(self, out: &[T], grad: &mut [T]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, &y)| {
                if y <= T::zero() {
                    *g = T::zero()
                }
            }),
            Activation::LeakyRelu(a) => {
                let a = T::of(a);
                grad.iter_mut().zip(out).for_each(|(g, &y)| {
                    if y < T::zero() {
                        *g = *g * a
                    }
                })
            }
            Activation::Sigmoid => grad
                .iter_mut()
                .zip(out)
                .for_each(|(g, &y)| *g = *g * y * (T::one() - y)),
        }
    }

    /// He-init gain for layers feeding this activation.
    fn gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::LeakyRelu(a) => (2.0 / (1.0 + a * a)).sqrt(),
            Activation::Identity | Activation::Sigmoid => 1.0,
        }
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sequential convolutions: `hidden` after every layer but the last, `head` after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub layers: Vec<Conv2d<T>>,
    pub hidden: Activation,
    pub head: Activation,
}

/// Per-layer activations cached by [`ConvStack::forward_train`].
#[derive(Clone, Debug)]
pub struct StackTape<T> {
    input_shapes: Vec<(usize, usize, usize)>,
    cols: Vec<Vec<T>>,
    outputs: Vec<Maps<T>>,
}

impl<T: Float> ConvStack<T> {
    pub fn init<R: Rng + ?Sized>(
        geoms: &[ConvGeom],
        hidden: Activation,
        head: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(!geoms.is_empty());
        let layers = geoms
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let act = if i + 1 == geoms.len() { head } else { hidden };
                Conv2d::init(g, act.gain(), rng)
            })
            .collect();
        Self {
            layers,
            hidden,
            head,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].geom.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().unwrap().geom.out_channels
    }

    fn activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.head
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &Maps<T>) -> Maps<T> {
        let mut cur: Option<Maps<T>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut out, _) = layer.forward(cur.as_ref().unwrap_or(x));
            self.activation(i).apply(&mut out.data);
            cur = Some(out);
        }
        cur.unwrap()
    }

    pub fn forward_train(&self, x: &Maps<T>) -> (Maps<T>, StackTape<T>) {
        let mut tape = StackTape {
            input_shapes: Vec::with_capacity(self.layers.len()),
            cols: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &tape.outputs[i - 1] };
            tape.input_shapes
                .push((input.channels, input.height, input.width));
            let (mut out, cols) = layer.forward(input);
            self.activation(i).apply(&mut out.data);
            tape.cols.push(cols);
            tape.outputs.push(out);
        }
        (tape.outputs.last().unwrap().clone(), tape)
    }

    /// Backpropagates `grad` (w.r.t. the stack output), accumulating into `grads`.
    pub fn backward(
        &self,
        tape: &StackTape<T>,
        mut grad: Maps<T>,
        grads: &mut ConvStack<T>,
        want_input_grad: bool,
    ) -> Option<Maps<T>> {
        for i in (0..self.layers.len()).rev() {
            self.activation(i)
                .backprop(&tape.outputs[i].data, &mut grad.data);
            let need = i > 0 || want_input_grad;
            grad = self.layers[i].backward(
                &tape.cols[i],
                tape.input_shapes[i],
                &grad,
                &mut grads.layers[i],
                need,
            )?;
        }
        Some(grad)
    }
}

impl<T: Float> Params<T> for ConvStack<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Conv2d::zeros(l.geom)).collect(),
            hidden: self.hidden,
            head: self.head,
        }
    }
}
