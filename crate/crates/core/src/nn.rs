//! Parameter registration and the few layer shapes the model reuses.
//!
//! A layer called `name` owns `name.w` and `name.b`. Weights use He-normal
//! initialization, biases start at zero.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub(crate) fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Registers a `cin → cout` dense layer.
pub fn add_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<()> {
    store.insert(format!("{name}.w"), Tensor::randn(&[cin, cout], he_std(cin), rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

/// Registers a chain of dense layers `name.0`, `name.1`, … with the given widths.
pub fn add_mlp<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, widths: &[usize], rng: &mut R) -> Result<()> {
    let mut c = cin;
    for (i, &w) in widths.iter().enumerate() {
        add_linear(store, &format!("{name}.{i}"), c, w, rng)?;
        c = w;
    }
    Ok(())
}

/// Registers a convolution kernel `name.w` of shape `taps ++ [cin, cout]`.
pub fn add_conv<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, taps: &[usize], cin: usize, cout: usize, rng: &mut R) -> Result<()> {
    let fan_in = taps.iter().product::<usize>() * cin;
    let mut shape = taps.to_vec();
    shape.extend([cin, cout]);
    store.insert(format!("{name}.w"), Tensor::randn(&shape, he_std(fan_in), rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

pub fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    tape.dense(x, w, Some(b))
}

/// Applies `name.0 … name.{layers-1}`, ReLU between layers. The last layer
/// is followed by ReLU only when `relu_last` is set.
pub fn mlp(tape: &mut Tape, p: &Bound, name: &str, x: Var, layers: usize, relu_last: bool) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, p, &format!("{name}.{i}"), h)?;
        if i + 1 < layers || relu_last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn conv2d(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let k = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = tape.conv2d(x, k, [stride, stride])?;
    tape.add_bias(y, b)
}

pub fn conv3d(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: [usize; 3]) -> Result<Var> {
    let k = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = tape.conv3d(x, k, stride)?;
    tape.add_bias(y, b)
}

/// Sets every bias (`*.b`) in the store to zero.
pub fn zero_biases(store: &mut ParamStore) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
    for n in names {
        if let Some(t) = store.get_mut(&n) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Replaces every bias with small Gaussian values. Gradient checks use this
/// to move pre-activations off the ReLU kink at exactly zero.
pub fn jitter_biases<R: Rng + ?Sized>(store: &mut ParamStore, std: f64, rng: &mut R) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
    for n in names {
        if let Some(t) = store.get_mut(&n) {
            let fresh = Tensor::randn(t.shape(), std, rng);
            t.data_mut().copy_from_slice(fresh.data());
        }
    }
}
