//! Pre-norm transformer blocks and positional encodings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Matrix;

use super::init::Initializer;

/// Sinusoidal positional encoding, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Matrix {
    Matrix::from_fn(len, d, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn add_positional(g: &mut Graph, x: Var) -> Result<Var> {
    let (t, d) = g.value(x).shape();
    let pe = g.input(positional_encoding(t, d));
    g.add(x, pe)
}

/// Register the parameters of a `layers`-deep stack under `prefix`.
pub fn register_stack(
    store: &mut ParamStore,
    init: &Initializer,
    prefix: &str,
    layers: usize,
    d: usize,
    d_ff: usize,
) {
    for l in 0..layers {
        let p = format!("{prefix}.{l}");
        init.layer_norm(store, &format!("{p}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            init.linear(store, &format!("{p}.attn.{proj}"), d, d);
        }
        init.layer_norm(store, &format!("{p}.ln2"), d);
        init.linear(store, &format!("{p}.ff1"), d, d_ff);
        init.linear(store, &format!("{p}.ff2"), d_ff, d);
    }
    if layers > 0 {
        init.layer_norm(store, &format!("{prefix}.ln_f"), d);
    }
}

/// Inverted dropout; `None` disables it.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = g.value(x).shape();
        let keep = 1.0 - self.rate;
        let mask = Matrix::from_fn(r, c, |_, _| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.mul_const(x, mask)
    }
}

pub fn apply_dropout(g: &mut Graph, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

fn linear(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param_named(&format!("{name}.w"));
    let b = g.param_named(&format!("{name}.b"));
    g.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param_named(&format!("{name}.g"));
    let beta = g.param_named(&format!("{name}.b"));
    g.layer_norm(x, gamma, beta)
}

/// Affine layer `name.w`, `name.b`.
pub fn dense(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    linear(g, x, name)
}

/// Run the stack registered under `prefix`. Length preserving; with zero
/// layers this is the identity.
pub fn run_stack(
    g: &mut Graph,
    mut x: Var,
    prefix: &str,
    layers: usize,
    heads: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    for l in 0..layers {
        let p = format!("{prefix}.{l}");
        let h = layer_norm(g, x, &format!("{p}.ln1"))?;
        let q = linear(g, h, &format!("{p}.attn.q"))?;
        let k = linear(g, h, &format!("{p}.attn.k"))?;
        let v = linear(g, h, &format!("{p}.attn.v"))?;
        let a = g.attention(q, k, v, heads)?;
        let a = linear(g, a, &format!("{p}.attn.o"))?;
        let a = apply_dropout(g, a, dropout)?;
        x = g.add(x, a)?;

        let h = layer_norm(g, x, &format!("{p}.ln2"))?;
        let f = linear(g, h, &format!("{p}.ff1"))?;
        let f = g.gelu(f);
        let f = linear(g, f, &format!("{p}.ff2"))?;
        let f = apply_dropout(g, f, dropout)?;
        x = g.add(x, f)?;
    }
    if layers > 0 {
        x = layer_norm(g, x, &format!("{prefix}.ln_f"))?;
    }
    Ok(x)
}
