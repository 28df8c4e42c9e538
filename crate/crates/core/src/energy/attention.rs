//! Set-transformer energy: attention blocks over the particles of one cloud,
//! mean-pooled to a scalar.

use std::f64::consts::PI;

use popmech_autodiff::{Array, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_fan_in, Dropout, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

/// Shape of the attention energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_inner: usize,
    /// Number of sinusoidal time features appended to each particle; even.
    pub time_features: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 64,
            blocks: 4,
            heads: 4,
            ff_inner: 512,
            time_features: 0,
            activation: Activation::Silu,
            dropout: 0.0,
        }
    }
}

impl EnergyConfig {
    pub fn head_width(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("/energy/{field}"), msg));
        if self.dim == 0 {
            return bad("dim", "must be ≥ 1");
        }
        if self.hidden == 0 || self.heads == 0 || self.blocks == 0 || self.ff_inner == 0 {
            return bad("hidden", "hidden, heads, blocks and ff_inner must be ≥ 1");
        }
        if self.hidden % self.heads != 0 {
            return bad("heads", &format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.time_features % 2 != 0 {
            return bad("time_features", "must be even (sin/cos pairs)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `sin(2π 2^k t), cos(2π 2^k t)` for `k = 0 .. n/2`.
pub fn time_features(t: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n / 2 {
        let w = 2.0 * PI * f64::powi(2.0, k as i32) * t;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

pub(super) fn init(c: &EnergyConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let h = c.hidden;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<Tensor>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        out.push(Tensor {
            name: format!("{name}.w"),
            value: uniform_fan_in(vec![fan_in, fan_out], fan_in, rng),
        });
        out.push(Tensor {
            name: format!("{name}.b"),
            value: uniform_fan_in(vec![fan_out], fan_in, rng),
        });
    };
    linear(&mut out, "embed", c.dim + c.time_features, h, rng);
    for b in 0..c.blocks {
        linear(&mut out, &format!("block{b}.q"), h, h, rng);
        linear(&mut out, &format!("block{b}.k"), h, h, rng);
        linear(&mut out, &format!("block{b}.v"), h, h, rng);
        linear(&mut out, &format!("block{b}.o"), h, h, rng);
        linear(&mut out, &format!("block{b}.ff1"), h, c.ff_inner, rng);
        linear(&mut out, &format!("block{b}.ff2"), c.ff_inner, h, rng);
    }
    out.push(Tensor {
        name: "head.w".into(),
        value: uniform_fan_in(vec![h, 1], h, rng),
    });
    out.push(Tensor {
        name: "head.b".into(),
        value: Array::zeros(vec![1]),
    });
    out
}

fn affine<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    Ok(x.matmul(w)?.add(b)?)
}

fn activate<'g>(x: Var<'g>, a: Activation) -> Result<Var<'g>> {
    Ok(match a {
        Activation::Silu => x.silu()?,
        Activation::Tanh => x.tanh(),
    })
}

pub(super) fn forward<'g>(
    c: &EnergyConfig,
    pv: &[Var<'g>],
    x: Var<'g>,
    t: Option<f64>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var<'g>> {
    let g = x.graph();
    let n = x.shape()[0];
    let input = if c.time_features > 0 {
        let t = t.ok_or_else(|| Error::data("energy", "model uses time features but no time was given"))?;
        let feats = time_features(t, c.time_features);
        let mut data = Vec::with_capacity(n * feats.len());
        for _ in 0..n {
            data.extend_from_slice(&feats);
        }
        let tf = g.constant(Array::new(vec![n, c.time_features], data)?);
        Var::concat(&[x, tf], 1)?
    } else {
        x
    };

    let mut p = pv.iter().copied();
    let mut next = || p.next().expect("tensor count checked by caller");
    let mut hid = affine(input, next(), next())?;
    let hw = c.head_width();
    let scale = 1.0 / (hw as f64).sqrt();
    for _ in 0..c.blocks {
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (next(), next(), next(), next(), next(), next(), next(), next());
        let z = hid.layer_norm(LN_EPS)?;
        let q = affine(z, wq, bq)?;
        let k = affine(z, wk, bk)?;
        let v = affine(z, wv, bv)?;
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = q.slice(1, h * hw, hw)?;
            let kh = k.slice(1, h * hw, hw)?;
            let vh = v.slice(1, h * hw, hw)?;
            let att = qh.matmul_t(kh)?.scale(scale).softmax(1)?;
            heads.push(att.matmul(vh)?);
        }
        let mixed = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1)? };
        hid = hid.add(affine(mixed, wo, bo)?)?;

        let (w1, b1, w2, b2) = (next(), next(), next(), next());
        let z = hid.layer_norm(LN_EPS)?;
        let mut f = activate(affine(z, w1, b1)?, c.activation)?;
        if c.dropout > 0.0 {
            if let Some(d) = dropout.as_deref_mut() {
                let keep = 1.0 - c.dropout;
                let mask: Vec<f64> = (0..n * c.ff_inner)
                    .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                f = f.mul(g.constant(Array::new(vec![n, c.ff_inner], mask)?))?;
            }
        }
        hid = hid.add(affine(f, w2, b2)?)?;
    }
    let pooled = hid.layer_norm(LN_EPS)?.mean_axis(0, true)?;
    let out = affine(pooled, next(), next())?;
    Ok(out.sum())
}
