use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Real, Tensor};

/// Named parameter arrays of one network; ordered so iteration is stable.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn cast_params<T: Real, U: Real>(p: &ParamMap<T>) -> ParamMap<U> {
    p.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

pub fn param_count<T: Real>(p: &ParamMap<T>) -> usize {
    p.values().map(|t| t.shape().iter().product::<usize>()).sum()
}

/// Parameters registered on a graph for one forward/backward pass.
pub struct Bound<'g, T: Real> {
    vars: HashMap<String, Var<'g, T>>,
    order: Vec<String>,
}

impl<'g, T: Real> Bound<'g, T> {
    /// Registers every array of `params`; `trainable` makes them differentiable leaves.
    pub fn new(graph: &'g Graph<T>, params: &ParamMap<T>, trainable: bool) -> Self {
        let mut vars = HashMap::with_capacity(params.len());
        let mut order = Vec::with_capacity(params.len());
        for (name, t) in params {
            let v = if trainable { graph.leaf(t.clone()) } else { graph.constant(t.clone()) };
            vars.insert(name.clone(), v);
            order.push(name.clone());
        }
        Bound { vars, order }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {}", name)))
    }

    /// Parameter vars in name order (matching [`ParamMap`] iteration).
    pub fn vars(&self) -> Vec<Var<'g, T>> {
        self.order.iter().map(|n| self.vars[n]).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }
}

/// Square convolution with bias. Weight `{name}.w`, bias `{name}.b`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geo: ConvGeometry,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, geo: ConvGeometry) -> Self {
        Conv { name: name.into(), cin, cout, geo }
    }

    pub fn k3(name: impl Into<String>, cin: usize, cout: usize, stride: usize) -> Self {
        Self::new(name, cin, cout, ConvGeometry::new(3, stride, 1))
    }

    pub fn k1(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, ConvGeometry::new(1, 1, 0))
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init<T: Real>(&self, params: &mut ParamMap<T>, gain: f64, rng: &mut impl Rng) {
        let k = self.geo.kernel;
        let fan_in = (self.cin * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[self.cout, self.cin, k, k], |_| T::lit(normal.sample(rng)));
        params.insert(self.weight_name(), w);
        params.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cin {
            return Err(Error::shape(format!("[N, {}, H, W] into {}", self.cin, self.name), format!("{:?}", shape)));
        }
        x.conv2d(p.get(&self.weight_name())?, self.geo)?.add_channel_bias(p.get(&self.bias_name())?)
    }
}

/// Mean over spatial axes: `[N, C, H, W]` → `[N, C, 1, 1]`.
pub fn global_mean_pool<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let area = (s[2] * s[3]) as f64;
    Ok(x.sum_to(&[s[0], s[1], 1, 1])?.scale(1.0 / area))
}

/// Batch of identical-shape tensors `[1, ...]` concatenated along axis 0.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::stack_batch(items)
}
