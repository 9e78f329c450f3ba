use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{ConvSpec, Graph, Var};
use crate::params::ParamSet;
use crate::tensor::Tensor;

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Square-kernel convolution whose weights live in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_normal(
            vec![out_c, in_c, kernel, kernel],
            in_c * kernel * kernel,
            rng,
        );
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(vec![out_c]));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, vars[self.weight], vars[self.bias], self.spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Heads feed a sigmoid, so use the unit-gain variance.
        let mut w = he_normal(vec![fan_out, fan_in], fan_in, rng);
        w.scale(std::f64::consts::FRAC_1_SQRT_2);
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.linear(x, vars[self.weight], vars[self.bias])
    }
}
