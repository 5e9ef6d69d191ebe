use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvGeom, Graph, LstmWeights, Var};
use crate::error::Result;
use crate::params::{kaiming_uniform, uniform, ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

/// Parameter registration with a seeded generator.
pub struct Init<'a, T> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv2dLayer {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
    ) -> Self {
        let fan_in = cin * kernel.0 * kernel.1;
        let weight = init.params.insert(
            format!("{name}.weight"),
            kaiming_uniform(init.rng, &[cout, cin, kernel.0, kernel.1], fan_in),
        );
        let bias = init
            .params
            .insert(format!("{name}.bias"), kaiming_uniform(init.rng, &[cout], fan_in));
        Self { weight, bias, geom }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.conv2d(x, w, Some(b), self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearLayer {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, din: usize, dout: usize) -> Self {
        let weight = init.params.insert(
            format!("{name}.weight"),
            kaiming_uniform(init.rng, &[dout, din], din),
        );
        let bias = init
            .params
            .insert(format!("{name}.bias"), kaiming_uniform(init.rng, &[dout], din));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Two independent LSTM directions whose outputs are concatenated per step.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmWeights<ParamId>,
    pub backward: LstmWeights<ParamId>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, din: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut direction = |dir: &str| {
            let w_ih = init.params.insert(
                format!("{name}.{dir}.w_ih"),
                uniform(init.rng, &[4 * hidden, din], bound),
            );
            let w_hh = init.params.insert(
                format!("{name}.{dir}.w_hh"),
                uniform(init.rng, &[4 * hidden, hidden], bound),
            );
            let bias = init.params.insert(
                format!("{name}.{dir}.bias"),
                uniform(init.rng, &[4 * hidden], bound),
            );
            LstmWeights { w_ih, w_hh, bias }
        };
        let forward = direction("fwd");
        let backward = direction("bwd");
        Self {
            forward,
            backward,
            hidden,
        }
    }

    /// `[N, T, Din]` → `[N, T, 2H]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let bind = |g: &mut Graph<T>, w: &LstmWeights<ParamId>| LstmWeights {
            w_ih: g.param(params, w.w_ih),
            w_hh: g.param(params, w.w_hh),
            bias: g.param(params, w.bias),
        };
        let fw = bind(g, &self.forward);
        let bw = bind(g, &self.backward);
        let hf = g.lstm(x, fw, false)?;
        let hb = g.lstm(x, bw, true)?;
        g.concat(&[hf, hb], 2)
    }
}

/// Sets every element of the named parameters to zero; used to build the
/// analytic fixtures (zeroed branches, zero-parameter sanity checks).
pub fn zero_params<T: Real>(params: &mut ParamSet<T>, ids: &[ParamId]) {
    for &id in ids {
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = Tensor::zeros(&shape);
    }
}
