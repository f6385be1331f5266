use ndarray::Zip;

use super::{backward, Activation, forward, AgcnParams, Differentiable, MessagePlan};
use crate::tensor::{Matrix, Parameters};

/// `L = Σ upstream ⊙ AGCN(X)` over the parameters and the input states.
#[derive(Debug, Clone)]
pub struct AgcnProblem {
    pub plan: MessagePlan,
    pub params: AgcnParams,
    pub input: Matrix,
    pub upstream: Matrix,
}

impl Differentiable for AgcnProblem {
    fn groups(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.params.visit(&mut |name, _, v| out.push((name.to_string(), v.len())));
        out.push(("input".to_string(), self.input.len()));
        out
    }

    fn get(&self) -> Vec<f64> {
        let mut flat = self.params.flatten();
        flat.extend(self.input.iter());
        flat
    }

    fn set(&mut self, flat: &[f64]) {
        let n = self.params.num_params();
        self.params.assign(&flat[..n]);
        self.input.as_slice_mut().unwrap().copy_from_slice(&flat[n..]);
    }

    fn evaluate(&self) -> (f64, Vec<u32>) {
        let cache = forward(&self.plan, &self.input, &self.params).expect("valid problem");
        let mut loss = 0.0;
        Zip::from(cache.output())
            .and(&self.upstream)
            .for_each(|y, g| loss += y * g);
        let signature = match self.params.activation {
            Activation::Identity => Vec::new(),
            Activation::Relu => cache
                .layers()
                .iter()
                .flat_map(|l| l.pre_activation().iter().map(|x| u32::from(*x > 0.0)))
                .collect(),
        };
        (loss, signature)
    }

    fn gradient(&self) -> Vec<f64> {
        let cache = forward(&self.plan, &self.input, &self.params).expect("valid problem");
        let (grads, dinput) = backward(&self.plan, &self.params, &cache, &self.upstream).expect("valid problem");
        let mut flat = grads.flatten();
        flat.extend(dinput.iter());
        flat
    }
}
