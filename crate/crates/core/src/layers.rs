use hgere_autodiff::{Activation, Graph, Linear, ParamSet, Var};
use rand::Rng;

use crate::error::Result;

/// Feed-forward stack. Hidden layers use GELU; the output activation is chosen
/// by the caller.
#[derive(Debug, Clone)]
pub struct Ffn {
    layers: Vec<Linear>,
}

impl Ffn {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        dims: &[usize],
        out_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        assert!(dims.len() >= 2, "an FFN needs input and output sizes");
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let lname = if n == 1 {
                name.to_string()
            } else {
                format!("{name}.{i}")
            };
            let act = if i + 1 == n { out_act } else { Activation::Gelu };
            layers.push(Linear::new(ps, &lname, dims[i], dims[i + 1], rng)?.with_activation(act));
        }
        Ok(Self { layers })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: &Var<'g>) -> Result<Var<'g>> {
        let mut h = *x;
        for l in &self.layers {
            h = l.forward(g, &h)?;
        }
        Ok(h)
    }
}
