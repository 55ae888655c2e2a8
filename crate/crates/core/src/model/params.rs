use std::collections::BTreeMap;

use crate::diff::{Grads, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors.
pub type Params<F> = BTreeMap<String, Tensor<F>>;

/// Parameter names mapped to their handles on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new<F: Scalar>(tape: &mut Tape<F>, params: &Params<F>) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect();
        Self { vars }
    }

    /// Binds already-recorded handles, paired with `names` in order.
    pub fn from_vars<S: Into<String>>(names: impl IntoIterator<Item = S>, vars: &[Var]) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() != vars.len() {
            return Err(Error::shape("Bound::from_vars", &[names.len()], &[vars.len()]));
        }
        Ok(Self {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed by parameter name; unused parameters get zeros.
    pub fn collect<F: Scalar>(&self, tape: &Tape<F>, grads: &mut Grads<F>) -> Params<F> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let shape = tape.shape(v).to_vec();
                let g = match grads.take(v) {
                    Some(g) => Tensor::new(&shape, g).expect("gradient matches value"),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), g)
            })
            .collect()
    }
}
