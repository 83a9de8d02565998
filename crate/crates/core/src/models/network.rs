use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { weight: usize, bias: usize, relu: bool },
    Conv { kernel: usize, bias: Option<usize>, padding: usize, relu: bool },
    MaxPool2,
    GlobalMax,
    Flatten,
}

/// A feed-forward stack over a [`ParamStore`]. Layers refer to parameters by
/// store index.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    params: ParamStore,
}

impl Network {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces parameter values, keeping the layer wiring. Names and shapes
    /// must line up with the current store.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        let want: Vec<(&str, &[usize])> = self.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != got {
            return Err(crate::Error::InvalidArch(format!(
                "parameter layout mismatch: expected {:?}, found {:?}",
                self.params.names(),
                params.names()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { weight, bias, relu } => {
                    let y = tape.linear(h, vars.get(weight), Some(vars.get(bias)))?;
                    if relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                Layer::Conv {
                    kernel,
                    bias,
                    padding,
                    relu,
                } => {
                    let y = tape.conv2d(h, vars.get(kernel), bias.map(|b| vars.get(b)), padding, 1)?;
                    if relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                Layer::MaxPool2 => tape.maxpool2x2(h)?,
                Layer::GlobalMax => tape.global_max_pool(h)?,
                Layer::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Forward pass with frozen parameters.
    pub fn infer(&self, input: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let x = tape.constant(input);
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}

pub struct NetworkBuilder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
    params: ParamStore,
}

impl NetworkBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
            params: ParamStore::new(),
        }
    }

    pub fn dense(mut self, name: &str, inputs: usize, outputs: usize, relu: bool) -> Self {
        let weight = self
            .params
            .insert_uniform(format!("{name}.weight"), &[outputs, inputs], inputs, &mut self.rng);
        let bias = self.params.insert_zeros(format!("{name}.bias"), &[outputs]);
        self.layers.push(Layer::Dense { weight, bias, relu });
        self
    }

    pub fn conv3x3(mut self, name: &str, channels: usize, filters: usize, padding: usize, relu: bool) -> Self {
        let fan_in = channels * 9;
        let kernel =
            self.params
                .insert_uniform(format!("{name}.weight"), &[filters, channels, 3, 3], fan_in, &mut self.rng);
        let bias = Some(self.params.insert_zeros(format!("{name}.bias"), &[filters]));
        self.layers.push(Layer::Conv {
            kernel,
            bias,
            padding,
            relu,
        });
        self
    }

    pub fn maxpool2(mut self) -> Self {
        self.layers.push(Layer::MaxPool2);
        self
    }

    pub fn global_max(mut self) -> Self {
        self.layers.push(Layer::GlobalMax);
        self
    }

    pub fn flatten(mut self) -> Self {
        self.layers.push(Layer::Flatten);
        self
    }

    pub fn build(self) -> Network {
        Network {
            layers: self.layers,
            params: self.params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_fix_initialisation() {
        let a = NetworkBuilder::new(5).dense("fc", 3, 2, false).build();
        let b = NetworkBuilder::new(5).dense("fc", 3, 2, false).build();
        let c = NetworkBuilder::new(6).dense("fc", 3, 2, false).build();
        assert_eq!(a, b);
        assert_ne!(a.params().snapshot(), c.params().snapshot());
    }

    #[test]
    fn weights_respect_fan_in_bound() {
        let net = NetworkBuilder::new(1).dense("fc", 16, 8, false).build();
        let w = net.params().get("fc.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        assert!(net.params().get("fc.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_params_checks_layout() {
        let mut a = NetworkBuilder::new(1).dense("fc", 3, 2, false).build();
        let b = NetworkBuilder::new(1).dense("fc", 4, 2, false).build();
        assert!(a.load_params(b.params().clone()).is_err());
    }
}
