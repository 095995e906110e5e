use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore, Partition};
use crate::autodiff::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Relu,
    Tanh,
}

impl From<ActivationKind> for Activation {
    fn from(k: ActivationKind) -> Self {
        match k {
            ActivationKind::Relu => Activation::Relu,
            ActivationKind::Tanh => Activation::Tanh,
        }
    }
}

/// Feed-forward stack `widths[0] → widths[1] → … → widths[last]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: ActivationKind,
    /// Apply the activation after the final layer too (used for the trunk).
    #[serde(default)]
    pub activate_last: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: ActivationKind, activate_last: bool) -> Self {
        MlpSpec {
            widths,
            activation,
            activate_last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least one layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive: {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn build(
        store: &mut ParamStore,
        name: &str,
        partition: Partition,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w = store.add(
            format!("{name}.weight"),
            partition,
            Tensor::matrix(fan_in, fan_out, data).expect("weight shape"),
        );
        let b = store.add(format!("{name}.bias"), partition, Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.affine(x, vars[self.w.0], vars[self.b.0])
    }
}

/// Parameter handles of a built MLP; the values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    /// Registers the layers in `store`. Weights are drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`, biases start at zero.
    pub fn build(
        spec: &MlpSpec,
        store: &mut ParamStore,
        prefix: &str,
        partition: Partition,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::build(store, &format!("{prefix}.{i}"), partition, w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// `vars` are the tape bindings of the whole store, indexed by [`ParamId`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if tape.value(x).rank() != 2 || width != self.spec.input() {
            return Err(Error::shape(
                "mlp input",
                tape.value(x).shape(),
                &[0, self.spec.input()],
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h)?;
            if i < last || self.spec.activate_last {
                h = tape.activate(h, self.spec.activation.into())?;
            }
        }
        Ok(h)
    }
}

/// Encoder branch: optional hidden body followed by parallel mean and
/// log-std heads of width `code_dim`. A deterministic branch has no log-std head.
#[derive(Debug, Clone)]
pub struct DualHead {
    body: Option<Mlp>,
    mean: Linear,
    log_std: Option<Linear>,
    input: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualHeadSpec {
    pub input: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    #[serde(default)]
    pub activation: ActivationKind,
}

impl DualHeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.code_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "branch widths must be positive: input {}, hidden {:?}, code {}",
                self.input, self.hidden, self.code_dim
            )));
        }
        Ok(())
    }
}

impl DualHead {
    pub fn build(
        spec: &DualHeadSpec,
        stochastic: bool,
        store: &mut ParamStore,
        prefix: &str,
        partition: Partition,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let body = if spec.hidden.is_empty() {
            None
        } else {
            let mut widths = vec![spec.input];
            widths.extend(&spec.hidden);
            let body_spec = MlpSpec::new(widths, spec.activation, true);
            Some(Mlp::build(&body_spec, store, &format!("{prefix}.body"), partition, rng)?)
        };
        let feat = spec.hidden.last().copied().unwrap_or(spec.input);
        let mean = Linear::build(store, &format!("{prefix}.mean"), partition, feat, spec.code_dim, rng);
        let log_std = stochastic.then(|| {
            Linear::build(store, &format!("{prefix}.log_std"), partition, feat, spec.code_dim, rng)
        });
        Ok(DualHead {
            body,
            mean,
            log_std,
            input: spec.input,
        })
    }

    pub fn is_stochastic(&self) -> bool {
        self.log_std.is_some()
    }

    /// Returns `(mean, raw log-std)`; the log-std is `None` for deterministic branches.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        if tape.value(x).cols() != self.input {
            return Err(Error::shape("branch input", tape.value(x).shape(), &[0, self.input]));
        }
        let h = match &self.body {
            Some(body) => body.forward(tape, vars, x)?,
            None => x,
        };
        let mean = self.mean.forward(tape, vars, h)?;
        let log_std = match &self.log_std {
            Some(head) => Some(head.forward(tape, vars, h)?),
            None => None,
        };
        Ok((mean, log_std))
    }
}
