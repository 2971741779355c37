//! `model.json`: architecture plus the flat parameter vector.

use std::path::Path;

use deltavar_core::models::{Activation, MlpSpec, Model, ModelKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `bernoulli-rate`, `linear-regression`, `logistic` or `mlp`.
    pub kind: String,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub dropout: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

fn default_activation() -> String {
    String::from("tanh")
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: String::from("mlp"),
            hidden: default_hidden(),
            activation: default_activation(),
            residual: false,
            dropout: 0.0,
        }
    }
}

impl ModelSpec {
    pub fn model_kind(&self) -> Result<ModelKind> {
        Ok(match self.kind.as_str() {
            "bernoulli-rate" => ModelKind::BernoulliRate,
            "linear-regression" => ModelKind::LinearRegression,
            "logistic" => ModelKind::Logistic,
            "mlp" => ModelKind::Mlp(MlpSpec {
                hidden: self.hidden.clone(),
                activation: match self.activation.as_str() {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    other => return Err(CliError::Config(format!("unknown activation '{other}'"))),
                },
                dropout: self.dropout,
                residual: self.residual,
            }),
            other => return Err(CliError::Config(format!("unknown model kind '{other}'"))),
        })
    }

    pub fn of(kind: &ModelKind) -> Self {
        match kind {
            ModelKind::Mlp(s) => Self {
                kind: String::from("mlp"),
                hidden: s.hidden.clone(),
                activation: String::from(match s.activation {
                    Activation::Tanh => "tanh",
                    Activation::Relu => "relu",
                }),
                residual: s.residual,
                dropout: s.dropout,
            },
            other => Self {
                kind: String::from(other.name()),
                hidden: Vec::new(),
                ..Self::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub model: ModelSpec,
    pub d_in: usize,
    pub d_out: usize,
    pub theta: Vec<f64>,
}

impl ModelFile {
    pub fn of(model: &Model) -> Self {
        Self {
            model: ModelSpec::of(model.kind()),
            d_in: model.d_in(),
            d_out: model.d_out(),
            theta: model.theta().to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let fresh = Model::new(self.model.model_kind()?, self.d_in, self.d_out, 0)?;
        Ok(fresh.with_theta(self.theta.clone())?)
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&ModelFile::of(model)).map_err(|e| CliError::Failure(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
    file.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_exact() {
        let spec = MlpSpec {
            hidden: vec![5, 4],
            activation: Activation::Relu,
            dropout: 0.1,
            residual: true,
        };
        let m = Model::new(ModelKind::Mlp(spec), 3, 3, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&p, &m).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
        let b = Model::new(ModelKind::BernoulliRate, 1, 1, 0).unwrap().with_theta(vec![0.9]).unwrap();
        save_model(&p, &b).unwrap();
        assert_eq!(load_model(&p).unwrap(), b);
    }
}
