//! Σ files: one JSON header line, then the matrix as little-endian `f64`
//! (the diagonal, or the full matrix row-major).

use std::io::Write;
use std::path::Path;

use deltavar_core::autodiff::Block;
use deltavar_core::covariance::{
    ema_diag_fisher, empirical_fisher, loss_hessian, sandwich, to_covariance, CovarianceEstimate, EmaConfig,
    FisherMode, Repr, Role, SigmaKind,
};
use deltavar_core::models::{Dataset, Model};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "deltavar-sigma";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    /// `covariance` or `curvature`.
    pub role: String,
    /// `diagonal` or `full`.
    pub layout: String,
    pub dim: usize,
    pub n_points: usize,
    pub reg: f64,
    pub blocks: Vec<BlockEntry>,
    pub block_scales: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Σ of the given kind at the model's parameters, scaled per the crate's
/// convention. `learned` is produced by fine-tuning and is rejected here.
pub fn build_sigma(model: &Model, data: &Dataset, kind: SigmaKind, reg: f64, ema: &EmaConfig) -> Result<CovarianceEstimate> {
    let sigma = match kind {
        SigmaKind::FisherFull => to_covariance(&empirical_fisher(model, data, FisherMode::Full)?, reg)?,
        SigmaKind::FisherDiag => to_covariance(&empirical_fisher(model, data, FisherMode::Diag)?, reg)?,
        SigmaKind::FisherEmaDiag => to_covariance(&ema_diag_fisher(model, data, ema)?, reg)?,
        SigmaKind::Hessian => to_covariance(&loss_hessian(model, data)?, reg)?,
        SigmaKind::Sandwich => sandwich(model, data, reg)?,
        SigmaKind::Learned => {
            return Err(CliError::Config(String::from(
                "learned sigma comes from the finetune command, not from data",
            )))
        }
    };
    Ok(sigma)
}

pub fn header_of(sigma: &CovarianceEstimate) -> SigmaHeader {
    SigmaHeader {
        format: String::from(FORMAT),
        version: 1,
        kind: String::from(sigma.kind.name()),
        role: String::from(match sigma.role {
            Role::Covariance => "covariance",
            Role::Curvature => "curvature",
        }),
        layout: String::from(match sigma.repr {
            Repr::Diagonal(_) => "diagonal",
            Repr::Full(_) => "full",
        }),
        dim: sigma.dim(),
        n_points: sigma.n_points,
        reg: sigma.regularizer,
        blocks: sigma
            .blocks
            .iter()
            .map(|b| BlockEntry {
                name: b.name.clone(),
                start: b.start,
                len: b.len,
            })
            .collect(),
        block_scales: sigma.block_scales.clone(),
    }
}

pub fn encode(sigma: &CovarianceEstimate) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(&header_of(sigma)).map_err(|e| CliError::Failure(e.to_string()))?;
    out.push(b'\n');
    match &sigma.repr {
        Repr::Diagonal(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Repr::Full(m) => {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CovarianceEstimate> {
    let bad = |msg: String| CliError::Failure(format!("sigma file: {msg}"));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad(String::from("missing header line")))?;
    let header: SigmaHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
    if header.format != FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let payload = &bytes[nl + 1..];
    let full = match header.layout.as_str() {
        "diagonal" => false,
        "full" => true,
        other => return Err(bad(format!("unknown layout '{other}'"))),
    };
    let count = if full { header.dim * header.dim } else { header.dim };
    if payload.len() != 8 * count {
        return Err(bad(format!("payload holds {} bytes, expected {}", payload.len(), 8 * count)));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let repr = if full {
        Repr::Full(DMatrix::from_row_slice(header.dim, header.dim, &values))
    } else {
        Repr::Diagonal(values)
    };
    let kind = SigmaKind::parse(&header.kind)?;
    let role = match header.role.as_str() {
        "covariance" => Role::Covariance,
        "curvature" => Role::Curvature,
        other => return Err(bad(format!("unknown role '{other}'"))),
    };
    let blocks = header.blocks.iter().map(|b| Block::new(b.name.clone(), b.start, b.len)).collect();
    let mut sigma = CovarianceEstimate::new(kind, repr, role, header.n_points, blocks)?;
    sigma.regularizer = header.reg;
    sigma.block_scales = header.block_scales;
    Ok(sigma)
}

pub fn save_sigma(path: &Path, sigma: &CovarianceEstimate) -> Result<()> {
    let bytes = encode(sigma)?;
    let mut f = std::fs::File::create(path).map_err(CliError::io(path))?;
    f.write_all(&bytes).map_err(CliError::io(path))
}

pub fn load_sigma(path: &Path) -> Result<CovarianceEstimate> {
    decode(&std::fs::read(path).map_err(CliError::io(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deltavar_core::models::ModelKind;

    fn fitted() -> (Model, Dataset) {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 20.0 - 1.0).collect();
        let inputs: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x, x * x]).collect();
        let targets: Vec<f64> = xs.iter().map(|&x| 0.5 + 2.0 * x - x * x + 0.1 * (7.0 * x).sin()).collect();
        let data = Dataset::from_flat(3, 1, inputs, targets).unwrap();
        let model = Model::new(ModelKind::LinearRegression, 3, 1, 3).unwrap().with_theta(vec![0.4, 1.9, -0.8]).unwrap();
        (model, data)
    }

    #[test]
    fn encode_decode_is_exact() {
        let (model, data) = fitted();
        for kind in [SigmaKind::FisherDiag, SigmaKind::FisherFull, SigmaKind::Sandwich, SigmaKind::Hessian] {
            let s = build_sigma(&model, &data, kind, 1e-3, &EmaConfig::default()).unwrap();
            let back = decode(&encode(&s).unwrap()).unwrap();
            assert_eq!(back, s, "{}", kind.name());
        }
        let scaled = build_sigma(&model, &data, SigmaKind::FisherDiag, 0.0, &EmaConfig::default())
            .unwrap()
            .with_block_scales(&[2.0])
            .unwrap();
        assert_eq!(decode(&encode(&scaled).unwrap()).unwrap(), scaled);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let (model, data) = fitted();
        let s = build_sigma(&model, &data, SigmaKind::FisherFull, 0.0, &EmaConfig::default()).unwrap();
        let bytes = encode(&s).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"{\"format\":\"other\"}\n").is_err());
        assert!(decode(b"no header").is_err());
        assert!(build_sigma(&model, &data, SigmaKind::Learned, 0.0, &EmaConfig::default()).is_err());
    }
}
