use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// How the per-token hidden states collapse into one sequence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingStrategy {
    /// Hidden state of the leading `[CLS]` token.
    #[default]
    Cls,
    /// Mean over unmasked positions.
    Mean,
    /// Elementwise maximum over unmasked positions.
    Max,
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingStrategy::Cls => "cls",
            PoolingStrategy::Mean => "mean",
            PoolingStrategy::Max => "max",
        })
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(PoolingStrategy::Cls),
            "mean" => Ok(PoolingStrategy::Mean),
            "max" => Ok(PoolingStrategy::Max),
            other => Err(Error::Config(format!("unknown pooling strategy {other:?}"))),
        }
    }
}

/// Pools `hidden` on the tape, producing a `[1 x d_model]` node.
pub fn pool_on_tape(tape: &mut Tape<'_>, hidden: Var, mask: &[u8], strategy: PoolingStrategy) -> Result<Var> {
    let rows = tape.try_value(hidden)?.rows();
    if mask.len() != rows {
        return Err(Error::Contract(format!(
            "mask has {} entries for {rows} hidden rows",
            mask.len()
        )));
    }
    let real = mask.iter().filter(|&&m| m != 0).count();
    if real == 0 {
        return Err(Error::EmptyPool);
    }
    match strategy {
        PoolingStrategy::Cls => tape.select_row(hidden, 0),
        PoolingStrategy::Mean => {
            let include: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
            tape.mean_rows(hidden, &include)
        }
        PoolingStrategy::Max => {
            let include: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
            tape.max_rows(hidden, &include)
        }
    }
}

/// Pools a `[len x d_model]` matrix into a `[d_model]` vector.
pub fn pool(hidden: &Tensor, mask: &[u8], strategy: PoolingStrategy) -> Result<Tensor> {
    if hidden.shape().len() != 2 {
        return Err(Error::Shape {
            op: "pool",
            lhs: hidden.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let out = pool_on_tape(&mut tape, h, mask, strategy)?;
    let d = hidden.cols();
    tape.value(out).clone().reshape(vec![d])
}
