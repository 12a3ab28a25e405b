//! Serialized containers: row-major matrices, factor pairs, checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::DebiasState;
use crate::learner::LearnerState;
use crate::lowrank::{FactorPair, Mat};

pub const CHECKPOINT_SCHEMA: &str = "mcb.checkpoint.v1";

/// Dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for MatrixRecord {
    fn from(m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixRecord> for Mat {
    type Error = Error;

    fn try_from(rec: MatrixRecord) -> Result<Self> {
        if rec.rows * rec.cols != rec.data.len() {
            return Err(Error::Dimension(format!(
                "matrix record declares {}x{} but holds {} values",
                rec.rows,
                rec.cols,
                rec.data.len()
            )));
        }
        Ok(Mat::from_row_slice(rec.rows, rec.cols, &rec.data))
    }
}

pub(crate) mod mat_serde {
    use super::MatrixRecord;
    use crate::lowrank::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rec = MatrixRecord::deserialize(d)?;
        Mat::try_from(rec).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorPairRecord {
    pub rank: usize,
    pub u: MatrixRecord,
    pub v: MatrixRecord,
}

impl From<FactorPair> for FactorPairRecord {
    fn from(p: FactorPair) -> Self {
        Self {
            rank: p.rank(),
            u: MatrixRecord::from(p.u()),
            v: MatrixRecord::from(p.v()),
        }
    }
}

impl TryFrom<FactorPairRecord> for FactorPair {
    type Error = Error;

    fn try_from(rec: FactorPairRecord) -> Result<Self> {
        if rec.u.cols != rec.rank || rec.v.cols != rec.rank {
            return Err(Error::Dimension(format!(
                "factor record rank {} does not match column counts {} / {}",
                rec.rank, rec.u.cols, rec.v.cols
            )));
        }
        FactorPair::new(Mat::try_from(rec.u)?, Mat::try_from(rec.v)?)
    }
}

/// Learner plus optional debiasing accumulators, as written by `simulate` and
/// `replay` and read back by `infer`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub learner: LearnerState,
    pub debias: Option<DebiasState>,
}

impl Checkpoint {
    pub fn new(learner: LearnerState, debias: Option<DebiasState>) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.to_string(),
            learner,
            debias,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema `{}` (expected `{CHECKPOINT_SCHEMA}`)",
                cp.schema
            )));
        }
        cp.learner.validate()?;
        Ok(cp)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_record_is_row_major() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rec = MatrixRecord::from(&m);
        assert_eq!(rec.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Mat::try_from(rec).unwrap(), m);
    }

    #[test]
    fn short_record_rejected() {
        let rec = MatrixRecord {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(Mat::try_from(rec).is_err());
    }
}
