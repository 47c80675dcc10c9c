use std::io::{Read, Write};

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Training pairs `(zᵢ, yᵢ)` where `zᵢ = (xᵢ, uᵢ)` and `yᵢ` is the observed
/// next state minus the prior prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    noise_std: f64,
}

impl Dataset {
    pub fn new(input_dim: usize, output_dim: usize, noise_std: f64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidInput("dataset dimensions must be ≥ 1".into()));
        }
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise std must be positive, got {noise_std}"
            )));
        }
        Ok(Self {
            input_dim,
            output_dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            noise_std,
        })
    }

    pub fn from_pairs(
        inputs: Vec<DVector<f64>>,
        targets: Vec<DVector<f64>>,
        noise_std: f64,
    ) -> Result<Self> {
        let (d, p) = match (inputs.first(), targets.first()) {
            (Some(z), Some(y)) => (z.len(), y.len()),
            _ => {
                return Err(Error::InvalidInput(
                    "cannot infer dimensions from an empty dataset".into(),
                ))
            }
        };
        check_dim(inputs.len(), targets.len(), "dataset target count")?;
        let mut ds = Self::new(d, p, noise_std)?;
        for (z, y) in inputs.into_iter().zip(targets) {
            ds.push(z, y)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, z: DVector<f64>, y: DVector<f64>) -> Result<()> {
        check_dim(self.input_dim, z.len(), "dataset input")?;
        check_dim(self.output_dim, y.len(), "dataset target")?;
        if !linalg::all_finite(&z) || !linalg::all_finite(&y) {
            return Err(Error::InvalidInput("non-finite training pair".into()));
        }
        self.inputs.push(z);
        self.targets.push(y);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        for (z, y) in other.inputs.iter().zip(&other.targets) {
            self.push(z.clone(), y.clone())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    /// Column `j` of the target matrix.
    pub fn target_column(&self, j: usize) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.targets.iter().map(|y| y[j]))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            noise_std: self.noise_std,
        }
    }

    /// Targets multiplied by `a`.
    pub fn scaled_targets(&self, a: f64) -> Dataset {
        let mut out = self.clone();
        for y in &mut out.targets {
            *y *= a;
        }
        out
    }

    pub fn header(&self) -> Vec<String> {
        (0..self.input_dim)
            .map(|i| format!("z_{i}"))
            .chain((0..self.output_dim).map(|j| format!("y_{j}")))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        for (z, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = z.iter().chain(y.iter()).map(|v| format!("{v:e}")).collect();
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]; the split between
    /// inputs and targets is taken from the `z_*`/`y_*` header.
    pub fn read_csv<R: Read>(r: R, noise_std: f64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let d = headers.iter().filter(|h| h.starts_with("z_")).count();
        let p = headers.iter().filter(|h| h.starts_with("y_")).count();
        if d + p != headers.len() {
            return Err(Error::InvalidInput(
                "dataset header must consist of z_* and y_* columns".into(),
            ));
        }
        let mut ds = Self::new(d, p, noise_std)?;
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            ds.push(
                DVector::from_column_slice(&vals[..d]),
                DVector::from_column_slice(&vals[d..]),
            )?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::from_pairs(
            vec![dvector![0.1, -2.0, 3.5], dvector![1e-9, 0.0, 1.0]],
            vec![dvector![0.5, 0.25], dvector![-1.0, 1.0 / 3.0]],
            1e-3,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("z_0,z_1,z_2,y_0,y_1"));
        let back = Dataset::read_csv(buf.as_slice(), 1e-3).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rejects_bad_rows() {
        let mut ds = Dataset::new(2, 1, 0.1).unwrap();
        assert!(ds.push(dvector![1.0], dvector![0.0]).is_err());
        assert!(ds.push(dvector![f64::NAN, 0.0], dvector![0.0]).is_err());
        assert!(Dataset::new(2, 1, 0.0).is_err());
    }
}
