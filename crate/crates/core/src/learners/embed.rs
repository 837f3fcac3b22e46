//! The trainable feature extractor: a single affine map `W·x + b`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diff::{NodeId, Tape};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &str = "DBPARAMS1";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    /// Row-major, `output_dim × input_dim`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// Parameter leaves of an embedding recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNodes {
    pub weights: NodeId,
    pub bias: Option<NodeId>,
}

impl EmbeddingParams {
    pub fn new(weights: Vec<f64>, bias: Option<Vec<f64>>, input_dim: usize, output_dim: usize) -> Result<Self> {
        if weights.len() != input_dim * output_dim {
            return Err(Error::Shape(format!(
                "{} weights for a {output_dim}x{input_dim} map",
                weights.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != output_dim) {
            return Err(Error::Shape("bias length differs from output_dim".into()));
        }
        let params = EmbeddingParams {
            weights,
            bias,
            input_dim,
            output_dim,
        };
        if !params.is_finite() {
            return Err(Error::Numeric("embedding parameters must be finite".into()));
        }
        Ok(params)
    }

    /// Ones on the leading diagonal, zeros elsewhere, no bias.
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        let mut weights = vec![0.0; input_dim * output_dim];
        for k in 0..input_dim.min(output_dim) {
            weights[k * input_dim + k] = 1.0;
        }
        EmbeddingParams {
            weights,
            bias: None,
            input_dim,
            output_dim,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter().flatten()).all(|v| v.is_finite())
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input of dimension {} for an embedding expecting {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut out: Vec<f64> = self
            .weights
            .chunks_exact(self.input_dim)
            .map(|row| crate::diff::dot(row, x))
            .collect();
        if let Some(bias) = &self.bias {
            out.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        Ok(out)
    }

    pub fn record(&self, tape: &mut Tape) -> EmbeddingNodes {
        EmbeddingNodes {
            weights: tape.leaf(self.weights.clone()),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }

    /// Records `W·x (+ b)` on the tape, `x` entering as a constant.
    pub fn embed_on_tape(&self, tape: &mut Tape, nodes: EmbeddingNodes, x: &[f64]) -> Result<NodeId> {
        let x = tape.leaf(x.to_vec());
        let y = tape.matvec(nodes.weights, self.output_dim, self.input_dim, x)?;
        match nodes.bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Weights followed by bias, the layout used by optimizers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        if let Some(b) = &self.bias {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&flat[..n]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&flat[n..]);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{PARAMS_MAGIC} rows={} cols={} bias={}",
            self.output_dim,
            self.input_dim,
            u8::from(self.bias.is_some())
        );
        let mut write_row = |row: &[f64]| {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        };
        self.weights.chunks_exact(self.input_dim).for_each(&mut write_row);
        if let Some(b) = &self.bias {
            write_row(b);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(1, "header", "empty params file"))?;
        let mut tokens = header.split(' ');
        if tokens.next() != Some(PARAMS_MAGIC) {
            return Err(Error::format(1, "magic", format!("expected {PARAMS_MAGIC}")));
        }
        let mut field = |key: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.strip_prefix(key))
                .and_then(|t| t.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(1, key, "missing or malformed"))
        };
        let rows = field("rows")?;
        let cols = field("cols")?;
        let has_bias = match field("bias")? {
            0 => false,
            1 => true,
            _ => return Err(Error::format(1, "bias", "expected 0 or 1")),
        };
        let mut parse_row = |line_no: usize, expected: usize| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(line_no, "row", "missing row"))?;
            let row = line
                .split(',')
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::format(line_no, "value", format!("bad value `{s}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != expected {
                return Err(Error::format(
                    line_no,
                    "row",
                    format!("expected {expected} values, found {}", row.len()),
                ));
            }
            Ok(row)
        };
        let mut weights = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            weights.extend(parse_row(r + 2, cols)?);
        }
        let bias = if has_bias {
            Some(parse_row(rows + 2, rows)?)
        } else {
            None
        };
        EmbeddingParams::new(weights, bias, cols, rows)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text())
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::format(0, "file", format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}
