//! Plain-text checkpoints. Floats use the shortest round-trip formatting, so a
//! save/load cycle reproduces every parameter exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{Model, PolicyDims, PolicyParameters, Weights};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

const MAGIC: &str = "kg-order checkpoint v1";

fn push_row(out: &mut String, row: impl Iterator<Item = f64>) {
    let line: Vec<String> = row.map(|v| format!("{v:e}")).collect();
    out.push_str(&line.join(" "));
    out.push('\n');
}

pub fn write_checkpoint(model: &Model) -> String {
    let p = &model.params;
    let mut out = format!("{MAGIC}\n");
    out.push_str(&format!(
        "dims {}\n",
        serde_json::to_string(&p.dims).expect("dims serialise")
    ));
    out.push_str(&format!("tau {:e}\neta {:e}\n", p.tau, p.eta));
    for (name, block) in p.weights.blocks() {
        out.push_str(&format!("block {name} {} {}\n", block.nrows(), block.ncols()));
        for row in block.rows() {
            push_row(&mut out, row.iter().copied());
        }
    }
    out.push_str("embeddings\n");
    out.push_str(&model.embeddings.to_text());
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(self.error("unexpected end of file")),
        }
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: PathBuf::new(),
            line: self.last.max(1),
            message: message.into(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.error(format!("expected {key:?}")))
    }

    fn float(&mut self, key: &str) -> Result<f64> {
        let v = self.keyed(key)?;
        v.trim().parse().map_err(|_| self.error(format!("bad number {v:?}")))
    }
}

pub fn read_checkpoint(text: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.error("not a checkpoint or unsupported version"));
    }
    let dims_json = lines.keyed("dims")?;
    let dims: PolicyDims = serde_json::from_str(dims_json).map_err(|e| lines.error(e.to_string()))?;
    let tau = lines.float("tau")?;
    let eta = lines.float("eta")?;
    let mut weights = Weights::zeros(&dims);
    for (name, block) in weights.blocks_mut() {
        let header = lines.keyed("block")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let expect = [name.clone(), block.nrows().to_string(), block.ncols().to_string()];
        if fields != expect.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(lines.error(format!("expected block {}, found {header:?}", expect.join(" "))));
        }
        let (rows, cols) = block.dim();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines.next()?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| lines.error(format!("bad number {tok:?}")))?);
            }
            if data.len() - before != cols {
                return Err(lines.error(format!("expected {cols} values")));
            }
        }
        *block = Array2::from_shape_vec((rows, cols), data).expect("row lengths checked");
    }
    if lines.next()? != "embeddings" {
        return Err(lines.error("expected embeddings section"));
    }
    let offset = lines.last;
    let rest: Vec<&str> = lines.inner.map(|(_, l)| l).collect();
    let embeddings = EmbeddingTable::from_text(&rest.join("\n")).map_err(|e| match e {
        Error::Parse { path, line, message } => Error::Parse {
            path,
            line: line + offset,
            message,
        },
        other => other,
    })?;
    if !weights.is_finite() || !embeddings.is_finite() {
        return Err(Error::InvalidArgument("checkpoint holds non-finite values".into()));
    }
    Model::new(PolicyParameters { dims, tau, eta, weights }, embeddings)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}
