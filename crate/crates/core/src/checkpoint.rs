//! JSON tensor container shared by every trainable component.
//!
//! ```json
//! {"format": "fresh-checkpoint", "version": 1, "kind": "classifier",
//!  "config": {...}, "tensors": [{"name": "...", "shape": [..], "data": [..]}]}
//! ```
//!
//! Tensors are row-major and appear in the component's fixed tensor order.
//! Floats are written in shortest round-trip form, so save/load is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Parameters;

pub const FORMAT: &str = "fresh-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

pub trait Checkpoint: Parameters + Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn config(&self) -> Self::Config;
    /// Name and shape of every tensor, in `Parameters::tensors` order.
    fn shapes(config: &Self::Config) -> Vec<(&'static str, Vec<usize>)>;
    /// Zero-filled parameters for `config`.
    fn zeros(config: &Self::Config) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        let config = self.config();
        let tensors = Self::shapes(&config)
            .into_iter()
            .zip(self.tensors())
            .map(|((name, shape), (_, data))| TensorRecord {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        let container = Container {
            format: FORMAT.into(),
            version: VERSION,
            kind: Self::KIND.into(),
            config: serde_json::to_value(config)?,
            tensors,
        };
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, &container)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    fn load(path: &Path) -> Result<Self> {
        let container: Container = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let bad = |m: String| Error::Schema(format!("{}: {m}", path.display()));
        if container.format != FORMAT {
            return Err(bad(format!("unknown format `{}`", container.format)));
        }
        if container.version != VERSION {
            return Err(bad(format!("unsupported version {}", container.version)));
        }
        if container.kind != Self::KIND {
            return Err(bad(format!(
                "checkpoint holds a `{}`, expected a `{}`",
                container.kind,
                Self::KIND
            )));
        }
        let config: Self::Config = serde_json::from_value(container.config)?;
        let shapes = Self::shapes(&config);
        if shapes.len() != container.tensors.len() {
            return Err(bad("tensor count does not match the config".into()));
        }
        let mut params = Self::zeros(&config)?;
        for (((name, shape), record), (_, dst)) in shapes
            .iter()
            .zip(&container.tensors)
            .zip(params.tensors_mut())
        {
            if record.name != *name
                || record.shape != *shape
                || record.data.len() != dst.len()
            {
                return Err(bad(format!("tensor `{}` does not match `{name}` {shape:?}", record.name)));
            }
            dst.copy_from_slice(&record.data);
        }
        params.check_finite()?;
        Ok(params)
    }
}
