use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::container::{self, Kind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::{Model, ModelConfig, ModelParams};

impl<S: Scalar> Model<S> {
    /// Header, `u32` length + JSON config, `u64` scalar count, then every
    /// parameter as little-endian `f32` in [`ModelParams::visit`] order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        container::write_header(w, Kind::Checkpoint)?;
        let json = serde_json::to_vec(&self.config)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.params.n_scalars() as u64).to_le_bytes())?;
        for t in self.params.leaves() {
            container::write_f32s(w, t.data().iter().map(|v| v.to_f64_lossy() as f32))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        container::read_header(r, Kind::Checkpoint)?;
        let len = container::read_u32(r)? as usize;
        let mut json = vec![0u8; len];
        container::read_exact(r, &mut json)?;
        let config: ModelConfig = serde_json::from_slice(&json)?;
        config.validate()?;
        let skeleton = ModelParams::<Tensor<S>>::init(&config, 0);
        let count = container::read_u64(r)?;
        if count != skeleton.n_scalars() as u64 {
            return Err(Error::Format(format!(
                "{count} parameters stored, config needs {}",
                skeleton.n_scalars()
            )));
        }
        let mut params = skeleton;
        let mut failed = None;
        params.visit_mut(&mut |t| {
            if failed.is_some() {
                return;
            }
            match container::read_f32s(r, t.len()) {
                Ok(vals) => {
                    for (d, v) in t.data_mut().iter_mut().zip(vals) {
                        *d = S::of(v as f64);
                    }
                }
                Err(e) => failed = Some(e),
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        container::expect_eof(r)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
