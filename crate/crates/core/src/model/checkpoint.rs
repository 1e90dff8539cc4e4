//! `WSEDM1` checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "WSEDM1" | version | config length | config text (key=value lines)
//! then per tensor until EOF:
//!   name length | name | rank | dims... | f32 values (row-major, LE)
//! ```
//!
//! Values are stored in single precision, so a double-precision model
//! round-trips exactly only once its parameters are f32-representable;
//! every model restored from a checkpoint is.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::autodiff::Array;
use crate::kv::KeyValues;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"WSEDM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KeyValues,
    pub tensors: Vec<(String, Array)>,
}

fn put_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(input: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
            Error::Format("checkpoint is truncated".into())
        }
        other => other,
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Array> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = self.config.render();
        put_u32(&mut out, text.len())?;
        out.write_all(text.as_bytes())?;
        for (name, arr) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.write_all(name.as_bytes())?;
            put_u32(&mut out, arr.rank())?;
            for &d in arr.shape() {
                put_u32(&mut out, d)?;
            }
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for &v in arr.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic).map_err(|e| truncated(e.into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a WSEDM1 checkpoint".into()));
        }
        let version = get_u32(&mut input).map_err(truncated)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = get_u32(&mut input).map_err(truncated)?;
        let mut text = vec![0u8; len];
        input.read_exact(&mut text).map_err(|e| truncated(e.into()))?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = KeyValues::parse(&text, Path::new("<checkpoint>"))?;

        let mut tensors = Vec::new();
        loop {
            let mut first = [0u8; 4];
            match input.read(&mut first[..1])? {
                0 => break,
                _ => input.read_exact(&mut first[1..]).map_err(|e| truncated(e.into()))?,
            }
            let name_len = u32::from_le_bytes(first) as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name).map_err(|e| truncated(e.into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = get_u32(&mut input).map_err(truncated)?;
            let shape = (0..rank)
                .map(|_| get_u32(&mut input))
                .collect::<Result<Vec<_>>>()
                .map_err(truncated)?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes).map_err(|e| truncated(e.into()))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push((name, Array::from_vec(&shape, data)?));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(io::BufReader::new(file))
    }
}
