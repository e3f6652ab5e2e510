//! Self-describing checkpoint files: a text header naming the config and every
//! tensor, followed by the parameter values as little-endian `f64`.

use thiserror::Error;

use crate::encoder::{Encoder, EncoderConfig, EncoderError, Params};
use crate::real::Real;

const MAGIC: &str = "narrel-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("tensor {name}: header says {found:?}, config implies {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("payload holds {found} bytes, header implies {expected}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Serializes `model`; `comment` becomes the first header line (without the `#`).
pub fn to_bytes<T: Real>(model: &Encoder<T>, comment: &str) -> Vec<u8> {
    let c = model.config();
    let mut header = format!("# {comment}\n{MAGIC}\n");
    for (key, value) in [
        ("vocab_size", c.vocab_size as u64),
        ("d_model", c.d_model as u64),
        ("n_layers", c.n_layers as u64),
        ("n_heads", c.n_heads as u64),
        ("d_ff", c.d_ff as u64),
        ("max_len", c.max_len as u64),
        ("seed", c.seed),
    ] {
        header.push_str(&format!("{key} {value}\n"));
    }
    let tensors = model.params.tensors();
    for t in &tensors {
        let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor {} {}\n", t.name, dims.join(" ")));
    }
    header.push_str("end\n");

    let mut out = header.into_bytes();
    for t in &tensors {
        for &x in t.data {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint, casting values to `T`.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Encoder<T>, CheckpointError> {
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    let mut pos = 0;
    let mut next_line = || -> Result<&str, CheckpointError> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| fmt("unterminated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| fmt("header is not UTF-8"))
    };

    let mut line = next_line()?;
    while line.starts_with('#') {
        line = next_line()?;
    }
    if line != MAGIC {
        return Err(fmt("missing magic line"));
    }
    let mut config = EncoderConfig::default();
    let mut shapes = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| fmt("blank header line"))?;
        if key == "tensor" {
            let name = parts.next().ok_or_else(|| fmt("tensor without name"))?.to_string();
            let dims = parts
                .map(|d| d.parse::<usize>().map_err(|_| fmt("bad tensor dimension")))
                .collect::<Result<Vec<_>, _>>()?;
            shapes.push((name, dims));
            continue;
        }
        let value: u64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fmt(&format!("bad value for {key}")))?;
        let v = value as usize;
        match key {
            "vocab_size" => config.vocab_size = v,
            "d_model" => config.d_model = v,
            "n_layers" => config.n_layers = v,
            "n_heads" => config.n_heads = v,
            "d_ff" => config.d_ff = v,
            "max_len" => config.max_len = v,
            "seed" => config.seed = value,
            other => return Err(fmt(&format!("unknown key {other}"))),
        }
    }
    config.validate()?;

    let mut params = Params::<T>::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> =
        params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if expected.len() != shapes.len() {
        return Err(fmt("tensor list does not match config"));
    }
    for ((en, es), (fnm, fs)) in expected.iter().zip(&shapes) {
        if en != fnm || es != fs {
            return Err(CheckpointError::Shape {
                name: fnm.clone(),
                expected: es.clone(),
                found: fs.clone(),
            });
        }
    }

    let payload = &bytes[pos..];
    let needed = params.len() * 8;
    if payload.len() != needed {
        return Err(CheckpointError::Truncated {
            expected: needed,
            found: payload.len(),
        });
    }
    let mut chunks = payload.chunks_exact(8);
    for (_, data) in params.tensors_mut() {
        for x in data.iter_mut() {
            let raw: [u8; 8] = chunks.next().expect("length checked").try_into().expect("8 bytes");
            *x = T::of(f64::from_le_bytes(raw));
        }
    }
    Ok(Encoder::from_params(config, params)?)
}
