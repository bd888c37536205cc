//! Versioned checkpoint format: a plain-text header naming every tensor
//! and its shape, followed by little-endian `f64` payloads in header order.
//!
//! ```text
//! flowmt-checkpoint 1
//! config {…json…}
//! vocab {…json…}
//! flow_state […json…]
//! metrics_cursor 7
//! tensor embed 60 32
//! …
//! end
//! <raw little-endian data>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::seq2seq::{FlowFixedState, TranslationModel};
use crate::vocab::Vocabulary;

pub const MAGIC: &str = "flowmt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub model: TranslationModel,
    /// Number of metrics-log records already written when this was saved.
    pub metrics_cursor: usize,
}

pub fn to_bytes(model: &TranslationModel, config: &Config, metrics_cursor: usize) -> Vec<u8> {
    let mut head = format!("{MAGIC} {VERSION}\n");
    head.push_str(&format!("config {}\n", serde_json::to_string(config).expect("config serializes")));
    head.push_str(&format!("vocab {}\n", model.vocab().to_json()));
    head.push_str(&format!(
        "flow_state {}\n",
        serde_json::to_string(&model.flow_state()).expect("flow state serializes")
    ));
    head.push_str(&format!("metrics_cursor {metrics_cursor}\n"));
    for (_, name, t) in model.params().iter() {
        head.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
    }
    head.push_str("end\n");
    let mut bytes = head.into_bytes();
    for (_, _, t) in model.params().iter() {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

/// Write atomically: the file appears complete or not at all.
pub fn save(path: &Path, model: &TranslationModel, config: &Config, metrics_cursor: usize) -> Result<()> {
    let bytes = to_bytes(model, config, metrics_cursor);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Input(format!("malformed checkpoint: {}", msg.into()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))
    };
    let first = next_line()?;
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("missing magic line"))?
        .parse::<u32>()
        .map_err(|_| bad("unreadable version"))?;
    if version != VERSION {
        return Err(Error::Input(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let field = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected '{key}' line")))
    };
    let config: Config = serde_json::from_str(&field(next_line()?, "config")?).map_err(|e| bad(e.to_string()))?;
    let vocab = Vocabulary::from_json(&field(next_line()?, "vocab")?)?;
    let flow: Vec<FlowFixedState> =
        serde_json::from_str(&field(next_line()?, "flow_state")?).map_err(|e| bad(e.to_string()))?;
    let metrics_cursor = field(next_line()?, "metrics_cursor")?.parse().map_err(|_| bad("metrics_cursor"))?;
    let mut shapes = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let rest = field(line, "tensor")?;
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 3 {
            return Err(bad(format!("bad tensor line '{line}'")));
        }
        let rows: usize = parts[1].parse().map_err(|_| bad("tensor rows"))?;
        let cols: usize = parts[2].parse().map_err(|_| bad("tensor cols"))?;
        shapes.push((parts[0].to_string(), rows, cols));
    }
    config.validate()?;
    let mut model = TranslationModel::new(&config, vocab)?;
    if shapes.len() != model.params().len() {
        return Err(bad(format!("{} tensors stored, model has {}", shapes.len(), model.params().len())));
    }
    let expected: usize = shapes.iter().map(|(_, r, c)| r * c * 8).sum();
    if bytes.len() - pos != expected {
        return Err(bad(format!("payload is {} bytes, header describes {expected}", bytes.len() - pos)));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for ((name, rows, cols), id) in shapes.iter().zip(ids) {
        let store = model.params_mut();
        if store.name(id) != name || store.get(id).shape() != (*rows, *cols) {
            return Err(bad(format!("tensor '{name}' {rows}x{cols} does not match the model layout")));
        }
        for x in store.get_mut(id).data_mut() {
            *x = f64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes"));
            pos += 8;
        }
    }
    model.restore_flow_state(&flow)?;
    Ok(Checkpoint { config, model, metrics_cursor })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
