//! Text checkpoint format, version 1:
//!
//! ```text
//! dre-rank-checkpoint 1
//! backbone <mf|lightgc>
//! dim <d>
//! layers <L>
//! users <n>
//! items <m>
//! u <d floats>          (n lines)
//! i <d floats>          (m lines)
//! sha256 <hex digest of every preceding byte>
//! ```
//!
//! Floats use Rust's shortest round-trip representation, so a checkpoint
//! reloads bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ScorerModel;

const MAGIC: &str = "dre-rank-checkpoint 1";

pub fn encode(model: &ScorerModel) -> String {
    let mut body = String::new();
    let _ = writeln!(body, "{MAGIC}");
    let _ = writeln!(body, "backbone {}", model.backbone);
    let _ = writeln!(body, "dim {}", model.dim());
    let _ = writeln!(body, "layers {}", model.num_layers);
    let _ = writeln!(body, "users {}", model.num_users());
    let _ = writeln!(body, "items {}", model.num_items());
    for (tag, table) in [("u", &model.user_embed), ("i", &model.item_embed)] {
        for row in table.rows() {
            body.push_str(tag);
            for v in row {
                let _ = write!(body, " {v}");
            }
            body.push('\n');
        }
    }
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    let _ = writeln!(body, "sha256 {digest}");
    body
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn header<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines.next().ok_or_else(|| integrity(format!("missing `{key}`")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| integrity(format!("expected `{key}`, found `{line}`")))
}

fn parse_count(s: &str, key: &str) -> Result<usize> {
    s.parse().map_err(|_| integrity(format!("bad `{key}` value `{s}`")))
}

pub fn decode(text: &str) -> Result<ScorerModel> {
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let split_at = trimmed.rfind('\n').ok_or_else(|| integrity("truncated checkpoint"))?;
    let (body, trailer) = (&text[..split_at + 1], &trimmed[split_at + 1..]);
    let expected = trailer
        .strip_prefix("sha256 ")
        .ok_or_else(|| integrity("missing checksum trailer"))?;
    let actual = hex::encode(Sha256::digest(body.as_bytes()));
    if actual != expected {
        return Err(integrity("checksum mismatch"));
    }

    let mut lines = body.lines();
    if lines.next() != Some(MAGIC) {
        return Err(integrity("unknown checkpoint header"));
    }
    let backbone = header(&mut lines, "backbone")?
        .parse()
        .map_err(|_| integrity("bad backbone"))?;
    let dim = parse_count(header(&mut lines, "dim")?, "dim")?;
    let num_layers = parse_count(header(&mut lines, "layers")?, "layers")?;
    let users = parse_count(header(&mut lines, "users")?, "users")?;
    let items = parse_count(header(&mut lines, "items")?, "items")?;

    let mut read_table = |tag: &str, rows: usize| -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            let line = header(&mut lines, tag)?;
            let before = data.len();
            for tok in line.split(' ') {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|_| integrity(format!("bad float `{tok}` in {tag} row {r}")))?,
                );
            }
            if data.len() - before != dim {
                return Err(integrity(format!("{tag} row {r} has wrong width")));
            }
        }
        Array2::from_shape_vec((rows, dim), data).map_err(|e| integrity(e.to_string()))
    };
    let user_embed = read_table("u", users)?;
    let item_embed = read_table("i", items)?;
    if lines.next().is_some() {
        return Err(integrity("trailing data"));
    }
    let model = ScorerModel {
        backbone,
        num_layers,
        user_embed,
        item_embed,
    };
    if !model.is_finite() {
        return Err(integrity("non-finite embedding"));
    }
    Ok(model)
}

pub fn save(model: &ScorerModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ScorerModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text)
}
