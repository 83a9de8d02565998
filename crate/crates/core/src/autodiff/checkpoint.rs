//! Plain-text parameter checkpoints.
//!
//! ```text
//! idmlab-checkpoint 1
//! meta arch LC/idm/pos
//! section params
//! param fc.weight 4x4 1 -1 0 ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "idmlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub sections: Vec<(String, ParamStore)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.push((key.to_string(), value.into()));
        self
    }

    pub fn with_section(mut self, name: &str, params: ParamStore) -> Self {
        self.sections.push((name.to_string(), params));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn section(&self, name: &str) -> Option<&ParamStore> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, params) in &self.sections {
            let _ = writeln!(out, "section {name}");
            for (pname, t) in params.iter() {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                let _ = write!(out, "param {pname} {}", dims.join("x"));
                for v in t.data() {
                    let _ = write!(out, " {v:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, detail: &str| Error::Parse {
            line: line + 1,
            detail: detail.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| perr(0, "empty checkpoint"))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(perr(0, "missing checkpoint header"));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(0, "missing format version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(perr(0, &format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').ok_or_else(|| perr(ln, "malformed record"))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                "section" => ck.sections.push((rest.to_string(), ParamStore::new())),
                "param" => {
                    let (_, store) = ck
                        .sections
                        .last_mut()
                        .ok_or_else(|| perr(ln, "param outside of a section"))?;
                    let mut fields = rest.split_whitespace();
                    let name = fields.next().ok_or_else(|| perr(ln, "missing param name"))?;
                    let shape = fields
                        .next()
                        .ok_or_else(|| perr(ln, "missing shape"))?
                        .split('x')
                        .map(str::parse::<usize>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| perr(ln, "bad shape"))?;
                    let data = fields
                        .map(str::parse::<f64>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| perr(ln, "bad value"))?;
                    let t = Tensor::new(shape, data).map_err(|e| perr(ln, &e.to_string()))?;
                    store.insert(name, t);
                }
                other => return Err(perr(ln, &format!("unknown record kind `{other}`"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
