//! Checkpoint container.
//!
//! ```text
//! SHAPECOMP-CKPT 1
//! meta <key> <value>
//! step <n>
//! network <name> <input dims...>
//! layer <spec>
//! end
//! blobs <count>
//! blob <name> <dims...>\n<little-endian f32 payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::layers::LayerSpec;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "SHAPECOMP-CKPT 1";

#[derive(Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub step: u64,
    pub networks: Vec<(String, Network<f32>)>,
    /// Auxiliary tensors such as optimizer moments.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&Network<f32>> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    pub fn take_network(&mut self, name: &str) -> Option<Network<f32>> {
        let i = self.networks.iter().position(|(n, _)| n == name)?;
        Some(self.networks.remove(i).1)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::InvalidInput(format!("checkpoint metadata {k:?} not representable")));
            }
            head += &format!("meta {k} {v}\n");
        }
        head += &format!("step {}\n", self.step);
        let mut blobs: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (name, net) in &self.networks {
            check_name(name)?;
            let dims: Vec<String> = net.input_shape().iter().map(|d| d.to_string()).collect();
            head += &format!("network {name} {}\n", dims.join(" "));
            for s in net.specs() {
                head += &format!("layer {s}\n");
            }
            head += "end\n";
            for (pname, t) in net.named_params().into_iter().chain(net.named_buffers()) {
                blobs.push((format!("{name}/{pname}"), t));
            }
        }
        for (name, t) in &self.tensors {
            check_name(name)?;
            blobs.push((format!("aux/{name}"), t));
        }
        head += &format!("blobs {}\n", blobs.len());
        let mut out = head.into_bytes();
        for (name, t) in blobs {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(format!("blob {name} {}\n", dims.join(" ")).as_bytes());
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(origin, d);
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.line().map_err(&bad)? != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let mut ck = Checkpoint::default();
        let blob_count = loop {
            let line = cur.line().map_err(&bad)?;
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                "step" => ck.step = rest.parse().map_err(|_| bad(format!("bad step {rest:?}")))?,
                "network" => {
                    let mut it = rest.split_whitespace();
                    let name = it.next().ok_or_else(|| bad("unnamed network".into()))?.to_string();
                    let input: Vec<usize> = it
                        .map(|t| t.parse().map_err(|_| bad(format!("bad input dim {t:?}"))))
                        .collect::<Result<_>>()?;
                    let mut specs = Vec::new();
                    loop {
                        let l = cur.line().map_err(&bad)?;
                        if l == "end" {
                            break;
                        }
                        let s = l.strip_prefix("layer ").ok_or_else(|| bad(format!("unexpected {l:?}")))?;
                        specs.push(LayerSpec::parse(s).map_err(|e| bad(e.to_string()))?);
                    }
                    let net = Network::new(&input, specs).map_err(|e| bad(e.to_string()))?;
                    ck.networks.push((name, net));
                }
                "blobs" => break rest.parse::<usize>().map_err(|_| bad(format!("bad blob count {rest:?}")))?,
                _ => return Err(bad(format!("unexpected header line {line:?}"))),
            }
        };
        for _ in 0..blob_count {
            let line = cur.line().map_err(&bad)?;
            let mut it = line.strip_prefix("blob ").ok_or_else(|| bad(format!("expected blob, got {line:?}")))?.split(' ');
            let name = it.next().unwrap_or_default().to_string();
            let shape: Vec<usize> = it
                .map(|t| t.parse().map_err(|_| bad(format!("bad blob dim {t:?}"))))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4).map_err(&bad)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| bad(e.to_string()))?;
            if let Some(aux) = name.strip_prefix("aux/") {
                ck.tensors.push((aux.to_string(), t));
                continue;
            }
            let (net_name, pname) = name.split_once('/').ok_or_else(|| bad(format!("bad blob name {name:?}")))?;
            let net = ck
                .networks
                .iter_mut()
                .find(|(n, _)| n == net_name)
                .map(|(_, net)| net)
                .ok_or_else(|| bad(format!("blob for unknown network {net_name:?}")))?;
            let slot = net.tensor_mut(pname).ok_or_else(|| bad(format!("unknown tensor {name:?}")))?;
            if slot.shape() != t.shape() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(ck)
    }

    /// Writes via a temporary sibling and rename so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.set_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::decode(&bytes, path)
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '/') {
        return Err(Error::InvalidInput(format!("invalid checkpoint entry name {name:?}")));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> std::result::Result<&'a str, String> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or("truncated header")?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| "non-UTF-8 header".to_string())
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err("truncated blob".into());
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }
}
