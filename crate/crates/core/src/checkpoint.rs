//! Binary record files for checkpoints and unclamped float images.
//!
//! Layout (little endian): magic `BSDN`, `u32` version, `u32` metadata count,
//! then `(key, value)` strings, `u32` tensor count, then per tensor its name,
//! `u32` rank, `u32` dims and raw `f32` samples. Strings are a `u32` byte
//! length followed by UTF-8.

use std::path::Path;

use crate::blindspot::{NetworkConfig, UNet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Denoiser, Head, LearnedNoise, Method};
use crate::noise::{Knownness, NoiseKind, NoiseSpec, ParamRange};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSDN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Records {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Records {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, not a BSDN file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n_meta = r.u32()? as usize;
        let mut metadata = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            metadata.push((k, v));
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Records { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

/// Float image container: one `[C, H, W]` tensor named `image`.
pub fn save_float_image(image: &Image, metadata: Vec<(String, String)>, path: &Path) -> Result<()> {
    let mut meta = vec![("kind".to_string(), "image".to_string())];
    meta.extend(metadata);
    let t = Tensor::from_vec(
        &[image.channels(), image.height(), image.width()],
        image.data().to_vec(),
    )?;
    Records {
        metadata: meta,
        tensors: vec![("image".to_string(), t)],
    }
    .save(path)
}

pub fn load_float_image(path: &Path) -> Result<(Image, Vec<(String, String)>)> {
    let rec = Records::load(path)?;
    if rec.get("kind") != Some("image") {
        return Err(Error::format(path, "not a float image container"));
    }
    let [(name, t)] = rec.tensors.as_slice() else {
        return Err(Error::format(path, "image container must hold exactly one tensor"));
    };
    if name != "image" || t.shape().len() != 3 {
        return Err(Error::format(path, "image tensor must be named 'image' with rank 3"));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let img = Image::new(c, h, w, t.data().to_vec())?;
    let meta = rec.metadata.into_iter().filter(|(k, _)| k != "kind").collect();
    Ok((img, meta))
}

/// Which copy of the weights to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSet {
    Final,
    Best,
    Ema,
}

impl WeightSet {
    pub fn name(self) -> &'static str {
        match self {
            WeightSet::Final => "final",
            WeightSet::Best => "best",
            WeightSet::Ema => "ema",
        }
    }
}

impl std::str::FromStr for WeightSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(WeightSet::Final),
            "best" => Ok(WeightSet::Best),
            "ema" => Ok(WeightSet::Ema),
            other => Err(Error::config(format!("weights must be final, best or ema, got '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form run metadata (configuration echo, steps, seed, ...).
    pub metadata: Vec<(String, String)>,
    pub last: Denoiser,
    pub best: Option<Denoiser>,
    pub ema: Option<Denoiser>,
}

const RESERVED: [&str; 5] = ["kind", "method", "head", "noise.kind", "noise.range"];

fn is_reserved(key: &str) -> bool {
    RESERVED.contains(&key)
        || key == "noise.knownness"
        || key.starts_with("net.")
        || key.starts_with("aux.")
        || key.ends_with(".noise_raw")
}

impl Checkpoint {
    pub fn weights(&self, set: WeightSet) -> Result<&Denoiser> {
        match set {
            WeightSet::Final => Some(&self.last),
            WeightSet::Best => self.best.as_ref(),
            WeightSet::Ema => self.ema.as_ref(),
        }
        .ok_or_else(|| Error::Usage(format!("checkpoint has no {} weights", set.name())))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_records(&self) -> Result<Records> {
        let d = &self.last;
        d.validate()?;
        let mut metadata = vec![
            ("kind".to_string(), "checkpoint".to_string()),
            ("method".to_string(), d.method.name().to_string()),
            ("head".to_string(), d.head.name().to_string()),
            ("noise.kind".to_string(), d.noise.kind.name().to_string()),
            ("noise.range".to_string(), d.noise.range.to_string()),
            ("noise.knownness".to_string(), d.noise.knownness.to_string()),
        ];
        metadata.extend(d.net.config().to_pairs("net."));
        if let LearnedNoise::Network(aux) = &d.learned {
            metadata.extend(aux.config().to_pairs("aux."));
        }
        let mut tensors = Vec::new();
        let sets = [
            (WeightSet::Final, Some(d)),
            (WeightSet::Best, self.best.as_ref()),
            (WeightSet::Ema, self.ema.as_ref()),
        ];
        for (set, den) in sets {
            let Some(den) = den else { continue };
            if den.method != d.method || den.head != d.head || den.noise != d.noise
                || den.net.config() != d.net.config()
            {
                return Err(Error::config(format!(
                    "{} weights disagree with the final weights' configuration",
                    set.name()
                )));
            }
            let prefix = set.name();
            for (name, t) in den.net.named() {
                tensors.push((format!("{prefix}/net/{name}"), t.clone()));
            }
            match &den.learned {
                LearnedNoise::None => {}
                LearnedNoise::Scalar(raw) => {
                    metadata.push((format!("{prefix}.noise_raw"), format!("{raw:?}")));
                }
                LearnedNoise::Network(aux) => {
                    for (name, t) in aux.named() {
                        tensors.push((format!("{prefix}/aux/{name}"), t.clone()));
                    }
                }
            }
        }
        metadata.extend(self.metadata.iter().filter(|(k, _)| !is_reserved(k)).cloned());
        Ok(Records { metadata, tensors })
    }

    pub fn from_records(rec: Records, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if rec.get("kind") != Some("checkpoint") {
            return Err(bad("not a checkpoint file".into()));
        }
        let need = |k: &str| rec.get(k).ok_or_else(|| bad(format!("missing metadata key {k}")));
        let method: Method = need("method")?.parse()?;
        let head: Head = need("head")?.parse()?;
        let kind: NoiseKind = need("noise.kind")?.parse()?;
        let range: ParamRange = need("noise.range")?.parse()?;
        let knownness: Knownness = need("noise.knownness")?.parse()?;
        let noise = NoiseSpec::new(kind, range, knownness)?;
        let lookup = |k: &str| rec.get(k).map(str::to_string);
        let net_cfg = NetworkConfig::from_lookup("net.", lookup)?;
        let aux_cfg = if rec.metadata.iter().any(|(k, _)| k.starts_with("aux.")) {
            Some(NetworkConfig::from_lookup("aux.", lookup)?)
        } else {
            None
        };

        let load_set = |set: WeightSet| -> Result<Option<Denoiser>> {
            let prefix = set.name();
            let net_prefix = format!("{prefix}/net/");
            let aux_prefix = format!("{prefix}/aux/");
            let strip = |p: &str| -> Vec<(String, Tensor<f32>)> {
                rec.tensors
                    .iter()
                    .filter_map(|(n, t)| n.strip_prefix(p).map(|s| (s.to_string(), t.clone())))
                    .collect()
            };
            let net_tensors = strip(&net_prefix);
            if net_tensors.is_empty() {
                return Ok(None);
            }
            let net = UNet::from_named(net_cfg.clone(), net_tensors)?;
            let learned = if let Some(cfg) = &aux_cfg {
                LearnedNoise::Network(UNet::from_named(cfg.clone(), strip(&aux_prefix))?)
            } else if let Some(raw) = rec.get(&format!("{prefix}.noise_raw")) {
                LearnedNoise::Scalar(
                    raw.parse()
                        .map_err(|_| bad(format!("bad {prefix}.noise_raw '{raw}'")))?,
                )
            } else {
                LearnedNoise::None
            };
            let den = Denoiser {
                method,
                head,
                noise,
                net,
                learned,
            };
            den.validate()?;
            Ok(Some(den))
        };
        let last = load_set(WeightSet::Final)?.ok_or_else(|| bad("no final weights".into()))?;
        let best = load_set(WeightSet::Best)?;
        let ema = load_set(WeightSet::Ema)?;
        let known: usize = [Some(&last), best.as_ref(), ema.as_ref()]
            .into_iter()
            .flatten()
            .map(|d| {
                d.net.params().len()
                    + match &d.learned {
                        LearnedNoise::Network(a) => a.params().len(),
                        _ => 0,
                    }
            })
            .sum();
        if known != rec.tensors.len() {
            return Err(bad(format!(
                "{} tensors do not belong to any weight set",
                rec.tensors.len() - known
            )));
        }
        let metadata = rec.metadata.into_iter().filter(|(k, _)| !is_reserved(k)).collect();
        Ok(Checkpoint {
            metadata,
            last,
            best,
            ema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_records()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(Records::load(path)?, path)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_records()?.to_bytes())
    }
}
