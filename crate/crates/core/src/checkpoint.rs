//! Single-file checkpoints: magic, a JSON header, then little-endian arrays.
//!
//! Layout:
//!
//! ```text
//! b"SDCKPT\0\n" | u32 LE header length | header JSON | array data
//! ```
//!
//! The header lists every array with its name, shape, dtype tag (`f64` or
//! `f32`) and byte offset into the data section. Parameter arrays are named
//! `<group>/<param>`; Adam moments are `opt.m/<group>/<param>` and
//! `opt.v/<group>/<param>`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelState};
use crate::optim::AdamState;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"SDCKPT\0\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `pretrain` or `finetune`.
    pub kind: String,
    pub step: u64,
    /// Canonical config text the run was started with.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelState,
    pub opt: BTreeMap<String, AdamState>,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    step: u64,
    config: String,
    config_hash: String,
    seed: u64,
    rng: RngState,
    groups: Vec<String>,
    adam_steps: BTreeMap<String, u64>,
    arrays: Vec<ArrayEntry>,
}

fn push_set(prefix: &str, set: &ParamSet, entries: &mut Vec<(String, Mat)>) {
    for (name, v) in set.names().iter().zip(set.values()) {
        entries.push((format!("{prefix}/{name}"), v.clone()));
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut groups = Vec::new();
    for (g, set) in ck.model.groups() {
        groups.push(g.to_string());
        push_set(g, set, &mut entries);
    }
    for (g, st) in &ck.opt {
        let set = ck.model.groups().into_iter().find(|(n, _)| n == g).map(|(_, s)| s).ok_or_else(|| {
            Error::State(format!("optimizer state for missing group `{g}`"))
        })?;
        for (kind, moments) in [("m", &st.m), ("v", &st.v)] {
            for (name, v) in set.names().iter().zip(moments) {
                entries.push((format!("opt.{kind}/{g}/{name}"), v.clone()));
            }
        }
    }
    let mut offset = 0u64;
    let arrays = entries
        .iter()
        .map(|(name, v)| {
            let e = ArrayEntry {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                dtype: "f64".into(),
                offset,
            };
            offset += 8 * v.len() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: ck.kind.clone(),
        step: ck.step,
        config: ck.config.clone(),
        config_hash: ck.config_hash.clone(),
        seed: ck.seed,
        rng: RngState {
            seed: hex::encode(ck.rng.get_seed()),
            stream: ck.rng.get_stream(),
            word_pos: ck.rng.get_word_pos().to_string(),
        },
        groups,
        adam_steps: ck.opt.iter().map(|(g, s)| (g.clone(), s.t)).collect(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in &entries {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary file so an interrupted save leaves any
/// previous checkpoint at `path` intact.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn bad(reason: impl Into<String>) -> Error {
    Error::State(format!("malformed checkpoint: {}", reason.into()))
}

fn read_array(data: &[u8], e: &ArrayEntry) -> Result<Mat> {
    let n = e.shape[0] * e.shape[1];
    let width = match e.dtype.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => return Err(bad(format!("array `{}` has unknown dtype `{other}`", e.name))),
    };
    let start = e.offset as usize;
    let end = start + n * width;
    let bytes = data
        .get(start..end)
        .ok_or_else(|| bad(format!("array `{}` runs past the end of the file", e.name)))?;
    let values: Vec<f64> = if width == 8 {
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    } else {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    };
    Ok(Mat::from_shape_vec((e.shape[0], e.shape[1]), values).expect("sized"))
}

/// Fills `template` from the named arrays, checking every name and shape.
fn fill(template: &ParamSet, prefix: &str, arrays: &BTreeMap<String, Mat>) -> Result<ParamSet> {
    let mut out = template.clone();
    for (i, name) in template.names().iter().enumerate() {
        let key = format!("{prefix}/{name}");
        let v = arrays
            .get(&key)
            .ok_or_else(|| Error::State(format!("checkpoint lacks array `{key}`")))?;
        if v.dim() != template.get(i).dim() {
            return Err(Error::State(format!(
                "array `{key}` has shape {:?}, expected {:?}",
                v.dim(),
                template.get(i).dim()
            )));
        }
        *out.get_mut(i) = v.clone();
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], arch: &Architecture) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::State(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let data = &bytes[12 + hlen..];
    let mut arrays = BTreeMap::new();
    for e in &header.arrays {
        arrays.insert(e.name.clone(), read_array(data, e)?);
    }

    let mut groups: BTreeMap<&str, ParamSet> = BTreeMap::new();
    for g in &header.groups {
        let template = arch
            .template(g)
            .ok_or_else(|| bad(format!("unknown parameter group `{g}`")))?;
        groups.insert(g.as_str(), fill(&template, g, &arrays)?);
    }
    let mut take = |g: &str| groups.remove(g);
    let model = ModelState {
        frontend: take("frontend").ok_or_else(|| bad("no frontend group"))?,
        student: take("student").ok_or_else(|| bad("no student group"))?,
        teacher: take("teacher"),
        decoder: take("decoder"),
        head: take("head"),
    };

    let mut opt = BTreeMap::new();
    for (g, &t) in &header.adam_steps {
        let set = model
            .groups()
            .into_iter()
            .find(|(n, _)| n == g)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| bad(format!("optimizer state for missing group `{g}`")))?;
        let m = fill(&set, &format!("opt.m/{g}"), &arrays)?;
        let v = fill(&set, &format!("opt.v/{g}"), &arrays)?;
        opt.insert(
            g.clone(),
            AdamState {
                m: m.values().to_vec(),
                v: v.values().to_vec(),
                t,
            },
        );
    }

    let seed: [u8; 32] = hex::decode(&header.rng.seed)
        .map_err(|e| bad(format!("rng seed: {e}")))?
        .try_into()
        .map_err(|_| bad("rng seed must be 32 bytes"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| bad("rng word position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        kind: header.kind,
        step: header.step,
        config: header.config,
        config_hash: header.config_hash,
        seed: header.seed,
        model,
        opt,
        rng,
    })
}

pub fn load(path: &Path, arch: &Architecture) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, arch)
}

/// Magic of the plain array bundle used for exports.
pub const BUNDLE_MAGIC: &[u8; 8] = b"SDARRY\0\n";

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    format_version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Same layout as a checkpoint with free-form `meta` in place of the
/// training fields.
pub fn bundle_to_bytes(meta: serde_json::Value, arrays: &[(String, Mat)]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let entries = arrays
        .iter()
        .map(|(name, v)| {
            let e = ArrayEntry {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                dtype: "f64".into(),
                offset,
            };
            offset += 8 * v.len() as u64;
            e
        })
        .collect();
    let json = serde_json::to_vec(&BundleHeader {
        format_version: FORMAT_VERSION,
        meta,
        arrays: entries,
    })?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in arrays {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Mat)>)> {
    if bytes.len() < 12 || &bytes[..8] != BUNDLE_MAGIC {
        return Err(bad("missing bundle magic bytes"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: BundleHeader = serde_json::from_slice(json)?;
    let data = &bytes[12 + hlen..];
    let arrays = header
        .arrays
        .iter()
        .map(|e| Ok((e.name.clone(), read_array(data, e)?)))
        .collect::<Result<_>>()?;
    Ok((header.meta, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{ConvLayerSpec, FrontendConfig};
    use crate::network::{DecoderConfig, NetworkConfig};
    use rand::Rng;

    fn arch(embed: usize) -> Architecture {
        let fe = FrontendConfig {
            conv_layers: vec![ConvLayerSpec::new(4, 10, 5)],
            ..FrontendConfig::narrowed(4, 4)
        };
        let net = NetworkConfig {
            input_dim: 4,
            embed_dim: embed,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            dropout: 0.0,
            layerdrop: 0.0,
            pos_kernel: 3,
            pos_groups: 2,
            decoder: DecoderConfig {
                dim: 4,
                kernel: 3,
                groups: 2,
                layers: 1,
            },
            n_classes: 2,
        };
        Architecture::new(fe, net).unwrap()
    }

    fn sample(a: &Architecture) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = a.init_pretrain(&mut rng);
        let mut st = AdamState::new(&model.student);
        st.t = 7;
        st.m[0][[0, 0]] = 0.1 + 1e-17;
        st.v[1][[0, 0]] = f64::MIN_POSITIVE;
        let _: u64 = rng.random();
        let mut opt = BTreeMap::new();
        opt.insert("student".to_string(), st);
        Checkpoint {
            kind: "pretrain".into(),
            step: 25,
            config: "lr = 0.001\n".into(),
            config_hash: "abc".into(),
            seed: 9,
            model,
            opt,
            rng,
        }
    }

    #[test]
    fn bundle_round_trip() {
        let a = Mat::from_shape_fn((3, 2), |(i, j)| i as f64 - 0.5 * j as f64);
        let b = Mat::eye(2) / 3.0;
        let arrays = vec![("a".to_string(), a), ("x/b".to_string(), b)];
        let bytes = bundle_to_bytes(serde_json::json!({"seed": 4}), &arrays).unwrap();
        let (meta, back) = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(meta["seed"], 4);
        assert_eq!(back, arrays);
        assert!(bundle_from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = arch(8);
        let ck = sample(&a);
        let back = from_bytes(&to_bytes(&ck).unwrap(), &a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model.student.digest(), ck.model.student.digest());
        let (mut r1, mut r2) = (ck.rng.clone(), back.rng.clone());
        for _ in 0..10 {
            assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        }
        assert_eq!(to_bytes(&back).unwrap(), to_bytes(&ck).unwrap());
    }

    #[test]
    fn save_and_load_through_a_file() {
        let a = arch(8);
        let ck = sample(&a);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save(&p, &ck).unwrap();
        assert_eq!(load(&p, &a).unwrap(), ck);
        assert!(!dir.path().join("x.tmp").exists());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let a = arch(8);
        let bytes = to_bytes(&sample(&a)).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        header["format_version"] = serde_json::json!(2);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + hlen..]);
        let err = from_bytes(&out, &a).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        assert!(from_bytes(b"garbage-bytes", &a).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_array() {
        let ck = sample(&arch(8));
        let bytes = to_bytes(&ck).unwrap();
        let err = from_bytes(&bytes, &arch(4)).unwrap_err();
        match err {
            Error::State(m) => assert!(m.contains("frontend/") || m.contains("student/enc."), "{m}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn f32_arrays_are_widened() {
        let e = ArrayEntry {
            name: "x".into(),
            shape: [1, 2],
            dtype: "f32".into(),
            offset: 0,
        };
        let mut data = 1.5f32.to_le_bytes().to_vec();
        data.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(read_array(&data, &e).unwrap(), Mat::from_shape_vec((1, 2), vec![1.5, -2.0]).unwrap());
        let bad = ArrayEntry { dtype: "i8".into(), ..e };
        assert!(read_array(&data, &bad).is_err());
    }
}
