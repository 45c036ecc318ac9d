//! Binary artifact containers.
//!
//! Every file starts with an 8-byte magic and a little-endian `u32` format
//! version, followed by a kind-specific header and, where relevant, a tensor
//! table: `count: u32`, then per tensor `name_len: u16`, name, `rank: u8`,
//! `dims: u64 × rank` and the raw little-endian `f64` payload.

use std::fs;
use std::path::Path;

use crate::adapters::{AdapterSet, AdapterVariant, SiteAdapter, SiteDims};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel, SiteId, SiteKind, Weights};
use crate::selector::{EmbeddingBuffer, SelectorMlp, TaskEmbeddings};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AGSGBASE";
pub const ADAPTER_MAGIC: &[u8; 8] = b"AGSGADPT";
pub const BUFFER_MAGIC: &[u8; 8] = b"AGSGBUFR";
pub const SELECTOR_MAGIC: &[u8; 8] = b"AGSGSELC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len_u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit the u32 field")))?;
        self.u32(v);
        Ok(())
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.len_u32(b.len())?;
        self.buf.extend_from_slice(b);
        Ok(())
    }

    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn tensors(&mut self, ts: &[(String, &Tensor)]) -> Result<()> {
        self.len_u32(ts.len())?;
        for (name, t) in ts {
            let n = u16::try_from(name.len()).map_err(|_| Error::Validation(format!("tensor name {name} too long")))?;
            self.u16(n);
            self.buf.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Validation("tensor rank above 255".into()))?;
            self.u8(rank);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            self.f64s(t.data());
        }
        Ok(())
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(data: &'a [u8], path: &'a Path, magic: &[u8; 8]) -> Result<Self> {
        let mut r = Self { data, pos: 0, path };
        let got = r.take(8)?;
        if got != magic {
            return Err(r.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = r.u32()?;
        if v != FORMAT_VERSION {
            return Err(r.err(format!("unsupported format version {v} (this build reads {FORMAT_VERSION})")));
        }
        Ok(r)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, format!("{} (at byte {})", msg.into(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.err("payload size overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.usize()?;
        let mut out = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.err("tensor name is not UTF-8"))?;
            let rank = self.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(self.u64()?).map_err(|_| self.err("dimension overflow"))?);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| self.err("tensor size overflow"))?;
            let data = self.f64s(count)?;
            out.push((name, Tensor::new(dims, data)?));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn expect_names(r: &Reader<'_>, got: &[(String, Tensor)], want: &[String]) -> Result<()> {
    if got.len() != want.len() {
        return Err(r.err(format!("expected {} tensors, found {}", want.len(), got.len())));
    }
    for ((g, _), w) in got.iter().zip(want) {
        if g != w {
            return Err(r.err(format!("expected tensor {w}, found {g}")));
        }
    }
    Ok(())
}

/// Writes through a sibling temp file so readers never see a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(model: &SegModel) -> Result<Vec<u8>> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(model.config()).map_err(|e| Error::Validation(e.to_string()))?;
    w.bytes(&cfg)?;
    w.u8(u8::from(model.is_frozen()));
    w.tensors(&model.weights().named())?;
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<SegModel> {
    let mut r = Reader::open(bytes, path, CHECKPOINT_MAGIC)?;
    let cfg: ModelConfig =
        serde_json::from_slice(r.bytes()?).map_err(|e| r.err(format!("bad config record: {e}")))?;
    cfg.validate().map_err(|e| r.err(e.to_string()))?;
    let frozen = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.err(format!("bad frozen flag {v}"))),
    };
    let tensors = r.tensors()?;
    r.finish()?;
    let mut weights = Weights::init(&cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    expect_names(&r, &tensors, &names)?;
    for (slot, (name, t)) in weights.tensors_mut().into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(r.err(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    SegModel::from_weights(cfg, weights, frozen)
}

pub fn save_checkpoint(path: &Path, model: &SegModel) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    decode_checkpoint(&read(path)?, path)
}

/// Bytes of the tensor payloads alone, which is what parameter accounting reports.
pub fn adapter_payload_bytes(set: &AdapterSet) -> usize {
    set.tensors().iter().map(|(_, t, _)| t.len() * 8).sum()
}

pub fn encode_adapter(set: &AdapterSet) -> Result<Vec<u8>> {
    let mut w = Writer::new(ADAPTER_MAGIC);
    w.u32(set.task_id);
    w.u8(set.variant.tag());
    w.len_u32(set.rank)?;
    w.len_u32(set.start_block)?;
    w.len_u32(set.sites.len())?;
    for s in &set.sites {
        w.len_u32(s.dims.site.block)?;
        w.u8(s.dims.site.kind.tag());
        w.len_u32(s.dims.d_in)?;
        w.len_u32(s.dims.d_out)?;
    }
    let named: Vec<(String, &Tensor)> = set.tensors().into_iter().map(|(n, t, _)| (n, t)).collect();
    w.tensors(&named)?;
    Ok(w.buf)
}

pub fn decode_adapter(bytes: &[u8], path: &Path) -> Result<AdapterSet> {
    let mut r = Reader::open(bytes, path, ADAPTER_MAGIC)?;
    let task_id = r.u32()?;
    let tag = r.u8()?;
    let variant = AdapterVariant::from_tag(tag).ok_or_else(|| r.err(format!("unknown variant tag {tag}")))?;
    let rank = r.usize()?;
    let start_block = r.usize()?;
    let n = r.usize()?;
    let mut dims = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let block = r.usize()?;
        let kt = r.u8()?;
        let kind = SiteKind::from_tag(kt).ok_or_else(|| r.err(format!("unknown site kind {kt}")))?;
        dims.push(SiteDims {
            site: SiteId { block, kind },
            d_in: r.usize()?,
            d_out: r.usize()?,
        });
    }
    let tensors = r.tensors()?;
    r.finish()?;
    let mut it = tensors.into_iter();
    let mut next = |want: String, shape: &[usize]| -> Result<Tensor> {
        match it.next() {
            Some((name, t)) if name == want && t.shape() == shape => Ok(t),
            Some((name, t)) => Err(r.err(format!("expected {want} {shape:?}, found {name} {:?}", t.shape()))),
            None => Err(r.err(format!("missing tensor {want}"))),
        }
    };
    let shared_a = if variant.shares_a() {
        let d = dims.first().map_or(0, |s| s.d_in);
        Some(next("shared_a".into(), &[rank, d])?)
    } else {
        None
    };
    let mut sites = Vec::with_capacity(dims.len());
    for d in &dims {
        let id = d.site;
        let a = if variant.shares_a() {
            None
        } else {
            Some(next(format!("{id}.a"), &[rank, d.d_in])?)
        };
        let b = next(format!("{id}.b"), &[d.d_out, rank])?;
        let c = if variant == AdapterVariant::Augmodule {
            Some(next(format!("{id}.c"), &[rank, rank])?)
        } else {
            None
        };
        sites.push(SiteAdapter { dims: *d, a, b, c });
    }
    let (prompt_w, prompt_b) = if variant == AdapterVariant::Augmodule {
        (
            Some(next("prompt.weight".into(), &[rank, 1])?),
            Some(next("prompt.bias".into(), &[rank])?),
        )
    } else {
        (None, None)
    };
    if let Some((name, _)) = it.next() {
        return Err(r.err(format!("unexpected tensor {name}")));
    }
    Ok(AdapterSet {
        task_id,
        variant,
        rank,
        start_block,
        shared_a,
        sites,
        prompt_w,
        prompt_b,
    })
}

pub fn save_adapter(path: &Path, set: &AdapterSet) -> Result<()> {
    write_atomic(path, &encode_adapter(set)?)
}

pub fn load_adapter(path: &Path) -> Result<AdapterSet> {
    decode_adapter(&read(path)?, path)
}

pub fn encode_buffer(b: &EmbeddingBuffer) -> Result<Vec<u8>> {
    let mut w = Writer::new(BUFFER_MAGIC);
    w.len_u32(b.cap)?;
    w.len_u32(b.dim)?;
    w.len_u32(b.tasks.len())?;
    for t in &b.tasks {
        w.u32(t.task);
        w.len_u32(t.vectors.len())?;
    }
    for t in &b.tasks {
        for v in &t.vectors {
            w.f64s(v.data());
        }
    }
    Ok(w.buf)
}

pub fn decode_buffer(bytes: &[u8], path: &Path) -> Result<EmbeddingBuffer> {
    let mut r = Reader::open(bytes, path, BUFFER_MAGIC)?;
    let cap = r.usize()?;
    let dim = r.usize()?;
    let n = r.usize()?;
    let mut heads = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let task = r.u32()?;
        let count = r.usize()?;
        if count > cap {
            return Err(r.err(format!("task {task} holds {count} vectors above cap {cap}")));
        }
        heads.push((task, count));
    }
    let mut buf = EmbeddingBuffer::new(cap, dim).map_err(|e| r.err(e.to_string()))?;
    for (task, count) in heads {
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            vectors.push(Tensor::new(vec![dim], r.f64s(dim)?)?);
        }
        buf.tasks.push(TaskEmbeddings { task, vectors });
    }
    r.finish()?;
    Ok(buf)
}

pub fn save_buffer(path: &Path, b: &EmbeddingBuffer) -> Result<()> {
    write_atomic(path, &encode_buffer(b)?)
}

pub fn load_buffer(path: &Path) -> Result<EmbeddingBuffer> {
    decode_buffer(&read(path)?, path)
}

pub fn encode_selector(m: &SelectorMlp) -> Result<Vec<u8>> {
    let mut w = Writer::new(SELECTOR_MAGIC);
    w.len_u32(m.dim())?;
    w.len_u32(m.tasks.len())?;
    for &t in &m.tasks {
        w.u32(t);
    }
    let mut named = vec![("mean".to_string(), &m.mean), ("std".to_string(), &m.std)];
    for (n, t) in crate::selector::LAYER_NAMES.iter().zip(&m.layers) {
        named.push((n.to_string(), t));
    }
    w.tensors(&named)?;
    Ok(w.buf)
}

pub fn decode_selector(bytes: &[u8], path: &Path) -> Result<SelectorMlp> {
    let mut r = Reader::open(bytes, path, SELECTOR_MAGIC)?;
    let dim = r.usize()?;
    let t = r.usize()?;
    let mut tasks = Vec::with_capacity(t.min(4096));
    for _ in 0..t {
        tasks.push(r.u32()?);
    }
    let tensors = r.tensors()?;
    r.finish()?;
    let mut names = vec!["mean".to_string(), "std".to_string()];
    names.extend(crate::selector::LAYER_NAMES.iter().map(|s| s.to_string()));
    expect_names(&r, &tensors, &names)?;
    let reference = SelectorMlp::init(dim, tasks.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
        .map_err(|e| r.err(e.to_string()))?;
    let mut ts = tensors.into_iter().map(|(_, t)| t);
    let mean = ts.next().expect("checked count");
    let std = ts.next().expect("checked count");
    let layers: Vec<Tensor> = ts.collect();
    if mean.shape() != reference.mean.shape() || std.shape() != reference.std.shape() {
        return Err(r.err("selector normalization shape mismatch"));
    }
    for (i, (l, want)) in layers.iter().zip(&reference.layers).enumerate() {
        if l.shape() != want.shape() {
            return Err(r.err(format!(
                "selector {}: shape {:?}, expected {:?}",
                crate::selector::LAYER_NAMES[i],
                l.shape(),
                want.shape()
            )));
        }
    }
    Ok(SelectorMlp {
        tasks,
        mean,
        std,
        layers,
    })
}

pub fn save_selector(path: &Path, m: &SelectorMlp) -> Result<()> {
    write_atomic(path, &encode_selector(m)?)
}

pub fn load_selector(path: &Path) -> Result<SelectorMlp> {
    decode_selector(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let mut m = SegModel::new(ModelConfig::compact(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.freeze();
        let a = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&a, p()).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(encode_checkpoint(&back).unwrap(), a);
    }

    #[test]
    fn adapters_round_trip_for_every_variant() {
        let m = SegModel::new(ModelConfig::compact(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for v in AdapterVariant::ALL {
            let set = AdapterSet::new(3, v, 2, 2, &m.default_sites(2), &mut r).unwrap();
            let bytes = encode_adapter(&set).unwrap();
            let back = decode_adapter(&bytes, p()).unwrap();
            assert_eq!(back, set);
            assert_eq!(encode_adapter(&back).unwrap(), bytes);
            let acct = crate::adapters::count_params(v, &set.site_dims(), 2).unwrap();
            assert_eq!(adapter_payload_bytes(&set), acct.stored_bytes);
        }
    }

    #[test]
    fn rejects_unknown_version_and_magic() {
        let mut m = SegModel::new(ModelConfig::compact(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.freeze();
        let mut bytes = encode_checkpoint(&m).unwrap();
        bytes[8] = 9;
        let e = decode_checkpoint(&bytes, p()).unwrap_err().to_string();
        assert!(e.contains("unsupported format version 9"), "{e}");
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes, p()).unwrap_err().to_string().contains("bad magic"));
        let good = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint(&good[..good.len() - 3], p()).is_err());
    }

    #[test]
    fn buffer_and_selector_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut b = EmbeddingBuffer::new(4, 8).unwrap();
        b.add(0, &(0..6).map(|_| Tensor::randn(&[8], 1.0, &mut r)).collect::<Vec<_>>(), 1).unwrap();
        b.add(1, &(0..2).map(|_| Tensor::randn(&[8], 1.0, &mut r)).collect::<Vec<_>>(), 1).unwrap();
        let bytes = encode_buffer(&b).unwrap();
        assert_eq!(decode_buffer(&bytes, p()).unwrap(), b);
        let (sel, _) = crate::selector::train_selector(&b, &Default::default(), 0).unwrap();
        let sb = encode_selector(&sel).unwrap();
        let back = decode_selector(&sb, p()).unwrap();
        assert_eq!(back, sel);
        assert_eq!(encode_selector(&back).unwrap(), sb);
    }
}
