//! Versioned little-endian checkpoint container.
//!
//! Layout: the 8-byte magic `TSPLATCK`, a `u32` format version, a sequence
//! of sections `[tag: 4 bytes][length: u64][payload]`, and a SHA-256 digest
//! of everything before it. Sections appear in a fixed order:
//!
//! | tag    | payload |
//! |--------|---------|
//! | `CONF` | training config as JSON |
//! | `CAMR` | camera as JSON |
//! | `ITER` | `u64` completed iterations, `f64` scene extent |
//! | `GAUS` | `u64` count, then positions, log-scales, rotations, opacity logits, colors as `f32` |
//! | `NETP` | `u64` count, then `f32` net parameters |
//! | `ADAM` | six groups (positions, log-scales, rotations, opacities, colors, net): `u64` step, `u64` width, `u64` length, `m`, `v` as `f32` |
//! | `DENS` | `u64` count, `f64` gradient sums, `u32` counts |
//! | `GRPH` | `u64` k, `u64` count, per node `u32` degree then `u32` indices |
//! | `MASK` | `u64` width, `u64` height, one byte per pixel |
//!
//! Files are written to a temporary sibling and renamed into place.

use std::path::Path;

use nalgebra::{Vector3, Vector4};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::config::TrainConfig;
use super::density::{DensifyStats, GaussianOptim};
use super::TrainState;
use crate::deform::DeformationNet;
use crate::error::{Error, Result};
use crate::knn::NeighborGraph;
use crate::scene::{Camera, GaussianSet, Grid};

pub const MAGIC: &[u8; 8] = b"TSPLATCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.buf.extend_from_slice(tag);
        self.u64(body.buf.len() as u64);
        self.buf.extend_from_slice(&body.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Checkpoint("truncated checkpoint".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).ok().filter(|&n| n <= self.buf.len() * 8).ok_or_else(truncated)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(truncated)?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let t = self.take(4)?;
        if t != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(t)
            )));
        }
        let n = self.len()?;
        Ok(Reader { buf: self.take(n)?, pos: 0 })
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("trailing bytes in section {what}")));
        }
        Ok(())
    }
}

fn write_adam(w: &mut Writer, a: &AdamState) {
    w.u64(a.step);
    w.u64(a.width as u64);
    w.u64(a.m.len() as u64);
    w.f32s(a.m.iter().copied());
    w.f32s(a.v.iter().copied());
}

fn read_adam(r: &mut Reader) -> Result<AdamState> {
    let step = r.u64()?;
    let width = r.len()?;
    let n = r.len()?;
    if width == 0 && n != 0 || width != 0 && n % width != 0 {
        return Err(Error::Checkpoint("optimizer buffer is not a whole number of rows".into()));
    }
    Ok(AdamState { width, step, m: r.f32s(n)?, v: r.f32s(n)? })
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    let mut s = Writer::default();
    s.buf = serde_json::to_vec(&state.config).expect("config serializes");
    w.section(b"CONF", s);

    let mut s = Writer::default();
    s.buf = serde_json::to_vec(&state.camera).expect("camera serializes");
    w.section(b"CAMR", s);

    let mut s = Writer::default();
    s.u64(state.iteration);
    s.f64(state.extent);
    w.section(b"ITER", s);

    let g = &state.gaussians;
    let mut s = Writer::default();
    s.u64(g.len() as u64);
    s.f32s(g.positions.iter().flat_map(|v| v.iter().copied()));
    s.f32s(g.log_scales.iter().flat_map(|v| v.iter().copied()));
    s.f32s(g.rotations.iter().flat_map(|v| v.iter().copied()));
    s.f32s(g.opacity_logits.iter().copied());
    s.f32s(g.colors.iter().flat_map(|v| v.iter().copied()));
    w.section(b"GAUS", s);

    let mut s = Writer::default();
    s.u64(state.net.params.len() as u64);
    s.f32s(state.net.params.iter().copied());
    w.section(b"NETP", s);

    let mut s = Writer::default();
    for a in state.optim.groups() {
        write_adam(&mut s, a);
    }
    write_adam(&mut s, &state.net_optim);
    w.section(b"ADAM", s);

    let mut s = Writer::default();
    s.u64(state.stats.grad_sum.len() as u64);
    for &x in &state.stats.grad_sum {
        s.f64(x);
    }
    for &c in &state.stats.count {
        s.u32(c);
    }
    w.section(b"DENS", s);

    let mut s = Writer::default();
    s.u64(state.graph.k as u64);
    s.u64(state.graph.neighbors.len() as u64);
    for nb in &state.graph.neighbors {
        s.u32(nb.len() as u32);
        for &j in nb {
            s.u32(j as u32);
        }
    }
    w.section(b"GRPH", s);

    let mut s = Writer::default();
    s.u64(state.occluded.width as u64);
    s.u64(state.occluded.height as u64);
    s.buf.extend(state.occluded.data.iter().map(|&b| b as u8));
    w.section(b"MASK", s);

    let digest = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&digest);
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(truncated());
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupted or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };

    let s = r.section(b"CONF")?;
    let config: TrainConfig = serde_json::from_slice(s.buf).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate()?;
    let s = r.section(b"CAMR")?;
    let camera: Camera = serde_json::from_slice(s.buf).map_err(|e| Error::Checkpoint(format!("camera: {e}")))?;

    let mut s = r.section(b"ITER")?;
    let iteration = s.u64()?;
    let extent = s.f64()?;
    s.finish("ITER")?;

    let mut s = r.section(b"GAUS")?;
    let n = s.len()?;
    let v3 = |f: Vec<f32>| f.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect::<Vec<_>>();
    let positions = v3(s.f32s(3 * n)?);
    let log_scales = v3(s.f32s(3 * n)?);
    let rotations = s.f32s(4 * n)?.chunks_exact(4).map(|c| Vector4::new(c[0], c[1], c[2], c[3])).collect();
    let opacity_logits = s.f32s(n)?;
    let colors = v3(s.f32s(3 * n)?);
    s.finish("GAUS")?;
    let gaussians = GaussianSet { positions, log_scales, rotations, opacity_logits, colors, sh_degree: 0 };

    let mut s = r.section(b"NETP")?;
    let count = s.len()?;
    let net = DeformationNet::from_params(config.net, s.f32s(count)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    s.finish("NETP")?;

    let mut s = r.section(b"ADAM")?;
    let optim = GaussianOptim {
        positions: read_adam(&mut s)?,
        log_scales: read_adam(&mut s)?,
        rotations: read_adam(&mut s)?,
        opacities: read_adam(&mut s)?,
        colors: read_adam(&mut s)?,
    };
    let net_optim = read_adam(&mut s)?;
    s.finish("ADAM")?;
    if optim.groups().iter().any(|g| g.rows() != n) || net_optim.m.len() != net.param_count() {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }

    let mut s = r.section(b"DENS")?;
    let m = s.len()?;
    let grad_sum = (0..m).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
    let count = (0..m).map(|_| s.u32()).collect::<Result<Vec<_>>>()?;
    s.finish("DENS")?;
    if m != n {
        return Err(Error::Checkpoint("densification statistics do not match gaussians".into()));
    }

    let mut s = r.section(b"GRPH")?;
    let k = s.len()?;
    let nodes = s.len()?;
    let mut neighbors = Vec::with_capacity(nodes.min(n));
    for _ in 0..nodes {
        let deg = s.u32()? as usize;
        let list = (0..deg).map(|_| s.u32().map(|j| j as usize)).collect::<Result<Vec<_>>>()?;
        if list.iter().any(|&j| j >= nodes) {
            return Err(Error::Checkpoint("neighbor index out of range".into()));
        }
        neighbors.push(list);
    }
    s.finish("GRPH")?;

    let mut s = r.section(b"MASK")?;
    let (w, h) = (s.len()?, s.len()?);
    let data = s.take(w.checked_mul(h).ok_or_else(truncated)?)?.iter().map(|&b| b != 0).collect();
    s.finish("MASK")?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint("unexpected trailing sections".into()));
    }

    Ok(TrainState {
        config,
        iteration,
        camera,
        extent,
        gaussians,
        net,
        optim,
        net_optim,
        stats: DensifyStats { grad_sum, count },
        graph: NeighborGraph { k, neighbors },
        occluded: Grid { width: w, height: h, data },
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(state))
}

pub fn load(path: &Path) -> Result<TrainState> {
    if path.as_os_str().is_empty() {
        return Err(Error::EmptyPath);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
