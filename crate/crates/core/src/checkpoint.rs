//! Binary checkpoint container. See `docs/checkpoint-format.md` for the layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fib::{FibState, StepUnit};
use crate::image::{read_file, write_file};
use crate::nn::{Adam, Float, LayerSpec, Module, Moments};
use crate::sgan::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};

pub const MAGIC: &[u8; 4] = b"PGSG";
pub const FORMAT_VERSION: u32 = 1;

const NET_G: u8 = 0;
const NET_D: u8 = 1;

/// JSON metadata stored after the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub generator_grown: bool,
    pub discriminator_grown: bool,
    pub phase: u8,
    pub epoch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Free-form echo of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Networks and optimizer state restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub meta: CheckpointMeta,
    pub architecture_hash: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

#[derive(Serialize)]
struct ArchitectureDescriptor<'a> {
    generator: &'a GeneratorConfig,
    discriminator: &'a DiscriminatorConfig,
    generator_grown: bool,
    discriminator_grown: bool,
    generator_layers: Vec<LayerSpec>,
    discriminator_layers: Vec<LayerSpec>,
}

/// First eight bytes (little-endian) of the SHA-256 of the architecture
/// descriptor.
pub fn architecture_hash(g: &Generator, d: &Discriminator) -> u64 {
    let mut gl = Vec::new();
    g.describe(&mut gl);
    let mut dl = Vec::new();
    d.describe(&mut dl);
    let desc = ArchitectureDescriptor {
        generator: &g.config,
        discriminator: &d.config,
        generator_grown: g.is_grown(),
        discriminator_grown: d.is_grown(),
        generator_layers: gl,
        discriminator_layers: dl,
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[Float]) {
        for &x in v {
            self.0.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("invalid utf-8 name".into()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<Float>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect())
    }
}

fn write_fib(w: &mut Writer, name: &str, s: &FibState) {
    w.bytes(name.as_bytes());
    w.f64(s.alpha);
    w.f64(s.increment);
    w.f64(s.ceiling);
    w.u8(match s.step_unit {
        StepUnit::PerOptimizerStep => 0,
        StepUnit::PerEpoch => 1,
    });
}

/// Serializes both networks, both optimizers and every fade-in state.
pub fn encode(
    meta: &CheckpointMeta,
    g: &Generator,
    d: &Discriminator,
    opt_g: &Adam,
    opt_d: &Adam,
) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(architecture_hash(g, d));
    let mut meta = meta.clone();
    meta.generator = g.config.clone();
    meta.discriminator = d.config.clone();
    meta.generator_grown = g.is_grown();
    meta.discriminator_grown = d.is_grown();
    meta.lr_g = opt_g.lr;
    meta.lr_d = opt_d.lr;
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    w.bytes(&json);

    let mut params = Vec::new();
    g.visit_params(&mut |p| params.push((p.name.clone(), p.shape.clone(), p.value.clone())));
    d.visit_params(&mut |p| params.push((p.name.clone(), p.shape.clone(), p.value.clone())));
    w.u32(params.len() as u32);
    for (name, shape, value) in &params {
        w.bytes(name.as_bytes());
        w.u32(shape.len() as u32);
        shape.iter().for_each(|&s| w.u64(s as u64));
        w.floats(value);
    }

    let total = opt_g.state.len() + opt_d.state.len();
    w.u32(total as u32);
    for (net, opt) in [(NET_G, opt_g), (NET_D, opt_d)] {
        for (name, m) in &opt.state {
            w.u8(net);
            w.bytes(name.as_bytes());
            w.u64(m.t);
            w.u64(m.m.len() as u64);
            w.floats(&m.m);
            w.floats(&m.v);
        }
    }

    let mut fibs = Vec::new();
    if let Some((a, b)) = g.fib_states() {
        fibs.push(("g.fib_d", a));
        fibs.push(("g.fib_u", b));
    }
    if let Some(s) = d.fib_state() {
        fibs.push(("d.fib_d", s));
    }
    w.u32(fibs.len() as u32);
    for (name, s) in &fibs {
        write_fib(&mut w, name, s);
    }
    Ok(w.0)
}

pub fn save(
    path: &Path,
    meta: &CheckpointMeta,
    g: &Generator,
    d: &Discriminator,
    opt_g: &Adam,
    opt_d: &Adam,
) -> Result<()> {
    write_file(path, &encode(meta, g, d, opt_g, opt_d)?)
}

/// Reads only the architecture hash from a header.
pub fn peek_hash(bytes: &[u8]) -> Result<u64> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_header(&mut r)
}

fn check_header(r: &mut Reader<'_>) -> Result<u64> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    r.u64()
}

pub fn decode(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let hash = check_header(&mut r)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;

    let mut values = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.floats(shape.iter().product())?;
        values.insert(name, (shape, data));
    }

    let mut opt_g = Adam::new(meta.lr_g);
    let mut opt_d = Adam::new(meta.lr_d);
    for _ in 0..r.u32()? {
        let net = r.u8()?;
        let name = r.string()?;
        let t = r.u64()?;
        let n = r.u64()? as usize;
        let m = r.floats(n)?;
        let v = r.floats(n)?;
        let opt = match net {
            NET_G => &mut opt_g,
            NET_D => &mut opt_d,
            other => return Err(Error::Format(format!("unknown network tag {other}"))),
        };
        opt.state.insert(name, Moments { m, v, t });
    }

    let mut fibs = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let alpha = r.f64()?;
        let increment = r.f64()?;
        let ceiling = r.f64()?;
        let step_unit = match r.u8()? {
            0 => StepUnit::PerOptimizerStep,
            1 => StepUnit::PerEpoch,
            other => return Err(Error::Format(format!("unknown step unit {other}"))),
        };
        fibs.insert(
            name,
            FibState {
                alpha,
                increment,
                ceiling,
                step_unit,
            },
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }

    let fib = |name: &str| {
        fibs.get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing fade-in state {name}")))
    };
    let mut g = Generator::new(meta.generator.clone(), 0)?;
    if meta.generator_grown {
        g.grow(FibState::generator(), 0)?;
        let (a, b) = g.fib_states_mut().expect("grown");
        *a = fib("g.fib_d")?;
        *b = fib("g.fib_u")?;
    }
    let mut d = Discriminator::new(meta.discriminator.clone(), 0)?;
    if meta.discriminator_grown {
        d.grow(FibState::discriminator(), 0)?;
        *d.fib_state_mut().expect("grown") = fib("d.fib_d")?;
    }

    let mut missing = None;
    let mut assign = |p: &mut crate::nn::Param| match values.remove(&p.name) {
        Some((shape, data)) if shape == p.shape => p.value = data,
        Some((shape, _)) => {
            missing.get_or_insert_with(|| format!("parameter {} has shape {shape:?}, expected {:?}", p.name, p.shape));
        }
        None => {
            missing.get_or_insert_with(|| format!("parameter {} missing", p.name));
        }
    };
    g.visit_params_mut(&mut assign);
    d.visit_params_mut(&mut assign);
    if let Some(msg) = missing {
        return Err(Error::Format(msg));
    }
    if let Some(extra) = values.keys().next() {
        return Err(Error::Format(format!("unexpected parameter {extra}")));
    }
    let computed = architecture_hash(&g, &d);
    if computed != hash {
        return Err(Error::Format(format!(
            "architecture hash mismatch: header {hash:016x}, rebuilt {computed:016x}"
        )));
    }
    Ok(Snapshot {
        meta,
        architecture_hash: hash,
        generator: g,
        discriminator: d,
        opt_g,
        opt_d,
    })
}

pub fn load(path: &Path) -> Result<Snapshot> {
    decode(&read_file(path)?)
}
