//! File formats: binary occupancy grids, JSON primitive sets, OBJ meshes and
//! scene manifests.
//!
//! Grid layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4 | magic `OCCG` |
//! | 4..8 | version (u32) |
//! | 8..20 | dims X, Y, Z (u32) |
//! | 20..32 | origin (f32 x3) |
//! | 32..44 | voxel size (f32 x3) |
//! | 44..48 | class count (u32) |
//! | 48.. | X*Y*Z labels (u8), x fastest |
//!
//! Origin and voxel size are stored as `f32`; grids whose geometry is exactly
//! representable in `f32` round-trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::optimizer::FitConfig;
use crate::primitives::{
    ExponentBounds, GaussianPrimitive, ImplicitForm, Primitive, PrimitiveKind, PrimitiveSet, Superquadric, UnitQuaternion,
};
use crate::rasterizer::{GridSpec, OccupancyGrid};
use crate::scenegen::{class, SceneManifest};

pub const GRID_MAGIC: [u8; 4] = *b"OCCG";
pub const GRID_VERSION: u32 = 1;
pub const GRID_HEADER_LEN: u64 = 48;
pub const PRIMITIVE_FORMAT_VERSION: u32 = 1;
pub const MESH_MIN_RESOLUTION: usize = 4;
pub const MESH_MAX_RESOLUTION: usize = 128;

pub fn write_grid<W: Write>(mut w: W, grid: &OccupancyGrid) -> Result<()> {
    grid.validate()?;
    let spec = &grid.spec;
    let as_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")));
    w.write_all(&GRID_MAGIC)?;
    w.write_u32::<LE>(GRID_VERSION)?;
    for d in spec.dims {
        w.write_u32::<LE>(as_u32(d, "dimension")?)?;
    }
    for v in spec.origin.iter().chain(spec.voxel_size.iter()) {
        w.write_f32::<LE>(*v as f32)?;
    }
    w.write_u32::<LE>(as_u32(grid.classes, "class count")?)?;
    w.write_all(&grid.labels)?;
    w.flush()?;
    Ok(())
}

/// Reader that tracks its byte offset for error reporting.
struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for Counted<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

impl<R: Read> Counted<R> {
    fn field<T>(&mut self, what: &str, f: impl FnOnce(&mut Self) -> std::io::Result<T>) -> Result<T> {
        let at = self.offset;
        f(self).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                offset: at,
                msg: format!("truncated header while reading {what}"),
            },
            _ => Error::Io(e),
        })
    }
}

pub fn read_grid<R: Read>(r: R) -> Result<OccupancyGrid> {
    let mut r = Counted { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    r.field("magic", |r| r.read_exact(&mut magic))?;
    if magic != GRID_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"OCCG\""),
        });
    }
    let version = r.field("version", |r| r.read_u32::<LE>())?;
    if version != GRID_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {GRID_VERSION}"),
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.field("dims", |r| r.read_u32::<LE>())? as usize;
    }
    let mut geo = [0f64; 6];
    for g in &mut geo {
        *g = r.field("geometry", |r| r.read_f32::<LE>())? as f64;
    }
    let classes = r.field("class count", |r| r.read_u32::<LE>())? as usize;
    let spec = GridSpec::new(
        dims,
        Vector3::new(geo[0], geo[1], geo[2]),
        Vector3::new(geo[3], geo[4], geo[5]),
    )
    .map_err(|e| Error::Format {
        offset: 8,
        msg: e.to_string(),
    })?;
    let n = spec.voxel_count();
    let mut labels = Vec::with_capacity(n);
    let got = (&mut r).take(n as u64).read_to_end(&mut labels)?;
    if got < n {
        return Err(Error::Format {
            offset: GRID_HEADER_LEN + got as u64,
            msg: format!("truncated payload: {got} of {n} label bytes"),
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format {
            offset: GRID_HEADER_LEN + n as u64,
            msg: "trailing bytes after payload".into(),
        });
    }
    if let Some(pos) = labels.iter().position(|l| *l as usize > classes) {
        return Err(Error::Format {
            offset: GRID_HEADER_LEN + pos as u64,
            msg: format!("label {} exceeds class count {classes}", labels[pos]),
        });
    }
    OccupancyGrid::new(spec, classes, labels)
}

pub fn save_grid(path: impl AsRef<Path>, grid: &OccupancyGrid) -> Result<()> {
    write_grid(BufWriter::new(File::create(path)?), grid)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<OccupancyGrid> {
    read_grid(BufReader::new(File::open(path)?))
}

/// A primitive set plus the metadata stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveFile {
    pub primitives: PrimitiveSet,
    pub eps_bounds: ExponentBounds,
    pub form: ImplicitForm,
    pub fit_config: Option<FitConfig>,
}

impl PrimitiveFile {
    pub fn new(primitives: PrimitiveSet) -> Self {
        Self {
            primitives,
            eps_bounds: ExponentBounds::default(),
            form: ImplicitForm::Standard,
            fit_config: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eps_bounds.validate()?;
        let classes = self.primitives.classes();
        let check = |i: usize, sem: &[f64], r: Result<()>| -> Result<()> {
            r.map_err(|e| prefix(i, e))?;
            if sem.len() != classes {
                return Err(Error::validation(
                    format!("primitives[{i}].semantics"),
                    format!("has {} classes, expected {classes}", sem.len()),
                ));
            }
            Ok(())
        };
        match &self.primitives {
            PrimitiveSet::Superquadric(v) => {
                for (i, p) in v.iter().enumerate() {
                    check(i, &p.semantics, p.validate(&self.eps_bounds))?;
                }
            }
            PrimitiveSet::Gaussian(v) => {
                for (i, p) in v.iter().enumerate() {
                    check(i, &p.semantics, p.validate())?;
                }
            }
        }
        Ok(())
    }
}

fn prefix(i: usize, e: Error) -> Error {
    match e {
        Error::Validation { field, msg } => Error::validation(format!("primitives[{i}].{field}"), msg),
        other => other,
    }
}

#[derive(Serialize)]
struct PrimitiveRecord<'a> {
    position: [f64; 3],
    scale: [f64; 3],
    rotation: [f64; 4],
    opacity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps2: Option<f64>,
    semantics: &'a [f64],
}

#[derive(Serialize)]
struct FileOut<'a> {
    format: &'static str,
    version: u32,
    kind: PrimitiveKind,
    form: ImplicitForm,
    classes: usize,
    eps_bounds: ExponentBounds,
    fit_config: &'a Option<FitConfig>,
    primitives: Vec<PrimitiveRecord<'a>>,
}

const FORMAT_TAG: &str = "quadmix-primitives";

fn record<P: Primitive>(p: &P, eps: Option<[f64; 2]>) -> PrimitiveRecord<'_> {
    PrimitiveRecord {
        position: p.position().into(),
        scale: p.scale().into(),
        rotation: p.rotation().as_array(),
        opacity: p.opacity(),
        eps1: eps.map(|e| e[0]),
        eps2: eps.map(|e| e[1]),
        semantics: p.semantics(),
    }
}

pub fn primitives_to_json(file: &PrimitiveFile) -> Result<String> {
    file.validate()?;
    let primitives = match &file.primitives {
        PrimitiveSet::Superquadric(v) => v.iter().map(|p| record(p, Some([p.eps1, p.eps2]))).collect(),
        PrimitiveSet::Gaussian(v) => v.iter().map(|p| record(p, None)).collect(),
    };
    let out = FileOut {
        format: FORMAT_TAG,
        version: PRIMITIVE_FORMAT_VERSION,
        kind: file.primitives.kind(),
        form: file.form,
        classes: file.primitives.classes(),
        eps_bounds: file.eps_bounds,
        fit_config: &file.fit_config,
        primitives,
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

fn get<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key).filter(|v| !v.is_null()).ok_or_else(|| Error::validation(path, "missing"))
}

fn num(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::validation(path, "expected a number"))
}

fn nums<const N: usize>(v: &Value, path: &str) -> Result<[f64; N]> {
    let arr = v.as_array().ok_or_else(|| Error::validation(path, format!("expected an array of {N} numbers")))?;
    if arr.len() != N {
        return Err(Error::validation(path, format!("expected {N} entries, found {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (k, x) in arr.iter().enumerate() {
        out[k] = num(x, &format!("{path}[{k}]"))?;
    }
    Ok(out)
}

fn num_vec(v: &Value, path: &str) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| Error::validation(path, "expected an array of numbers"))?;
    arr.iter().enumerate().map(|(k, x)| num(x, &format!("{path}[{k}]"))).collect()
}

pub fn primitives_from_json(text: &str) -> Result<PrimitiveFile> {
    let root: Value = serde_json::from_str(text)?;
    if let Some(tag) = root.get("format") {
        if tag.as_str() != Some(FORMAT_TAG) {
            return Err(Error::validation("format", format!("expected \"{FORMAT_TAG}\"")));
        }
    }
    if let Some(v) = root.get("version") {
        if v.as_u64() != Some(PRIMITIVE_FORMAT_VERSION as u64) {
            return Err(Error::validation("version", format!("unsupported, expected {PRIMITIVE_FORMAT_VERSION}")));
        }
    }
    let kind: PrimitiveKind = get(&root, "kind", "kind")?
        .as_str()
        .ok_or_else(|| Error::validation("kind", "expected a string"))?
        .parse()
        .map_err(|e: Error| Error::validation("kind", e.to_string()))?;
    let eps_bounds = match root.get("eps_bounds").filter(|v| !v.is_null()) {
        Some(b) => {
            let lo = num(get(b, "lo", "eps_bounds.lo")?, "eps_bounds.lo")?;
            let hi = num(get(b, "hi", "eps_bounds.hi")?, "eps_bounds.hi")?;
            ExponentBounds::new(lo, hi).map_err(|e| Error::validation("eps_bounds", e.to_string()))?
        }
        None => ExponentBounds::default(),
    };
    let form = match root.get("form").filter(|v| !v.is_null()) {
        Some(f) => serde_json::from_value(f.clone()).map_err(|e| Error::validation("form", e.to_string()))?,
        None => ImplicitForm::Standard,
    };
    let fit_config = match root.get("fit_config").filter(|v| !v.is_null()) {
        Some(c) => Some(serde_json::from_value(c.clone()).map_err(|e| Error::validation("fit_config", e.to_string()))?),
        None => None,
    };
    let list = get(&root, "primitives", "primitives")?
        .as_array()
        .ok_or_else(|| Error::validation("primitives", "expected an array"))?;
    if list.is_empty() {
        return Err(Error::validation("primitives", "must not be empty"));
    }
    let mut sqs = Vec::new();
    let mut gs = Vec::new();
    for (i, p) in list.iter().enumerate() {
        let path = |f: &str| format!("primitives[{i}].{f}");
        let field = |f: &str| get(p, f, &path(f));
        let position = Vector3::from(nums::<3>(field("position")?, &path("position"))?);
        let scale = Vector3::from(nums::<3>(field("scale")?, &path("scale"))?);
        let rotation = UnitQuaternion::from_array(nums::<4>(field("rotation")?, &path("rotation"))?);
        let opacity = num(field("opacity")?, &path("opacity"))?;
        let semantics = num_vec(field("semantics")?, &path("semantics"))?;
        match kind {
            PrimitiveKind::Superquadric => sqs.push(Superquadric {
                position,
                scale,
                rotation,
                opacity,
                eps1: num(field("eps1")?, &path("eps1"))?,
                eps2: num(field("eps2")?, &path("eps2"))?,
                semantics,
            }),
            PrimitiveKind::Gaussian => gs.push(GaussianPrimitive {
                position,
                scale,
                rotation,
                opacity,
                semantics,
            }),
        }
    }
    let primitives = match kind {
        PrimitiveKind::Superquadric => PrimitiveSet::Superquadric(sqs),
        PrimitiveKind::Gaussian => PrimitiveSet::Gaussian(gs),
    };
    if let Some(c) = root.get("classes").and_then(Value::as_u64) {
        if c as usize != primitives.classes() {
            return Err(Error::validation("classes", format!("declares {c}, primitives carry {}", primitives.classes())));
        }
    }
    let file = PrimitiveFile {
        primitives,
        eps_bounds,
        form,
        fit_config,
    };
    file.validate()?;
    Ok(file)
}

pub fn save_primitives(path: impl AsRef<Path>, file: &PrimitiveFile) -> Result<()> {
    let text = primitives_to_json(file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_primitives(path: impl AsRef<Path>) -> Result<PrimitiveFile> {
    primitives_from_json(&std::fs::read_to_string(path)?)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Sine and cosine with values below 1e-12 snapped to zero, so pole and seam
/// vertices land exactly on the axes.
fn sin_cos(t: f64) -> (f64, f64) {
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    let (s, c) = t.sin_cos();
    (snap(s), snap(c))
}

#[inline]
fn spow(v: f64, e: f64) -> f64 {
    v.signum() * v.abs().powf(e)
}

fn class_name(k: usize, classes: usize) -> String {
    if classes == class::NAMES.len() {
        class::NAMES[k].to_string()
    } else {
        format!("class_{}", k + 1)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

/// Local-frame surface point at latitude `eta` and longitude `omega`.
/// Superquadrics use the signed-power parametrization of their `f = 1`
/// surface; Gaussians the ellipsoid where the quadratic form equals 1.
fn surface_point(scale: &Vector3<f64>, eps: Option<[f64; 2]>, form: ImplicitForm, eta: f64, omega: f64) -> Vector3<f64> {
    let (se, ce) = sin_cos(eta);
    let (so, co) = sin_cos(omega);
    match eps {
        Some([e1, e2]) => {
            let ez = match form {
                ImplicitForm::Standard => e1,
                ImplicitForm::Literal => e2,
            };
            let r = spow(ce, e1);
            Vector3::new(scale.x * r * spow(co, e2), scale.y * r * spow(so, e2), scale.z * spow(se, ez))
        }
        None => {
            let k = std::f64::consts::SQRT_2;
            Vector3::new(k * scale.x * ce * co, k * scale.y * ce * so, k * scale.z * se)
        }
    }
}

/// Writes every primitive as a latitude-longitude tessellated surface.
/// `resolution` is the number of longitude segments (latitude uses half as
/// many plus one); values above 128 are capped.
pub fn write_mesh<W: Write>(mut w: W, set: &PrimitiveSet, form: ImplicitForm, resolution: usize) -> Result<()> {
    if resolution < MESH_MIN_RESOLUTION {
        return Err(Error::invalid(format!("mesh resolution {resolution} is below {MESH_MIN_RESOLUTION}")));
    }
    let n_lon = resolution.min(MESH_MAX_RESOLUTION);
    let n_lat = n_lon / 2 + 1;
    let classes = set.classes();
    writeln!(w, "# {} primitives, {} x {} vertices each", set.len(), n_lat, n_lon)?;
    let mut base = 1usize;
    let mut emit = |w: &mut W, i: usize, p: &dyn ErasedPrimitive| -> Result<()> {
        let r = p.rotation().to_rotation_matrix()?;
        let m = p.position();
        let s = p.scale();
        writeln!(w, "g primitive_{i}")?;
        writeln!(w, "usemtl {}", class_name(argmax(p.semantics()), classes))?;
        for a in 0..n_lat {
            let eta = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * a as f64 / (n_lat - 1) as f64;
            for b in 0..n_lon {
                let omega = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * b as f64 / n_lon as f64;
                let x = m + r.transpose() * surface_point(&s, p.eps(), form, eta, omega);
                writeln!(w, "v {} {} {}", x.x, x.y, x.z)?;
            }
        }
        for a in 0..n_lat - 1 {
            for b in 0..n_lon {
                let v = |aa: usize, bb: usize| base + aa * n_lon + bb % n_lon;
                writeln!(w, "f {} {} {} {}", v(a, b), v(a, b + 1), v(a + 1, b + 1), v(a + 1, b))?;
            }
        }
        base += n_lat * n_lon;
        Ok(())
    };
    match set {
        PrimitiveSet::Superquadric(v) => {
            for (i, p) in v.iter().enumerate() {
                emit(&mut w, i, p)?;
            }
        }
        PrimitiveSet::Gaussian(v) => {
            for (i, p) in v.iter().enumerate() {
                emit(&mut w, i, p)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Object-safe subset of [`Primitive`] used by the mesh writer.
trait ErasedPrimitive {
    fn position(&self) -> Vector3<f64>;
    fn scale(&self) -> Vector3<f64>;
    fn rotation(&self) -> UnitQuaternion;
    fn semantics(&self) -> &[f64];
    fn eps(&self) -> Option<[f64; 2]>;
}

impl ErasedPrimitive for Superquadric {
    fn position(&self) -> Vector3<f64> {
        self.position
    }
    fn scale(&self) -> Vector3<f64> {
        self.scale
    }
    fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }
    fn semantics(&self) -> &[f64] {
        &self.semantics
    }
    fn eps(&self) -> Option<[f64; 2]> {
        Some([self.eps1, self.eps2])
    }
}

impl ErasedPrimitive for GaussianPrimitive {
    fn position(&self) -> Vector3<f64> {
        self.position
    }
    fn scale(&self) -> Vector3<f64> {
        self.scale
    }
    fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }
    fn semantics(&self) -> &[f64] {
        &self.semantics
    }
    fn eps(&self) -> Option<[f64; 2]> {
        None
    }
}

pub fn export_mesh(set: &PrimitiveSet, path: impl AsRef<Path>, form: ImplicitForm, resolution: usize) -> Result<()> {
    write_mesh(BufWriter::new(File::create(path)?), set, form, resolution)
}

/// Parsed OBJ content: vertices and `(group, material, vertex range)` blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub groups: Vec<(String, String, std::ops::Range<usize>)>,
    pub faces: usize,
}

/// Minimal reader for meshes produced by [`write_mesh`].
pub fn parse_obj(text: &str) -> Result<ObjMesh> {
    let mut mesh = ObjMesh::default();
    let mut offset = 0u64;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let bad = |msg: &str| Error::Format {
            offset,
            msg: msg.to_string(),
        };
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|t| t.parse::<f64>().map_err(|_| bad("bad vertex coordinate"))).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("vertex needs 3 coordinates"));
                }
                mesh.vertices.push(Vector3::new(c[0], c[1], c[2]));
                if let Some(g) = mesh.groups.last_mut() {
                    g.2.end = mesh.vertices.len();
                }
            }
            Some("g") => {
                let n = mesh.vertices.len();
                mesh.groups.push((it.next().unwrap_or_default().to_string(), String::new(), n..n));
            }
            Some("usemtl") => {
                if let Some(g) = mesh.groups.last_mut() {
                    g.1 = it.next().unwrap_or_default().to_string();
                }
            }
            Some("f") => mesh.faces += 1,
            _ => {}
        }
        offset += line.len() as u64 + 1;
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::canonical_implicit_with;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rng: &mut ChaCha8Rng) -> OccupancyGrid {
        let spec = GridSpec::new(
            [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4)],
            Vector3::new(-2.5, 1.25, -0.5),
            Vector3::new(0.5, 0.25, 0.75),
        )
        .unwrap();
        let labels = (0..spec.voxel_count()).map(|_| rng.gen_range(0..=5)).collect();
        OccupancyGrid::new(spec, 5, labels).unwrap()
    }

    #[test]
    fn grid_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let g = grid(&mut rng);
            let mut buf = Vec::new();
            write_grid(&mut buf, &g).unwrap();
            assert_eq!(buf.len() as u64, GRID_HEADER_LEN + g.spec.voxel_count() as u64);
            assert_eq!(read_grid(&buf[..]).unwrap(), g);
        }
        let spec = GridSpec::new([2, 2, 2], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        let mut buf = Vec::new();
        write_grid(&mut buf, &OccupancyGrid::empty(spec, 1)).unwrap();
        assert_eq!(buf.len() as u64 - GRID_HEADER_LEN, 8);
    }

    #[test]
    fn grid_errors_carry_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = grid(&mut rng);
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_grid(&bad[..]), Err(Error::Format { offset: 0, .. })));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_grid(&bad[..]), Err(Error::Format { offset: 4, .. })));

        let short = &buf[..buf.len() - 1];
        let n = g.spec.voxel_count() as u64;
        match read_grid(short) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, GRID_HEADER_LEN + n - 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_grid(&buf[..10]), Err(Error::Format { offset: 8, .. })));
    }

    fn sq(rng: &mut ChaCha8Rng, classes: usize) -> Superquadric {
        let mut sem: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = sem.iter().sum();
        sem.iter_mut().for_each(|c| *c /= z);
        Superquadric {
            position: Vector3::from_fn(|_, _| rng.gen_range(-10.0..10.0)),
            scale: Vector3::from_fn(|_, _| rng.gen_range(0.1..3.0)),
            rotation: UnitQuaternion::new(rng.gen(), rng.gen(), rng.gen(), rng.gen_range(0.1..1.0)).normalized().unwrap(),
            opacity: rng.gen(),
            eps1: rng.gen_range(0.1..2.0),
            eps2: rng.gen_range(0.1..2.0),
            semantics: sem,
        }
    }

    #[test]
    fn primitive_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = PrimitiveSet::Superquadric((0..5).map(|_| sq(&mut rng, 3)).collect());
        let mut file = PrimitiveFile::new(set);
        file.fit_config = Some(FitConfig::default());
        let back = primitives_from_json(&primitives_to_json(&file).unwrap()).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn superquadric_file_requires_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let file = PrimitiveFile::new(PrimitiveSet::Superquadric(vec![sq(&mut rng, 2)]));
        let mut v: Value = serde_json::from_str(&primitives_to_json(&file).unwrap()).unwrap();
        v["primitives"][0].as_object_mut().unwrap().remove("eps2");
        match primitives_from_json(&v.to_string()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "primitives[0].eps2"),
            other => panic!("{other:?}"),
        }
        v["primitives"][0]["eps2"] = 7.0.into();
        match primitives_from_json(&v.to_string()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "primitives[0].eps2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gaussian_file_loads_without_eps() {
        let text = r#"{"kind": "gaussian", "primitives": [
            {"position": [0, 0, 0], "scale": [1, 2, 3], "rotation": [1, 0, 0, 0], "opacity": 0.5, "semantics": [0.25, 0.75]}
        ]}"#;
        let f = primitives_from_json(text).unwrap();
        assert_eq!(f.primitives.kind(), PrimitiveKind::Gaussian);
        assert_eq!(f.eps_bounds, ExponentBounds::default());
    }

    #[test]
    fn mesh_vertices_lie_on_unit_level_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prims: Vec<_> = (0..6).map(|_| sq(&mut rng, 4)).collect();
        for form in [ImplicitForm::Standard, ImplicitForm::Literal] {
            let mut buf = Vec::new();
            write_mesh(&mut buf, &PrimitiveSet::Superquadric(prims.clone()), form, 16).unwrap();
            let mesh = parse_obj(std::str::from_utf8(&buf).unwrap()).unwrap();
            assert_eq!(mesh.groups.len(), 6);
            for ((_, mat, range), p) in mesh.groups.iter().zip(&prims) {
                assert_eq!(*mat, class_name(argmax(&p.semantics), 4));
                assert_eq!(range.len(), 9 * 16);
                let r = p.rotation.to_rotation_matrix().unwrap();
                for x in &mesh.vertices[range.clone()] {
                    let u = r * (x - p.position);
                    let f = canonical_implicit_with(&u, &p.scale, p.eps1, p.eps2, form).unwrap();
                    assert!((f - 1.0).abs() < 1e-6, "f = {f}");
                }
            }
        }
    }

    #[test]
    fn mesh_resolution_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = PrimitiveSet::Superquadric(vec![sq(&mut rng, 1)]);
        assert!(matches!(write_mesh(Vec::new(), &set, ImplicitForm::Standard, 3), Err(Error::InvalidArgument(_))));
        let mut buf = Vec::new();
        write_mesh(&mut buf, &set, ImplicitForm::Standard, 1000).unwrap();
        let mesh = parse_obj(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(mesh.vertices.len(), 65 * 128);
        assert_eq!(mesh.faces, 64 * 128);
    }
}
