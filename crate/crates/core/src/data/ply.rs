//! Minimal PLY support for point clouds: reads the `vertex` element of ASCII
//! or binary little-endian files, writes ASCII with double-precision
//! positions and normals.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{estimate_normals, Point3, PointCloud};

/// Neighborhood size for normals when a file has none.
pub const DEFAULT_NORMAL_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Format(format!("unknown PLY scalar type {other:?}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("missing end_header".into()))?;
    let mut body_offset = end + END.len();
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) == Some(&b'\n') {
        body_offset += 1;
    }
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", other, ..] => return Err(Error::Format(format!("unsupported PLY format {other:?}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::Format(format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _] => {
                let el = elements.last_mut().ok_or_else(|| Error::Format("property before element".into()))?;
                el.props.push(Property::List { count: Scalar::parse(count)?, item: Scalar::parse(item)? });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Format("property before element".into()))?;
                el.props.push(Property::Scalar { name: name.to_string(), ty: Scalar::parse(ty)? });
            }
            _ => return Err(Error::Format(format!("unrecognized header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::Format("missing format line".into()))?;
    Ok(Header { format, elements, body_offset })
}

/// Parses a PLY document. Normals are taken from `nx ny nz` when present and
/// otherwise estimated from `normal_k` neighbors.
pub fn parse_ply(bytes: &[u8], normal_k: usize) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("no vertex element".into()))?;
    let vertex = &header.elements[vertex_idx];
    let column = |name: &str| {
        vertex.props.iter().position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
    };
    let pos_cols = ["x", "y", "z"]
        .iter()
        .map(|n| column(n).ok_or_else(|| Error::Format(format!("vertex has no {n:?} property"))))
        .collect::<Result<Vec<_>>>()?;
    let normal_cols: Option<Vec<usize>> = ["nx", "ny", "nz"].iter().map(|n| column(n)).collect();

    let rows = match header.format {
        Format::Ascii => read_ascii(&bytes[header.body_offset..], &header.elements, vertex_idx)?,
        Format::BinaryLe => read_binary(&bytes[header.body_offset..], &header.elements, vertex_idx)?,
    };
    if rows.is_empty() {
        return Err(Error::Format("vertex element is empty".into()));
    }
    let positions: Vec<Point3> = rows.iter().map(|r| Point3::new(r[pos_cols[0]], r[pos_cols[1]], r[pos_cols[2]])).collect();
    if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::Format("non-finite vertex position".into()));
    }
    let normals = normal_cols.and_then(|c| {
        rows.iter()
            .map(|r| {
                let n = Point3::new(r[c[0]], r[c[1]], r[c[2]]);
                let len = n.norm();
                if (len - 1.0).abs() <= 1e-9 {
                    Some(n)
                } else {
                    (len.is_finite() && len > 1e-12).then(|| n / len)
                }
            })
            .collect::<Option<Vec<_>>>()
    });
    match normals {
        Some(normals) => PointCloud::new(positions, normals),
        None if positions.len() > 3 => {
            let k = normal_k.clamp(3, positions.len() - 1);
            let normals = estimate_normals(&positions, k)?;
            PointCloud::new(positions, normals)
        }
        None => PointCloud::with_estimated_normals(positions, normal_k),
    }
}

fn read_ascii(body: &[u8], elements: &[Element], vertex_idx: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::Format("ASCII body is not UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut rows = Vec::new();
    for (ei, el) in elements.iter().enumerate() {
        for row in 0..el.count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("element {:?} truncated at row {row}", el.name)))?;
            if ei != vertex_idx {
                continue;
            }
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad number {t:?} in vertex row {row}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != el.props.len() {
                return Err(Error::Format(format!(
                    "vertex row {row} has {} values, expected {}",
                    values.len(),
                    el.props.len()
                )));
            }
            rows.push(values);
        }
        if ei == vertex_idx {
            break;
        }
    }
    Ok(rows)
}

fn read_binary(body: &[u8], elements: &[Element], vertex_idx: usize) -> Result<Vec<Vec<f64>>> {
    let truncated = || Error::Format("binary body truncated".into());
    let mut at = 0usize;
    let mut rows = Vec::new();
    for (ei, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let mut values = Vec::new();
            for p in &el.props {
                match *p {
                    Property::Scalar { ty, .. } => {
                        let b = body.get(at..at + ty.size()).ok_or_else(truncated)?;
                        values.push(ty.read_le(b));
                        at += ty.size();
                    }
                    Property::List { count, item } => {
                        let b = body.get(at..at + count.size()).ok_or_else(truncated)?;
                        let n = count.read_le(b) as usize;
                        at += count.size() + n * item.size();
                        // list values are not used; keep a placeholder column
                        values.push(f64::NAN);
                    }
                }
            }
            if ei == vertex_idx {
                rows.push(values);
            }
        }
        if ei == vertex_idx {
            break;
        }
    }
    if at > body.len() {
        return Err(truncated());
    }
    Ok(rows)
}

pub fn read_ply(path: impl AsRef<Path>, normal_k: usize) -> Result<PointCloud> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_ply(&bytes, normal_k)
        .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))
}

/// ASCII PLY with `double` x y z nx ny nz; values use shortest round-trip
/// formatting so reading back is exact.
pub fn to_ply_string(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        let _ = writeln!(out, "property double {name}");
    }
    out.push_str("end_header\n");
    for (p, n) in cloud.positions().iter().zip(cloud.normals()) {
        let _ = writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z);
    }
    out
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path.as_ref(), to_ply_string(cloud)).map_err(|e| Error::io(path.as_ref(), e))
}
