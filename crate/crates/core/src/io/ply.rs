//! Vertex positions from PLY files (ASCII and binary, either byte order).
//!
//! Only the `vertex` element is read; its `x`, `y` and `z` properties are
//! required, everything else is skipped. Elements before `vertex` are skipped
//! too, including list properties.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::IoError;
use crate::geometry::{Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

/// Scalar type used for written coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyPrecision {
    Float,
    Double,
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read<B: ByteOrder>(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => B::read_i16(b) as f64,
            Self::U16 => B::read_u16(b) as f64,
            Self::I32 => B::read_i32(b) as f64,
            Self::U32 => B::read_u32(b) as f64,
            Self::F32 => B::read_f32(b) as f64,
            Self::F64 => B::read_f64(b),
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
    encoding: PlyEncoding,
    elements: Vec<Element>,
    body_start: usize,
}

fn header_err(msg: impl Into<String>) -> IoError {
    IoError::MalformedHeader(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header, IoError> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(header_err("missing end_header"));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| header_err("non-UTF-8 header"))?
            .trim_end_matches('\r')
            .trim()
            .to_string();
        pos += nl + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.into_iter();
    if it.next().as_deref() != Some("ply") {
        return Err(header_err("missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in it {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, "1.0"] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => PlyEncoding::BinaryBigEndian,
                    other => return Err(header_err(format!("unknown format '{other}'"))),
                });
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| header_err(format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err("property before any element"))?;
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(header_err(format!("bad list types in '{line}'")));
                };
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err("property before any element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| header_err(format!("unknown type '{ty}'")))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => return Err(header_err(format!("unexpected line '{line}'"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| header_err("missing format line"))?,
        elements,
        body_start: pos,
    })
}

/// Positions of x, y, z among the vertex element's properties.
fn coordinate_slots(el: &Element) -> Result<[usize; 3], IoError> {
    let find = |axis: &'static str| {
        el.props
            .iter()
            .position(|p| matches!(p, Property::Scalar { name, .. } if name == axis))
            .ok_or(IoError::MissingCoordinate(axis))
    };
    Ok([find("x")?, find("y")?, find("z")?])
}

fn read_ascii(body: &[u8], elements: &[Element], vi: usize) -> Result<Vec<Point>, IoError> {
    let text = std::str::from_utf8(body).map_err(|_| IoError::Truncated("non-UTF-8 ASCII body".into()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    for el in &elements[..vi] {
        for k in 0..el.count {
            lines
                .next()
                .ok_or_else(|| IoError::Truncated(format!("{} {k} of {}", el.name, el.count)))?;
        }
    }
    let el = &elements[vi];
    if el.props.iter().any(|p| matches!(p, Property::List { .. })) {
        return Err(header_err("list property on vertex element"));
    }
    let slots = coordinate_slots(el)?;
    let mut out = Vec::with_capacity(el.count);
    for k in 0..el.count {
        let line = lines
            .next()
            .ok_or_else(|| IoError::Truncated(format!("vertex {k} of {}", el.count)))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < el.props.len() {
            return Err(IoError::Truncated(format!("vertex {k} has {} values", vals.len())));
        }
        let mut xyz = [0.0; 3];
        for (a, &s) in slots.iter().enumerate() {
            xyz[a] = vals[s]
                .parse()
                .map_err(|_| IoError::Truncated(format!("vertex {k}: bad number '{}'", vals[s])))?;
        }
        out.push(Point::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(out)
}

fn read_binary<B: ByteOrder>(body: &[u8], elements: &[Element], vi: usize) -> Result<Vec<Point>, IoError> {
    let mut pos = 0;
    let need = |pos: usize, n: usize, what: &str| -> Result<(), IoError> {
        if pos + n > body.len() {
            Err(IoError::Truncated(what.to_string()))
        } else {
            Ok(())
        }
    };
    for el in &elements[..vi] {
        for _ in 0..el.count {
            for p in &el.props {
                match p {
                    Property::Scalar { ty, .. } => {
                        need(pos, ty.size(), &el.name)?;
                        pos += ty.size();
                    }
                    Property::List { count, item } => {
                        need(pos, count.size(), &el.name)?;
                        let n = count.read::<B>(&body[pos..]) as usize;
                        pos += count.size();
                        need(pos, n * item.size(), &el.name)?;
                        pos += n * item.size();
                    }
                }
            }
        }
    }
    let el = &elements[vi];
    let mut offsets = Vec::with_capacity(el.props.len());
    let mut stride = 0;
    for p in &el.props {
        match p {
            Property::Scalar { ty, .. } => {
                offsets.push((stride, *ty));
                stride += ty.size();
            }
            Property::List { .. } => return Err(header_err("list property on vertex element")),
        }
    }
    let slots = coordinate_slots(el)?;
    let total = stride
        .checked_mul(el.count)
        .ok_or_else(|| header_err("vertex count overflows"))?;
    if pos + total > body.len() {
        return Err(IoError::Truncated(format!(
            "{} vertex bytes expected, {} present",
            total,
            body.len() - pos
        )));
    }
    Ok((0..el.count)
        .map(|k| {
            let rec = &body[pos + k * stride..];
            let v = |a: usize| {
                let (off, ty) = offsets[slots[a]];
                ty.read::<B>(&rec[off..])
            };
            Point::new(v(0), v(1), v(2))
        })
        .collect())
}

/// Parses PLY bytes into a cloud, keeping vertex order.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, IoError> {
    let header = parse_header(bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err("no vertex element"))?;
    let ignored: Vec<&str> = header.elements[vi]
        .props
        .iter()
        .filter_map(|p| match p {
            Property::Scalar { name, .. } if !matches!(name.as_str(), "x" | "y" | "z") => Some(name.as_str()),
            _ => None,
        })
        .collect();
    if !ignored.is_empty() {
        log::info!("ignoring vertex properties {ignored:?}");
    }
    let body = &bytes[header.body_start..];
    let points = match header.encoding {
        PlyEncoding::Ascii => read_ascii(body, &header.elements, vi)?,
        PlyEncoding::BinaryLittleEndian => read_binary::<LittleEndian>(body, &header.elements, vi)?,
        PlyEncoding::BinaryBigEndian => read_binary::<BigEndian>(body, &header.elements, vi)?,
    };
    Ok(PointCloud::new(points)?)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud, IoError> {
    parse_ply(&fs::read(path)?)
}

/// Serializes the cloud's coordinates. ASCII output prints the shortest
/// representation that reads back to the same value.
pub fn ply_to_bytes(cloud: &PointCloud, encoding: PlyEncoding, precision: PlyPrecision) -> Vec<u8> {
    let (fmt, ty) = (
        match encoding {
            PlyEncoding::Ascii => "ascii",
            PlyEncoding::BinaryLittleEndian => "binary_little_endian",
            PlyEncoding::BinaryBigEndian => "binary_big_endian",
        },
        match precision {
            PlyPrecision::Float => "float",
            PlyPrecision::Double => "double",
        },
    );
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty {ty} x\nproperty {ty} y\nproperty {ty} z\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    for p in cloud.points() {
        match (encoding, precision) {
            (PlyEncoding::Ascii, PlyPrecision::Float) => {
                out.extend(format!("{} {} {}\n", p.x as f32, p.y as f32, p.z as f32).bytes())
            }
            (PlyEncoding::Ascii, PlyPrecision::Double) => out.extend(format!("{} {} {}\n", p.x, p.y, p.z).bytes()),
            (_, PlyPrecision::Float) => {
                let mut buf = [0u8; 4];
                for v in [p.x, p.y, p.z] {
                    if encoding == PlyEncoding::BinaryLittleEndian {
                        LittleEndian::write_f32(&mut buf, v as f32);
                    } else {
                        BigEndian::write_f32(&mut buf, v as f32);
                    }
                    out.extend_from_slice(&buf);
                }
            }
            (_, PlyPrecision::Double) => {
                let mut buf = [0u8; 8];
                for v in [p.x, p.y, p.z] {
                    if encoding == PlyEncoding::BinaryLittleEndian {
                        LittleEndian::write_f64(&mut buf, v);
                    } else {
                        BigEndian::write_f64(&mut buf, v);
                    }
                    out.extend_from_slice(&buf);
                }
            }
        }
    }
    out
}

pub fn write_ply(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    encoding: PlyEncoding,
    precision: PlyPrecision,
) -> Result<(), IoError> {
    fs::write(path, ply_to_bytes(cloud, encoding, precision))?;
    Ok(())
}
