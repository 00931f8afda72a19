//! OBJ and PLY readers and writers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};

use super::TriangleMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyAscii,
    PlyBinary,
}

impl MeshFormat {
    /// Guess the format from a file extension. PLY files are written as binary.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "ply" => Some(MeshFormat::PlyBinary),
            _ => None,
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Reads a mesh. For PLY either encoding is accepted regardless of which PLY variant is
/// passed; the header decides.
pub fn load_mesh<R: Read>(source: R, format: MeshFormat) -> Result<TriangleMesh> {
    let mut reader = BufReader::new(source);
    match format {
        MeshFormat::Obj => read_obj(reader),
        MeshFormat::PlyAscii | MeshFormat::PlyBinary => read_ply(&mut reader),
    }
}

pub fn load_mesh_file(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown mesh extension: {}", path.display()))
    })?;
    let file = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    load_mesh(file, format)
}

/// Writes a mesh. `colors` (one RGB triple per vertex) is only honored by PLY.
pub fn save_mesh<W: Write>(
    sink: W,
    mesh: &TriangleMesh,
    format: MeshFormat,
    colors: Option<&[[u8; 3]]>,
) -> Result<()> {
    if let Some(c) = colors {
        if c.len() != mesh.vertex_count() {
            return Err(Error::InvalidArgument(format!(
                "{} colors for {} vertices",
                c.len(),
                mesh.vertex_count()
            )));
        }
    }
    let mut w = BufWriter::new(sink);
    match format {
        MeshFormat::Obj => {
            for p in mesh.vertices() {
                writeln!(w, "v {} {} {}", p.x, p.y, p.z)?;
            }
            for f in mesh.faces() {
                writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
            }
        }
        MeshFormat::PlyAscii | MeshFormat::PlyBinary => {
            let binary = format == MeshFormat::PlyBinary;
            writeln!(w, "ply")?;
            writeln!(
                w,
                "format {} 1.0",
                if binary { "binary_little_endian" } else { "ascii" }
            )?;
            writeln!(w, "element vertex {}", mesh.vertex_count())?;
            for axis in ["x", "y", "z"] {
                writeln!(w, "property double {axis}")?;
            }
            if colors.is_some() {
                for ch in ["red", "green", "blue"] {
                    writeln!(w, "property uchar {ch}")?;
                }
            }
            writeln!(w, "element face {}", mesh.face_count())?;
            writeln!(w, "property list uchar int vertex_indices")?;
            writeln!(w, "end_header")?;
            for (i, p) in mesh.vertices().iter().enumerate() {
                if binary {
                    for c in [p.x, p.y, p.z] {
                        w.write_all(&c.to_le_bytes())?;
                    }
                    if let Some(cs) = colors {
                        w.write_all(&cs[i])?;
                    }
                } else {
                    write!(w, "{} {} {}", p.x, p.y, p.z)?;
                    if let Some(cs) = colors {
                        write!(w, " {} {} {}", cs[i][0], cs[i][1], cs[i][2])?;
                    }
                    writeln!(w)?;
                }
            }
            for f in mesh.faces() {
                if binary {
                    w.write_all(&[3u8])?;
                    for &v in f {
                        w.write_all(&(v as i32).to_le_bytes())?;
                    }
                } else {
                    writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_mesh_file(
    path: impl AsRef<Path>,
    mesh: &TriangleMesh,
    colors: Option<&[[u8; 3]]>,
) -> Result<()> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown mesh extension: {}", path.display()))
    })?;
    let file = File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    save_mesh(file, mesh, format, colors)
}

fn fan(poly: &[usize], faces: &mut Vec<[usize; 3]>, line: usize) -> Result<()> {
    if poly.len() < 3 {
        return Err(parse_err(line, format!("face with {} vertices", poly.len())));
    }
    for k in 1..poly.len() - 1 {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
    Ok(())
}

fn read_obj<R: BufRead>(reader: R) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    *slot = tok
                        .next()
                        .ok_or_else(|| parse_err(lineno, "vertex needs 3 coordinates"))?
                        .parse()
                        .map_err(|_| parse_err(lineno, "bad vertex coordinate"))?;
                }
                vertices.push(Point3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for t in tok {
                    let idx: i64 = t
                        .split('/')
                        .next()
                        .unwrap_or("")
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad face index {t:?}")))?;
                    let resolved = match idx {
                        0 => return Err(parse_err(lineno, "face index 0")),
                        i if i > 0 => i - 1,
                        i => vertices.len() as i64 + i,
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(parse_err(lineno, format!("face index {idx} out of range")));
                    }
                    poly.push(resolved as usize);
                }
                fan(&poly, &mut faces, lineno)?;
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

#[derive(Debug, Clone, Copy)]
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
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
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Yields numeric tokens from the ASCII body across line breaks.
struct AsciiTokens<R> {
    reader: R,
    buf: Vec<String>,
    line: usize,
}

impl<R: BufRead> AsciiTokens<R> {
    fn next(&mut self) -> Result<f64> {
        while self.buf.is_empty() {
            let mut s = String::new();
            if self.reader.read_line(&mut s)? == 0 {
                return Err(parse_err(self.line, "unexpected end of PLY body"));
            }
            self.line += 1;
            self.buf = s.split_whitespace().rev().map(str::to_owned).collect();
        }
        let t = self.buf.pop().unwrap();
        t.parse()
            .map_err(|_| parse_err(self.line, format!("bad number {t:?}")))
    }
}

fn read_ply<R: BufRead>(reader: &mut R) -> Result<TriangleMesh> {
    let mut line = String::new();
    let mut lineno = 0;
    let mut next_line = |reader: &mut R, line: &mut String| -> Result<usize> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return Err(parse_err(lineno, "unexpected end of PLY header"));
        }
        lineno += 1;
        Ok(lineno)
    };
    let ln = next_line(reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(parse_err(ln, "missing 'ply' magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let ln = next_line(reader, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => {
                return Err(parse_err(ln, format!("unsupported PLY format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(ln, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", cnt, item, name] => {
                let (c, i) = Scalar::parse(cnt)
                    .zip(Scalar::parse(item))
                    .ok_or_else(|| parse_err(ln, "bad list property type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| parse_err(ln, "property before element"))?
                    .props
                    .push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| parse_err(ln, "bad property type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| parse_err(ln, "property before element"))?
                    .props
                    .push(Property::Scalar(name.to_string(), s));
            }
            ["end_header"] => break,
            _ => return Err(parse_err(ln, format!("unrecognized header line {:?}", line.trim()))),
        }
    }
    let binary = binary.ok_or_else(|| parse_err(lineno, "missing format line"))?;

    let mut vertices = Vec::new();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    let mut faces = Vec::new();
    let mut ascii = AsciiTokens {
        reader: &mut *reader,
        buf: Vec::new(),
        line: lineno,
    };
    let mut scratch = [0u8; 8];

    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let has_normals = is_vertex
            && ["nx", "ny", "nz"].iter().all(|n| {
                el.props
                    .iter()
                    .any(|p| matches!(p, Property::Scalar(pn, _) if pn == n))
            });
        for _ in 0..el.count {
            let mut pos = [0.0; 3];
            let mut nrm = [0.0; 3];
            for prop in &el.props {
                match prop {
                    Property::Scalar(name, ty) => {
                        let val = if binary {
                            let sz = ty.size();
                            ascii.reader.read_exact(&mut scratch[..sz]).map_err(|_| {
                                parse_err(lineno, "truncated binary PLY body")
                            })?;
                            ty.read_le(&scratch[..sz])
                        } else {
                            ascii.next()?
                        };
                        if is_vertex {
                            match name.as_str() {
                                "x" => pos[0] = val,
                                "y" => pos[1] = val,
                                "z" => pos[2] = val,
                                "nx" => nrm[0] = val,
                                "ny" => nrm[1] = val,
                                "nz" => nrm[2] = val,
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, cnt_ty, item_ty) => {
                        let count = if binary {
                            let sz = cnt_ty.size();
                            ascii.reader.read_exact(&mut scratch[..sz]).map_err(|_| {
                                parse_err(lineno, "truncated binary PLY body")
                            })?;
                            cnt_ty.read_le(&scratch[..sz]) as usize
                        } else {
                            ascii.next()? as usize
                        };
                        let mut items = Vec::with_capacity(count);
                        for _ in 0..count {
                            let v = if binary {
                                let sz = item_ty.size();
                                ascii.reader.read_exact(&mut scratch[..sz]).map_err(|_| {
                                    parse_err(lineno, "truncated binary PLY body")
                                })?;
                                item_ty.read_le(&scratch[..sz])
                            } else {
                                ascii.next()?
                            };
                            items.push(v);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            let mut poly = Vec::with_capacity(items.len());
                            for v in items {
                                if v < 0.0 || v as usize >= vertices.len() {
                                    return Err(parse_err(
                                        ascii.line,
                                        format!("face index {v} out of range"),
                                    ));
                                }
                                poly.push(v as usize);
                            }
                            fan(&poly, &mut faces, ascii.line)?;
                        }
                    }
                }
            }
            if is_vertex {
                vertices.push(Point3::new(pos[0], pos[1], pos[2]));
                if has_normals {
                    normals.push(Vector3::new(nrm[0], nrm[1], nrm[2]));
                }
            }
        }
    }
    if !normals.is_empty() {
        TriangleMesh::with_normals(vertices, faces, normals)
    } else {
        TriangleMesh::new(vertices, faces)
    }
}
