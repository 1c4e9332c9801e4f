//! PLY point-cloud I/O: ASCII and binary little-endian encodings, vertex
//! elements only. Colors default to mid-gray and labels to
//! [`IGNORE_LABEL`](super::IGNORE_LABEL) when the file does not carry them.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::{DataError, PointCloud, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PropType {
    fn parse(token: &str) -> Option<Self> {
        match token {
            "char" | "int8" => Some(Self::I8),
            "uchar" | "uint8" => Some(Self::U8),
            "short" | "int16" => Some(Self::I16),
            "ushort" | "uint16" => Some(Self::U16),
            "int" | "int32" => Some(Self::I32),
            "uint" | "uint32" => Some(Self::U32),
            "float" | "float32" => Some(Self::F32),
            "double" | "float64" => Some(Self::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 => 4,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    /// Largest representable value, used to rescale integer colors to [0, 1].
    fn color_scale(self) -> Option<f64> {
        match self {
            Self::U8 => Some(255.0),
            Self::U16 => Some(65535.0),
            Self::F32 | Self::F64 => Some(1.0),
            _ => None,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Self::I8 => bytes[0] as i8 as f64,
            Self::U8 => bytes[0] as f64,
            Self::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }

    /// Parses an ASCII token. Float32 goes through `f32` first so ASCII and
    /// binary encodings of the same value load identically.
    fn parse_token(self, token: &str) -> Option<f64> {
        if self == Self::F32 {
            token.parse::<f32>().ok().map(|v| v as f64)
        } else if self == Self::F64 {
            token.parse::<f64>().ok()
        } else {
            token.parse::<i64>().ok().map(|v| v as f64)
        }
    }
}

#[derive(Debug)]
struct Prop {
    name: String,
    ty: PropType,
    line: usize,
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    props: Vec<Prop>,
    /// Line number of the last header line, for body error reports.
    end_line: usize,
    /// Byte offset of the first body byte.
    body_start: usize,
}

fn err(path: &str, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Ply {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads one header line (headers are ASCII even in binary files).
fn read_line<'a>(bytes: &'a [u8], cursor: &mut usize) -> Option<&'a [u8]> {
    if *cursor >= bytes.len() {
        return None;
    }
    let start = *cursor;
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .unwrap_or(bytes.len());
    *cursor = (end + 1).min(bytes.len() + 1);
    let mut line = &bytes[start..end];
    if line.last() == Some(&b'\r') {
        line = &line[..line.len() - 1];
    }
    Some(line)
}

fn parse_header(bytes: &[u8], path: &str) -> Result<Header, DataError> {
    let mut cursor = 0usize;
    let mut line_no = 0usize;
    let mut next = |cursor: &mut usize| -> Result<(usize, String), DataError> {
        line_no += 1;
        let raw = read_line(bytes, cursor)
            .ok_or_else(|| err(path, line_no, "unexpected end of file in header"))?;
        let text = std::str::from_utf8(raw)
            .map_err(|_| err(path, line_no, "header line is not valid UTF-8"))?;
        Ok((line_no, text.to_string()))
    };

    let (line, magic) = next(&mut cursor)?;
    if magic.trim() != "ply" {
        return Err(err(path, line, "not a PLY file (missing 'ply' magic)"));
    }

    let mut format = None;
    let mut vertex: Option<(usize, usize)> = None; // (count, header line)
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut seen_other_element = false;

    loop {
        let (line, text) = next(&mut cursor)?;
        let mut tokens = text.split_whitespace();
        let Some(keyword) = tokens.next() else { continue };
        match keyword {
            "comment" | "obj_info" => {}
            "format" => {
                format = Some(match tokens.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => {
                        return Err(err(path, line, format!("unsupported format {other:?}")))
                    }
                    None => return Err(err(path, line, "format line missing encoding")),
                });
            }
            "element" => {
                let name = tokens
                    .next()
                    .ok_or_else(|| err(path, line, "element line missing name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err(path, line, "element line missing count"))?;
                if name == "vertex" {
                    if seen_other_element {
                        return Err(err(
                            path,
                            line,
                            "vertex element must precede other elements",
                        ));
                    }
                    vertex = Some((count, line));
                    in_vertex = true;
                } else {
                    in_vertex = false;
                    seen_other_element = true;
                }
            }
            "property" => {
                if !in_vertex {
                    // Properties of trailing elements are never read.
                    continue;
                }
                let ty_token = tokens
                    .next()
                    .ok_or_else(|| err(path, line, "property line missing type"))?;
                if ty_token == "list" {
                    return Err(err(
                        path,
                        line,
                        "list properties in the vertex element are not supported",
                    ));
                }
                let ty = PropType::parse(ty_token).ok_or_else(|| {
                    err(path, line, format!("unsupported property type {ty_token:?}"))
                })?;
                let name = tokens
                    .next()
                    .ok_or_else(|| err(path, line, "property line missing name"))?;
                props.push(Prop {
                    name: name.to_string(),
                    ty,
                    line,
                });
            }
            "end_header" => {
                let format =
                    format.ok_or_else(|| err(path, line, "header has no format line"))?;
                let (vertex_count, velem_line) =
                    vertex.ok_or_else(|| err(path, line, "header has no vertex element"))?;
                for required in ["x", "y", "z"] {
                    if !props.iter().any(|p| p.name == required) {
                        return Err(err(
                            path,
                            velem_line,
                            format!("vertex element lacks property {required:?}"),
                        ));
                    }
                }
                return Ok(Header {
                    format,
                    vertex_count,
                    props,
                    end_line: line,
                    body_start: cursor,
                });
            }
            other => {
                return Err(err(path, line, format!("unknown header keyword {other:?}")));
            }
        }
    }
}

/// Loads an ASCII or binary-little-endian PLY file. Requires `x`, `y`, `z`
/// vertex properties; reads `red`, `green`, `blue` (defaulting to 0.5 gray)
/// and an integer `label` (defaulting to the ignore label) when present.
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud, DataError> {
    let path_str = path.as_ref().display().to_string();
    let bytes = std::fs::read(path.as_ref())?;
    parse_ply(&bytes, &path_str)
}

fn parse_ply(bytes: &[u8], path: &str) -> Result<PointCloud, DataError> {
    let header = parse_header(bytes, path)?;
    let n = header.vertex_count;
    let find = |name: &str| header.props.iter().position(|p| p.name == name);
    let xyz = [
        find("x").expect("checked in header"),
        find("y").expect("checked in header"),
        find("z").expect("checked in header"),
    ];
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            for &i in &[r, g, b] {
                let p = &header.props[i];
                if p.ty.color_scale().is_none() {
                    return Err(err(
                        path,
                        p.line,
                        format!("unsupported property type for color {:?}", p.name),
                    ));
                }
            }
            Some([r, g, b])
        }
        _ => None,
    };
    let label = match find("label") {
        Some(i) => {
            let p = &header.props[i];
            if !p.ty.is_integer() {
                return Err(err(
                    path,
                    p.line,
                    "label property must have an integer type",
                ));
            }
            Some(i)
        }
        None => None,
    };

    // Decode every vertex into one row of property values.
    let mut values = vec![0.0f64; header.props.len()];
    let mut positions = Array2::<f64>::zeros((n, 3));
    let mut colors = Array2::<f64>::from_elem((n, 3), 0.5);
    let mut labels = vec![IGNORE_LABEL; n];

    match header.format {
        PlyFormat::Ascii => {
            let body = std::str::from_utf8(&bytes[header.body_start.min(bytes.len())..])
                .map_err(|_| err(path, header.end_line, "ASCII body is not valid UTF-8"))?;
            let mut tokens = body.lines().enumerate().flat_map(|(i, l)| {
                l.split_whitespace()
                    .map(move |t| (header.end_line + 1 + i, t))
            });
            for v in 0..n {
                for (slot, prop) in values.iter_mut().zip(&header.props) {
                    let (line, token) = tokens.next().ok_or_else(|| {
                        err(path, header.end_line, format!("file ends inside vertex {v}"))
                    })?;
                    *slot = prop.ty.parse_token(token).ok_or_else(|| {
                        err(path, line, format!("cannot parse {token:?} as {:?}", prop.ty))
                    })?;
                }
                store_vertex(
                    path, &header, v, &values, &xyz, rgb, label, &mut positions, &mut colors,
                    &mut labels,
                )?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let row_size: usize = header.props.iter().map(|p| p.ty.size()).sum();
            let body = &bytes[header.body_start.min(bytes.len())..];
            if body.len() < n * row_size {
                return Err(err(
                    path,
                    header.end_line,
                    format!(
                        "vertex data truncated: need {} bytes, found {}",
                        n * row_size,
                        body.len()
                    ),
                ));
            }
            for v in 0..n {
                let mut offset = v * row_size;
                for (slot, prop) in values.iter_mut().zip(&header.props) {
                    *slot = prop.ty.read_le(&body[offset..]);
                    offset += prop.ty.size();
                }
                store_vertex(
                    path, &header, v, &values, &xyz, rgb, label, &mut positions, &mut colors,
                    &mut labels,
                )?;
            }
        }
    }

    PointCloud::new(positions, colors, labels)
}

#[allow(clippy::too_many_arguments)]
fn store_vertex(
    path: &str,
    header: &Header,
    v: usize,
    values: &[f64],
    xyz: &[usize; 3],
    rgb: Option<[usize; 3]>,
    label: Option<usize>,
    positions: &mut Array2<f64>,
    colors: &mut Array2<f64>,
    labels: &mut [u32],
) -> Result<(), DataError> {
    for a in 0..3 {
        positions[[v, a]] = values[xyz[a]];
    }
    if let Some(rgb) = rgb {
        for c in 0..3 {
            let prop = &header.props[rgb[c]];
            let scale = prop.ty.color_scale().expect("checked before decoding");
            colors[[v, c]] = values[rgb[c]] / scale;
        }
    }
    if let Some(i) = label {
        let raw = values[i];
        if raw < 0.0 {
            return Err(err(
                path,
                header.end_line,
                format!("vertex {v} has negative label {raw}"),
            ));
        }
        labels[v] = raw as u32;
    }
    Ok(())
}

/// Writes a cloud as PLY: f32 positions, u8 colors, u8 label. Labels must
/// fit in a byte (class ids and the ignore label both do).
pub fn save_ply(
    path: impl AsRef<Path>,
    pc: &PointCloud,
    format: PlyFormat,
) -> Result<(), DataError> {
    let path_str = path.as_ref().display().to_string();
    if let Some(&bad) = pc.labels.iter().find(|&&l| l > 255) {
        return Err(err(
            &path_str,
            0,
            format!("label {bad} does not fit the u8 label property"),
        ));
    }
    let mut out = Vec::new();
    let fmt_name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {fmt_name} 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property uchar label\nend_header\n",
        pc.len()
    )?;
    for i in 0..pc.len() {
        let p: Vec<f32> = (0..3).map(|a| pc.positions[[i, a]] as f32).collect();
        let c: Vec<u8> = (0..3)
            .map(|a| (pc.colors[[i, a]] * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let l = pc.labels[i] as u8;
        match format {
            PlyFormat::Ascii => {
                writeln!(out, "{} {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2], l)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in &p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&c);
                out.push(l);
            }
        }
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneParams};

    fn parse_str(text: &str) -> Result<PointCloud, DataError> {
        parse_ply(text.as_bytes(), "test.ply")
    }

    #[test]
    fn three_vertex_ascii_fixture() {
        let pc = parse_str(
            "ply\nformat ascii 1.0\ncomment fixture\nelement vertex 3\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\n\
             property uchar label\nend_header\n\
             0.5 0.25 -1.5 255 0 0 2\n\
             1 2 3 0 255 0 7\n\
             -0.125 0 4.5 0 0 255 255\n",
        )
        .unwrap();
        assert_eq!(pc.len(), 3);
        assert_eq!(pc.positions[[0, 0]], 0.5);
        assert_eq!(pc.positions[[2, 0]], -0.125);
        assert_eq!(pc.positions[[1, 2]], 3.0);
        assert_eq!(pc.colors[[0, 0]], 1.0);
        assert_eq!(pc.labels, vec![2, 7, IGNORE_LABEL]);
    }

    #[test]
    fn missing_colors_and_labels_get_defaults() {
        let pc = parse_str(
            "ply\nformat ascii 1.0\nelement vertex 1\n\
             property float x\nproperty float y\nproperty float z\nend_header\n\
             1 2 3\n",
        )
        .unwrap();
        assert_eq!(pc.colors[[0, 0]], 0.5);
        assert_eq!(pc.labels, vec![IGNORE_LABEL]);
    }

    #[test]
    fn ascii_and_binary_encodings_load_identically() {
        let dir = tempfile::tempdir().unwrap();
        let pc = synth_scene(2, &SceneParams { points_per_class: 50, ..Default::default() })
            .unwrap();
        let a_path = dir.path().join("a.ply");
        let b_path = dir.path().join("b.ply");
        save_ply(&a_path, &pc, PlyFormat::Ascii).unwrap();
        save_ply(&b_path, &pc, PlyFormat::BinaryLittleEndian).unwrap();
        let from_ascii = load_ply(&a_path).unwrap();
        let from_binary = load_ply(&b_path).unwrap();
        assert_eq!(from_ascii, from_binary);
        assert_eq!(from_ascii.labels, pc.labels);
        // Positions survive at f32 precision.
        for (orig, got) in pc.positions.iter().zip(from_ascii.positions.iter()) {
            assert_eq!(*orig as f32 as f64, *got);
        }
    }

    #[test]
    fn header_errors_carry_line_numbers() {
        let err = parse_str("not ply\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");

        let err = parse_str("ply\nformat ascii 1.0\nelement vertex 1\nproperty float128 x\n")
            .unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(err.to_string().contains("float128"), "{err}");

        let err = parse_str(
            "ply\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("no format line"), "{err}");

        let err = parse_str(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty list uchar int idx\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("list"), "{err}");
    }

    #[test]
    fn truncated_files_error_instead_of_crashing() {
        // ASCII body cut short.
        let err = parse_str(
            "ply\nformat ascii 1.0\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("vertex 1"), "{err}");

        // Binary body cut short.
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\nend_header\n"
            .to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let err = parse_ply(&bytes, "trunc.ply").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // File ends inside the header.
        let err = parse_str("ply\nformat ascii 1.0\n").unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
    }

    #[test]
    fn negative_labels_are_rejected() {
        let err = parse_str(
            "ply\nformat ascii 1.0\nelement vertex 1\n\
             property float x\nproperty float y\nproperty float z\n\
             property int label\nend_header\n1 2 3 -4\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("negative label"), "{err}");
    }

    #[test]
    fn trailing_elements_are_ignored_but_leading_ones_rejected() {
        let pc = parse_str(
            "ply\nformat ascii 1.0\nelement vertex 1\n\
             property float x\nproperty float y\nproperty float z\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             1 2 3\n3 0 1 2\n",
        )
        .unwrap();
        assert_eq!(pc.len(), 1);

        let err = parse_str(
            "ply\nformat ascii 1.0\nelement camera 1\nproperty float fov\n\
             element vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
             end_header\n0.9\n1 2 3\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("precede"), "{err}");
    }

    #[test]
    fn binary_round_trip_reads_back_every_type() {
        // A file mixing property types: double position, ushort colors.
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n\
            property double x\nproperty double y\nproperty double z\n\
            property ushort red\nproperty ushort green\nproperty ushort blue\n\
            property int label\nend_header\n"
            .to_vec();
        for v in [0.1f64, -2.5, 3.75] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for c in [65535u16, 0, 32768] {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        bytes.extend_from_slice(&9i32.to_le_bytes());
        let pc = parse_ply(&bytes, "mixed.ply").unwrap();
        assert_eq!(pc.positions[[0, 0]], 0.1);
        assert_eq!(pc.positions[[0, 1]], -2.5);
        assert_eq!(pc.colors[[0, 0]], 1.0);
        assert_eq!(pc.colors[[0, 1]], 0.0);
        assert_eq!(pc.labels, vec![9]);
    }
}
