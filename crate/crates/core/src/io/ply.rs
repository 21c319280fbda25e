//! Binary little-endian PLY for Gaussian clouds.
//!
//! Every raw parameter is written as a `float` property in the order
//! `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3 albedo_0..2
//! roughness metallic`. `f_rest` is channel-major: coefficient `k ≥ 1` of
//! channel `c` is `f_rest_{c·(K−1) + k−1}`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::Vector3;

use crate::bake::{read_file, write_file};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud, DEFAULT_ALBEDO, DEFAULT_METALLIC, DEFAULT_ROUGHNESS};
use crate::math::logit;
use crate::sh;

fn property_names(sh_len: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * (sh_len - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.extend((0..3).map(|i| format!("albedo_{i}")));
    names.push("roughness".into());
    names.push("metallic".into());
    names
}

fn raw_values(g: &Gaussian, out: &mut Vec<f64>) {
    let k = g.sh.len();
    out.extend_from_slice(g.position.as_slice());
    out.extend_from_slice(g.normal.as_slice());
    out.extend_from_slice(&g.sh[0]);
    for c in 0..3 {
        out.extend((1..k).map(|j| g.sh[j][c]));
    }
    out.push(g.opacity_logit);
    out.extend_from_slice(g.log_scale.as_slice());
    out.extend_from_slice(&g.rotation);
    out.extend_from_slice(g.albedo_logit.as_slice());
    out.push(g.roughness_logit);
    out.push(g.metallic_logit);
}

pub fn ply_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let names = property_names(cloud.sh_len());
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.len()
    )
    .unwrap();
    for n in &names {
        writeln!(out, "property float {n}").unwrap();
    }
    out.extend_from_slice(b"end_header\n");
    let mut vals = Vec::with_capacity(names.len());
    let mut buf = [0u8; 4];
    for g in &cloud.gaussians {
        vals.clear();
        raw_values(g, &mut vals);
        for v in &vals {
            LittleEndian::write_f32(&mut buf, *v as f32);
            out.extend_from_slice(&buf);
        }
    }
    out
}

pub fn save_gaussian_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    write_file(path, &ply_bytes(cloud))
}

pub fn load_gaussian_ply(path: &Path) -> Result<GaussianCloud> {
    parse_gaussian_ply(&read_file(path)?, &path.display().to_string())
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => LittleEndian::read_i16(b) as f64,
            Scalar::U16 => LittleEndian::read_u16(b) as f64,
            Scalar::I32 => LittleEndian::read_i32(b) as f64,
            Scalar::U32 => LittleEndian::read_u32(b) as f64,
            Scalar::F32 => LittleEndian::read_f32(b) as f64,
            Scalar::F64 => LittleEndian::read_f64(b),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn parse_header(bytes: &[u8], ctx: &str) -> Result<(Vec<Element>, usize)> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::parse(ctx, "no end_header line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::parse(ctx, "header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(ctx, "missing 'ply' magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::parse(ctx, format!("unsupported PLY format '{fmt}'")));
                }
                format_ok = true;
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(ctx, format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => {
                return Err(Error::parse(ctx, "list properties are not supported"));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(ctx, "property before any element"))?;
                let s = Scalar::parse(ty).ok_or_else(|| Error::parse(ctx, format!("unknown property type '{ty}'")))?;
                el.props.push((name.to_string(), s));
            }
            _ => return Err(Error::parse(ctx, format!("unrecognized header line '{line}'"))),
        }
    }
    if !format_ok {
        return Err(Error::parse(ctx, "missing format line"));
    }
    Ok((elements, end + END.len()))
}

pub fn parse_gaussian_ply(bytes: &[u8], ctx: &str) -> Result<GaussianCloud> {
    let (elements, mut offset) = parse_header(bytes, ctx)?;
    let mut vertex = None;
    for el in &elements {
        let stride: usize = el.props.iter().map(|p| p.1.size()).sum();
        if el.name == "vertex" {
            vertex = Some((el, offset));
            break;
        }
        offset += stride * el.count;
    }
    let (el, offset) = vertex.ok_or_else(|| Error::parse(ctx, "no vertex element"))?;
    let stride: usize = el.props.iter().map(|p| p.1.size()).sum();
    if bytes.len() < offset + stride * el.count {
        return Err(Error::parse(
            ctx,
            format!("truncated: {} vertices need {} bytes", el.count, stride * el.count),
        ));
    }

    let mut index = HashMap::new();
    let mut pos = 0;
    for (name, ty) in &el.props {
        index.insert(name.as_str(), (pos, *ty));
        pos += ty.size();
    }
    let has = |n: &str| index.contains_key(n);

    let mut missing = Vec::new();
    let need = |names: &[String], missing: &mut Vec<String>| {
        for n in names {
            if !has(n) {
                missing.push(n.clone());
            }
        }
    };
    let core: Vec<String> = ["x", "y", "z", "opacity", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..3).map(|i| format!("scale_{i}")))
        .chain((0..4).map(|i| format!("rot_{i}")))
        .collect();
    need(&core, &mut missing);
    let normal_names: Vec<String> = ["nx", "ny", "nz"].iter().map(|s| s.to_string()).collect();
    let has_normals = normal_names.iter().any(|n| has(n));
    if has_normals {
        need(&normal_names, &mut missing);
    }
    let material_names: Vec<String> = (0..3)
        .map(|i| format!("albedo_{i}"))
        .chain(["roughness".to_string(), "metallic".to_string()])
        .collect();
    let has_material = material_names.iter().any(|n| has(n));
    if has_material {
        need(&material_names, &mut missing);
    }
    let rest = el.props.iter().filter(|p| p.0.starts_with("f_rest_")).count();
    if rest % 3 != 0 {
        return Err(Error::parse(ctx, format!("{rest} f_rest properties is not a multiple of 3")));
    }
    let sh_len = 1 + rest / 3;
    let degree = sh::degree_for_len(sh_len)
        .filter(|d| *d <= sh::MAX_DEGREE)
        .ok_or_else(|| Error::parse(ctx, format!("{sh_len} SH coefficients per channel is not a supported degree")))?;
    need(&(0..rest).map(|i| format!("f_rest_{i}")).collect::<Vec<_>>(), &mut missing);
    if !missing.is_empty() {
        return Err(Error::Schema { missing });
    }

    let mut cloud = GaussianCloud::new(degree);
    for i in 0..el.count {
        let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
        let get = |name: &str| -> Result<f64> {
            let (p, ty) = index[name];
            let v = ty.read(&row[p..]);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("{ctx}: vertex {i} property {name}")))
            }
        };
        // check every property so the first bad one in file order is reported
        for (name, _) in &el.props {
            get(name)?;
        }
        let v3 = |a: &str, b: &str, c: &str| -> Result<Vector3<f64>> { Ok(Vector3::new(get(a)?, get(b)?, get(c)?)) };
        let mut shc = vec![[0.0; 3]; sh_len];
        for c in 0..3 {
            shc[0][c] = get(&format!("f_dc_{c}"))?;
            for k in 1..sh_len {
                shc[k][c] = get(&format!("f_rest_{}", c * (sh_len - 1) + k - 1))?;
            }
        }
        let mut g = Gaussian {
            position: v3("x", "y", "z")?,
            log_scale: v3("scale_0", "scale_1", "scale_2")?,
            rotation: [get("rot_0")?, get("rot_1")?, get("rot_2")?, get("rot_3")?],
            opacity_logit: get("opacity")?,
            sh: shc,
            normal: Vector3::zeros(),
            albedo_logit: Vector3::repeat(logit(DEFAULT_ALBEDO)),
            roughness_logit: logit(DEFAULT_ROUGHNESS),
            metallic_logit: logit(DEFAULT_METALLIC),
        };
        if has_normals {
            g.normal = v3("nx", "ny", "nz")?;
        }
        if g.normal == Vector3::zeros() {
            g.normal = g.shortest_axis_normal();
        }
        if has_material {
            g.albedo_logit = v3("albedo_0", "albedo_1", "albedo_2")?;
            g.roughness_logit = get("roughness")?;
            g.metallic_logit = get("metallic")?;
        }
        cloud.push(g);
    }
    Ok(cloud)
}
