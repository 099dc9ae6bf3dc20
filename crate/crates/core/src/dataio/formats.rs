//! Plain-text point cloud files: whitespace-separated `xyz` and ASCII PLY.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            CloudFormat::Xyz => "xyz",
            CloudFormat::PlyAscii => "ply",
        }
    }

    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        ext.parse()
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" | "ply-ascii" => Ok(CloudFormat::PlyAscii),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

/// Nine significant digits, enough to recover any f32 and to keep f64
/// coordinates within 1e-9 relative error.
fn num(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_cloud_string(cloud: &PointCloud, format: CloudFormat) -> String {
    let mut out = String::new();
    let labels = cloud.labels.as_deref();
    if format == CloudFormat::PlyAscii {
        out.push_str("ply\nformat ascii 1.0\n");
        if let Some(c) = cloud.category {
            let _ = writeln!(out, "comment category {c}");
        }
        let _ = writeln!(out, "element vertex {}", cloud.len());
        out.push_str("property double x\nproperty double y\nproperty double z\n");
        if labels.is_some() {
            out.push_str("property int label\n");
        }
        out.push_str("end_header\n");
    } else if let Some(c) = cloud.category {
        let _ = writeln!(out, "# category {c}");
    }
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", num(p[0]), num(p[1]), num(p[2]));
        if let Some(l) = labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    cloud.validate()?;
    std::fs::write(path, write_cloud_string(cloud, format))?;
    Ok(())
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    parse_cloud(&text, format, path)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

/// Parses one `x y z [label]` record; `line` is 1-based.
fn parse_record(
    fields: &[&str],
    with_label: Option<bool>,
    path: &Path,
    line: usize,
) -> Result<([f64; 3], Option<usize>)> {
    let expected = match with_label {
        Some(true) => 4..=4,
        Some(false) => 3..=3,
        None => 3..=4,
    };
    if !expected.contains(&fields.len()) {
        return Err(parse_err(
            path,
            line,
            format!("expected {expected:?} fields, found {}", fields.len()),
        ));
    }
    let mut p = [0.0f64; 3];
    for k in 0..3 {
        p[k] = fields[k]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad coordinate `{}`", fields[k])))?;
        if !p[k].is_finite() {
            return Err(parse_err(
                path,
                line,
                format!("non-finite coordinate `{}`", fields[k]),
            ));
        }
    }
    let label = fields
        .get(3)
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| parse_err(path, line, format!("bad label `{f}`")))
        })
        .transpose()?;
    Ok((p, label))
}

fn collect(
    records: Vec<([f64; 3], Option<usize>)>,
    path: &Path,
    first_line: usize,
) -> Result<PointCloud> {
    if records.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let labeled = records[0].1.is_some();
    if let Some(i) = records.iter().position(|r| r.1.is_some() != labeled) {
        return Err(parse_err(
            path,
            first_line + i,
            "label present on some lines only",
        ));
    }
    let (points, labels): (Vec<_>, Vec<_>) = records.into_iter().unzip();
    if labeled {
        PointCloud::with_labels(points, labels.into_iter().map(Option::unwrap).collect())
    } else {
        Ok(PointCloud::new(points))
    }
}

pub fn parse_cloud(text: &str, format: CloudFormat, path: &Path) -> Result<PointCloud> {
    match format {
        CloudFormat::Xyz => {
            let mut records = Vec::new();
            let mut first = 0;
            let mut category = None;
            for (i, line) in text.lines().enumerate() {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if let ["#", "category", c] = fields.as_slice() {
                    category = Some(
                        c.parse()
                            .map_err(|_| parse_err(path, i + 1, format!("bad category `{c}`")))?,
                    );
                    continue;
                }
                if fields.is_empty() || fields[0].starts_with('#') {
                    continue;
                }
                if records.is_empty() {
                    first = i + 1;
                }
                records.push(parse_record(&fields, None, path, i + 1)?);
            }
            Ok(PointCloud {
                category,
                ..collect(records, path, first)?
            })
        }
        CloudFormat::PlyAscii => parse_ply(text, path),
    }
}

fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_end = None;
    let mut category = None;
    for (i, line) in lines.by_ref() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("unsupported PLY format `{other}`"),
                ))
            }
            ["comment", "category", c] => {
                category = Some(
                    c.parse()
                        .map_err(|_| parse_err(path, i + 1, format!("bad category `{c}`")))?,
                );
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                vertices = Some(
                    n.parse::<usize>()
                        .map_err(|_| parse_err(path, i + 1, "bad vertex count"))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("unexpected header line `{line}`"),
                ))
            }
        }
    }
    let header_end =
        header_end.ok_or_else(|| parse_err(path, text.lines().count(), "missing end_header"))?;
    let count = vertices.ok_or_else(|| parse_err(path, header_end, "no vertex element"))?;
    let labeled = match props
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .as_slice()
    {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "label"] => true,
        other => {
            return Err(parse_err(
                path,
                header_end,
                format!("unsupported vertex properties {other:?}"),
            ))
        }
    };
    let mut records = Vec::with_capacity(count);
    for (i, line) in lines {
        if records.len() == count {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        records.push(parse_record(&fields, Some(labeled), path, i + 1)?);
    }
    if records.len() < count {
        return Err(parse_err(
            path,
            text.lines().count(),
            format!("expected {count} vertices, found {}", records.len()),
        ));
    }
    Ok(PointCloud {
        category,
        ..collect(records, path, header_end + 1)?
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled() -> PointCloud {
        PointCloud::with_labels(
            vec![
                [0.1234567891, -2.0, 3.5e-5],
                [1.0 / 3.0, 0.0, -0.999999999],
                [7.0, 8.0, 9.0],
            ],
            vec![0, 2, 1],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        for format in [CloudFormat::Xyz, CloudFormat::PlyAscii] {
            for cloud in [
                labeled(),
                PointCloud::new(labeled().points),
                labeled().with_category(3),
            ] {
                let path = dir.path().join(format!("c.{}", format.as_str()));
                write_cloud(&cloud, &path, format).unwrap();
                let back = read_cloud(&path, CloudFormat::from_path(&path).unwrap()).unwrap();
                assert_eq!(back.labels, cloud.labels);
                assert_eq!(back.category, cloud.category);
                for (a, b) in back.points.iter().zip(&cloud.points) {
                    for k in 0..3 {
                        assert!((a[k] - b[k]).abs() <= 1e-9 * b[k].abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn xyz_line_with_label() {
        let c = parse_cloud("0 0 0 2\n", CloudFormat::Xyz, Path::new("a.xyz")).unwrap();
        assert_eq!(c.points, vec![[0.0; 3]]);
        assert_eq!(c.labels, Some(vec![2]));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let p = Path::new("bad.xyz");
        match parse_cloud("0 0 0\n1 x 2\n", CloudFormat::Xyz, p) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_cloud("", CloudFormat::Xyz, p),
            Err(Error::EmptyCloud)
        ));
        assert!(matches!(
            parse_cloud("0 0 0 1\n1 1 1\n", CloudFormat::Xyz, p),
            Err(Error::Parse { line: 2, .. })
        ));
        let ply = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1\n";
        assert!(matches!(
            parse_cloud(ply, CloudFormat::PlyAscii, p),
            Err(Error::Parse { line: 9, .. })
        ));
        assert!(matches!(
            "obj".parse::<CloudFormat>(),
            Err(Error::UnknownFormat(_))
        ));
    }
}
