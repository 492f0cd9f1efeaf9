//! Unit-field cache files.
//!
//! Layout: a UTF-8 header of `key value` lines terminated by a line holding
//! only `end`, followed by the little-endian `f64` payload. The payload holds,
//! for each contact in header order, `points × 3` values in registry order.
//!
//! ```text
//! STIMPLAN-UNITFIELD 1
//! lead abbott_infinity_directional
//! pose_hash 3f9c…
//! backend analytic_point_source
//! registry_hash 81aa…
//! units V/m per mA
//! points 2048
//! contacts 0,1,2,3,4,5,6,7
//! checksum <sha256 of payload>
//! end
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{FieldError, FieldHeader, UnitFieldMatrix};
use crate::sha256_hex;

const MAGIC: &str = "STIMPLAN-UNITFIELD 1";

fn payload(matrix: &UnitFieldMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(matrix.contact_ids().len() * matrix.n_points() * 24);
    for col in matrix.raw() {
        for v in col {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

/// Serialize a matrix into the cache format.
pub fn write_unit_fields(matrix: &UnitFieldMatrix) -> Vec<u8> {
    let body = payload(matrix);
    let h = &matrix.header;
    let ids: Vec<String> = matrix.contact_ids().iter().map(|c| c.to_string()).collect();
    let mut out = format!(
        "{MAGIC}\nlead {}\npose_hash {}\nbackend {}\nregistry_hash {}\nunits {}\npoints {}\ncontacts {}\nchecksum {}\nend\n",
        h.lead,
        h.pose_hash,
        h.backend,
        h.registry_hash,
        h.units,
        matrix.n_points(),
        ids.join(","),
        sha256_hex(&body)
    )
    .into_bytes();
    out.extend_from_slice(&body);
    out
}

/// Parse the cache format. With `expected_registry`, the stored registry
/// hash must match it.
pub fn read_unit_fields(
    bytes: &[u8],
    expected_registry: Option<&str>,
) -> Result<UnitFieldMatrix, FieldError> {
    let parse = |m: String| FieldError::Parse(m);
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse("header is not terminated by `end`".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| parse("header is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(parse("missing STIMPLAN-UNITFIELD magic line".into()));
    }
    let field = |key: &str| -> Result<String, FieldError> {
        lines[1..]
            .iter()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
            .map(str::to_string)
            .ok_or_else(|| parse(format!("header is missing `{key}`")))
    };
    let header = FieldHeader {
        lead: field("lead")?,
        pose_hash: field("pose_hash")?,
        backend: field("backend")?,
        registry_hash: field("registry_hash")?,
        units: field("units")?,
    };
    if header.units != super::UNITS {
        return Err(parse(format!("unsupported units `{}`", header.units)));
    }
    let n_points: usize = field("points")?
        .parse()
        .map_err(|_| parse("`points` is not an integer".into()))?;
    let contacts_line = field("contacts")?;
    let contact_ids = contacts_line
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| parse("`contacts` must be comma-separated integers".into()))?;
    let checksum = field("checksum")?;

    let body = &bytes[pos..];
    let expected_len = contact_ids.len() * n_points * 24;
    if body.len() != expected_len {
        return Err(parse(format!(
            "payload has {} bytes, header implies {expected_len}",
            body.len()
        )));
    }
    if sha256_hex(body) != checksum {
        return Err(parse("payload checksum mismatch".into()));
    }
    if let Some(reg) = expected_registry {
        if reg != header.registry_hash {
            return Err(FieldError::Registry {
                expected: reg.to_string(),
                found: header.registry_hash.clone(),
            });
        }
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut fields = Vec::with_capacity(contact_ids.len());
    for &id in &contact_ids {
        let mut col = Vec::with_capacity(n_points);
        for p in 0..n_points {
            let v = [values.next(), values.next(), values.next()].map(|x| x.expect("length checked"));
            if v.iter().any(|x| !x.is_finite()) {
                return Err(parse(format!("non-finite value in record contact {id} point {p}")));
            }
            col.push(v);
        }
        fields.push(col);
    }
    UnitFieldMatrix::new(header, contact_ids, n_points, fields)
}

/// Write a matrix to `path` atomically (temp file + rename).
pub fn export_unit_fields(matrix: &UnitFieldMatrix, path: &Path) -> Result<(), FieldError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&write_unit_fields(matrix))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn import_unit_fields(
    path: &Path,
    expected_registry: Option<&str>,
) -> Result<UnitFieldMatrix, FieldError> {
    read_unit_fields(&fs::read(path)?, expected_registry)
}
