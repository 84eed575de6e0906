//! On-disk formats.
//!
//! Three binary containers, all little-endian with a four-byte ASCII magic:
//!
//! * `EMB1` -- embedding table: `u32 m`, `u32 d`, then `m * d` `f32` values
//!   in row-major order.
//! * `TDN1` -- tabular denoiser checkpoint: `u32 m`, `u32 bins`, `u8 role`
//!   (0 = mean, 1 = jump), then `m * bins * m` `f32` logits in the
//!   denoiser's native parameter order.
//! * `TOK1` -- token stream: `u32 m`, `u64 count`, then `count` `u32`
//!   token ids.  Sequence structure is not stored; readers re-chunk.
//!
//! Embeddings also round-trip through CSV: a header record `m,d` with the
//! two integer sizes, then `m` records of `d` decimal floats.  Binary
//! payloads are stored as `f32`, so writing quantizes `f64` values; the
//! quantized bytes themselves round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use gdds_core::denoiser::{Role, TabularDenoiser};
use gdds_core::kernel::EmbeddingTable;

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const TDN_MAGIC: [u8; 4] = *b"TDN1";
pub const TOK_MAGIC: [u8; 4] = *b"TOK1";

/// Largest element count any header may declare, a guard against reading
/// a corrupt length field and allocating absurd buffers.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("bad header: {what}")]
    BadHeader { what: String },
    #[error("unknown role byte {0}")]
    BadRole(u8),
    #[error("token {token} out of range for vocabulary of {m}")]
    TokenOutOfRange { token: u32, m: u32 },
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("invalid payload: {what}")]
    Invalid { what: String },
    #[error("csv record {record}: {what}")]
    Csv { record: usize, what: String },
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32(w: &mut impl Write, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn expect_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read) -> Result<(), FormatError> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(FormatError::TrailingBytes),
    }
}

fn check_counts(counts: &[(&str, u64)]) -> Result<(), FormatError> {
    let mut product = 1u64;
    for &(name, v) in counts {
        if v == 0 {
            return Err(FormatError::BadHeader {
                what: format!("{name} must be positive"),
            });
        }
        product = product.checked_mul(v).unwrap_or(u64::MAX);
    }
    if product > MAX_ELEMENTS {
        return Err(FormatError::BadHeader {
            what: format!("payload of {product} elements exceeds the format cap"),
        });
    }
    Ok(())
}

/// Write an embedding table as `EMB1`.  Values are quantized to `f32`.
pub fn write_embeddings(path: impl AsRef<Path>, emb: &EmbeddingTable) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&EMB_MAGIC)?;
    write_u32(&mut w, emb.len() as u32)?;
    write_u32(&mut w, emb.dim() as u32)?;
    for &v in emb.rows() {
        write_f32(&mut w, v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an `EMB1` embedding table.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, EMB_MAGIC)?;
    let m = read_u32(&mut r)? as u64;
    let d = read_u32(&mut r)? as u64;
    check_counts(&[("m", m), ("d", d)])?;
    let n = (m * d) as usize;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        rows.push(read_f32(&mut r)? as f64);
    }
    expect_eof(&mut r)?;
    EmbeddingTable::new(m as usize, d as usize, rows)
        .map_err(|e| FormatError::Invalid { what: e.to_string() })
}

/// Write an embedding table as CSV: header record `m,d`, then one record
/// of `d` floats per token.
pub fn write_embeddings_csv(
    path: impl AsRef<Path>,
    emb: &EmbeddingTable,
) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{},{}", emb.len(), emb.dim())?;
    for i in 0..emb.len() {
        let row = emb.row(i);
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV embedding table (header record `m,d`, then `m` rows of `d`
/// floats).
pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<EmbeddingTable, FormatError> {
    let file = File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec.map_err(|e| FormatError::Csv {
            record: 0,
            what: e.to_string(),
        })?,
        None => {
            return Err(FormatError::BadHeader {
                what: "empty csv file".into(),
            })
        }
    };
    if header.len() != 2 {
        return Err(FormatError::BadHeader {
            what: format!("header must hold exactly m,d; found {} fields", header.len()),
        });
    }
    let parse_size = |field: &str, name: &str| -> Result<u64, FormatError> {
        field.parse::<u64>().map_err(|_| FormatError::BadHeader {
            what: format!("{name} is not a non-negative integer: {field:?}"),
        })
    };
    let m = parse_size(&header[0], "m")?;
    let d = parse_size(&header[1], "d")?;
    check_counts(&[("m", m), ("d", d)])?;
    let mut rows = Vec::with_capacity((m * d) as usize);
    let mut seen = 0u64;
    for (idx, rec) in records.enumerate() {
        let record = idx + 1;
        let rec = rec.map_err(|e| FormatError::Csv {
            record,
            what: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue; // blank trailing line
        }
        if rec.len() != d as usize {
            return Err(FormatError::Csv {
                record,
                what: format!("expected {d} fields, found {}", rec.len()),
            });
        }
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| FormatError::Csv {
                record,
                what: format!("not a float: {field:?}"),
            })?;
            rows.push(v);
        }
        seen += 1;
    }
    if seen != m {
        return Err(FormatError::BadHeader {
            what: format!("header declares {m} rows, file holds {seen}"),
        });
    }
    EmbeddingTable::new(m as usize, d as usize, rows)
        .map_err(|e| FormatError::Invalid { what: e.to_string() })
}

/// Load embeddings by extension: `.csv` goes through the CSV reader,
/// anything else through `EMB1`.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable, FormatError> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_embeddings_csv(path),
        _ => read_embeddings(path),
    }
}

fn role_byte(role: Role) -> u8 {
    match role {
        Role::Mean => 0,
        Role::Jump => 1,
    }
}

fn role_from_byte(b: u8) -> Result<Role, FormatError> {
    match b {
        0 => Ok(Role::Mean),
        1 => Ok(Role::Jump),
        other => Err(FormatError::BadRole(other)),
    }
}

/// Write a tabular denoiser checkpoint as `TDN1`.  Logits are quantized
/// to `f32`.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    model: &TabularDenoiser,
) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TDN_MAGIC)?;
    write_u32(&mut w, model.len() as u32)?;
    write_u32(&mut w, model.bins() as u32)?;
    w.write_all(&[role_byte(model.role())])?;
    for &v in model.params() {
        write_f32(&mut w, v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `TDN1` checkpoint.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TabularDenoiser, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, TDN_MAGIC)?;
    let m = read_u32(&mut r)? as u64;
    let bins = read_u32(&mut r)? as u64;
    let mut role = [0u8; 1];
    r.read_exact(&mut role)?;
    let role = role_from_byte(role[0])?;
    check_counts(&[("m", m), ("bins", bins), ("m", m)])?;
    let mut model = TabularDenoiser::with_bins(m as usize, role, bins as usize)
        .map_err(|e| FormatError::Invalid { what: e.to_string() })?;
    {
        let params = model.params_mut();
        debug_assert_eq!(params.len(), (m * bins * m) as usize);
        for p in params.iter_mut() {
            *p = read_f32(&mut r)? as f64;
        }
    }
    expect_eof(&mut r)?;
    Ok(model)
}

/// Write a flat token stream as `TOK1`.
pub fn write_tokens(path: impl AsRef<Path>, m: u32, tokens: &[u32]) -> Result<(), FormatError> {
    if m == 0 {
        return Err(FormatError::BadHeader {
            what: "m must be positive".into(),
        });
    }
    for &t in tokens {
        if t >= m {
            return Err(FormatError::TokenOutOfRange { token: t, m });
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TOK_MAGIC)?;
    write_u32(&mut w, m)?;
    write_u64(&mut w, tokens.len() as u64)?;
    for &t in tokens {
        write_u32(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a `TOK1` token stream, returning the declared vocabulary size and
/// the flat ids.  Every id is checked against the declared size.
pub fn read_tokens(path: impl AsRef<Path>) -> Result<(u32, Vec<u32>), FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, TOK_MAGIC)?;
    let m = read_u32(&mut r)?;
    if m == 0 {
        return Err(FormatError::BadHeader {
            what: "m must be positive".into(),
        });
    }
    let count = read_u64(&mut r)?;
    if count > MAX_ELEMENTS {
        return Err(FormatError::BadHeader {
            what: format!("token count {count} exceeds the format cap"),
        });
    }
    let mut tokens = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let t = read_u32(&mut r)?;
        if t >= m {
            return Err(FormatError::TokenOutOfRange { token: t, m });
        }
        tokens.push(t);
    }
    expect_eof(&mut r)?;
    Ok((m, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gdds_core::rng::labeled_stream;
    use rand::Rng;

    fn temp_path(name: &str) -> tempfile::TempPath {
        let file = tempfile::Builder::new()
            .suffix(name)
            .tempfile()
            .expect("create temp file");
        file.into_temp_path()
    }

    fn random_embeddings(m: usize, d: usize, seed: u64) -> EmbeddingTable {
        let mut rng = labeled_stream(seed, 11);
        let rows: Vec<f64> = (0..m * d)
            .map(|_| (rng.random::<f32>() * 4.0 - 2.0) as f64)
            .collect();
        EmbeddingTable::new(m, d, rows).expect("valid table")
    }

    #[test]
    fn embeddings_binary_round_trip_is_exact() {
        // Values are f32-representable, so the f64 payload survives the
        // quantizing write bit for bit.
        let emb = random_embeddings(7, 3, 1);
        let path = temp_path(".emb");
        write_embeddings(&path, &emb).expect("write");
        let back = read_embeddings(&path).expect("read");
        assert_eq!(back.len(), 7);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.rows(), emb.rows());
    }

    #[test]
    fn embeddings_csv_round_trip_is_exact() {
        let emb = random_embeddings(5, 4, 2);
        let path = temp_path(".csv");
        write_embeddings_csv(&path, &emb).expect("write");
        let back = read_embeddings_csv(&path).expect("read");
        assert_eq!(back.rows(), emb.rows());
        // The dispatching loader sees the extension and takes the CSV path.
        let via = load_embeddings(&path).expect("load");
        assert_eq!(via.rows(), emb.rows());
    }

    #[test]
    fn embeddings_reject_corruption() {
        let emb = random_embeddings(4, 2, 3);
        let path = temp_path(".emb");
        write_embeddings(&path, &emb).expect("write");
        let mut bytes = std::fs::read(&path).expect("read bytes");
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).expect("rewrite");
        match read_embeddings(&path) {
            Err(FormatError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }

        write_embeddings(&path, &emb).expect("write");
        let mut bytes = std::fs::read(&path).expect("read bytes");
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).expect("rewrite");
        assert!(matches!(read_embeddings(&path), Err(FormatError::Io(_))));

        write_embeddings(&path, &emb).expect("write");
        let mut bytes = std::fs::read(&path).expect("read bytes");
        bytes.push(0);
        std::fs::write(&path, &bytes).expect("rewrite");
        assert!(matches!(
            read_embeddings(&path),
            Err(FormatError::TrailingBytes)
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_quantized_logits() {
        let mut model = TabularDenoiser::with_bins(5, Role::Jump, 4).expect("model");
        let mut rng = labeled_stream(9, 12);
        for p in model.params_mut() {
            *p = (rng.random::<f32>() * 6.0 - 3.0) as f64;
        }
        let path = temp_path(".tdn");
        write_checkpoint(&path, &model).expect("write");
        let back = read_checkpoint(&path).expect("read");
        assert_eq!(back.len(), 5);
        assert_eq!(back.bins(), 4);
        assert_eq!(back.role(), Role::Jump);
        assert_eq!(back.params(), model.params());
        // A second write of the reread model is byte-identical.
        let path2 = temp_path(".tdn");
        write_checkpoint(&path2, &back).expect("rewrite");
        assert_eq!(
            std::fs::read(&path).expect("a"),
            std::fs::read(&path2).expect("b")
        );
    }

    #[test]
    fn checkpoint_rejects_unknown_role() {
        let model = TabularDenoiser::new(3, Role::Mean).expect("model");
        let path = temp_path(".tdn");
        write_checkpoint(&path, &model).expect("write");
        let mut bytes = std::fs::read(&path).expect("bytes");
        bytes[12] = 7; // role byte sits after magic, m, and bins
        std::fs::write(&path, &bytes).expect("rewrite");
        assert!(matches!(read_checkpoint(&path), Err(FormatError::BadRole(7))));
    }

    #[test]
    fn tokens_round_trip_and_validate() {
        let tokens: Vec<u32> = vec![0, 3, 1, 2, 3, 0, 1];
        let path = temp_path(".tok");
        write_tokens(&path, 4, &tokens).expect("write");
        let (m, back) = read_tokens(&path).expect("read");
        assert_eq!(m, 4);
        assert_eq!(back, tokens);

        assert!(matches!(
            write_tokens(&path, 3, &tokens),
            Err(FormatError::TokenOutOfRange { token: 3, m: 3 })
        ));

        write_tokens(&path, 4, &tokens).expect("write");
        let mut bytes = std::fs::read(&path).expect("bytes");
        // Corrupt the last id to an out-of-range value.
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).expect("rewrite");
        assert!(matches!(
            read_tokens(&path),
            Err(FormatError::TokenOutOfRange { token: 99, m: 4 })
        ));
    }

    #[test]
    fn empty_token_stream_round_trips() {
        let path = temp_path(".tok");
        write_tokens(&path, 6, &[]).expect("write");
        let (m, back) = read_tokens(&path).expect("read");
        assert_eq!(m, 6);
        assert!(back.is_empty());
    }
}
