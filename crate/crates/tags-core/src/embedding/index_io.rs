//! Index file format, load/save, and the resumable index builder.
//!
//! Final index files carry the magic `TAGSIDX1`, then dim (u32 LE), a
//! length-prefixed provider fingerprint, a row count (u32 LE), and per
//! row a length-prefixed id followed by the query and rationale vectors
//! as f32 LE. During a build, finished rows stream to a `TAGSPART`
//! sidecar at full f64 precision; a rerun resumes from whatever complete
//! rows the sidecar holds.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::corpus::{render_query_text, Corpus, CorpusEntry};

use super::{EmbeddingError, EmbeddingIndex, EmbeddingProvider, EmbeddingVector, IndexRow};

const INDEX_MAGIC: &[u8; 8] = b"TAGSIDX1";
const PARTIAL_MAGIC: &[u8; 8] = b"TAGSPART";
const MAX_STRING_LEN: u32 = 1 << 20;

fn corrupt(reason: impl std::fmt::Display) -> EmbeddingError {
    EmbeddingError::CorruptIndex(reason.to_string())
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            corrupt(format!("unexpected end of file while reading {what}"))
        } else {
            EmbeddingError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, EmbeddingError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String, EmbeddingError> {
    let len = read_u32(r, what)?;
    if len > MAX_STRING_LEN {
        return Err(corrupt(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| corrupt(format!("{what} is not valid UTF-8")))
}

fn write_vec_f32<W: Write>(w: &mut W, vec: &EmbeddingVector) -> std::io::Result<()> {
    for v in vec.values() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_vec_f32<R: Read>(r: &mut R, dim: usize, what: &str) -> Result<EmbeddingVector, EmbeddingError> {
    let mut buf = vec![0u8; dim * 4];
    read_exact(r, &mut buf, what)?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EmbeddingVector::from_unit_values(values)
        .map_err(|e| corrupt(format!("{what}: {e}")))
}

/// Write an index to disk (f32 payloads). The file is assembled in a
/// sibling temp file and renamed into place.
pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<(), EmbeddingError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(INDEX_MAGIC)?;
        write_u32(&mut w, index.dim() as u32)?;
        write_str(&mut w, index.provider_fingerprint())?;
        write_u32(&mut w, index.len() as u32)?;
        for row in index.rows() {
            write_str(&mut w, &row.id)?;
            write_vec_f32(&mut w, &row.query_vec)?;
            write_vec_f32(&mut w, &row.rationale_vec)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load an index from disk. Vector payloads widen f32 -> f64, so saving
/// a loaded index reproduces it bitwise.
pub fn load_index(path: &Path) -> Result<EmbeddingIndex, EmbeddingError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic bytes")?;
    if &magic != INDEX_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let dim = read_u32(&mut r, "dim")? as usize;
    if dim == 0 {
        return Err(corrupt("dim is zero"));
    }
    let fingerprint = read_str(&mut r, "provider fingerprint")?;
    let count = read_u32(&mut r, "row count")? as usize;
    let mut index = EmbeddingIndex::new(dim, fingerprint);
    for i in 0..count {
        let id = read_str(&mut r, &format!("row {i} id"))?;
        let query_vec = read_vec_f32(&mut r, dim, &format!("row {i} query vector"))?;
        let rationale_vec = read_vec_f32(&mut r, dim, &format!("row {i} rationale vector"))?;
        index
            .push_row(IndexRow { id, query_vec, rationale_vec })
            .map_err(|e| corrupt(format!("row {i}: {e}")))?;
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(index),
        Ok(_) => Err(corrupt("trailing bytes after final row")),
        Err(e) => Err(EmbeddingError::Io(e)),
    }
}

/// Fail with `FingerprintMismatch` unless the index was built by this
/// provider.
pub fn ensure_fingerprint(
    index: &EmbeddingIndex,
    provider: &dyn EmbeddingProvider,
) -> Result<(), EmbeddingError> {
    let fp = provider.fingerprint();
    if index.provider_fingerprint() == fp {
        Ok(())
    } else {
        Err(EmbeddingError::FingerprintMismatch {
            index: index.provider_fingerprint().to_string(),
            provider: fp,
        })
    }
}

/// Options for [`build_index`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Where finished rows stream during the build. `None` disables
    /// resumability and keeps everything in memory.
    pub partial_path: Option<PathBuf>,
    /// Entries embedded per provider request (each entry contributes two
    /// texts).
    pub batch_entries: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { partial_path: None, batch_entries: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildStats {
    /// Entries embedded by this run.
    pub embedded: usize,
    /// Entries recovered from a previous interrupted run.
    pub resumed: usize,
}

type DoneRows = HashMap<String, (EmbeddingVector, EmbeddingVector)>;

struct PartialSidecar {
    writer: Mutex<BufWriter<File>>,
    dim: usize,
}

impl PartialSidecar {
    /// Open or create the sidecar, returning previously completed rows.
    /// A torn trailing row from an interrupted run is truncated away.
    fn open(
        path: &Path,
        dim: usize,
        fingerprint: &str,
    ) -> Result<(Self, DoneRows), EmbeddingError> {
        let mut done = HashMap::new();
        let mut good_offset = 0u64;
        if path.exists() {
            let mut r = BufReader::new(File::open(path)?);
            let mut magic = [0u8; 8];
            read_exact(&mut r, &mut magic, "partial magic")?;
            if &magic != PARTIAL_MAGIC {
                return Err(corrupt("partial file has bad magic bytes"));
            }
            let file_dim = read_u32(&mut r, "partial dim")? as usize;
            let file_fp = read_str(&mut r, "partial fingerprint")?;
            if file_dim != dim || file_fp != fingerprint {
                return Err(EmbeddingError::FingerprintMismatch {
                    index: format!("{file_fp} (dim {file_dim})"),
                    provider: format!("{fingerprint} (dim {dim})"),
                });
            }
            good_offset = r.stream_position()?;
            loop {
                match read_partial_row(&mut r, dim) {
                    Ok(Some((id, qv, rv))) => {
                        done.insert(id, (qv, rv));
                        good_offset = r.stream_position()?;
                    }
                    Ok(None) => break,
                    Err(_) => {
                        log::warn!("ignoring torn trailing row in {}", path.display());
                        break;
                    }
                }
            }
            let file = OpenOptions::new().write(true).open(path)?;
            file.set_len(good_offset)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if good_offset == 0 {
            file.write_all(PARTIAL_MAGIC)?;
            write_u32(&mut file, dim as u32)?;
            write_str(&mut file, fingerprint)?;
            file.flush()?;
        }
        Ok((Self { writer: Mutex::new(BufWriter::new(file)), dim }, done))
    }

    fn append_rows(&self, rows: &[IndexRow]) -> Result<(), EmbeddingError> {
        let mut w = self.writer.lock().expect("sidecar writer poisoned");
        for row in rows {
            write_str(&mut *w, &row.id)?;
            for vec in [&row.query_vec, &row.rationale_vec] {
                debug_assert_eq!(vec.dim(), self.dim);
                for v in vec.values() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn read_partial_row<R: Read>(
    r: &mut R,
    dim: usize,
) -> Result<Option<(String, EmbeddingVector, EmbeddingVector)>, EmbeddingError> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(EmbeddingError::Io(e)),
    }
    let len = u32::from_le_bytes(len_buf);
    if len > MAX_STRING_LEN {
        return Err(corrupt("partial row id length is implausible"));
    }
    let mut id_buf = vec![0u8; len as usize];
    read_exact(r, &mut id_buf, "partial row id")?;
    let id = String::from_utf8(id_buf).map_err(|_| corrupt("partial row id is not UTF-8"))?;
    let mut read_vec = || -> Result<EmbeddingVector, EmbeddingError> {
        let mut buf = vec![0u8; dim * 8];
        read_exact(r, &mut buf, "partial row vector")?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        EmbeddingVector::from_unit_values(values).map_err(|e| corrupt(e.to_string()))
    };
    let qv = read_vec()?;
    let rv = read_vec()?;
    Ok(Some((id, qv, rv)))
}

fn embed_entries(
    provider: &dyn EmbeddingProvider,
    entries: &[&CorpusEntry],
) -> Result<Vec<IndexRow>, EmbeddingError> {
    let texts: Vec<String> = entries
        .iter()
        .flat_map(|e| [render_query_text(&e.question, &e.options), e.rationale.clone()])
        .collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let raw = provider.embed_batch(&refs)?;
    if raw.len() != texts.len() {
        return Err(EmbeddingError::InvalidVector(format!(
            "provider returned {} vectors for {} texts",
            raw.len(),
            texts.len()
        )));
    }
    let mut rows = Vec::with_capacity(entries.len());
    for (entry, pair) in entries.iter().zip(raw.chunks_exact(2)) {
        for v in pair {
            if v.len() != provider.dim() {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: provider.dim(),
                    got: v.len(),
                });
            }
        }
        rows.push(IndexRow {
            id: entry.id.clone(),
            query_vec: EmbeddingVector::from_raw(&pair[0])?,
            rationale_vec: EmbeddingVector::from_raw(&pair[1])?,
        });
    }
    Ok(rows)
}

/// Embed every corpus entry's query text and rationale into a fresh
/// index. When [`BuildOptions::partial_path`] is set, finished rows
/// stream to the sidecar and a rerun embeds only what is missing. Rows
/// end up in corpus order regardless of completion order.
pub fn build_index(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    options: &BuildOptions,
) -> Result<(EmbeddingIndex, BuildStats), EmbeddingError> {
    let dim = provider.dim();
    let fingerprint = provider.fingerprint();
    let (sidecar, mut done) = match &options.partial_path {
        Some(path) => {
            let (sidecar, done) = PartialSidecar::open(path, dim, &fingerprint)?;
            (Some(sidecar), done)
        }
        None => (None, HashMap::new()),
    };
    for id in done.keys() {
        if corpus.get(id).is_none() {
            return Err(corrupt(format!(
                "partial file contains id {id:?} that is not in the corpus"
            )));
        }
    }

    let pending: Vec<&CorpusEntry> =
        corpus.entries().iter().filter(|e| !done.contains_key(&e.id)).collect();
    let resumed = corpus.len() - pending.len();
    let embedded = pending.len();

    let batch = options.batch_entries.max(1);
    let chunks: Vec<&[&CorpusEntry]> = pending.chunks(batch).collect();
    let fresh: Mutex<Vec<IndexRow>> = Mutex::new(Vec::with_capacity(pending.len()));
    let process = |chunk: &&[&CorpusEntry]| -> Result<(), EmbeddingError> {
        let rows = embed_entries(provider, chunk)?;
        if let Some(sidecar) = &sidecar {
            sidecar.append_rows(&rows)?;
        }
        fresh.lock().expect("row sink poisoned").extend(rows);
        Ok(())
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        chunks.par_iter().try_for_each(process)?;
    }
    #[cfg(not(feature = "parallel"))]
    {
        chunks.iter().try_for_each(process)?;
    }

    for row in fresh.into_inner().expect("row sink poisoned") {
        done.insert(row.id.clone(), (row.query_vec, row.rationale_vec));
    }

    let mut index = EmbeddingIndex::new(dim, fingerprint);
    for entry in corpus.entries() {
        let (query_vec, rationale_vec) = done
            .remove(&entry.id)
            .expect("every corpus entry was embedded or resumed");
        index.push_row(IndexRow { id: entry.id.clone(), query_vec, rationale_vec })?;
    }
    Ok((index, BuildStats { embedded, resumed }))
}
