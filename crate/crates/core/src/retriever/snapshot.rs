//! Binary index snapshot.
//!
//! All integers are little-endian. Strings are a `u32` byte length followed
//! by UTF-8 bytes.
//!
//! ```text
//! magic    4 bytes  "BM25"
//! version  u32      1
//! then four sections, in this order, each framed as
//!   tag    4 bytes  "STAT" | "DOCS" | "DICT" | "POST"
//!   length u64      payload bytes
//!   payload
//!
//! STAT  k1 f64, b f64, stopwords u8, stemming u8, doc_count u64, total_len u64
//! DOCS  count u64, then per document: id str, title str, body str, token_len u32
//! DICT  count u64, then per term (ascending byte order): term str, df u32, first u64
//!       where `first` indexes the term's first entry in POST
//! POST  count u64, then per entry: doc u32 (position in DOCS), tf u32;
//!       entries are grouped by term in DICT order, doc ascending within a term
//! ```
//!
//! The layout is a pure function of the ingested records and parameters, so
//! rebuilding from the same corpus yields a byte-identical file.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Bm25Params, IndexError, Posting, SearchIndex, StoredDoc, TokenizerOptions};
use crate::Scalar;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"BM25";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(u32::try_from(s.len()).expect("string shorter than 4 GiB"));
        self.0.extend_from_slice(s.as_bytes());
    }
}

fn section<W: Write>(out: &mut W, tag: &[u8; 4], payload: &Buf) -> std::io::Result<()> {
    out.write_all(tag)?;
    out.write_all(&(payload.0.len() as u64).to_le_bytes())?;
    out.write_all(&payload.0)
}

pub fn write_snapshot<F: Scalar, W: Write>(index: &SearchIndex<F>, mut out: W) -> Result<(), IndexError> {
    out.write_all(&SNAPSHOT_MAGIC)?;
    out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;

    let mut stat = Buf::default();
    stat.f64(index.params().k1.as_f64());
    stat.f64(index.params().b.as_f64());
    stat.u8(u8::from(index.tokenizer().stopwords));
    stat.u8(u8::from(index.tokenizer().stemming));
    stat.u64(index.doc_count() as u64);
    stat.u64(index.total_length());
    section(&mut out, b"STAT", &stat)?;

    let mut docs = Buf::default();
    docs.u64(index.stored_docs().len() as u64);
    for d in index.stored_docs() {
        docs.str(&d.id);
        docs.str(&d.title);
        docs.str(&d.body);
        docs.u32(d.len);
    }
    section(&mut out, b"DOCS", &docs)?;

    let mut dict = Buf::default();
    let mut post = Buf::default();
    let postings = index.all_postings();
    dict.u64(postings.len() as u64);
    post.u64(postings.values().map(|p| p.len() as u64).sum());
    let mut first = 0u64;
    for (term, list) in postings {
        dict.str(term);
        dict.u32(list.len() as u32);
        dict.u64(first);
        first += list.len() as u64;
        for p in list {
            post.u32(p.doc);
            post.u32(p.tf);
        }
    }
    section(&mut out, b"DICT", &dict)?;
    section(&mut out, b"POST", &post)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.data.len() - self.pos < n {
            return Err(IndexError::Snapshot(format!("truncated {} section", self.what)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| IndexError::Snapshot(format!("invalid UTF-8 in {} section", self.what)))
    }
    fn finish(&self) -> Result<(), IndexError> {
        if self.pos != self.data.len() {
            return Err(IndexError::Snapshot(format!("trailing bytes in {} section", self.what)));
        }
        Ok(())
    }
}

fn read_section<'a>(
    data: &'a [u8],
    pos: &mut usize,
    tag: &[u8; 4],
    what: &'static str,
) -> Result<Cursor<'a>, IndexError> {
    if data.len() < *pos + 12 {
        return Err(IndexError::Snapshot(format!("missing {what} section")));
    }
    if &data[*pos..*pos + 4] != tag {
        return Err(IndexError::Snapshot(format!("expected {what} section")));
    }
    let len = u64::from_le_bytes(data[*pos + 4..*pos + 12].try_into().unwrap()) as usize;
    let start = *pos + 12;
    if data.len() - start < len {
        return Err(IndexError::Snapshot(format!("truncated {what} section")));
    }
    *pos = start + len;
    Ok(Cursor {
        data: &data[start..start + len],
        pos: 0,
        what,
    })
}

pub fn read_snapshot<F: Scalar, R: Read>(mut input: R) -> Result<SearchIndex<F>, IndexError> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    if data.len() < 8 || data[..4] != SNAPSHOT_MAGIC {
        return Err(IndexError::Snapshot("bad magic".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(IndexError::Snapshot(format!("unsupported version {version}")));
    }
    let mut pos = 8;

    let mut stat = read_section(&data, &mut pos, b"STAT", "STAT")?;
    let params = Bm25Params {
        k1: F::lit(stat.f64()?),
        b: F::lit(stat.f64()?),
    };
    let tokenizer = TokenizerOptions {
        stopwords: stat.u8()? != 0,
        stemming: stat.u8()? != 0,
    };
    let doc_count = stat.u64()? as usize;
    let total_len = stat.u64()?;
    stat.finish()?;

    let mut docs_c = read_section(&data, &mut pos, b"DOCS", "DOCS")?;
    let n = docs_c.u64()? as usize;
    if n != doc_count || n == 0 {
        return Err(IndexError::Snapshot("document count mismatch".into()));
    }
    let mut docs = Vec::with_capacity(n);
    for _ in 0..n {
        docs.push(StoredDoc {
            id: docs_c.str()?,
            title: docs_c.str()?,
            body: docs_c.str()?,
            len: docs_c.u32()?,
        });
    }
    docs_c.finish()?;
    if docs.iter().map(|d| u64::from(d.len)).sum::<u64>() != total_len {
        return Err(IndexError::Snapshot("total length mismatch".into()));
    }

    let mut dict = read_section(&data, &mut pos, b"DICT", "DICT")?;
    let n_terms = dict.u64()? as usize;
    let mut terms = Vec::with_capacity(n_terms);
    for _ in 0..n_terms {
        terms.push((dict.str()?, dict.u32()? as usize, dict.u64()? as usize));
    }
    dict.finish()?;

    let mut post = read_section(&data, &mut pos, b"POST", "POST")?;
    let n_entries = post.u64()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let doc = post.u32()?;
        if doc as usize >= n {
            return Err(IndexError::Snapshot("posting references unknown document".into()));
        }
        entries.push(Posting { doc, tf: post.u32()? });
    }
    post.finish()?;
    if pos != data.len() {
        return Err(IndexError::Snapshot("trailing bytes after POST".into()));
    }

    let mut postings = BTreeMap::new();
    for (term, df, first) in terms {
        let list = entries
            .get(first..first + df)
            .ok_or_else(|| IndexError::Snapshot(format!("postings for {term:?} out of range")))?;
        postings.insert(term, list.to_vec());
    }
    let mut seen = std::collections::HashSet::new();
    for d in &docs {
        if !seen.insert(d.id.as_str()) {
            return Err(IndexError::DuplicateDocId(d.id.clone()));
        }
    }
    Ok(SearchIndex::assemble(params, tokenizer, docs, postings))
}
