//! Loading, saving and querying dense word vector spaces.
//!
//! Two text formats are understood: word2vec text (a `<count> <dim>` header
//! followed by one `<word> <floats...>` line per word) and GloVe text (the
//! same body without a header).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// Tolerance on row norms for a space flagged as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VectorFormat {
    #[default]
    Auto,
    Word2VecText,
    GloveText,
}

impl std::str::FromStr for VectorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(VectorFormat::Auto),
            "word2vec" | "word2vec_text" | "w2v" => Ok(VectorFormat::Word2VecText),
            "glove" | "glove_text" => Ok(VectorFormat::GloveText),
            other => Err(Error::InvalidArgument(format!("unknown vector format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub format: VectorFormat,
    /// Stop after this many distinct words.
    pub max_words: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoadReport {
    pub format: VectorFormat,
    pub lines: usize,
    pub words: usize,
    pub duplicates: usize,
    pub dim: usize,
}

/// Vocabulary-indexed matrix of word vectors. Immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingSpace {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Matrix,
    normalized: bool,
}

impl PartialEq for EmbeddingSpace {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.vectors == other.vectors
            && self.normalized == other.normalized
    }
}

impl EmbeddingSpace {
    /// Builds a space; words must be unique and the matrix must have one row
    /// per word.
    pub fn new(vocab: Vec<String>, vectors: Matrix) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Empty("embedding space without words".into()));
        }
        if vectors.rows() != vocab.len() {
            return Err(Error::Shape(format!(
                "{} words but {} vector rows",
                vocab.len(),
                vectors.rows()
            )));
        }
        if vectors.cols() == 0 {
            return Err(Error::Empty("vectors have dimension 0".into()));
        }
        if vectors.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vectors".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate word {w:?}")));
            }
        }
        Ok(EmbeddingSpace {
            vocab,
            index,
            vectors,
            normalized: false,
        })
    }

    pub fn from_pairs<S: Into<String>>(pairs: Vec<(S, Vec<f64>)>) -> Result<Self> {
        let mut vocab = Vec::with_capacity(pairs.len());
        let mut rows = Vec::with_capacity(pairs.len());
        for (w, v) in pairs {
            vocab.push(w.into());
            rows.push(v);
        }
        EmbeddingSpace::new(vocab, Matrix::from_rows(&rows)?)
    }

    /// Same vocabulary, new coordinates. The normalized flag is dropped.
    pub fn with_vectors(&self, vectors: Matrix) -> Result<Self> {
        if vectors.rows() != self.len() {
            return Err(Error::Shape(format!(
                "replacement has {} rows, space has {} words",
                vectors.rows(),
                self.len()
            )));
        }
        if vectors.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transformed vectors".into()));
        }
        Ok(EmbeddingSpace {
            vocab: self.vocab.clone(),
            index: self.index.clone(),
            vectors,
            normalized: false,
        })
    }

    /// Applies `f` to every row independently; output row order follows the
    /// vocabulary.
    pub fn map_rows<F>(&self, out_dim: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let mut out = Matrix::zeros(self.len(), out_dim);
        let src = self.vectors.data();
        let d = self.dim();
        out.data_mut()
            .par_chunks_mut(out_dim.max(1))
            .zip(src.par_chunks(d))
            .for_each(|(dst, row)| f(row, dst));
        self.with_vectors(out)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Exact lookup, optionally retrying with the lowercased word.
    pub fn resolve(&self, word: &str, lowercase_fallback: bool) -> Option<usize> {
        self.index_of(word).or_else(|| {
            if lowercase_fallback {
                self.index_of(&word.to_lowercase())
            } else {
                None
            }
        })
    }

    pub fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.index_of(word).map(|i| self.vectors.row(i))
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn word(&self, i: usize) -> &str {
        &self.vocab[i]
    }

    /// Scales every row to unit length.
    pub fn normalize(&self) -> Result<Self> {
        let d = self.dim();
        let mut data = self.vectors.data().to_vec();
        for (i, row) in data.chunks_exact_mut(d).enumerate() {
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm(self.vocab[i].clone()));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let mut out = self.with_vectors(Matrix::new(self.len(), d, data)?)?;
        out.normalized = true;
        Ok(out)
    }

    /// Checks the unit-norm invariant against the actual rows.
    pub fn rows_are_unit(&self) -> bool {
        self.vectors
            .row_iter()
            .all(|r| (norm(r) - 1.0).abs() <= UNIT_NORM_TOLERANCE)
    }

    /// Top-`k` cosine neighbours of `word`, excluding the word itself, sorted
    /// by similarity descending and vocabulary index ascending on ties.
    /// `None` when the word is not in the vocabulary.
    pub fn neighbors(&self, word: &str, k: usize) -> Option<Vec<(String, f64)>> {
        let qi = self.index_of(word)?;
        Some(
            self.neighbors_of_index(qi, k)
                .into_iter()
                .map(|(i, c)| (self.vocab[i].clone(), c))
                .collect(),
        )
    }

    pub fn neighbors_of_index(&self, qi: usize, k: usize) -> Vec<(usize, f64)> {
        let q = self.vectors.row(qi);
        let qn = norm(q);
        if k == 0 || qn == 0.0 {
            return Vec::new();
        }
        let d = self.dim();
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .data()
            .par_chunks(d)
            .enumerate()
            .filter_map(|(i, row)| {
                if i == qi {
                    return None;
                }
                let n = norm(row);
                (n > 0.0).then(|| (i, dot(q, row) / (qn * n)))
            })
            .collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        scored
    }

    pub fn load(path: impl AsRef<Path>, options: &LoadOptions) -> Result<(Self, LoadReport)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (space, report) = Self::read(BufReader::new(file), options)
            .map_err(|e| match e {
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })?;
        info!(
            "loaded {}: {} lines, {} words, {} duplicates, dim {}",
            path.display(),
            report.lines,
            report.words,
            report.duplicates,
            report.dim
        );
        Ok((space, report))
    }

    pub fn read<R: BufRead>(reader: R, options: &LoadOptions) -> Result<(Self, LoadReport)> {
        let mut lines = reader.lines().enumerate();
        let mut report = LoadReport {
            format: options.format,
            lines: 0,
            words: 0,
            duplicates: 0,
            dim: 0,
        };

        let mut first: Option<(usize, String)> = None;
        for (no, line) in lines.by_ref() {
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            report.lines += 1;
            if !line.trim().is_empty() {
                first = Some((no + 1, line));
                break;
            }
        }
        let Some((first_no, first_line)) = first else {
            return Err(Error::Empty("vector file has no content".into()));
        };

        let header = parse_header(&first_line);
        let format = match options.format {
            VectorFormat::Auto if header.is_some() => VectorFormat::Word2VecText,
            VectorFormat::Auto => VectorFormat::GloveText,
            f => f,
        };
        report.format = format;

        let mut vocab = Vec::new();
        let mut data = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut expected_count = None;
        let mut dim;
        let mut pending_first = None;

        match format {
            VectorFormat::Word2VecText => {
                let (count, d) = header.ok_or_else(|| Error::Parse {
                    line: first_no,
                    message: "expected a '<count> <dim>' header".into(),
                })?;
                if d == 0 {
                    return Err(Error::Parse {
                        line: first_no,
                        message: "dimension 0 in header".into(),
                    });
                }
                dim = d;
                expected_count = Some(count);
            }
            _ => {
                let tokens = first_line.split_ascii_whitespace().count();
                if tokens < 2 {
                    return Err(Error::Parse {
                        line: first_no,
                        message: "line has no vector components".into(),
                    });
                }
                dim = tokens - 1;
                pending_first = Some((first_no, first_line));
            }
        }
        report.dim = dim;

        let limit = options.max_words.unwrap_or(usize::MAX);
        let mut body_lines = 0usize;
        let mut handle = |no: usize, line: &str, dim: &mut usize| -> Result<bool> {
            if line.trim().is_empty() {
                return Ok(true);
            }
            body_lines += 1;
            let mut toks = line.split_ascii_whitespace();
            let word = toks.next().expect("non-empty line");
            let start = data.len();
            for t in toks {
                let v: f64 = t.parse().map_err(|_| Error::Parse {
                    line: no,
                    message: format!("cannot parse {t:?} as a number"),
                })?;
                if !v.is_finite() {
                    data.truncate(start);
                    return Err(Error::NonFinite(format!("line {no}, word {word:?}")));
                }
                data.push(v);
            }
            let found = data.len() - start;
            if found != *dim {
                return Err(Error::Parse {
                    line: no,
                    message: format!("expected {} components, found {found}", *dim),
                });
            }
            if index.contains_key(word) {
                data.truncate(start);
                report.duplicates += 1;
                return Ok(true);
            }
            index.insert(word.to_string(), vocab.len());
            vocab.push(word.to_string());
            Ok(vocab.len() < limit)
        };

        let mut truncated = false;
        if let Some((no, line)) = pending_first {
            truncated = !handle(no, &line, &mut dim)?;
        }
        if !truncated {
            for (no, line) in lines.by_ref() {
                let line = line.map_err(|e| Error::io("<reader>", e))?;
                report.lines += 1;
                if !handle(no + 1, &line, &mut dim)? {
                    truncated = true;
                    break;
                }
            }
        }

        if let (Some(count), false) = (expected_count, truncated) {
            if count != body_lines {
                return Err(Error::Parse {
                    line: first_no,
                    message: format!("header announces {count} words, body has {body_lines}"),
                });
            }
        }
        if vocab.is_empty() {
            return Err(Error::Empty("vector file has no word lines".into()));
        }
        if report.duplicates > 0 {
            warn!("{} duplicate words ignored (first occurrence kept)", report.duplicates);
        }
        report.words = vocab.len();
        let vectors = Matrix::new(vocab.len(), dim, data)?;
        let space = EmbeddingSpace {
            vocab,
            index,
            vectors,
            normalized: false,
        };
        Ok((space, report))
    }

    /// Writes the space in a text format. Floats use the shortest decimal
    /// form that parses back to the identical `f64`.
    pub fn write<W: Write>(&self, mut w: W, format: VectorFormat) -> std::io::Result<()> {
        if format != VectorFormat::GloveText {
            writeln!(w, "{} {}", self.len(), self.dim())?;
        }
        for (i, word) in self.vocab.iter().enumerate() {
            w.write_all(word.as_bytes())?;
            for v in self.vectors.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>, format: VectorFormat) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(file), format)
            .map_err(|e| Error::io(path, e))
    }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut toks = line.split_ascii_whitespace();
    let a = toks.next()?.parse().ok()?;
    let b = toks.next()?.parse().ok()?;
    toks.next().is_none().then_some((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_str(s: &str, format: VectorFormat) -> Result<(EmbeddingSpace, LoadReport)> {
        EmbeddingSpace::read(
            s.as_bytes(),
            &LoadOptions {
                format,
                max_words: None,
            },
        )
    }

    #[test]
    fn glove_three_lines() {
        let (s, r) = read_str("a 1 2\nb 3 4\nc 5 6\n", VectorFormat::Auto).unwrap();
        assert_eq!((s.len(), s.dim()), (3, 2));
        assert_eq!(r.format, VectorFormat::GloveText);
        assert_eq!(s.lookup("b"), Some(&[3.0, 4.0][..]));
    }

    #[test]
    fn word2vec_header() {
        let (s, r) = read_str("2 4\nx 1 2 3 4\ny 0 0 0 1\n", VectorFormat::Auto).unwrap();
        assert_eq!((s.len(), s.dim()), (2, 4));
        assert_eq!(r.format, VectorFormat::Word2VecText);
        assert!(matches!(
            read_str("3 4\nx 1 2 3 4\ny 0 0 0 1\n", VectorFormat::Auto),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(read_str("", VectorFormat::Auto), Err(Error::Empty(_))));
        assert!(matches!(read_str("a 1 2\nb 1\n", VectorFormat::Auto), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_str("a 1 x\n", VectorFormat::Auto), Err(Error::Parse { .. })));
        assert!(matches!(read_str("1 0\n", VectorFormat::Auto), Err(Error::Parse { .. })));
        assert!(matches!(read_str("a nan 1\n", VectorFormat::Auto), Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicates_keep_first() {
        let (s, r) = read_str("a 1 2\na 3 4\nb 5 6\n", VectorFormat::GloveText).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(r.duplicates, 1);
        assert_eq!(s.lookup("a"), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn max_words_truncates() {
        let (s, _) = EmbeddingSpace::read(
            "3 1\na 1\nb 2\nc 3\n".as_bytes(),
            &LoadOptions {
                format: VectorFormat::Auto,
                max_words: Some(2),
            },
        )
        .unwrap();
        assert_eq!(s.vocab(), &["a", "b"]);
    }

    #[test]
    fn normalize_rows() {
        let s = EmbeddingSpace::from_pairs(vec![("a", vec![3.0, 4.0]), ("b", vec![0.0, 1.0])]).unwrap();
        let n = s.normalize().unwrap();
        assert!(n.is_normalized() && n.rows_are_unit());
        assert_eq!(n.lookup("a").unwrap(), &[0.6, 0.8]);
        let again = n.normalize().unwrap();
        assert!(again.vectors().max_abs_diff(n.vectors()) < 1e-12);

        let z = EmbeddingSpace::from_pairs(vec![("zero", vec![0.0, 0.0])]).unwrap();
        assert!(matches!(z.normalize(), Err(Error::ZeroNorm(w)) if w == "zero"));
    }

    #[test]
    fn neighbors_basic() {
        let s = EmbeddingSpace::from_pairs(vec![("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]).unwrap();
        let nn = s.neighbors("x", 1).unwrap();
        assert_eq!(nn, vec![("y".to_string(), 0.0)]);
        assert!(s.neighbors("missing", 1).is_none());
    }

    #[test]
    fn neighbors_match_exhaustive_sort() {
        let s = EmbeddingSpace::from_pairs(vec![
            ("a", vec![1.0, 0.2, 0.0]),
            ("b", vec![0.9, 0.1, 0.3]),
            ("c", vec![-1.0, 0.0, 0.5]),
            ("d", vec![0.5, 0.5, 0.5]),
            ("e", vec![1.0, 0.2, 0.0]),
        ])
        .unwrap();
        for q in s.vocab().to_vec() {
            let qv = s.lookup(&q).unwrap().to_vec();
            let mut oracle: Vec<(usize, f64)> = (0..s.len())
                .filter(|&i| s.word(i) != q)
                .map(|i| {
                    let v = s.vector(i);
                    let c = crate::numerics::cosine(&qv, v).unwrap();
                    (i, c)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got = s.neighbors_of_index(s.index_of(&q).unwrap(), 4);
            assert_eq!(got.len(), 4);
            for (g, o) in got.iter().zip(&oracle) {
                assert_eq!(g.0, o.0);
                assert!((g.1 - o.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lowercase_fallback() {
        let s = EmbeddingSpace::from_pairs(vec![("nasa", vec![1.0])]).unwrap();
        assert_eq!(s.resolve("NASA", false), None);
        assert_eq!(s.resolve("NASA", true), Some(0));
    }
}
