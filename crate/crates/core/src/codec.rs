//! Dual transformation between unordered token multisets and fixed-sum count vectors.
//!
//! A multiset of `M` indices drawn from a codebook of size `C` is losslessly
//! represented by the length-`C` vector of multiplicities, whose entries sum to `M`.
//! Both types carry their own `(C, M)` so several configurations can coexist.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::kernels::RngStream;

/// Unordered collection of `M` token indices in `[0, C)`.
///
/// Tokens are kept sorted, so equality only depends on the multiplicity profile.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenMultiset {
    codebook_size: usize,
    tokens: Vec<u32>,
}

impl TokenMultiset {
    pub fn new(codebook_size: usize, mut tokens: Vec<u32>) -> Result<Self> {
        if codebook_size == 0 {
            return Err(Error::InvalidArgument("codebook size must be positive".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= codebook_size) {
            return Err(Error::Constraint(format!(
                "token {bad} outside codebook of size {codebook_size}"
            )));
        }
        tokens.sort_unstable();
        Ok(Self {
            codebook_size,
            tokens,
        })
    }

    /// Like [`TokenMultiset::new`] but also checks the cardinality against `m`.
    pub fn with_cardinality(codebook_size: usize, m: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != m {
            return Err(Error::Constraint(format!(
                "expected {m} tokens, found {}",
                tokens.len()
            )));
        }
        Self::new(codebook_size, tokens)
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Elements in ascending order.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// Length-`C` vector of non-negative counts summing to exactly `M`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CountVector {
    counts: Vec<u32>,
    total: u32,
}

impl CountVector {
    pub fn new(counts: Vec<u32>, total: u32) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("count vector must have C >= 1".into()));
        }
        if let Some((j, &c)) = counts.iter().enumerate().find(|(_, &c)| c > total) {
            return Err(Error::Constraint(format!(
                "count {c} at index {j} exceeds M = {total}"
            )));
        }
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if sum != total as u64 {
            return Err(Error::Constraint(format!(
                "counts sum to {sum}, expected M = {total}"
            )));
        }
        Ok(Self { counts, total })
    }

    /// Builds from signed entries, rejecting negatives.
    pub fn from_signed(counts: &[i64], total: u32) -> Result<Self> {
        let mut out = Vec::with_capacity(counts.len());
        for (j, &c) in counts.iter().enumerate() {
            if c < 0 {
                return Err(Error::Constraint(format!("negative count {c} at index {j}")));
            }
            let c = u32::try_from(c)
                .map_err(|_| Error::Constraint(format!("count {c} at index {j} too large")))?;
            out.push(c);
        }
        Self::new(out, total)
    }

    pub fn zeros_with_mass_at(c: usize, j: usize, total: u32) -> Result<Self> {
        let mut counts = vec![0; c];
        if j >= c {
            return Err(Error::InvalidArgument(format!("index {j} >= C = {c}")));
        }
        counts[j] = total;
        Self::new(counts, total)
    }

    pub fn codebook_size(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn into_counts(self) -> Vec<u32> {
        self.counts
    }
}

impl std::ops::Index<usize> for CountVector {
    type Output = u32;
    fn index(&self, j: usize) -> &u32 {
        &self.counts[j]
    }
}

/// Tallies the multiplicity of every codebook index.
pub fn set_to_counts(s: &TokenMultiset) -> CountVector {
    let mut counts = vec![0u32; s.codebook_size];
    for &t in &s.tokens {
        counts[t as usize] += 1;
    }
    CountVector {
        counts,
        total: s.tokens.len() as u32,
    }
}

/// Inverse of [`set_to_counts`]; emits elements in ascending index order.
pub fn counts_to_set(x: &CountVector) -> TokenMultiset {
    let mut tokens = Vec::with_capacity(x.total as usize);
    for (j, &c) in x.counts.iter().enumerate() {
        tokens.extend(std::iter::repeat_n(j as u32, c as usize));
    }
    TokenMultiset {
        codebook_size: x.counts.len(),
        tokens,
    }
}

/// Raw-entry variant of [`counts_to_set`] that validates first.
pub fn counts_to_set_checked(counts: &[i64], total: u32) -> Result<TokenMultiset> {
    CountVector::from_signed(counts, total).map(|x| counts_to_set(&x))
}

/// Tallies an ordered token sequence (any order) into counts.
pub fn sequence_to_counts(codebook_size: usize, tokens: &[u32]) -> Result<CountVector> {
    TokenMultiset::new(codebook_size, tokens.to_vec()).map(|s| set_to_counts(&s))
}

/// Deterministic shuffle of the multiset's elements.
pub fn random_permutation(s: &TokenMultiset, rng: &mut RngStream) -> Vec<u32> {
    let mut out = s.tokens.clone();
    out.shuffle(rng);
    out
}

// ---------------------------------------------------------------------------
// Text formats
//
// Header line `C=<int> M=<int>`, then one record per line: either M token
// indices or C counts, separated by single spaces.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub codebook_size: usize,
    pub total: u32,
}

impl Header {
    pub fn render(&self) -> String {
        format!("C={} M={}", self.codebook_size, self.total)
    }

    pub fn parse(line: &str, path: &str) -> Result<Self> {
        let mut c = None;
        let mut m = None;
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(path, 1, format!("malformed header field `{field}`")))?;
            let value: u64 = value
                .parse()
                .map_err(|_| Error::parse(path, 1, format!("non-integer header value `{field}`")))?;
            match key {
                "C" if c.is_none() => c = Some(value),
                "M" if m.is_none() => m = Some(value),
                _ => {
                    return Err(Error::parse(
                        path,
                        1,
                        format!("unexpected header field `{field}`"),
                    ))
                }
            }
        }
        match (c, m) {
            (Some(c), Some(m)) if c >= 1 && m <= u32::MAX as u64 => Ok(Header {
                codebook_size: c as usize,
                total: m as u32,
            }),
            (Some(0), _) => Err(Error::parse(path, 1, "header C must be positive")),
            _ => Err(Error::parse(
                path,
                1,
                "header must be `C=<int> M=<int>`",
            )),
        }
    }
}

fn parse_row(line: &str, path: &str, lineno: usize) -> Result<Vec<u32>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>()
                .map_err(|_| Error::parse(path, lineno, format!("invalid integer `{tok}`")))
        })
        .collect()
}

fn split_header<'a>(text: &'a str, path: &str) -> Result<(Header, impl Iterator<Item = (usize, &'a str)>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break Header::parse(l, path)?,
            None => return Err(Error::parse(path, 1, "missing header line")),
        }
    };
    Ok((header, lines))
}

fn non_blank<'a>(lines: impl Iterator<Item = (usize, &'a str)>) -> impl Iterator<Item = (usize, &'a str)> {
    lines.filter(|(_, l)| !l.trim().is_empty())
}

/// Parses the token-set format; each multiset keeps its 1-based line number.
///
/// With `M = 0` every line after the header is an (empty) multiset, blank or not.
pub fn parse_token_sets(text: &str, path: &str) -> Result<(Header, Vec<(usize, TokenMultiset)>)> {
    let (header, lines) = split_header(text, path)?;
    let lines: Vec<(usize, &str)> = if header.total == 0 {
        lines.collect()
    } else {
        non_blank(lines).collect()
    };
    let mut out = Vec::new();
    for (lineno, line) in lines {
        let row = parse_row(line, path, lineno)?;
        if row.len() != header.total as usize {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} tokens, found {}", header.total, row.len()),
            ));
        }
        if let Some(&bad) = row.iter().find(|&&t| t as usize >= header.codebook_size) {
            return Err(Error::parse(
                path,
                lineno,
                format!("token {bad} out of range for C = {}", header.codebook_size),
            ));
        }
        let set = TokenMultiset::new(header.codebook_size, row)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        out.push((lineno, set));
    }
    Ok((header, out))
}

/// Parses count rows checking only length and the `[0, M]` range; sums are not enforced.
pub fn parse_count_rows(text: &str, path: &str) -> Result<(Header, Vec<Vec<u32>>)> {
    let (header, lines) = split_header(text, path)?;
    let mut out = Vec::new();
    for (lineno, line) in non_blank(lines) {
        let row = parse_row(line, path, lineno)?;
        if row.len() != header.codebook_size {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} counts, found {}", header.codebook_size, row.len()),
            ));
        }
        if let Some(&bad) = row.iter().find(|&&c| c > header.total) {
            return Err(Error::parse(
                path,
                lineno,
                format!("count {bad} exceeds M = {}", header.total),
            ));
        }
        out.push(row);
    }
    Ok((header, out))
}

/// Parses the count-vector format, enforcing the fixed-sum constraint per line.
pub fn parse_count_vectors(text: &str, path: &str) -> Result<(Header, Vec<CountVector>)> {
    let (header, lines) = split_header(text, path)?;
    let mut out = Vec::new();
    for (lineno, line) in non_blank(lines) {
        let row = parse_row(line, path, lineno)?;
        if row.len() != header.codebook_size {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} counts, found {}", header.codebook_size, row.len()),
            ));
        }
        let x = CountVector::new(row, header.total)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        out.push(x);
    }
    Ok((header, out))
}

pub fn render_rows<'a>(header: Header, rows: impl IntoIterator<Item = &'a [u32]>) -> String {
    let mut s = header.render();
    s.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn render_count_vectors(header: Header, xs: &[CountVector]) -> String {
    render_rows(header, xs.iter().map(|x| x.counts()))
}

pub fn render_token_sets(header: Header, sets: &[TokenMultiset]) -> String {
    render_rows(header, sets.iter().map(|s| s.tokens()))
}

/// Reads a whole text file, attaching the path to I/O errors.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and rename so readers never observe partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = match path.file_name() {
        Some(name) => {
            let mut n = name.to_os_string();
            n.push(".tmp");
            path.with_file_name(n)
        }
        None => return Err(Error::io(path, std::io::Error::other("not a file path"))),
    };
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_token_file(path: &Path) -> Result<(Header, Vec<(usize, TokenMultiset)>)> {
    parse_token_sets(&read_text(path)?, &path.display().to_string())
}

pub fn read_count_file(path: &Path) -> Result<(Header, Vec<CountVector>)> {
    parse_count_vectors(&read_text(path)?, &path.display().to_string())
}

pub fn read_count_rows_file(path: &Path) -> Result<(Header, Vec<Vec<u32>>)> {
    parse_count_rows(&read_text(path)?, &path.display().to_string())
}
