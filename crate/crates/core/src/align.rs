//! Minimal-edit-distance alignment between heterogeneous vocabularies.
//!
//! Two pieces: a sequence-level dynamic program that pairs up the tokens of
//! two tokenizations of the same text, and a vocabulary-level map that sends
//! every source token to its closest target token by edit distance so a
//! source distribution matrix can be re-expressed over the target vocabulary.
//! All comparisons are on raw bytes; ties always go to the lowest index.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{FuseError, Result};
use crate::numcore::{ProbMatrix, TokenSeq};

/// Bijective id ↔ string table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(FuseError::Alignment("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(FuseError::Alignment(format!("token {id} is empty")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(FuseError::Alignment(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Newline-delimited UTF-8; line `k` is the string of id `k`.
    pub fn from_lines(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::new(body.split('\n').map(str::to_owned).collect())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
        Self::from_lines(&text).map_err(|e| FuseError::format(path, e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn bytes(&self, id: usize) -> Result<&[u8]> {
        self.tokens
            .get(id)
            .map(String::as_bytes)
            .ok_or(FuseError::Vocabulary {
                id,
                vocab: self.len(),
            })
    }
}

/// Levenshtein distance over bytes with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    byte_edit_distance(a.as_bytes(), b.as_bytes())
}

fn byte_edit_distance(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Monotone token pairing between two tokenizations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAlignment {
    pub pairs: Vec<(usize, usize)>,
    pub cost: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Move {
    Pair,
    SkipSource,
    SkipTarget,
}

/// Minimum-cost monotone alignment. Pairing two tokens costs their edit
/// distance; leaving a token unpaired costs its byte length.
pub fn token_align_dp(
    src: &TokenSeq,
    src_vocab: &Vocab,
    tgt: &TokenSeq,
    tgt_vocab: &Vocab,
) -> Result<TokenAlignment> {
    let s: Vec<&[u8]> = src
        .ids()
        .iter()
        .map(|&id| src_vocab.bytes(id))
        .collect::<Result<_>>()?;
    let t: Vec<&[u8]> = tgt
        .ids()
        .iter()
        .map(|&id| tgt_vocab.bytes(id))
        .collect::<Result<_>>()?;
    let (n, m) = (s.len(), t.len());

    let mut cost = Array2::<usize>::zeros((n + 1, m + 1));
    let mut back = Array2::from_elem((n + 1, m + 1), Move::Pair);
    for i in 1..=n {
        cost[[i, 0]] = cost[[i - 1, 0]] + s[i - 1].len();
        back[[i, 0]] = Move::SkipSource;
    }
    for j in 1..=m {
        cost[[0, j]] = cost[[0, j - 1]] + t[j - 1].len();
        back[[0, j]] = Move::SkipTarget;
    }
    for i in 1..=n {
        for j in 1..=m {
            // candidates in tie-break priority order
            let options = [
                (cost[[i - 1, j - 1]] + byte_edit_distance(s[i - 1], t[j - 1]), Move::Pair),
                (cost[[i - 1, j]] + s[i - 1].len(), Move::SkipSource),
                (cost[[i, j - 1]] + t[j - 1].len(), Move::SkipTarget),
            ];
            let (best, mv) = options
                .into_iter()
                .reduce(|acc, o| if o.0 < acc.0 { o } else { acc })
                .expect("three options");
            cost[[i, j]] = best;
            back[[i, j]] = mv;
        }
    }

    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match back[[i, j]] {
            Move::Pair => {
                pairs.push((i - 1, j - 1));
                i -= 1;
                j -= 1;
            }
            Move::SkipSource => i -= 1,
            Move::SkipTarget => j -= 1,
        }
    }
    pairs.reverse();
    Ok(TokenAlignment {
        pairs,
        cost: cost[[n, m]],
    })
}

/// Total map from source ids to target ids with the distance of each pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    targets: Vec<usize>,
    distances: Vec<usize>,
}

impl AlignmentMap {
    pub fn new(targets: Vec<usize>, distances: Vec<usize>) -> Result<Self> {
        if targets.len() != distances.len() {
            return Err(FuseError::Alignment("targets and distances differ in length".into()));
        }
        Ok(Self { targets, distances })
    }

    pub fn source_len(&self) -> usize {
        self.targets.len()
    }

    pub fn target(&self, src_id: usize) -> Option<usize> {
        self.targets.get(src_id).copied()
    }

    pub fn distance(&self, src_id: usize) -> Option<usize> {
        self.distances.get(src_id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.targets
            .iter()
            .zip(&self.distances)
            .enumerate()
            .map(|(s, (&t, &d))| (s, t, d))
    }

    /// CSV with header `src_id,tgt_id,edit_distance`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| FuseError::format(path, e.to_string()))?;
        let wrap = |e: csv::Error| FuseError::format(path, e.to_string());
        w.write_record(["src_id", "tgt_id", "edit_distance"]).map_err(wrap)?;
        for (s, t, d) in self.entries() {
            w.serialize((s, t, d)).map_err(wrap)?;
        }
        w.flush().map_err(|e| FuseError::io(path, e))
    }
}

/// Maps each source token to the target token of minimal edit distance,
/// lowest target id on ties.
pub fn vocab_map_min_ed(src: &Vocab, tgt: &Vocab) -> Result<AlignmentMap> {
    let mut targets = Vec::with_capacity(src.len());
    let mut distances = Vec::with_capacity(src.len());
    for s in &src.tokens {
        if let Some(id) = tgt.id(s) {
            targets.push(id);
            distances.push(0);
            continue;
        }
        let (best_id, best_d) = tgt
            .tokens
            .iter()
            .enumerate()
            .map(|(id, t)| (id, edit_distance(s, t)))
            .reduce(|acc, c| if c.1 < acc.1 { c } else { acc })
            .ok_or_else(|| FuseError::Alignment("target vocabulary is empty".into()))?;
        targets.push(best_id);
        distances.push(best_d);
    }
    AlignmentMap::new(targets, distances)
}

/// Mass of each source column summed into its mapped target column, before
/// renormalization.
pub fn project_mass(src: &ProbMatrix, map: &AlignmentMap, tgt_vocab: usize) -> Result<Array2<f64>> {
    if map.source_len() != src.cols() {
        return Err(FuseError::Alignment(format!(
            "map covers {} source ids but matrix has {} columns",
            map.source_len(),
            src.cols()
        )));
    }
    if let Some((_, t, _)) = map.entries().find(|&(_, t, _)| t >= tgt_vocab) {
        return Err(FuseError::Alignment(format!(
            "target id {t} outside vocabulary of size {tgt_vocab}"
        )));
    }
    let mut out = Array2::zeros((src.rows(), tgt_vocab));
    for (n, row) in src.view().rows().into_iter().enumerate() {
        for (s, &mass) in row.iter().enumerate() {
            out[[n, map.targets[s]]] += mass;
        }
    }
    Ok(out)
}

/// Re-expresses a source distribution matrix over the target vocabulary.
pub fn project_distribution(
    src: &ProbMatrix,
    map: &AlignmentMap,
    tgt_vocab: usize,
) -> Result<ProbMatrix> {
    ProbMatrix::normalized(project_mass(src, map, tgt_vocab)?)
}
