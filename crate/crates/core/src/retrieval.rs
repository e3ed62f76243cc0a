//! Exact Hamming-distance search over packed binary codes.

use rayon::prelude::*;

use crate::codes::{bytes_per_code, tail_mask, PackedCodeMatrix};
use crate::error::{Error, Result};

/// Number of differing bits between two packed `k`-bit codes.
pub fn hamming_distance(a: &[u8], b: &[u8], k: usize) -> Result<u32> {
    let stride = bytes_per_code(k);
    if a.len() != stride || b.len() != stride {
        return Err(Error::dim(format!(
            "codes of {} and {} bytes compared as {k}-bit codes ({stride} bytes)",
            a.len(),
            b.len()
        )));
    }
    Ok(popcount_xor(a, b))
}

fn popcount_xor(a: &[u8], b: &[u8]) -> u32 {
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    let mut d = 0;
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        d += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        d += (x ^ y).count_ones();
    }
    d
}

/// One search result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Hit {
    pub distance: u32,
    pub id: usize,
}

/// Immutable search index. Codes are re-laid out as little-endian `u64`
/// words so each distance is a handful of popcounts.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    codes: PackedCodeMatrix,
    words: Vec<u64>,
    words_per_code: usize,
}

fn to_words(code: &[u8], out: &mut Vec<u64>, words_per_code: usize) {
    for w in 0..words_per_code {
        let mut buf = [0u8; 8];
        let lo = w * 8;
        let hi = (lo + 8).min(code.len());
        buf[..hi - lo].copy_from_slice(&code[lo..hi]);
        out.push(u64::from_le_bytes(buf));
    }
}

impl RetrievalIndex {
    pub fn build(codes: PackedCodeMatrix) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::data("cannot index an empty code matrix"));
        }
        codes.validate()?;
        let words_per_code = codes.bits().div_ceil(64);
        let mut words = Vec::with_capacity(words_per_code * codes.len());
        for i in 0..codes.len() {
            to_words(codes.code(i), &mut words, words_per_code);
        }
        Ok(RetrievalIndex {
            codes,
            words,
            words_per_code,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.codes.bits()
    }

    pub fn codes(&self) -> &PackedCodeMatrix {
        &self.codes
    }

    fn query_words(&self, query: &[u8]) -> Result<Vec<u64>> {
        let stride = self.codes.stride();
        if query.len() != stride {
            return Err(Error::dim(format!(
                "query has {} bytes, index codes have {stride}",
                query.len()
            )));
        }
        if query[stride - 1] & !tail_mask(self.bits()) != 0 {
            return Err(Error::Integrity("query has non-zero padding bits".into()));
        }
        let mut q = Vec::with_capacity(self.words_per_code);
        to_words(query, &mut q, self.words_per_code);
        Ok(q)
    }

    /// Distance from `query` to every indexed code, in id order.
    pub fn distances(&self, query: &[u8]) -> Result<Vec<u32>> {
        let q = self.query_words(query)?;
        Ok(self
            .words
            .chunks_exact(self.words_per_code)
            .map(|c| c.iter().zip(&q).map(|(a, b)| (a ^ b).count_ones()).sum())
            .collect())
    }

    /// The `topk` nearest codes, by ascending distance then ascending id.
    pub fn search_topk(&self, query: &[u8], topk: usize) -> Result<Vec<Hit>> {
        if topk == 0 {
            return Err(Error::param("topk must be at least 1"));
        }
        let dist = self.distances(query)?;
        Ok(bucket_rank(&dist, self.bits(), topk.min(dist.len())))
    }

    /// Full ranking of the index for `query`.
    pub fn rank_all(&self, query: &[u8]) -> Result<Vec<Hit>> {
        self.search_topk(query, self.len())
    }

    /// Full rankings for every code of `queries`, computed in parallel.
    pub fn rank_batch(&self, queries: &PackedCodeMatrix) -> Result<Vec<Vec<Hit>>> {
        if queries.bits() != self.bits() {
            return Err(Error::dim(format!(
                "{}-bit queries against a {}-bit index",
                queries.bits(),
                self.bits()
            )));
        }
        (0..queries.len())
            .into_par_iter()
            .map(|i| self.rank_all(queries.code(i)))
            .collect()
    }
}

/// Counting sort over the `k + 1` possible distances. Within a bucket ids
/// stay ascending because the scan is in id order.
fn bucket_rank(dist: &[u32], k: usize, take: usize) -> Vec<Hit> {
    let mut start = vec![0usize; k + 2];
    for &d in dist {
        start[d as usize + 1] += 1;
    }
    for i in 1..start.len() {
        start[i] += start[i - 1];
    }
    let mut out = vec![Hit { distance: 0, id: 0 }; dist.len()];
    for (id, &d) in dist.iter().enumerate() {
        let slot = &mut start[d as usize];
        out[*slot] = Hit { distance: d, id };
        *slot += 1;
    }
    out.truncate(take);
    out
}
