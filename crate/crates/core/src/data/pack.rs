use crate::error::{Error, Result};
use crate::model::ModelInput;

/// Corpus cut into fixed-length chunks in order; only the last chunk may be
/// padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedStream {
    pub context_length: usize,
    pub batch_size: usize,
    pub pad_id: u32,
    pub chunks: Vec<Vec<u32>>,
    /// Index of the first pad in each chunk (`context_length` when none).
    pub pad_start: Vec<usize>,
}

/// Concatenated token stream → chunks of `context_length`, tail padded with
/// `pad_id`, grouped into batches of `batch_size` chunks.
pub fn pack(tokens: &[u32], context_length: usize, batch_size: usize, pad_id: u32) -> Result<PackedStream> {
    if context_length < 2 {
        return Err(Error::Config(format!(
            "context_length must be at least 2 to form next-token targets, got {context_length}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if tokens.is_empty() {
        return Err(Error::Input("cannot pack an empty token stream".into()));
    }
    let mut chunks = Vec::with_capacity(tokens.len().div_ceil(context_length));
    let mut pad_start = Vec::with_capacity(chunks.capacity());
    for piece in tokens.chunks(context_length) {
        let mut c = piece.to_vec();
        pad_start.push(c.len());
        c.resize(context_length, pad_id);
        chunks.push(c);
    }
    Ok(PackedStream { context_length, batch_size, pad_id, chunks, pad_start })
}

impl PackedStream {
    pub fn num_batches(&self) -> usize {
        self.chunks.len().div_ceil(self.batch_size)
    }

    /// Number of real (non-pad) tokens.
    pub fn real_tokens(&self) -> usize {
        self.pad_start.iter().sum()
    }

    pub fn batch(&self, i: usize) -> Option<TokenBatch> {
        let lo = i * self.batch_size;
        if lo >= self.chunks.len() {
            return None;
        }
        let hi = (lo + self.batch_size).min(self.chunks.len());
        Some(TokenBatch {
            ids: self.chunks[lo..hi].concat(),
            rows: hi - lo,
            cols: self.context_length,
            pad_start: self.pad_start[lo..hi].to_vec(),
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = TokenBatch> + '_ {
        (0..self.num_batches()).filter_map(|i| self.batch(i))
    }
}

/// `[rows, cols]` token ids with the pad start of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
    pub pad_start: Vec<usize>,
}

/// Model input with next-token targets: position `t` predicts token `t + 1`
/// of the same chunk; targets that are padding are masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedBatch {
    pub input: ModelInput,
    pub targets: Vec<usize>,
    pub keep: Vec<bool>,
}

impl ShiftedBatch {
    pub fn real_targets(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<u32>], pad_id: u32) -> Result<Self> {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * cols);
        let mut pad_start = Vec::with_capacity(rows.len());
        for r in rows {
            pad_start.push(r.len());
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(pad_id, cols - r.len()));
        }
        Ok(Self { ids, rows: rows.len(), cols, pad_start })
    }

    pub fn shifted(&self) -> Result<ShiftedBatch> {
        if self.cols < 2 || self.rows == 0 {
            return Err(Error::Input("a batch needs rows of at least two tokens".into()));
        }
        let seq = self.cols - 1;
        let mut ids = Vec::with_capacity(self.rows * seq);
        let mut targets = Vec::with_capacity(self.rows * seq);
        let mut keep = Vec::with_capacity(self.rows * seq);
        let mut last = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.ids[r * self.cols..(r + 1) * self.cols];
            let ps = self.pad_start[r];
            ids.extend(row[..seq].iter().map(|&x| x as usize));
            targets.extend(row[1..].iter().map(|&x| x as usize));
            keep.extend((0..seq).map(|t| t + 1 < ps));
            // last position with a real target, so trailing pads never matter
            last.push(ps.saturating_sub(2).min(seq - 1));
        }
        Ok(ShiftedBatch { input: ModelInput { ids, batch: self.rows, seq, last }, targets, keep })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_arithmetic() {
        let toks: Vec<u32> = (0..2050).map(|i| (i % 250) as u32).collect();
        let p = pack(&toks, 1024, 16, 999).unwrap();
        assert_eq!(p.chunks.len(), 3);
        assert_eq!(p.pad_start, vec![1024, 1024, 2]);
        assert!(p.chunks[2][2..].iter().all(|&x| x == 999));
        assert_eq!(p.real_tokens(), 2050);
        let exact = pack(&toks[..1024], 1024, 16, 999).unwrap();
        assert_eq!(exact.chunks.len(), 1);
        assert_eq!(exact.pad_start, vec![1024]);
        assert!(matches!(pack(&toks, 1, 16, 0), Err(Error::Config(_))));
        assert!(pack(&[], 8, 1, 0).is_err());
    }

    #[test]
    fn shift_masks_pad_targets() {
        let b = TokenBatch::from_rows(&[vec![1, 2, 3, 4], vec![5, 6]], 0).unwrap();
        let s = b.shifted().unwrap();
        assert_eq!(s.input.ids, vec![1, 2, 3, 5, 6, 0]);
        assert_eq!(s.targets, vec![2, 3, 4, 6, 0, 0]);
        assert_eq!(s.keep, vec![true, true, true, true, false, false]);
        assert_eq!(s.input.last, vec![2, 0]);
        assert_eq!(s.real_targets(), 4);
    }

    #[test]
    fn batching_keeps_partial_tail() {
        let toks: Vec<u32> = (0..50).collect();
        let p = pack(&toks, 8, 4, 0).unwrap();
        assert_eq!(p.num_batches(), 2);
        let bs: Vec<TokenBatch> = p.batches().collect();
        assert_eq!(bs[0].rows, 4);
        assert_eq!(bs[1].rows, 3);
        assert_eq!(bs[1].pad_start, vec![8, 8, 2]);
    }
}
