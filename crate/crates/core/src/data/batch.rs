use crate::tensor::Rng;

use super::{TextExample, Vocab, CLS, PAD};

/// A split encoded to token ids, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSplit {
    pub ids: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

/// Padded batch of token ids. Every row starts with CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// Row-major `[batch × seq_len]`.
    pub ids: Vec<usize>,
    /// `true` at real tokens, `false` at padding.
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    /// Position of each row in the source split.
    pub indices: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.seq_len..(r + 1) * self.seq_len]
    }
}

impl EncodedSplit {
    pub fn encode(examples: &[TextExample], vocab: &Vocab, max_seq_len: usize) -> Self {
        EncodedSplit {
            ids: examples
                .iter()
                .map(|e| vocab.tokenize(&e.text_a, e.text_b.as_deref(), max_seq_len))
                .collect(),
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples (or all of them).
    pub fn head(&self, n: usize) -> EncodedSplit {
        let n = n.min(self.len());
        EncodedSplit {
            ids: self.ids[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Gathers `indices` into a batch padded to its longest row.
    pub fn batch(&self, indices: &[usize]) -> TokenBatch {
        let seq_len = indices
            .iter()
            .map(|&i| self.ids[i].len())
            .max()
            .unwrap_or(1)
            .max(1);
        let mut ids = Vec::with_capacity(indices.len() * seq_len);
        let mut mask = Vec::with_capacity(indices.len() * seq_len);
        for &i in indices {
            let row = &self.ids[i];
            debug_assert_eq!(row.first(), Some(&CLS));
            ids.extend_from_slice(row);
            mask.extend(std::iter::repeat_n(true, row.len()));
            ids.extend(std::iter::repeat_n(PAD, seq_len - row.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - row.len()));
        }
        TokenBatch {
            ids,
            mask,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
            batch_size: indices.len(),
            seq_len,
        }
    }

    /// Batches for one epoch. The order is a function of `(seed, epoch)` only.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: usize,
        drop_last: bool,
    ) -> Batches<'_> {
        let mut rng = Rng::new(seed).fork_index("shuffle", epoch as u64);
        Batches {
            split: self,
            order: batch_order(self.len(), batch_size, Some(&mut rng), drop_last).into_iter(),
        }
    }

    /// Consecutive, unshuffled batches covering every example.
    pub fn sequential(&self, batch_size: usize) -> Batches<'_> {
        Batches {
            split: self,
            order: batch_order(self.len(), batch_size, None, false).into_iter(),
        }
    }
}

/// Index lists of each batch, shuffled when `rng` is given. With `drop_last`
/// a trailing partial batch is discarded; if `batch_size > n` nothing is
/// returned and a warning is logged.
pub fn batch_order(
    n: usize,
    batch_size: usize,
    rng: Option<&mut Rng>,
    drop_last: bool,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        rng.shuffle(&mut idx);
    }
    if drop_last && batch_size > n {
        log::warn!("batch size {batch_size} exceeds split size {n}; no full batch can be formed");
    }
    idx.chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

pub struct Batches<'a> {
    split: &'a EncodedSplit,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        self.order.next().map(|ix| self.split.batch(&ix))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}
