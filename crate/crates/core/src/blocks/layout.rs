use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::numcore::Segments;

/// Row bookkeeping for a batch packed along the token axis: sample `b` owns a
/// contiguous run of token, image-context and text-context rows.
#[derive(Debug, Clone)]
pub struct Layout {
    pub batch: usize,
    pub token_lens: Vec<usize>,
    /// Owning sample of each token row.
    pub token_rows: Arc<[usize]>,
    pub img_offs: Arc<[usize]>,
    pub img_rows: Arc<[usize]>,
    pub txt_offs: Arc<[usize]>,
    pub self_segs: Arc<Segments>,
    pub img_segs: Arc<Segments>,
    pub txt_segs: Arc<Segments>,
}

fn offsets(lens: &[usize]) -> Arc<[usize]> {
    std::iter::once(0)
        .chain(lens.iter().scan(0, |a, &n| {
            *a += n;
            Some(*a)
        }))
        .collect()
}

fn owners(lens: &[usize]) -> Arc<[usize]> {
    lens.iter().enumerate().flat_map(|(b, &n)| std::iter::repeat_n(b, n)).collect()
}

impl Layout {
    pub fn new(token_lens: &[usize], img_lens: &[usize], txt_lens: &[usize]) -> Result<Self> {
        let b = token_lens.len();
        if img_lens.len() != b || txt_lens.len() != b {
            return Err(shape_err!("batch of {b} with {} image and {} text contexts", img_lens.len(), txt_lens.len()));
        }
        Ok(Self {
            batch: b,
            token_lens: token_lens.to_vec(),
            token_rows: owners(token_lens),
            img_offs: offsets(img_lens),
            img_rows: owners(img_lens),
            txt_offs: offsets(txt_lens),
            self_segs: Arc::new(Segments::from_lengths(token_lens, token_lens)?),
            img_segs: Arc::new(Segments::from_lengths(token_lens, img_lens)?),
            txt_segs: Arc::new(Segments::from_lengths(token_lens, txt_lens)?),
        })
    }

    /// `batch` samples of identical sizes.
    pub fn uniform(batch: usize, tokens: usize, img: usize, txt: usize) -> Result<Self> {
        Self::new(&vec![tokens; batch], &vec![img; batch], &vec![txt; batch])
    }

    pub fn total_tokens(&self) -> usize {
        self.token_rows.len()
    }
}
