use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::PAD_ID;
use crate::encoders::{ImageInput, TextInput};
use crate::error::{Error, Result};

/// One batch: sample indices plus text padded to the batch max length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub texts: Vec<&'a TextInput>,
    pub images: Vec<&'a ImageInput>,
    pub labels: Vec<usize>,
    pub ids: Vec<Vec<u32>>,
    /// true at pad slots.
    pub padding: Vec<Vec<bool>>,
}

impl<'a> Batch<'a> {
    pub fn collate(
        texts: &'a [TextInput],
        images: &'a [ImageInput],
        labels: &[usize],
        indices: Vec<usize>,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let max_len = indices.iter().map(|&i| texts[i].len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(indices.len());
        let mut padding = Vec::with_capacity(indices.len());
        for &i in &indices {
            let mut row = texts[i].token_ids().to_vec();
            let mut pad = vec![false; row.len()];
            row.resize(max_len, PAD_ID);
            pad.resize(max_len, true);
            ids.push(row);
            padding.push(pad);
        }
        Ok(Self {
            texts: indices.iter().map(|&i| &texts[i]).collect(),
            images: indices.iter().map(|&i| &images[i]).collect(),
            labels: indices.iter().map(|&i| labels[i]).collect(),
            indices,
            ids,
            padding,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Index order for one epoch, chunked into batches; the last may be partial.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Degenerate("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Endless batch stream over epochs; epoch `e` is shuffled with stream `e`.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    texts: &'a [TextInput],
    images: &'a [ImageInput],
    labels: &'a [usize],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    current: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIter<'a> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Skips ahead so the next batch is global batch number `k`.
    pub fn skip_batches(&mut self, k: usize) -> Result<()> {
        for _ in 0..k {
            self.next_indices()?;
        }
        Ok(())
    }

    fn next_indices(&mut self) -> Result<Vec<usize>> {
        loop {
            if let Some(b) = self.current.next() {
                return Ok(b);
            }
            self.epoch += 1;
            self.current =
                epoch_batches(self.texts.len(), self.batch_size, self.seed, self.epoch, self.shuffle)?.into_iter();
        }
    }

    pub fn next_batch(&mut self) -> Result<Batch<'a>> {
        let idx = self.next_indices()?;
        Batch::collate(self.texts, self.images, self.labels, idx)
    }

    /// The batches of the current epoch only, without wrapping.
    pub fn one_epoch(mut self) -> Result<Vec<Batch<'a>>> {
        let (texts, images, labels) = (self.texts, self.images, self.labels);
        self.current.by_ref().map(|idx| Batch::collate(texts, images, labels, idx)).collect()
    }
}

/// Batch stream beginning at epoch 0.
pub fn batch_iter<'a>(
    texts: &'a [TextInput],
    images: &'a [ImageInput],
    labels: &'a [usize],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<BatchIter<'a>> {
    if texts.len() != images.len() || texts.len() != labels.len() {
        return Err(Error::Contract("texts, images and labels differ in length".into()));
    }
    let current = epoch_batches(texts.len(), batch_size, seed, 0, shuffle)?.into_iter();
    Ok(BatchIter {
        texts,
        images,
        labels,
        batch_size,
        seed,
        shuffle,
        epoch: 0,
        current,
    })
}
