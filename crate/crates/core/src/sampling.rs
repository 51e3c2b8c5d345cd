//! Uniform record sampling: pre-map (byte offsets into block files),
//! post-map (random hashing after a full read) and classic reservoir.
//!
//! Every sample is drawn without replacement over its whole lifetime. A
//! [`Sample`] grows by appending delta batches; batch `k` occupies a
//! contiguous range of `items`.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{logical_splits, read_line_at, BlockFile, Origin, Record, Split};
use crate::error::{EarlError, Result};
use crate::EarlRng;

/// Draw attempts allowed per requested record before pre-map sampling gives up.
pub const PREMAP_ATTEMPTS_PER_RECORD: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    PreMap,
    PostMap,
    Reservoir,
}

impl std::str::FromStr for SamplerMode {
    type Err = EarlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" | "premap" | "pre-map" => Ok(SamplerMode::PreMap),
            "post" | "postmap" | "post-map" => Ok(SamplerMode::PostMap),
            "reservoir" => Ok(SamplerMode::Reservoir),
            other => Err(EarlError::invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// 1-based batch number.
    pub index: usize,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct Sample {
    items: Vec<Record>,
    batches: Vec<Batch>,
    mode: SamplerMode,
    kv_count_estimate: f64,
    saturated: bool,
}

impl Sample {
    pub fn new(mode: SamplerMode) -> Self {
        Sample {
            items: Vec::new(),
            batches: Vec::new(),
            mode,
            kv_count_estimate: 0.0,
            saturated: false,
        }
    }

    /// A sample made of one batch per entry of `sizes`, taken from `records` in order.
    pub fn with_batches(records: Vec<Record>, sizes: &[usize], mode: SamplerMode) -> Result<Self> {
        if sizes.iter().sum::<usize>() != records.len() {
            return Err(EarlError::invalid("batch sizes must sum to the record count"));
        }
        let kv = records.len() as f64;
        let mut s = Sample::new(mode);
        s.kv_count_estimate = kv;
        let mut it = records.into_iter();
        for &size in sizes {
            s.push_batch(it.by_ref().take(size).collect());
        }
        Ok(s)
    }

    pub fn from_records(records: Vec<Record>, mode: SamplerMode) -> Self {
        let n = records.len();
        Sample::with_batches(records, &[n], mode).expect("single batch")
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Record] {
        &self.items
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn kv_count_estimate(&self) -> f64 {
        self.kv_count_estimate
    }

    pub fn set_kv_count_estimate(&mut self, kv: f64) {
        self.kv_count_estimate = kv;
    }

    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Item ranges of each batch, in batch order.
    pub fn batch_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.batches
            .iter()
            .map(|b| {
                let r = start..start + b.size;
                start += b.size;
                r
            })
            .collect()
    }

    /// Batch (0-based) holding sample position `pos`.
    pub fn batch_of(&self, pos: usize) -> usize {
        let mut end = 0;
        for (k, b) in self.batches.iter().enumerate() {
            end += b.size;
            if pos < end {
                return k;
            }
        }
        panic!("position {pos} outside sample of {}", self.items.len());
    }

    /// Appends a delta batch. Empty batches are ignored.
    pub fn push_batch(&mut self, records: Vec<Record>) {
        if records.is_empty() {
            return;
        }
        self.batches.push(Batch {
            index: self.batches.len() + 1,
            size: records.len(),
        });
        self.items.extend(records);
    }

    /// The first `n` items, regrouped into batches with the given cumulative sizes.
    pub fn prefix(&self, n: usize) -> Sample {
        let n = n.min(self.items.len());
        let mut s = Sample::from_records(self.items[..n].to_vec(), self.mode);
        s.kv_count_estimate = self.kv_count_estimate;
        s
    }

    /// True if no origin appears twice.
    pub fn origins_distinct(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.items.len());
        self.items.iter().all(|r| seen.insert(r.origin))
    }
}

/// Per-split set of line starts already in the sample.
#[derive(Debug, Clone, Default)]
pub struct InclusionBitmap {
    splits: Vec<HashSet<u64>>,
}

impl InclusionBitmap {
    pub fn new(split_count: usize) -> Self {
        InclusionBitmap {
            splits: vec![HashSet::new(); split_count],
        }
    }

    pub fn contains(&self, origin: &Origin) -> bool {
        self.splits
            .get(origin.split_id)
            .is_some_and(|s| s.contains(&origin.line_start))
    }

    /// Returns false if the line was already included.
    pub fn insert(&mut self, origin: Origin) -> bool {
        if origin.split_id >= self.splits.len() {
            self.splits.resize_with(origin.split_id + 1, HashSet::new);
        }
        self.splits[origin.split_id].insert(origin.line_start)
    }

    pub fn len(&self) -> usize {
        self.splits.iter().map(HashSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Something that can hand out records not yet in a sample.
pub trait RecordSource {
    /// Draws up to `want` fresh records. Fewer are returned only when the
    /// source is exhausted.
    fn draw_fresh(&mut self, want: usize, rng: &mut EarlRng) -> Result<Vec<Record>>;

    /// Estimated number of records in the dataset given the current sample.
    fn kv_count_estimate(&self, sample: &[Record]) -> f64;

    fn mode(&self) -> SamplerMode;
}

/// Pre-map sampling state: the block file plus the inclusion bitmap.
pub struct PreMapSource<'a> {
    bf: &'a BlockFile,
    splits: Vec<Split>,
    bitmap: &'a mut InclusionBitmap,
}

impl<'a> PreMapSource<'a> {
    pub fn new(bf: &'a BlockFile, bitmap: &'a mut InclusionBitmap) -> Self {
        PreMapSource {
            bf,
            splits: logical_splits(bf),
            bitmap,
        }
    }

    /// One draw: a uniformly random byte of the file resolved to a line.
    ///
    /// Choosing the split with probability proportional to its length and
    /// then a uniform offset inside it is the same as a uniform file offset.
    /// A position in the interior of the last line has no following line,
    /// so it wraps around to the first line of the file.
    fn draw_one(&self, rng: &mut EarlRng) -> Result<Record> {
        let pos = rng.random_range(0..self.bf.total_bytes());
        let split = &self.splits[self.bf.split_of(pos)];
        match read_line_at(self.bf, split, pos) {
            Err(EarlError::NoFollowingLine(_)) => self.bf.record_at_line_start(0),
            other => other,
        }
    }
}

impl RecordSource for PreMapSource<'_> {
    fn draw_fresh(&mut self, want: usize, rng: &mut EarlRng) -> Result<Vec<Record>> {
        let mut out = Vec::with_capacity(want);
        let budget = want.saturating_mul(PREMAP_ATTEMPTS_PER_RECORD);
        let mut attempts = 0;
        while out.len() < want && attempts < budget {
            attempts += 1;
            let rec = self.draw_one(rng)?;
            if self.bitmap.insert(rec.origin) {
                out.push(rec);
            }
        }
        Ok(out)
    }

    fn kv_count_estimate(&self, sample: &[Record]) -> f64 {
        let bytes: u64 = sample.iter().map(|r| u64::from(r.bytes)).sum();
        if bytes == 0 {
            return 0.0;
        }
        let mean_len = bytes as f64 / sample.len() as f64;
        self.bf.total_bytes() as f64 / mean_len
    }

    fn mode(&self) -> SamplerMode {
        SamplerMode::PreMap
    }
}

/// Draws `target_n` distinct lines by random byte offsets into the block file.
pub fn premap_sample(
    bf: &BlockFile,
    target_n: usize,
    bitmap: &mut InclusionBitmap,
    rng: &mut EarlRng,
) -> Result<Sample> {
    if target_n == 0 {
        return Err(EarlError::invalid("target_n must be at least 1"));
    }
    let mut source = PreMapSource::new(bf, bitmap);
    let drawn = source.draw_fresh(target_n, rng)?;
    if drawn.len() < target_n {
        return Err(EarlError::SampleExhausted {
            wanted: target_n,
            reached: drawn.len(),
        });
    }
    let mut s = Sample::new(SamplerMode::PreMap);
    s.kv_count_estimate = source.kv_count_estimate(&drawn);
    s.push_batch(drawn);
    Ok(s)
}

/// All records of a dataset under random hash keys. Records come out in key
/// order, which is a uniformly random permutation; a drawn record is removed.
#[derive(Debug, Clone)]
pub struct PostMapStore {
    // Sorted by descending key so draws pop from the back.
    entries: Vec<(u64, Record)>,
    total: usize,
}

impl PostMapStore {
    pub fn load(records: impl IntoIterator<Item = Record>, rng: &mut EarlRng) -> Self {
        let mut entries: Vec<(u64, Record)> =
            records.into_iter().map(|r| (rng.random::<u64>(), r)).collect();
        // Ties are broken by origin so the order is a function of the seed only.
        entries.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(b.1.origin.cmp(&a.1.origin)));
        let total = entries.len();
        PostMapStore { entries, total }
    }

    pub fn remaining(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

impl RecordSource for PostMapStore {
    fn draw_fresh(&mut self, want: usize, _rng: &mut EarlRng) -> Result<Vec<Record>> {
        let take = want.min(self.entries.len());
        let split_at = self.entries.len() - take;
        Ok(self.entries.drain(split_at..).rev().map(|(_, r)| r).collect())
    }

    fn kv_count_estimate(&self, _sample: &[Record]) -> f64 {
        self.total as f64
    }

    fn mode(&self) -> SamplerMode {
        SamplerMode::PostMap
    }
}

/// Reads the whole stream under random hashing, then draws `target_n`
/// records without replacement. The returned store keeps the undrawn rest.
pub fn postmap_sample(
    records: impl IntoIterator<Item = Record>,
    target_n: usize,
    rng: &mut EarlRng,
) -> Result<(Sample, PostMapStore)> {
    if target_n == 0 {
        return Err(EarlError::invalid("target_n must be at least 1"));
    }
    let mut store = PostMapStore::load(records, rng);
    if store.total < target_n {
        return Err(EarlError::FullDataMode {
            wanted: target_n,
            available: store.total,
        });
    }
    let drawn = store.draw_fresh(target_n, rng)?;
    let mut s = Sample::new(SamplerMode::PostMap);
    s.kv_count_estimate = store.total as f64;
    s.push_batch(drawn);
    Ok((s, store))
}

/// Single-pass reservoir sample (Algorithm R). Shorter streams are returned whole.
pub fn reservoir_sample(
    records: impl IntoIterator<Item = Record>,
    n: usize,
    rng: &mut EarlRng,
) -> Sample {
    let (mut reservoir, seen) = reservoir_pass(records, n, rng);
    // Slots of Algorithm R are not exchangeable; shuffle so prefixes are uniform.
    reservoir.shuffle(rng);
    let mut s = Sample::new(SamplerMode::Reservoir);
    s.kv_count_estimate = seen as f64;
    s.push_batch(reservoir);
    s
}

fn reservoir_pass(
    records: impl IntoIterator<Item = Record>,
    n: usize,
    rng: &mut EarlRng,
) -> (Vec<Record>, usize) {
    let mut reservoir = Vec::with_capacity(n);
    let mut seen = 0usize;
    for rec in records {
        seen += 1;
        if reservoir.len() < n {
            reservoir.push(rec);
        } else {
            let j = rng.random_range(0..seen);
            if j < n {
                reservoir[j] = rec;
            }
        }
    }
    (reservoir, seen)
}

/// Reservoir source that re-reads the full record list on every expansion.
pub struct ReservoirSource {
    records: Vec<Record>,
    included: HashSet<Origin>,
}

impl ReservoirSource {
    pub fn new(records: Vec<Record>, sample: &Sample) -> Self {
        ReservoirSource {
            records,
            included: sample.items().iter().map(|r| r.origin).collect(),
        }
    }
}

impl RecordSource for ReservoirSource {
    fn draw_fresh(&mut self, want: usize, rng: &mut EarlRng) -> Result<Vec<Record>> {
        let included = &self.included;
        let fresh = self
            .records
            .iter()
            .filter(|r| !included.contains(&r.origin))
            .cloned();
        let (drawn, _) = reservoir_pass(fresh, want, rng);
        self.included.extend(drawn.iter().map(|r| r.origin));
        Ok(drawn)
    }

    fn kv_count_estimate(&self, _sample: &[Record]) -> f64 {
        self.records.len() as f64
    }

    fn mode(&self) -> SamplerMode {
        SamplerMode::Reservoir
    }
}

/// Outcome of [`expand_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expansion {
    pub added: usize,
    pub saturated: bool,
}

/// Appends a batch of up to `delta_n` fresh records drawn from `source`.
pub fn expand_sample(
    s: &mut Sample,
    delta_n: usize,
    source: &mut impl RecordSource,
    rng: &mut EarlRng,
) -> Result<Expansion> {
    if delta_n == 0 {
        return Err(EarlError::invalid("delta_n must be at least 1"));
    }
    let drawn = source.draw_fresh(delta_n, rng)?;
    let added = drawn.len();
    s.push_batch(drawn);
    s.kv_count_estimate = source.kv_count_estimate(&s.items);
    if added < delta_n {
        s.saturated = true;
    }
    Ok(Expansion {
        added,
        saturated: s.saturated,
    })
}
