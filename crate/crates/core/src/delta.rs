//! Growing bootstrap resamples together with the sample instead of
//! redrawing them.
//!
//! When the sample grows from `n` to `n'` positions, a resample of the old
//! sample keeps `k ~ Binomial(n', n/n')` slots on old positions: surplus
//! slots are deleted (multiplicity weighted), missing ones are drawn from
//! the old sample with replacement, and the remaining `n' - k` slots come
//! from the new batch.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bootstrap::Resample;
use crate::error::{EarlError, Result};
use crate::EarlRng;

/// Sample size from which the Gaussian size law may replace the binomial.
pub const GAUSSIAN_MIN_SIZE: usize = 10_000;
/// Distance, in standard deviations, that `[0, n']` must keep from the mean
/// before the Gaussian law is used.
pub const GAUSSIAN_MARGIN_SIGMAS: f64 = 5.0;
pub const DEFAULT_SKETCH_CONSTANT: f64 = 4.0;
pub const SPILL_MAGIC: &[u8; 8] = b"EARLSPL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    ExactBinomial,
    GaussianApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeModel {
    pub n: usize,
    pub n_prime: usize,
    pub mode: SizeMode,
}

impl SizeModel {
    /// Picks the Gaussian law only for large `n'` where `[0, n']` lies
    /// beyond the margin on both sides of the mean.
    pub fn new(n: usize, n_prime: usize) -> Result<Self> {
        let mut m = SizeModel::with_mode(n, n_prime, SizeMode::ExactBinomial)?;
        let sd = m.std_dev();
        let room = n.min(n_prime - n) as f64;
        if n_prime >= GAUSSIAN_MIN_SIZE && sd > 0.0 && room >= GAUSSIAN_MARGIN_SIGMAS * sd {
            m.mode = SizeMode::GaussianApprox;
        }
        Ok(m)
    }

    pub fn with_mode(n: usize, n_prime: usize, mode: SizeMode) -> Result<Self> {
        if n == 0 || n > n_prime {
            return Err(EarlError::invalid(format!("size model needs 1 <= n <= n', got {n} and {n_prime}")));
        }
        Ok(SizeModel { n, n_prime, mode })
    }

    pub fn success_probability(&self) -> f64 {
        self.n as f64 / self.n_prime as f64
    }

    pub fn std_dev(&self) -> f64 {
        (self.n as f64 * (1.0 - self.success_probability())).sqrt()
    }
}

/// Number of slots of the grown resample that fall on old positions.
pub fn sample_new_old_part_size(m: &SizeModel, rng: &mut EarlRng) -> usize {
    if m.n == m.n_prime {
        return m.n_prime;
    }
    match m.mode {
        SizeMode::ExactBinomial => Binomial::new(m.n_prime as u64, m.success_probability())
            .expect("probability in [0, 1]")
            .sample(rng) as usize,
        SizeMode::GaussianApprox => {
            let x = Normal::new(m.n as f64, m.std_dev())
                .expect("finite parameters")
                .sample(rng)
                .round();
            x.clamp(0.0, m.n_prime as f64) as usize
        }
    }
}

/// Position multiplicities removed from and added to a resample.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResampleDelta {
    pub removed: BTreeMap<usize, u32>,
    pub added: BTreeMap<usize, u32>,
    /// Items of the stored resample read or written by the update.
    pub touches: u64,
}

impl ResampleDelta {
    fn remove(&mut self, pos: usize) {
        *self.removed.entry(pos).or_insert(0) += 1;
    }

    fn add(&mut self, pos: usize) {
        *self.added.entry(pos).or_insert(0) += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.added.is_empty()
    }

    /// Net change, with removals and additions of the same position cancelled.
    pub fn net(&self) -> (BTreeMap<usize, u32>, BTreeMap<usize, u32>) {
        let mut removed = BTreeMap::new();
        let mut added = self.added.clone();
        for (&p, &r) in &self.removed {
            match added.get_mut(&p) {
                Some(a) if *a > r => *a -= r,
                Some(a) => {
                    let left = r - *a;
                    added.remove(&p);
                    if left > 0 {
                        removed.insert(p, left);
                    }
                }
                None => {
                    removed.insert(p, r);
                }
            }
        }
        (removed, added)
    }
}

/// Grows `b` by a batch of `delta_len` new positions.
pub fn update_resample_naive(b: &mut Resample, delta_len: usize, rng: &mut EarlRng) -> Result<ResampleDelta> {
    let mut delta = ResampleDelta::default();
    if delta_len == 0 {
        return Ok(delta);
    }
    let n = b.positions();
    let n_prime = n + delta_len;
    let k = sample_new_old_part_size(&SizeModel::new(n, n_prime)?, rng);
    let counts = b.counts_mut();
    if k < n {
        let mut slots: Vec<usize> = Vec::with_capacity(n);
        for (pos, &c) in counts.iter().enumerate() {
            slots.extend(std::iter::repeat_n(pos, c as usize));
        }
        delta.touches += slots.len() as u64;
        for pos in index::sample(rng, slots.len(), n - k).into_iter().map(|i| slots[i]) {
            counts[pos] -= 1;
            delta.remove(pos);
        }
        delta.touches += (n - k) as u64;
    } else {
        for _ in n..k {
            let pos = rng.random_range(0..n);
            counts[pos] += 1;
            delta.add(pos);
        }
        delta.touches += (k - n) as u64;
    }
    b.push_batch(delta_len);
    let counts = b.counts_mut();
    for _ in k..n_prime {
        let pos = n + rng.random_range(0..delta_len);
        counts[pos] += 1;
        delta.add(pos);
    }
    delta.touches += (n_prime - k) as u64;
    Ok(delta)
}

/// A bounded without-replacement random subset of a backing set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sketch {
    pub entries: Vec<usize>,
    pub capacity: usize,
}

pub fn sketch_capacity(c: f64, n: usize) -> usize {
    ((c * (n as f64).sqrt()).ceil() as usize).max(1)
}

impl Sketch {
    pub fn new(capacity: usize) -> Self {
        Sketch {
            entries: Vec::new(),
            capacity,
        }
    }

    fn take_random(&mut self, rng: &mut EarlRng) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let i = rng.random_range(0..self.entries.len());
        Some(self.entries.swap_remove(i))
    }
}

/// Replaces the sketch with a fresh uniform subset of `backing`.
pub fn sketch_refresh(sk: &mut Sketch, backing: &[usize], rng: &mut EarlRng) -> Result<()> {
    if backing.is_empty() {
        return Err(EarlError::invalid("sketch backing set is empty"));
    }
    let take = sk.capacity.min(backing.len());
    sk.entries = index::sample(rng, backing.len(), take)
        .into_iter()
        .map(|i| backing[i])
        .collect();
    Ok(())
}

fn slots_of(counts: &[u32], offset: usize) -> Vec<usize> {
    let mut slots = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        slots.extend(std::iter::repeat_n(offset + i, c as usize));
    }
    slots
}

/// Draws positions of one batch uniformly with replacement while fetching
/// each distinct position from a without-replacement sketch.
#[derive(Debug, Clone, Default)]
struct BatchPicker {
    picked: Vec<usize>,
}

/// A resample kept as a stored (disk) layer plus in-memory sketches of each
/// part and of each sample batch. Edits go through the sketches and a
/// write-behind buffer; the stored layer is touched only when a part sketch
/// runs dry or when changes are committed.
#[derive(Debug, Clone)]
pub struct LayeredResample {
    disk: Resample,
    view: Resample,
    pending: Vec<(usize, i64)>,
    pending_segments: usize,
    live: Vec<u64>,
    part_sketches: Vec<Sketch>,
    batch_sketches: Vec<Sketch>,
    c: f64,
    disk_accesses: u64,
    commits: u64,
}

impl LayeredResample {
    pub fn new(resample: Resample, c: f64, rng: &mut EarlRng) -> Result<Self> {
        if !(c > 0.0) {
            return Err(EarlError::invalid("sketch constant must be positive"));
        }
        let cap = sketch_capacity(c, resample.positions());
        let mut lr = LayeredResample {
            disk: resample.clone(),
            live: resample.part_sizes(),
            view: resample,
            pending: Vec::new(),
            pending_segments: 0,
            part_sketches: Vec::new(),
            batch_sketches: Vec::new(),
            c,
            disk_accesses: 0,
            commits: 0,
        };
        for k in 0..lr.view.batch_count() {
            let mut part = Sketch::new(cap);
            let slots = slots_of(lr.view.part(k), lr.view.batch_range(k).start);
            if !slots.is_empty() {
                sketch_refresh(&mut part, &slots, rng)?;
            }
            lr.part_sketches.push(part);
            let mut batch = Sketch::new(cap);
            let positions: Vec<usize> = lr.view.batch_range(k).collect();
            sketch_refresh(&mut batch, &positions, rng)?;
            lr.batch_sketches.push(batch);
        }
        Ok(lr)
    }

    /// The current resample including uncommitted edits.
    pub fn resample(&self) -> &Resample {
        &self.view
    }

    /// The stored layer as of the last commit.
    pub fn stored(&self) -> &Resample {
        &self.disk
    }

    pub fn disk_accesses(&self) -> u64 {
        self.disk_accesses
    }

    pub fn commits(&self) -> u64 {
        self.commits
    }

    pub fn part_sketches(&self) -> &[Sketch] {
        &self.part_sketches
    }

    pub fn batch_sketches(&self) -> &[Sketch] {
        &self.batch_sketches
    }

    /// Writes buffered edits to the stored layer. Each edited item is one
    /// access; a newly appended batch segment is one sequential write.
    pub fn commit(&mut self) {
        if self.pending.is_empty() && self.pending_segments == 0 {
            return;
        }
        let stored_len = self.disk.positions();
        while self.disk.batch_count() < self.view.batch_count() {
            let k = self.disk.batch_count();
            let range = self.view.batch_range(k);
            self.disk.push_batch(range.len());
            let src = self.view.counts()[range.clone()].to_vec();
            self.disk.counts_mut()[range].copy_from_slice(&src);
        }
        // Edits inside appended segments are already part of the copied segment.
        let mut writes = self.pending_segments as u64;
        for (pos, d) in self.pending.drain(..) {
            if pos < stored_len {
                let c = &mut self.disk.counts_mut()[pos];
                *c = (i64::from(*c) + d) as u32;
                writes += 1;
            }
        }
        self.disk_accesses += writes;
        self.pending_segments = 0;
        self.commits += 1;
        debug_assert_eq!(self.disk, self.view);
    }

    fn reload_part(&mut self, k: usize, rng: &mut EarlRng) -> Result<()> {
        self.commit();
        let range = self.disk.batch_range(k);
        let slots = slots_of(&self.disk.counts()[range.clone()], range.start);
        let cap = sketch_capacity(self.c, self.view.positions());
        self.part_sketches[k].capacity = cap;
        sketch_refresh(&mut self.part_sketches[k], &slots, rng)?;
        self.disk_accesses += self.part_sketches[k].entries.len() as u64;
        Ok(())
    }

    fn delete_one(&mut self, rng: &mut EarlRng) -> Result<usize> {
        let total: u64 = self.live.iter().sum();
        let mut u = rng.random_range(0..total);
        let k = self
            .live
            .iter()
            .position(|&l| {
                if u < l {
                    true
                } else {
                    u -= l;
                    false
                }
            })
            .expect("u below total");
        if self.part_sketches[k].entries.is_empty() {
            self.reload_part(k, rng)?;
        }
        let pos = self.part_sketches[k].take_random(rng).expect("reloaded sketch is non-empty");
        self.view.counts_mut()[pos] -= 1;
        self.pending.push((pos, -1));
        self.live[k] -= 1;
        Ok(pos)
    }

    fn pick_old_position(&mut self, pickers: &mut [BatchPicker], old_len: usize, rng: &mut EarlRng) -> Result<usize> {
        let mut u = rng.random_range(0..old_len);
        let mut k = 0;
        while u >= self.view.batch_range(k).len() {
            u -= self.view.batch_range(k).len();
            k += 1;
        }
        let range = self.view.batch_range(k);
        let m = range.len();
        let picker = &mut pickers[k];
        let d = picker.picked.len();
        if rng.random_range(0..m) < d {
            return Ok(picker.picked[rng.random_range(0..d)]);
        }
        if self.batch_sketches[k].entries.is_empty() {
            let mut taken = picker.picked.clone();
            taken.sort_unstable();
            let backing: Vec<usize> = range.filter(|p| taken.binary_search(p).is_err()).collect();
            sketch_refresh(&mut self.batch_sketches[k], &backing, rng)?;
        }
        let pos = self.batch_sketches[k].take_random(rng).expect("fresh positions remain");
        picker.picked.push(pos);
        Ok(pos)
    }

    /// Inserts a new slot of part `k` so the part sketch stays a uniform subset.
    fn admit_slot(&mut self, k: usize, pos: usize, rng: &mut EarlRng) {
        self.live[k] += 1;
        let sk = &mut self.part_sketches[k];
        let len = sk.entries.len() as u64;
        if len + 1 == self.live[k] && sk.entries.len() < sk.capacity {
            sk.entries.push(pos);
        } else if len > 0 && rng.random_range(0..self.live[k]) < len {
            let i = rng.random_range(0..sk.entries.len());
            sk.entries[i] = pos;
        }
    }

    /// Appends buffered changes and spills the stored layer to `path`.
    pub fn persist(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.commit();
        write_spill(path, &self.disk)
    }
}

/// Grows a layered resample by a batch of `delta_len` new positions, with
/// the same output law as [`update_resample_naive`].
pub fn update_resample_sketched(lb: &mut LayeredResample, delta_len: usize, rng: &mut EarlRng) -> Result<ResampleDelta> {
    let mut delta = ResampleDelta::default();
    if delta_len == 0 {
        return Ok(delta);
    }
    let before = lb.disk_accesses;
    let n = lb.view.positions();
    let n_prime = n + delta_len;
    let k = sample_new_old_part_size(&SizeModel::new(n, n_prime)?, rng);
    if k < n {
        for _ in k..n {
            let pos = lb.delete_one(rng)?;
            delta.remove(pos);
        }
    } else {
        let mut pickers = vec![BatchPicker::default(); lb.view.batch_count()];
        for _ in n..k {
            let pos = lb.pick_old_position(&mut pickers, n, rng)?;
            let part = (0..lb.view.batch_count())
                .find(|&j| lb.view.batch_range(j).contains(&pos))
                .expect("position in some batch");
            lb.view.counts_mut()[pos] += 1;
            lb.pending.push((pos, 1));
            lb.admit_slot(part, pos, rng);
            delta.add(pos);
        }
    }

    lb.view.push_batch(delta_len);
    lb.pending_segments += 1;
    for _ in k..n_prime {
        let pos = n + rng.random_range(0..delta_len);
        lb.view.counts_mut()[pos] += 1;
        delta.add(pos);
    }
    let cap = sketch_capacity(lb.c, n_prime);
    let new_k = lb.view.batch_count() - 1;
    let mut part = Sketch::new(cap);
    let slots = slots_of(lb.view.part(new_k), n);
    if !slots.is_empty() {
        sketch_refresh(&mut part, &slots, rng)?;
    }
    lb.part_sketches.push(part);
    lb.live.push((n_prime - k) as u64);
    lb.batch_sketches.push(Sketch::new(cap));

    for j in 0..lb.view.batch_count() {
        let positions: Vec<usize> = lb.view.batch_range(j).collect();
        lb.batch_sketches[j].capacity = cap;
        sketch_refresh(&mut lb.batch_sketches[j], &positions, rng)?;
    }
    delta.touches = lb.disk_accesses - before;
    Ok(delta)
}

pub fn write_spill(path: impl AsRef<Path>, r: &Resample) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SPILL_MAGIC)?;
    for (pos, &c) in r.counts().iter().enumerate() {
        if c > 0 {
            w.write_all(&(pos as u64).to_le_bytes())?;
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the (position, multiplicity) pairs of a spill file.
pub fn read_spill(path: impl AsRef<Path>) -> Result<Vec<(u64, u32)>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let body = bytes
        .strip_prefix(SPILL_MAGIC.as_slice())
        .ok_or_else(|| EarlError::BadSpill("missing magic header".into()))?;
    if body.len() % 12 != 0 {
        return Err(EarlError::BadSpill(format!("truncated record: {} trailing bytes", body.len() % 12)));
    }
    Ok(body
        .chunks_exact(12)
        .map(|c| {
            (
                u64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                u32::from_le_bytes(c[8..].try_into().expect("4 bytes")),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn fresh(n: usize, rng: &mut EarlRng) -> Resample {
        let mut counts = vec![0u32; n];
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
        Resample::from_counts(counts, vec![n]).unwrap()
    }

    #[test]
    fn size_model_examples() {
        let mut rng = EarlRng::seed_from_u64(0);
        let m = SizeModel::new(7, 7).unwrap();
        assert!((0..100).all(|_| sample_new_old_part_size(&m, &mut rng) == 7));
        let m = SizeModel::new(10, 20).unwrap();
        assert_eq!(m.mode, SizeMode::ExactBinomial);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_new_old_part_size(&m, &mut rng) as f64).collect();
        let mean = draws.iter().sum::<f64>() / 1e5;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1e5;
        assert!((mean - 10.0).abs() < 0.5);
        assert!((var - 5.0).abs() < 0.25);
        assert_eq!(SizeModel::new(10_000, 20_000).unwrap().mode, SizeMode::GaussianApprox);
        assert!(SizeModel::new(0, 3).is_err());
        assert!(SizeModel::new(4, 3).is_err());
    }

    #[test]
    fn gaussian_activation_keeps_three_sigma_containment() {
        use statrs::distribution::{ContinuousCDF, Normal as N};
        for n_prime in [10_000usize, 12_345, 50_000, 1_000_000] {
            for n in [1usize, 10, 100, 1000, n_prime / 2, n_prime - 30, n_prime - 1] {
                let m = SizeModel::new(n, n_prime).unwrap();
                if m.mode == SizeMode::GaussianApprox {
                    let g = N::new(n as f64, m.std_dev()).unwrap();
                    let outside = g.cdf(-0.5) + g.sf(n_prime as f64 + 0.5);
                    assert!(outside < 1e-6, "n={n} n'={n_prime}: {outside}");
                }
            }
        }
    }

    #[test]
    fn naive_empty_delta_is_identity() {
        let mut rng = EarlRng::seed_from_u64(1);
        let mut b = fresh(6, &mut rng);
        let before = b.clone();
        assert!(update_resample_naive(&mut b, 0, &mut rng).unwrap().is_empty());
        assert_eq!(b, before);
    }

    #[test]
    fn naive_keeps_size_and_parts() {
        let mut rng = EarlRng::seed_from_u64(2);
        let mut b = fresh(30, &mut rng);
        for step in [10usize, 1, 25, 40] {
            let before = b.clone();
            let d = update_resample_naive(&mut b, step, &mut rng).unwrap();
            assert_eq!(b.size(), b.positions() as u64);
            assert_eq!(b.part_sizes().iter().sum::<u64>(), b.size());
            for (p, c) in &d.removed {
                assert!(before.counts()[*p] >= *c);
            }
        }
        assert_eq!(b.batch_count(), 5);
    }

    #[test]
    fn sketched_empty_delta_touches_nothing() {
        let mut rng = EarlRng::seed_from_u64(3);
        let mut lb = LayeredResample::new(fresh(50, &mut rng), 4.0, &mut rng).unwrap();
        let before = lb.resample().clone();
        let d = update_resample_sketched(&mut lb, 0, &mut rng).unwrap();
        assert!(d.is_empty());
        assert_eq!(lb.disk_accesses(), 0);
        assert_eq!(lb.resample(), &before);
    }

    fn assert_sketches_valid(lb: &LayeredResample) {
        let r = lb.resample();
        for (k, sk) in lb.part_sketches().iter().enumerate() {
            let mut seen: BTreeMap<usize, u32> = BTreeMap::new();
            for &p in &sk.entries {
                assert!(r.batch_range(k).contains(&p));
                *seen.entry(p).or_insert(0) += 1;
            }
            for (p, c) in seen {
                assert!(c <= r.counts()[p], "part sketch overuses slot {p}");
            }
        }
        for (k, sk) in lb.batch_sketches().iter().enumerate() {
            let mut e = sk.entries.clone();
            e.sort_unstable();
            e.dedup();
            assert_eq!(e.len(), sk.entries.len());
            assert!(e.iter().all(|p| r.batch_range(k).contains(p)));
            assert!(sk.entries.len() <= sk.capacity);
        }
    }

    #[test]
    fn sketched_matches_delta_and_keeps_sketches_valid() {
        let mut rng = EarlRng::seed_from_u64(4);
        let mut lb = LayeredResample::new(fresh(200, &mut rng), 1.0, &mut rng).unwrap();
        for step in [50usize, 3, 250, 7, 100] {
            let before = lb.resample().clone();
            let d = update_resample_sketched(&mut lb, step, &mut rng).unwrap();
            let after = lb.resample();
            assert_eq!(after.size(), after.positions() as u64);
            let mut rebuilt = before.counts().to_vec();
            rebuilt.resize(after.positions(), 0);
            for (p, c) in &d.removed {
                rebuilt[*p] -= c;
            }
            for (p, c) in &d.added {
                rebuilt[*p] += c;
            }
            assert_eq!(rebuilt, after.counts());
            assert_sketches_valid(&lb);
        }
        lb.commit();
        assert_eq!(lb.stored(), lb.resample());
    }

    #[test]
    fn sketch_refresh_examples() {
        let mut rng = EarlRng::seed_from_u64(5);
        let mut sk = Sketch::new(10);
        sketch_refresh(&mut sk, &[3, 4, 5], &mut rng).unwrap();
        sk.entries.sort_unstable();
        assert_eq!(sk.entries, vec![3, 4, 5]);
        assert!(sketch_refresh(&mut sk, &[], &mut rng).is_err());

        let backing: Vec<usize> = (1..=100).collect();
        let mut counts = vec![0u64; 100];
        for _ in 0..10_000 {
            sketch_refresh(&mut sk, &backing, &mut rng).unwrap();
            for &e in &sk.entries {
                counts[e - 1] += 1;
            }
        }
        let t = crate::stats::inclusion_uniformity(&counts, 10_000, 10);
        assert!(t.p_value > 0.01, "{t:?}");
    }

    #[test]
    fn spill_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.spill");
        let mut rng = EarlRng::seed_from_u64(6);
        let mut lb = LayeredResample::new(fresh(20, &mut rng), 4.0, &mut rng).unwrap();
        update_resample_sketched(&mut lb, 5, &mut rng).unwrap();
        lb.persist(&path).unwrap();
        let pairs = read_spill(&path).unwrap();
        let expect: Vec<(u64, u32)> = lb
            .resample()
            .counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(p, &c)| (p as u64, c))
            .collect();
        assert_eq!(pairs, expect);

        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(read_spill(&path), Err(EarlError::BadSpill(_))));
        std::fs::write(&path, b"EARLSPL1abc").unwrap();
        assert!(matches!(read_spill(&path), Err(EarlError::BadSpill(_))));
    }

    #[test]
    fn net_cancels() {
        let mut d = ResampleDelta::default();
        d.remove(1);
        d.remove(1);
        d.add(1);
        d.add(2);
        let (r, a) = d.net();
        assert_eq!(r, BTreeMap::from([(1, 1)]));
        assert_eq!(a, BTreeMap::from([(2, 1)]));
    }

    proptest::proptest! {
        #[test]
        fn parts_sum_to_size(n in 1usize..60, steps in proptest::collection::vec(0usize..40, 1..4), seed in 0u64..500) {
            let mut rng = EarlRng::seed_from_u64(seed);
            let mut naive = fresh(n, &mut rng);
            let mut lb = LayeredResample::new(naive.clone(), 2.0, &mut rng).unwrap();
            for s in steps {
                update_resample_naive(&mut naive, s, &mut rng).unwrap();
                update_resample_sketched(&mut lb, s, &mut rng).unwrap();
                proptest::prop_assert_eq!(naive.part_sizes().iter().sum::<u64>(), naive.positions() as u64);
                let r = lb.resample();
                proptest::prop_assert_eq!(r.part_sizes().iter().sum::<u64>(), r.positions() as u64);
                assert_sketches_valid(&lb);
            }
        }
    }
}
