//! Bounded store of past inputs, admitted when the boundary distance exceeds
//! one and evicted uniformly at random.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::is_boundary;
use crate::error::{Error, Result};
use crate::image::{Image, Mode};
use crate::worlds::io::{csv_err, write_frame};

pub const DEFAULT_CAPACITY: usize = 2048;

/// Inputs needed to recompute the loss: a left/right pair in stereo mode,
/// or a target/reference pair in SfM mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySample {
    pub mode: Mode,
    pub frames: [Image; 2],
    /// Bookkeeping only; training never reads it.
    pub source_domain: String,
}

/// A stored sample with its admission record.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub id: u64,
    pub sample: ReplaySample,
    pub step: u64,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Online,
    Replay,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Entry>,
    next_id: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of the buffer's random source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be positive"));
        }
        Ok(Self { capacity, items: Vec::new(), next_id: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.items
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Admits `sample` iff `distance > 1`, replacing a uniformly chosen
    /// item when full. Returns whether the sample was stored.
    pub fn maybe_store(&mut self, sample: ReplaySample, distance: f64, step: u64) -> bool {
        if !is_boundary(distance) {
            return false;
        }
        let entry = Entry { id: self.next_id, sample, step, distance };
        self.next_id += 1;
        if self.items.len() < self.capacity {
            self.items.push(entry);
        } else {
            let victim = self.rng.gen_range(0..self.items.len());
            self.items[victim] = entry;
        }
        true
    }

    /// Uniformly random stored sample; the buffer is unchanged.
    pub fn draw(&mut self) -> Result<&ReplaySample> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let i = self.rng.gen_range(0..self.items.len());
        Ok(&self.items[i].sample)
    }

    /// Fair coin between the online stream and the buffer; always online
    /// while the buffer is empty.
    pub fn choose_source(&mut self) -> Source {
        if self.items.is_empty() {
            return Source::Online;
        }
        if self.rng.gen_bool(0.5) {
            Source::Replay
        } else {
            Source::Online
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    /// Writes every stored sample as two PPM frames into `dir` plus
    /// `buffer.csv` (id, mode, step, distance, domain, frame0, frame1).
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("buffer.csv")).map_err(csv_err)?;
        w.write_record(["id", "mode", "step", "distance", "domain", "frame0", "frame1"]).map_err(csv_err)?;
        for e in &self.items {
            let names = [0, 1].map(|k| format!("{:06}_{k}.ppm", e.id));
            for (name, frame) in names.iter().zip(&e.sample.frames) {
                write_frame(&dir.join(name), frame)?;
            }
            w.write_record([
                e.id.to_string(),
                e.sample.mode.to_string(),
                e.step.to_string(),
                format!("{:.6}", e.distance),
                e.sample.source_domain.clone(),
                names[0].clone(),
                names[1].clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a buffer from saved entries and random-source position.
    pub fn restore(capacity: usize, items: Vec<Entry>, next_id: u64, state: RngState) -> Result<Self> {
        if capacity == 0 || items.len() > capacity {
            return Err(Error::Format(format!("{} replay items exceed capacity {capacity}", items.len())));
        }
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Ok(Self { capacity, items, next_id, rng })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(tag: &str) -> ReplaySample {
        ReplaySample {
            mode: Mode::Stereo,
            frames: [Image::filled(1, 2, 2, 0.0), Image::filled(1, 2, 2, 1.0)],
            source_domain: tag.to_string(),
        }
    }

    #[test]
    fn admission_rule() {
        let mut b = ReplayBuffer::new(2, 0).unwrap();
        assert!(!b.maybe_store(sample("a"), 0.5, 0));
        assert!(!b.maybe_store(sample("a"), 1.0, 1));
        assert_eq!(b.len(), 0);
        assert!(b.maybe_store(sample("a"), 2.0, 2));
        assert_eq!(b.len(), 1);
        assert!(b.maybe_store(sample("b"), 2.0, 3));
        assert!(b.maybe_store(sample("c"), 2.0, 4));
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn size_monotone_and_audit() {
        let mut b = ReplayBuffer::new(16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut last = 0;
        for step in 0..500 {
            let d: f64 = rng.gen_range(0.0..3.0);
            b.maybe_store(sample("x"), d, step);
            assert!(b.len() >= last && b.len() <= 16);
            last = b.len();
            assert!(b.entries().iter().all(|e| e.distance > 1.0));
        }
        assert_eq!(b.len(), 16);
    }

    #[test]
    fn eviction_is_uniform() {
        // Fill with ids 0..4, then insert one more many times from the same
        // state and count which slot is replaced.
        let mut counts = [0usize; 4];
        for seed in 0..4000 {
            let mut b = ReplayBuffer::new(4, seed).unwrap();
            for k in 0..4 {
                b.maybe_store(sample(&k.to_string()), 2.0, k);
            }
            b.maybe_store(sample("new"), 2.0, 4);
            let slot = b.entries().iter().position(|e| e.sample.source_domain == "new").unwrap();
            counts[slot] += 1;
        }
        let sd = (4000.0f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn draw_cases() {
        let mut b = ReplayBuffer::new(8, 5).unwrap();
        assert!(matches!(b.draw(), Err(Error::EmptyBuffer)));
        b.maybe_store(sample("only"), 5.0, 0);
        assert_eq!(b.draw().unwrap().source_domain, "only");
        for k in 1..4 {
            b.maybe_store(sample(&k.to_string()), 5.0, k);
        }
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            let tag = b.draw().unwrap().source_domain.clone();
            *counts.entry(tag).or_insert(0usize) += 1;
        }
        assert_eq!(b.len(), 4);
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        for (_, c) in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn choose_source_cases() {
        let mut b = ReplayBuffer::new(8, 6).unwrap();
        assert!((0..100).all(|_| b.choose_source() == Source::Online));
        b.maybe_store(sample("a"), 2.0, 0);
        let n = 10_000;
        let replays = (0..n).filter(|_| b.choose_source() == Source::Replay).count();
        assert!((replays as f64 / n as f64 - 0.5).abs() <= 0.02);

        let seq = |seed| {
            let mut b = ReplayBuffer::new(8, seed).unwrap();
            b.maybe_store(sample("a"), 2.0, 0);
            (0..64).map(|_| b.choose_source()).collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
    }

    #[test]
    fn restore_continues_sequence() {
        let mut a = ReplayBuffer::new(4, 11).unwrap();
        for k in 0..6 {
            a.maybe_store(sample(&k.to_string()), 3.0, k);
        }
        let mut b = ReplayBuffer::restore(4, a.entries().to_vec(), a.next_id(), a.rng_state()).unwrap();
        for _ in 0..50 {
            assert_eq!(a.choose_source(), b.choose_source());
            assert_eq!(a.draw().unwrap(), b.draw().unwrap());
        }
    }

    #[test]
    fn dump_writes_frames_and_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ReplayBuffer::new(4, 3).unwrap();
        let frame = |v: f32| Image::filled(3, 2, 3, v);
        let s = ReplaySample { mode: Mode::Sfm, frames: [frame(0.2), frame(0.8)], source_domain: "B4".into() };
        b.maybe_store(s, 2.5, 17);
        b.dump(dir.path()).unwrap();
        let index = fs::read_to_string(dir.path().join("buffer.csv")).unwrap();
        assert_eq!(index, "id,mode,step,distance,domain,frame0,frame1\n0,sfm,17,2.500000,B4,000000_0.ppm,000000_1.ppm\n");
        let back = crate::worlds::io::read_ppm(&dir.path().join("000000_1.ppm")).unwrap();
        assert!(back.data().iter().all(|&v| (v - 0.8).abs() < 0.5 / 255.0 + 1e-6));
    }
}
