//! Setting-keyed trajectory storage and contrastive batch sampling.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use crate::envs::{Trajectory, Transition};
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 200;

/// A contiguous window of state-action pairs, stored raw (unnormalized).
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub setting_id: u64,
    pub episode_id: u64,
    /// Index of the first transition within its trajectory.
    pub start: usize,
    /// Number of leading all-zero rows standing in for missing history.
    pub padded: usize,
    /// `len x width` row-major, each row `[state, action]`.
    pub features: Vec<f64>,
    pub width: usize,
}

impl Segment {
    /// The window `transitions[start..start+len]` of a stored trajectory.
    pub fn from_trajectory(traj: &Trajectory, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > traj.len() {
            return Err(Error::Contract(format!("window {start}+{len} outside a trajectory of {}", traj.len())));
        }
        let window = &traj.transitions[start..start + len];
        let width = window[0].state.len() + window[0].action.len();
        let mut features = Vec::with_capacity(len * width);
        for t in window {
            features.extend_from_slice(&t.state);
            features.extend_from_slice(&t.action);
        }
        Ok(Self { setting_id: traj.setting_id(), episode_id: traj.episode_id, start, padded: 0, features, width })
    }

    /// The last `len` transitions of a live episode, zero-padded at the front
    /// when fewer exist.
    pub fn from_history(history: &[Transition], len: usize, state_dim: usize, action_dim: usize) -> Self {
        let width = state_dim + action_dim;
        let take = history.len().min(len);
        let padded = len - take;
        let mut features = vec![0.0; padded * width];
        for t in &history[history.len() - take..] {
            features.extend_from_slice(&t.state);
            features.extend_from_slice(&t.action);
        }
        Self {
            setting_id: u64::MAX,
            episode_id: u64::MAX,
            start: history.len() - take,
            padded,
            features,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

/// One training batch.
///
/// `queries[b]` is the history window whose contexts are learned,
/// `futures[b]` the transitions immediately after it. When the batch is
/// contrastive, `positives[b]` comes from the same setting, `negatives[b]`
/// from other settings, and `partners[b]` is a second window of the same
/// episode as the query.
#[derive(Clone, Debug, Default)]
pub struct ContrastiveBatch {
    pub queries: Vec<Segment>,
    pub positives: Vec<Segment>,
    pub negatives: Vec<Vec<Segment>>,
    pub partners: Vec<Segment>,
    pub futures: Vec<Vec<Transition>>,
    pub settings: Vec<u64>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn is_contrastive(&self) -> bool {
        !self.positives.is_empty()
    }

    /// Number of candidates per InfoNCE term (one positive plus negatives).
    pub fn k(&self) -> usize {
        1 + self.negatives.first().map_or(0, Vec::len)
    }

    /// Checks the labelling rules on every row.
    pub fn validate(&self) -> Result<()> {
        let len = self.queries.first().map_or(0, Segment::len);
        let bad = |msg: String| Err(Error::Contract(msg));
        for (b, q) in self.queries.iter().enumerate() {
            if q.len() != len || self.settings[b] != q.setting_id {
                return bad(format!("row {b}: inconsistent query"));
            }
            if !self.is_contrastive() {
                continue;
            }
            let p = &self.positives[b];
            if p.setting_id != q.setting_id || p.len() != len {
                return bad(format!("row {b}: positive from setting {} for query {}", p.setting_id, q.setting_id));
            }
            if p.episode_id == q.episode_id && p.start == q.start {
                return bad(format!("row {b}: positive equals query"));
            }
            let partner = &self.partners[b];
            if partner.episode_id != q.episode_id || partner.start == q.start || partner.len() != len {
                return bad(format!("row {b}: partner must be another window of the same episode"));
            }
            for n in &self.negatives[b] {
                if n.setting_id == q.setting_id || n.len() != len {
                    return bad(format!("row {b}: negative shares setting {}", n.setting_id));
                }
            }
        }
        Ok(())
    }
}

/// Per-setting FIFO buckets of whole trajectories.
#[derive(Clone, Debug)]
pub struct SettingBuffer {
    capacity: usize,
    buckets: BTreeMap<u64, VecDeque<Trajectory>>,
    inserted: BTreeMap<u64, u64>,
}

impl Default for SettingBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl SettingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { capacity, buckets: BTreeMap::new(), inserted: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends to the trajectory's bucket, evicting the oldest entry when full.
    pub fn insert(&mut self, trajectory: Trajectory) {
        let id = trajectory.setting_id();
        let bucket = self.buckets.entry(id).or_default();
        if bucket.len() == self.capacity {
            bucket.pop_front();
        }
        bucket.push_back(trajectory);
        *self.inserted.entry(id).or_default() += 1;
    }

    pub fn num_settings(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, setting_id: u64) -> Option<&VecDeque<Trajectory>> {
        self.buckets.get(&setting_id)
    }

    pub fn inserted(&self, setting_id: u64) -> u64 {
        self.inserted.get(&setting_id).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.buckets.values().flatten()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories().map(Trajectory::len).sum()
    }

    /// Settings with at least one trajectory long enough, and those trajectories.
    fn eligible(&self, min_len: usize) -> Vec<(u64, Vec<&Trajectory>)> {
        self.buckets
            .iter()
            .filter_map(|(&id, b)| {
                let trajs: Vec<&Trajectory> = b.iter().filter(|t| t.len() >= min_len).collect();
                (!trajs.is_empty()).then_some((id, trajs))
            })
            .collect()
    }

    /// Contrastive batch of `seg_len` windows without future transitions.
    pub fn sample_contrastive<R: Rng + ?Sized>(
        &self,
        batch: usize,
        negatives: usize,
        seg_len: usize,
        rng: &mut R,
    ) -> Result<ContrastiveBatch> {
        self.sample_training(batch, negatives, seg_len, 0, rng)
    }

    /// Training batch: history windows of `h_past` followed by `h_future`
    /// transitions. With `negatives == 0` only queries and futures are drawn
    /// and a single populated setting suffices.
    pub fn sample_training<R: Rng + ?Sized>(
        &self,
        batch: usize,
        negatives: usize,
        h_past: usize,
        h_future: usize,
        rng: &mut R,
    ) -> Result<ContrastiveBatch> {
        if batch == 0 || h_past == 0 {
            return Err(Error::Contract("batch size and window length must be positive".into()));
        }
        let min_len = h_past + h_future + 1;
        let eligible = self.eligible(min_len);
        let contrastive = negatives > 0;
        if eligible.is_empty() || (contrastive && eligible.len() < 2) {
            return Err(Error::NotReady(format!(
                "{} setting(s) hold trajectories of length >= {min_len}; need {}",
                eligible.len(),
                if contrastive { 2 } else { 1 }
            )));
        }
        let window = |traj: &Trajectory, rng: &mut R| -> Result<Segment> {
            let start = rng.random_range(0..=traj.len() - h_past);
            Segment::from_trajectory(traj, start, h_past)
        };
        let mut out = ContrastiveBatch::default();
        for _ in 0..batch {
            let si = rng.random_range(0..eligible.len());
            let (setting, trajs) = &eligible[si];
            let traj = trajs[rng.random_range(0..trajs.len())];
            let start = rng.random_range(0..=traj.len() - h_past - h_future);
            let query = Segment::from_trajectory(traj, start, h_past)?;
            out.futures.push(traj.transitions[start + h_past..start + h_past + h_future].to_vec());
            out.settings.push(*setting);
            if contrastive {
                let positive = loop {
                    let p = window(trajs[rng.random_range(0..trajs.len())], rng)?;
                    if p.episode_id != query.episode_id || p.start != query.start {
                        break p;
                    }
                };
                let partner = loop {
                    let p = window(traj, rng)?;
                    if p.start != query.start {
                        break p;
                    }
                };
                let negs = (0..negatives)
                    .map(|_| {
                        let mut other = rng.random_range(0..eligible.len() - 1);
                        if other >= si {
                            other += 1;
                        }
                        let trajs = &eligible[other].1;
                        window(trajs[rng.random_range(0..trajs.len())], rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.positives.push(positive);
                out.partners.push(partner);
                out.negatives.push(negs);
            }
            out.queries.push(query);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ConfounderSetting, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(setting_id: u64, episode_id: u64, len: usize) -> Trajectory {
        let transitions = (0..len)
            .map(|i| Transition {
                state: vec![i as f64, setting_id as f64],
                action: vec![episode_id as f64],
                reward: 0.0,
                next_state: vec![i as f64 + 1.0, setting_id as f64],
            })
            .collect();
        let setting = ConfounderSetting { values: vec![], setting_id, split: Split::Train };
        Trajectory { episode_id, setting, transitions }
    }

    #[test]
    fn insert_and_evict() {
        let mut buf = SettingBuffer::new(3);
        buf.insert(traj(1, 0, 5));
        assert_eq!(buf.bucket(1).unwrap().len(), 1);
        for e in 1..4 {
            buf.insert(traj(1, e, 5));
        }
        let ids: Vec<u64> = buf.bucket(1).unwrap().iter().map(|t| t.episode_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(buf.inserted(1), 4);
        buf.insert(traj(2, 9, 5));
        assert_eq!(buf.num_settings(), 2);
        assert!(buf.trajectories().all(|t| buf.bucket(t.setting_id()).unwrap().contains(t)));
    }

    #[test]
    fn single_setting_is_not_ready() {
        let mut buf = SettingBuffer::default();
        buf.insert(traj(1, 0, 50));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample_contrastive(4, 3, 10, &mut rng), Err(Error::NotReady(_))));
        assert_eq!(buf.sample_training(4, 0, 10, 5, &mut rng).unwrap().len(), 4);
    }

    #[test]
    fn two_settings_give_all_negatives_from_the_other() {
        let mut buf = SettingBuffer::default();
        buf.insert(traj(10, 0, 40));
        buf.insert(traj(20, 1, 40));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = buf.sample_contrastive(64, 4, 10, &mut rng).unwrap();
        b.validate().unwrap();
        for (q, negs) in b.queries.iter().zip(&b.negatives) {
            let other = if q.setting_id == 10 { 20 } else { 10 };
            assert_eq!(negs.len(), 4);
            assert!(negs.iter().all(|n| n.setting_id == other));
        }
    }

    #[test]
    fn batch_shapes() {
        let mut buf = SettingBuffer::default();
        for s in 0..5 {
            buf.insert(traj(s, s, 200));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = buf.sample_contrastive(128, 15, 10, &mut rng).unwrap();
        assert_eq!(b.queries.len(), 128);
        assert_eq!(b.positives.len(), 128);
        assert_eq!(b.negatives.len(), 128);
        assert!(b.negatives.iter().all(|n| n.len() == 15));
        assert_eq!(b.k(), 16);
        assert!(b.queries.iter().all(|q| q.len() == 10 && q.features.len() == 30));
        b.validate().unwrap();
    }

    #[test]
    fn window_starts_cover_the_full_range() {
        let mut buf = SettingBuffer::default();
        buf.insert(traj(0, 0, 200));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 191];
        for _ in 0..200 {
            for q in buf.sample_training(64, 0, 10, 0, &mut rng).unwrap().queries {
                seen[q.start] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn training_windows_are_followed_by_their_future() {
        let mut buf = SettingBuffer::default();
        buf.insert(traj(0, 0, 30));
        buf.insert(traj(1, 1, 30));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = buf.sample_training(32, 3, 10, 5, &mut rng).unwrap();
        b.validate().unwrap();
        for (q, f) in b.queries.iter().zip(&b.futures) {
            assert_eq!(f.len(), 5);
            assert_eq!(f[0].state[0], (q.start + 10) as f64);
        }
    }

    #[test]
    fn query_settings_are_uniform() {
        let mut buf = SettingBuffer::default();
        for s in 0..4 {
            buf.insert(traj(s, s, 30));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        let mut draws = 0;
        while draws < 10_000 {
            for s in buf.sample_training(100, 0, 10, 0, &mut rng).unwrap().settings {
                counts[s as usize] += 1;
            }
            draws += 100;
        }
        let p = 0.25;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn history_is_front_padded() {
        let t = traj(3, 7, 3);
        let s = Segment::from_history(&t.transitions, 5, 2, 1);
        assert_eq!(s.len(), 5);
        assert_eq!(s.padded, 2);
        assert_eq!(s.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(s.row(2), &[0.0, 3.0, 7.0]);
        assert_eq!(s.row(4), &[2.0, 3.0, 7.0]);
        let full = Segment::from_history(&traj(0, 0, 12).transitions, 5, 2, 1);
        assert_eq!(full.padded, 0);
        assert_eq!(full.row(0)[0], 7.0);
    }
}
