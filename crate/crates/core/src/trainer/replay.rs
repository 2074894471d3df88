use std::collections::VecDeque;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::losses::SegmentBatch;
use crate::nncore::DenseArray;
use crate::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub episode: u64,
    /// Step index within the episode.
    pub step: usize,
}

/// FIFO ring of transitions in insertion order.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

/// Rejection draws before falling back to an exhaustive scan.
const MAX_REJECTIONS: usize = 64;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: VecDeque::with_capacity(capacity.min(1 << 20)) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::NonFinite { context: "transition reward".into() });
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// `start` begins `horizon + 1` consecutive transitions of one episode.
    pub fn is_valid_start(&self, start: usize, horizon: usize) -> bool {
        let end = start + horizon;
        if end >= self.items.len() {
            return false;
        }
        let (a, b) = (&self.items[start], &self.items[end]);
        a.episode == b.episode && b.step == a.step + horizon
    }

    pub fn valid_starts(&self, horizon: usize) -> Vec<usize> {
        (0..self.items.len()).filter(|&s| self.is_valid_start(s, horizon)).collect()
    }

    /// Uniform over valid start points: rejection sampling over all slots,
    /// which is exact because every slot is drawn with equal probability.
    pub fn sample_start(&self, horizon: usize, rng: &mut Rng) -> Result<usize> {
        let n = self.items.len();
        if n > horizon {
            for _ in 0..MAX_REJECTIONS {
                let s = rng.random_range(0..n);
                if self.is_valid_start(s, horizon) {
                    return Ok(s);
                }
            }
        }
        let valid = self.valid_starts(horizon);
        if valid.is_empty() {
            return Err(Error::InsufficientData(format!("no episode holds {} consecutive transitions", horizon + 1)));
        }
        Ok(valid[rng.random_range(0..valid.len())])
    }

    /// `batch` independent segments of `horizon + 1` transitions.
    pub fn sample_segments(&self, batch: usize, horizon: usize, rng: &mut Rng) -> Result<SegmentBatch> {
        if batch == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        let starts = (0..batch).map(|_| self.sample_start(horizon, rng)).collect::<Result<Vec<_>>>()?;
        Ok(self.gather(&starts, horizon))
    }

    /// Segment batch for the given start points (assumed valid).
    pub fn gather(&self, starts: &[usize], horizon: usize) -> SegmentBatch {
        let first = &self.items[starts[0]];
        let (sd, ad) = (first.obs.len(), first.action.len());
        let b = starts.len();
        let mut obs = Vec::with_capacity(horizon + 2);
        let mut actions = Vec::with_capacity(horizon + 1);
        let mut rewards = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon + 1 {
            let mut d = Vec::with_capacity(b * sd);
            for &s in starts {
                let t = if k <= horizon { &self.items[s + k].obs } else { &self.items[s + horizon].next_obs };
                d.extend_from_slice(t);
            }
            obs.push(DenseArray::from_raw(vec![b, sd], d));
        }
        for k in 0..=horizon {
            let mut a = Vec::with_capacity(b * ad);
            let mut r = Vec::with_capacity(b);
            for &s in starts {
                a.extend_from_slice(&self.items[s + k].action);
                r.push(self.items[s + k].reward);
            }
            actions.push(DenseArray::from_raw(vec![b, ad], a));
            rewards.push(DenseArray::from_raw(vec![b, 1], r));
        }
        SegmentBatch { obs, actions, rewards }
    }
}
