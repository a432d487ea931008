//! Literal reference of the long-term consolidation loop and the FIFO.

use std::collections::VecDeque;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute force: recompute the full similarity list on every pass, take the
/// first maximum, replace the left frame by the plain mean of the pair and
/// delete the right one. Counts follow the frames they belong to.
pub fn consolidate_ref(frames: &[Vec<f64>], counts: &[u64], cap: usize) -> (Vec<Vec<f64>>, Vec<u64>) {
    let mut buf = frames.to_vec();
    let mut cnt = counts.to_vec();
    while buf.len() > cap {
        let mut sims = Vec::new();
        for i in 0..buf.len() - 1 {
            sims.push(dot(&buf[i], &buf[i + 1]));
        }
        let mut t_max = 0;
        for (i, s) in sims.iter().enumerate() {
            if *s > sims[t_max] {
                t_max = i;
            }
        }
        let merged = buf[t_max].iter().zip(&buf[t_max + 1]).map(|(a, b)| (a + b) / 2.0).collect();
        buf[t_max] = merged;
        buf.remove(t_max + 1);
        cnt[t_max] += cnt[t_max + 1];
        cnt.remove(t_max + 1);
    }
    (buf, cnt)
}

/// Short-term window: the first frame is copied into every slot, later
/// frames push out the oldest one.
#[derive(Clone, Debug)]
pub struct FifoRef {
    cap: usize,
    buf: VecDeque<Vec<f64>>,
    copies_left: usize,
}

impl FifoRef {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            buf: VecDeque::new(),
            copies_left: 0,
        }
    }

    /// Returns the evicted frame when it is a real (non-copy) frame.
    pub fn push(&mut self, f: Vec<f64>) -> Option<Vec<f64>> {
        if self.buf.is_empty() {
            self.buf = std::iter::repeat_n(f, self.cap).collect();
            self.copies_left = self.cap - 1;
            return None;
        }
        let out = self.buf.pop_front();
        self.buf.push_back(f);
        if self.copies_left > 0 {
            self.copies_left -= 1;
            None
        } else {
            out
        }
    }

    pub fn frames(&self) -> Vec<Vec<f64>> {
        self.buf.iter().cloned().collect()
    }
}

/// Streaming reference: evicted frames are admitted to the long-term buffer
/// and consolidated. Returns `(short, long)` after every frame.
/// `(short, long)` buffers after one frame.
pub type StreamState = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn stream_ref(frames: &[Vec<f64>], s: usize, l: usize) -> Vec<StreamState> {
    let mut fifo = FifoRef::new(s);
    let mut long: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut out = Vec::new();
    for f in frames {
        if let Some(e) = fifo.push(f.clone()) {
            long.push(e);
            counts.push(1);
            let (b, c) = consolidate_ref(&long, &counts, l);
            long = b;
            counts = c;
        }
        out.push((fifo.frames(), long.clone()));
    }
    out
}
