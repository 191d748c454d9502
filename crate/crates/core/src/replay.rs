//! Experience replay.
//!
//! Storage keeps single 8-bit frames in a ring and reconstructs K-frame
//! stacks at sampling time, clamping at episode starts (the first frame is
//! repeated rather than leaking frames from the previous episode). On top of
//! that sit a uniform FIFO view (continuous agent) and a prioritized
//! sum-tree view with n-step folding (discrete agent).

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("buffer underfilled: have {have} transitions, need {need}")]
    UnderFilled { have: usize, need: usize },
    #[error("pushed frame has {got} pixels, buffer stores {want}")]
    FrameSize { got: usize, want: usize },
    #[error("transition pushed before episode start")]
    NoEpisode,
}

/// One raw environment transition handed to the buffer. States are full
/// normalized stacks; the buffer extracts and quantizes the newest frame.
pub struct PushStep<'a, A> {
    pub state: &'a Tensor<f32>,
    pub action: A,
    pub reward: f32,
    pub next_state: &'a Tensor<f32>,
    pub done: bool,
}

/// A decoded mini-batch. Pixel states are normalized to [0, 1].
pub struct Batch<A> {
    pub states: Tensor<f32>,
    pub actions: Vec<A>,
    pub rewards: Vec<f32>,
    pub next_states: Tensor<f32>,
    pub dones: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Stored<A> {
    global: u64,
    g_state: u64,
    g_next: u64,
    action: A,
    reward: f32,
    done: bool,
}

/// Reference to a sampled transition, used to route priority updates back.
/// `global` detects slots overwritten since the sample (skipped silently).
#[derive(Clone, Copy, Debug)]
pub struct SampleRef {
    pub slot: usize,
    pub global: u64,
}

// ---------------------------------------------------------------- frames --

struct FrameRing {
    frame_len: usize,
    capacity: usize,
    data: Vec<u8>,
    idx_in_ep: Vec<u32>,
    total: u64,
}

impl FrameRing {
    fn new(capacity: usize, frame_len: usize) -> Self {
        FrameRing {
            frame_len,
            capacity,
            data: vec![0u8; capacity * frame_len],
            idx_in_ep: vec![0u32; capacity],
            total: 0,
        }
    }

    fn present(&self, g: u64) -> bool {
        g < self.total && g + (self.capacity as u64) >= self.total + 1
    }

    fn oldest(&self) -> u64 {
        self.total.saturating_sub(self.capacity as u64)
    }

    fn push(&mut self, pixels: &[f32], idx_in_ep: u32) -> u64 {
        debug_assert_eq!(pixels.len(), self.frame_len);
        let slot = (self.total % self.capacity as u64) as usize;
        let dst = &mut self.data[slot * self.frame_len..(slot + 1) * self.frame_len];
        for (d, &v) in dst.iter_mut().zip(pixels) {
            *d = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        self.idx_in_ep[slot] = idx_in_ep;
        let g = self.total;
        self.total += 1;
        g
    }

    /// Decode the K-frame stack ending at frame `g` into `dst` (normalized).
    /// Walks back within the episode; frames before the episode start (or
    /// already evicted) repeat the earliest available frame.
    fn stack_into(&self, g: u64, k: usize, dst: &mut [f32]) {
        debug_assert!(self.present(g));
        let slot_of = |gi: u64| (gi % self.capacity as u64) as usize;
        let ep_start = g - self.idx_in_ep[slot_of(g)] as u64;
        let floor = ep_start.max(self.oldest());
        for j in 0..k {
            let want = g.saturating_sub((k - 1 - j) as u64).max(floor);
            let src = &self.data[slot_of(want) * self.frame_len..(slot_of(want) + 1) * self.frame_len];
            let out = &mut dst[j * self.frame_len..(j + 1) * self.frame_len];
            for (o, &q) in out.iter_mut().zip(src) {
                *o = q as f32 / 255.0;
            }
        }
    }
}

// ---------------------------------------------------------------- folding --

/// A folded transition in frame-index form, ready for storage.
#[derive(Clone, Debug)]
pub struct Folded<A> {
    pub g_state: u64,
    pub g_next: u64,
    pub action: A,
    pub reward: f32,
    pub done: bool,
}

/// Folds n consecutive rewards into one transition over frame indices:
/// reward = sum gamma^k r_{t+k}, next state from the last constituent step,
/// done if any constituent terminated. Episode end flushes everything
/// pending as truncated terminal folds.
pub struct Folder<A> {
    pub n: usize,
    pub gamma: f32,
    pending: VecDeque<(u64, A, f32)>,
}

impl<A: Clone> Folder<A> {
    pub fn new(n: usize, gamma: f32) -> Self {
        assert!(n >= 1, "n-step requires n >= 1");
        Folder {
            n,
            gamma,
            pending: VecDeque::new(),
        }
    }

    /// Feed one raw step; returns zero or more folded transitions.
    pub fn push(
        &mut self,
        g_state: u64,
        action: A,
        reward: f32,
        g_next: u64,
        done: bool,
    ) -> Vec<Folded<A>> {
        self.pending.push_back((g_state, action, reward));
        let mut out = Vec::new();
        if done {
            // Flush every pending entry as a truncated terminal fold.
            while let Some((gs, act, _)) = self.pending.front().cloned() {
                let mut r = 0f32;
                let mut g = 1f32;
                for (_, _, ri) in self.pending.iter() {
                    r += g * ri;
                    g *= self.gamma;
                }
                out.push(Folded {
                    g_state: gs,
                    g_next,
                    action: act,
                    reward: r,
                    done: true,
                });
                self.pending.pop_front();
            }
        } else if self.pending.len() == self.n {
            let (gs, act, _) = self.pending.front().cloned().unwrap();
            let mut r = 0f32;
            let mut g = 1f32;
            for (_, _, ri) in self.pending.iter() {
                r += g * ri;
                g *= self.gamma;
            }
            out.push(Folded {
                g_state: gs,
                g_next,
                action: act,
                reward: r,
                done: false,
            });
            self.pending.pop_front();
        }
        out
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

// ----------------------------------------------------------------- buffer --

/// Ring of folded transitions over a shared frame ring. FIFO eviction at
/// `capacity`; stack reconstruction happens at sampling time.
pub struct ReplayBuffer<A: Clone> {
    capacity: usize,
    frame_stack: usize,
    frame_hw: usize,
    frames: FrameRing,
    items: Vec<Option<Stored<A>>>,
    trans_total: u64,
    folder: Folder<A>,
    oldest_valid: u64,
    in_episode: bool,
    idx_in_ep: u32,
    last_g: u64,
}

impl<A: Clone> ReplayBuffer<A> {
    /// `frame_hw` is H*W pixels of a single frame; `n_step` >= 1.
    pub fn new(capacity: usize, frame_stack: usize, frame_hw: usize, n_step: usize, gamma: f32) -> Self {
        // Frames outlive their transitions: one extra start frame per
        // episode, so a 1/3 margin covers episodes of >= 3 steps.
        let frame_cap = capacity + capacity / 3 + 64;
        ReplayBuffer {
            capacity,
            frame_stack,
            frame_hw,
            frames: FrameRing::new(frame_cap, frame_hw),
            items: vec![None; capacity],
            trans_total: 0,
            folder: Folder::new(n_step, gamma),
            oldest_valid: 0,
            in_episode: false,
            idx_in_ep: 0,
            last_g: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn newest_frame<'a>(&self, stack: &'a Tensor<f32>) -> &'a [f32] {
        let data = stack.data();
        &data[data.len() - self.frame_hw..]
    }

    /// Store one raw environment transition. Returns the number of folded
    /// transitions that became sampleable.
    pub fn push(&mut self, step: PushStep<'_, A>) -> usize {
        if !self.in_episode {
            // Episode-start frame: the reset stack repeats its first frame,
            // so the newest frame of `state` is the episode's first frame.
            self.last_g = self.frames.push(self.newest_frame(step.state), 0);
            self.idx_in_ep = 0;
            self.in_episode = true;
        }
        let g_state = self.last_g;
        self.idx_in_ep += 1;
        let g_next = self.frames.push(self.newest_frame(step.next_state), self.idx_in_ep);
        self.last_g = g_next;
        let folded = self
            .folder
            .push(g_state, step.action, step.reward, g_next, step.done);
        let emitted = folded.len();
        for f in folded {
            self.store(f);
        }
        if step.done {
            self.in_episode = false;
        }
        emitted
    }

    fn store(&mut self, f: Folded<A>) -> usize {
        let slot = (self.trans_total % self.capacity as u64) as usize;
        self.items[slot] = Some(Stored {
            global: self.trans_total,
            g_state: f.g_state,
            g_next: f.g_next,
            action: f.action,
            reward: f.reward,
            done: f.done,
        });
        self.trans_total += 1;
        slot
    }

    fn advance_oldest_valid(&mut self) {
        let floor = self.trans_total.saturating_sub(self.capacity as u64);
        if self.oldest_valid < floor {
            self.oldest_valid = floor;
        }
        while self.oldest_valid < self.trans_total {
            let slot = (self.oldest_valid % self.capacity as u64) as usize;
            match &self.items[slot] {
                Some(s) if s.global == self.oldest_valid && self.frames.present(s.g_state) => break,
                _ => self.oldest_valid += 1,
            }
        }
    }

    /// Number of currently sampleable transitions.
    pub fn len(&mut self) -> usize {
        self.advance_oldest_valid();
        (self.trans_total - self.oldest_valid) as usize
    }

    pub fn is_empty(&mut self) -> bool {
        self.len() == 0
    }

    fn stored(&self, global: u64) -> Option<&Stored<A>> {
        let slot = (global % self.capacity as u64) as usize;
        match &self.items[slot] {
            Some(s) if s.global == global && self.frames.present(s.g_state) => Some(s),
            _ => None,
        }
    }

    fn decode(&self, picks: &[u64]) -> Batch<A> {
        let b = picks.len();
        let k = self.frame_stack;
        let hw = self.frame_hw;
        let mut states = vec![0f32; b * k * hw];
        let mut next_states = vec![0f32; b * k * hw];
        let mut actions = Vec::with_capacity(b);
        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        for (i, &g) in picks.iter().enumerate() {
            let s = self.stored(g).expect("validity checked before decode");
            self.frames
                .stack_into(s.g_state, k, &mut states[i * k * hw..(i + 1) * k * hw]);
            self.frames
                .stack_into(s.g_next, k, &mut next_states[i * k * hw..(i + 1) * k * hw]);
            actions.push(s.action.clone());
            rewards.push(s.reward);
            dones.push(s.done);
        }
        let side = (hw as f64).sqrt() as usize;
        debug_assert_eq!(side * side, hw, "frames are square");
        Batch {
            states: Tensor::new(states, &[b, k, side, side]),
            actions,
            rewards,
            next_states: Tensor::new(next_states, &[b, k, side, side]),
            dones,
        }
    }

    /// Uniform i.i.d. sampling with replacement.
    pub fn sample_uniform(
        &mut self,
        batch_size: usize,
        min_fill: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Batch<A>, ReplayError> {
        let have = self.len();
        let need = min_fill.max(1);
        if have < need {
            return Err(ReplayError::UnderFilled { have, need });
        }
        let lo = self.oldest_valid;
        let hi = self.trans_total;
        let picks: Vec<u64> = (0..batch_size).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(self.decode(&picks))
    }
}

// --------------------------------------------------------------- sum tree --

/// Sum tree over `capacity` leaves with f64 internal sums. Leaves store
/// priorities already raised to the alpha power.
pub struct SumTree {
    capacity: usize,
    tree: Vec<f64>,
    pub alpha: f64,
    pub max_priority: f64,
}

impl SumTree {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        SumTree {
            capacity,
            tree: vec![0f64; 2 * capacity],
            alpha,
            max_priority: 1.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.tree[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.tree[self.capacity + leaf]
    }

    /// Store an already-exponentiated priority at a leaf.
    pub fn set(&mut self, leaf: usize, p: f64) {
        debug_assert!(leaf < self.capacity);
        let mut i = self.capacity + leaf;
        self.tree[i] = p;
        while i > 1 {
            i /= 2;
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1];
        }
    }

    /// Apply (|td| + eps)^alpha and store; tracks the running max.
    pub fn update_from_td(&mut self, leaf: usize, td_error: f64, eps: f64) {
        let p = (td_error.abs() + eps).powf(self.alpha);
        self.max_priority = self.max_priority.max(p);
        self.set(leaf, p);
    }

    /// Descend to the leaf covering cumulative mass `s` in [0, total).
    pub fn find(&self, s: f64) -> usize {
        let mut i = 1;
        let mut s = s;
        while i < self.capacity {
            let left = 2 * i;
            if s < self.tree[left] {
                i = left;
            } else {
                s -= self.tree[left];
                i = left + 1;
            }
        }
        i - self.capacity
    }
}

// ---------------------------------------------------------- prioritized --

/// Prioritized replay: a [`ReplayBuffer`] plus a [`SumTree`] keyed by
/// transition slot. New transitions enter at the running max priority.
pub struct PrioritizedReplay<A: Clone> {
    pub buffer: ReplayBuffer<A>,
    pub tree: SumTree,
    pub beta: f64,
    pub priority_eps: f64,
}

impl<A: Clone> PrioritizedReplay<A> {
    pub fn new(
        capacity: usize,
        frame_stack: usize,
        frame_hw: usize,
        n_step: usize,
        gamma: f32,
        alpha: f64,
        beta0: f64,
    ) -> Self {
        PrioritizedReplay {
            buffer: ReplayBuffer::new(capacity, frame_stack, frame_hw, n_step, gamma),
            tree: SumTree::new(capacity, alpha),
            beta: beta0,
            priority_eps: 1e-6,
        }
    }

    pub fn push(&mut self, step: PushStep<'_, A>) {
        let before = self.buffer.trans_total;
        self.buffer.push(step);
        for g in before..self.buffer.trans_total {
            let slot = (g % self.buffer.capacity as u64) as usize;
            let p = self.tree.max_priority;
            self.tree.set(slot, p);
        }
    }

    pub fn len(&mut self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&mut self) -> bool {
        self.buffer.len() == 0
    }

    /// Stratified proportional sampling. Returns the batch, sample
    /// references for priority updates, and importance weights normalized by
    /// the batch maximum (all weights in (0, 1]).
    pub fn sample(
        &mut self,
        batch_size: usize,
        min_fill: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Batch<A>, Vec<SampleRef>, Vec<f32>), ReplayError> {
        let have = self.buffer.len();
        let need = min_fill.max(1);
        if have < need {
            return Err(ReplayError::UnderFilled { have, need });
        }
        let total = self.tree.total();
        debug_assert!(total > 0.0, "sum tree empty despite filled buffer");
        let seg = total / batch_size as f64;
        let mut refs = Vec::with_capacity(batch_size);
        let mut picks = Vec::with_capacity(batch_size);
        let mut probs = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let u: f64 = rng.gen::<f64>();
            let s = (i as f64 + u) * seg;
            let mut slot = self.tree.find(s.min(total * (1.0 - 1e-12)));
            // A slot can hold an evicted or boundary-invalid transition;
            // scan forward deterministically to the next valid one.
            let mut hops = 0;
            let global = loop {
                if let Some(st) = self.slot_stored(slot) {
                    break st.global;
                }
                slot = (slot + 1) % self.buffer.capacity;
                hops += 1;
                assert!(hops <= self.buffer.capacity, "no valid transition found");
            };
            refs.push(SampleRef { slot, global });
            picks.push(global);
            probs.push(self.tree.get(slot) / total);
        }
        let n = have as f64;
        let mut weights: Vec<f64> = probs.iter().map(|&p| (n * p).powf(-self.beta)).collect();
        let wmax = weights.iter().cloned().fold(f64::MIN, f64::max);
        for w in weights.iter_mut() {
            *w /= wmax;
        }
        let batch = self.buffer.decode(&picks);
        Ok((batch, refs, weights.into_iter().map(|w| w as f32).collect()))
    }

    fn slot_stored(&self, slot: usize) -> Option<&Stored<A>> {
        match &self.buffer.items[slot] {
            Some(s)
                if s.global >= self.buffer.oldest_valid
                    && self.buffer.frames.present(s.g_state) =>
            {
                Some(s)
            }
            _ => None,
        }
    }

    /// Write new priorities for the most recent sample. References whose
    /// slot was overwritten since the sample are skipped silently.
    pub fn update_priorities(&mut self, refs: &[SampleRef], td_errors: &[f32]) {
        debug_assert_eq!(refs.len(), td_errors.len());
        for (r, &td) in refs.iter().zip(td_errors) {
            let still_there = matches!(
                &self.buffer.items[r.slot],
                Some(s) if s.global == r.global
            );
            if !still_there {
                continue;
            }
            self.tree
                .update_from_td(r.slot, td as f64, self.priority_eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    fn frame(v: f32, hw: usize) -> Tensor<f32> {
        Tensor::full(&[1, hw, 1], v)
    }

    /// Push a full episode of given rewards with distinguishable frames.
    fn push_episode(buf: &mut ReplayBuffer<usize>, rewards: &[f32], tag: f32) {
        let hw = buf.frame_hw;
        let mut prev = frame(tag, hw);
        for (i, &r) in rewards.iter().enumerate() {
            let next = frame(tag + (i + 1) as f32 / 255.0, hw);
            buf.push(PushStep {
                state: &prev,
                action: i,
                reward: r,
                next_state: &next,
                done: i + 1 == rewards.len(),
            });
            prev = next;
        }
    }

    #[test]
    fn fifo_eviction_keeps_newest() {
        // capacity 2, push 3 one-step transitions -> items 2 and 3 remain
        let mut buf = ReplayBuffer::<usize>::new(2, 1, 4, 1, 0.99);
        push_episode(&mut buf, &[1.0], 0.1);
        push_episode(&mut buf, &[2.0], 0.2);
        push_episode(&mut buf, &[3.0], 0.3);
        assert_eq!(buf.len(), 2);
        let rewards: Vec<f32> = (buf.oldest_valid..buf.trans_total)
            .map(|g| buf.stored(g).unwrap().reward)
            .collect();
        assert_eq!(rewards, vec![2.0, 3.0]);
    }

    #[test]
    fn push_to_empty_gives_size_one() {
        let mut buf = ReplayBuffer::<usize>::new(8, 1, 4, 1, 0.99);
        push_episode(&mut buf, &[1.0], 0.5);
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn single_item_sampled_with_replacement() {
        let mut buf = ReplayBuffer::<usize>::new(8, 1, 4, 1, 0.99);
        push_episode(&mut buf, &[7.0], 0.5);
        let mut rng = derive(1, Stream::Replay);
        let batch = buf.sample_uniform(4, 1, &mut rng).unwrap();
        assert_eq!(batch.rewards, vec![7.0; 4]);
    }

    #[test]
    fn underfilled_sampling_errors() {
        let mut buf = ReplayBuffer::<usize>::new(8, 1, 4, 1, 0.99);
        push_episode(&mut buf, &[1.0], 0.5);
        let mut rng = derive(1, Stream::Replay);
        assert!(matches!(
            buf.sample_uniform(1, 5, &mut rng),
            Err(ReplayError::UnderFilled { have: 1, need: 5 })
        ));
    }

    #[test]
    fn uniform_sampling_frequencies_within_3_sigma() {
        let mut buf = ReplayBuffer::<usize>::new(16, 1, 4, 1, 0.99);
        for i in 0..10 {
            push_episode(&mut buf, &[i as f32], i as f32 / 10.0);
        }
        let mut rng = derive(2, Stream::Replay);
        let n_draws = 100_000;
        let mut counts = vec![0usize; 10];
        let batch = 10;
        for _ in 0..n_draws / batch {
            let b = buf.sample_uniform(batch, 1, &mut rng).unwrap();
            for &r in &b.rewards {
                counts[r as usize] += 1;
            }
        }
        let p = 0.1f64;
        let sigma = (p * (1.0 - p) * n_draws as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - p * n_draws as f64).abs();
            assert!(dev < 3.0 * sigma, "index {i}: count {c}");
        }
    }

    #[test]
    fn nstep_one_is_identity() {
        let mut f = Folder::<u8>::new(1, 0.5);
        let out = f.push(0, 9, 2.5, 1, false);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].reward, 2.5);
        assert_eq!(out[0].g_state, 0);
        assert_eq!(out[0].g_next, 1);
        assert!(!out[0].done);
    }

    #[test]
    fn nstep_three_folds_discounted_sum() {
        // rewards (1, 1, 1), gamma 0.5 -> 1.75
        let mut f = Folder::<u8>::new(3, 0.5);
        assert!(f.push(0, 0, 1.0, 1, false).is_empty());
        assert!(f.push(1, 0, 1.0, 2, false).is_empty());
        let out = f.push(2, 0, 1.0, 3, false);
        assert_eq!(out.len(), 1);
        assert!((out[0].reward - 1.75).abs() < 1e-6);
        assert_eq!(out[0].g_next, 3);
        assert!(!out[0].done);
    }

    #[test]
    fn nstep_truncates_at_episode_end() {
        // episode ends after 2 steps with rewards (1, 1), gamma 0.5:
        // front fold = 1.5 (terminal), second fold = 1.0 (terminal)
        let mut f = Folder::<u8>::new(3, 0.5);
        assert!(f.push(0, 0, 1.0, 1, false).is_empty());
        let out = f.push(1, 0, 1.0, 2, true);
        assert_eq!(out.len(), 2);
        assert!((out[0].reward - 1.5).abs() < 1e-6);
        assert!(out[0].done);
        assert_eq!(out[0].g_next, 2);
        assert!((out[1].reward - 1.0).abs() < 1e-6);
        assert!(out[1].done);
    }

    #[test]
    fn stacks_clamp_at_episode_start() {
        let mut buf = ReplayBuffer::<usize>::new(8, 3, 4, 1, 0.99);
        push_episode(&mut buf, &[1.0, 2.0, 3.0], 40.0 / 255.0);
        let mut rng = derive(3, Stream::Replay);
        // Find the first transition of the episode: its state stack must be
        // the start frame repeated 3 times.
        let batch = buf.sample_uniform(32, 1, &mut rng).unwrap();
        let hw = 4;
        let k = 3;
        for (i, &r) in batch.rewards.iter().enumerate() {
            if r == 1.0 {
                let s = &batch.states.data()[i * k * hw..(i + 1) * k * hw];
                assert_eq!(&s[..hw], &s[hw..2 * hw]);
                assert_eq!(&s[..hw], &s[2 * hw..]);
                return;
            }
        }
        panic!("first transition never sampled in 32 draws");
    }

    #[test]
    fn sum_tree_root_matches_linear_scan() {
        let mut tree = SumTree::new(128, 0.5);
        let mut rng = derive(4, Stream::Replay);
        let mut leaves = vec![0f64; 128];
        for _ in 0..1000 {
            let leaf = rng.gen_range(0..128);
            let td = rng.gen::<f64>() * 4.0 - 2.0;
            tree.update_from_td(leaf, td, 1e-6);
            leaves[leaf] = (td.abs() + 1e-6).powf(0.5);
        }
        let scan: f64 = leaves.iter().sum();
        let rel = (tree.total() - scan).abs() / scan;
        assert!(rel < 1e-4, "root {} vs scan {}", tree.total(), scan);
    }

    #[test]
    fn zero_td_gets_floor_priority() {
        let mut tree = SumTree::new(4, 0.5);
        tree.update_from_td(0, 0.0, 1e-6);
        let want = 1e-6f64.powf(0.5);
        assert!((tree.get(0) - want).abs() < 1e-12);
    }

    #[test]
    fn prioritized_ratio_three_to_one() {
        let mut per = PrioritizedReplay::<usize>::new(8, 1, 4, 1, 0.99, 1.0, 1.0);
        push_two_items(&mut per);
        // priorities 3 and 1 with alpha=1
        per.tree.set(0, 3.0);
        per.tree.set(1, 1.0);
        let mut rng = derive(5, Stream::Replay);
        let n = 100_000usize;
        let mut count0 = 0usize;
        for _ in 0..n / 10 {
            let (batch, _, _) = per.sample(10, 1, &mut rng).unwrap();
            count0 += batch.rewards.iter().filter(|&&r| r == 0.0).count();
        }
        let p = 0.75f64;
        let sigma = (p * (1.0 - p) * n as f64).sqrt();
        let dev = (count0 as f64 - p * n as f64).abs();
        assert!(dev < 3.0 * sigma, "count {count0} deviates {dev:.1}");
    }

    fn push_two_items(per: &mut PrioritizedReplay<usize>) {
        let hw = 4;
        for i in 0..2 {
            let s = frame(0.1 * (i + 1) as f32, hw);
            let ns = frame(0.1 * (i + 1) as f32 + 0.01, hw);
            per.push(PushStep {
                state: &s,
                action: i,
                reward: i as f32,
                next_state: &ns,
                done: true,
            });
        }
    }

    #[test]
    fn importance_weights_match_closed_form() {
        // beta = 1, priorities {3, 1}, N = 2: raw weights {2/3, 2},
        // normalized {1/3, 1}.
        let mut per = PrioritizedReplay::<usize>::new(8, 1, 4, 1, 0.99, 1.0, 1.0);
        push_two_items(&mut per);
        per.tree.set(0, 3.0);
        per.tree.set(1, 1.0);
        let mut rng = derive(6, Stream::Replay);
        // Sample until a batch contains both items, then check weights.
        for _ in 0..100 {
            let (batch, _refs, w) = per.sample(8, 1, &mut rng).unwrap();
            let mut w0 = None;
            let mut w1 = None;
            for (i, &r) in batch.rewards.iter().enumerate() {
                if r == 0.0 {
                    w0 = Some(w[i]);
                } else {
                    w1 = Some(w[i]);
                }
            }
            if let (Some(w0), Some(w1)) = (w0, w1) {
                assert!((w0 - 1.0 / 3.0).abs() < 1e-5, "w0 {w0}");
                assert!((w1 - 1.0).abs() < 1e-5, "w1 {w1}");
                assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
                return;
            }
        }
        panic!("never drew both items");
    }

    #[test]
    fn stale_priority_update_is_skipped() {
        let mut per = PrioritizedReplay::<usize>::new(2, 1, 4, 1, 0.99, 1.0, 1.0);
        push_two_items(&mut per);
        let mut rng = derive(7, Stream::Replay);
        let (_b, refs, _w) = per.sample(2, 1, &mut rng).unwrap();
        // Evict everything by pushing two more episodes.
        push_two_items(&mut per);
        push_two_items(&mut per);
        let before: Vec<f64> = (0..2).map(|i| per.tree.get(i)).collect();
        per.update_priorities(&refs, &[100.0, 100.0]);
        let after: Vec<f64> = (0..2).map(|i| per.tree.get(i)).collect();
        assert_eq!(before, after, "stale refs must not touch the tree");
    }

    #[test]
    fn equal_priorities_sample_uniformly() {
        let mut per = PrioritizedReplay::<usize>::new(16, 1, 4, 1, 0.99, 1.0, 0.4);
        let hw = 4;
        for i in 0..8 {
            let s = frame(i as f32 / 16.0, hw);
            let ns = frame(i as f32 / 16.0 + 0.01, hw);
            per.push(PushStep {
                state: &s,
                action: i,
                reward: i as f32,
                next_state: &ns,
                done: true,
            });
        }
        let mut rng = derive(8, Stream::Replay);
        let n = 100_000usize;
        let mut counts = vec![0usize; 8];
        for _ in 0..n / 8 {
            let (batch, _, _) = per.sample(8, 1, &mut rng).unwrap();
            for &r in &batch.rewards {
                counts[r as usize] += 1;
            }
        }
        let p = 1.0 / 8.0;
        let sigma = (p * (1.0 - p) * n as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - p * n as f64).abs();
            assert!(dev < 3.0 * sigma, "leaf {i}: count {c}");
        }
    }
}
