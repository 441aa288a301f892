use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::message::FrameMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelPolicy {
    /// Bounded queue; when full the oldest message is dropped.
    Fifo { capacity: usize },
    /// Holds only the newest message.
    LatestOnly,
}

impl ChannelPolicy {
    pub fn capacity(&self) -> usize {
        match *self {
            ChannelPolicy::Fifo { capacity } => capacity,
            ChannelPolicy::LatestOnly => 1,
        }
    }
}

/// Per-consumer queue of one channel.
#[derive(Debug, Clone)]
pub struct ChannelQueue {
    policy: ChannelPolicy,
    queue: VecDeque<FrameMessage>,
    dropped: u64,
}

impl ChannelQueue {
    pub fn new(policy: ChannelPolicy) -> Self {
        ChannelQueue {
            policy,
            queue: VecDeque::new(),
            dropped: 0,
        }
    }

    pub fn policy(&self) -> ChannelPolicy {
        self.policy
    }

    pub fn push(&mut self, msg: FrameMessage) {
        while self.queue.len() >= self.policy.capacity().max(1) {
            self.queue.pop_front();
            self.dropped += 1;
        }
        self.queue.push_back(msg);
    }

    pub fn pop(&mut self) -> Option<FrameMessage> {
        self.queue.pop_front()
    }

    pub fn front(&self) -> Option<&FrameMessage> {
        self.queue.front()
    }

    pub fn peek_latest(&self) -> Option<&FrameMessage> {
        self.queue.back()
    }

    /// Removes everything and returns the newest message.
    pub fn take_latest(&mut self) -> Option<FrameMessage> {
        let last = self.queue.pop_back();
        self.dropped += self.queue.len() as u64;
        self.queue.clear();
        last
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkernel::SimTime;
    use proptest::prelude::*;

    fn msg(seq: u64) -> FrameMessage {
        FrameMessage::empty(seq, SimTime::from_micros(seq), SimTime::MAX)
    }

    #[test]
    fn fifo_drops_oldest() {
        let mut q = ChannelQueue::new(ChannelPolicy::Fifo { capacity: 2 });
        for s in 0..4 {
            q.push(msg(s));
        }
        assert_eq!(q.len(), 2);
        assert_eq!(q.dropped(), 2);
        assert_eq!(q.pop().unwrap().seq, 2);
        assert_eq!(q.pop().unwrap().seq, 3);
        assert!(q.pop().is_none());
    }

    proptest! {
        #[test]
        fn latest_only_delivers_newest(k in 1u64..50) {
            let mut q = ChannelQueue::new(ChannelPolicy::LatestOnly);
            for s in 0..k {
                q.push(msg(s));
                prop_assert!(q.len() <= 1);
            }
            prop_assert_eq!(q.pop().map(|m| m.seq), Some(k - 1));
            prop_assert!(q.pop().is_none());
        }

        #[test]
        fn fifo_never_exceeds_capacity(cap in 1usize..8, k in 0u64..40) {
            let mut q = ChannelQueue::new(ChannelPolicy::Fifo { capacity: cap });
            for s in 0..k {
                q.push(msg(s));
                prop_assert!(q.len() <= cap);
            }
        }
    }
}
