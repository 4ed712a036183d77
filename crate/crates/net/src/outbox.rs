//! Per-connection send queue. Frames are capped and the oldest one is
//! dropped when the cap is hit (latest wins); other messages are never
//! dropped.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

pub const DEFAULT_FRAME_CAP: usize = 32;

struct Item {
    bytes: Arc<Vec<u8>>,
    is_frame: bool,
}

#[derive(Default)]
struct State {
    items: VecDeque<Item>,
    frames: usize,
    dropped: u64,
    closed: bool,
}

pub struct Outbox {
    cap: usize,
    state: Mutex<State>,
    cv: Condvar,
}

impl Outbox {
    pub fn new(frame_cap: usize) -> Self {
        Self {
            cap: frame_cap.max(1),
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
        }
    }

    pub fn push(&self, bytes: Arc<Vec<u8>>) {
        self.enqueue(bytes, false);
    }

    pub fn push_frame(&self, bytes: Arc<Vec<u8>>) {
        self.enqueue(bytes, true);
    }

    fn enqueue(&self, bytes: Arc<Vec<u8>>, is_frame: bool) {
        let mut s = self.state.lock().unwrap();
        if s.closed {
            return;
        }
        if is_frame {
            if s.frames == self.cap {
                let i = s.items.iter().position(|it| it.is_frame).unwrap();
                s.items.remove(i);
                s.frames -= 1;
                s.dropped += 1;
            }
            s.frames += 1;
        }
        s.items.push_back(Item { bytes, is_frame });
        self.cv.notify_one();
    }

    /// Discards every queued frame.
    pub fn purge_frames(&self) {
        let mut s = self.state.lock().unwrap();
        s.items.retain(|it| !it.is_frame);
        s.frames = 0;
    }

    /// Blocks up to `timeout` for the next message. `Err(())` once closed
    /// and drained.
    pub fn pop(&self, timeout: Duration) -> Result<Option<Arc<Vec<u8>>>, ()> {
        let mut s = self.state.lock().unwrap();
        if s.items.is_empty() && !s.closed {
            s = self.cv.wait_timeout(s, timeout).unwrap().0;
        }
        match s.items.pop_front() {
            Some(it) => {
                if it.is_frame {
                    s.frames -= 1;
                }
                Ok(Some(it.bytes))
            }
            None if s.closed => Err(()),
            None => Ok(None),
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.cv.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    pub fn dropped_frames(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: u8) -> Arc<Vec<u8>> {
        Arc::new(vec![v])
    }

    #[test]
    fn oldest_frame_dropped_controls_kept() {
        let o = Outbox::new(3);
        o.push(b(100));
        for i in 0..5 {
            o.push_frame(b(i));
        }
        o.push(b(101));
        let got: Vec<u8> = std::iter::from_fn(|| o.pop(Duration::ZERO).unwrap()).map(|v| v[0]).collect();
        assert_eq!(got, vec![100, 2, 3, 4, 101]);
        assert_eq!(o.dropped_frames(), 2);
    }

    #[test]
    fn purge_and_close() {
        let o = Outbox::new(4);
        o.push_frame(b(1));
        o.push(b(2));
        o.purge_frames();
        o.close();
        assert_eq!(o.pop(Duration::ZERO).unwrap().unwrap()[0], 2);
        assert!(o.pop(Duration::ZERO).is_err());
    }
}
