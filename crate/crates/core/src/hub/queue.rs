//! Bounded FIFO shared between producers and consumers.

use std::collections::VecDeque;

use parking_lot::Mutex;

use super::HubError;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug)]
pub struct BoundedQueue<T> {
    items: Mutex<VecDeque<T>>,
    capacity: usize,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Mutex::new(VecDeque::new()),
            capacity,
        }
    }

    pub fn push(&self, item: T) -> Result<(), HubError> {
        let mut q = self.items.lock();
        if q.len() >= self.capacity {
            return Err(HubError::QueueFull {
                capacity: self.capacity,
            });
        }
        q.push_back(item);
        Ok(())
    }

    pub fn pop(&self) -> Option<T> {
        self.items.lock().pop_front()
    }

    /// Pops the head only if `accept` returns true for it.
    pub fn pop_if(&self, accept: impl FnOnce(&T) -> bool) -> Option<T> {
        let mut q = self.items.lock();
        if q.front().is_some_and(accept) {
            q.pop_front()
        } else {
            None
        }
    }

    pub fn with_front<R>(&self, f: impl FnOnce(Option<&T>) -> R) -> R {
        f(self.items.lock().front())
    }

    pub fn len(&self) -> usize {
        self.items.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.lock().is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

impl<T: Clone> BoundedQueue<T> {
    /// Copy of the contents, head first.
    pub fn snapshot(&self) -> Vec<T> {
        self.items.lock().iter().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_and_backpressure() {
        let q = BoundedQueue::new(DEFAULT_QUEUE_CAPACITY);
        for i in 0..DEFAULT_QUEUE_CAPACITY {
            q.push(i).unwrap();
        }
        assert!(matches!(q.push(9999), Err(HubError::QueueFull { capacity: 1024 })));
        assert_eq!(q.pop_if(|&h| h == 1), None);
        assert_eq!(q.pop(), Some(0));
        assert_eq!(q.pop_if(|&h| h == 1), Some(1));
        assert_eq!(q.len(), DEFAULT_QUEUE_CAPACITY - 2);
    }
}
