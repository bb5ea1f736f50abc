use std::collections::{BTreeSet, VecDeque};

/// Listener ports of one node. Fresh ports are handed out in increasing
/// order; released ports go to the back of a queue and are reused only once
/// the fresh range is spent.
#[derive(Debug, Clone)]
pub struct PortPool {
    start: u16,
    next: u32,
    end: u16,
    freed: VecDeque<u16>,
    in_use: BTreeSet<u16>,
}

impl PortPool {
    pub fn new(start: u16, end: u16) -> Self {
        PortPool {
            start,
            next: u32::from(start),
            end,
            freed: VecDeque::new(),
            in_use: BTreeSet::new(),
        }
    }

    pub fn allocate(&mut self) -> Option<u16> {
        while self.next <= u32::from(self.end) {
            let p = self.next as u16;
            self.next += 1;
            if self.in_use.insert(p) {
                return Some(p);
            }
        }
        while let Some(p) = self.freed.pop_front() {
            if self.in_use.insert(p) {
                return Some(p);
            }
        }
        None
    }

    /// Claims a specific port (a gateway's fixed port). False if taken.
    pub fn claim(&mut self, port: u16) -> bool {
        self.in_use.insert(port)
    }

    pub fn is_used(&self, port: u16) -> bool {
        self.in_use.contains(&port)
    }

    pub fn release(&mut self, port: u16) {
        if self.in_use.remove(&port) && port >= self.start && u32::from(port) < self.next {
            self.freed.push_back(port);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_before_freed() {
        let mut p = PortPool::new(20000, 20003);
        assert_eq!(p.allocate(), Some(20000));
        assert_eq!(p.allocate(), Some(20001));
        p.release(20000);
        assert_eq!(p.allocate(), Some(20002));
        assert_eq!(p.allocate(), Some(20003));
        assert_eq!(p.allocate(), Some(20000));
        assert_eq!(p.allocate(), None);
    }

    #[test]
    fn claimed_ports_are_skipped() {
        let mut p = PortPool::new(20000, 20002);
        assert!(p.claim(20001));
        assert!(!p.claim(20001));
        assert_eq!(p.allocate(), Some(20000));
        assert_eq!(p.allocate(), Some(20002));
        p.release(20001);
        assert_eq!(p.allocate(), Some(20001));
        // fixed ports outside the range never enter the reuse queue
        assert!(p.claim(80));
        p.release(80);
        assert!(!p.is_used(80));
        assert_eq!(p.allocate(), None);
    }
}
