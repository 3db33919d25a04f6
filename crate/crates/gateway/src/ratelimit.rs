//! Per-client token buckets.
//!
//! Each client draws from its own bucket, so a flood from one source drains
//! only that source's allowance. The table is bounded: when it is full, idle
//! (full) buckets are evicted first, then the least recently used.

use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
struct Bucket {
    tokens: f64,
    updated: u64,
    last_seen: u64,
}

#[derive(Debug, Clone)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    max_clients: usize,
    buckets: HashMap<String, Bucket>,
    tick: u64,
}

impl RateLimiter {
    pub fn new(capacity: u32, refill_per_sec: u32, max_clients: usize) -> Self {
        Self {
            capacity: f64::from(capacity),
            refill_per_sec: f64::from(refill_per_sec),
            max_clients: max_clients.max(1),
            buckets: HashMap::new(),
            tick: 0,
        }
    }

    /// Takes one token from `client`'s bucket at time `now` (seconds).
    pub fn allow(&mut self, client: &str, now: u64) -> bool {
        self.tick += 1;
        if !self.buckets.contains_key(client) && self.buckets.len() >= self.max_clients {
            self.evict(now);
        }
        let (capacity, refill, tick) = (self.capacity, self.refill_per_sec, self.tick);
        let bucket = self.buckets.entry(client.to_string()).or_insert(Bucket {
            tokens: capacity,
            updated: now,
            last_seen: tick,
        });
        let elapsed = now.saturating_sub(bucket.updated) as f64;
        bucket.tokens = (bucket.tokens + elapsed * refill).min(capacity);
        bucket.updated = bucket.updated.max(now);
        bucket.last_seen = tick;
        if bucket.tokens >= 1.0 {
            bucket.tokens -= 1.0;
            true
        } else {
            false
        }
    }

    pub fn clients(&self) -> usize {
        self.buckets.len()
    }

    fn evict(&mut self, now: u64) {
        let (capacity, refill) = (self.capacity, self.refill_per_sec);
        self.buckets
            .retain(|_, b| b.tokens + now.saturating_sub(b.updated) as f64 * refill < capacity);
        if self.buckets.len() >= self.max_clients {
            if let Some(oldest) = self
                .buckets
                .iter()
                .min_by_key(|(_, b)| b.last_seen)
                .map(|(k, _)| k.clone())
            {
                self.buckets.remove(&oldest);
            }
        }
    }
}
