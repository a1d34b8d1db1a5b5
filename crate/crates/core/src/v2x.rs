//! Time-indexed V2X collector.
//!
//! Producers deposit tick-stamped payloads; a consumer at tick `t` sees the
//! newest item whose delivery tick is `<= t`. Each key owns a bounded
//! append-only log published through an atomically swapped snapshot, so
//! readers never take a lock and never wait on writers.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};

use crate::clock::SimClock;

/// Items retained per key.
pub const RETENTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Waypoints,
    VehicleState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key {
    pub vehicle_id: u32,
    pub kind: PayloadKind,
}

impl Key {
    pub fn new(vehicle_id: u32, kind: PayloadKind) -> Self {
        Self { vehicle_id, kind }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedItem<T> {
    pub key: Key,
    pub produced_tick: u64,
    pub delivery_tick: u64,
    pub payload: T,
}

struct KeyLog<T> {
    items: ArcSwap<Vec<Arc<TimedItem<T>>>>,
    append: Mutex<()>,
}

impl<T> KeyLog<T> {
    fn new() -> Self {
        Self {
            items: ArcSwap::from_pointee(Vec::new()),
            append: Mutex::new(()),
        }
    }
}

pub struct Collector<T> {
    logs: ArcSwap<HashMap<Key, Arc<KeyLog<T>>>>,
    new_key: Mutex<()>,
    retention: usize,
}

impl<T> Default for Collector<T> {
    fn default() -> Self {
        Self::with_retention(RETENTION)
    }
}

impl<T> std::fmt::Debug for Collector<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Collector")
            .field("keys", &self.logs.load().len())
            .field("retention", &self.retention)
            .finish()
    }
}

impl<T> Collector<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_retention(retention: usize) -> Self {
        assert!(retention > 0, "retention must be positive");
        Self {
            logs: ArcSwap::from_pointee(HashMap::new()),
            new_key: Mutex::new(()),
            retention,
        }
    }

    fn log_for(&self, key: Key) -> Arc<KeyLog<T>> {
        if let Some(log) = self.logs.load().get(&key) {
            return Arc::clone(log);
        }
        let _guard = self.new_key.lock().expect("collector key lock poisoned");
        let current = self.logs.load_full();
        if let Some(log) = current.get(&key) {
            return Arc::clone(log);
        }
        let log = Arc::new(KeyLog::new());
        let mut next = HashMap::clone(&current);
        next.insert(key, Arc::clone(&log));
        self.logs.store(Arc::new(next));
        log
    }

    /// Deposits with emulated latency; returns the delivery tick.
    pub fn deposit(
        &self,
        key: Key,
        payload: T,
        produced_tick: u64,
        latency_ms: f64,
        clock: &SimClock,
    ) -> u64 {
        assert!(latency_ms >= 0.0, "latency must be non-negative");
        let delivery_tick = produced_tick + clock.ticks_for_ms(latency_ms);
        self.deposit_at(key, payload, produced_tick, delivery_tick);
        delivery_tick
    }

    /// Deposits an item whose delivery tick was computed elsewhere.
    pub fn deposit_at(&self, key: Key, payload: T, produced_tick: u64, delivery_tick: u64) {
        assert!(delivery_tick >= produced_tick, "delivery before production");
        let log = self.log_for(key);
        let item = Arc::new(TimedItem {
            key,
            produced_tick,
            delivery_tick,
            payload,
        });
        let _guard = log.append.lock().expect("collector append lock poisoned");
        let current = log.items.load();
        let mut next: Vec<Arc<TimedItem<T>>> = Vec::with_capacity(current.len() + 1);
        next.extend(current.iter().cloned());
        // Equal delivery ticks keep deposit order; the later deposit wins.
        let at = next.partition_point(|i| i.delivery_tick <= delivery_tick);
        next.insert(at, item);
        if next.len() > self.retention {
            let excess = next.len() - self.retention;
            next.drain(..excess);
        }
        log.items.store(Arc::new(next));
    }

    /// Newest item visible at `now_tick`. Never blocks.
    pub fn fetch_latest(&self, key: Key, now_tick: u64) -> Option<Arc<TimedItem<T>>> {
        let logs = self.logs.load();
        let log = logs.get(&key)?;
        let items = log.items.load();
        let visible = items.partition_point(|i| i.delivery_tick <= now_tick);
        visible.checked_sub(1).map(|i| Arc::clone(&items[i]))
    }

    pub fn len(&self, key: Key) -> usize {
        self.logs
            .load()
            .get(&key)
            .map(|log| log.items.load().len())
            .unwrap_or(0)
    }

    pub fn is_empty(&self, key: Key) -> bool {
        self.len(key) == 0
    }
}
