use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

/// Bounds concurrent requests and paces request starts at a fixed rate.
#[derive(Debug)]
pub struct Throttle {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

/// Holds one in-flight slot until dropped.
#[derive(Debug)]
pub struct Permit<'a> {
    throttle: &'a Throttle,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.throttle.in_flight.lock().expect("throttle poisoned");
        *n -= 1;
        self.throttle.released.notify_one();
    }
}

impl Throttle {
    pub fn new(max_in_flight: usize, requests_per_second: f64) -> Self {
        assert!(max_in_flight >= 1 && requests_per_second > 0.0);
        Throttle {
            max_in_flight,
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next_slot: Mutex::new(None),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("throttle poisoned")
    }

    /// Blocks until a slot is free and the rate allows another start.
    pub fn acquire(&self) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock().expect("throttle poisoned");
            while *n >= self.max_in_flight {
                n = self.released.wait(n).expect("throttle poisoned");
            }
            *n += 1;
        }
        let permit = Permit { throttle: self };
        let wait = {
            let mut next = self.next_slot.lock().expect("throttle poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |t| t.max(now));
            *next = Some(slot + self.interval);
            slot.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
        permit
    }
}
