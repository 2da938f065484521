//! Token bucket shared by all workers of one operation type.
//!
//! Acquisition is reservation style: a caller takes a token immediately and,
//! if that drives the balance negative, sleeps until the refill reaches its
//! slot. Every waiter thus computes its own wake time and contention stays at
//! one short lock per operation.

use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

/// Longest single sleep while waiting, so stop and retarget requests are
/// noticed promptly.
const MAX_NAP: Duration = Duration::from_millis(50);

/// `max(1, rate / 10)` tokens.
pub fn default_burst(rate: f64) -> f64 {
    (rate / 10.0).max(1.0)
}

#[derive(Debug)]
struct State {
    rate: f64,
    burst: f64,
    tokens: f64,
    last_refill: Instant,
    generation: u64,
}

impl State {
    fn refill(&mut self, now: Instant) {
        let elapsed = now.saturating_duration_since(self.last_refill).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.rate).min(self.burst);
        self.last_refill = now;
    }
}

#[derive(Debug)]
pub struct TokenBucket {
    state: Mutex<State>,
}

enum Reservation {
    Ready,
    WaitUntil(Instant, u64),
    Paused,
}

impl TokenBucket {
    /// Starts full. A rate of zero issues nothing.
    pub fn new(rate: f64) -> Self {
        let rate = sanitize(rate);
        let burst = default_burst(rate);
        TokenBucket {
            state: Mutex::new(State {
                rate,
                burst,
                tokens: burst,
                last_refill: Instant::now(),
                generation: 0,
            }),
        }
    }

    pub fn rate(&self) -> f64 {
        self.state.lock().rate
    }

    pub fn burst(&self) -> f64 {
        self.state.lock().burst
    }

    /// Current balance after refill; negative while reservations are queued.
    pub fn tokens(&self) -> f64 {
        let mut s = self.state.lock();
        s.refill(Instant::now());
        s.tokens
    }

    /// Changes the rate in place. Outstanding reservations are released and
    /// re-queued under the new rate.
    pub fn set_rate(&self, rate: f64) {
        let rate = sanitize(rate);
        let mut s = self.state.lock();
        if s.rate == rate {
            return;
        }
        s.refill(Instant::now());
        s.rate = rate;
        s.burst = default_burst(rate);
        s.tokens = s.tokens.clamp(0.0, s.burst);
        s.generation += 1;
    }

    fn reserve(&self) -> Reservation {
        let now = Instant::now();
        let mut s = self.state.lock();
        if s.rate <= 0.0 {
            return Reservation::Paused;
        }
        s.refill(now);
        s.tokens -= 1.0;
        if s.tokens >= 0.0 {
            Reservation::Ready
        } else {
            let wait = Duration::from_secs_f64(-s.tokens / s.rate);
            Reservation::WaitUntil(now + wait, s.generation)
        }
    }

    fn generation(&self) -> u64 {
        self.state.lock().generation
    }

    /// Blocks until a token is granted. Returns `false` without a token once
    /// `cancel` becomes true.
    pub fn acquire(&self, cancel: &AtomicBool) -> bool {
        loop {
            if cancel.load(Ordering::Acquire) {
                return false;
            }
            match self.reserve() {
                Reservation::Ready => return true,
                Reservation::Paused => thread::sleep(MAX_NAP),
                Reservation::WaitUntil(at, generation) => {
                    let mut requeue = false;
                    loop {
                        let now = Instant::now();
                        if now >= at {
                            break;
                        }
                        if cancel.load(Ordering::Acquire) {
                            return false;
                        }
                        if self.generation() != generation {
                            requeue = true;
                            break;
                        }
                        thread::sleep((at - now).min(MAX_NAP));
                    }
                    if !requeue {
                        return true;
                    }
                }
            }
        }
    }
}

fn sanitize(rate: f64) -> f64 {
    if rate.is_finite() && rate > 0.0 {
        rate
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn burst_default() {
        assert_eq!(default_burst(0.0), 1.0);
        assert_eq!(default_burst(5.0), 1.0);
        assert_eq!(default_burst(1000.0), 100.0);
    }

    #[test]
    fn starts_with_burst_then_paces() {
        let b = TokenBucket::new(200.0);
        let never = AtomicBool::new(false);
        let t0 = Instant::now();
        for _ in 0..20 {
            assert!(b.acquire(&never));
        }
        assert!(t0.elapsed() < Duration::from_millis(50));
        for _ in 0..40 {
            assert!(b.acquire(&never));
        }
        // 40 more tokens at 200/s take about 200 ms.
        let e = t0.elapsed().as_secs_f64();
        assert!((0.17..0.4).contains(&e), "{e}");
    }

    #[test]
    fn tokens_never_exceed_burst() {
        let b = TokenBucket::new(1000.0);
        thread::sleep(Duration::from_millis(300));
        assert!(b.tokens() <= b.burst());
    }

    #[test]
    fn zero_rate_pauses_until_cancelled() {
        let b = Arc::new(TokenBucket::new(0.0));
        let cancel = Arc::new(AtomicBool::new(false));
        let h = {
            let (b, c) = (b.clone(), cancel.clone());
            thread::spawn(move || b.acquire(&c))
        };
        thread::sleep(Duration::from_millis(150));
        cancel.store(true, Ordering::Release);
        assert!(!h.join().unwrap());
    }

    #[test]
    fn retarget_releases_waiter() {
        let b = Arc::new(TokenBucket::new(0.2));
        let never = Arc::new(AtomicBool::new(false));
        assert!(b.acquire(&never));
        let h = {
            let (b, c) = (b.clone(), never.clone());
            thread::spawn(move || {
                let t = Instant::now();
                b.acquire(&c);
                t.elapsed()
            })
        };
        thread::sleep(Duration::from_millis(100));
        b.set_rate(1000.0);
        assert!(h.join().unwrap() < Duration::from_secs(1));
    }

    #[test]
    fn shared_rate_holds_across_threads() {
        let b = Arc::new(TokenBucket::new(500.0));
        let never = Arc::new(AtomicBool::new(false));
        let t0 = Instant::now();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (b, c) = (b.clone(), never.clone());
                thread::spawn(move || {
                    let mut n = 0;
                    while t0.elapsed() < Duration::from_secs(1) {
                        if b.acquire(&c) {
                            n += 1;
                        }
                    }
                    n
                })
            })
            .collect();
        let total: u32 = handles.into_iter().map(|h| h.join().unwrap()).sum();
        // rate * T + burst, plus one in-flight reservation per thread.
        assert!(total <= 500 + 50 + 8, "{total}");
        assert!(total >= 450, "{total}");
    }
}
