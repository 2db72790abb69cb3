//! Counter-based Wiener increments.
//!
//! Each increment is a pure function of `(seed, stream_id, step)`: the
//! ChaCha8 keystream for `seed` is selected by `stream_id` and positioned at
//! the step's word offset, so trajectories are reproducible and independent
//! of scheduling order.

use std::collections::VecDeque;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS_PER_STEP: u128 = 4;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// One step of noise: `dW` and, for delayed schemes, `dW_τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    pub dw: f64,
    pub dw_delayed: Option<f64>,
}

/// Standard normal draw for `(seed, stream, step)` via Box–Muller.
pub fn standard_normal(seed: u64, stream_id: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    normal_from(&mut rng)
}

fn normal_from(rng: &mut ChaCha8Rng) -> f64 {
    let (a, b) = (rng.next_u64(), rng.next_u64());
    let u1 = ((a >> 11) + 1) as f64 * TWO_POW_M53;
    let u2 = (b >> 11) as f64 * TWO_POW_M53;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sequential stream of Wiener increments with an optional delay FIFO.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    sqrt_dt: f64,
    step: u64,
    rng: ChaCha8Rng,
    lag: usize,
    buffer: Option<VecDeque<f64>>,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            sqrt_dt: dt.sqrt(),
            step: 0,
            rng,
            lag: 0,
            buffer: None,
        }
    }

    /// Keep the last `lag` increments so `dW_τ` can be read; reads return 0
    /// until the FIFO has filled.
    pub fn with_delay(mut self, lag: usize) -> Self {
        self.lag = lag;
        self.buffer = Some(VecDeque::with_capacity(lag + 1));
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Increment of an arbitrary step without advancing the stream.
    pub fn increment_at(&self, step: u64) -> f64 {
        standard_normal(self.seed, self.stream_id, step) * self.sqrt_dt
    }

    pub fn next_increment(&mut self) -> Increment {
        let dw = normal_from(&mut self.rng) * self.sqrt_dt;
        self.step += 1;
        let dw_delayed = self.buffer.as_mut().map(|buf| {
            buf.push_back(dw);
            if buf.len() > self.lag {
                buf.pop_front().unwrap()
            } else {
                0.0
            }
        });
        Increment { dw, dw_delayed }
    }
}
