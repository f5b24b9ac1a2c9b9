//! Random streams shared by noise generation and batch sampling.
//!
//! A [`RngStream`] is either a seeded, replayable ChaCha20 stream or a
//! secure stream that draws from the operating system's CSPRNG. Secure streams
//! cannot be seeded.

use rand::rngs::OsRng;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, DpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RngKind {
    Standard,
    Secure,
}

#[derive(Debug, Clone)]
enum Inner {
    Standard(Box<ChaCha20Rng>),
    Secure(OsRng),
}

/// Single-owner random stream. Not meant to be drawn from concurrently.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: Inner,
}

impl RngStream {
    /// Deterministic stream: identical seeds give identical sequences.
    pub fn seeded(seed: u64) -> Self {
        Self { inner: Inner::Standard(Box::new(ChaCha20Rng::seed_from_u64(seed))) }
    }

    /// OS-entropy stream.
    pub fn secure() -> Self {
        Self { inner: Inner::Secure(OsRng) }
    }

    pub fn new(kind: RngKind, seed: Option<u64>) -> Result<Self> {
        match (kind, seed) {
            (RngKind::Standard, Some(seed)) => Ok(Self::seeded(seed)),
            (RngKind::Standard, None) => Err(param_err("standard rng stream requires a seed")),
            (RngKind::Secure, None) => Ok(Self::secure()),
            (RngKind::Secure, Some(_)) => {
                Err(param_err("secure rng stream refuses explicit seeding"))
            }
        }
    }

    pub fn kind(&self) -> RngKind {
        match self.inner {
            Inner::Standard(_) => RngKind::Standard,
            Inner::Secure(_) => RngKind::Secure,
        }
    }

    /// Derives an independent stream of the same kind. Standard streams fork
    /// deterministically from their current state.
    pub fn fork(&mut self) -> Self {
        match &mut self.inner {
            Inner::Standard(rng) => Self::seeded(rng.next_u64()),
            Inner::Secure(_) => Self::secure(),
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Two independent standard normal draws (Box-Muller).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // 1 - u lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (radius * theta.cos(), radius * theta.sin())
    }

    /// Fills `out` with i.i.d. N(0, std^2) values.
    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = a * std;
            pair[1] = b * std;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal_pair().0 * std;
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        match &mut self.inner {
            Inner::Standard(rng) => rng.next_u32(),
            Inner::Secure(rng) => rng.next_u32(),
        }
    }

    fn next_u64(&mut self) -> u64 {
        match &mut self.inner {
            Inner::Standard(rng) => rng.next_u64(),
            Inner::Secure(rng) => rng.next_u64(),
        }
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        match &mut self.inner {
            Inner::Standard(rng) => rng.fill_bytes(dest),
            Inner::Secure(rng) => rng.fill_bytes(dest),
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        match &mut self.inner {
            Inner::Standard(rng) => rng.try_fill_bytes(dest),
            Inner::Secure(rng) => rng.try_fill_bytes(dest),
        }
    }
}

impl From<rand::Error> for DpError {
    fn from(err: rand::Error) -> Self {
        DpError::Rng(err.to_string())
    }
}
