use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seedable, splittable random source. One (seed, stream) pair names one
/// reproducible draw sequence; distinct stream ids are statistically
/// independent. Never shared between workers — split instead.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derives an independent child source by drawing its (seed, stream)
    /// from this source's sequence. Deterministic given the parent state.
    pub fn split(&mut self) -> Self {
        let seed = self.rng.next_u64();
        let stream = self.rng.next_u64();
        Self::with_stream(seed, stream)
    }

    pub fn next_standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// `count` i.i.d. standard normal draws.
    pub fn standard_normals(&mut self, count: usize) -> Vec<f64> {
        let mut out = vec![0.0; count];
        self.fill_standard_normals(&mut out);
        out
    }

    pub fn fill_standard_normals(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut self.rng);
        }
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}
