//! Deterministic random streams.
//!
//! A splitmix64 generator with hierarchical child derivation. Every stochastic
//! stage of the pipeline pulls from its own labelled child stream, so the same
//! root seed reproduces the same dataset, masks, and weights regardless of
//! evaluation order or thread count.
//!
//! Test vector for seed 0x42, first three raw outputs:
//! `0x2C1C719D2C17B759, 0xA211B519D9A09A1C, 0x747A952A1F10BFF5`
//! (recorded in a unit test below and in docs/FORMATS.md).

const C1: u64 = 0x9E37_79B9_7F4A_7C15;
const C2: u64 = 0xBF58_476D_1CE4_E5B9;
const C3: u64 = 0x94D0_49BB_1331_11EB;
const CHILD_TAG: u64 = 0xB5AD_4ECE_DA1C_E2A9;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(C2);
    z = (z ^ (z >> 27)).wrapping_mul(C3);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    state: u64,
    /// Labels from root to this stream; kept for diagnostics only.
    path: Vec<u64>,
    cached_normal: Option<f64>,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream {
            state: seed,
            path: Vec::new(),
            cached_normal: None,
        }
    }

    /// Independent child stream for the given label. Children with distinct
    /// labels, and children of distinct parents, never share a sequence.
    pub fn derive_child(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        RandomStream {
            state: mix(self.state ^ mix(label ^ CHILD_TAG)),
            path,
            cached_normal: None,
        }
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(C1);
        mix(self.state)
    }

    /// Uniform in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is < 2^-40 for every n used here; acceptable.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; caches the second deviate.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        loop {
            let u1 = self.next_f64();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2 = self.next_f64();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.cached_normal = Some(r * theta.sin());
            return r * theta.cos();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }

    /// k distinct indices from [0, n), in random order. Panics if k > n.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {} of {}", k, n);
        let mut pool: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: only the first k positions are needed.
        for i in 0..k {
            let j = i + self.next_index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_sequence_matches_published_vector() {
        let mut rs = RandomStream::new(0x42);
        // splitmix64 reference outputs for seed 0x42; any change here breaks
        // every downstream artifact, so the values are frozen.
        let expect = [
            0x2C1C_719D_2C17_B759u64,
            0xA211_B519_D9A0_9A1C,
            0x747A_952A_1F10_BFF5,
        ];
        for e in expect {
            assert_eq!(rs.next_u64(), e);
        }
    }

    #[test]
    fn children_are_independent_and_reproducible() {
        let root = RandomStream::new(7);
        let mut a1 = root.derive_child(1);
        let mut a2 = root.derive_child(1);
        let mut b = root.derive_child(2);
        let xs: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
        assert_eq!(a1.path(), &[1]);
        assert_eq!(a1.derive_child(5).path(), &[1, 5]);
    }

    #[test]
    fn uniforms_live_in_unit_interval() {
        let mut rs = RandomStream::new(99);
        for _ in 0..10_000 {
            let u = rs.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normals_have_sane_moments() {
        let mut rs = RandomStream::new(3);
        let n = 100_000;
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..n {
            let x = rs.next_normal();
            m += x;
            v += x * x;
        }
        m /= n as f64;
        v = v / n as f64 - m * m;
        assert!(m.abs() < 0.02, "mean {}", m);
        assert!((v - 1.0).abs() < 0.03, "var {}", v);
    }

    #[test]
    fn sampling_without_replacement_is_distinct_and_complete() {
        let mut rs = RandomStream::new(11);
        let picks = rs.sample_without_replacement(10, 10);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let few = rs.sample_without_replacement(100, 7);
        assert_eq!(few.len(), 7);
        let mut s = few.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 7);
    }

    #[test]
    fn shuffle_permutes() {
        let mut rs = RandomStream::new(5);
        let mut v: Vec<u32> = (0..32).collect();
        rs.shuffle(&mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..32).collect::<Vec<_>>());
        assert_ne!(v, (0..32).collect::<Vec<_>>());
    }
}
