//! Byte entropy and discrete distributions used by shaping and detection.

use rand::Rng;

/// Shannon entropy of a byte string in bits per byte. Empty input is 0.
pub fn shannon_entropy(data: &[u8]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut counts = [0u64; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    let n = data.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy with the Miller-Madow small-sample correction
/// `(m - 1) / (2n ln 2)`, where `m` is the number of distinct bytes. The
/// plain estimate of 256 uniform bytes averages about 7.17 bits; the
/// corrected one is close to 8.
pub fn miller_madow_entropy(data: &[u8]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut seen = [false; 256];
    for &b in data {
        seen[b as usize] = true;
    }
    let m = seen.iter().filter(|&&s| s).count() as f64;
    (shannon_entropy(data) + (m - 1.0) / (2.0 * data.len() as f64 * std::f64::consts::LN_2)).min(8.0)
}

/// A finite distribution over values with explicit probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist<T> {
    values: Vec<T>,
    cumulative: Vec<f64>,
}

impl<T: Copy + PartialOrd> DiscreteDist<T> {
    /// Builds from `(value, weight)` pairs; weights are normalized. Values are
    /// kept sorted so the cumulative table doubles as the CDF.
    pub fn new(mut pairs: Vec<(T, f64)>) -> Result<Self, String> {
        pairs.retain(|(_, w)| *w > 0.0);
        if pairs.is_empty() {
            return Err("distribution has no positive weights".into());
        }
        if pairs.iter().any(|(_, w)| !w.is_finite()) {
            return Err("distribution weight is not finite".into());
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("values are comparable"));
        let total: f64 = pairs.iter().map(|(_, w)| w).sum();
        let mut acc = 0.0;
        let mut values = Vec::with_capacity(pairs.len());
        let mut cumulative = Vec::with_capacity(pairs.len());
        for (v, w) in pairs {
            acc += w / total;
            values.push(v);
            cumulative.push(acc);
        }
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(DiscreteDist { values, cumulative })
    }

    pub fn point(value: T) -> Self {
        DiscreteDist {
            values: vec![value],
            cumulative: vec![1.0],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let u: f64 = rng.gen();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.values[i.min(self.values.len() - 1)]
    }

    /// P(X <= x).
    pub fn cdf(&self, x: T) -> f64 {
        let i = self.values.partition_point(|v| *v <= x);
        if i == 0 {
            0.0
        } else {
            self.cumulative[i - 1]
        }
    }

    pub fn support(&self) -> &[T] {
        &self.values
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    pub fn map<U: Copy + PartialOrd>(&self, f: impl Fn(T) -> U) -> Result<DiscreteDist<U>, String> {
        DiscreteDist::new(
            self.values
                .iter()
                .zip(self.probabilities())
                .map(|(&v, p)| (f(v), p))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_bounds() {
        assert_eq!(shannon_entropy(&[]), 0.0);
        assert_eq!(shannon_entropy(&[7u8; 100]), 0.0);
        let all: Vec<u8> = (0..=255).collect();
        assert!((shannon_entropy(&all) - 8.0).abs() < 1e-12);
        assert!((shannon_entropy(b"abab") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corrected_entropy_lifts_short_uniform_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut low = 0;
        for _ in 0..200 {
            let mut b = [0u8; 256];
            rng.fill(&mut b[..]);
            assert!(miller_madow_entropy(&b) > shannon_entropy(&b));
            if miller_madow_entropy(&b) <= 7.2 {
                low += 1;
            }
        }
        assert_eq!(low, 0);
        assert_eq!(miller_madow_entropy(&[1u8; 50]), 0.0);
    }

    #[test]
    fn point_mass_always_samples_its_value() {
        let d = DiscreteDist::point(600u32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| d.sample(&mut rng) == 600));
        assert_eq!(d.cdf(599), 0.0);
        assert_eq!(d.cdf(600), 1.0);
    }

    #[test]
    fn weights_are_normalized_and_sorted() {
        let d = DiscreteDist::new(vec![(3u32, 2.0), (1, 1.0), (2, 1.0)]).unwrap();
        assert_eq!(d.support(), &[1, 2, 3]);
        let p = d.probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[2] - 0.5).abs() < 1e-12);
        assert!(DiscreteDist::<u32>::new(vec![(1, 0.0)]).is_err());
    }
}
