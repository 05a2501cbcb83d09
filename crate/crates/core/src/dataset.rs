//! Training triples `(t_j, x0_j, xt_j)` and their network embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle::FiniteSupportDistribution;
use crate::schedule::DiffusionSchedule;

/// One training triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x0: Vec<f64>,
    pub xt: Vec<f64>,
}

/// Training set with input embeddings `z_j = (xt_j, t_j - t0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDataset {
    entries: Vec<Sample>,
    t0: f64,
    dim: usize,
    embeddings: Vec<f64>,
}

impl TrainingDataset {
    /// Draws `n` triples: `x0 ~ p0`, `t ~ Unif[t0, t_end]`, `xt ~ p_{t|0}(. | x0)`.
    pub fn collect<R: Rng + ?Sized>(
        dist: &FiniteSupportDistribution,
        schedule: &DiffusionSchedule,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("dataset size must be positive"));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 = dist.sample_x0(rng);
            let t = rng.random_range(schedule.t0()..=schedule.t_end());
            let xt = schedule.sample_forward(&x0, t, rng)?;
            entries.push(Sample { t, x0, xt });
        }
        Self::from_entries(entries, schedule)
    }

    /// Wraps existing triples after validating times and dimensions.
    pub fn from_entries(entries: Vec<Sample>, schedule: &DiffusionSchedule) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::domain("dataset must not be empty"));
        }
        let dim = entries[0].x0.len();
        for e in &entries {
            if e.x0.len() != dim || e.xt.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: e.x0.len().max(e.xt.len()),
                });
            }
            if !(e.t >= schedule.t0() && e.t <= schedule.t_end()) {
                return Err(Error::domain(format!("sample time {} outside [t0, t_end]", e.t)));
            }
        }
        let t0 = schedule.t0();
        let embeddings = entries
            .iter()
            .flat_map(|e| embed(&e.xt, e.t, t0))
            .collect();
        Ok(Self {
            entries,
            t0,
            dim,
            embeddings,
        })
    }

    /// Same inputs with replaced labels.
    pub fn with_labels(&self, labels: &[Vec<f64>]) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: labels.len(),
            });
        }
        let mut out = self.clone();
        for (e, l) in out.entries.iter_mut().zip(labels) {
            if l.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: l.len(),
                });
            }
            e.x0 = l.clone();
        }
        Ok(out)
    }

    /// Contiguous sub-range of the samples.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let w = self.dim + 1;
        Self {
            entries: self.entries[range.clone()].to_vec(),
            t0: self.t0,
            dim: self.dim,
            embeddings: self.embeddings[range.start * w..range.end * w].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn entries(&self) -> &[Sample] {
        &self.entries
    }

    /// Row-major `N x (d + 1)` embedding matrix.
    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embedding(&self, j: usize) -> &[f64] {
        let w = self.dim + 1;
        &self.embeddings[j * w..(j + 1) * w]
    }

    /// Label stack `y` with entry `j * d + i` holding `x0_j^i`.
    pub fn labels(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.x0.iter().copied()).collect()
    }

    /// SHA-256 over the inputs `(t_j, xt_j)` and `t0`.
    ///
    /// Labels are excluded so that a relabelled copy shares the fingerprint.
    pub fn input_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.t0.to_le_bytes());
        for e in &self.entries {
            h.update(e.t.to_le_bytes());
            for v in &e.xt {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// SHA-256 over inputs and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.input_fingerprint().as_bytes());
        for e in &self.entries {
            for v in &e.x0 {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// `z = (x, t - t0)`.
pub fn embed(x: &[f64], t: f64, t0: f64) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + 1);
    z.extend_from_slice(x);
    z.push(t - t0);
    z
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (FiniteSupportDistribution, DiffusionSchedule) {
        (
            FiniteSupportDistribution::uniform(vec![vec![0.6, 0.8], vec![-0.6, -0.8]]).unwrap(),
            DiffusionSchedule::constant(1.0, 1e-2, 5.0).unwrap(),
        )
    }

    #[test]
    fn collect_respects_time_window_and_embeds() {
        let (p, s) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = TrainingDataset::collect(&p, &s, 50, &mut rng).unwrap();
        assert_eq!(ds.len(), 50);
        for (j, e) in ds.entries().iter().enumerate() {
            assert!(e.t >= s.t0() && e.t <= s.t_end());
            assert!(p.atoms().contains(&e.x0));
            let z = ds.embedding(j);
            assert_eq!(&z[..2], &e.xt[..]);
            assert_eq!(z[2], e.t - s.t0());
        }
        assert_eq!(ds.labels().len(), 100);
    }

    #[test]
    fn collect_is_deterministic() {
        let (p, s) = setup();
        let a = TrainingDataset::collect(&p, &s, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = TrainingDataset::collect(&p, &s, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn relabel_keeps_input_fingerprint() {
        let (p, s) = setup();
        let a = TrainingDataset::collect(&p, &s, 6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = a.with_labels(&vec![vec![0.0, 0.0]; 6]).unwrap();
        assert_eq!(a.input_fingerprint(), b.input_fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.embeddings(), b.embeddings());
    }

    #[test]
    fn rejects_bad_entries() {
        let (_, s) = setup();
        assert!(TrainingDataset::from_entries(vec![], &s).is_err());
        let early = Sample {
            t: 0.0,
            x0: vec![0.0],
            xt: vec![0.0],
        };
        assert!(TrainingDataset::from_entries(vec![early], &s).is_err());
    }
}
