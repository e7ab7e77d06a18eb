use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length: usize,
    /// Index of the unit basis vector every frame in the segment is built on.
    pub basis: usize,
    /// Standard deviation of the i.i.d. Gaussian noise added per channel.
    #[serde(default)]
    pub noise: f64,
}

/// A piecewise-constant synthetic video: each segment repeats one basis
/// direction at every spatial position (the grid scaled to unit norm),
/// optionally with noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub label: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.tokens == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic spec needs T, P, C >= 1".into()));
        }
        let total: usize = self.segments.iter().map(|s| s.length).sum();
        if total != self.frames {
            return Err(Error::Config(format!(
                "segment lengths sum to {total}, expected {} frames",
                self.frames
            )));
        }
        for s in &self.segments {
            if s.basis >= self.channels {
                return Err(Error::Config(format!("basis {} >= channels {}", s.basis, self.channels)));
            }
            if !(s.noise >= 0.0 && s.noise.is_finite()) {
                return Err(Error::Config(format!("noise {} must be finite and >= 0", s.noise)));
            }
        }
        Ok(())
    }

    /// 1-based inclusive frame interval of each segment.
    pub fn segment_spans(&self) -> Vec<(u64, u64)> {
        let mut start = 1u64;
        self.segments
            .iter()
            .map(|s| {
                let span = (start, start + s.length as u64 - 1);
                start += s.length as u64;
                span
            })
            .collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureStream> {
    spec.validate()?;
    let (p, c) = (spec.tokens, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plan: Vec<(usize, f64)> = spec
        .segments
        .iter()
        .flat_map(|s| std::iter::repeat_n((s.basis, s.noise), s.length))
        .collect();
    let frames = plan.into_iter().map(move |(basis, noise)| {
        let mut data = vec![0.0; p * c];
        let level = 1.0 / (p as f64).sqrt();
        for row in data.chunks_mut(c) {
            row[basis] = level;
        }
        if noise > 0.0 {
            let normal = Normal::new(0.0, noise).expect("validated noise");
            for x in &mut data {
                *x += normal.sample(&mut rng);
            }
        }
        Tensor::matrix(p, c, data)
    });
    FeatureStream::new(spec.frames, p, c, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    fn spec(segments: Vec<Segment>) -> SyntheticSpec {
        let frames = segments.iter().map(|s| s.length).sum();
        SyntheticSpec {
            seed: 3,
            frames,
            tokens: 2,
            channels: 6,
            segments,
            label: 0,
        }
    }

    #[test]
    fn noiseless_single_segment_is_constant() {
        let s = spec(vec![Segment {
            length: 5,
            basis: 2,
            noise: 0.0,
        }]);
        let frames = generate_synthetic(&s).unwrap().collect_frames().unwrap();
        assert_eq!(frames.len(), 5);
        assert!(frames.iter().all(|f| f == &frames[0]));
        let h = 1.0 / 2f64.sqrt();
        assert_eq!(frames[0].row(1), &[0.0, 0.0, h, 0.0, 0.0, 0.0]);
        let norm: f64 = frames[0].data().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_segments_cosine_profile() {
        let segs = (0..5)
            .map(|b| Segment {
                length: 3,
                basis: b,
                noise: 0.0,
            })
            .collect();
        let frames = generate_synthetic(&spec(segs)).unwrap().collect_frames().unwrap();
        for t in 0..frames.len() - 1 {
            let c = cosine(frames[t].row(0), frames[t + 1].row(0));
            let boundary = (t + 1) % 3 == 0;
            assert_eq!(c, if boundary { 0.0 } else { 1.0 }, "t={t}");
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let s = spec(vec![Segment {
            length: 4,
            basis: 1,
            noise: 0.3,
        }]);
        let a = generate_synthetic(&s).unwrap().collect_frames().unwrap();
        let b = generate_synthetic(&s).unwrap().collect_frames().unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(vec![Segment {
            length: 4,
            basis: 1,
            noise: 0.0,
        }]);
        s.frames = 5;
        assert!(generate_synthetic(&s).is_err());
        let s = spec(vec![Segment {
            length: 4,
            basis: 9,
            noise: 0.0,
        }]);
        assert!(generate_synthetic(&s).is_err());
    }
}
