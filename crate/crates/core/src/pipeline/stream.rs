use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A finite sequence of raw (not yet position-embedded) `P x C` frames,
/// produced lazily.
pub struct FeatureStream {
    frames: usize,
    tokens: usize,
    channels: usize,
    source: Box<dyn Iterator<Item = Result<Tensor>> + Send>,
}

impl std::fmt::Debug for FeatureStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureStream")
            .field("frames", &self.frames)
            .field("tokens", &self.tokens)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl FeatureStream {
    pub fn new(
        frames: usize,
        tokens: usize,
        channels: usize,
        source: impl Iterator<Item = Result<Tensor>> + Send + 'static,
    ) -> Result<Self> {
        if frames == 0 || tokens == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "stream needs T, P, C >= 1 (got {frames}, {tokens}, {channels})"
            )));
        }
        Ok(FeatureStream {
            frames,
            tokens,
            channels,
            source: Box::new(source),
        })
    }

    pub fn from_frames(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Config("empty stream".into()))?;
        let (p, c) = (first.rows(), first.cols());
        FeatureStream::new(frames.len(), p, c, frames.into_iter().map(Ok))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn collect_frames(self) -> Result<Vec<Tensor>> {
        self.collect()
    }
}

impl Iterator for FeatureStream {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Result<Tensor>> {
        let item = self.source.next()?;
        Some(item.and_then(|t| {
            if t.shape() != [self.tokens, self.channels] {
                Err(Error::GridDimension {
                    got_tokens: t.rows(),
                    got_channels: t.cols(),
                    want_tokens: self.tokens,
                    want_channels: self.channels,
                })
            } else {
                Ok(t)
            }
        }))
    }
}
