//! Attention mask construction for streaming and non-streaming encoders,
//! including the cross-utterance previous/current mask pair used by the
//! chunk-based fusion method.

use crate::error::{Error, Result};

/// Identifies which span of the key axis a segment covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentId {
    /// Context frames from the utterance `age` positions back (1 = most recent).
    Previous(usize),
    /// The current utterance's own frames.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySegment {
    pub id: SegmentId,
    pub len: usize,
}

/// Boolean query→key visibility matrix plus a description of how previous
/// and current frames tile the key axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub num_queries: usize,
    pub num_keys: usize,
    allow: Vec<bool>,
    pub key_layout: Vec<KeySegment>,
}

impl AttentionMask {
    pub fn new(num_queries: usize, num_keys: usize, key_layout: Vec<KeySegment>) -> Self {
        debug_assert_eq!(key_layout.iter().map(|s| s.len).sum::<usize>(), num_keys);
        Self {
            num_queries,
            num_keys,
            allow: vec![false; num_queries * num_keys],
            key_layout,
        }
    }

    pub fn all_true(num_queries: usize, num_keys: usize, key_layout: Vec<KeySegment>) -> Self {
        let mut m = Self::new(num_queries, num_keys, key_layout);
        m.allow.iter_mut().for_each(|b| *b = true);
        m
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.num_keys + k]
    }

    #[inline]
    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.allow[q * self.num_keys + k] = v;
    }

    pub fn allowed_count(&self, q: usize) -> usize {
        (0..self.num_keys).filter(|&k| self.allowed(q, k)).count()
    }

    /// Every query must be able to attend to at least one key.
    pub fn validate(&self) -> Result<()> {
        for q in 0..self.num_queries {
            if self.allowed_count(q) == 0 {
                return Err(Error::DegenerateRow { row: q });
            }
        }
        Ok(())
    }

    /// 0/1 grid with a `|` ruler between key segments.
    pub fn grid_string(&self) -> String {
        let mut out = String::new();
        let boundaries: Vec<usize> = self
            .key_layout
            .iter()
            .scan(0, |acc, s| {
                *acc += s.len;
                Some(*acc)
            })
            .collect();
        for q in 0..self.num_queries {
            for k in 0..self.num_keys {
                if k > 0 && boundaries.contains(&k) {
                    out.push('|');
                }
                out.push(if self.allowed(q, k) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// How much previous-utterance context a query may reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrevContextCap {
    Unlimited,
    /// Most recent `n` frames across the spliced previous utterances.
    Frames(usize),
    /// All frames of the most recent `n` utterances.
    Utterances(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    NonStreaming,
    Streaming,
}

/// Geometry for one utterance's masks. All frame counts are at the
/// subsampled (post-stride-4) resolution.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub chunk_size: usize,
    /// Look-ahead in frames; rounded up to whole chunks for access.
    pub lookahead: usize,
    /// Left context within the current utterance, in frames; `None` = unlimited.
    pub current_left_cap: Option<usize>,
    pub prev_cap: PrevContextCap,
    /// Previous utterances' subsampled frame counts, oldest → newest.
    pub prev_utterance_lengths: Vec<usize>,
}

impl MaskSpec {
    pub fn non_streaming() -> Self {
        Self {
            mode: MaskMode::NonStreaming,
            chunk_size: 1,
            lookahead: 0,
            current_left_cap: None,
            prev_cap: PrevContextCap::Unlimited,
            prev_utterance_lengths: Vec::new(),
        }
    }

    pub fn streaming(chunk_size: usize, lookahead: usize) -> Self {
        Self {
            mode: MaskMode::Streaming,
            chunk_size,
            lookahead,
            current_left_cap: None,
            prev_cap: PrevContextCap::Unlimited,
            prev_utterance_lengths: Vec::new(),
        }
    }

    fn lookahead_chunks(&self) -> usize {
        if self.lookahead == 0 {
            0
        } else {
            self.lookahead.div_ceil(self.chunk_size)
        }
    }
}

/// Visibility of the current utterance's own frames (the M_cur part).
pub fn build_current_mask(spec: &MaskSpec, t_frames: usize) -> Result<AttentionMask> {
    let layout = vec![KeySegment {
        id: SegmentId::Current,
        len: t_frames,
    }];
    match spec.mode {
        MaskMode::NonStreaming => Ok(AttentionMask::all_true(t_frames, t_frames, layout)),
        MaskMode::Streaming => {
            if spec.chunk_size == 0 {
                return Err(Error::MaskSpec("chunk_size must be >= 1 in streaming mode".into()));
            }
            let la = spec.lookahead_chunks();
            let mut m = AttentionMask::new(t_frames, t_frames, layout);
            for q in 0..t_frames {
                let q_chunk = q / spec.chunk_size;
                for k in 0..t_frames {
                    let k_chunk = k / spec.chunk_size;
                    if k_chunk > q_chunk + la {
                        continue;
                    }
                    // Left cap is frame-based but never splits a chunk.
                    if let Some(cap) = spec.current_left_cap {
                        if k < q && q - k > cap && k_chunk != q_chunk {
                            continue;
                        }
                    }
                    m.set(q, k, true);
                }
            }
            Ok(m)
        }
    }
}

/// Visibility of previous utterances' context frames (the M_prev part).
/// Every query row sees the same previous-context span.
pub fn build_prev_mask(spec: &MaskSpec, t_frames: usize) -> Result<AttentionMask> {
    let lens = &spec.prev_utterance_lengths;
    let total: usize = lens.iter().sum();
    let n = lens.len();
    let layout: Vec<KeySegment> = lens
        .iter()
        .enumerate()
        .map(|(i, &len)| KeySegment {
            id: SegmentId::Previous(n - i),
            len,
        })
        .collect();
    let mut m = AttentionMask::new(t_frames, total, layout);
    // Allowed key columns, counted from the end (most recent first).
    let allowed_from_end = |k: usize| -> bool {
        let dist = total - k; // 1 = newest frame
        match spec.prev_cap {
            PrevContextCap::Unlimited => true,
            PrevContextCap::Frames(f) => dist <= f,
            PrevContextCap::Utterances(u) => {
                let skip: usize = lens[..n.saturating_sub(u)].iter().sum();
                k >= skip
            }
        }
    };
    for q in 0..t_frames {
        for k in 0..total {
            if allowed_from_end(k) {
                m.set(q, k, true);
            }
        }
    }
    Ok(m)
}

/// Concatenate a previous-context mask and a current mask along the key axis.
pub fn compose(prev: &AttentionMask, cur: &AttentionMask) -> Result<AttentionMask> {
    if prev.num_queries != cur.num_queries {
        return Err(Error::Shape(format!(
            "mask query counts differ: {} vs {}",
            prev.num_queries, cur.num_queries
        )));
    }
    let mut layout = prev.key_layout.clone();
    layout.extend(cur.key_layout.iter().cloned());
    let mut m = AttentionMask::new(prev.num_queries, prev.num_keys + cur.num_keys, layout);
    for q in 0..m.num_queries {
        for k in 0..prev.num_keys {
            m.set(q, k, prev.allowed(q, k));
        }
        for k in 0..cur.num_keys {
            m.set(q, prev.num_keys + k, cur.allowed(q, k));
        }
    }
    Ok(m)
}

/// Build the composed mask an encoder layer uses for one utterance.
pub fn build_composed(spec: &MaskSpec, t_frames: usize) -> Result<AttentionMask> {
    let cur = build_current_mask(spec, t_frames)?;
    if spec.prev_utterance_lengths.is_empty() {
        return Ok(cur);
    }
    let prev = build_prev_mask(spec, t_frames)?;
    compose(&prev, &cur)
}
