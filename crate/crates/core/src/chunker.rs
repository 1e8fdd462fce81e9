//! Splits aligned utterances into ordered chunks and feeds them to training
//! in utterance order.
//!
//! A chunk nominally ends `chunk_size` phonemes after the cursor. The actual
//! boundary is searched within `window` phonemes of that point, preferring
//! punctuation, then word boundaries, and falling back to a hard cut at the
//! nominal point. Among equally preferred candidates the one nearest the
//! nominal point wins, the earlier one on a tie. The boundary symbol closes
//! the left chunk.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::symbols::{classify, SymbolClass, Vocabulary};
use crate::tensor::Tensor;

/// An utterance with per-symbol frame durations and its mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedUtterance {
    pub utt_id: String,
    pub symbols: Vec<String>,
    pub durations: Vec<u32>,
    /// `[T, n_mels]`
    pub mel: Tensor,
    pub sentence_type: usize,
}

impl AlignedUtterance {
    pub fn classes(&self) -> Vec<SymbolClass> {
        self.symbols.iter().map(|s| classify(s)).collect()
    }

    pub fn n_frames(&self) -> usize {
        self.mel.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::CorruptRecord {
            utt_id: self.utt_id.clone(),
            reason,
        };
        if self.symbols.len() != self.durations.len() {
            return Err(bad(format!(
                "{} symbols but {} durations",
                self.symbols.len(),
                self.durations.len()
            )));
        }
        if self.mel.rank() != 2 {
            return Err(bad("mel must be 2-D".into()));
        }
        let total: u64 = self.durations.iter().map(|&d| u64::from(d)).sum();
        if total != self.n_frames() as u64 {
            return Err(bad(format!(
                "durations sum to {total} but mel has {} frames",
                self.n_frames()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Punctuation,
    Word,
    Hard,
    /// The chunk runs to the end of the utterance.
    End,
}

/// One chunk of an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub utt_id: String,
    pub index: usize,
    /// Symbol positions within the utterance.
    pub symbols: Range<usize>,
    /// Frame positions within the utterance.
    pub frames: Range<usize>,
    pub phoneme_ids: Vec<usize>,
    pub durations: Vec<u32>,
    /// `[l', n_mels]`
    pub mel: Tensor,
    /// Last frame of the preceding chunk; `None` for the first chunk.
    pub context_frame: Option<Vec<f64>>,
    pub is_first: bool,
    pub is_last: bool,
    pub sentence_type: usize,
    pub boundary: BoundaryKind,
}

impl Segment {
    pub fn n_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn speaking_rate(&self) -> Result<f64> {
        chunk_speaking_rate(self.n_symbols(), self.n_frames())
    }
}

/// Symbols per frame of a chunk.
pub fn chunk_speaking_rate(n_symbols: usize, n_frames: usize) -> Result<f64> {
    if n_frames == 0 {
        return Err(Error::DegenerateSegment(format!(
            "{n_symbols} symbols aligned to zero frames"
        )));
    }
    Ok(n_symbols as f64 / n_frames as f64)
}

fn check_geometry(chunk_size: usize, window: usize) -> Result<()> {
    if window == 0 || window >= chunk_size {
        return Err(Error::Config(format!(
            "need chunk_size > window > 0, got chunk_size={chunk_size} window={window}"
        )));
    }
    Ok(())
}

/// Chunk boundaries over a symbol-class sequence.
pub fn plan_segments(
    classes: &[SymbolClass],
    chunk_size: usize,
    window: usize,
) -> Result<Vec<(Range<usize>, BoundaryKind)>> {
    check_geometry(chunk_size, window)?;
    let n = classes.len();
    let mut out = Vec::new();
    let mut cursor = 0;
    while cursor < n {
        if n - cursor <= chunk_size {
            out.push((cursor..n, BoundaryKind::End));
            break;
        }
        let nominal = cursor + chunk_size - 1;
        let lo = nominal - window;
        let hi = (nominal + window).min(n - 1);
        let nearest = |class: SymbolClass| {
            (lo..=hi)
                .filter(|&p| classes[p] == class)
                .min_by_key(|&p| (p.abs_diff(nominal), p))
        };
        let (end, kind) = if let Some(p) = nearest(SymbolClass::Punctuation) {
            (p, BoundaryKind::Punctuation)
        } else if let Some(p) = nearest(SymbolClass::WordBoundary) {
            (p, BoundaryKind::Word)
        } else {
            (nominal, BoundaryKind::Hard)
        };
        let kind = if end == n - 1 { BoundaryKind::End } else { kind };
        out.push((cursor..end + 1, kind));
        cursor = end + 1;
    }
    Ok(out)
}

/// Splits an utterance into ordered chunks that exactly partition its
/// symbols and frames. A chunk that would receive no frames is merged into
/// its predecessor (or, for the first chunk, into its successor).
pub fn segment_utterance(
    u: &AlignedUtterance,
    vocab: &Vocabulary,
    chunk_size: usize,
    window: usize,
) -> Result<Vec<Segment>> {
    u.validate()?;
    let phoneme_ids = vocab.encode(&u.symbols).map_err(|e| Error::CorruptRecord {
        utt_id: u.utt_id.clone(),
        reason: e.to_string(),
    })?;
    let plan = plan_segments(&u.classes(), chunk_size, window)?;
    if plan.is_empty() {
        return Ok(Vec::new());
    }
    if u.n_frames() == 0 {
        return Err(Error::DegenerateSegment(format!(
            "utterance `{}` has no frames",
            u.utt_id
        )));
    }

    let mut starts = vec![0usize; u.durations.len() + 1];
    for (i, &d) in u.durations.iter().enumerate() {
        starts[i + 1] = starts[i] + d as usize;
    }
    let frames_of = |r: &Range<usize>| starts[r.start]..starts[r.end];

    let mut merged: Vec<(Range<usize>, BoundaryKind)> = Vec::with_capacity(plan.len());
    let mut carry: Option<usize> = None;
    for (range, kind) in plan {
        let range = carry.take().map_or(range.clone(), |s| s..range.end);
        if frames_of(&range).is_empty() {
            match merged.last_mut() {
                Some(prev) => {
                    prev.0.end = range.end;
                    prev.1 = kind;
                }
                None => carry = Some(range.start),
            }
        } else {
            merged.push((range, kind));
        }
    }

    let n_mels = u.mel.shape()[1];
    let count = merged.len();
    let mut out = Vec::with_capacity(count);
    for (index, (symbols, boundary)) in merged.into_iter().enumerate() {
        let frames = frames_of(&symbols);
        let mel = Tensor::new(
            &[frames.len(), n_mels],
            u.mel.data()[frames.start * n_mels..frames.end * n_mels].to_vec(),
        )?;
        let context_frame = (frames.start > 0).then(|| u.mel.row(frames.start - 1).to_vec());
        out.push(Segment {
            utt_id: u.utt_id.clone(),
            index,
            phoneme_ids: phoneme_ids[symbols.clone()].to_vec(),
            durations: u.durations[symbols.clone()].to_vec(),
            symbols,
            frames,
            mel,
            context_frame,
            is_first: index == 0,
            is_last: index + 1 == count,
            sentence_type: u.sentence_type,
            boundary,
        });
    }
    Ok(out)
}

/// One training step's worth of chunks: one slot per lane, `None` for a
/// lane that has run out of utterances (padding, masked from the loss).
#[derive(Clone, Debug)]
pub struct SegmentBatch<'a> {
    pub lanes: Vec<Option<&'a Segment>>,
}

impl SegmentBatch<'_> {
    pub fn active(&self) -> usize {
        self.lanes.iter().flatten().count()
    }
}

/// Emits `batch_size` parallel lanes. Each lane plays one utterance's chunks
/// strictly in order; when it finishes, the next unstarted utterance takes
/// over that lane.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    utterances: &'a [Vec<Segment>],
    lanes: Vec<Option<(usize, usize)>>,
    next_utt: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(utterances: &'a [Vec<Segment>], batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(BatchIterator {
            utterances,
            lanes: vec![None; batch_size],
            next_utt: 0,
        })
    }

    fn take_next_utterance(&mut self) -> Option<(usize, usize)> {
        while self.next_utt < self.utterances.len() {
            let u = self.next_utt;
            self.next_utt += 1;
            if !self.utterances[u].is_empty() {
                return Some((u, 0));
            }
        }
        None
    }
}

impl<'a> Iterator for BatchIterator<'a> {
    type Item = SegmentBatch<'a>;

    fn next(&mut self) -> Option<SegmentBatch<'a>> {
        for lane in 0..self.lanes.len() {
            let exhausted = match self.lanes[lane] {
                Some((u, s)) => s >= self.utterances[u].len(),
                None => true,
            };
            if exhausted {
                self.lanes[lane] = self.take_next_utterance();
            }
        }
        if self.lanes.iter().all(Option::is_none) {
            return None;
        }
        let utterances = self.utterances;
        let lanes = self
            .lanes
            .iter_mut()
            .map(|slot| {
                slot.as_mut().map(|(u, s)| {
                    let seg = &utterances[*u][*s];
                    *s += 1;
                    seg
                })
            })
            .collect();
        Some(SegmentBatch { lanes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SymbolClass::*;

    fn classes_with(n: usize, punct: &[usize], word: &[usize]) -> Vec<SymbolClass> {
        (0..n)
            .map(|i| {
                if punct.contains(&i) {
                    Punctuation
                } else if word.contains(&i) {
                    WordBoundary
                } else {
                    Phone
                }
            })
            .collect()
    }

    #[test]
    fn short_utterance_is_one_segment() {
        let plan = plan_segments(&classes_with(40, &[], &[]), 60, 20).unwrap();
        assert_eq!(plan, vec![(0..40, BoundaryKind::End)]);
    }

    #[test]
    fn punctuation_in_window_wins() {
        let plan = plan_segments(&classes_with(200, &[55], &[58]), 60, 20).unwrap();
        assert_eq!(plan[0], (0..56, BoundaryKind::Punctuation));
    }

    #[test]
    fn nearest_word_boundary() {
        let plan = plan_segments(&classes_with(200, &[], &[52, 75]), 60, 20).unwrap();
        assert_eq!(plan[0], (0..53, BoundaryKind::Word));
    }

    #[test]
    fn tie_goes_to_earlier_position() {
        // nominal index 59; candidates 57 and 61 are both 2 away
        let plan = plan_segments(&classes_with(200, &[], &[57, 61]), 60, 20).unwrap();
        assert_eq!(plan[0].0, 0..58);
    }

    #[test]
    fn hard_cut_without_candidates() {
        let plan = plan_segments(&classes_with(130, &[], &[]), 60, 20).unwrap();
        assert_eq!(plan[0], (0..60, BoundaryKind::Hard));
        assert_eq!(plan[1], (60..120, BoundaryKind::Hard));
        assert_eq!(plan[2], (120..130, BoundaryKind::End));
    }

    #[test]
    fn bad_geometry_rejected() {
        assert!(plan_segments(&[], 5, 5).is_err());
        assert!(plan_segments(&[], 5, 0).is_err());
    }

    #[test]
    fn speaking_rate_values() {
        assert_eq!(chunk_speaking_rate(10, 10).unwrap(), 1.0);
        assert!((chunk_speaking_rate(91, 330).unwrap() - 0.27576).abs() < 5e-6);
        assert!((chunk_speaking_rate(60, 330).unwrap() - 0.18182).abs() < 5e-6);
        assert!(matches!(chunk_speaking_rate(3, 0), Err(Error::DegenerateSegment(_))));
    }

    fn utterance(id: &str, symbols: &[&str], durations: &[u32]) -> AlignedUtterance {
        let t: u32 = durations.iter().sum();
        AlignedUtterance {
            utt_id: id.into(),
            symbols: symbols.iter().map(|s| s.to_string()).collect(),
            durations: durations.to_vec(),
            mel: Tensor::new(&[t as usize, 2], (0..2 * t).map(f64::from).collect()).unwrap(),
            sentence_type: 0,
        }
    }

    #[test]
    fn zero_frame_chunk_merges_into_predecessor() {
        let vocab = Vocabulary::new(vec!["a".into(), ",".into()]).unwrap();
        // chunk 3 window 1: "a a a ," then ", , ," (no frames, merged back), then "a a a"
        let u = utterance(
            "u",
            &["a", "a", "a", ",", ",", ",", ",", "a", "a", "a"],
            &[1, 1, 1, 0, 0, 0, 0, 1, 1, 1],
        );
        let segs = segment_utterance(&u, &vocab, 3, 1).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].symbols, 0..7);
        assert_eq!(segs[1].symbols, 7..10);
        assert!(segs.iter().all(|s| s.n_frames() == 3));
        assert!(segs.last().unwrap().is_last && segs[0].is_first);
    }

    #[test]
    fn context_frame_is_previous_last_frame() {
        let vocab = Vocabulary::new(vec!["a".into(), "_".into()]).unwrap();
        let u = utterance("u", &["a", "a", "_", "a", "a", "a"], &[1, 1, 1, 1, 1, 1]);
        let segs = segment_utterance(&u, &vocab, 3, 1).unwrap();
        assert_eq!(segs[0].context_frame, None);
        assert_eq!(segs[1].context_frame.as_deref(), Some(u.mel.row(segs[1].frames.start - 1)));
    }

    #[test]
    fn lanes_refill_and_pad() {
        let seg = |u: &str, i: usize| Segment {
            utt_id: u.into(),
            index: i,
            symbols: 0..1,
            frames: 0..1,
            phoneme_ids: vec![0],
            durations: vec![1],
            mel: Tensor::zeros(&[1, 1]),
            context_frame: None,
            is_first: i == 0,
            is_last: false,
            sentence_type: 0,
            boundary: BoundaryKind::End,
        };
        let corpus = vec![vec![seg("a", 0), seg("a", 1), seg("a", 2)], vec![seg("b", 0)]];
        let batches: Vec<_> = BatchIterator::new(&corpus, 2).unwrap().collect();
        assert_eq!(batches.len(), 3);
        let ids: Vec<Vec<Option<(String, usize)>>> = batches
            .iter()
            .map(|b| b.lanes.iter().map(|l| l.map(|s| (s.utt_id.clone(), s.index))).collect())
            .collect();
        assert_eq!(ids[0], vec![Some(("a".into(), 0)), Some(("b".into(), 0))]);
        assert_eq!(ids[1], vec![Some(("a".into(), 1)), None]);
        assert_eq!(ids[2], vec![Some(("a".into(), 2)), None]);

        let single: Vec<_> = BatchIterator::new(&corpus, 1).unwrap().collect();
        let order: Vec<_> = single.iter().map(|b| b.lanes[0].unwrap().utt_id.clone()).collect();
        assert_eq!(order, vec!["a", "a", "a", "b"]);
    }
}
