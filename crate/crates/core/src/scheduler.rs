//! Minibatch planning over conversational speech: assign whole conversations
//! to minibatch rows (longest-total-frames-first), splice consecutive
//! utterances into fixed-capacity row steps, and report utilization against
//! the one-utterance-per-step baseline.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestUtterance {
    pub utterance_id: String,
    pub frames: usize,
    pub feature_path: String,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<ManifestUtterance>,
}

impl Conversation {
    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.frames).sum()
    }
}

/// Conversations in file order; utterance order within a conversation is
/// temporal and therefore load-bearing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub conversations: Vec<Conversation>,
}

impl Manifest {
    /// Parse the tab-separated manifest format:
    /// `conversation_id  utterance_id  frame_count  feature_path  label_ids`
    /// (labels comma-separated, possibly empty). A conversation's lines must
    /// be contiguous; resuming an earlier conversation is rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut conversations: Vec<Conversation> = Vec::new();
        let mut closed: HashMap<String, ()> = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Manifest(format!(
                    "line {lineno}: expected 5 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            let conv_id = fields[0].to_string();
            let frames: usize = fields[2].parse().map_err(|_| {
                Error::Manifest(format!("line {lineno}: bad frame count {:?}", fields[2]))
            })?;
            if frames == 0 {
                return Err(Error::Manifest(format!(
                    "line {lineno}: frame count must be >= 1"
                )));
            }
            let labels = if fields[4].is_empty() {
                Vec::new()
            } else {
                fields[4]
                    .split(',')
                    .map(|s| {
                        s.parse::<usize>().map_err(|_| {
                            Error::Manifest(format!("line {lineno}: bad label id {s:?}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let utt = ManifestUtterance {
                utterance_id: fields[1].to_string(),
                frames,
                feature_path: fields[3].to_string(),
                labels,
            };
            match conversations.last_mut() {
                Some(c) if c.id == conv_id => c.utterances.push(utt),
                _ => {
                    if closed.contains_key(&conv_id) {
                        return Err(Error::Manifest(format!(
                            "line {lineno}: conversation {conv_id} resumes out of order"
                        )));
                    }
                    if let Some(prev) = conversations.last() {
                        closed.insert(prev.id.clone(), ());
                    }
                    conversations.push(Conversation {
                        id: conv_id,
                        utterances: vec![utt],
                    });
                }
            }
        }
        Ok(Self { conversations })
    }

    pub fn total_frames(&self) -> usize {
        self.conversations.iter().map(Conversation::total_frames).sum()
    }

    pub fn total_utterances(&self) -> usize {
        self.conversations.iter().map(|c| c.utterances.len()).sum()
    }

    /// The first `n` utterances in manifest order, truncating mid-conversation.
    pub fn prefix(&self, n: usize) -> Manifest {
        let mut out = Manifest::default();
        let mut left = n;
        for c in &self.conversations {
            if left == 0 {
                break;
            }
            let take = left.min(c.utterances.len());
            out.conversations.push(Conversation {
                id: c.id.clone(),
                utterances: c.utterances[..take].to_vec(),
            });
            left -= take;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub conversation: String,
    pub utterance_id: String,
    pub frames: usize,
    /// True exactly when this is its conversation's first utterance.
    pub context_reset: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RowStep {
    pub segments: Vec<Segment>,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub rows: usize,
    pub capacity: usize,
    pub steps: usize,
    /// `grid[row][step]`; rows shorter than `steps` are padded with empty steps.
    pub grid: Vec<Vec<RowStep>>,
}

/// Longest-total-frames-first conversation → row assignment (stable on ties),
/// each conversation landing on the currently least-loaded row.
fn assign_rows(manifest: &Manifest, rows: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..manifest.conversations.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(manifest.conversations[i].total_frames()));
    let mut loads = vec![0usize; rows];
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); rows];
    for i in order {
        let row = (0..rows).min_by_key(|&r| (loads[r], r)).unwrap();
        loads[row] += manifest.conversations[i].total_frames();
        assignment[row].push(i);
    }
    assignment
}

/// Build the minibatch plan. With splicing, consecutive utterances of a row's
/// conversations pack into each step until the next one would overflow; a new
/// conversation starts immediately (context_reset) in the same step when the
/// previous one runs out. Without splicing every row step holds one utterance.
pub fn plan(manifest: &Manifest, rows: usize, capacity: usize, splicing: bool) -> Result<BatchPlan> {
    if rows == 0 || capacity == 0 {
        return Err(Error::Config("plan needs rows >= 1 and capacity >= 1".into()));
    }
    for c in &manifest.conversations {
        for u in &c.utterances {
            if u.frames > capacity {
                return Err(Error::Capacity {
                    utterance: u.utterance_id.clone(),
                    frames: u.frames,
                    capacity,
                });
            }
        }
    }
    let assignment = assign_rows(manifest, rows);
    let mut grid: Vec<Vec<RowStep>> = Vec::with_capacity(rows);
    for row_convs in &assignment {
        let mut row: Vec<RowStep> = Vec::new();
        for &ci in row_convs {
            let conv = &manifest.conversations[ci];
            for (ui, utt) in conv.utterances.iter().enumerate() {
                let seg = Segment {
                    conversation: conv.id.clone(),
                    utterance_id: utt.utterance_id.clone(),
                    frames: utt.frames,
                    context_reset: ui == 0,
                };
                let fits = splicing
                    && row
                        .last()
                        .is_some_and(|s: &RowStep| s.padding >= utt.frames);
                if fits {
                    let step = row.last_mut().unwrap();
                    step.padding -= utt.frames;
                    step.segments.push(seg);
                } else {
                    row.push(RowStep {
                        padding: capacity - utt.frames,
                        segments: vec![seg],
                    });
                }
            }
        }
        grid.push(row);
    }
    let steps = grid.iter().map(Vec::len).max().unwrap_or(0);
    for row in &mut grid {
        while row.len() < steps {
            row.push(RowStep {
                segments: Vec::new(),
                padding: capacity,
            });
        }
    }
    Ok(BatchPlan {
        rows,
        capacity,
        steps,
        grid,
    })
}

impl BatchPlan {
    pub fn filled_frames(&self) -> usize {
        self.grid
            .iter()
            .flatten()
            .flat_map(|s| &s.segments)
            .map(|s| s.frames)
            .sum()
    }

    /// Filled frames over total row-capacity frames; an empty plan counts as
    /// vacuously full.
    pub fn utilization(&self) -> f64 {
        if self.steps == 0 {
            return 1.0;
        }
        self.filled_frames() as f64 / (self.rows * self.capacity * self.steps) as f64
    }

    /// Structured text export, one line per placed segment.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "rows {} capacity {} steps {}\n",
            self.rows, self.capacity, self.steps
        );
        for (r, row) in self.grid.iter().enumerate() {
            for (s, step) in row.iter().enumerate() {
                for seg in &step.segments {
                    let _ = writeln!(
                        out,
                        "row {r} step {s} conv {} utt {} frames {} reset {}",
                        seg.conversation, seg.utterance_id, seg.frames, seg.context_reset
                    );
                }
            }
        }
        out
    }

    /// Occupancy grid: one line per row, one letter (conversation id initial)
    /// per frame, `.` for padding, `|` between steps.
    pub fn grid_string(&self) -> String {
        let mut out = String::new();
        for row in &self.grid {
            for (s, step) in row.iter().enumerate() {
                if s > 0 {
                    out.push('|');
                }
                for seg in &step.segments {
                    let ch = seg.conversation.chars().next().unwrap_or('?');
                    for _ in 0..seg.frames {
                        out.push(ch);
                    }
                }
                for _ in 0..step.padding {
                    out.push('.');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// One scheduled utterance in training order, with its cache directive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanItem<'a> {
    pub row: usize,
    pub step: usize,
    pub conversation: &'a str,
    pub utterance: &'a ManifestUtterance,
    /// Clear the conversation cache before processing this utterance.
    pub cache_reset: bool,
}

/// Flatten a plan back onto the manifest, row-major within each step so each
/// row's stream stays strictly sequential.
pub fn iterate<'a>(plan: &BatchPlan, manifest: &'a Manifest) -> Result<Vec<PlanItem<'a>>> {
    let mut by_id: HashMap<(&str, &str), &'a ManifestUtterance> = HashMap::new();
    let mut conv_ids: HashMap<&str, &'a str> = HashMap::new();
    for c in &manifest.conversations {
        conv_ids.insert(c.id.as_str(), c.id.as_str());
        for u in &c.utterances {
            by_id.insert((c.id.as_str(), u.utterance_id.as_str()), u);
        }
    }
    let mut items = Vec::new();
    for (r, row) in plan.grid.iter().enumerate() {
        for (s, step) in row.iter().enumerate() {
            for seg in &step.segments {
                let utt = by_id
                    .get(&(seg.conversation.as_str(), seg.utterance_id.as_str()))
                    .ok_or_else(|| {
                        Error::Manifest(format!(
                            "plan references unknown utterance {}/{}",
                            seg.conversation, seg.utterance_id
                        ))
                    })?;
                items.push(PlanItem {
                    row: r,
                    step: s,
                    conversation: conv_ids[seg.conversation.as_str()],
                    utterance: utt,
                    cache_reset: seg.context_reset,
                });
            }
        }
    }
    Ok(items)
}

/// The largest manifest prefix (in utterance count) whose no-splice plan fits
/// within `step_budget` steps. Used to compare splicing against the baseline
/// at an equal step budget.
pub fn largest_prefix_within(
    manifest: &Manifest,
    rows: usize,
    capacity: usize,
    step_budget: usize,
) -> Result<Manifest> {
    let total = manifest.total_utterances();
    let mut best = Manifest::default();
    for n in 1..=total {
        let p = manifest.prefix(n);
        if plan(&p, rows, capacity, false)?.steps <= step_budget {
            best = p;
        }
    }
    Ok(best)
}
