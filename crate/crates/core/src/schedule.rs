//! Marker insertion positions.
//!
//! Positions are clean-unit counts after which a marker is spliced in. They
//! are always strictly inside `1..target`; the marker at the target itself is
//! written by the decoder when it stops.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("target length must be at least 1")]
    ZeroTarget,
    #[error("uniform interval must be at least 1")]
    ZeroInterval,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// A marker every `interval` units.
    Uniform { interval: usize },
    /// Markers at `N - floor(N / 2^i)` for i = 1, 2, ...: sparse early,
    /// dense near the target.
    #[default]
    Decaying,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionSchedule {
    pub kind: ScheduleKind,
    pub target: usize,
    positions: Vec<usize>,
}

/// `{ N - floor(N / 2^i) : i >= 1 }`, ascending, restricted to `1..N`.
pub fn decaying_positions(target: usize) -> Result<Vec<usize>, ScheduleError> {
    if target == 0 {
        return Err(ScheduleError::ZeroTarget);
    }
    let mut out: Vec<usize> = Vec::new();
    let mut shift = 1u32;
    while shift < usize::BITS {
        let offset = target >> shift;
        if offset == 0 {
            break;
        }
        let p = target - offset;
        if out.last() != Some(&p) {
            out.push(p);
        }
        shift += 1;
    }
    Ok(out)
}

/// `[n, 2n, 3n, ...]` below `target`.
pub fn uniform_positions(target: usize, interval: usize) -> Result<Vec<usize>, ScheduleError> {
    if interval == 0 {
        return Err(ScheduleError::ZeroInterval);
    }
    if target == 0 {
        return Err(ScheduleError::ZeroTarget);
    }
    Ok((1..)
        .map(|k| k * interval)
        .take_while(|&p| p < target)
        .collect())
}

impl InsertionSchedule {
    pub fn new(kind: ScheduleKind, target: usize) -> Result<Self, ScheduleError> {
        let positions = match kind {
            ScheduleKind::Uniform { interval } => uniform_positions(target, interval)?,
            ScheduleKind::Decaying => decaying_positions(target)?,
        };
        Ok(Self {
            kind,
            target,
            positions,
        })
    }

    pub fn decaying(target: usize) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::Decaying, target)
    }

    pub fn uniform(target: usize, interval: usize) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::Uniform { interval }, target)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Smallest scheduled position `>= current_count`, if any.
    pub fn next_position(&self, current_count: usize) -> Option<usize> {
        let i = self.positions.partition_point(|&p| p < current_count);
        self.positions.get(i).copied()
    }

    pub fn cursor(&self) -> ScheduleCursor<'_> {
        ScheduleCursor {
            schedule: self,
            next: 0,
        }
    }
}

/// Consumption state over a schedule; each position fires once.
#[derive(Debug, Clone)]
pub struct ScheduleCursor<'a> {
    schedule: &'a InsertionSchedule,
    next: usize,
}

impl ScheduleCursor<'_> {
    /// Next unconsumed position `>= current_count`.
    pub fn peek(&mut self, current_count: usize) -> Option<usize> {
        let positions = &self.schedule.positions;
        while self.next < positions.len() && positions[self.next] < current_count {
            self.next += 1;
        }
        positions.get(self.next).copied()
    }

    /// Marks the position equal to `count` as used. Returns true if
    /// `count` was scheduled and still pending.
    pub fn consume(&mut self, count: usize) -> bool {
        if self.peek(count) == Some(count) {
            self.next += 1;
            true
        } else {
            false
        }
    }

    pub fn remaining(&self) -> &[usize] {
        &self.schedule.positions[self.next.min(self.schedule.positions.len())..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decaying_examples() {
        assert_eq!(&decaying_positions(200).unwrap()[..3], &[100, 150, 175]);
        assert_eq!(
            decaying_positions(200).unwrap(),
            vec![100, 150, 175, 188, 194, 197, 199]
        );
        assert_eq!(decaying_positions(8).unwrap(), vec![4, 6, 7]);
        assert!(decaying_positions(1).unwrap().is_empty());
        assert_eq!(decaying_positions(2).unwrap(), vec![1]);
        assert_eq!(decaying_positions(0), Err(ScheduleError::ZeroTarget));
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_positions(200, 64).unwrap(), vec![64, 128, 192]);
        assert_eq!(
            uniform_positions(10, 1).unwrap(),
            (1..10).collect::<Vec<_>>()
        );
        assert!(uniform_positions(5, 16).unwrap().is_empty());
        assert_eq!(uniform_positions(5, 0), Err(ScheduleError::ZeroInterval));
        assert!(uniform_positions(100, usize::MAX).unwrap().is_empty());
    }

    #[test]
    fn next_position_lookup() {
        let s = InsertionSchedule::decaying(200).unwrap();
        assert_eq!(s.next_position(100), Some(100));
        assert_eq!(s.next_position(151), Some(175));
        assert_eq!(s.next_position(200), None);
        let u = InsertionSchedule::uniform(200, 64).unwrap();
        assert_eq!(u.next_position(200), None);
    }

    #[test]
    fn cursor_consumes_once() {
        let s = InsertionSchedule::decaying(8).unwrap();
        let mut c = s.cursor();
        assert!(!c.consume(3));
        assert!(c.consume(4));
        assert!(!c.consume(4));
        assert_eq!(c.peek(5), Some(6));
        assert_eq!(c.remaining(), &[6, 7]);
    }
}
