//! Packet-number receive window.
//!
//! The window tracks a contiguous span `[lo, hi]` of packet numbers and a
//! seen bit for each of them. A fresh window covers `[start, start + W)`.
//! Accepting `pn` extends the upper edge to `pn + W` and raises the lower edge
//! to `pn - W + 1`: up to `W - 1` consecutive losses are tolerated (with
//! `W = 1` only strictly in-order delivery passes) and up to `W - 1` older
//! packets may still arrive out of order. The span never exceeds `2W` slots
//! and never wraps past `u32::MAX`.

use std::ops::Range;

pub const DEFAULT_WINDOW: u32 = 64;

const MAX_PN: u64 = u32::MAX as u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept(Slide),
    Replay,
    OutOfWindow,
}

/// Packet numbers that entered and left the tracked span.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Slide {
    pub entered: Range<u64>,
    pub left: Range<u64>,
}

impl Slide {
    pub fn entered_pns(&self) -> impl Iterator<Item = u32> {
        self.entered.clone().map(|p| p as u32)
    }

    pub fn left_pns(&self) -> impl Iterator<Item = u32> {
        self.left.clone().map(|p| p as u32)
    }

    pub fn amount(&self) -> u64 {
        self.entered.end - self.entered.start
    }
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    size: u64,
    lo: u64,
    /// Inclusive; `hi + 1 == lo` encodes an empty span.
    hi: u64,
    bits: Vec<u64>,
    mask: u64,
}

impl SlidingWindow {
    /// Window tracking `[start, start + size)`, clamped at the largest PN.
    pub fn new(start: u32, size: u32) -> Self {
        assert!(size >= 1, "window size must be at least 1");
        assert!(start >= 1, "packet number 0 is reserved");
        let cap = (2 * size as u64).next_power_of_two().max(64);
        let lo = start as u64;
        SlidingWindow {
            size: size as u64,
            lo,
            hi: (lo + size as u64 - 1).min(MAX_PN),
            bits: vec![0; (cap / 64) as usize],
            mask: cap - 1,
        }
    }

    pub fn size(&self) -> u32 {
        self.size as u32
    }

    pub fn lo(&self) -> u64 {
        self.lo
    }

    pub fn hi(&self) -> u64 {
        self.hi
    }

    pub fn span(&self) -> Range<u64> {
        self.lo..self.hi + 1
    }

    pub fn contains(&self, pn: u32) -> bool {
        let pn = pn as u64;
        pn >= self.lo && pn <= self.hi
    }

    /// Ring position of `pn`, shared with per-slot side tables.
    pub fn slot(&self, pn: u32) -> usize {
        (pn as u64 & self.mask) as usize
    }

    pub fn capacity(&self) -> usize {
        (self.mask + 1) as usize
    }

    pub fn is_seen(&self, pn: u32) -> bool {
        self.contains(pn) && self.bit(pn as u64)
    }

    fn bit(&self, pn: u64) -> bool {
        let i = pn & self.mask;
        self.bits[(i / 64) as usize] & (1 << (i % 64)) != 0
    }

    fn set_bit(&mut self, pn: u64, v: bool) {
        let i = pn & self.mask;
        let w = &mut self.bits[(i / 64) as usize];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    /// Lowest tracked packet number not yet seen.
    pub fn next_expected(&self) -> Option<u32> {
        (self.lo..=self.hi).find(|&p| !self.bit(p)).map(|p| p as u32)
    }

    /// Tracked packet numbers that have not been seen.
    pub fn unseen(&self) -> impl Iterator<Item = u32> + '_ {
        (self.lo..=self.hi).filter(|&p| !self.bit(p)).map(|p| p as u32)
    }

    pub fn accept(&mut self, pn: u32) -> Verdict {
        if !self.contains(pn) {
            return Verdict::OutOfWindow;
        }
        if self.bit(pn as u64) {
            return Verdict::Replay;
        }
        self.set_bit(pn as u64, true);
        Verdict::Accept(self.advance(pn as u64))
    }

    /// Registers `pn` consumed on a bound partner flow: slides as if it had
    /// been accepted here and marks it seen. Returns the slide and whether
    /// `pn` was newly marked.
    pub fn observe(&mut self, pn: u32) -> (Slide, bool) {
        let p = pn as u64;
        if p < self.lo {
            return (Slide::default(), false);
        }
        let slide = self.advance(p);
        let fresh = self.contains(pn) && !self.bit(p);
        if fresh {
            self.set_bit(p, true);
        }
        (slide, fresh)
    }

    fn advance(&mut self, pn: u64) -> Slide {
        let new_hi = self.hi.max((pn + self.size).min(MAX_PN));
        let new_lo = self.lo.max((pn + 1).saturating_sub(self.size));
        let left = self.lo..new_lo.min(self.hi + 1);
        let entered = (self.hi + 1).max(new_lo)..new_hi + 1;
        for p in entered.clone() {
            self.set_bit(p, false);
        }
        self.lo = new_lo;
        self.hi = new_hi;
        Slide { entered, left }
    }

    /// Restarts the window at `start`, forgetting all state.
    pub fn reset(&mut self, start: u32) -> Slide {
        let old = self.span();
        *self = SlidingWindow::new(start, self.size as u32);
        Slide {
            entered: self.span(),
            left: old,
        }
    }
}
