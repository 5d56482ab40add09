//! Sliding-window replay rejection over message serials.
//!
//! Within one session epoch each message ID is accepted at most once, and
//! IDs at or below `highest - width` are rejected outright. The window is
//! cleared on rekey; cross-epoch frames are caught by epoch/decryption
//! checks instead.

/// Sliding acceptance window, at most 64 IDs wide.
#[derive(Debug, Clone)]
pub struct ReplayWindow {
    width: u64,
    highest: Option<u64>,
    /// Bit `d` set means `highest - d` has been accepted.
    bitmap: u64,
}

impl ReplayWindow {
    /// Default window width in message IDs.
    pub const DEFAULT_WIDTH: u64 = 64;

    pub fn new(width: u64) -> ReplayWindow {
        ReplayWindow {
            width: width.clamp(1, 64),
            highest: None,
            bitmap: 0,
        }
    }

    /// Accept or reject `id`, recording it when accepted.
    pub fn check(&mut self, id: u64) -> bool {
        match self.highest {
            None => {
                self.highest = Some(id);
                self.bitmap = 1;
                true
            }
            Some(highest) if id > highest => {
                let advance = id - highest;
                self.bitmap = if advance >= 64 { 0 } else { self.bitmap << advance };
                self.bitmap |= 1;
                self.highest = Some(id);
                true
            }
            Some(highest) => {
                let distance = highest - id;
                if distance >= self.width {
                    return false; // below the window
                }
                let bit = 1u64 << distance;
                if self.bitmap & bit != 0 {
                    return false; // duplicate
                }
                self.bitmap |= bit;
                true
            }
        }
    }

    /// Forget everything; used when a new epoch begins.
    pub fn clear(&mut self) {
        self.highest = None;
        self.bitmap = 0;
    }
}
