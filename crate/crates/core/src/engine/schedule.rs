use serde::{Deserialize, Serialize};

use super::{EngineError, Result};

/// Steps `1..=N` split into consecutive phases of `k` steps; the last phase
/// may be shorter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    total: usize,
    size: usize,
}

impl PhaseSchedule {
    pub fn new(total: usize, size: usize) -> Result<Self> {
        if total == 0 || size == 0 {
            return Err(EngineError::Config(format!(
                "schedule needs positive step count and phase size, got N={total}, k={size}"
            )));
        }
        Ok(PhaseSchedule { total, size })
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    pub fn phase_size(&self) -> usize {
        self.size
    }

    pub fn num_phases(&self) -> usize {
        self.total.div_ceil(self.size)
    }

    /// First and last step of phase `j`, both 1-based and inclusive.
    pub fn bounds(&self, j: usize) -> (usize, usize) {
        assert!(
            (1..=self.num_phases()).contains(&j),
            "phase {j} out of range"
        );
        let b = (j - 1) * self.size + 1;
        (b, (b + self.size - 1).min(self.total))
    }

    /// Phase containing step `t`.
    pub fn phase_of(&self, t: usize) -> usize {
        assert!((1..=self.total).contains(&t), "step {t} out of range");
        (t - 1) / self.size + 1
    }

    pub fn is_phase_end(&self, t: usize) -> bool {
        t == self.total || t.is_multiple_of(self.size)
    }

    /// Position of step `t` inside its phase, starting at 1.
    pub fn offset(&self, t: usize) -> usize {
        (t - 1) % self.size + 1
    }
}
