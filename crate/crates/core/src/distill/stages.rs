//! Partitioning teacher and student blocks into matched stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block indices (1-based, counted after the block) where stage features are read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMap {
    pub teacher_taps: Vec<usize>,
    pub student_taps: Vec<usize>,
}

impl StageMap {
    pub fn num_stages(&self) -> usize {
        self.teacher_taps.len()
    }
}

/// Tap `k` sits after block `⌈k·M/K⌉` in the teacher and `⌈k·N/K⌉` in the student.
pub fn stage_partition(teacher_blocks: usize, student_blocks: usize, stages: usize) -> Result<StageMap> {
    let limit = teacher_blocks.min(student_blocks);
    if stages == 0 || stages > limit {
        return Err(Error::InvalidArgument(format!(
            "stage count {stages} must lie in 1..={limit} for {teacher_blocks} teacher and {student_blocks} student blocks"
        )));
    }
    let taps = |blocks: usize| -> Vec<usize> {
        (1..=stages).map(|k| (k * blocks).div_ceil(stages)).collect()
    };
    Ok(StageMap {
        teacher_taps: taps(teacher_blocks),
        student_taps: taps(student_blocks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_blocks_four_stages() {
        let m = stage_partition(12, 12, 4).unwrap();
        assert_eq!(m.teacher_taps, vec![3, 6, 9, 12]);
        assert_eq!(m.student_taps, vec![3, 6, 9, 12]);
    }

    #[test]
    fn single_stage_taps_final_block() {
        let m = stage_partition(7, 5, 1).unwrap();
        assert_eq!(m.teacher_taps, vec![7]);
        assert_eq!(m.student_taps, vec![5]);
    }

    #[test]
    fn unequal_depths() {
        let m = stage_partition(12, 24, 4).unwrap();
        assert_eq!(m.teacher_taps, vec![3, 6, 9, 12]);
        assert_eq!(m.student_taps, vec![6, 12, 18, 24]);
    }

    #[test]
    fn taps_strictly_increase_and_end_at_depth() {
        for m in 1..=13 {
            for n in 1..=13 {
                for k in 1..=m.min(n) {
                    let s = stage_partition(m, n, k).unwrap();
                    for taps in [&s.teacher_taps, &s.student_taps] {
                        assert_eq!(taps.len(), k);
                        assert!(taps.windows(2).all(|w| w[0] < w[1]));
                    }
                    assert_eq!(*s.teacher_taps.last().unwrap(), m);
                    assert_eq!(*s.student_taps.last().unwrap(), n);
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range_stage_count() {
        assert!(stage_partition(4, 4, 0).is_err());
        assert!(stage_partition(4, 3, 4).is_err());
    }
}
