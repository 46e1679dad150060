//! Per-iteration assignment of mini-batches to FPGAs.
//!
//! Stage 1 runs while every partition still has batches left: FPGA `i`
//! trains on a batch from partition `i`. Once some partition is drained,
//! stage 2 gives every non-drained partition's batch to its own FPGA and
//! fills each idle FPGA with an extra batch drawn round-robin from the
//! non-drained partitions. The unbalanced policy draws exactly the same
//! batches but leaves every extra on its donor partition's FPGA.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    TwoStage,
    Unbalanced,
}

/// What an extra (stage-2) batch does to its donor's remaining quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraAccounting {
    /// Extras are the donor's next batches; an epoch covers each target once.
    #[default]
    ConsumeQuota,
    /// Extras are sampled on top of the donor's quota.
    Oversample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Slot {
    pub fpga: usize,
    pub partition: usize,
    /// Production index of the batch within its partition.
    pub seq_no: usize,
    pub extra: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IterationPlan {
    pub iteration: usize,
    pub stage: Stage,
    pub slots: Vec<Slot>,
}

impl IterationPlan {
    pub fn load(&self, fpga: usize) -> usize {
        self.slots.iter().filter(|s| s.fpga == fpga).count()
    }

    pub fn max_load(&self, p: usize) -> usize {
        (0..p).map(|f| self.load(f)).max().unwrap_or(0)
    }

    /// Sorted `(partition, seq_no)` pairs, independent of FPGA placement.
    pub fn batch_multiset(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self.slots.iter().map(|s| (s.partition, s.seq_no)).collect();
        v.sort_unstable();
        v
    }
}

pub fn schedule_epoch(quotas: &[usize], policy: Policy) -> Result<Vec<IterationPlan>> {
    schedule_epoch_with(quotas, policy, ExtraAccounting::ConsumeQuota)
}

/// Schedules one epoch for `p = quotas.len()` FPGAs, partition `i` being
/// local to FPGA `i`.
pub fn schedule_epoch_with(
    quotas: &[usize],
    policy: Policy,
    accounting: ExtraAccounting,
) -> Result<Vec<IterationPlan>> {
    let p = quotas.len();
    if p == 0 {
        return Err(Error::config("scheduling needs at least one FPGA"));
    }
    let mut remaining = quotas.to_vec();
    let mut next_seq = vec![0usize; p];
    let mut plans = Vec::new();

    let mut draw = |part: usize, remaining: &mut [usize], consume: bool| -> usize {
        let seq = next_seq[part];
        next_seq[part] += 1;
        if consume {
            remaining[part] -= 1;
        }
        seq
    };

    while remaining.iter().all(|&r| r > 0) {
        let slots = (0..p)
            .map(|i| Slot {
                fpga: i,
                partition: i,
                seq_no: draw(i, &mut remaining, true),
                extra: false,
            })
            .collect();
        plans.push(IterationPlan {
            iteration: plans.len(),
            stage: Stage::Stage1,
            slots,
        });
    }

    let mut cnt = 0usize;
    while remaining.iter().any(|&r| r > 0) {
        let (avail, idle): (Vec<usize>, Vec<usize>) = (0..p).partition(|&i| remaining[i] > 0);
        let mut slots = Vec::with_capacity(p);
        for &i in &avail {
            slots.push(Slot {
                fpga: i,
                partition: i,
                seq_no: draw(i, &mut remaining, true),
                extra: false,
            });
        }
        for &fpga in &idle {
            // The pick may land on a donor drained earlier in this iteration.
            let donor = (0..avail.len())
                .map(|k| avail[(cnt + k) % avail.len()])
                .find(|&j| accounting == ExtraAccounting::Oversample || remaining[j] > 0);
            let Some(donor) = donor else { break };
            let consume = accounting == ExtraAccounting::ConsumeQuota;
            let seq_no = draw(donor, &mut remaining, consume);
            slots.push(Slot {
                fpga: match policy {
                    Policy::TwoStage => fpga,
                    Policy::Unbalanced => donor,
                },
                partition: donor,
                seq_no,
                extra: true,
            });
            cnt += 1;
        }
        plans.push(IterationPlan {
            iteration: plans.len(),
            stage: Stage::Stage2,
            slots,
        });
    }
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EpochTotals {
    pub per_fpga: Vec<usize>,
    pub per_partition: Vec<usize>,
}

pub fn epoch_totals(plans: &[IterationPlan], p: usize) -> EpochTotals {
    let mut per_fpga = vec![0; p];
    let mut per_partition = vec![0; p];
    for slot in plans.iter().flat_map(|it| &it.slots) {
        per_fpga[slot.fpga] += 1;
        per_partition[slot.partition] += 1;
    }
    EpochTotals {
        per_fpga,
        per_partition,
    }
}

/// CSV trace: `iteration,fpga,partition,seq_no,stage`.
pub fn write_schedule_csv<W: Write>(plans: &[IterationPlan], mut out: W) -> Result<()> {
    writeln!(out, "iteration,fpga,partition,seq_no,stage")?;
    for it in plans {
        for s in &it.slots {
            let stage = match it.stage {
                Stage::Stage1 => "stage1",
                Stage::Stage2 => "stage2",
            };
            writeln!(
                out,
                "{},{},{},{},{}",
                it.iteration, s.fpga, s.partition, s.seq_no, stage
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loads(it: &IterationPlan, p: usize) -> Vec<usize> {
        (0..p).map(|f| it.load(f)).collect()
    }

    #[test]
    fn equal_quotas_stay_in_stage_one() {
        let plans = schedule_epoch(&[2, 2, 2], Policy::TwoStage).unwrap();
        assert_eq!(plans.len(), 2);
        for it in &plans {
            assert_eq!(it.stage, Stage::Stage1);
            for s in &it.slots {
                assert_eq!(s.fpga, s.partition);
            }
        }
    }

    #[test]
    fn skewed_trace_two_stage() {
        // partitions hold 5, 3 and 4 batches
        let plans = schedule_epoch(&[5, 3, 4], Policy::TwoStage).unwrap();
        assert_eq!(plans.len(), 4);
        assert!(plans[..3].iter().all(|it| it.stage == Stage::Stage1));
        let fourth = &plans[3];
        assert_eq!(fourth.stage, Stage::Stage2);
        let mut slots = fourth.slots.clone();
        slots.sort_by_key(|s| s.fpga);
        assert_eq!(
            slots,
            vec![
                Slot {
                    fpga: 0,
                    partition: 0,
                    seq_no: 3,
                    extra: false
                },
                Slot {
                    fpga: 1,
                    partition: 0,
                    seq_no: 4,
                    extra: true
                },
                Slot {
                    fpga: 2,
                    partition: 2,
                    seq_no: 3,
                    extra: false
                },
            ]
        );
        assert!(plans.iter().all(|it| it.max_load(3) == 1));
    }

    #[test]
    fn skewed_trace_unbalanced() {
        let plans = schedule_epoch(&[5, 3, 4], Policy::Unbalanced).unwrap();
        assert_eq!(loads(&plans[3], 3), vec![2, 0, 1]);
    }

    #[test]
    fn extras_keep_per_partition_totals() {
        let balanced = schedule_epoch(&[3, 1], Policy::TwoStage).unwrap();
        let skewed = schedule_epoch(&[3, 1], Policy::Unbalanced).unwrap();
        assert_eq!(balanced.len(), 2);
        let a = epoch_totals(&balanced, 2);
        let b = epoch_totals(&skewed, 2);
        assert_eq!(a.per_partition, vec![3, 1]);
        assert_eq!(b.per_partition, vec![3, 1]);
        assert_eq!(a.per_fpga, vec![2, 2]);
        assert_eq!(b.per_fpga, vec![3, 1]);
        assert_eq!(
            epoch_totals(&schedule_epoch(&[2, 2], Policy::TwoStage).unwrap(), 2).per_partition,
            vec![2, 2]
        );
    }

    #[test]
    fn final_iteration_may_be_partial() {
        // 7 batches over 3 FPGAs: 2 full iterations and one with a single batch
        let plans = schedule_epoch(&[7, 0, 0], Policy::TwoStage).unwrap();
        let sizes: Vec<_> = plans.iter().map(|it| it.slots.len()).collect();
        assert_eq!(sizes, vec![3, 3, 1]);
    }

    #[test]
    fn round_robin_counter_spans_iterations() {
        // two donors, two idle FPGAs
        let plans = schedule_epoch(&[9, 9, 0, 0], Policy::TwoStage).unwrap();
        let donors: Vec<Vec<usize>> = plans
            .iter()
            .map(|it| it.slots.iter().filter(|s| s.extra).map(|s| s.partition).collect())
            .collect();
        assert_eq!(donors[0], vec![0, 1]);
        assert_eq!(donors[1], vec![0, 1]);
    }

    #[test]
    fn oversample_keeps_own_quota_and_adds_extras() {
        let plans = schedule_epoch_with(&[3, 1], Policy::TwoStage, ExtraAccounting::Oversample).unwrap();
        let totals = epoch_totals(&plans, 2);
        assert_eq!(plans.len(), 3);
        assert_eq!(totals.per_partition, vec![5, 1]);
        assert_eq!(totals.per_fpga, vec![3, 3]);
    }

    #[test]
    fn single_fpga_never_idles() {
        let a = schedule_epoch(&[4], Policy::TwoStage).unwrap();
        let b = schedule_epoch(&[4], Policy::Unbalanced).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn zero_fpgas_rejected() {
        assert!(schedule_epoch(&[], Policy::TwoStage).is_err());
    }

    #[test]
    fn csv_trace() {
        let plans = schedule_epoch(&[1, 2], Policy::TwoStage).unwrap();
        let mut buf = Vec::new();
        write_schedule_csv(&plans, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "iteration,fpga,partition,seq_no,stage\n0,0,0,0,stage1\n0,1,1,0,stage1\n1,1,1,1,stage2\n"
        );
    }
}
