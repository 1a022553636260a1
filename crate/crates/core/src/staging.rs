//! Input packing and the host-to-device transfer cost model.
//!
//! Pageable memory costs an extra host copy into a staging buffer before the
//! bus transfer; pinned memory goes straight over the bus. Every transfer
//! also pays a fixed launch overhead, which packing many small arrays into
//! one buffer amortizes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEGMENT_ALIGN: u64 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransferError {
    #[error("duplicate array name {0:?}")]
    DuplicateName(String),
    #[error("corrupt segment table: {0}")]
    CorruptSegments(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

/// Named arrays laid out back to back in one buffer, each starting on an
/// 8-byte boundary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackedBatch {
    pub buffer: Vec<u8>,
    pub segments: Vec<Segment>,
    pub total_bytes: u64,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(SEGMENT_ALIGN) * SEGMENT_ALIGN
}

impl PackedBatch {
    /// Repacks into this batch, reusing its allocations.
    pub fn pack_from<'a>(
        &mut self,
        arrays: impl IntoIterator<Item = (&'a str, &'a [u8])>,
    ) -> Result<(), TransferError> {
        self.buffer.clear();
        self.segments.clear();
        let mut seen = HashSet::new();
        for (name, bytes) in arrays {
            if !seen.insert(name) {
                return Err(TransferError::DuplicateName(name.to_string()));
            }
            let offset = align_up(self.buffer.len() as u64);
            self.buffer.resize(offset as usize, 0);
            self.buffer.extend_from_slice(bytes);
            self.segments.push(Segment { name: name.to_string(), offset, length: bytes.len() as u64 });
        }
        self.total_bytes = self.buffer.len() as u64;
        Ok(())
    }

    /// Checks the segment table against the layout `pack_inputs` produces.
    pub fn validate(&self) -> Result<(), TransferError> {
        let corrupt = |m: String| Err(TransferError::CorruptSegments(m));
        if self.total_bytes != self.buffer.len() as u64 {
            return corrupt(format!("total_bytes {} but buffer holds {}", self.total_bytes, self.buffer.len()));
        }
        let mut names = HashSet::new();
        let mut end = 0u64;
        for (i, s) in self.segments.iter().enumerate() {
            if !names.insert(s.name.as_str()) {
                return corrupt(format!("segment {i} repeats name {:?}", s.name));
            }
            if s.offset % SEGMENT_ALIGN != 0 {
                return corrupt(format!("segment {i} offset {} is unaligned", s.offset));
            }
            if s.offset < end {
                return corrupt(format!("segment {i} overlaps its predecessor"));
            }
            if s.offset != align_up(end) {
                return corrupt(format!("gap before segment {i}"));
            }
            end = s
                .offset
                .checked_add(s.length)
                .ok_or_else(|| TransferError::CorruptSegments(format!("segment {i} length overflows")))?;
        }
        if end != self.total_bytes {
            return corrupt(format!("segments end at {end}, buffer at {}", self.total_bytes));
        }
        Ok(())
    }
}

/// Lays `named_arrays` out in one contiguous buffer, in order.
pub fn pack_inputs<N: AsRef<str>, B: AsRef<[u8]>>(named_arrays: &[(N, B)]) -> Result<PackedBatch, TransferError> {
    let mut batch = PackedBatch::default();
    batch.pack_from(named_arrays.iter().map(|(n, b)| (n.as_ref(), b.as_ref())))?;
    Ok(batch)
}

/// Inverse of [`pack_inputs`].
pub fn unpack(batch: &PackedBatch) -> Result<Vec<(String, Vec<u8>)>, TransferError> {
    batch.validate()?;
    Ok(batch
        .segments
        .iter()
        .map(|s| {
            let start = s.offset as usize;
            (s.name.clone(), batch.buffer[start..start + s.length as usize].to_vec())
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Pinned,
    Pageable,
}

/// Link speeds in bytes per second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthTable {
    #[serde(rename = "network_Bps")]
    pub network_bytes_per_s: f64,
    #[serde(rename = "host_copy_Bps")]
    pub host_copy_bytes_per_s: f64,
    #[serde(rename = "staging_bus_Bps")]
    pub staging_bus_bytes_per_s: f64,
    pub per_transfer_overhead_s: f64,
}

impl Default for BandwidthTable {
    fn default() -> Self {
        // Only the network figure is a measured reference value; the others
        // are placeholders for a PCIe-class bus and a DRAM copy.
        Self {
            network_bytes_per_s: 1.25e9,
            host_copy_bytes_per_s: 10e9,
            staging_bus_bytes_per_s: 12e9,
            per_transfer_overhead_s: 1e-5,
        }
    }
}

impl BandwidthTable {
    pub fn validate(&self) -> Result<(), String> {
        let rates = [self.network_bytes_per_s, self.host_copy_bytes_per_s, self.staging_bus_bytes_per_s];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err("bandwidths must be positive and finite".into());
        }
        if !(self.per_transfer_overhead_s >= 0.0) {
            return Err("per_transfer_overhead_s must be non-negative".into());
        }
        Ok(())
    }

    /// Seconds to move `bytes` over the network link.
    pub fn network_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.network_bytes_per_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    pub mode: TransferMode,
    pub bytes: u64,
    pub modeled_time_s: f64,
    pub hop_breakdown: Vec<(&'static str, f64)>,
    /// Fixed launch costs paid, `per_transfer_overhead_s` each.
    pub overhead_s: f64,
}

/// One transfer of `bytes`.
pub fn simulate_bytes(bytes: u64, mode: TransferMode, table: &BandwidthTable) -> TransferReport {
    let bus = ("staging_bus", bytes as f64 / table.staging_bus_bytes_per_s);
    let hops = match mode {
        TransferMode::Pinned => vec![bus],
        TransferMode::Pageable => {
            vec![("host_copy", bytes as f64 / table.host_copy_bytes_per_s), bus]
        }
    };
    let overhead_s = table.per_transfer_overhead_s;
    let modeled_time_s = hops.iter().map(|(_, t)| t).sum::<f64>() + overhead_s;
    TransferReport { mode, bytes, modeled_time_s, hop_breakdown: hops, overhead_s }
}

/// The whole packed buffer as a single transfer.
pub fn simulate_transfer(batch: &PackedBatch, mode: TransferMode, table: &BandwidthTable) -> TransferReport {
    simulate_bytes(batch.total_bytes, mode, table)
}

/// Every segment as its own transfer, as if the inputs were never packed.
pub fn simulate_unpacked(batch: &PackedBatch, mode: TransferMode, table: &BandwidthTable) -> TransferReport {
    let mut report = TransferReport { mode, bytes: 0, modeled_time_s: 0.0, hop_breakdown: Vec::new(), overhead_s: 0.0 };
    for seg in &batch.segments {
        let part = simulate_bytes(seg.length, mode, table);
        report.bytes += part.bytes;
        report.modeled_time_s += part.modeled_time_s;
        report.overhead_s += part.overhead_s;
        for (name, t) in part.hop_breakdown {
            match report.hop_breakdown.iter_mut().find(|(n, _)| *n == name) {
                Some((_, acc)) => *acc += t,
                None => report.hop_breakdown.push((name, t)),
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(host: f64, bus: f64, overhead: f64) -> BandwidthTable {
        BandwidthTable {
            network_bytes_per_s: 1.25e9,
            host_copy_bytes_per_s: host,
            staging_bus_bytes_per_s: bus,
            per_transfer_overhead_s: overhead,
        }
    }

    #[test]
    fn aligned_offsets() {
        let arrays = [("a", vec![1u8; 100]), ("b", vec![2u8; 200]), ("c", vec![3u8; 300])];
        let batch = pack_inputs(&arrays).unwrap();
        let offsets: Vec<u64> = batch.segments.iter().map(|s| s.offset).collect();
        assert_eq!(offsets, vec![0, 104, 304]);
        assert_eq!(batch.total_bytes, 604);
        let back = unpack(&batch).unwrap();
        assert_eq!(back.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(back[1].1, vec![2u8; 200]);
    }

    #[test]
    fn empty_and_single() {
        let none: [(&str, &[u8]); 0] = [];
        let batch = pack_inputs(&none).unwrap();
        assert!(batch.buffer.is_empty() && batch.segments.is_empty());
        let one = pack_inputs(&[("x", &[9u8, 8, 7][..])]).unwrap();
        assert_eq!(unpack(&one).unwrap(), vec![("x".to_string(), vec![9, 8, 7])]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = pack_inputs(&[("a", &[1u8][..]), ("a", &[2u8][..])]);
        assert_eq!(r, Err(TransferError::DuplicateName("a".into())));
    }

    #[test]
    fn pinned_and_pageable_costs() {
        let t = table(2000.0, 1000.0, 0.0);
        let batch = pack_inputs(&[("x", vec![0u8; 1000])]).unwrap();
        let pinned = simulate_transfer(&batch, TransferMode::Pinned, &t);
        let pageable = simulate_transfer(&batch, TransferMode::Pageable, &t);
        assert_eq!(pinned.modeled_time_s, 1.0);
        assert_eq!(pageable.modeled_time_s, 1.5);
        assert_eq!(pageable.hop_breakdown, vec![("host_copy", 0.5), ("staging_bus", 1.0)]);
    }

    #[test]
    fn zero_bytes_cost_overhead_only() {
        let t = table(2000.0, 1000.0, 0.25);
        for mode in [TransferMode::Pinned, TransferMode::Pageable] {
            assert_eq!(simulate_bytes(0, mode, &t).modeled_time_s, 0.25);
        }
    }

    #[test]
    fn packing_saves_exact_overheads() {
        let t = table(4096.0, 2048.0, 0.125);
        // Multiples of 8 so packing adds no padding bytes.
        let arrays: Vec<(String, Vec<u8>)> = (0..5).map(|i| (format!("a{i}"), vec![0u8; 64 * (i + 1)])).collect();
        let batch = pack_inputs(&arrays).unwrap();
        for mode in [TransferMode::Pinned, TransferMode::Pageable] {
            let separate = simulate_unpacked(&batch, mode, &t).modeled_time_s;
            let packed = simulate_transfer(&batch, mode, &t).modeled_time_s;
            assert!((separate - packed - 4.0 * 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupt_tables_rejected() {
        let good = pack_inputs(&[("a", vec![0u8; 10]), ("b", vec![0u8; 10])]).unwrap();
        let mut overlap = good.clone();
        overlap.segments[1].offset = 8;
        assert!(unpack(&overlap).is_err());
        let mut unaligned = good.clone();
        unaligned.segments[1].offset = 17;
        assert!(unpack(&unaligned).is_err());
        let mut short = good.clone();
        short.total_bytes += 1;
        assert!(unpack(&short).is_err());
        let mut long = good;
        long.segments[1].length = u64::MAX;
        assert!(unpack(&long).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(arrays in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..8)) {
            let named: Vec<(String, Vec<u8>)> = arrays.into_iter().enumerate().map(|(i, a)| (format!("n{i}"), a)).collect();
            let batch = pack_inputs(&named).unwrap();
            prop_assert!(batch.segments.iter().all(|s| s.offset % 8 == 0));
            prop_assert_eq!(unpack(&batch).unwrap(), named);
        }

        #[test]
        fn fuzzed_tables_never_overlap_when_accepted(
            lens in proptest::collection::vec(0u64..40, 1..6),
            offsets in proptest::collection::vec(0u64..200, 1..6),
        ) {
            let n = lens.len().min(offsets.len());
            let mut segments: Vec<Segment> = (0..n)
                .map(|i| Segment { name: format!("s{i}"), offset: offsets[i], length: lens[i] })
                .collect();
            segments.sort_by_key(|s| s.offset);
            let end = segments.iter().map(|s| s.offset + s.length).max().unwrap_or(0);
            let batch = PackedBatch { buffer: vec![0; end as usize], segments: segments.clone(), total_bytes: end };
            let overlaps = segments.windows(2).any(|w| w[0].offset + w[0].length > w[1].offset);
            if overlaps {
                prop_assert!(unpack(&batch).is_err());
            }
            if unpack(&batch).is_ok() {
                let names: Vec<(&str, &[u8])> = Vec::new();
                let _ = names;
                let mut expect = 0;
                for s in &segments {
                    prop_assert_eq!(s.offset, align_up(expect));
                    expect = s.offset + s.length;
                }
            }
        }

        #[test]
        fn pinned_never_slower(bytes in 0u64..1 << 40, host in 1.0f64..1e12, bus in 1.0f64..1e12, oh in 0.0f64..1.0) {
            let t = table(host, bus, oh);
            let pinned = simulate_bytes(bytes, TransferMode::Pinned, &t).modeled_time_s;
            let pageable = simulate_bytes(bytes, TransferMode::Pageable, &t).modeled_time_s;
            prop_assert!(pinned <= pageable);
        }

        #[test]
        fn packed_never_slower_than_parts(lens in proptest::collection::vec(0usize..64, 1..8), oh in 0.0f64..1e-3) {
            let t = table(1e6, 1e6, oh);
            let named: Vec<(String, Vec<u8>)> = lens.iter().enumerate().map(|(i, &l)| (format!("n{i}"), vec![0u8; l * 8])).collect();
            let batch = pack_inputs(&named).unwrap();
            for mode in [TransferMode::Pinned, TransferMode::Pageable] {
                let packed = simulate_transfer(&batch, mode, &t);
                let parts = simulate_unpacked(&batch, mode, &t);
                prop_assert!(packed.modeled_time_s <= parts.modeled_time_s + 1e-15);
                let hops: f64 = packed.hop_breakdown.iter().map(|(_, s)| s).sum();
                prop_assert!((packed.modeled_time_s - hops - packed.overhead_s).abs() < 1e-12);
            }
        }
    }
}
