use std::path::Path;

use serde_json::{json, Value};

use super::SimResult;

/// Chrome trace-event JSON: one complete ("X") event per device an op
/// occupies, times in integer microseconds, the device as `pid`.
pub fn chrome_trace(result: &SimResult) -> String {
    let us = |s: f64| (s * 1e6).round() as u64;
    let events: Vec<Value> = result
        .trace
        .iter()
        .flat_map(|e| {
            e.devices.iter().map(move |d| {
                json!({
                    "name": e.label,
                    "cat": e.op_type,
                    "ph": "X",
                    "ts": us(e.start),
                    "dur": us(e.duration),
                    "pid": d.0,
                    "tid": 0,
                    "args": {"op_index": e.op_index},
                })
            })
        })
        .collect();
    if events.is_empty() {
        return "[]".to_string();
    }
    serde_json::to_string_pretty(&events).expect("trace serializes")
}

pub fn export_trace(result: &SimResult, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, chrome_trace(result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DeviceId;
    use crate::sim::{MemoryProfile, TraceEvent};

    fn result(trace: Vec<TraceEvent>) -> SimResult {
        SimResult {
            total_time: trace.iter().map(TraceEvent::end).fold(0.0, f64::max),
            trace,
            memory: MemoryProfile::default(),
            throughput: None,
        }
    }

    #[test]
    fn empty() {
        assert_eq!(chrome_trace(&result(Vec::new())), "[]");
    }

    #[test]
    fn unit_conversion() {
        let r = result(vec![TraceEvent {
            op_index: 0,
            label: "a".into(),
            op_type: "Relu".into(),
            devices: vec![DeviceId(2)],
            start: 0.0,
            duration: 1.0,
        }]);
        let v: Value = serde_json::from_str(&chrome_trace(&r)).unwrap();
        assert_eq!(v[0]["ts"], 0);
        assert_eq!(v[0]["dur"], 1_000_000);
        assert_eq!(v[0]["pid"], 2);
        assert_eq!(v[0]["ph"], "X");
    }
}
