use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::DeviceId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    /// flop/s
    pub flops: f64,
    /// bytes/s
    pub dram_bandwidth: f64,
    /// seconds
    pub kernel_launch_overhead: f64,
    /// bytes
    pub memory_capacity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// bytes/s
    pub bandwidth: f64,
    /// seconds
    pub latency: f64,
}

/// Devices grouped into nodes of `size` consecutive ids whose links are
/// faster than the default link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub size: usize,
    pub bandwidth: f64,
    pub latency: f64,
}

/// On-disk form of a topology. Either `device` (uniform) or `devices`
/// (one entry per device) must be given, and either `link` (uniform) or
/// the `bandwidth`/`latency` matrices. Diagonal entries are ignored: a
/// device reaches itself at infinite bandwidth and zero latency.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    pub world_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices: Option<Vec<DeviceParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid topology JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    devices: Vec<DeviceParams>,
    bandwidth: Vec<Vec<f64>>,
    latency: Vec<Vec<f64>>,
}

fn positive(name: &str, v: f64) -> Result<(), TopologyError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TopologyError::Invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

impl Topology {
    /// Every device identical and fully connected by identical links.
    pub fn uniform(world_size: usize, device: DeviceParams, link: LinkParams) -> Topology {
        Topology::from_file(&TopologyFile {
            world_size,
            device: Some(device),
            link: Some(link),
            ..TopologyFile::default()
        })
        .expect("uniform topology parameters must be positive")
    }

    /// Identical devices with effectively unlimited memory on a uniform
    /// network.
    pub fn homogeneous(world_size: usize, flops: f64, launch_overhead: f64, bandwidth: f64, latency: f64) -> Topology {
        Topology::uniform(
            world_size,
            DeviceParams {
                flops,
                dram_bandwidth: 1e12,
                kernel_launch_overhead: launch_overhead,
                memory_capacity: 1e18,
            },
            LinkParams { bandwidth, latency },
        )
    }

    pub fn from_json(text: &str) -> Result<Topology, TopologyError> {
        Topology::from_file(&serde_json::from_str(text)?)
    }

    pub fn from_file(file: &TopologyFile) -> Result<Topology, TopologyError> {
        let w = file.world_size;
        if w == 0 {
            return Err(TopologyError::Invalid("world_size must be at least 1".to_string()));
        }
        let devices = match (&file.device, &file.devices) {
            (Some(d), None) => vec![*d; w],
            (None, Some(ds)) if ds.len() == w => ds.clone(),
            (None, Some(ds)) => {
                return Err(TopologyError::Invalid(format!("{} device entries for world_size {w}", ds.len())))
            }
            _ => return Err(TopologyError::Invalid("give exactly one of `device` or `devices`".to_string())),
        };
        for (i, d) in devices.iter().enumerate() {
            positive(&format!("device {i} flops"), d.flops)?;
            positive(&format!("device {i} dram_bandwidth"), d.dram_bandwidth)?;
            positive(&format!("device {i} memory_capacity"), d.memory_capacity)?;
            if !(d.kernel_launch_overhead >= 0.0 && d.kernel_launch_overhead.is_finite()) {
                return Err(TopologyError::Invalid(format!("device {i} kernel_launch_overhead must be non-negative")));
            }
        }
        let (mut bandwidth, mut latency) = match (&file.link, &file.bandwidth, &file.latency) {
            (Some(l), None, None) => (vec![vec![l.bandwidth; w]; w], vec![vec![l.latency; w]; w]),
            (None, Some(b), Some(l)) => {
                for (name, m) in [("bandwidth", b), ("latency", l)] {
                    if m.len() != w || m.iter().any(|r| r.len() != w) {
                        return Err(TopologyError::Invalid(format!("{name} matrix must be {w}x{w}")));
                    }
                }
                (b.clone(), l.clone())
            }
            _ => {
                return Err(TopologyError::Invalid(
                    "give either `link` or both `bandwidth` and `latency` matrices".to_string(),
                ))
            }
        };
        if let Some(node) = file.node {
            if node.size == 0 {
                return Err(TopologyError::Invalid("node size must be at least 1".to_string()));
            }
            for i in 0..w {
                for j in 0..w {
                    if i / node.size == j / node.size {
                        bandwidth[i][j] = node.bandwidth;
                        latency[i][j] = node.latency;
                    }
                }
            }
        }
        for i in 0..w {
            for j in 0..w {
                if i == j {
                    continue;
                }
                positive(&format!("bandwidth[{i}][{j}]"), bandwidth[i][j])?;
                if !(latency[i][j] >= 0.0 && latency[i][j].is_finite()) {
                    return Err(TopologyError::Invalid(format!("latency[{i}][{j}] must be non-negative")));
                }
                if bandwidth[i][j] != bandwidth[j][i] || latency[i][j] != latency[j][i] {
                    return Err(TopologyError::Invalid(format!("link matrices must be symmetric at ({i}, {j})")));
                }
            }
            bandwidth[i][i] = f64::INFINITY;
            latency[i][i] = 0.0;
        }
        Ok(Topology {
            devices,
            bandwidth,
            latency,
        })
    }

    pub fn world_size(&self) -> usize {
        self.devices.len()
    }

    pub fn contains(&self, d: DeviceId) -> bool {
        d.index() < self.devices.len()
    }

    pub fn device(&self, d: DeviceId) -> &DeviceParams {
        &self.devices[d.index()]
    }

    pub fn bandwidth(&self, a: DeviceId, b: DeviceId) -> f64 {
        self.bandwidth[a.index()][b.index()]
    }

    pub fn latency(&self, a: DeviceId, b: DeviceId) -> f64 {
        self.latency[a.index()][b.index()]
    }

    /// Copy with every time-like parameter multiplied by `lambda`: op costs
    /// of the analytic model scale by `lambda`.
    pub fn scaled_time(&self, lambda: f64) -> Topology {
        let mut t = self.clone();
        for d in &mut t.devices {
            d.flops /= lambda;
            d.dram_bandwidth /= lambda;
            d.kernel_launch_overhead *= lambda;
        }
        for row in &mut t.bandwidth {
            row.iter_mut().for_each(|b| *b /= lambda);
        }
        for row in &mut t.latency {
            row.iter_mut().for_each(|l| *l *= lambda);
        }
        t
    }

    pub fn to_file(&self) -> TopologyFile {
        let finite = |m: &Vec<Vec<f64>>, diag: f64| -> Vec<Vec<f64>> {
            m.iter()
                .enumerate()
                .map(|(i, r)| r.iter().enumerate().map(|(j, &v)| if i == j { diag } else { v }).collect())
                .collect()
        };
        TopologyFile {
            world_size: self.world_size(),
            devices: Some(self.devices.clone()),
            bandwidth: Some(finite(&self.bandwidth, 0.0)),
            latency: Some(finite(&self.latency, 0.0)),
            ..TopologyFile::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("topology serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIFORM: &str = r#"{
        "world_size": 4,
        "device": {"flops": 1e12, "dram_bandwidth": 1e11, "kernel_launch_overhead": 1e-5, "memory_capacity": 1e9},
        "link": {"bandwidth": 1e9, "latency": 1e-5},
        "node": {"size": 2, "bandwidth": 1e11, "latency": 1e-6}
    }"#;

    #[test]
    fn parse_uniform_with_nodes() {
        let t = Topology::from_json(UNIFORM).unwrap();
        assert_eq!(t.world_size(), 4);
        assert_eq!(t.bandwidth(DeviceId(0), DeviceId(1)), 1e11);
        assert_eq!(t.bandwidth(DeviceId(1), DeviceId(2)), 1e9);
        assert_eq!(t.bandwidth(DeviceId(2), DeviceId(2)), f64::INFINITY);
        assert_eq!(t.latency(DeviceId(3), DeviceId(3)), 0.0);
    }

    #[test]
    fn json_round_trip() {
        let t = Topology::from_json(UNIFORM).unwrap();
        assert_eq!(Topology::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn rejects_asymmetric_and_missing() {
        let bad = r#"{"world_size": 2,
            "device": {"flops": 1, "dram_bandwidth": 1, "kernel_launch_overhead": 0, "memory_capacity": 1},
            "bandwidth": [[0, 1], [2, 0]], "latency": [[0, 0], [0, 0]]}"#;
        assert!(Topology::from_json(bad).is_err());
        assert!(Topology::from_json(r#"{"world_size": 2}"#).is_err());
        assert!(Topology::from_json(r#"{"world_size": 2, "bogus": 1}"#).is_err());
    }
}
