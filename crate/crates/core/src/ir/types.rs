use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of a device in the fixed device set of a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub u32);

impl DeviceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    I32,
    I64,
    Bool,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::F32, DType::F16, DType::I32, DType::I64, DType::Bool];

    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I64 => 8,
            DType::Bool => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F16)
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::I32 => "I32",
            DType::I64 => "I64",
            DType::Bool => "Bool",
        }
    }

    pub fn from_name(s: &str) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.name() == s)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Abstract value of the type domain: data type, shape and placement.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Type {
    Tensor {
        dtype: DType,
        shape: Vec<usize>,
        device: DeviceId,
    },
    Scalar {
        dtype: DType,
        device: DeviceId,
    },
    Tuple(Vec<Type>),
}

impl Type {
    pub fn tensor(dtype: DType, shape: impl Into<Vec<usize>>, device: DeviceId) -> Type {
        Type::Tensor {
            dtype,
            shape: shape.into(),
            device,
        }
    }

    pub fn f32(shape: impl Into<Vec<usize>>, device: u32) -> Type {
        Type::tensor(DType::F32, shape, DeviceId(device))
    }

    /// Device of a tensor or scalar; tuples report the device of their
    /// components when all components agree.
    pub fn device(&self) -> Option<DeviceId> {
        match self {
            Type::Tensor { device, .. } | Type::Scalar { device, .. } => Some(*device),
            Type::Tuple(items) => {
                let mut devs = items.iter().map(Type::device);
                let first = devs.next()??;
                devs.all(|d| d == Some(first)).then_some(first)
            }
        }
    }

    pub fn dtype(&self) -> Option<DType> {
        match self {
            Type::Tensor { dtype, .. } | Type::Scalar { dtype, .. } => Some(*dtype),
            Type::Tuple(_) => None,
        }
    }

    /// Shape of a tensor; scalars have the empty shape.
    pub fn shape(&self) -> Option<&[usize]> {
        match self {
            Type::Tensor { shape, .. } => Some(shape),
            Type::Scalar { .. } => Some(&[]),
            Type::Tuple(_) => None,
        }
    }

    pub fn num_elements(&self) -> usize {
        match self {
            Type::Tensor { shape, .. } => shape.iter().product(),
            Type::Scalar { .. } => 1,
            Type::Tuple(items) => items.iter().map(Type::num_elements).sum(),
        }
    }

    pub fn size_bytes(&self) -> u64 {
        match self {
            Type::Tensor { dtype, .. } | Type::Scalar { dtype, .. } => {
                (self.num_elements() * dtype.width()) as u64
            }
            Type::Tuple(items) => items.iter().map(Type::size_bytes).sum(),
        }
    }

    pub fn with_device(&self, device: DeviceId) -> Type {
        match self {
            Type::Tensor { dtype, shape, .. } => Type::Tensor {
                dtype: *dtype,
                shape: shape.clone(),
                device,
            },
            Type::Scalar { dtype, .. } => Type::Scalar {
                dtype: *dtype,
                device,
            },
            Type::Tuple(items) => Type::Tuple(items.iter().map(|t| t.with_device(device)).collect()),
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Tensor {
                dtype,
                shape,
                device,
            } => {
                write!(f, "{dtype}[")?;
                for (i, d) in shape.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{d}")?;
                }
                write!(f, "]@{device}")
            }
            Type::Scalar { dtype, device } => write!(f, "{dtype}@{device}"),
            Type::Tuple(items) => {
                f.write_str("Tuple<")?;
                for (i, t) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{t}")?;
                }
                f.write_str(">")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(Type::f32([1024], 0).size_bytes(), 4096);
        let s = Type::Scalar {
            dtype: DType::I64,
            device: DeviceId(1),
        };
        assert_eq!(s.size_bytes(), 8);
        let t = Type::Tuple(vec![Type::f32([2, 2], 0), s]);
        assert_eq!(t.size_bytes(), 24);
        assert_eq!(t.device(), None);
    }

    #[test]
    fn display() {
        assert_eq!(Type::f32([128, 64], 0).to_string(), "F32[128,64]@0");
        assert_eq!(Type::f32(Vec::new(), 3).to_string(), "F32[]@3");
        let t = Type::Tuple(vec![Type::f32([2], 0), Type::f32([3], 0)]);
        assert_eq!(t.to_string(), "Tuple<F32[2]@0, F32[3]@0>");
        assert_eq!(t.device(), Some(DeviceId(0)));
    }
}
