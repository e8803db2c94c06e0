use std::fmt;

use crate::ir::{DType, DeviceId, Type};

use super::OpError;

/// Dense row-major tensor. Elements are held as `f64` and rounded to the
/// declared dtype whenever an op produces a new tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub device: DeviceId,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f64>, device: DeviceId) -> Result<Tensor, OpError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(OpError::Shape(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dtype,
            shape,
            data,
            device,
        }
        .rounded())
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>, device: DeviceId) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            dtype,
            shape,
            data: vec![0.0; n],
            device,
        }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f64>, device: u32) -> Result<Tensor, OpError> {
        Tensor::new(DType::F32, shape, data, DeviceId(device))
    }

    pub fn int_list(values: &[i64], device: DeviceId) -> Tensor {
        Tensor {
            dtype: DType::I64,
            shape: vec![values.len()],
            data: values.iter().map(|&v| v as f64).collect(),
            device,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn ty(&self) -> Type {
        if self.shape.is_empty() {
            Type::Scalar {
                dtype: self.dtype,
                device: self.device,
            }
        } else {
            Type::Tensor {
                dtype: self.dtype,
                shape: self.shape.clone(),
                device: self.device,
            }
        }
    }

    /// Rounds every element to the precision of the dtype.
    pub fn rounded(mut self) -> Tensor {
        match self.dtype {
            DType::F32 => self.data.iter_mut().for_each(|x| *x = *x as f32 as f64),
            DType::F16 => self.data.iter_mut().for_each(|x| *x = round_f16(*x)),
            DType::I32 | DType::I64 => self.data.iter_mut().for_each(|x| *x = x.trunc()),
            DType::Bool => self.data.iter_mut().for_each(|x| *x = if *x != 0.0 { 1.0 } else { 0.0 }),
        }
        self
    }

    pub fn with_device(mut self, device: DeviceId) -> Tensor {
        self.device = device;
        self
    }

    /// Integer vector view of a rank-1 integer tensor.
    pub fn as_int_list(&self) -> Option<Vec<i64>> {
        if matches!(self.dtype, DType::I32 | DType::I64) && self.rank() == 1 {
            Some(self.data.iter().map(|&x| x as i64).collect())
        } else {
            None
        }
    }
}

/// Round to the nearest IEEE half-precision value (ties to even), saturating
/// to infinity outside the representable range.
fn round_f16(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let a = x.abs();
    if a >= 65520.0 {
        return f64::INFINITY.copysign(x);
    }
    // Spacing of representable values: subnormals share the 2^-24 step.
    let exp = a.log2().floor().max(-14.0);
    let step = (exp - 10.0).exp2();
    let q = a / step;
    let r = q.round();
    let r = if (q - q.floor() - 0.5).abs() < f64::EPSILON && r % 2.0 != 0.0 { r - 1.0 } else { r };
    (r * step).copysign(x)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Concrete {
    Tensor(Tensor),
    Tuple(Vec<Concrete>),
}

impl Concrete {
    pub fn ty(&self) -> Type {
        match self {
            Concrete::Tensor(t) => t.ty(),
            Concrete::Tuple(items) => Type::Tuple(items.iter().map(Concrete::ty).collect()),
        }
    }
}

/// Element of the mixed concrete/abstract domain.
#[derive(Clone, Debug, PartialEq)]
pub enum MixedValue {
    Concrete(Concrete),
    Abstract(Type),
}

impl MixedValue {
    pub fn tensor(t: Tensor) -> MixedValue {
        MixedValue::Concrete(Concrete::Tensor(t))
    }

    pub fn is_concrete(&self) -> bool {
        matches!(self, MixedValue::Concrete(_))
    }

    pub fn ty(&self) -> Type {
        match self {
            MixedValue::Concrete(c) => c.ty(),
            MixedValue::Abstract(t) => t.clone(),
        }
    }

    pub fn device(&self) -> Option<DeviceId> {
        match self {
            MixedValue::Concrete(Concrete::Tensor(t)) => Some(t.device),
            MixedValue::Concrete(c) => c.ty().device(),
            MixedValue::Abstract(t) => t.device(),
        }
    }

    pub fn dtype(&self) -> Option<DType> {
        match self {
            MixedValue::Concrete(Concrete::Tensor(t)) => Some(t.dtype),
            MixedValue::Concrete(_) => None,
            MixedValue::Abstract(t) => t.dtype(),
        }
    }

    pub fn shape(&self) -> Option<Vec<usize>> {
        match self {
            MixedValue::Concrete(Concrete::Tensor(t)) => Some(t.shape.clone()),
            MixedValue::Concrete(_) => None,
            MixedValue::Abstract(t) => t.shape().map(<[usize]>::to_vec),
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            MixedValue::Concrete(Concrete::Tensor(t)) => Some(t),
            _ => None,
        }
    }

    pub fn into_tensor(self) -> Option<Tensor> {
        match self {
            MixedValue::Concrete(Concrete::Tensor(t)) => Some(t),
            _ => None,
        }
    }

    /// The abstraction of this value: concrete values map to their type.
    pub fn abstracted(&self) -> MixedValue {
        MixedValue::Abstract(self.ty())
    }

    pub fn kind_name(&self) -> &'static str {
        if self.is_concrete() {
            "concrete"
        } else {
            "abstract"
        }
    }
}

impl fmt::Display for MixedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixedValue::Abstract(t) => write!(f, "{t}"),
            MixedValue::Concrete(Concrete::Tensor(t)) if t.numel() <= 16 => {
                if t.rank() == 0 {
                    write!(f, "{}", t.data[0])
                } else {
                    write!(f, "{:?}", t.data)
                }
            }
            MixedValue::Concrete(c) => write!(f, "<{}>", c.ty()),
        }
    }
}
