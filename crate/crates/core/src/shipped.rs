//! The kernels under `kernels/`, embedded at build time.

use crate::frontend::RowShape;

pub struct ShippedKernel {
    pub name: &'static str,
    pub source: &'static str,
    /// Shape used by tests and `tcmc run` when none is given.
    pub default_shape: RowShape,
}

pub const KERNELS: [ShippedKernel; 6] = [
    ShippedKernel {
        name: "softmax",
        source: include_str!("../../../kernels/softmax.tk"),
        default_shape: RowShape { rows: Some(8), cols: 64 },
    },
    ShippedKernel {
        name: "gelu",
        source: include_str!("../../../kernels/gelu.tk"),
        default_shape: RowShape { rows: None, cols: 1024 },
    },
    ShippedKernel {
        name: "silu",
        source: include_str!("../../../kernels/silu.tk"),
        default_shape: RowShape { rows: None, cols: 1024 },
    },
    ShippedKernel {
        name: "rmsnorm",
        source: include_str!("../../../kernels/rmsnorm.tk"),
        default_shape: RowShape { rows: Some(8), cols: 64 },
    },
    ShippedKernel {
        name: "vecadd2d",
        source: include_str!("../../../kernels/vecadd2d.tk"),
        default_shape: RowShape { rows: Some(16), cols: 64 },
    },
    ShippedKernel {
        name: "expseries",
        source: include_str!("../../../kernels/expseries.tk"),
        default_shape: RowShape { rows: None, cols: 1024 },
    },
];

pub fn get(name: &str) -> Option<&'static ShippedKernel> {
    KERNELS.iter().find(|k| k.name == name)
}
