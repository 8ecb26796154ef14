//! GEMM shapes of the AlexNet layers after im2col lowering.

use serde::Serialize;

use crate::analytic::ProblemShape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerPreset {
    pub name: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl LayerPreset {
    pub fn shape(&self) -> ProblemShape {
        ProblemShape {
            m: self.m,
            k: self.k,
            n: self.n,
        }
    }
}

const fn layer(name: &'static str, m: usize, k: usize, n: usize) -> LayerPreset {
    LayerPreset { name, m, k, n }
}

pub const ALEXNET: [LayerPreset; 8] = [
    layer("conv-1", 96, 363, 3025),
    layer("conv-2", 128, 1200, 729),
    layer("conv-3", 384, 2304, 169),
    layer("conv-4", 192, 1728, 169),
    layer("conv-5", 128, 1728, 169),
    layer("fc-6", 128, 9216, 4096),
    layer("fc-7", 128, 4096, 4096),
    layer("fc-8", 128, 4096, 1000),
];

pub fn preset(name: &str) -> Result<LayerPreset> {
    ALEXNET
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}
