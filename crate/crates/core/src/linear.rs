//! Low-rank linear layers and their BD replacement.
//!
//! A low-rank layer computes `y = (x U) Vᵀ`. Its BD form keeps `r` columns of
//! `U Vᵀ` as `B` and computes `h = x B`, then `y = [h, h C]` (first) or
//! `y = [h C, h]` (last).

use crate::bd::{self, Axis, BasisTag, BdFactors};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone)]
pub struct LowRankLayer {
    /// `d_in x r`
    pub u: Tensor2D,
    /// `d_out x r`
    pub v: Tensor2D,
}

impl LowRankLayer {
    pub fn new(u: Tensor2D, v: Tensor2D) -> Result<Self> {
        let r = u.cols();
        if v.cols() != r {
            return Err(Error::dim(
                "LowRankLayer::new",
                format!("U has rank {r}, V has rank {}", v.cols()),
            ));
        }
        if r == 0 || r >= u.rows().min(v.rows()) {
            return Err(Error::arg(format!(
                "rank {r} must be below min(d_in, d_out) = {}",
                u.rows().min(v.rows())
            )));
        }
        if u.precision() != v.precision() {
            return Err(Error::Precision {
                op: "LowRankLayer::new",
                left: u.precision(),
                right: v.precision(),
            });
        }
        Ok(Self { u, v })
    }

    pub fn d_in(&self) -> usize {
        self.u.rows()
    }

    pub fn d_out(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn stored_params(&self) -> usize {
        self.u.len() + self.v.len()
    }

    /// Dense `U Vᵀ`, `d_in x d_out`.
    pub fn weight(&self) -> Result<Tensor2D> {
        self.u.matmul(&self.v.transpose())
    }
}

#[derive(Debug, Clone)]
pub struct BdLinearLayer {
    /// Column-axis factors: `B` is `d_in x r`, `C` is `r x (d_out - r)`.
    pub factors: BdFactors,
}

impl BdLinearLayer {
    pub fn new(factors: BdFactors) -> Result<Self> {
        if factors.axis != Axis::Column {
            return Err(Error::arg("BD linear layers use column-axis factors"));
        }
        Ok(Self { factors })
    }

    pub fn tag(&self) -> BasisTag {
        self.factors.tag
    }

    pub fn d_in(&self) -> usize {
        self.factors.orig_rows
    }

    pub fn d_out(&self) -> usize {
        self.factors.orig_cols
    }

    pub fn stored_params(&self) -> usize {
        self.factors.stored_params()
    }

    /// Multiply-add FLOPs for `rows` input rows: `2 L r d_in + 2 L r (d_out - r)`.
    pub fn forward_flops(&self, rows: usize) -> u64 {
        let (l, r) = (rows as u64, self.factors.rank as u64);
        2 * l * r * self.d_in() as u64 + 2 * l * r * (self.d_out() as u64 - r)
    }
}

fn check_input(x: &Tensor2D, d_in: usize) -> Result<()> {
    if x.cols() != d_in {
        return Err(Error::dim(
            "linear forward",
            format!("input has {} features, layer expects {d_in}", x.cols()),
        ));
    }
    Ok(())
}

pub fn lowrank_forward(x: &Tensor2D, layer: &LowRankLayer) -> Result<Tensor2D> {
    check_input(x, layer.d_in())?;
    x.matmul(&layer.u)?.matmul(&layer.v.transpose())
}

/// Column-axis residual-min BD of `U Vᵀ`.
pub fn bd_linear_from_lowrank(layer: &LowRankLayer) -> Result<BdLinearLayer> {
    let w = layer.weight()?;
    BdLinearLayer::new(bd::decompose(&w, layer.rank(), Axis::Column)?)
}

pub fn bd_linear_forward(x: &Tensor2D, layer: &BdLinearLayer) -> Result<Tensor2D> {
    check_input(x, layer.d_in())?;
    let h = x.matmul(&layer.factors.basis)?;
    let hc = h.matmul(&layer.factors.coeff)?;
    match layer.tag() {
        BasisTag::First => Tensor2D::concat_cols(&[h, hc]),
        BasisTag::Last => Tensor2D::concat_cols(&[hc, h]),
    }
}
