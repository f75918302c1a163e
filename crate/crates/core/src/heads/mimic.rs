use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::tensor::{Cell, Graph, Real, Tensor, Var};

use super::shead::SHeadLevel;

/// Norm floor of the cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

/// Student classification logits and regression features at the grid cells
/// the boxes were traced back to. `Cell::source` is the level index.
pub fn extract_student_features(ctx: &mut Ctx, levels: &[SHeadLevel], cells: &[Cell]) -> Result<(Var, Var)> {
    let logits: Vec<Var> = levels.iter().map(|l| l.logits).collect();
    let feats: Vec<Var> = levels.iter().map(|l| l.reg_feature).collect();
    Ok((ctx.g.gather_cells(&logits, cells)?, ctx.g.gather_cells(&feats, cells)?))
}

/// Mean over boxes of `(1 - cos(tr, sr)) + (1 - cos(tc, sc))`. All four are
/// `(boxes, d)` matrices; no boxes gives a constant 0.
pub fn mimic_loss(ctx: &mut Ctx, t_cls: Var, t_reg: Var, s_cls: Var, s_reg: Var) -> Result<Var> {
    mimic_loss_on(&mut ctx.g, t_cls, t_reg, s_cls, s_reg)
}

/// [`mimic_loss`] on a bare graph of either precision.
pub fn mimic_loss_on<T: Real>(g: &mut Graph<T>, t_cls: Var, t_reg: Var, s_cls: Var, s_reg: Var) -> Result<Var> {
    let rows = g.shape(t_cls)[0];
    if [t_reg, s_cls, s_reg].iter().any(|&v| g.shape(v)[0] != rows) {
        return Err(Error::shape("mimic_loss", "feature sets disagree on box count"));
    }
    if rows == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let cos_r = g.cosine_rows(t_reg, s_reg, COSINE_EPS)?;
    let cos_c = g.cosine_rows(t_cls, s_cls, COSINE_EPS)?;
    let w = vec![T::of(-1.0 / rows as f64); rows];
    let r = g.weighted_sum(cos_r, w.clone())?;
    let c = g.weighted_sum(cos_c, w)?;
    let s = g.add(r, c)?;
    Ok(g.affine(s, 1.0, 2.0))
}
