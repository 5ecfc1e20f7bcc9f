//! Multi-head attention on the tape: self-attention, text cross-attention and
//! the parallel visual extension.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Packed `D×D` projections of one attention unit plus its output projection.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// The parallel visual projections Q′, K′, V′.
#[derive(Clone, Copy, Debug)]
pub struct VisualVars {
    pub qp: Var,
    pub kp: Var,
    pub vp: Var,
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

/// Per-head `softmax(q·kᵀ/√d)·v`, heads concatenated. Inputs are already projected.
pub fn attend_heads(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = head_dim(d, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = tape.matmul_t(qh, kh)?;
        let s = tape.scale(s, scale)?;
        let m = tape.softmax(s)?;
        outs.push(tape.matmul(m, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Per head, one softmax over the concatenated text and visual scores, then
/// the matching mix of `[v ; vp]`.
#[allow(clippy::too_many_arguments)]
pub fn attend_heads_parallel(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    qp: Var,
    kp: Var,
    vp: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = head_dim(d, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = |tape: &mut Tape, x: Var| {
            if heads == 1 {
                Ok(x)
            } else {
                tape.slice_cols(x, h * dh, dh)
            }
        };
        let (qh, kh, vh) = (cols(tape, q)?, cols(tape, k)?, cols(tape, v)?);
        let (qph, kph, vph) = (cols(tape, qp)?, cols(tape, kp)?, cols(tape, vp)?);
        let st = tape.matmul_t(qh, kh)?;
        let st = tape.scale(st, scale)?;
        let sv = tape.matmul_t(qph, kph)?;
        let sv = tape.scale(sv, scale)?;
        let s = tape.concat_cols(&[st, sv])?;
        let m = tape.softmax(s)?;
        let values = tape.concat_rows(&[vh, vph])?;
        outs.push(tape.matmul(m, values)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
    }
    Ok(d / heads)
}

/// Attention of `x` over itself.
pub fn self_attention(tape: &mut Tape, x: Var, w: &AttnVars, heads: usize) -> Result<Var> {
    let q = tape.matmul(x, w.q)?;
    let k = tape.matmul(x, w.k)?;
    let v = tape.matmul(x, w.v)?;
    let o = attend_heads(tape, q, k, v, heads)?;
    linear(tape, o, w.out_w, w.out_b)
}

/// Text cross-attention of spatial features `f` over text tokens `g_t`.
pub fn cross_attention_vars(tape: &mut Tape, f: Var, g_t: Var, w: &AttnVars, heads: usize) -> Result<Var> {
    let q = tape.matmul(f, w.q)?;
    cross_attention_projected(tape, q, g_t, w, heads)
}

fn cross_attention_projected(tape: &mut Tape, q: Var, g_t: Var, w: &AttnVars, heads: usize) -> Result<Var> {
    let k = tape.matmul(g_t, w.k)?;
    let v = tape.matmul(g_t, w.v)?;
    let o = attend_heads(tape, q, k, v, heads)?;
    linear(tape, o, w.out_w, w.out_b)
}

/// Cross-attention extended with visual tokens `g_v`. With no visual tokens
/// this is exactly [`cross_attention_vars`]; the visual branch is not built.
pub fn pva_attention_vars(
    tape: &mut Tape,
    f: Var,
    g_t: Var,
    g_v: Option<Var>,
    w: &AttnVars,
    p: Option<&VisualVars>,
    heads: usize,
) -> Result<Var> {
    let Some(g_v) = g_v else {
        return cross_attention_vars(tape, f, g_t, w, heads);
    };
    let p = p.ok_or_else(|| Error::Invalid("visual features given to a block without PVA matrices".into()))?;
    let q = tape.matmul(f, w.q)?;
    let k = tape.matmul(g_t, w.k)?;
    let v = tape.matmul(g_t, w.v)?;
    let qp = tape.matmul(f, p.qp)?;
    let kp = tape.matmul(g_v, p.kp)?;
    let vp = tape.matmul(g_v, p.vp)?;
    let o = attend_heads_parallel(tape, q, k, v, qp, kp, vp, heads)?;
    linear(tape, o, w.out_w, w.out_b)
}

/// Plain-tensor form of one conditioning block: text matrices, their parallel
/// visual copies, and the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PvaBlock {
    pub heads: usize,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub qp: Tensor,
    pub kp: Tensor,
    pub vp: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl PvaBlock {
    /// Random text matrices; the visual matrices start as copies.
    pub fn random(width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        head_dim(width, heads)?;
        let s = 1.0 / (width as f64).sqrt();
        let q = Tensor::randn(&[width, width], s, rng);
        let k = Tensor::randn(&[width, width], s, rng);
        let v = Tensor::randn(&[width, width], s, rng);
        let out_w = Tensor::randn(&[width, width], s, rng);
        let out_b = Tensor::randn(&[width], 0.1, rng);
        let block = PvaBlock {
            heads,
            qp: Tensor::randn(&[width, width], s, rng),
            kp: Tensor::randn(&[width, width], s, rng),
            vp: Tensor::randn(&[width, width], s, rng),
            q,
            k,
            v,
            out_w,
            out_b,
        };
        Ok(block)
    }

    pub fn width(&self) -> usize {
        self.q.rows()
    }

    pub fn init_from_text(mut self) -> Self {
        self.qp = self.q.clone();
        self.kp = self.k.clone();
        self.vp = self.v.clone();
        self
    }

    pub fn bind(&self, tape: &mut Tape) -> (AttnVars, VisualVars) {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        let text = AttnVars {
            q: c(&self.q),
            k: c(&self.k),
            v: c(&self.v),
            out_w: c(&self.out_w),
            out_b: c(&self.out_b),
        };
        let vis = VisualVars { qp: c(&self.qp), kp: c(&self.kp), vp: c(&self.vp) };
        (text, vis)
    }

    fn check_width(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.rank() != 2 || t.cols() != self.width() {
            return Err(Error::shape(
                "attention",
                format!("{what} {:?} does not match block width {}", t.shape(), self.width()),
            ));
        }
        Ok(())
    }

    pub fn cross_attention(&self, f: &Tensor, g_t: &Tensor) -> Result<Tensor> {
        self.check_width(f, "F")?;
        self.check_width(g_t, "G_T")?;
        let mut tape = Tape::new();
        let (w, _) = self.bind(&mut tape);
        let fv = tape.constant(f.clone());
        let gv = tape.constant(g_t.clone());
        let out = cross_attention_vars(&mut tape, fv, gv, &w, self.heads)?;
        Ok(tape.value(out).clone())
    }

    /// `g_v = None` and a zero-row visual set are the same empty case.
    pub fn pva_attention(&self, f: &Tensor, g_t: &Tensor, g_v: Option<&Tensor>) -> Result<Tensor> {
        self.check_width(f, "F")?;
        self.check_width(g_t, "G_T")?;
        if let Some(g) = g_v {
            self.check_width(g, "G_V")?;
        }
        let mut tape = Tape::new();
        let (w, p) = self.bind(&mut tape);
        let fv = tape.constant(f.clone());
        let gt = tape.constant(g_t.clone());
        let gv = g_v.map(|g| tape.constant(g.clone()));
        let out = pva_attention_vars(&mut tape, fv, gt, gv, &w, Some(&p), self.heads)?;
        Ok(tape.value(out).clone())
    }

    /// Mixing weights of one head over the `L_T + L_V` keys, for inspection.
    pub fn mixing_weights(&self, f: &Tensor, g_t: &Tensor, g_v: &Tensor, head: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (w, p) = self.bind(&mut tape);
        let fv = tape.constant(f.clone());
        let gt = tape.constant(g_t.clone());
        let gv = tape.constant(g_v.clone());
        let dh = head_dim(self.width(), self.heads)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let proj = |tape: &mut Tape, x: Var, m: Var| -> Result<Var> {
            let y = tape.matmul(x, m)?;
            tape.slice_cols(y, head * dh, dh)
        };
        let q = proj(&mut tape, fv, w.q)?;
        let k = proj(&mut tape, gt, w.k)?;
        let qp = proj(&mut tape, fv, p.qp)?;
        let kp = proj(&mut tape, gv, p.kp)?;
        let st = tape.matmul_t(q, k)?;
        let sv = tape.matmul_t(qp, kp)?;
        let s = tape.concat_cols(&[st, sv])?;
        let s = tape.scale(s, scale)?;
        let m = tape.softmax(s)?;
        Ok(tape.value(m).clone())
    }
}
