//! Unidirectional LSTM layer over `[N, T, Din]` batches.
//!
//! Gate order in the stacked weights is input, forget, candidate, output.
//! Initial hidden and cell states are zero.

use super::{sigmoid, Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// The three tensors of one LSTM direction: `w_ih` `[4H, Din]`,
/// `w_hh` `[4H, H]`, `bias` `[4H]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmWeights<V> {
    pub w_ih: V,
    pub w_hh: V,
    pub bias: V,
}

pub(crate) struct LstmCache<T> {
    /// Activated gates per processing step, `[T][N][4H]`.
    gates: Vec<T>,
    /// Cell state after each processing step, `[T][N][H]`.
    cells: Vec<T>,
}

impl<T: Real> Graph<T> {
    /// Runs one LSTM direction; `reverse` processes time from last to first.
    /// Output `[N, T, H]` holds the hidden state at each time position.
    pub fn lstm(&mut self, x: Var, w: LstmWeights<Var>, reverse: bool) -> Result<Var> {
        let xv = self.value(x);
        let [n, t, din] = match *xv.shape() {
            [n, t, d] => [n, t, d],
            _ => return Err(shape_err!("lstm: expected [N, T, Din], got {:?}", xv.shape())),
        };
        if t == 0 {
            return Err(Error::InvalidArgument("lstm: empty sequence".into()));
        }
        let (wih, whh, bias) = (self.value(w.w_ih), self.value(w.w_hh), self.value(w.bias));
        let h4 = wih.shape()[0];
        let h = h4 / 4;
        if wih.shape() != [4 * h, din] || whh.shape() != [4 * h, h] || bias.shape() != [4 * h] || h == 0
        {
            return Err(shape_err!(
                "lstm: weights w_ih {:?}, w_hh {:?}, bias {:?} do not fit input width {din}",
                wih.shape(),
                whh.shape(),
                bias.shape()
            ));
        }
        let mut xproj = vec![T::zero(); n * t * h4];
        T::gemm(false, true, n * t, h4, din, xv.data(), wih.data(), &mut xproj, false);

        let mut out = vec![T::zero(); n * t * h];
        let mut gates = vec![T::zero(); t * n * h4];
        let mut cells = vec![T::zero(); t * n * h];
        let mut hprev = vec![T::zero(); n * h];
        let mut cprev = vec![T::zero(); n * h];
        let mut z = vec![T::zero(); n * h4];
        for step in 0..t {
            let ti = if reverse { t - 1 - step } else { step };
            T::gemm(false, true, n, h4, h, &hprev, whh.data(), &mut z, false);
            for ni in 0..n {
                let zr = &mut z[ni * h4..(ni + 1) * h4];
                let xr = &xproj[(ni * t + ti) * h4..(ni * t + ti + 1) * h4];
                for ((zv, &xv), &bv) in zr.iter_mut().zip(xr).zip(bias.data()) {
                    *zv = *zv + xv + bv;
                }
                let gr = &mut gates[(step * n + ni) * h4..(step * n + ni + 1) * h4];
                for k in 0..h {
                    gr[k] = sigmoid(zr[k]);
                    gr[h + k] = sigmoid(zr[h + k]);
                    gr[2 * h + k] = zr[2 * h + k].tanh();
                    gr[3 * h + k] = sigmoid(zr[3 * h + k]);
                }
                for k in 0..h {
                    let c = gr[h + k] * cprev[ni * h + k] + gr[k] * gr[2 * h + k];
                    let hv = gr[3 * h + k] * c.tanh();
                    cprev[ni * h + k] = c;
                    hprev[ni * h + k] = hv;
                    cells[(step * n + ni) * h + k] = c;
                    out[(ni * t + ti) * h + k] = hv;
                }
            }
        }
        let out = Tensor::new(&[n, t, h], out)?;
        Ok(self.push(
            out,
            Op::Lstm {
                x,
                w,
                reverse,
                cache: LstmCache { gates, cells },
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    w: &LstmWeights<Var>,
    reverse: bool,
    cache: &LstmCache<T>,
    out: &Tensor<T>,
    gout: &Tensor<T>,
    sink: &mut impl FnMut(Var, Tensor<T>),
) {
    let xv = g.value(x);
    let (n, t, din) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (wih, whh) = (g.value(w.w_ih), g.value(w.w_hh));
    let h4 = wih.shape()[0];
    let h = h4 / 4;
    let hs = out.data();
    let go = gout.data();

    let mut dz_all = vec![T::zero(); n * t * h4];
    let mut dh_next = vec![T::zero(); n * h];
    let mut dc_next = vec![T::zero(); n * h];
    let mut dz = vec![T::zero(); n * h4];
    let mut hprev = vec![T::zero(); n * h];
    let mut dwhh = Tensor::zeros(whh.shape());
    for step in (0..t).rev() {
        let ti = if reverse { t - 1 - step } else { step };
        for ni in 0..n {
            let gr = &cache.gates[(step * n + ni) * h4..(step * n + ni + 1) * h4];
            let cr = &cache.cells[(step * n + ni) * h..(step * n + ni + 1) * h];
            for k in 0..h {
                let (i, f, gg, o) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
                let c = cr[k];
                let c_prev = if step == 0 {
                    T::zero()
                } else {
                    cache.cells[((step - 1) * n + ni) * h + k]
                };
                let tc = c.tanh();
                let dh = go[(ni * t + ti) * h + k] + dh_next[ni * h + k];
                let d_o = dh * tc;
                let dc = dh * o * (T::one() - tc * tc) + dc_next[ni * h + k];
                let di = dc * gg;
                let dg = dc * i;
                let df = dc * c_prev;
                dc_next[ni * h + k] = dc * f;
                let dzr = &mut dz[ni * h4..(ni + 1) * h4];
                dzr[k] = di * i * (T::one() - i);
                dzr[h + k] = df * f * (T::one() - f);
                dzr[2 * h + k] = dg * (T::one() - gg * gg);
                dzr[3 * h + k] = d_o * o * (T::one() - o);
            }
            dz_all[(ni * t + ti) * h4..(ni * t + ti + 1) * h4]
                .copy_from_slice(&dz[ni * h4..(ni + 1) * h4]);
            // Hidden state fed into this step.
            let prev_t = if step == 0 {
                None
            } else if reverse {
                Some(ti + 1)
            } else {
                Some(ti - 1)
            };
            let dst = &mut hprev[ni * h..(ni + 1) * h];
            match prev_t {
                Some(pt) => dst.copy_from_slice(&hs[(ni * t + pt) * h..(ni * t + pt + 1) * h]),
                None => dst.iter_mut().for_each(|v| *v = T::zero()),
            }
        }
        T::gemm(false, false, n, h, h4, &dz, whh.data(), &mut dh_next, false);
        if g.needs(w.w_hh) {
            T::gemm(true, false, h4, h, n, &dz, &hprev, dwhh.data_mut(), true);
        }
    }
    if g.needs(x) {
        let mut dx = Tensor::zeros(xv.shape());
        T::gemm(false, false, n * t, din, h4, &dz_all, wih.data(), dx.data_mut(), false);
        sink(x, dx);
    }
    if g.needs(w.w_ih) {
        let mut dwih = Tensor::zeros(wih.shape());
        T::gemm(true, false, h4, din, n * t, &dz_all, xv.data(), dwih.data_mut(), false);
        sink(w.w_ih, dwih);
    }
    if g.needs(w.w_hh) {
        sink(w.w_hh, dwhh);
    }
    if g.needs(w.bias) {
        let mut db = vec![T::zero(); h4];
        for row in dz_all.chunks(h4) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        sink(w.bias, Tensor::new(&[h4], db).unwrap());
    }
}
