use std::sync::Arc;

use super::params::{Binding, Init, Linear, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var, PAD_ROW};

/// Logit added for padded keys.
const MASKED: f64 = -1e9;

/// Partition of an `H x W` token grid into `window x window` windows whose
/// origin is offset by `shift`. Positions outside the grid are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    pub windows: usize,
    /// Token index (or [`PAD_ROW`]) for every window slot.
    pub gather: Arc<[u32]>,
    /// Window slot holding each grid token.
    pub scatter: Arc<[u32]>,
    /// Relative-offset table row for every (query, key) slot pair.
    pub rel_index: Arc<[u32]>,
    /// Per window, `true` for padded slots.
    pub padded: Vec<bool>,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || shift >= window || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "window {window} shift {shift} on {height}x{width}"
            )));
        }
        let rows = (height + shift).div_ceil(window);
        let cols = (width + shift).div_ceil(window);
        let n = window * window;
        let mut gather = Vec::with_capacity(rows * cols * n);
        let mut scatter = vec![0u32; height * width];
        for wy in 0..rows {
            for wx in 0..cols {
                for iy in 0..window {
                    for ix in 0..window {
                        let y = (wy * window + iy) as isize - shift as isize;
                        let x = (wx * window + ix) as isize - shift as isize;
                        if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                            let t = y as usize * width + x as usize;
                            scatter[t] = gather.len() as u32;
                            gather.push(t as u32);
                        } else {
                            gather.push(PAD_ROW);
                        }
                    }
                }
            }
        }
        let span = 2 * window - 1;
        let mut rel_index = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                let dy = (q / window) as isize - (k / window) as isize + window as isize - 1;
                let dx = (q % window) as isize - (k % window) as isize + window as isize - 1;
                rel_index.push((dy as usize * span + dx as usize) as u32);
            }
        }
        let padded = gather.iter().map(|&g| g == PAD_ROW).collect();
        Ok(Self {
            height,
            width,
            window,
            shift,
            windows: rows * cols,
            gather: gather.into(),
            scatter: scatter.into(),
            rel_index: rel_index.into(),
            padded,
        })
    }

    pub fn slots(&self) -> usize {
        self.window * self.window
    }

    pub fn bias_table_len(&self) -> usize {
        (2 * self.window - 1).pow(2)
    }

    /// Same partition with the slots of every window reordered: new slot
    /// `i` holds old slot `perm[i]`. Attention output is unchanged.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.slots();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Invalid("not a permutation of window slots".into()));
        }
        let mut gather = Vec::with_capacity(self.gather.len());
        let mut padded = Vec::with_capacity(self.gather.len());
        for w in 0..self.windows {
            for &p in perm {
                gather.push(self.gather[w * n + p]);
                padded.push(self.padded[w * n + p]);
            }
        }
        let mut scatter = vec![0u32; self.scatter.len()];
        for (slot, &t) in gather.iter().enumerate() {
            if t != PAD_ROW {
                scatter[t as usize] = slot as u32;
            }
        }
        let mut rel_index = Vec::with_capacity(n * n);
        for &q in perm {
            for &k in perm {
                rel_index.push(self.rel_index[q * n + k]);
            }
        }
        Ok(Self {
            gather: gather.into(),
            scatter: scatter.into(),
            rel_index: rel_index.into(),
            padded,
            ..self.clone()
        })
    }

    fn mask<T: Real>(&self, heads: usize) -> Tensor<T> {
        let n = self.slots();
        let mut data = Vec::with_capacity(self.windows * heads * n * n);
        for w in 0..self.windows {
            let keys = &self.padded[w * n..(w + 1) * n];
            for _ in 0..heads {
                for _ in 0..n {
                    data.extend(keys.iter().map(|&p| if p { T::from_f64(MASKED) } else { T::zero() }));
                }
            }
        }
        Tensor::new(&[self.windows * heads, n, n], data).expect("sized from layout")
    }
}

/// Multi-head self-attention within windows, with a learned bias per
/// relative offset shared by all heads.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub rel_bias: ParamId,
}

/// Attention result and its row-stochastic weights
/// `[windows * heads, slots, slots]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl WindowAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!("{heads} heads do not divide {dim} channels")));
        }
        Ok(Self {
            heads,
            dim,
            window,
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true)?,
            out: Linear::new(init, &format!("{name}.out"), dim, dim, true)?,
            rel_bias: init.zeros(&format!("{name}.rel_bias"), &[(2 * window - 1).pow(2), 1])?,
        })
    }

    fn split_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var, windows: usize, n: usize) -> Result<Var> {
        let hd = self.dim / self.heads;
        let x = tape.reshape(x, &[windows, n, self.heads, hd])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[windows * self.heads, n, hd])
    }

    /// `x` is `[H * W, dim]` in row-major grid order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var, layout: &WindowLayout) -> Result<AttentionOutput> {
        let shape = tape.shape(x).to_vec();
        if shape != [layout.height * layout.width, self.dim] || layout.window != self.window {
            return Err(Error::shape(
                "window_attention",
                format!("{shape:?} for a {}x{} grid of {} channels", layout.height, layout.width, self.dim),
            ));
        }
        let (nw, n) = (layout.windows, layout.slots());
        let hd = self.dim / self.heads;
        let xw = tape.gather_rows(x, layout.gather.clone())?;
        let q = self.q.forward(tape, bind, xw)?;
        let k = self.k.forward(tape, bind, xw)?;
        let v = self.v.forward(tape, bind, xw)?;
        let q = self.split_heads(tape, q, nw, n)?;
        let k = self.split_heads(tape, k, nw, n)?;
        let v = self.split_heads(tape, v, nw, n)?;
        let scores = tape.bmm(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let bias = tape.gather_rows(bind.var(self.rel_bias), layout.rel_index.clone())?;
        let bias = tape.reshape(bias, &[n, n])?;
        let scores = tape.add_bcast(scores, bias)?;
        let mask = tape.input(layout.mask(self.heads));
        let scores = tape.add(scores, mask)?;
        let weights = tape.softmax(scores)?;
        let mixed = tape.bmm(weights, v, false, false)?;
        let mixed = tape.reshape(mixed, &[nw, self.heads, n, hd])?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[nw * n, self.dim])?;
        let projected = self.out.forward(tape, bind, mixed)?;
        let out = tape.gather_rows(projected, layout.scatter.clone())?;
        Ok(AttentionOutput { out, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;

    #[test]
    fn layout_covers_every_token_once() {
        for shift in [0, 3] {
            let l = WindowLayout::new(16, 16, 7, shift).unwrap();
            assert_eq!(l.windows, 9);
            let mut seen = vec![0; 256];
            for &g in l.gather.iter().filter(|&&g| g != PAD_ROW) {
                seen[g as usize] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
            for (t, &s) in l.scatter.iter().enumerate() {
                assert_eq!(l.gather[s as usize] as usize, t);
            }
        }
    }

    #[test]
    fn relative_index_is_symmetric_about_centre() {
        let l = WindowLayout::new(7, 7, 7, 0).unwrap();
        let centre = (2 * 7 - 1) * 6 + 6;
        for q in 0..49 {
            assert_eq!(l.rel_index[q * 49 + q] as usize, centre);
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 4);
        let attn = WindowAttention::new(&mut init, "a", 8, 4, 7).unwrap();
        let layout = WindowLayout::new(1, 1, 7, 0).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, false);
        let x = tape.input(Tensor::from_f64(&[1, 8], &[0.3, -0.2, 0.1, 0.9, -1.0, 0.4, 0.0, 0.5]).unwrap());
        let out = attn.forward(&mut tape, &bind, x, &layout).unwrap();
        let v = attn.v.forward(&mut tape, &bind, x).unwrap();
        let want = attn.out.forward(&mut tape, &bind, v).unwrap();
        assert!(tape.value(out.out).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(&mut store, 0);
        assert!(WindowAttention::new(&mut init, "a", 10, 4, 7).is_err());
    }
}
