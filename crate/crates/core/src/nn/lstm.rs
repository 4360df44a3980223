use rand_chacha::ChaCha8Rng;

use crate::error::{MoleError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Unidirectional LSTM. Gate columns are laid out `[input, forget, cell, output]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = store.add(
            format!("{name}.w_x"),
            Tensor::uniform(vec![d_in, 4 * hidden], bound, rng),
        )?;
        let w_h = store.add(
            format!("{name}.w_h"),
            Tensor::uniform(vec![hidden, 4 * hidden], bound, rng),
        )?;
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        bias.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = 1.0);
        let b = store.add(format!("{name}.b"), bias)?;
        Ok(LstmCell {
            w_x,
            w_h,
            b,
            d_in,
            hidden,
        })
    }

    pub fn num_params(d_in: usize, hidden: usize) -> usize {
        d_in * 4 * hidden + hidden * 4 * hidden + 4 * hidden
    }

    /// Runs the recurrence over the first `length` rows of `x` and returns
    /// the hidden state after the last of them, as a vector of size `hidden`.
    pub fn last_state(&self, g: &mut Graph<'_>, x: Var, length: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(MoleError::dim("lstm", &shape, &[self.d_in]));
        }
        if length == 0 || length > shape[0] {
            return Err(MoleError::Contract(format!(
                "lstm length {length} outside 1..={}",
                shape[0]
            )));
        }
        let hdim = self.hidden;
        let w_x = g.param(self.w_x);
        let w_h = g.param(self.w_h);
        let b = g.param(self.b);
        let rows: Vec<usize> = (0..length).collect();
        let xs = g.gather_rows(x, &rows)?;
        let xw = g.matmul(xs, w_x)?;
        let xw = g.add_row(xw, b)?;

        let mut state: Option<(Var, Var)> = None;
        for t in 0..length {
            let mut z = g.gather_rows(xw, &[t])?;
            if let Some((h, _)) = state {
                let hw = g.matmul(h, w_h)?;
                z = g.add(z, hw)?;
            }
            let i = g.slice_cols(z, 0, hdim)?;
            let i = g.sigmoid(i)?;
            let f = g.slice_cols(z, hdim, 2 * hdim)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice_cols(z, 2 * hdim, 3 * hdim)?;
            let cand = g.tanh(cand)?;
            let o = g.slice_cols(z, 3 * hdim, 4 * hdim)?;
            let o = g.sigmoid(o)?;
            let ig = g.mul(i, cand)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let fc = g.mul(f, c_prev)?;
                    g.add(fc, ig)?
                }
                None => ig,
            };
            let tc = g.tanh(c)?;
            let h = g.mul(o, tc)?;
            state = Some((h, c));
        }
        let (h, _) = state.expect("length >= 1");
        g.row(h, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck_params, GradcheckOptions};
    use rand::SeedableRng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn cell(seed: u64, d_in: usize, h: usize) -> (ParamStore, LstmCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = LstmCell::new(&mut store, "gate", d_in, h, &mut rng).unwrap();
        let bias = Tensor::randn(vec![4 * h], 0.5, &mut rng);
        *store.get_mut(c.b) = bias;
        (store, c)
    }

    #[test]
    fn zero_weights_and_inputs_give_zero_state() {
        let (mut store, c) = cell(0, 3, 4);
        for id in store.ids().collect::<Vec<_>>() {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let mut g = Graph::with_params(&store);
        let x = g.constant(&Tensor::zeros(vec![5, 3]));
        let h = c.last_state(&mut g, x, 5).unwrap();
        assert_eq!(g.shape(h), &[4]);
        assert!(g.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_frames_are_ignored() {
        let (store, c) = cell(1, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| x.row(i).to_vec()).collect();
        rows.push(vec![100.0, -7.0, 3.0]);
        let padded = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.constant(&x);
        let b = g.constant(&padded);
        let ha = c.last_state(&mut g, a, 3).unwrap();
        let hb = c.last_state(&mut g, b, 3).unwrap();
        assert_eq!(g.value(ha), g.value(hb));
    }

    #[test]
    fn zero_length_is_contract_error() {
        let (store, c) = cell(1, 3, 4);
        let mut g = Graph::with_params(&store);
        let x = g.constant(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            c.last_state(&mut g, x, 0),
            Err(MoleError::Contract(_))
        ));
    }

    #[test]
    fn two_step_hand_unroll() {
        let (store, c) = cell(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![2, 2], 1.0, &mut rng);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(&x);
        let h = c.last_state(&mut g, xv, 2).unwrap();

        let wx = store.get(c.w_x);
        let wh = store.get(c.w_h);
        let b = store.get(c.b);
        let hd = 2;
        let mut hs = vec![0.0; hd];
        let mut cs = vec![0.0; hd];
        for t in 0..2 {
            let z: Vec<f64> = (0..4 * hd)
                .map(|j| {
                    (0..2).map(|i| x.at(t, i) * wx.at(i, j)).sum::<f64>()
                        + (0..hd).map(|i| hs[i] * wh.at(i, j)).sum::<f64>()
                        + b.data()[j]
                })
                .collect();
            for u in 0..hd {
                let ig = sig(z[u]);
                let fg = sig(z[hd + u]);
                let cg = z[2 * hd + u].tanh();
                let og = sig(z[3 * hd + u]);
                cs[u] = fg * cs[u] + ig * cg;
                hs[u] = og * cs[u].tanh();
            }
        }
        for u in 0..hd {
            assert!((g.value(h)[u] - hs[u]).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_gradcheck() {
        let (store, c) = cell(5, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let r = gradcheck_params(
            &store,
            |g| {
                let xv = g.constant(&x);
                let h = c.last_state(g, xv, 3)?;
                let w = g.constant(&Tensor::vector(vec![0.7, -1.3, 0.4]));
                let y = g.mul(h, w)?;
                g.sum(y)
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(store.num_scalars(), LstmCell::num_params(3, 3));
    }
}
