//! Stacked GRU / LSTM networks with a linear readout, trained by stateful
//! truncated backpropagation through time.
//!
//! All cell routines work on batches: every matrix argument holds one sample
//! per column, so a single-sample call is just a one-column batch.

mod adam;
mod bptt;
mod cell;
mod train;

pub use adam::{adam_update, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use bptt::{bptt_gradients, BpttOutput};
pub use cell::{gru_forward, lstm_forward, GruCache, LstmCache};
pub use train::{train_bptt, train_bptt_supervised, BpttConfig, EpochRecord, TrainingReport};



use nalgebra::DMatrix;

use crate::linalg::{rng, SeededRng};
use crate::{Error, Real, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::InvalidConfig(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Weights act on the stacked vector `[h_prev; x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayer<T> {
    pub w_z: DMatrix<T>,
    pub w_r: DMatrix<T>,
    pub w_h: DMatrix<T>,
    pub b_z: DMatrix<T>,
    pub b_r: DMatrix<T>,
    pub b_h: DMatrix<T>,
}

/// `w_h`/`b_h` parametrise the output gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T> {
    pub w_f: DMatrix<T>,
    pub w_i: DMatrix<T>,
    pub w_c: DMatrix<T>,
    pub w_h: DMatrix<T>,
    pub b_f: DMatrix<T>,
    pub b_i: DMatrix<T>,
    pub b_c: DMatrix<T>,
    pub b_h: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Gru(GruLayer<T>),
    Lstm(LstmLayer<T>),
}

/// Uniform on `±√(6 / (fan_in + fan_out))` with `fan_out = rows`, `fan_in = cols`.
pub fn xavier_init<T: Real>(rows: usize, cols: usize, rng: &mut SeededRng) -> DMatrix<T> {
    let bound = xavier_bound(rows, cols);
    DMatrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)))
}

pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

fn bias<T: Real>(n: usize, value: f64) -> DMatrix<T> {
    DMatrix::from_element(n, 1, T::lit(value))
}

impl<T: Real> GruLayer<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let cols = hidden + input;
        Self {
            w_z: xavier_init(hidden, cols, rng),
            w_r: xavier_init(hidden, cols, rng),
            w_h: xavier_init(hidden, cols, rng),
            b_z: bias(hidden, 0.0),
            b_r: bias(hidden, 0.0),
            b_h: bias(hidden, 0.0),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let cols = hidden + input;
        Self {
            w_z: DMatrix::zeros(hidden, cols),
            w_r: DMatrix::zeros(hidden, cols),
            w_h: DMatrix::zeros(hidden, cols),
            b_z: bias(hidden, 0.0),
            b_r: bias(hidden, 0.0),
            b_h: bias(hidden, 0.0),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.nrows()
    }

    pub fn input(&self) -> usize {
        self.w_z.ncols() - self.w_z.nrows()
    }
}

impl<T: Real> LstmLayer<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let cols = hidden + input;
        Self {
            w_f: xavier_init(hidden, cols, rng),
            w_i: xavier_init(hidden, cols, rng),
            w_c: xavier_init(hidden, cols, rng),
            w_h: xavier_init(hidden, cols, rng),
            b_f: bias(hidden, 1.0),
            b_i: bias(hidden, 0.0),
            b_c: bias(hidden, 0.0),
            b_h: bias(hidden, 0.0),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let cols = hidden + input;
        Self {
            w_f: DMatrix::zeros(hidden, cols),
            w_i: DMatrix::zeros(hidden, cols),
            w_c: DMatrix::zeros(hidden, cols),
            w_h: DMatrix::zeros(hidden, cols),
            b_f: bias(hidden, 0.0),
            b_i: bias(hidden, 0.0),
            b_c: bias(hidden, 0.0),
            b_h: bias(hidden, 0.0),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.nrows()
    }

    pub fn input(&self) -> usize {
        self.w_f.ncols() - self.w_f.nrows()
    }
}

impl<T: Real> Layer<T> {
    fn zeros_like(&self) -> Self {
        match self {
            Layer::Gru(l) => Layer::Gru(GruLayer::zeros(l.input(), l.hidden())),
            Layer::Lstm(l) => Layer::Lstm(LstmLayer::zeros(l.input(), l.hidden())),
        }
    }

    fn blocks(&self) -> Vec<&DMatrix<T>> {
        match self {
            Layer::Gru(l) => vec![&l.w_z, &l.w_r, &l.w_h, &l.b_z, &l.b_r, &l.b_h],
            Layer::Lstm(l) => vec![&l.w_f, &l.w_i, &l.w_c, &l.w_h, &l.b_f, &l.b_i, &l.b_c, &l.b_h],
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        match self {
            Layer::Gru(l) => vec![&mut l.w_z, &mut l.w_r, &mut l.w_h, &mut l.b_z, &mut l.b_r, &mut l.b_h],
            Layer::Lstm(l) => vec![
                &mut l.w_f, &mut l.w_i, &mut l.w_c, &mut l.w_h, &mut l.b_f, &mut l.b_i, &mut l.b_c,
                &mut l.b_h,
            ],
        }
    }
}

/// Per-layer recurrent state; `c` is empty for GRU stacks. Columns are batch members.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnState<T> {
    pub h: Vec<DMatrix<T>>,
    pub c: Vec<DMatrix<T>>,
}

impl<T: Real> RnnState<T> {
    pub fn batch(&self) -> usize {
        self.h.first().map_or(0, |m| m.ncols())
    }

    /// Column `b` of every layer as a single-member state.
    pub fn member(&self, b: usize) -> Self {
        let pick = |v: &Vec<DMatrix<T>>| v.iter().map(|m| m.columns(b, 1).into_owned()).collect();
        Self {
            h: pick(&self.h),
            c: pick(&self.c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedRnnModel<T> {
    pub kind: CellKind,
    pub layers: Vec<Layer<T>>,
    /// `d_out × d_h`
    pub w_o: DMatrix<T>,
}

impl<T: Real> GatedRnnModel<T> {
    /// Xavier-initialised stack; layer 0 reads `input_dim`, the readout writes `output_dim`.
    pub fn new(
        kind: CellKind,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        layer_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim == 0 || layer_count == 0 {
            return Err(Error::InvalidConfig(
                "rnn dimensions and layer count must be >= 1".into(),
            ));
        }
        let mut r = rng(seed);
        let layers = (0..layer_count)
            .map(|k| {
                let input = if k == 0 { input_dim } else { hidden };
                match kind {
                    CellKind::Gru => Layer::Gru(GruLayer::new(input, hidden, &mut r)),
                    CellKind::Lstm => Layer::Lstm(LstmLayer::new(input, hidden, &mut r)),
                }
            })
            .collect();
        let w_o = xavier_init(output_dim, hidden, &mut r);
        Ok(Self { kind, layers, w_o })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_o.ncols()
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Gru(l) => l.input(),
            Layer::Lstm(l) => l.input(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Same shapes, every entry zero; used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            w_o: DMatrix::zeros(self.w_o.nrows(), self.w_o.ncols()),
        }
    }

    /// Parameter blocks in a fixed order (layers bottom-up, readout last).
    pub fn blocks(&self) -> Vec<&DMatrix<T>> {
        let mut out: Vec<&DMatrix<T>> = self.layers.iter().flat_map(Layer::blocks).collect();
        out.push(&self.w_o);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut DMatrix<T>> {
        let mut out: Vec<&mut DMatrix<T>> =
            self.layers.iter_mut().flat_map(Layer::blocks_mut).collect();
        out.push(&mut self.w_o);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.blocks()
            .iter()
            .flat_map(|b| b.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::mismatch("flat parameters", self.parameter_count(), flat.len()));
        }
        let mut at = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| crate::linalg::all_finite(b.as_slice()))
    }

    pub fn zero_state(&self, batch: usize) -> RnnState<T> {
        let d_h = self.hidden_dim();
        let n = self.layers.len();
        RnnState {
            h: vec![DMatrix::zeros(d_h, batch); n],
            c: match self.kind {
                CellKind::Gru => Vec::new(),
                CellKind::Lstm => vec![DMatrix::zeros(d_h, batch); n],
            },
        }
    }

    pub fn check_state(&self, state: &RnnState<T>) -> Result<()> {
        let n = self.layers.len();
        let want_c = if self.kind == CellKind::Lstm { n } else { 0 };
        if state.h.len() != n || state.c.len() != want_c {
            return Err(Error::mismatch("rnn state layers", n, state.h.len()));
        }
        for m in state.h.iter().chain(&state.c) {
            if m.nrows() != self.hidden_dim() {
                return Err(Error::mismatch("rnn state width", self.hidden_dim(), m.nrows()));
            }
        }
        Ok(())
    }

    /// Advances the stack by one input column block; returns the top-layer
    /// output (cell state plus residual for layers above the first).
    pub fn step(&self, x: &DMatrix<T>, state: &mut RnnState<T>) -> DMatrix<T> {
        let mut input = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let out = match layer {
                Layer::Gru(l) => {
                    let (h, _) = gru_forward(l, &input, &state.h[k]);
                    state.h[k] = h;
                    state.h[k].clone()
                }
                Layer::Lstm(l) => {
                    let (h, c, _) = lstm_forward(l, &input, &state.h[k], &state.c[k]);
                    state.h[k] = h;
                    state.c[k] = c;
                    state.h[k].clone()
                }
            };
            input = if k == 0 { out } else { out + input };
        }
        input
    }

    pub fn readout(&self, top: &DMatrix<T>) -> DMatrix<T> {
        &self.w_o * top
    }

    /// One teacher-forced step: consume `o_t`, return `ô_{t+1}`.
    pub fn forward(&self, o: &DMatrix<T>, state: &mut RnnState<T>) -> Result<DMatrix<T>> {
        if o.nrows() != self.input_dim() {
            return Err(Error::mismatch("rnn input", self.input_dim(), o.nrows()));
        }
        self.check_state(state)?;
        if state.batch() != o.ncols() {
            return Err(Error::mismatch("rnn batch", state.batch(), o.ncols()));
        }
        let top = self.step(o, state);
        Ok(self.readout(&top))
    }

    pub fn memory_bytes(&self) -> usize {
        self.parameter_count() * std::mem::size_of::<T>()
    }

    pub fn cast<U: Real>(&self) -> GatedRnnModel<U> {
        let mut out = GatedRnnModel::<U> {
            kind: self.kind,
            layers: Vec::new(),
            w_o: DMatrix::zeros(0, 0),
        };
        let conv = |m: &DMatrix<T>| m.map(|v| U::lit(v.as_f64()));
        out.layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Gru(g) => Layer::Gru(GruLayer {
                    w_z: conv(&g.w_z),
                    w_r: conv(&g.w_r),
                    w_h: conv(&g.w_h),
                    b_z: conv(&g.b_z),
                    b_r: conv(&g.b_r),
                    b_h: conv(&g.b_h),
                }),
                Layer::Lstm(g) => Layer::Lstm(LstmLayer {
                    w_f: conv(&g.w_f),
                    w_i: conv(&g.w_i),
                    w_c: conv(&g.w_c),
                    w_h: conv(&g.w_h),
                    b_f: conv(&g.b_f),
                    b_i: conv(&g.b_i),
                    b_c: conv(&g.b_c),
                    b_h: conv(&g.b_h),
                }),
            })
            .collect();
        out.w_o = conv(&self.w_o);
        out
    }
}

/// Single-sample convenience over [`GatedRnnModel::forward`].
pub fn rnn_forward<T: Real>(
    model: &GatedRnnModel<T>,
    o: &[T],
    state: &RnnState<T>,
) -> Result<(Vec<T>, RnnState<T>)> {
    let mut next = state.clone();
    let out = model.forward(&DMatrix::from_column_slice(o.len(), 1, o), &mut next)?;
    Ok((out.as_slice().to_vec(), next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_gru(input: usize, hidden: usize, layers: usize, out: usize) -> GatedRnnModel<f64> {
        GatedRnnModel {
            kind: CellKind::Gru,
            layers: (0..layers)
                .map(|k| Layer::Gru(GruLayer::zeros(if k == 0 { input } else { hidden }, hidden)))
                .collect(),
            w_o: DMatrix::identity(out, hidden),
        }
    }

    #[test]
    fn xavier_bound_and_determinism() {
        assert!((xavier_bound(100, 100) - 0.173_205_080_756_887_7).abs() < 1e-12);
        let a: DMatrix<f64> = xavier_init(100, 100, &mut rng(3));
        let b: DMatrix<f64> = xavier_init(100, 100, &mut rng(3));
        assert_eq!(a, b);
        let bound = xavier_bound(100, 100);
        assert!(a.iter().all(|v| v.abs() <= bound));
        // Mean of 1e4 uniforms has std bound/√3/100.
        let sigma = bound / 3f64.sqrt() / 100.0;
        assert!(a.mean().abs() < 3.0 * sigma);
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let m: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Lstm, 3, 4, 3, 2, 1).unwrap();
        for l in &m.layers {
            let Layer::Lstm(l) = l else { unreachable!() };
            assert!(l.b_f.iter().all(|v| *v == 1.0));
            assert!(l.b_i.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_layer_is_cell_plus_readout() {
        let m: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 3, 5, 3, 1, 9).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[0.3, -0.2, 0.5]);
        let h0 = DMatrix::from_column_slice(5, 1, &[0.1, 0.0, -0.1, 0.2, 0.05]);
        let mut s = RnnState { h: vec![h0.clone()], c: vec![] };
        let out = m.forward(&x, &mut s).unwrap();
        let Layer::Gru(l) = &m.layers[0] else { unreachable!() };
        let (h, _) = gru_forward(l, &x, &h0);
        assert_eq!(out, &m.w_o * &h);
        assert_eq!(s.h[0], h);
    }

    #[test]
    fn zero_weight_second_layer_adds_residual() {
        let m = zero_gru(2, 2, 2, 2);
        let hin = DMatrix::from_column_slice(2, 1, &[0.4, -0.8]);
        // Layer 0 with zero weights and zero state outputs 0; feed the second layer directly.
        let Layer::Gru(l1) = &m.layers[1] else { unreachable!() };
        let (h1, _) = gru_forward(l1, &hin, &hin);
        let out = h1 + &hin;
        assert!((out - DMatrix::from_column_slice(2, 1, &[0.6, -1.2])).amax() < 1e-15);
    }

    #[test]
    fn zero_readout_predicts_zero() {
        let mut m: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Lstm, 2, 4, 2, 2, 5).unwrap();
        m.w_o.fill(0.0);
        let (y, _) = rnn_forward(&m, &[1.0, -1.0], &m.zero_state(1)).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn flat_parameter_round_trip() {
        let m: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Lstm, 3, 4, 2, 2, 5).unwrap();
        let flat = m.flat_params();
        assert_eq!(flat.len(), m.parameter_count());
        let mut z = m.zeros_like();
        z.set_flat_params(&flat).unwrap();
        assert_eq!(z, m);
    }

    #[test]
    fn state_shape_is_checked() {
        let m: GatedRnnModel<f64> = GatedRnnModel::new(CellKind::Gru, 2, 4, 2, 1, 5).unwrap();
        let bad = RnnState { h: vec![DMatrix::zeros(3, 1)], c: vec![] };
        assert!(rnn_forward(&m, &[0.0, 0.0], &bad).is_err());
        assert!(rnn_forward(&m, &[0.0], &m.zero_state(1)).is_err());
    }
}
