//! Reverse-mode gradients through the enhancement graph
//! mask parameters -> mask -> WPD statistics -> filter -> beamformed
//! spectrogram -> inverse STFT -> negative-SDR loss, plus the AdamW
//! optimizer driving it.
//!
//! The computation graph has a fixed shape, so the tape records coarse
//! tensor operations (matmul, Hermitian solve, trace, the inverse STFT as
//! one linear map) rather than scalars. Complex nodes carry conjugate
//! cotangents (Wirtinger convention): for a real loss L the stored adjoint
//! of a complex node z is dL/d(conj z), so the gradient of a real leaf x
//! is plain dL/dx and the directional derivative along a complex
//! perturbation d is `2 Re <adj, d>`.
//!
//! Everything runs in f64: the finite-difference gate is not reliable in
//! single precision.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, Ix3, IxDyn};
use num_complex::Complex64;

use crate::audio_io::TimeSignal;
use crate::beamform::{tap_lags, ArrayGeometry, WpdConfig};
use crate::error::{Error, Result};
use crate::linalg::{solve_hermitian, HermitianMatrix, DIAG_LOADING_EPS};
use crate::masknet::{context_input, extract_features, MaskNetParams};
use crate::stft::{istft_adjoint_single, istft_single, ComplexSpectrogram};

const SDR_EPS: f64 = 1e-8;
const PSD_FLOOR_REL: f64 = 1e-8;

/// Negative signal-to-distortion ratio between two single-channel signals:
/// `-10 log10((d.d + eps) / ((d-ref).(d-ref) + eps))`.
pub fn sdr_loss(est: &TimeSignal, reference: &TimeSignal) -> Result<f64> {
    if est.channels() != 1 || reference.channels() != 1 {
        return Err(Error::Shape("sdr_loss expects single-channel signals".into()));
    }
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "length mismatch: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    let num: f64 = est.samples.iter().map(|v| v * v).sum::<f64>() + SDR_EPS;
    let den: f64 = est
        .samples
        .iter()
        .zip(reference.samples.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        + SDR_EPS;
    Ok(-10.0 * (num / den).log10())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Value {
    Re(ArrayD<f64>),
    Cx(ArrayD<Complex64>),
}

impl Value {
    fn re(&self) -> &ArrayD<f64> {
        match self {
            Value::Re(a) => a,
            Value::Cx(_) => panic!("expected real node"),
        }
    }

    fn cx(&self) -> &ArrayD<Complex64> {
        match self {
            Value::Cx(a) => a,
            Value::Re(_) => panic!("expected complex node"),
        }
    }
}

/// Recorded operations. Constants captured by ops (the stacked
/// observations, feature matrices, reference signals) are not nodes and
/// receive no adjoint.
enum Op {
    Leaf,
    Const,
    /// 2D matrix product.
    MatMul(NodeId, NodeId),
    /// matrix + column vector broadcast over columns.
    AddColVec(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// `diag(scale) * mat + shift * ones^T` with (R,1) scale/shift.
    RowScaleAdd {
        mat: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    Reshape(NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Arc<ArrayD<f64>>),
    /// `max(a, floor)` where `floor = rel * mean(a)` is fixed at forward
    /// time (no gradient through the floor value).
    FloorRel { input: NodeId, pass: Vec<bool> },
    Recip(NodeId),
    Dot(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Sub(NodeId, NodeId),
    Div(NodeId, NodeId),
    Log10(NodeId),
    /// `S[f,t,d] = mask[f,t-lag_d] * xbar[f,t,d]` (zero history).
    MaskedLagStack {
        mask: NodeId,
        xbar: Arc<Array3<Complex64>>,
        lag_per_slot: Arc<Vec<usize>>,
    },
    /// `R[f] = (1/T) sum_t s_ft s_ft^H`.
    BatchOuter(NodeId),
    /// `K[f] = sum_t w[f,t] * xbar_ft xbar_ft^H` with real weights.
    WeightedOuterConst {
        weights: NodeId,
        xbar: Arc<Array3<Complex64>>,
    },
    /// Per-frequency diagonal loading by `eps*tr/D`, loading value frozen.
    AddDiagConst(NodeId),
    /// Per-frequency Hermitian solve `A_f X_f = B_f`.
    HermSolveBatch { a: NodeId, b: NodeId },
    TraceBatch(NodeId),
    RecipCx(NodeId),
    PickColumn { input: NodeId, col: usize },
    /// `out[f,d] = cols[f,d] * scale[f]`.
    ColScale { cols: NodeId, scale: NodeId },
    /// `out[f,t] = sum_d conj(w[f,d]) * xbar[f,t,d]`.
    ApplyStackedFilter {
        w: NodeId,
        xbar: Arc<Array3<Complex64>>,
    },
    /// Inverse STFT of a single-channel spectrogram as one linear map.
    Istft {
        spec: NodeId,
        n_fft: usize,
        hop: usize,
    },
}

struct Node {
    op: Op,
    value: Value,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Value) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn re(&self, id: NodeId) -> &ArrayD<f64> {
        self.nodes[id.0].value.re()
    }

    fn cx(&self, id: NodeId) -> &ArrayD<Complex64> {
        self.nodes[id.0].value.cx()
    }

    fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, Value::Re(value))
    }

    fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Const, Value::Re(value))
    }

    fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.re(a).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let bv = self.re(b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let out = av.dot(&bv).into_dyn();
        self.push(Op::MatMul(a, b), Value::Re(out))
    }

    fn add_col_vec(&mut self, mat: NodeId, col: NodeId) -> NodeId {
        let m = self.re(mat).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let c = self.re(col).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut out = m;
        for mut column in out.axis_iter_mut(ndarray::Axis(1)) {
            for (i, v) in column.iter_mut().enumerate() {
                *v += c[[i, 0]];
            }
        }
        self.push(Op::AddColVec(mat, col), Value::Re(out.into_dyn()))
    }

    fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.re(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), Value::Re(out))
    }

    fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.re(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(a), Value::Re(out))
    }

    fn row_scale_add(&mut self, mat: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let m = self.re(mat).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let s = self.re(scale).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let h = self.re(shift).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut out = m;
        for mut column in out.axis_iter_mut(ndarray::Axis(1)) {
            for (i, v) in column.iter_mut().enumerate() {
                *v = s[[i, 0]] * *v + h[[i, 0]];
            }
        }
        self.push(
            Op::RowScaleAdd { mat, scale, shift },
            Value::Re(out.into_dyn()),
        )
    }

    fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let out = self
            .re(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(Op::Reshape(a), Value::Re(out))
    }

    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.re(a) * self.re(b);
        self.push(Op::Mul(a, b), Value::Re(out))
    }

    fn mul_const(&mut self, a: NodeId, c: Arc<ArrayD<f64>>) -> NodeId {
        let out = self.re(a) * &*c;
        self.push(Op::MulConst(a, c), Value::Re(out))
    }

    fn floor_rel(&mut self, a: NodeId, rel: f64) -> NodeId {
        let v = self.re(a);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let floor = rel * mean;
        let pass: Vec<bool> = v.iter().map(|&x| x > floor).collect();
        let out = v.mapv(|x| x.max(floor));
        self.push(Op::FloorRel { input: a, pass }, Value::Re(out))
    }

    fn recip(&mut self, a: NodeId) -> NodeId {
        let out = self.re(a).mapv(|v| 1.0 / v);
        self.push(Op::Recip(a), Value::Re(out))
    }

    fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s: f64 = self
            .re(a)
            .iter()
            .zip(self.re(b).iter())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a, b), Value::Re(ArrayD::from_elem(IxDyn(&[1]), s)))
    }

    fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.re(a).mapv(|v| v + c);
        self.push(Op::AddScalar(a), Value::Re(out))
    }

    fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.re(a).mapv(|v| v * c);
        self.push(Op::Scale(a, c), Value::Re(out))
    }

    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.re(a) - self.re(b);
        self.push(Op::Sub(a, b), Value::Re(out))
    }

    fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.re(a) / self.re(b);
        self.push(Op::Div(a, b), Value::Re(out))
    }

    fn log10(&mut self, a: NodeId) -> NodeId {
        let out = self.re(a).mapv(f64::log10);
        self.push(Op::Log10(a), Value::Re(out))
    }

    fn masked_lag_stack(
        &mut self,
        mask: NodeId,
        xbar: Arc<Array3<Complex64>>,
        lag_per_slot: Arc<Vec<usize>>,
    ) -> NodeId {
        let m = self.re(mask).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (f_dim, t_dim, d_dim) = xbar.dim();
        let mut out = Array3::zeros((f_dim, t_dim, d_dim));
        for f in 0..f_dim {
            for t in 0..t_dim {
                for d in 0..d_dim {
                    let lag = lag_per_slot[d];
                    if t >= lag {
                        out[[f, t, d]] = xbar[[f, t, d]] * m[[f, t - lag]];
                    }
                }
            }
        }
        self.push(
            Op::MaskedLagStack {
                mask,
                xbar,
                lag_per_slot,
            },
            Value::Cx(out.into_dyn()),
        )
    }

    fn batch_outer(&mut self, s: NodeId) -> NodeId {
        let sv = self.cx(s).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (f_dim, t_dim, d_dim) = sv.dim();
        let mut out = Array3::zeros((f_dim, d_dim, d_dim));
        let t_norm = 1.0 / t_dim as f64;
        for f in 0..f_dim {
            for t in 0..t_dim {
                for i in 0..d_dim {
                    let si = sv[[f, t, i]] * t_norm;
                    for j in 0..d_dim {
                        let add = si * sv[[f, t, j]].conj();
                        out[[f, i, j]] += add;
                    }
                }
            }
        }
        self.push(Op::BatchOuter(s), Value::Cx(out.into_dyn()))
    }

    fn weighted_outer_const(&mut self, weights: NodeId, xbar: Arc<Array3<Complex64>>) -> NodeId {
        let w = self.re(weights).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (f_dim, t_dim, d_dim) = xbar.dim();
        let mut out: Array3<Complex64> = Array3::zeros((f_dim, d_dim, d_dim));
        for f in 0..f_dim {
            for t in 0..t_dim {
                let wt = w[[f, t]];
                for i in 0..d_dim {
                    let xi = xbar[[f, t, i]] * wt;
                    for j in 0..d_dim {
                        let add = xi * xbar[[f, t, j]].conj();
                        out[[f, i, j]] += add;
                    }
                }
            }
        }
        // enforce exact Hermitian symmetry
        for f in 0..f_dim {
            for i in 0..d_dim {
                out[[f, i, i]] = Complex64::new(out[[f, i, i]].re, 0.0);
                for j in 0..i {
                    let v = (out[[f, i, j]] + out[[f, j, i]].conj()) * 0.5;
                    out[[f, i, j]] = v;
                    out[[f, j, i]] = v.conj();
                }
            }
        }
        self.push(
            Op::WeightedOuterConst { weights, xbar },
            Value::Cx(out.into_dyn()),
        )
    }

    fn add_diag_const(&mut self, a: NodeId) -> NodeId {
        let av = self.cx(a).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (f_dim, d_dim, _) = av.dim();
        let mut out = av;
        for f in 0..f_dim {
            let mut tr = 0.0;
            for i in 0..d_dim {
                tr += out[[f, i, i]].re;
            }
            let load = DIAG_LOADING_EPS * tr / d_dim as f64;
            for i in 0..d_dim {
                out[[f, i, i]] += Complex64::new(load, 0.0);
            }
        }
        self.push(Op::AddDiagConst(a), Value::Cx(out.into_dyn()))
    }

    fn herm_solve_batch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.cx(a).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let bv = self.cx(b).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (f_dim, d_dim, _) = av.dim();
        let mut out = Array3::zeros((f_dim, d_dim, d_dim));
        for f in 0..f_dim {
            let af = HermitianMatrix::new(av.index_axis(ndarray::Axis(0), f).to_owned())?;
            let x = solve_hermitian(&af, &bv.index_axis(ndarray::Axis(0), f).to_owned())?;
            out.index_axis_mut(ndarray::Axis(0), f).assign(&x);
        }
        Ok(self.push(Op::HermSolveBatch { a, b }, Value::Cx(out.into_dyn())))
    }

    fn trace_batch(&mut self, a: NodeId) -> NodeId {
        let av = self.cx(a).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (f_dim, d_dim, _) = av.dim();
        let mut out = Array1::zeros(f_dim);
        for f in 0..f_dim {
            for i in 0..d_dim {
                out[f] += av[[f, i, i]];
            }
        }
        self.push(Op::TraceBatch(a), Value::Cx(out.into_dyn()))
    }

    fn recip_cx(&mut self, a: NodeId) -> NodeId {
        let out = self.cx(a).mapv(|v| Complex64::new(1.0, 0.0) / v);
        self.push(Op::RecipCx(a), Value::Cx(out))
    }

    fn pick_column(&mut self, a: NodeId, col: usize) -> NodeId {
        let av = self.cx(a).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let (f_dim, d_dim, _) = av.dim();
        let mut out = Array2::zeros((f_dim, d_dim));
        for f in 0..f_dim {
            for i in 0..d_dim {
                out[[f, i]] = av[[f, i, col]];
            }
        }
        self.push(Op::PickColumn { input: a, col }, Value::Cx(out.into_dyn()))
    }

    fn col_scale(&mut self, cols: NodeId, scale: NodeId) -> NodeId {
        let cv = self.cx(cols).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let sv = self.cx(scale).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let (f_dim, d_dim) = cv.dim();
        let mut out = cv;
        for f in 0..f_dim {
            for d in 0..d_dim {
                out[[f, d]] *= sv[f];
            }
        }
        self.push(Op::ColScale { cols, scale }, Value::Cx(out.into_dyn()))
    }

    fn apply_stacked_filter(&mut self, w: NodeId, xbar: Arc<Array3<Complex64>>) -> NodeId {
        let wv = self.cx(w).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (f_dim, t_dim, d_dim) = xbar.dim();
        let mut out = Array2::zeros((f_dim, t_dim));
        for f in 0..f_dim {
            for t in 0..t_dim {
                let mut acc = Complex64::new(0.0, 0.0);
                for d in 0..d_dim {
                    acc += wv[[f, d]].conj() * xbar[[f, t, d]];
                }
                out[[f, t]] = acc;
            }
        }
        self.push(Op::ApplyStackedFilter { w, xbar }, Value::Cx(out.into_dyn()))
    }

    fn istft(&mut self, spec: NodeId, n_fft: usize, hop: usize, out_len: usize) -> NodeId {
        let sv = self.cx(spec).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let out = istft_single(&sv, n_fft, hop, out_len);
        self.push(
            Op::Istft { spec, n_fft, hop },
            Value::Re(ArrayD::from_shape_vec(IxDyn(&[out_len]), out).unwrap()),
        )
    }

    fn scalar(&self, id: NodeId) -> f64 {
        self.re(id)[[0]]
    }

    /// Reverse pass seeded at the scalar `loss`; returns per-node adjoints.
    /// Each node is visited exactly once, in reverse creation order.
    fn backward(&self, loss: NodeId) -> Vec<Option<Value>> {
        let mut adj: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Value::Re(ArrayD::from_elem(IxDyn(&[1]), 1.0)));

        for id in (0..self.nodes.len()).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            // put it back for callers that want intermediate adjoints
            adj[id] = Some(g.clone());
            match &self.nodes[id].op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    let gv = g.re().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let av = self.re(*a).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let bv = self.re(*b).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    add_re(&mut adj, *a, gv.dot(&bv.t()).into_dyn());
                    add_re(&mut adj, *b, av.t().dot(&gv).into_dyn());
                }
                Op::AddColVec(mat, col) => {
                    let gv = g.re().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    add_re(&mut adj, *mat, gv.clone().into_dyn());
                    let col_sum = gv.sum_axis(ndarray::Axis(1));
                    let rows = col_sum.len();
                    add_re(
                        &mut adj,
                        *col,
                        col_sum.into_shape_with_order(IxDyn(&[rows, 1])).unwrap(),
                    );
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let gin = g.re() * &y.re().mapv(|v| 1.0 - v * v);
                    add_re(&mut adj, *a, gin);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let gin = g.re() * &y.re().mapv(|v| v * (1.0 - v));
                    add_re(&mut adj, *a, gin);
                }
                Op::RowScaleAdd { mat, scale, shift } => {
                    let gv = g.re().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let mv = self.re(*mat).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let sv = self.re(*scale).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let (rows, _) = gv.dim();
                    let mut gmat = gv.clone();
                    for mut column in gmat.axis_iter_mut(ndarray::Axis(1)) {
                        for (i, v) in column.iter_mut().enumerate() {
                            *v *= sv[[i, 0]];
                        }
                    }
                    add_re(&mut adj, *mat, gmat.into_dyn());
                    let mut gscale = Array2::zeros((rows, 1));
                    let mut gshift = Array2::zeros((rows, 1));
                    for i in 0..rows {
                        let mut gs = 0.0;
                        let mut gh = 0.0;
                        for c in 0..gv.dim().1 {
                            gs += gv[[i, c]] * mv[[i, c]];
                            gh += gv[[i, c]];
                        }
                        gscale[[i, 0]] = gs;
                        gshift[[i, 0]] = gh;
                    }
                    add_re(&mut adj, *scale, gscale.into_dyn());
                    add_re(&mut adj, *shift, gshift.into_dyn());
                }
                Op::Reshape(a) => {
                    let shape = self.re(*a).raw_dim();
                    add_re(&mut adj, *a, g.re().clone().into_shape_with_order(shape).unwrap());
                }
                Op::Mul(a, b) => {
                    add_re(&mut adj, *a, g.re() * self.re(*b));
                    add_re(&mut adj, *b, g.re() * self.re(*a));
                }
                Op::MulConst(a, c) => {
                    add_re(&mut adj, *a, g.re() * &**c);
                }
                Op::FloorRel { input, pass } => {
                    let mut gin = g.re().clone();
                    for (v, &p) in gin.iter_mut().zip(pass.iter()) {
                        if !p {
                            *v = 0.0;
                        }
                    }
                    add_re(&mut adj, *input, gin);
                }
                Op::Recip(a) => {
                    let y = self.nodes[id].value.re();
                    add_re(&mut adj, *a, -(g.re() * y * y));
                }
                Op::Dot(a, b) => {
                    let gs = g.re()[[0]];
                    add_re(&mut adj, *a, self.re(*b).mapv(|v| v * gs));
                    add_re(&mut adj, *b, self.re(*a).mapv(|v| v * gs));
                }
                Op::AddScalar(a) => add_re(&mut adj, *a, g.re().clone()),
                Op::Scale(a, c) => add_re(&mut adj, *a, g.re().mapv(|v| v * c)),
                Op::Sub(a, b) => {
                    add_re(&mut adj, *a, g.re().clone());
                    add_re(&mut adj, *b, -g.re().clone());
                }
                Op::Div(a, b) => {
                    let av = self.re(*a);
                    let bv = self.re(*b);
                    add_re(&mut adj, *a, g.re() / bv);
                    add_re(&mut adj, *b, -(g.re() * av) / (bv * bv));
                }
                Op::Log10(a) => {
                    let ln10 = std::f64::consts::LN_10;
                    add_re(&mut adj, *a, g.re() / &self.re(*a).mapv(|v| v * ln10));
                }
                Op::MaskedLagStack {
                    mask,
                    xbar,
                    lag_per_slot,
                } => {
                    let gv = g.cx().view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let (f_dim, t_dim, d_dim) = xbar.dim();
                    let mask_dim = self.re(*mask).raw_dim();
                    let mut gm = ArrayD::<f64>::zeros(mask_dim);
                    for f in 0..f_dim {
                        for t in 0..t_dim {
                            for d in 0..d_dim {
                                let lag = lag_per_slot[d];
                                if t >= lag {
                                    let contrib =
                                        2.0 * (gv[[f, t, d]] * xbar[[f, t, d]].conj()).re;
                                    gm[[f, t - lag]] += contrib;
                                }
                            }
                        }
                    }
                    add_re(&mut adj, *mask, gm);
                }
                Op::BatchOuter(s) => {
                    let gv = g.cx().view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let sv = self.cx(*s).view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let (f_dim, t_dim, d_dim) = sv.dim();
                    let t_norm = 1.0 / t_dim as f64;
                    let mut gs = Array3::zeros((f_dim, t_dim, d_dim));
                    for f in 0..f_dim {
                        // M2 = g^T + conj(g); g_S = (1/T) S M2
                        let mut m2 = Array2::zeros((d_dim, d_dim));
                        for i in 0..d_dim {
                            for j in 0..d_dim {
                                m2[[i, j]] = gv[[f, j, i]] + gv[[f, i, j]].conj();
                            }
                        }
                        for t in 0..t_dim {
                            for j in 0..d_dim {
                                let mut acc = Complex64::new(0.0, 0.0);
                                for i in 0..d_dim {
                                    acc += sv[[f, t, i]] * m2[[i, j]];
                                }
                                gs[[f, t, j]] = acc * t_norm;
                            }
                        }
                    }
                    add_cx(&mut adj, *s, gs.into_dyn());
                }
                Op::WeightedOuterConst { weights, xbar } => {
                    let gv = g.cx().view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let (f_dim, t_dim, d_dim) = xbar.dim();
                    let mut gw = Array2::zeros((f_dim, t_dim));
                    for f in 0..f_dim {
                        for t in 0..t_dim {
                            // 2 Re(x^H G x)
                            let mut acc = Complex64::new(0.0, 0.0);
                            for i in 0..d_dim {
                                let mut row = Complex64::new(0.0, 0.0);
                                for j in 0..d_dim {
                                    row += gv[[f, i, j]] * xbar[[f, t, j]];
                                }
                                acc += xbar[[f, t, i]].conj() * row;
                            }
                            gw[[f, t]] = 2.0 * acc.re;
                        }
                    }
                    add_re(&mut adj, *weights, gw.into_dyn());
                }
                Op::AddDiagConst(a) => {
                    add_cx(&mut adj, *a, g.cx().clone());
                }
                Op::HermSolveBatch { a, b } => {
                    let gv = g.cx().view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let av = self.cx(*a).view().into_dimensionality::<Ix3>().unwrap().to_owned();
                    let xv = self.nodes[id]
                        .value
                        .cx()
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .to_owned();
                    let (f_dim, d_dim, _) = av.dim();
                    let mut ga = Array3::zeros((f_dim, d_dim, d_dim));
                    let mut gb = Array3::zeros((f_dim, d_dim, d_dim));
                    for f in 0..f_dim {
                        let af =
                            HermitianMatrix::new(av.index_axis(ndarray::Axis(0), f).to_owned())
                                .expect("solve input stays finite");
                        let gb_f = solve_hermitian(
                            &af,
                            &gv.index_axis(ndarray::Axis(0), f).to_owned(),
                        )
                        .expect("adjoint solve");
                        // gA = - gB X^H
                        let xf = xv.index_axis(ndarray::Axis(0), f);
                        for i in 0..d_dim {
                            for j in 0..d_dim {
                                let mut acc = Complex64::new(0.0, 0.0);
                                for k in 0..d_dim {
                                    acc += gb_f[[i, k]] * xf[[j, k]].conj();
                                }
                                ga[[f, i, j]] = -acc;
                            }
                        }
                        gb.index_axis_mut(ndarray::Axis(0), f).assign(&gb_f);
                    }
                    add_cx(&mut adj, *a, ga.into_dyn());
                    add_cx(&mut adj, *b, gb.into_dyn());
                }
                Op::TraceBatch(a) => {
                    let gv = g.cx().view().into_dimensionality::<Ix1>().unwrap().to_owned();
                    let dims = self.cx(*a).raw_dim();
                    let d_dim = dims[1];
                    let mut ga = ArrayD::<Complex64>::zeros(dims);
                    for f in 0..gv.len() {
                        for i in 0..d_dim {
                            ga[[f, i, i]] = gv[f];
                        }
                    }
                    add_cx(&mut adj, *a, ga);
                }
                Op::RecipCx(a) => {
                    let y = self.nodes[id].value.cx();
                    let gin = g
                        .cx()
                        .iter()
                        .zip(y.iter())
                        .map(|(gi, yi)| -gi * (yi * yi).conj())
                        .collect::<Vec<_>>();
                    add_cx(
                        &mut adj,
                        *a,
                        ArrayD::from_shape_vec(y.raw_dim(), gin).unwrap(),
                    );
                }
                Op::PickColumn { input, col } => {
                    let gv = g.cx().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let dims = self.cx(*input).raw_dim();
                    let mut ga = ArrayD::<Complex64>::zeros(dims);
                    for f in 0..gv.dim().0 {
                        for i in 0..gv.dim().1 {
                            ga[[f, i, *col]] = gv[[f, i]];
                        }
                    }
                    add_cx(&mut adj, *input, ga);
                }
                Op::ColScale { cols, scale } => {
                    let gv = g.cx().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let cv = self.cx(*cols).view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let sv = self.cx(*scale).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                    let (f_dim, d_dim) = cv.dim();
                    let mut gc = Array2::zeros((f_dim, d_dim));
                    let mut gsv = Array1::zeros(f_dim);
                    for f in 0..f_dim {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for d in 0..d_dim {
                            gc[[f, d]] = gv[[f, d]] * sv[f].conj();
                            acc += gv[[f, d]] * cv[[f, d]].conj();
                        }
                        gsv[f] = acc;
                    }
                    add_cx(&mut adj, *cols, gc.into_dyn());
                    add_cx(&mut adj, *scale, gsv.into_dyn());
                }
                Op::ApplyStackedFilter { w, xbar } => {
                    let gv = g.cx().view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let (f_dim, t_dim, d_dim) = xbar.dim();
                    let mut gw = Array2::zeros((f_dim, d_dim));
                    for f in 0..f_dim {
                        for d in 0..d_dim {
                            let mut acc = Complex64::new(0.0, 0.0);
                            for t in 0..t_dim {
                                acc += gv[[f, t]].conj() * xbar[[f, t, d]];
                            }
                            gw[[f, d]] = acc;
                        }
                    }
                    add_cx(&mut adj, *w, gw.into_dyn());
                }
                Op::Istft { spec, n_fft, hop } => {
                    let gv = g.re().view().into_dimensionality::<Ix1>().unwrap().to_owned();
                    let dims = self.cx(*spec).raw_dim();
                    let (n_bins, t_frames) = (dims[0], dims[1]);
                    let gspec = istft_adjoint_single(
                        gv.as_slice().unwrap(),
                        *n_fft,
                        *hop,
                        n_bins,
                        t_frames,
                    );
                    add_cx(&mut adj, *spec, gspec.into_dyn());
                }
            }
        }
        adj
    }
}

fn add_re(adj: &mut [Option<Value>], id: NodeId, g: ArrayD<f64>) {
    match &mut adj[id.0] {
        Some(Value::Re(acc)) => *acc += &g,
        slot @ None => *slot = Some(Value::Re(g)),
        _ => panic!("adjoint type mismatch"),
    }
}

fn add_cx(adj: &mut [Option<Value>], id: NodeId, g: ArrayD<Complex64>) {
    match &mut adj[id.0] {
        Some(Value::Cx(acc)) => *acc += &g,
        slot @ None => *slot = Some(Value::Cx(g)),
        _ => panic!("adjoint type mismatch"),
    }
}

/// One training example: mixture, target direction, time-domain reference.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub x: ComplexSpectrogram,
    pub doa: f64,
    pub d_ref: TimeSignal,
}

/// Configuration of the differentiable enhancement graph.
#[derive(Debug, Clone)]
pub struct DiffConfig {
    pub wpd: WpdConfig,
    pub geometry: ArrayGeometry,
}

struct ParamLeaves {
    ids: Vec<NodeId>,
}

fn push_param_leaves(tape: &mut Tape, params: &MaskNetParams) -> ParamLeaves {
    let h = params.config.hidden;
    let to2 = |a: &Array2<f64>| a.clone().into_dyn();
    let col = |a: &Array1<f64>| {
        Array2::from_shape_fn((a.len(), 1), |(i, _)| a[i]).into_dyn()
    };
    let ids = vec![
        tape.leaf(to2(&params.w1)),
        tape.leaf(col(&params.b1)),
        tape.leaf(to2(&params.w2)),
        tape.leaf(col(&params.b2)),
        tape.leaf(Array2::from_shape_fn((1, h), |(_, j)| params.w3[j]).into_dyn()),
        tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1]), params.b3)),
        tape.leaf(to2(&params.wa)),
        tape.leaf(col(&params.ba)),
        tape.leaf(to2(&params.wg)),
        tape.leaf(col(&params.bg)),
        tape.leaf(to2(&params.wb)),
        tape.leaf(col(&params.bb)),
    ];
    ParamLeaves { ids }
}

/// Stacked observation constant: `xbar[f,t,d] = x[f, t-lag_d, m_d]`.
fn stacked_constant(
    x: &ComplexSpectrogram,
    lags: &[usize],
) -> (Arc<Array3<Complex64>>, Arc<Vec<usize>>) {
    let (n_bins, n_frames, m) = x.data.dim();
    let d_dim = lags.len() * m;
    let mut xbar = Array3::zeros((n_bins, n_frames, d_dim));
    let mut lag_per_slot = vec![0usize; d_dim];
    for (li, &lag) in lags.iter().enumerate() {
        for ch in 0..m {
            lag_per_slot[li * m + ch] = lag;
        }
    }
    for f in 0..n_bins {
        for t in 0..n_frames {
            for (li, &lag) in lags.iter().enumerate() {
                if t >= lag {
                    for ch in 0..m {
                        xbar[[f, t, li * m + ch]] = x.data[[f, t - lag, ch]];
                    }
                }
            }
        }
    }
    (Arc::new(xbar), Arc::new(lag_per_slot))
}

/// Build the loss graph for one batch item. Returns the scalar loss node.
fn build_item_loss(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    params: &MaskNetParams,
    item: &BatchItem,
    config: &DiffConfig,
) -> Result<NodeId> {
    let (n_bins, n_frames, m) = item.x.data.dim();
    if item.d_ref.channels() != 1 {
        return Err(Error::Shape("reference must be single-channel".into()));
    }
    let feats = extract_features(&item.x, item.doa, &config.geometry)?;
    let z = context_input(&feats, params.config.context);
    let z_id = tape.constant(z.into_dyn());

    let [w1, b1, w2, b2, w3, b3, wa, ba, wg, bg, wb, bb] =
        <[NodeId; 12]>::try_from(leaves.ids.as_slice()).unwrap();

    // feature MLP with attractor FiLM after layer 1
    let h1_pre = tape.matmul(w1, z_id);
    let h1_b = tape.add_col_vec(h1_pre, b1);
    let h1 = tape.tanh(h1_b);

    let att_in = tape.constant(
        Array2::from_shape_vec((2, 1), vec![item.doa.cos(), item.doa.sin()])
            .unwrap()
            .into_dyn(),
    );
    let ah_pre = tape.matmul(wa, att_in);
    let ah_b = tape.add_col_vec(ah_pre, ba);
    let ah = tape.tanh(ah_b);
    let gamma_pre = tape.matmul(wg, ah);
    let gamma = tape.add_col_vec(gamma_pre, bg);
    let beta_pre = tape.matmul(wb, ah);
    let beta = tape.add_col_vec(beta_pre, bb);

    let h1c = tape.row_scale_add(h1, gamma, beta);
    let h2_pre = tape.matmul(w2, h1c);
    let h2_b = tape.add_col_vec(h2_pre, b2);
    let h2 = tape.tanh(h2_b);
    let logits_pre = tape.matmul(w3, h2);
    let logits = tape.add_col_vec(logits_pre, b3);
    let probs = tape.sigmoid(logits);
    let omega = tape.reshape(probs, &[n_bins, n_frames]);

    // sigma^2 = omega^2 * mean-channel power, floored
    let mut p = Array2::zeros((n_bins, n_frames));
    for f in 0..n_bins {
        for t in 0..n_frames {
            let mut acc = 0.0;
            for ch in 0..m {
                acc += item.x.data[[f, t, ch]].norm_sqr();
            }
            p[[f, t]] = acc / m as f64;
        }
    }
    let omega_sq = tape.mul(omega, omega);
    let sigma_hat = tape.mul_const(omega_sq, Arc::new(p.into_dyn()));
    let sigma = tape.floor_rel(sigma_hat, PSD_FLOOR_REL);
    let inv_sigma = tape.recip(sigma);

    let lags = tap_lags(config.wpd.delay_b, config.wpd.taps_l);
    let (xbar, lag_per_slot) = stacked_constant(&item.x, &lags);

    let k_bar = tape.weighted_outer_const(inv_sigma, xbar.clone());
    let k_loaded = tape.add_diag_const(k_bar);
    let s = tape.masked_lag_stack(omega, xbar.clone(), lag_per_slot);
    let r_bar = tape.batch_outer(s);

    let x_sol = tape.herm_solve_batch(k_loaded, r_bar)?;
    let tr = tape.trace_batch(x_sol);
    let inv_tr = tape.recip_cx(tr);
    let col = tape.pick_column(x_sol, config.wpd.ref_channel);
    let w_vec = tape.col_scale(col, inv_tr);

    let d_spec = tape.apply_stacked_filter(w_vec, xbar);
    let d_hat = tape.istft(d_spec, item.x.n_fft, item.x.hop, item.d_ref.len());

    let d_ref = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[item.d_ref.len()]), item.d_ref.channel(0)).unwrap(),
    );
    let num_dot = tape.dot(d_hat, d_hat);
    let num = tape.add_scalar(num_dot, SDR_EPS);
    let diff = tape.sub(d_hat, d_ref);
    let den_dot = tape.dot(diff, diff);
    let den = tape.add_scalar(den_dot, SDR_EPS);
    let ratio = tape.div(num, den);
    let log_ratio = tape.log10(ratio);
    Ok(tape.scale(log_ratio, -10.0))
}

/// Forward-only batch loss (mean of per-item negative SDR).
pub fn loss_forward(
    params: &MaskNetParams,
    batch: &[BatchItem],
    config: &DiffConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Size("batch must be nonempty".into()));
    }
    let mut acc = 0.0;
    for item in batch {
        let mut tape = Tape::new();
        let leaves = push_param_leaves(&mut tape, params);
        let loss = build_item_loss(&mut tape, &leaves, params, item, config)?;
        acc += tape.scalar(loss);
    }
    Ok(acc / batch.len() as f64)
}

/// Batch loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &MaskNetParams,
    batch: &[BatchItem],
    config: &DiffConfig,
) -> Result<(f64, MaskNetParams)> {
    if batch.is_empty() {
        return Err(Error::Size("batch must be nonempty".into()));
    }
    let mut acc = 0.0;
    let mut grad_flat = vec![0.0; params.flat_len()];
    let weight = 1.0 / batch.len() as f64;
    for item in batch {
        let mut tape = Tape::new();
        let leaves = push_param_leaves(&mut tape, params);
        let loss = build_item_loss(&mut tape, &leaves, params, item, config)?;
        acc += tape.scalar(loss);
        let adj = tape.backward(loss);
        let mut offset = 0;
        for &leaf in &leaves.ids {
            let len = tape.nodes[leaf.0].value.re().len();
            if let Some(Value::Re(g)) = &adj[leaf.0] {
                for (i, v) in g.iter().enumerate() {
                    grad_flat[offset + i] += v * weight;
                }
            }
            offset += len;
        }
    }
    let grad = MaskNetParams::from_flat(params.config, &grad_flat)?;
    Ok((acc * weight, grad))
}

/// Central finite-difference report for randomly sampled parameters.
pub struct FdReport {
    /// (flat index, analytic, numeric, relative error)
    pub entries: Vec<(usize, f64, f64, f64)>,
}

impl FdReport {
    pub fn median_rel(&self) -> f64 {
        let mut errs: Vec<f64> = self.entries.iter().map(|e| e.3).collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        errs[errs.len() / 2]
    }

    pub fn max_rel(&self) -> f64 {
        self.entries.iter().map(|e| e.3).fold(0.0, f64::max)
    }
}

/// Validate the reverse-mode gradient against central finite differences
/// on `n_samples` randomly chosen parameters.
pub fn finite_diff_check(
    params: &MaskNetParams,
    batch: &[BatchItem],
    config: &DiffConfig,
    n_samples: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport> {
    use rand::{Rng, SeedableRng};
    let (_, grad) = loss_and_grad(params, batch, config)?;
    let grad_flat = grad.to_flat();
    let base_flat = params.to_flat();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let idx = rng.gen_range(0..base_flat.len());
        let mut plus = base_flat.clone();
        plus[idx] += step;
        let mut minus = base_flat.clone();
        minus[idx] -= step;
        let lp = loss_forward(&MaskNetParams::from_flat(params.config, &plus)?, batch, config)?;
        let lm = loss_forward(&MaskNetParams::from_flat(params.config, &minus)?, batch, config)?;
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = grad_flat[idx];
        let denom = numeric.abs().max(analytic.abs());
        let rel = if denom < 1e-10 {
            0.0
        } else {
            (numeric - analytic).abs() / denom
        };
        entries.push((idx, analytic, numeric, rel));
    }
    Ok(FdReport { entries })
}

/// AdamW optimizer state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAM_WEIGHT_DECAY: f64 = 1e-2;

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One AdamW update (decoupled weight decay). Deterministic.
    pub fn step(
        &mut self,
        params: &MaskNetParams,
        grad: &MaskNetParams,
        lr: f64,
        weight_decay: f64,
    ) -> MaskNetParams {
        let mut theta = params.to_flat();
        let g = grad.to_flat();
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * theta[i]);
        }
        MaskNetParams::from_flat(params.config, &theta).expect("shapes preserved")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masknet::MaskNetConfig;
    use crate::stft::stft_forward;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signal(rng: &mut ChaCha8Rng, s: usize, m: usize) -> TimeSignal {
        TimeSignal::new(Array2::from_shape_fn((s, m), |_| rng.gen_range(-0.5..0.5))).unwrap()
    }

    /// M=3, F=33, T=30 item for gradient checks.
    fn desk_item(seed: u64) -> (BatchItem, DiffConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 3;
        let n_fft = 64;
        let hop = 16;
        let s = 464; // ceil(464/16)+1 = 30 frames
        let sig = signal(&mut rng, s, m);
        let x = stft_forward(&sig, n_fft, hop).unwrap();
        assert_eq!(x.n_frames(), 30);
        let d_ref = signal(&mut rng, s, 1);
        let geometry = ArrayGeometry::circular(m, 0.05, 16000.0);
        (
            BatchItem {
                x,
                doa: rng.gen_range(0.0..std::f64::consts::TAU),
                d_ref,
            },
            DiffConfig {
                wpd: WpdConfig {
                    delay_b: 1,
                    taps_l: 2,
                    ref_channel: 0,
                },
                geometry,
            },
        )
    }

    fn desk_params(seed: u64) -> MaskNetParams {
        MaskNetParams::init(
            MaskNetConfig {
                n_mics: 3,
                hidden: 10,
                context: 1,
            },
            seed,
        )
    }

    #[test]
    fn sdr_loss_reference_values() {
        let a = TimeSignal::new(array![[1.0], [0.0]]).unwrap();
        let b = TimeSignal::new(array![[0.0], [1.0]]).unwrap();
        let loss = sdr_loss(&a, &b).unwrap();
        assert!((loss - 10.0 * 2f64.log10()).abs() < 1e-6, "{loss}");

        let r = TimeSignal::new(array![[0.4], [-0.7], [0.2]]).unwrap();
        let neg = TimeSignal::new(&r.samples * -1.0).unwrap();
        let loss = sdr_loss(&neg, &r).unwrap();
        assert!((loss - 10.0 * 4f64.log10()).abs() < 1e-6, "{loss}");

        // exact match is the minimum
        let at_min = sdr_loss(&r, &r).unwrap();
        let mut perturbed = r.clone();
        perturbed.samples[[1, 0]] += 1e-3;
        assert!(at_min < sdr_loss(&perturbed, &r).unwrap());

        let too_short = TimeSignal::new(array![[1.0]]).unwrap();
        assert!(matches!(sdr_loss(&too_short, &r), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_only_matches_loss_and_grad_bitwise() {
        let (item, config) = desk_item(1);
        let params = desk_params(2);
        let batch = vec![item];
        let fwd = loss_forward(&params, &batch, &config).unwrap();
        let (with_grad, _) = loss_and_grad(&params, &batch, &config).unwrap();
        assert_eq!(fwd.to_bits(), with_grad.to_bits());
    }

    #[test]
    fn duplicated_item_keeps_gradient() {
        let (item, config) = desk_item(3);
        let params = desk_params(4);
        let (_, g1) = loss_and_grad(&params, &[item.clone()], &config).unwrap();
        let (_, g2) = loss_and_grad(&params, &[item.clone(), item], &config).unwrap();
        let f1 = g1.to_flat();
        let f2 = g2.to_flat();
        let max_diff = f1
            .iter()
            .zip(f2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "gradient changed by {max_diff}");
    }

    #[test]
    fn finite_difference_spot_check() {
        // small but full-path check; the acceptance suite runs the big one
        let (item, config) = desk_item(5);
        let params = desk_params(6);
        let report =
            finite_diff_check(&params, &[item], &config, 20, 1e-4, 7).unwrap();
        assert!(
            report.median_rel() < 1e-4,
            "median {}",
            report.median_rel()
        );
        assert!(report.max_rel() < 1e-2, "max {}", report.max_rel());
    }

    #[test]
    fn adam_reference_behaviour() {
        let params = desk_params(8);
        let zero_grad = MaskNetParams::zeros(params.config);
        let mut state = AdamState::new(params.flat_len());
        let updated = state.step(&params, &zero_grad, 1e-3, 0.0);
        assert_eq!(params.to_flat(), updated.to_flat());

        // determinism
        let (item, config) = desk_item(9);
        let (_, grad) = loss_and_grad(&params, &[item], &config).unwrap();
        let mut s1 = AdamState::new(params.flat_len());
        let mut s2 = AdamState::new(params.flat_len());
        let a = s1.step(&params, &grad, 1e-3, ADAM_WEIGHT_DECAY);
        let b = s2.step(&params, &grad, 1e-3, ADAM_WEIGHT_DECAY);
        assert_eq!(a.to_flat(), b.to_flat());

        // first step is ~ -lr * sign(g) without decay: constant gradient on
        // a handful of entries, zero elsewhere
        let mut g_flat = vec![0.0; params.flat_len()];
        g_flat[0] = 0.7;
        g_flat[17] = -0.4;
        g_flat[params.flat_len() - 1] = 1.3;
        let const_grad = MaskNetParams::from_flat(params.config, &g_flat).unwrap();
        let mut state = AdamState::new(params.flat_len());
        let stepped = state.step(&params, &const_grad, 1e-3, 0.0);
        let before = params.to_flat();
        let after = stepped.to_flat();
        for (i, &g) in g_flat.iter().enumerate() {
            let delta = after[i] - before[i];
            let expect = if g == 0.0 { 0.0 } else { -1e-3 * g.signum() };
            assert!(
                (delta - expect).abs() < 1e-6,
                "param {i}: step {delta} vs {expect}"
            );
        }
    }
}
