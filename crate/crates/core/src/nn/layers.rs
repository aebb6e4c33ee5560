//! Layer builders on the [`Tape`] plus standalone forms of the pooling,
//! normalisation and recurrent operations.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::tape::{Tape, Var};
use super::NnError;

/// `x W + b` with `b` a 1 x C row.
pub fn linear(t: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = t.matmul(x, w);
    t.add_row(y, b)
}

/// 1-D convolution over time; `w` is `(kernel * C_in) x C_out`, padding keeps
/// `ceil(N / stride)` output frames for odd kernels.
pub fn conv1d(t: &mut Tape, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
    let cols = t.unfold(x, kernel, stride, kernel / 2);
    linear(t, cols, w, b)
}

/// Tape variables for single-head additive attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w: Var,
    pub b: Var,
    pub u: Var,
}

/// `e_m = u . tanh(W h_m + b)`, `w = softmax(e)`, `o = sum_m w_m h_m`.
/// Returns `(o, weights)` where weights is N x 1.
pub fn attention_pool_on(t: &mut Tape, h: Var, p: AttentionVars) -> (Var, Var) {
    let pre = linear(t, h, p.w, p.b);
    let act = t.tanh(pre);
    let scores = t.matmul(act, p.u);
    let weights = t.softmax_column(scores);
    let wt = t.transpose(weights);
    (t.matmul(wt, h), weights)
}

/// Per-direction GRU parameters as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    /// D_in x 3H input projection (update, reset, candidate).
    pub w_x: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    /// 1 x 3H
    pub b: Var,
}

/// Runs one GRU direction over all rows of `x`; returns N x H.
pub fn gru_direction(t: &mut Tape, x: Var, p: GruVars, reverse: bool) -> Var {
    let n = t.value(x).nrows();
    let hidden = t.value(p.u_z).nrows();
    let proj = linear(t, x, p.w_x, p.b);
    let mut h = t.leaf(Array2::zeros((1, hidden)));
    let mut outputs = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for step in order {
        let row = t.row(proj, step);
        let xz = t.slice_cols(row, 0, hidden);
        let xr = t.slice_cols(row, hidden, 2 * hidden);
        let xn = t.slice_cols(row, 2 * hidden, 3 * hidden);
        let hz = t.matmul(h, p.u_z);
        let zs = t.add(xz, hz);
        let z = t.sigmoid(zs);
        let hr = t.matmul(h, p.u_r);
        let rs = t.add(xr, hr);
        let r = t.sigmoid(rs);
        let rh = t.mul(r, h);
        let hn = t.matmul(rh, p.u_n);
        let ns = t.add(xn, hn);
        let cand = t.tanh(ns);
        // h' = n + z * (h - n)
        let neg = t.affine(cand, -1.0, 0.0);
        let diff = t.add(h, neg);
        let gated = t.mul(z, diff);
        h = t.add(cand, gated);
        outputs[step] = h;
    }
    t.stack_rows(&outputs)
}

/// Bidirectional layer: forward and backward halves concatenated.
pub fn bigru_layer(t: &mut Tape, x: Var, fw: GruVars, bw: GruVars) -> Var {
    let f = gru_direction(t, x, fw, false);
    let b = gru_direction(t, x, bw, true);
    t.concat_cols(f, b)
}

/// Two stacked bidirectional layers with a skip connection spanning both.
pub fn recurrent_block(t: &mut Tape, x: Var, layers: &[(GruVars, GruVars); 2]) -> Var {
    let first = bigru_layer(t, x, layers[0].0, layers[0].1);
    let second = bigru_layer(t, first, layers[1].0, layers[1].1);
    t.add(second, x)
}

// ---------------------------------------------------------------------------
// Standalone forms

pub fn length_normalize(v: ArrayView1<'_, f64>) -> Result<Array1<f64>, NnError> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(NnError::ZeroVector);
    }
    Ok(v.mapv(|x| x / norm))
}

/// Pulls `grad_out` (gradient w.r.t. `v / |v|`) back to `v`:
/// `(I - v_hat v_hat^T) grad_out / |v|`.
pub fn length_normalize_backward(v: ArrayView1<'_, f64>, grad_out: ArrayView1<'_, f64>) -> Result<Array1<f64>, NnError> {
    let unit = length_normalize(v)?;
    let norm = v.dot(&v).sqrt();
    let proj = unit.dot(&grad_out);
    Ok((&grad_out - &(&unit * proj)) / norm)
}

/// `cos theta_k = c_hat_k . o_hat` for every row `c_k` of `weights`, clamped
/// into `[-1 - 1e-12, 1 + 1e-12]`.
pub fn cosine_scores(o: ArrayView1<'_, f64>, weights: ArrayView2<'_, f64>) -> Result<Array1<f64>, NnError> {
    if weights.ncols() != o.len() {
        return Err(NnError::ShapeMismatch(format!("embedding {} vs class weights {}", o.len(), weights.ncols())));
    }
    let o_hat = length_normalize(o)?;
    weights
        .rows()
        .into_iter()
        .map(|c| Ok(length_normalize(c)?.dot(&o_hat).clamp(-1.0 - 1e-12, 1.0 + 1e-12)))
        .collect()
}

pub fn mean_pool(h: ArrayView2<'_, f64>) -> Result<Array1<f64>, NnError> {
    h.mean_axis(ndarray::Axis(0)).ok_or(NnError::EmptySequence)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// D_h x D_a
    pub w: Array2<f64>,
    /// 1 x D_a
    pub b: Array2<f64>,
    /// D_a x 1
    pub u: Array2<f64>,
}

impl AttentionParams {
    pub fn zeros(hidden: usize, attn: usize) -> Self {
        Self {
            w: Array2::zeros((hidden, attn)),
            b: Array2::zeros((1, attn)),
            u: Array2::zeros((attn, 1)),
        }
    }

    pub fn vars(&self, t: &mut Tape) -> AttentionVars {
        AttentionVars {
            w: t.leaf(self.w.clone()),
            b: t.leaf(self.b.clone()),
            u: t.leaf(self.u.clone()),
        }
    }
}

/// Returns the pooled embedding and the per-frame weights.
pub fn attention_pool(h: ArrayView2<'_, f64>, params: &AttentionParams) -> Result<(Array1<f64>, Array1<f64>), NnError> {
    if h.nrows() == 0 {
        return Err(NnError::EmptySequence);
    }
    if params.w.nrows() != h.ncols() {
        return Err(NnError::ShapeMismatch("attention projection width".into()));
    }
    let mut t = Tape::new();
    let x = t.leaf(h.to_owned());
    let vars = params.vars(&mut t);
    let (o, w) = attention_pool_on(&mut t, x, vars);
    Ok((t.value(o).row(0).to_owned(), t.value(w).column(0).to_owned()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_x: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b: Array2<f64>,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Array2::zeros((input, 3 * hidden)),
            u_z: Array2::zeros((hidden, hidden)),
            u_r: Array2::zeros((hidden, hidden)),
            u_n: Array2::zeros((hidden, hidden)),
            b: Array2::zeros((1, 3 * hidden)),
        }
    }

    pub fn vars(&self, t: &mut Tape) -> GruVars {
        GruVars {
            w_x: t.leaf(self.w_x.clone()),
            u_z: t.leaf(self.u_z.clone()),
            u_r: t.leaf(self.u_r.clone()),
            u_n: t.leaf(self.u_n.clone()),
            b: t.leaf(self.b.clone()),
        }
    }
}

/// Forward/backward parameters for both stacked layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    pub layers: [(GruParams, GruParams); 2],
}

impl RecurrentParams {
    pub fn zeros(width: usize) -> Result<Self, NnError> {
        if !width.is_multiple_of(2) {
            return Err(NnError::OddWidth(width));
        }
        let half = width / 2;
        let layer = || (GruParams::zeros(width, half), GruParams::zeros(width, half));
        Ok(Self {
            layers: [layer(), layer()],
        })
    }
}

/// Bidirectional two-layer recurrent mixer with a skip connection.
pub fn recurrent_layer(h: ArrayView2<'_, f64>, params: &RecurrentParams) -> Result<Array2<f64>, NnError> {
    if h.nrows() == 0 {
        return Err(NnError::EmptySequence);
    }
    if !h.ncols().is_multiple_of(2) {
        return Err(NnError::OddWidth(h.ncols()));
    }
    let mut t = Tape::new();
    let x = t.leaf(h.to_owned());
    let vars = [
        (params.layers[0].0.vars(&mut t), params.layers[0].1.vars(&mut t)),
        (params.layers[1].0.vars(&mut t), params.layers[1].1.vars(&mut t)),
    ];
    let out = recurrent_block(&mut t, x, &vars);
    Ok(t.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_check, glorot_uniform};
    use ndarray::{array, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn normalise_basics() {
        assert_eq!(length_normalize(array![3.0, 4.0].view()).unwrap(), array![0.6, 0.8]);
        assert_eq!(length_normalize(array![0.0, 1.0].view()).unwrap(), array![0.0, 1.0]);
        assert!(matches!(length_normalize(array![0.0, 0.0].view()), Err(NnError::ZeroVector)));
    }

    #[test]
    fn normalise_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let probe: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let probe = Array1::from(probe);
            let err = finite_difference_check(
                |p| {
                    let v = Array1::from(p.to_vec());
                    let f = length_normalize(v.view()).unwrap().dot(&probe);
                    (f, length_normalize_backward(v.view(), probe.view()).unwrap().to_vec())
                },
                &v,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn cosine_cases() {
        let w = array![[2.0, 0.0], [0.0, 5.0]];
        let c = cosine_scores(array![3.0, 0.0].view(), w.view()).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        assert!(c[1].abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let o = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
        let w = random(2, 6, &mut rng);
        let base = cosine_scores(o.view(), w.view()).unwrap();
        let scaled = cosine_scores((&o * 3.7).view(), (&w * 0.2).view()).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cosine_scores(o.view(), Array2::zeros((2, 6)).view()).is_err());
    }

    #[test]
    fn mean_pool_cases() {
        assert_eq!(mean_pool(array![[1.0, 2.0]].view()).unwrap(), array![1.0, 2.0]);
        assert_eq!(mean_pool(Array2::from_elem((4, 2), 0.5).view()).unwrap(), array![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random(5, 3, &mut rng);
        let pooled = mean_pool(h.view()).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for r in 0..5 {
                s += h[[r, c]];
            }
            assert!((pooled[c] - s / 5.0).abs() < 1e-12);
        }
        assert!(matches!(mean_pool(Array2::zeros((0, 3)).view()), Err(NnError::EmptySequence)));
    }

    #[test]
    fn attention_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = AttentionParams {
            w: random(4, 2, &mut rng),
            b: random(1, 2, &mut rng),
            u: random(2, 1, &mut rng),
        };
        let frame = array![[0.1, -0.3, 0.7, 0.2]];
        let same = frame.broadcast((6, 4)).unwrap().to_owned();
        let (o, w) = attention_pool(same.view(), &params).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        for (a, b) in o.iter().zip(frame.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let (o1, w1) = attention_pool(frame.view(), &params).unwrap();
        assert_eq!(w1.to_vec(), vec![1.0]);
        assert_eq!(o1, frame.row(0));

        // constant scores reduce to the mean
        let h = random(7, 4, &mut rng);
        let (o, w) = attention_pool(h.view(), &AttentionParams::zeros(4, 2)).unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        let mean = h.mean_axis(Axis(0)).unwrap();
        for (a, b) in o.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d, a) = (5, 4, 3);
        let shapes = [(n, d), (d, a), (1, a), (a, 1)];
        let mut p0 = Vec::new();
        for (r, c) in shapes {
            p0.extend(random(r, c, &mut rng).iter().cloned());
        }
        let probe = random(1, d, &mut rng);
        let err = finite_difference_check(
            |p| {
                let mut t = Tape::new();
                let mut offset = 0;
                let mut vars = Vec::new();
                for (r, c) in shapes {
                    vars.push(t.leaf(Array2::from_shape_vec((r, c), p[offset..offset + r * c].to_vec()).unwrap()));
                    offset += r * c;
                }
                let (o, _) = attention_pool_on(&mut t, vars[0], AttentionVars { w: vars[1], b: vars[2], u: vars[3] });
                let pr = t.leaf(probe.t().to_owned());
                let f = t.matmul(o, pr);
                let g = t.backward(f, 1.0);
                let mut grad = Vec::new();
                for (v, (r, c)) in vars.iter().zip(shapes) {
                    grad.extend(g.get(*v).cloned().unwrap_or_else(|| Array2::zeros((r, c))).iter().cloned());
                }
                (t.scalar(f), grad)
            },
            &p0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_recurrent_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random(5, 6, &mut rng);
        let out = recurrent_layer(h.view(), &RecurrentParams::zeros(6).unwrap()).unwrap();
        assert_eq!(out, h);
        assert!(matches!(RecurrentParams::zeros(5), Err(NnError::OddWidth(5))));
        assert!(matches!(recurrent_layer(random(3, 5, &mut rng).view(), &RecurrentParams::zeros(6).unwrap()), Err(NnError::OddWidth(5))));
    }

    #[test]
    fn single_frame_is_direction_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fw = GruParams {
            w_x: glorot_uniform(4, 6, &mut rng),
            u_z: glorot_uniform(2, 2, &mut rng),
            u_r: glorot_uniform(2, 2, &mut rng),
            u_n: glorot_uniform(2, 2, &mut rng),
            b: random(1, 6, &mut rng),
        };
        let mut t = Tape::new();
        let x = t.leaf(random(1, 4, &mut rng));
        let v = fw.vars(&mut t);
        let f = gru_direction(&mut t, x, v, false);
        let b = gru_direction(&mut t, x, v, true);
        assert_eq!(t.value(f), t.value(b));
    }

    #[test]
    fn recurrent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (n, d) = (4, 6);
        let half = d / 2;
        let mut shapes = vec![(n, d)];
        for _ in 0..4 {
            shapes.extend([(d, 3 * half), (half, half), (half, half), (half, half), (1, 3 * half)]);
        }
        let mut p0 = Vec::new();
        for (r, c) in &shapes {
            p0.extend(random(*r, *c, &mut rng).iter().map(|x| x * 0.8));
        }
        let probe = random(n, d, &mut rng);
        let err = finite_difference_check(
            |p| {
                let mut t = Tape::new();
                let mut offset = 0;
                let mut vars = Vec::new();
                for (r, c) in &shapes {
                    vars.push(t.leaf(Array2::from_shape_vec((*r, *c), p[offset..offset + r * c].to_vec()).unwrap()));
                    offset += r * c;
                }
                let gru = |k: usize| GruVars {
                    w_x: vars[1 + 5 * k],
                    u_z: vars[2 + 5 * k],
                    u_r: vars[3 + 5 * k],
                    u_n: vars[4 + 5 * k],
                    b: vars[5 + 5 * k],
                };
                let out = recurrent_block(&mut t, vars[0], &[(gru(0), gru(1)), (gru(2), gru(3))]);
                let pr = t.leaf(probe.clone());
                let prod = t.mul(out, pr);
                let flat = t.flatten(prod);
                let ones = t.leaf(Array2::from_elem((n * d, 1), 1.0));
                let f = t.matmul(flat, ones);
                let g = t.backward(f, 1.0);
                let mut grad = Vec::new();
                for (v, (r, c)) in vars.iter().zip(&shapes) {
                    grad.extend(g.get(*v).cloned().unwrap_or_else(|| Array2::zeros((*r, *c))).iter().cloned());
                }
                (t.scalar(f), grad)
            },
            &p0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
