//! Attention-MLP network mapping per-satellite features to a measurement
//! variance `r` and an innovation compensation `v_c`.
//!
//! Row-vector convention: an epoch is an `N × 8` matrix and layers compute
//! `X·W + b`.

pub mod tape;

use crate::features::{EpochFeatures, FeatureTensor, FEATURE_DIM};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;
use tape::{Tape, Var};
use thiserror::Error;

pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = FEATURE_DIM / HEADS;
pub const HIDDEN: [usize; 3] = [64, 128, 64];
pub const LN_EPS: f64 = 1e-5;
/// Initial variance output, m².
pub const INIT_VARIANCE: f64 = 25.0;

const PARAMS_FORMAT: &str = "lfgnss-params";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file: {0}")]
    Format(String),
    #[error("model file checksum mismatch")]
    Checksum,
}

/// All trainable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DMatrix<f64>,
    pub w4: DMatrix<f64>,
    pub b4: DMatrix<f64>,
}

pub const PARAM_NAMES: [&str; 14] = [
    "wq", "wk", "wv", "wo", "gamma", "beta", "w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4",
];

fn param_shapes() -> [(usize, usize); 14] {
    let d = FEATURE_DIM;
    let [h1, h2, h3] = HIDDEN;
    [
        (d, d),
        (d, d),
        (d, d),
        (d, d),
        (1, d),
        (1, d),
        (d, h1),
        (1, h1),
        (h1, h2),
        (1, h2),
        (h2, h3),
        (1, h3),
        (h3, 2),
        (1, 2),
    ]
}

/// `softplus⁻¹(y)` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl NetParams {
    pub fn zeros() -> Self {
        let s = param_shapes();
        let z = |i: usize| DMatrix::zeros(s[i].0, s[i].1);
        Self {
            wq: z(0),
            wk: z(1),
            wv: z(2),
            wo: z(3),
            gamma: z(4),
            beta: z(5),
            w1: z(6),
            b1: z(7),
            w2: z(8),
            b2: z(9),
            w3: z(10),
            b3: z(11),
            w4: z(12),
            b4: z(13),
        }
    }

    /// Uniform fan-in initialization: bound `sqrt(6/fan_in)` ahead of a
    /// ReLU, `sqrt(3/fan_in)` elsewhere; the output layer is further scaled
    /// by 0.1 and the variance bias starts at `softplus⁻¹(25)`.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        let mut fill = |m: &mut DMatrix<f64>, bound: f64| {
            for v in m.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        let d = FEATURE_DIM as f64;
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            fill(w, (3.0 / d).sqrt());
        }
        fill(&mut p.w1, (6.0 / d).sqrt());
        fill(&mut p.w2, (6.0 / HIDDEN[0] as f64).sqrt());
        fill(&mut p.w3, (6.0 / HIDDEN[1] as f64).sqrt());
        fill(&mut p.w4, 0.1 * (3.0 / HIDDEN[2] as f64).sqrt());
        p.gamma.fill(1.0);
        p.b4[(0, 0)] = inverse_softplus(INIT_VARIANCE);
        p
    }

    pub fn arrays(&self) -> [&DMatrix<f64>; 14] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.gamma, &self.beta, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.w3, &self.b3, &self.w4, &self.b4,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut DMatrix<f64>; 14] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.gamma,
            &mut self.beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w4,
            &mut self.b4,
        ]
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().iter().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let mut p = Self::zeros();
        assert_eq!(flat.len(), p.len());
        let mut k = 0;
        for a in p.arrays_mut() {
            let n = a.len();
            a.as_mut_slice().copy_from_slice(&flat[k..k + n]);
            k += n;
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Registers every array as a tape leaf.
    pub fn on_tape(&self, t: &mut Tape) -> ParamVars {
        let mut vars = self.arrays().map(|a| a.clone()).into_iter().map(|a| t.leaf(a));
        let mut next = || vars.next().expect("14 arrays");
        ParamVars {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            gamma: next(),
            beta: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            w3: next(),
            b3: next(),
            w4: next(),
            b4: next(),
        }
    }

    /// Text dump: a header, then per array a `name rows cols` line followed
    /// by the IEEE-754 bit patterns in hex (column-major), then the SHA-256
    /// of everything before the checksum line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{PARAMS_FORMAT} {PARAMS_VERSION}\n");
        for (name, a) in PARAM_NAMES.iter().zip(self.arrays()) {
            let _ = writeln!(s, "{name} {} {}", a.nrows(), a.ncols());
            let words: Vec<String> = a.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            s.push_str(&words.join(" "));
            s.push('\n');
        }
        let digest = hex::encode(Sha256::digest(s.as_bytes()));
        let _ = writeln!(s, "sha256 {digest}");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ParamsError> {
        let fmt = |m: &str| ParamsError::Format(m.to_string());
        let cut = text.rfind("sha256 ").ok_or_else(|| fmt("missing checksum line"))?;
        let (body, tail) = text.split_at(cut);
        let expect = tail
            .strip_prefix("sha256 ")
            .and_then(|t| t.strip_suffix('\n'))
            .ok_or_else(|| fmt("malformed checksum line"))?;
        if hex::encode(Sha256::digest(body.as_bytes())) != expect {
            return Err(ParamsError::Checksum);
        }
        let mut lines = body.lines();
        let header = lines.next().ok_or_else(|| fmt("empty file"))?;
        if header != format!("{PARAMS_FORMAT} {PARAMS_VERSION}") {
            return Err(ParamsError::Format(format!("unsupported header {header:?}")));
        }
        let mut p = Self::zeros();
        for ((name, shape), a) in PARAM_NAMES.iter().zip(param_shapes()).zip(p.arrays_mut()) {
            let head = lines.next().ok_or_else(|| fmt("truncated"))?;
            if head != format!("{name} {} {}", shape.0, shape.1) {
                return Err(ParamsError::Format(format!("expected array {name} {shape:?}, got {head:?}")));
            }
            let data = lines.next().ok_or_else(|| fmt("truncated"))?;
            let values: Vec<f64> = data
                .split(' ')
                .map(|w| u64::from_str_radix(w, 16).map(f64::from_bits))
                .collect::<Result<_, _>>()
                .map_err(|e| ParamsError::Format(format!("{name}: {e}")))?;
            if values.len() != a.len() {
                return Err(ParamsError::Format(format!("{name}: {} values", values.len())));
            }
            a.as_mut_slice().copy_from_slice(&values);
        }
        if lines.next().is_some() {
            return Err(fmt("trailing content"));
        }
        Ok(p)
    }
}

pub fn save_params(p: &NetParams, path: &Path) -> Result<(), ParamsError> {
    std::fs::write(path, p.to_text()).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_params(path: &Path) -> Result<NetParams, ParamsError> {
    let text = std::fs::read_to_string(path).map_err(|source| ParamsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    NetParams::from_text(&text)
}

/// Tape handles of the parameter arrays, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub gamma: Var,
    pub beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub w4: Var,
    pub b4: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 14] {
        [
            self.wq, self.wk, self.wv, self.wo, self.gamma, self.beta, self.w1, self.b1, self.w2, self.b2, self.w3,
            self.b3, self.w4, self.b4,
        ]
    }

    /// Parameter gradients as a [`NetParams`]-shaped value.
    pub fn gradients(&self, g: &tape::Gradients) -> NetParams {
        let mut out = NetParams::zeros();
        for (v, a) in self.all().into_iter().zip(out.arrays_mut()) {
            if let Some(d) = g.wrt(v) {
                a.copy_from(d);
            }
        }
        out
    }
}

/// Rows `start..start+len` of the stacked input form one epoch. Attention
/// only mixes rows of the same segment, and only attends to keys whose
/// mask entry is true.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub key_mask: Option<Vec<bool>>,
}

/// Handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `N × 2` raw output.
    pub out: Var,
    /// `N × 1` softplus of column 0.
    pub r: Var,
    /// `N × 1` column 1.
    pub vc: Var,
}

/// Multi-head self-attention plus residual: `X + concat_h(softmax(Q_h K_hᵀ/√d_k) V_h) W_O`.
pub fn attention_tape(t: &mut Tape, p: &ParamVars, x: Var, segments: &[Segment]) -> Var {
    let q = t.matmul(x, p.wq);
    let k = t.matmul(x, p.wk);
    let v = t.matmul(x, p.wv);
    let scale = 1.0 / (HEAD_DIM as f64).sqrt();
    let mut blocks = Vec::with_capacity(segments.len());
    for s in segments {
        let mut heads = Vec::with_capacity(HEADS);
        for h in 0..HEADS {
            let c0 = h * HEAD_DIM;
            let qh = t.block(q, s.start, c0, s.len, HEAD_DIM);
            let kh = t.block(k, s.start, c0, s.len, HEAD_DIM);
            let vh = t.block(v, s.start, c0, s.len, HEAD_DIM);
            let scores = t.matmul_nt(qh, kh);
            let a = t.softmax_rows(scores, scale, s.key_mask.as_deref());
            heads.push(t.matmul(a, vh));
        }
        blocks.push(t.concat_cols(&heads));
    }
    let mixed = if blocks.len() == 1 { blocks[0] } else { t.concat_rows(&blocks) };
    let o = t.matmul(mixed, p.wo);
    t.add(x, o)
}

/// Full forward over stacked epochs `x` (`N × 8`).
pub fn forward_tape(t: &mut Tape, p: &ParamVars, x: Var, segments: &[Segment]) -> ForwardVars {
    let a = attention_tape(t, p, x, segments);
    let n = t.layer_norm(a, p.gamma, p.beta, LN_EPS);
    let mut h = n;
    for (w, b) in [(p.w1, p.b1), (p.w2, p.b2), (p.w3, p.b3)] {
        let z = t.matmul(h, w);
        let z = t.add_row(z, b);
        h = t.relu(z);
    }
    let z = t.matmul(h, p.w4);
    let out = t.add_row(z, p.b4);
    let raw_r = t.cols(out, 0, 1);
    let r = t.softplus(raw_r);
    let vc = t.cols(out, 1, 1);
    ForwardVars { out, r, vc }
}

/// Per-slot network output for a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub batch: usize,
    pub n_max: usize,
    pub r_diag: Vec<f64>,
    pub v_comp: Vec<f64>,
    pub mask: Vec<bool>,
}

impl NetOutput {
    pub fn r(&self, b: usize, s: usize) -> f64 {
        self.r_diag[b * self.n_max + s]
    }

    pub fn vc(&self, b: usize, s: usize) -> f64 {
        self.v_comp[b * self.n_max + s]
    }
}

pub fn forward(features: &FeatureTensor, params: &NetParams) -> NetOutput {
    let n_max = features.n_max;
    let mut t = Tape::new();
    let p = params.on_tape(&mut t);
    let rows = features.batch * n_max;
    let x = t.leaf(DMatrix::from_fn(rows, FEATURE_DIM, |i, j| features.slot(i / n_max, i % n_max)[j]));
    let segments: Vec<Segment> = (0..features.batch)
        .map(|b| Segment {
            start: b * n_max,
            len: n_max,
            key_mask: Some(features.epoch_mask(b).to_vec()),
        })
        .collect();
    let f = forward_tape(&mut t, &p, x, &segments);
    NetOutput {
        batch: features.batch,
        n_max,
        r_diag: t.value(f.r).iter().copied().collect(),
        v_comp: t.value(f.vc).iter().copied().collect(),
        mask: features.mask.clone(),
    }
}

/// Stacks unpadded epochs into one input and its segments.
pub fn stack_epochs(epochs: &[&EpochFeatures]) -> (DMatrix<f64>, Vec<Segment>) {
    let total: usize = epochs.iter().map(|e| e.len()).sum();
    let mut x = DMatrix::zeros(total, FEATURE_DIM);
    let mut segments = Vec::with_capacity(epochs.len());
    let mut r = 0;
    for e in epochs {
        for (i, row) in e.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                x[(r + i, j)] = *v;
            }
        }
        segments.push(Segment {
            start: r,
            len: e.len(),
            key_mask: None,
        });
        r += e.len();
    }
    (x, segments)
}

/// `(r, v_c)` per satellite of each epoch, without padding.
pub fn forward_epochs(epochs: &[&EpochFeatures], params: &NetParams) -> Vec<(Vec<f64>, Vec<f64>)> {
    let nonempty: Vec<&EpochFeatures> = epochs.iter().copied().filter(|e| !e.is_empty()).collect();
    let mut results = Vec::with_capacity(epochs.len());
    if nonempty.is_empty() {
        return epochs.iter().map(|_| (Vec::new(), Vec::new())).collect();
    }
    let (xm, segments) = stack_epochs(&nonempty);
    let mut t = Tape::new();
    let p = params.on_tape(&mut t);
    let x = t.leaf(xm);
    let f = forward_tape(&mut t, &p, x, &segments);
    let r = t.value(f.r);
    let vc = t.value(f.vc);
    let mut seg = segments.iter();
    for e in epochs {
        if e.is_empty() {
            results.push((Vec::new(), Vec::new()));
            continue;
        }
        let s = seg.next().expect("one segment per non-empty epoch");
        results.push((
            (s.start..s.start + s.len).map(|i| r[(i, 0)]).collect(),
            (s.start..s.start + s.len).map(|i| vc[(i, 0)]).collect(),
        ));
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{pack_raw, DpcFlag, NormalizationSpec, SatFeatures};
    use crate::models::System;

    type Mat = Vec<Vec<f64>>;

    fn to_rows(m: &DMatrix<f64>) -> Mat {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
    }

    fn mm(a: &Mat, b: &Mat) -> Mat {
        let mut c = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for k in 0..b.len() {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    /// Straight-line attention with residual, valid rows only.
    fn attention_oracle(x: &Mat, p: &NetParams) -> Mat {
        let n = x.len();
        let q = mm(x, &to_rows(&p.wq));
        let k = mm(x, &to_rows(&p.wk));
        let v = mm(x, &to_rows(&p.wv));
        let mut cat = vec![vec![0.0; 8]; n];
        for h in 0..4 {
            for i in 0..n {
                let mut s = vec![0.0; n];
                for j in 0..n {
                    s[j] = (q[i][2 * h] * k[j][2 * h] + q[i][2 * h + 1] * k[j][2 * h + 1]) / 2f64.sqrt();
                }
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for j in 0..n {
                    let a = (s[j] - m).exp() / z;
                    cat[i][2 * h] += a * v[j][2 * h];
                    cat[i][2 * h + 1] += a * v[j][2 * h + 1];
                }
            }
        }
        let o = mm(&cat, &to_rows(&p.wo));
        (0..n).map(|i| (0..8).map(|j| x[i][j] + o[i][j]).collect()).collect()
    }

    fn layer_norm_oracle(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mu = row.iter().sum::<f64>() / d;
                let sd = (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d).sqrt();
                row.iter().enumerate().map(|(j, v)| (v - mu) / (sd + 1e-5) * g[j] + b[j]).collect()
            })
            .collect()
    }

    fn forward_oracle(x: &Mat, p: &NetParams) -> Vec<(f64, f64)> {
        let a = attention_oracle(x, p);
        let g: Vec<f64> = p.gamma.iter().copied().collect();
        let b: Vec<f64> = p.beta.iter().copied().collect();
        let mut h = layer_norm_oracle(&a, &g, &b);
        for (w, bias) in [(&p.w1, &p.b1), (&p.w2, &p.b2), (&p.w3, &p.b3)] {
            let z = mm(&h, &to_rows(w));
            h = z
                .iter()
                .map(|r| r.iter().enumerate().map(|(j, v)| (v + bias[(0, j)]).max(0.0)).collect())
                .collect();
        }
        let o = mm(&h, &to_rows(&p.w4));
        o.iter()
            .map(|r| {
                let x = r[0] + p.b4[(0, 0)];
                let sp = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
                (sp, r[1] + p.b4[(0, 1)])
            })
            .collect()
    }

    fn random_input(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 8, |_, _| rng.gen_range(-1.5..1.5))
    }

    fn perturbed_params(seed: u64) -> NetParams {
        let mut p = NetParams::init(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for v in p.gamma.iter_mut().chain(p.beta.iter_mut()).chain(p.b1.iter_mut()) {
            *v += rng.gen_range(-0.3..0.3);
        }
        p
    }

    fn run(x: &DMatrix<f64>, p: &NetParams, mask: Option<Vec<bool>>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut t = Tape::new();
        let pv = p.on_tape(&mut t);
        let xv = t.leaf(x.clone());
        let seg = [Segment {
            start: 0,
            len: x.nrows(),
            key_mask: mask,
        }];
        let a = attention_tape(&mut t, &pv, xv, &seg);
        let f = forward_tape(&mut t, &pv, xv, &seg);
        (t.value(a).clone(), t.value(f.r).clone(), t.value(f.vc).clone())
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let x = random_input(1, 5);
        let p = perturbed_params(2);
        let (a, _, _) = run(&x, &p, None);
        let o = attention_oracle(&to_rows(&x), &p);
        for i in 0..5 {
            for j in 0..8 {
                assert!((a[(i, j)] - o[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_satellite_attention() {
        let x = random_input(3, 1);
        let p = perturbed_params(4);
        let (a, _, _) = run(&x, &p, None);
        let expect = &x + &x * &p.wv * &p.wo;
        assert!((a - expect).amax() < 1e-14);
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let mut x = random_input(5, 4);
        let r0 = x.row(0).into_owned();
        x.row_mut(2).copy_from(&r0);
        let p = perturbed_params(6);
        let (_, r, vc) = run(&x, &p, None);
        assert_eq!(r[(0, 0)], r[(2, 0)]);
        assert_eq!(vc[(0, 0)], vc[(2, 0)]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let x = t.leaf(DMatrix::from_row_slice(2, 8, &[
            3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0,
        ]));
        let beta0 = DMatrix::from_fn(1, 8, |_, j| j as f64 * 0.1);
        let g1 = t.leaf(DMatrix::from_element(1, 8, 1.0));
        let b = t.leaf(beta0.clone());
        let z = t.leaf(DMatrix::zeros(1, 8));
        let y = t.layer_norm(x, g1, b, LN_EPS);
        let y0 = t.layer_norm(x, g1, z, LN_EPS);
        let v = t.value(y);
        for j in 0..8 {
            assert_eq!(v[(0, j)], beta0[(0, j)]);
        }
        let row = t.value(y0).row(1).into_owned();
        let mean = row.sum() / 8.0;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        assert!(mean.abs() < 1e-15);
        // (σ + ε) in the denominator: std is 1/(1 + ε), not exactly 1
        assert!((sd - 1.0 / (1.0 + LN_EPS)).abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-4);

        let xr = random_input(7, 6);
        let mut t = Tape::new();
        let xv = t.leaf(xr.clone());
        let gm = random_input(8, 1);
        let bm = random_input(9, 1);
        let gv = t.leaf(gm.clone());
        let bv = t.leaf(bm.clone());
        let y = t.layer_norm(xv, gv, bv, LN_EPS);
        let g: Vec<f64> = gm.iter().copied().collect();
        let b: Vec<f64> = bm.iter().copied().collect();
        let o = layer_norm_oracle(&to_rows(&xr), &g, &b);
        for i in 0..6 {
            for j in 0..8 {
                assert!((t.value(y)[(i, j)] - o[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_forward_matches_loop_oracle() {
        for seed in 0..5 {
            let x = random_input(10 + seed, 7);
            let p = perturbed_params(20 + seed);
            let (_, r, vc) = run(&x, &p, None);
            let o = forward_oracle(&to_rows(&x), &p);
            for i in 0..7 {
                assert!((r[(i, 0)] - o[i].0).abs() < 1e-10);
                assert!((vc[(i, 0)] - o[i].1).abs() < 1e-10);
                assert!(r[(i, 0)] > 0.0);
            }
        }
    }

    #[test]
    fn masked_slots_do_not_leak() {
        let p = perturbed_params(30);
        let mut x = random_input(31, 6);
        let mask = vec![true, true, false, true, false, false];
        let (_, r1, v1) = run(&x, &p, Some(mask.clone()));
        for i in [2, 4, 5] {
            for j in 0..8 {
                x[(i, j)] = 100.0 * (i + j) as f64;
            }
        }
        let (_, r2, v2) = run(&x, &p, Some(mask.clone()));
        // valid rows also equal the unpadded computation
        let compact = DMatrix::from_fn(3, 8, |i, j| x[([0, 1, 3][i], j)]);
        let (_, r3, v3) = run(&compact, &p, None);
        for (k, i) in [0, 1, 3].into_iter().enumerate() {
            assert_eq!(r1[(i, 0)], r2[(i, 0)]);
            assert_eq!(v1[(i, 0)], v2[(i, 0)]);
            assert!((r1[(i, 0)] - r3[(k, 0)]).abs() < 1e-12);
            assert!((v1[(i, 0)] - v3[(k, 0)]).abs() < 1e-12);
        }
    }

    fn feats(n: usize, seed: u64) -> Vec<SatFeatures> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| SatFeatures {
                system: [System::Gps, System::Bds, System::Gal, System::Glo][i % 4],
                sat_id: i as u16,
                snr: rng.gen_range(20.0..50.0),
                ela: rng.gen_range(0.1..1.5),
                aza: rng.gen_range(-3.0..3.0),
                psr: rng.gen_range(-10.0..10.0),
                dpc: rng.gen_range(-0.5..0.0),
                dpc_flag: DpcFlag::Ok,
            })
            .collect()
    }

    #[test]
    fn padded_batch_equals_unpadded() {
        let p = perturbed_params(40);
        let norms = NormalizationSpec::default();
        let e1 = pack_raw(feats(5, 1), &norms, 40);
        let e2 = pack_raw(feats(9, 2), &norms, 40);
        let e3 = pack_raw(Vec::new(), &norms, 40);
        let tensor = FeatureTensor::from_epochs(&[e1.clone(), e2.clone(), e3.clone()], 12);
        let padded = forward(&tensor, &p);
        let plain = forward_epochs(&[&e1, &e2, &e3], &p);
        for (b, (r, vc)) in plain.iter().enumerate() {
            for s in 0..r.len() {
                assert!((padded.r(b, s) - r[s]).abs() < 1e-12);
                assert!((padded.vc(b, s) - vc[s]).abs() < 1e-12);
            }
        }
        assert!(plain[2].0.is_empty());
    }

    #[test]
    fn permutation_equivariance() {
        let p = perturbed_params(50);
        let x = random_input(51, 6);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = DMatrix::from_fn(6, 8, |i, j| x[(perm[i], j)]);
        let (_, r, v) = run(&x, &p, None);
        let (_, rp, vp) = run(&xp, &p, None);
        for i in 0..6 {
            assert!((rp[(i, 0)] - r[(perm[i], 0)]).abs() < 1e-12);
            assert!((vp[(i, 0)] - v[(perm[i], 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn init_gives_sane_variance() {
        let p = NetParams::init(7);
        assert!((tape::softplus_scalar(p.b4[(0, 0)]) - INIT_VARIANCE).abs() < 1e-9);
        let (_, r, _) = run(&random_input(8, 10), &p, None);
        for v in r.iter() {
            assert!(*v > 5.0 && *v < 125.0, "{v}");
        }
        assert_eq!(p.gamma, DMatrix::from_element(1, 8, 1.0));
        assert_eq!(p.len(), 17_554);
    }

    #[test]
    fn save_load_bit_exact() {
        let p = perturbed_params(60);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.params");
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), q.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut text = p.to_text();
        // flip one hex digit in the first data line
        let i = text.find('\n').unwrap() + text[text.find('\n').unwrap() + 1..].find('\n').unwrap() + 3;
        let c = if &text[i..i + 1] == "0" { "1" } else { "0" };
        text.replace_range(i..i + 1, c);
        assert!(matches!(NetParams::from_text(&text), Err(ParamsError::Checksum)));
        assert!(matches!(NetParams::from_text("garbage"), Err(ParamsError::Format(_))));
        let flat = p.to_flat();
        assert_eq!(NetParams::from_flat(&flat), p);
    }
}
