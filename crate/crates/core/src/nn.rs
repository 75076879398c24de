//! Parametric layers of the model and their exact backward passes.
//!
//! The forward pass for one (image, question, answer) example is recorded
//! into a [`Trace`]; [`backward`] replays it in reverse, running
//! backpropagation through time over both recurrent paths. Shared tensors
//! (the embedding table under transposed weight sharing, the single LSTM
//! cell of the shared-LSTM variant) own exactly one gradient buffer, so
//! every use site accumulates into it.

use rand::Rng;

use crate::error::{MqaError, Result};
use crate::model::{MqaConfig, Variant};
use crate::numerics::{
    add_assign, add_outer, axpy, matvec_add_into, matvec_t_add_into, relu, scaled_tanh,
    scaled_tanh_deriv_from_output, sigmoid, softmax_in_place, Matrix, Vector,
};
use crate::vocab::{TokenId, EOA_ID};

/// Which LSTM quantity is read out as the sentence / answer-context code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateSource {
    #[default]
    Hidden,
    Cell,
}

impl StateSource {
    pub fn as_str(self) -> &'static str {
        match self {
            StateSource::Hidden => "hidden",
            StateSource::Cell => "cell",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hidden" | "h" => Ok(StateSource::Hidden),
            "cell" | "c" => Ok(StateSource::Cell),
            other => Err(MqaError::Config(format!("unknown state source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `N × d_embed`; row `k` is the dense code of token `k`.
    pub weights: Matrix,
}

impl EmbeddingTable {
    pub fn embed(&self, id: TokenId) -> Result<&[f64]> {
        if id >= self.weights.rows() {
            return Err(MqaError::TokenOutOfRange {
                id,
                n: self.weights.rows(),
            });
        }
        Ok(self.weights.row(id))
    }
}

/// `W x + U h + b` for one gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
}

impl Gate {
    fn zeros(d_in: usize, d_hidden: usize) -> Self {
        Gate {
            w: Matrix::zeros(d_hidden, d_in),
            u: Matrix::zeros(d_hidden, d_hidden),
            b: vec![0.0; d_hidden],
        }
    }

    #[inline]
    fn preactivation(&self, x: &[f64], h: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        matvec_add_into(&self.w, x, out);
        matvec_add_into(&self.u, h, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub candidate: Gate,
}

impl LstmCell {
    pub fn zeros(d_in: usize, d_hidden: usize) -> Self {
        LstmCell {
            input: Gate::zeros(d_in, d_hidden),
            forget: Gate::zeros(d_in, d_hidden),
            output: Gate::zeros(d_in, d_hidden),
            candidate: Gate::zeros(d_in, d_hidden),
        }
    }

    pub fn d_in(&self) -> usize {
        self.input.w.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.input.w.rows()
    }

    fn gates(&self) -> [(&'static str, &Gate); 4] {
        [
            ("input", &self.input),
            ("forget", &self.forget),
            ("output", &self.output),
            ("candidate", &self.candidate),
        ]
    }

    fn gates_mut(&mut self) -> [(&'static str, &mut Gate); 4] {
        [
            ("input", &mut self.input),
            ("forget", &mut self.forget),
            ("output", &mut self.output),
            ("candidate", &mut self.candidate),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(d_hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; d_hidden],
            c: vec![0.0; d_hidden],
        }
    }

    pub fn read(&self, source: StateSource) -> &[f64] {
        match source {
            StateSource::Hidden => &self.h,
            StateSource::Cell => &self.c,
        }
    }
}

/// Everything one LSTM step needs for its backward pass.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    pub cand: Vector,
    pub c: Vector,
    pub h: Vector,
}

pub(crate) fn lstm_step_cached(
    p: &LstmCell,
    s: &LstmState,
    x: &[f64],
    step: usize,
) -> Result<LstmStepCache> {
    if x.len() != p.d_in() || s.h.len() != p.d_hidden() || s.c.len() != p.d_hidden() {
        return Err(MqaError::shape(
            "lstm_step",
            format!("cell {}->{}", p.d_in(), p.d_hidden()),
            format!("x {}, h {}, c {}", x.len(), s.h.len(), s.c.len()),
        ));
    }
    let d = p.d_hidden();
    let mut i = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut o = vec![0.0; d];
    let mut cand = vec![0.0; d];
    p.input.preactivation(x, &s.h, &mut i);
    p.forget.preactivation(x, &s.h, &mut f);
    p.output.preactivation(x, &s.h, &mut o);
    p.candidate.preactivation(x, &s.h, &mut cand);
    let mut c = vec![0.0; d];
    let mut h = vec![0.0; d];
    for k in 0..d {
        i[k] = sigmoid(i[k]);
        f[k] = sigmoid(f[k]);
        o[k] = sigmoid(o[k]);
        cand[k] = relu(cand[k]);
        c[k] = f[k] * s.c[k] + i[k] * cand[k];
        h[k] = o[k] * c[k];
    }
    if !c.iter().chain(&h).all(|v| v.is_finite()) {
        return Err(MqaError::NonFinite {
            what: "lstm state",
            step,
        });
    }
    Ok(LstmStepCache {
        x: x.to_vec(),
        h_prev: s.h.clone(),
        c_prev: s.c.clone(),
        i,
        f,
        o,
        cand,
        c,
        h,
    })
}

/// One LSTM step. Gates are sigmoids, the candidate path is ReLU, and the
/// output is `o ⊙ c` with no second nonlinearity.
pub fn lstm_step(p: &LstmCell, s: &LstmState, x: &[f64]) -> Result<LstmState> {
    let cache = lstm_step_cached(p, s, x, 0)?;
    Ok(LstmState {
        h: cache.h,
        c: cache.c,
    })
}

/// Reverse of one LSTM step. `dh`/`dc` are the total upstream gradients on
/// the step's outputs. Accumulates parameter gradients into `g`, adds the
/// input gradient into `dx` and returns `(dh_prev, dc_prev)`.
pub(crate) fn lstm_step_backward(
    p: &LstmCell,
    cache: &LstmStepCache,
    dh: &[f64],
    dc: &[f64],
    g: &mut LstmCell,
    dx: &mut [f64],
) -> (Vector, Vector) {
    let d = p.d_hidden();
    let mut dpre_i = vec![0.0; d];
    let mut dpre_f = vec![0.0; d];
    let mut dpre_o = vec![0.0; d];
    let mut dpre_c = vec![0.0; d];
    let mut dc_prev = vec![0.0; d];
    for k in 0..d {
        let d_o = dh[k] * cache.c[k];
        let dct = dc[k] + dh[k] * cache.o[k];
        let d_i = dct * cache.cand[k];
        let d_cand = dct * cache.i[k];
        let d_f = dct * cache.c_prev[k];
        dc_prev[k] = dct * cache.f[k];
        dpre_i[k] = d_i * cache.i[k] * (1.0 - cache.i[k]);
        dpre_f[k] = d_f * cache.f[k] * (1.0 - cache.f[k]);
        dpre_o[k] = d_o * cache.o[k] * (1.0 - cache.o[k]);
        dpre_c[k] = if cache.cand[k] > 0.0 { d_cand } else { 0.0 };
    }
    let mut dh_prev = vec![0.0; d];
    let pairs = [
        (&p.input, &mut g.input, &dpre_i),
        (&p.forget, &mut g.forget, &dpre_f),
        (&p.output, &mut g.output, &dpre_o),
        (&p.candidate, &mut g.candidate, &dpre_c),
    ];
    for (gate, grad, dpre) in pairs {
        add_outer(&mut grad.w, dpre, &cache.x);
        add_outer(&mut grad.u, dpre, &cache.h_prev);
        add_assign(&mut grad.b, dpre);
        matvec_t_add_into(&gate.w, dpre, dx);
        matvec_t_add_into(&gate.u, dpre, &mut dh_prev);
    }
    (dh_prev, dc_prev)
}

/// Projections of the fusing layer. `v_i` is absent for the image-free model.
#[derive(Debug, Clone, PartialEq)]
pub struct FusingParams {
    pub v_rq: Matrix,
    pub v_i: Option<Matrix>,
    pub v_ra: Matrix,
    pub v_w: Matrix,
    pub b: Vector,
}

impl FusingParams {
    pub fn d_fuse(&self) -> usize {
        self.b.len()
    }
}

/// `f = g(V_rQ r_Q + V_I I + V_rA r_A + V_w w + b)` with `g` the scaled tanh.
pub fn fuse(
    p: &FusingParams,
    r_q: &[f64],
    image: Option<&[f64]>,
    r_a: &[f64],
    w: &[f64],
) -> Result<Vector> {
    let mut out = fuse_preactivation(p, r_q, image, r_a, w)?;
    out.iter_mut().for_each(|x| *x = scaled_tanh(*x));
    Ok(out)
}

fn fuse_preactivation(
    p: &FusingParams,
    r_q: &[f64],
    image: Option<&[f64]>,
    r_a: &[f64],
    w: &[f64],
) -> Result<Vector> {
    let check = |name: &'static str, m: &Matrix, v: &[f64]| {
        if m.cols() != v.len() || m.rows() != p.d_fuse() {
            Err(MqaError::shape(
                name,
                format!("{}x{}", m.rows(), m.cols()),
                format!("vector of len {}", v.len()),
            ))
        } else {
            Ok(())
        }
    };
    check("fuse: V_rQ", &p.v_rq, r_q)?;
    check("fuse: V_rA", &p.v_ra, r_a)?;
    check("fuse: V_w", &p.v_w, w)?;
    let mut out = p.b.clone();
    matvec_add_into(&p.v_rq, r_q, &mut out);
    if let Some(v_i) = &p.v_i {
        let img = image.ok_or_else(|| {
            MqaError::shape(
                "fuse: V_I",
                format!("{}x{}", v_i.rows(), v_i.cols()),
                "no image",
            )
        })?;
        check("fuse: V_I", v_i, img)?;
        matvec_add_into(v_i, img, &mut out);
    }
    matvec_add_into(&p.v_ra, r_a, &mut out);
    matvec_add_into(&p.v_w, w, &mut out);
    Ok(out)
}

/// Maps the fused code back to word-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateParams {
    pub v_m: Matrix,
    pub b: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Logits use the transposed embedding table.
    Tws,
    /// Logits use a separate `N × d_embed` matrix.
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    pub free_weights: Option<Matrix>,
    pub bias: Vector,
}

impl DecoderHead {
    pub fn mode(&self) -> HeadMode {
        if self.free_weights.is_some() {
            HeadMode::Free
        } else {
            HeadMode::Tws
        }
    }

    fn weights<'a>(&'a self, table: &'a EmbeddingTable) -> &'a Matrix {
        self.free_weights.as_ref().unwrap_or(&table.weights)
    }
}

/// Next-word distribution from the intermediate-layer code `m`.
pub fn decode_distribution(
    head: &DecoderHead,
    table: &EmbeddingTable,
    m: &[f64],
) -> Result<Vector> {
    let w = head.weights(table);
    if w.cols() != m.len() || w.rows() != head.bias.len() {
        return Err(MqaError::shape(
            "decode_distribution",
            format!("{}x{}", w.rows(), w.cols()),
            format!("code len {}, bias len {}", m.len(), head.bias.len()),
        ));
    }
    let mut logits = head.bias.clone();
    matvec_add_into(w, m, &mut logits);
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// How the question is turned into `r_Q`.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum QuestionEncoder {
    /// A dedicated LSTM(Q).
    Lstm(LstmCell),
    /// LSTM(Q) is the answer cell.
    SharedLstm,
    /// Mean of the question's word embeddings.
    Average,
}

/// All learned tensors of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embedding: EmbeddingTable,
    pub question: QuestionEncoder,
    pub lstm_a: LstmCell,
    pub fusing: FusingParams,
    pub intermediate: IntermediateParams,
    pub head: DecoderHead,
}

/// Gradients share the parameter layout.
pub type GradientSet = Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

pub struct TensorRef<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub data: &'a mut [f64],
}

impl Params {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &MqaConfig) -> Self {
        let (n, de, dh, df, di) = (cfg.n, cfg.d_embed, cfg.d_hidden, cfg.d_fuse, cfg.d_img);
        let question = match cfg.variant {
            Variant::AvgQuestion => QuestionEncoder::Average,
            Variant::SameLstms => QuestionEncoder::SharedLstm,
            _ => QuestionEncoder::Lstm(LstmCell::zeros(de, dh)),
        };
        let d_rq = if cfg.variant == Variant::AvgQuestion {
            de
        } else {
            dh
        };
        Params {
            embedding: EmbeddingTable {
                weights: Matrix::zeros(n, de),
            },
            question,
            lstm_a: LstmCell::zeros(de, dh),
            fusing: FusingParams {
                v_rq: Matrix::zeros(df, d_rq),
                v_i: (cfg.variant != Variant::Blind).then(|| Matrix::zeros(df, di)),
                v_ra: Matrix::zeros(df, dh),
                v_w: Matrix::zeros(df, de),
                b: vec![0.0; df],
            },
            intermediate: IntermediateParams {
                v_m: Matrix::zeros(de, df),
                b: vec![0.0; de],
            },
            head: DecoderHead {
                free_weights: (cfg.variant == Variant::NoTws).then(|| Matrix::zeros(n, de)),
                bias: vec![0.0; n],
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Weights uniform in `[-scale, scale]`, biases zero, drawn in tensor
    /// declaration order.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for t in self.tensors_mut() {
            match t.kind {
                TensorKind::Weight => {
                    for x in t.data.iter_mut() {
                        *x = rng.gen_range(-scale..=scale);
                    }
                }
                TensorKind::Bias => t.data.iter_mut().for_each(|x| *x = 0.0),
            }
        }
    }

    /// The cell that encodes questions, if the question path is recurrent.
    pub fn question_cell(&self) -> Option<&LstmCell> {
        match &self.question {
            QuestionEncoder::Lstm(c) => Some(c),
            QuestionEncoder::SharedLstm => Some(&self.lstm_a),
            QuestionEncoder::Average => None,
        }
    }

    fn answer_cell_name(&self) -> &'static str {
        match self.question {
            QuestionEncoder::SharedLstm => "lstm_shared",
            _ => "lstm_a",
        }
    }

    /// Tensors in declaration order; this order defines checkpoint layout and
    /// initialization order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        use TensorKind::*;
        let mut out = Vec::new();
        let mut push = |name: String, kind, data| out.push(TensorRef { name, kind, data });
        push("embedding".into(), Weight, self.embedding.weights.data());
        let cells = match &self.question {
            QuestionEncoder::Lstm(cell) => {
                vec![("lstm_q", cell), (self.answer_cell_name(), &self.lstm_a)]
            }
            _ => vec![(self.answer_cell_name(), &self.lstm_a)],
        };
        for (prefix, cell) in cells {
            for (g, gate) in cell.gates() {
                push(format!("{prefix}.{g}.w"), Weight, gate.w.data());
                push(format!("{prefix}.{g}.u"), Weight, gate.u.data());
                push(format!("{prefix}.{g}.b"), Bias, &gate.b);
            }
        }
        push("fusing.v_rq".into(), Weight, self.fusing.v_rq.data());
        if let Some(v_i) = &self.fusing.v_i {
            push("fusing.v_i".into(), Weight, v_i.data());
        }
        push("fusing.v_ra".into(), Weight, self.fusing.v_ra.data());
        push("fusing.v_w".into(), Weight, self.fusing.v_w.data());
        push("fusing.b".into(), Bias, &self.fusing.b);
        push(
            "intermediate.v_m".into(),
            Weight,
            self.intermediate.v_m.data(),
        );
        push("intermediate.b".into(), Bias, &self.intermediate.b);
        if let Some(w) = &self.head.free_weights {
            push("head.free".into(), Weight, w.data());
        }
        push("head.bias".into(), Bias, &self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        use TensorKind::*;
        let a = self.answer_cell_name();
        let mut out = Vec::new();
        out.push(TensorMut {
            name: "embedding".into(),
            kind: Weight,
            data: self.embedding.weights.data_mut(),
        });
        if let QuestionEncoder::Lstm(cell) = &mut self.question {
            push_cell_mut(&mut out, "lstm_q", cell);
        }
        push_cell_mut(&mut out, a, &mut self.lstm_a);
        let f = &mut self.fusing;
        out.push(TensorMut {
            name: "fusing.v_rq".into(),
            kind: Weight,
            data: f.v_rq.data_mut(),
        });
        if let Some(v_i) = &mut f.v_i {
            out.push(TensorMut {
                name: "fusing.v_i".into(),
                kind: Weight,
                data: v_i.data_mut(),
            });
        }
        out.push(TensorMut {
            name: "fusing.v_ra".into(),
            kind: Weight,
            data: f.v_ra.data_mut(),
        });
        out.push(TensorMut {
            name: "fusing.v_w".into(),
            kind: Weight,
            data: f.v_w.data_mut(),
        });
        out.push(TensorMut {
            name: "fusing.b".into(),
            kind: Bias,
            data: &mut f.b,
        });
        out.push(TensorMut {
            name: "intermediate.v_m".into(),
            kind: Weight,
            data: self.intermediate.v_m.data_mut(),
        });
        out.push(TensorMut {
            name: "intermediate.b".into(),
            kind: Bias,
            data: &mut self.intermediate.b,
        });
        if let Some(w) = &mut self.head.free_weights {
            out.push(TensorMut {
                name: "head.free".into(),
                kind: Weight,
                data: w.data_mut(),
            });
        }
        out.push(TensorMut {
            name: "head.bias".into(),
            kind: Bias,
            data: &mut self.head.bias,
        });
        out
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `self += alpha · other`; layouts must match.
    pub fn axpy(&mut self, alpha: f64, other: &Params) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(MqaError::shape("Params::axpy", dst.len(), src.len()));
        }
        for (d, s) in dst.iter_mut().zip(&src) {
            if d.name != s.name || d.data.len() != s.data.len() {
                return Err(MqaError::shape("Params::axpy", &d.name, &s.name));
            }
            axpy(alpha, s.data, d.data);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

fn push_cell_mut<'a>(out: &mut Vec<TensorMut<'a>>, prefix: &str, cell: &'a mut LstmCell) {
    for (g, gate) in cell.gates_mut() {
        out.push(TensorMut {
            name: format!("{prefix}.{g}.w"),
            kind: TensorKind::Weight,
            data: gate.w.data_mut(),
        });
        out.push(TensorMut {
            name: format!("{prefix}.{g}.u"),
            kind: TensorKind::Weight,
            data: gate.u.data_mut(),
        });
        out.push(TensorMut {
            name: format!("{prefix}.{g}.b"),
            kind: TensorKind::Bias,
            data: &mut gate.b,
        });
    }
}

/// Forward record of one answer position.
#[derive(Debug, Clone)]
pub struct AnswerStepCache {
    pub input: TokenId,
    pub lstm: LstmStepCache,
    /// Fusing-layer activation `f(t)`.
    pub f: Vector,
    /// Intermediate-layer activation.
    pub m: Vector,
    pub probs: Vector,
}

impl AnswerStepCache {
    pub fn state(&self) -> LstmState {
        LstmState {
            h: self.lstm.h.clone(),
            c: self.lstm.c.clone(),
        }
    }
}

/// Runs one answer position from `prev` given the previous word.
pub fn answer_step_cached(
    params: &Params,
    source: StateSource,
    r_q: &[f64],
    image: Option<&[f64]>,
    prev: &LstmState,
    word: TokenId,
    step: usize,
) -> Result<AnswerStepCache> {
    let w = params.embedding.embed(word)?;
    let lstm = lstm_step_cached(&params.lstm_a, prev, w, step)?;
    let r_a = match source {
        StateSource::Hidden => &lstm.h,
        StateSource::Cell => &lstm.c,
    };
    let f = fuse(&params.fusing, r_q, image, r_a, w)?;
    let mut m = params.intermediate.b.clone();
    matvec_add_into(&params.intermediate.v_m, &f, &mut m);
    m.iter_mut().for_each(|x| *x = scaled_tanh(*x));
    let probs = decode_distribution(&params.head, &params.embedding, &m)?;
    Ok(AnswerStepCache {
        input: word,
        lstm,
        f,
        m,
        probs,
    })
}

#[derive(Debug, Clone)]
pub enum QuestionTrace {
    Recurrent(Vec<LstmStepCache>),
    Average,
}

/// Encodes a question into `r_Q`, recording what the backward pass needs.
pub fn encode_question_cached(
    params: &Params,
    source: StateSource,
    question: &[TokenId],
) -> Result<(Vector, QuestionTrace)> {
    if question.is_empty() {
        return Err(MqaError::Empty("question"));
    }
    match params.question_cell() {
        Some(cell) => {
            let mut state = LstmState::zeros(cell.d_hidden());
            let mut steps = Vec::with_capacity(question.len());
            for (t, &id) in question.iter().enumerate() {
                let x = params.embedding.embed(id)?;
                let cache = lstm_step_cached(cell, &state, x, t)?;
                state = LstmState {
                    h: cache.h.clone(),
                    c: cache.c.clone(),
                };
                steps.push(cache);
            }
            Ok((state.read(source).to_vec(), QuestionTrace::Recurrent(steps)))
        }
        None => {
            let de = params.embedding.weights.cols();
            let mut mean = vec![0.0; de];
            for &id in question {
                add_assign(&mut mean, params.embedding.embed(id)?);
            }
            let inv = 1.0 / question.len() as f64;
            mean.iter_mut().for_each(|x| *x *= inv);
            Ok((mean, QuestionTrace::Average))
        }
    }
}

/// Cached forward pass of one teacher-forced example.
#[derive(Debug, Clone)]
pub struct Trace {
    pub source: StateSource,
    pub question_ids: Vec<TokenId>,
    pub question: QuestionTrace,
    pub r_q: Vector,
    pub image: Option<Vector>,
    pub steps: Vec<AnswerStepCache>,
    /// Target of each step: the answer shifted by one, then `⟨EOA⟩`.
    pub targets: Vec<TokenId>,
    /// Total negative log-likelihood of the targets.
    pub loss: f64,
}

/// Teacher-forced forward pass: inputs `⟨BOA⟩ a₁ … a_T`, targets `a₁ … a_T ⟨EOA⟩`.
pub fn forward(
    params: &Params,
    source: StateSource,
    question: &[TokenId],
    image: Option<&[f64]>,
    answer: &[TokenId],
) -> Result<Trace> {
    if answer.is_empty() {
        return Err(MqaError::Empty("answer"));
    }
    let (r_q, qtrace) = encode_question_cached(params, source, question)?;
    let image = if params.fusing.v_i.is_some() {
        image
    } else {
        None
    };
    let d_hidden = params.lstm_a.d_hidden();
    let mut state = LstmState::zeros(d_hidden);
    let mut steps = Vec::with_capacity(answer.len() + 1);
    let mut targets = Vec::with_capacity(answer.len() + 1);
    let mut loss = 0.0;
    let inputs = std::iter::once(crate::vocab::BOA_ID).chain(answer.iter().copied());
    let outs = answer.iter().copied().chain(std::iter::once(EOA_ID));
    for (t, (input, target)) in inputs.zip(outs).enumerate() {
        let step = answer_step_cached(params, source, &r_q, image, &state, input, t)?;
        if target >= step.probs.len() {
            return Err(MqaError::TokenOutOfRange {
                id: target,
                n: step.probs.len(),
            });
        }
        loss -= step.probs[target].ln();
        state = step.state();
        steps.push(step);
        targets.push(target);
    }
    Ok(Trace {
        source,
        question_ids: question.to_vec(),
        question: qtrace,
        r_q,
        image: image.map(<[f64]>::to_vec),
        steps,
        targets,
        loss,
    })
}

/// Gradient of `loss_grad · trace.loss` with respect to every parameter.
pub fn backward(params: &Params, trace: &Trace, loss_grad: f64) -> Result<GradientSet> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, loss_grad, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into an existing gradient buffer.
pub fn backward_into(
    params: &Params,
    trace: &Trace,
    loss_grad: f64,
    grads: &mut GradientSet,
) -> Result<()> {
    check_trace(params, trace)?;
    let Params {
        embedding: g_emb,
        question: g_question,
        lstm_a: g_lstm_a,
        fusing: g_fuse,
        intermediate: g_mid,
        head: g_head,
    } = grads;
    let d_hidden = params.lstm_a.d_hidden();
    let d_embed = params.embedding.weights.cols();
    let head_w = params.head.weights(&params.embedding);

    let mut d_rq = vec![0.0; trace.r_q.len()];
    let mut dh_carry = vec![0.0; d_hidden];
    let mut dc_carry = vec![0.0; d_hidden];
    let mut dlogits = vec![0.0; params.head.bias.len()];
    let mut dm = vec![0.0; d_embed];
    let mut dpre_f = vec![0.0; params.fusing.d_fuse()];
    let mut d_ra = vec![0.0; d_hidden];
    let mut dx = vec![0.0; d_embed];

    for (step, &target) in trace.steps.iter().zip(&trace.targets).rev() {
        // softmax + log-likelihood
        for (d, &p) in dlogits.iter_mut().zip(&step.probs) {
            *d = loss_grad * p;
        }
        dlogits[target] -= loss_grad;
        add_assign(&mut g_head.bias, &dlogits);
        match &mut g_head.free_weights {
            Some(gw) => add_outer(gw, &dlogits, &step.m),
            None => add_outer(&mut g_emb.weights, &dlogits, &step.m),
        }
        dm.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_add_into(head_w, &dlogits, &mut dm);

        // intermediate layer
        for (d, &m) in dm.iter_mut().zip(&step.m) {
            *d *= scaled_tanh_deriv_from_output(m);
        }
        add_outer(&mut g_mid.v_m, &dm, &step.f);
        add_assign(&mut g_mid.b, &dm);
        dpre_f.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_add_into(&params.intermediate.v_m, &dm, &mut dpre_f);

        // fusing layer
        for (d, &f) in dpre_f.iter_mut().zip(&step.f) {
            *d *= scaled_tanh_deriv_from_output(f);
        }
        let r_a = match trace.source {
            StateSource::Hidden => &step.lstm.h,
            StateSource::Cell => &step.lstm.c,
        };
        add_outer(&mut g_fuse.v_rq, &dpre_f, &trace.r_q);
        matvec_t_add_into(&params.fusing.v_rq, &dpre_f, &mut d_rq);
        if let (Some(g_vi), Some(img)) = (&mut g_fuse.v_i, &trace.image) {
            add_outer(g_vi, &dpre_f, img);
        }
        add_outer(&mut g_fuse.v_ra, &dpre_f, r_a);
        add_outer(&mut g_fuse.v_w, &dpre_f, &step.lstm.x);
        add_assign(&mut g_fuse.b, &dpre_f);
        d_ra.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_add_into(&params.fusing.v_ra, &dpre_f, &mut d_ra);
        // the word embedding feeds both the fusing layer and LSTM(A)
        dx.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_add_into(&params.fusing.v_w, &dpre_f, &mut dx);

        // answer LSTM, through time
        match trace.source {
            StateSource::Hidden => add_assign(&mut dh_carry, &d_ra),
            StateSource::Cell => add_assign(&mut dc_carry, &d_ra),
        }
        let (dh_prev, dc_prev) = lstm_step_backward(
            &params.lstm_a,
            &step.lstm,
            &dh_carry,
            &dc_carry,
            g_lstm_a,
            &mut dx,
        );
        dh_carry = dh_prev;
        dc_carry = dc_prev;
        add_assign(g_emb.weights.row_mut(step.input), &dx);
    }

    match (&trace.question, params.question_cell()) {
        (QuestionTrace::Recurrent(steps), Some(cell)) => {
            let g_cell = match g_question {
                QuestionEncoder::Lstm(c) => c,
                _ => g_lstm_a,
            };
            let mut dh = vec![0.0; d_hidden];
            let mut dc = vec![0.0; d_hidden];
            match trace.source {
                StateSource::Hidden => dh.copy_from_slice(&d_rq),
                StateSource::Cell => dc.copy_from_slice(&d_rq),
            }
            for (cache, &id) in steps.iter().zip(&trace.question_ids).rev() {
                dx.iter_mut().for_each(|x| *x = 0.0);
                let (dh_prev, dc_prev) = lstm_step_backward(cell, cache, &dh, &dc, g_cell, &mut dx);
                add_assign(g_emb.weights.row_mut(id), &dx);
                dh = dh_prev;
                dc = dc_prev;
            }
        }
        (QuestionTrace::Average, None) => {
            let inv = 1.0 / trace.question_ids.len() as f64;
            for &id in &trace.question_ids {
                axpy(inv, &d_rq, g_emb.weights.row_mut(id));
            }
        }
        _ => return Err(MqaError::TraceMismatch("question encoder kind".into())),
    }
    Ok(())
}

fn check_trace(params: &Params, trace: &Trace) -> Result<()> {
    if trace.steps.is_empty() || trace.steps.len() != trace.targets.len() {
        return Err(MqaError::TraceMismatch(
            "trace holds no answer steps".into(),
        ));
    }
    if trace.r_q.len() != params.fusing.v_rq.cols() {
        return Err(MqaError::TraceMismatch(format!(
            "r_Q has len {}, V_rQ expects {}",
            trace.r_q.len(),
            params.fusing.v_rq.cols()
        )));
    }
    let n = params.head.bias.len();
    let d_hidden = params.lstm_a.d_hidden();
    for s in &trace.steps {
        if s.probs.len() != n || s.lstm.h.len() != d_hidden || s.input >= n {
            return Err(MqaError::TraceMismatch("answer step shapes".into()));
        }
    }
    if let QuestionTrace::Recurrent(steps) = &trace.question {
        if steps.len() != trace.question_ids.len() {
            return Err(MqaError::TraceMismatch("question length".into()));
        }
    }
    Ok(())
}
