//! Encoder, enrolment attention and classifier, trained end-to-end.
//!
//! A single encoder embeds the target utterance and every enrolment
//! utterance. The target embedding queries the enrolment embeddings (keys and
//! values) with scaled dot-product attention; the context is added back to
//! the target embedding and the sum goes through an MLP classifier. The Base
//! variant has no enrolment and skips attention.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    build_enrolment_sets, select_enrolment, Corpus, Enrolment, EnrolmentSet, Slot, Split,
    Utterance, Variant,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fairness::{uar, PredictionRecord};
use crate::numerics::{
    attention_backward, cross_entropy, linear_backward, linear_forward, scaled_dot_attention,
    AdamState, AttentionOutput, Matrix,
};

pub const MODEL_MAGIC: &str = "fairser-model v1";

/// Mixed into the seed so weight init and batch shuffling draw from
/// different streams.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_in: usize,
    pub d_emb: usize,
    pub encoder_hidden: Vec<usize>,
    pub heads: usize,
    pub use_projections: bool,
    pub classifier_hidden: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, d_in: usize, classes: usize) -> Self {
        ModelConfig {
            variant,
            d_in,
            d_emb: 32,
            encoder_hidden: vec![64],
            heads: 1,
            use_projections: false,
            classifier_hidden: vec![32],
            classes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("model needs at least 2 classes"));
        }
        if self.d_in == 0 || self.d_emb == 0 {
            return Err(Error::invalid(
                "input and embedding dimensions must be >= 1",
            ));
        }
        if self.encoder_hidden.contains(&0) || self.classifier_hidden.contains(&0) {
            return Err(Error::invalid("hidden layer sizes must be >= 1"));
        }
        if self.heads == 0 {
            return Err(Error::invalid("heads must be >= 1"));
        }
        if self.use_projections && !self.d_emb.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "embedding dim {} not divisible by {} heads",
                self.d_emb, self.heads
            )));
        }
        if !self.use_projections && self.heads != 1 {
            return Err(Error::invalid("multiple heads require projections"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hparams {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Put enrolment utterances back into the training and dev pools.
    pub include_enrolled: bool,
}

impl Default for Hparams {
    fn default() -> Self {
        Hparams {
            epochs: 50,
            lr: 1e-4,
            batch: 4,
            include_enrolled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    /// `1 x out`
    pub b: Matrix,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            w: Matrix::from_vec(fan_in, fan_out, w).expect("shape"),
            b: Matrix::zeros(1, fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: Matrix::zeros(1, self.b.cols()),
        }
    }
}

/// Feed-forward stack with tanh between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

struct MlpCache {
    /// Input of each layer; `inputs[l + 1]` is the tanh output of layer `l`.
    inputs: Vec<Matrix>,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, hidden: &[usize], d_out: usize) -> Self {
        let mut sizes = vec![d_in];
        sizes.extend_from_slice(hidden);
        sizes.push(d_out);
        Mlp {
            layers: sizes
                .windows(2)
                .map(|w| Linear::init(rng, w[0], w[1]))
                .collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = linear_forward(&h, &layer.w, layer.b.data())?;
            if l < last {
                z.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(h);
            h = z;
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Accumulates parameter gradients into `grads`, returns `dL/dx`.
    fn backward(&self, cache: &MlpCache, grad_out: Matrix, grads: &mut Mlp) -> Result<Matrix> {
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                let act = &cache.inputs[l + 1];
                for (gv, a) in g.data_mut().iter_mut().zip(act.data()) {
                    *gv *= 1.0 - a * a;
                }
            }
            let lg = linear_backward(&cache.inputs[l], &self.layers[l].w, &g)?;
            grads.layers[l].w.add_assign(&lg.w)?;
            for (gb, v) in grads.layers[l].b.data_mut().iter_mut().zip(&lg.b) {
                *gb += v;
            }
            g = lg.x;
        }
        Ok(g)
    }
}

/// Per-head query/key/value projections and the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: Mlp,
    pub projections: Option<Projections>,
    pub classifier: Mlp,
}

impl Params {
    fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = Mlp::init(&mut rng, cfg.d_in, &cfg.encoder_hidden, cfg.d_emb);
        let projections = cfg.use_projections.then(|| {
            let mut sq = || Linear::init(&mut rng, cfg.d_emb, cfg.d_emb).w;
            Projections {
                wq: sq(),
                wk: sq(),
                wv: sq(),
                wo: sq(),
            }
        });
        let classifier = Mlp::init(&mut rng, cfg.d_emb, &cfg.classifier_hidden, cfg.classes);
        Params {
            encoder,
            projections,
            classifier,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            encoder: self.encoder.zeros_like(),
            projections: self.projections.as_ref().map(|p| Projections {
                wq: Matrix::zeros(p.wq.rows(), p.wq.cols()),
                wk: Matrix::zeros(p.wk.rows(), p.wk.cols()),
                wv: Matrix::zeros(p.wv.rows(), p.wv.cols()),
                wo: Matrix::zeros(p.wo.rows(), p.wo.cols()),
            }),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Named tensors in serialisation order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.w));
            out.push((format!("encoder.{i}.bias"), &l.b));
        }
        if let Some(p) = &self.projections {
            out.push(("attention.wq".into(), &p.wq));
            out.push(("attention.wk".into(), &p.wk));
            out.push(("attention.wv".into(), &p.wv));
            out.push(("attention.wo".into(), &p.wo));
        }
        for (i, l) in self.classifier.layers.iter().enumerate() {
            out.push((format!("classifier.{i}.weight"), &l.w));
            out.push((format!("classifier.{i}.bias"), &l.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        if let Some(p) = &mut self.projections {
            out.extend([&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo]);
        }
        for l in &mut self.classifier.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::dim(self.len(), flat.len(), "flat parameter vector"));
        }
        let mut off = 0;
        for m in self.tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn scale(&mut self, s: f64) {
        for m in self.tensors_mut() {
            m.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    fn add_assign(&mut self, other: &Params) -> Result<()> {
        let src: Vec<Matrix> = other
            .tensors()
            .into_iter()
            .map(|(_, m)| m.clone())
            .collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            dst.add_assign(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_uar: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
}

impl TrainLog {
    /// First epoch with the highest dev UAR.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<&EpochLog> = None;
        for e in &self.epochs {
            if best.is_none_or(|b| e.dev_uar > b.dev_uar) {
                best = Some(e);
            }
        }
        best.map(|e| e.epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_uar_c,selected\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.dev_uar,
                u8::from(e.epoch == self.selected_epoch)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    /// Selected epoch and per-epoch dev UAR, empty before training.
    pub best_epoch: Option<usize>,
    pub dev_uar: Vec<f64>,
}

struct PersonaliseCache {
    kind: AttentionCache,
}

enum AttentionCache {
    Bypass,
    Plain(AttentionOutput),
    Projected {
        q: Vec<f64>,
        keys: Matrix,
        values: Matrix,
        heads: Vec<(Matrix, Matrix, AttentionOutput)>,
        context: Matrix,
    },
}

struct ForwardCache {
    encoder: MlpCache,
    /// Row 0 is the target embedding, rows 1.. the enrolment embeddings.
    embeddings: Matrix,
    personalise: PersonaliseCache,
    classifier: MlpCache,
}

fn column_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn set_column_block(dst: &mut Matrix, start: usize, block: &Matrix) {
    for r in 0..block.rows() {
        dst.row_mut(r)[start..start + block.cols()].copy_from_slice(block.row(r));
    }
}

fn enrolment_rows(embeddings: &Matrix) -> Matrix {
    let cols = embeddings.cols();
    Matrix::from_vec(
        embeddings.rows() - 1,
        cols,
        embeddings.data()[cols..].to_vec(),
    )
    .expect("shape")
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(ModelState {
            config,
            params,
            best_epoch: None,
            dev_uar: Vec::new(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.config.d_in {
            return Err(Error::dim(
                self.config.d_in,
                features.len(),
                "input features",
            ));
        }
        Ok(())
    }

    /// Embedding of one feature vector. Target and enrolment inputs use the
    /// same weights.
    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        let (e, _) = self.params.encoder.forward(&Matrix::row_vector(features))?;
        Ok(e.into_data())
    }

    /// `e_t` plus attention over the enrolment embeddings; `e_t` itself when
    /// there are none.
    pub fn personalise(&self, target: &[f64], enrolment: &Matrix) -> Result<Vec<f64>> {
        let (out, _) = self.personalise_cached(target, enrolment)?;
        Ok(out)
    }

    fn personalise_cached(
        &self,
        target: &[f64],
        enrolment: &Matrix,
    ) -> Result<(Vec<f64>, PersonaliseCache)> {
        let d = self.config.d_emb;
        if target.len() != d {
            return Err(Error::dim(d, target.len(), "target embedding"));
        }
        if enrolment.rows() > 0 && enrolment.cols() != d {
            return Err(Error::dim(d, enrolment.cols(), "enrolment embeddings"));
        }
        if enrolment.rows() == 0 {
            return Ok((
                target.to_vec(),
                PersonaliseCache {
                    kind: AttentionCache::Bypass,
                },
            ));
        }
        match &self.params.projections {
            None => {
                let att = scaled_dot_attention(target, enrolment, enrolment)?;
                let out = target
                    .iter()
                    .zip(&att.context)
                    .map(|(a, b)| a + b)
                    .collect();
                Ok((
                    out,
                    PersonaliseCache {
                        kind: AttentionCache::Plain(att),
                    },
                ))
            }
            Some(p) => {
                let heads = self.config.heads;
                let dh = d / heads;
                let q = Matrix::row_vector(target).matmul(&p.wq)?;
                let keys = enrolment.matmul(&p.wk)?;
                let values = enrolment.matmul(&p.wv)?;
                let mut context = Matrix::zeros(1, d);
                let mut head_cache = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = column_block(&q, h * dh, dh);
                    let kh = column_block(&keys, h * dh, dh);
                    let vh = column_block(&values, h * dh, dh);
                    let att = scaled_dot_attention(qh.data(), &kh, &vh)?;
                    set_column_block(&mut context, h * dh, &Matrix::row_vector(&att.context));
                    head_cache.push((kh, vh, att));
                }
                let proj = context.matmul(&p.wo)?;
                let out = target.iter().zip(proj.data()).map(|(a, b)| a + b).collect();
                Ok((
                    out,
                    PersonaliseCache {
                        kind: AttentionCache::Projected {
                            q: q.into_data(),
                            keys,
                            values,
                            heads: head_cache,
                            context,
                        },
                    },
                ))
            }
        }
    }

    /// Returns `(dL/dtarget, dL/denrolment)` and accumulates projection grads.
    fn personalise_backward(
        &self,
        target: &[f64],
        enrolment: &Matrix,
        cache: &PersonaliseCache,
        grad_out: &[f64],
        grads: &mut Params,
    ) -> Result<(Vec<f64>, Matrix)> {
        let d = self.config.d_emb;
        let mut g_target = grad_out.to_vec();
        let mut g_enrol = Matrix::zeros(enrolment.rows(), d);
        match &cache.kind {
            AttentionCache::Bypass => {}
            AttentionCache::Plain(att) => {
                let g = attention_backward(target, enrolment, enrolment, att, grad_out)?;
                for (a, b) in g_target.iter_mut().zip(&g.query) {
                    *a += b;
                }
                g_enrol.add_assign(&g.keys)?;
                g_enrol.add_assign(&g.values)?;
            }
            AttentionCache::Projected {
                q,
                keys,
                values,
                heads,
                context,
            } => {
                let p = self
                    .params
                    .projections
                    .as_ref()
                    .expect("projected cache implies projections");
                let gp = grads.projections.as_mut().expect("grads mirror params");
                let g_out = Matrix::row_vector(grad_out);
                gp.wo.add_assign(&context.transpose().matmul(&g_out)?)?;
                let g_context = g_out.matmul(&p.wo.transpose())?;

                let dh = d / self.config.heads;
                let mut g_q = Matrix::zeros(1, d);
                let mut g_keys = Matrix::zeros(keys.rows(), d);
                let mut g_values = Matrix::zeros(values.rows(), d);
                for (h, (kh, vh, att)) in heads.iter().enumerate() {
                    let qh = &q[h * dh..(h + 1) * dh];
                    let gc = &g_context.data()[h * dh..(h + 1) * dh];
                    let g = attention_backward(qh, kh, vh, att, gc)?;
                    set_column_block(&mut g_q, h * dh, &Matrix::row_vector(&g.query));
                    set_column_block(&mut g_keys, h * dh, &g.keys);
                    set_column_block(&mut g_values, h * dh, &g.values);
                }
                let t = Matrix::row_vector(target);
                gp.wq.add_assign(&t.transpose().matmul(&g_q)?)?;
                let et = enrolment.transpose();
                gp.wk.add_assign(&et.matmul(&g_keys)?)?;
                gp.wv.add_assign(&et.matmul(&g_values)?)?;
                for (a, b) in g_target
                    .iter_mut()
                    .zip(g_q.matmul(&p.wq.transpose())?.data())
                {
                    *a += b;
                }
                g_enrol.add_assign(&g_keys.matmul(&p.wk.transpose())?)?;
                g_enrol.add_assign(&g_values.matmul(&p.wv.transpose())?)?;
            }
        }
        Ok((g_target, g_enrol))
    }

    fn forward_cached(
        &self,
        features: &[f64],
        enrolment: &Matrix,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(features)?;
        if enrolment.rows() > 0 && enrolment.cols() != self.config.d_in {
            return Err(Error::dim(
                self.config.d_in,
                enrolment.cols(),
                "enrolment features",
            ));
        }
        let mut stacked = Vec::with_capacity((enrolment.rows() + 1) * self.config.d_in);
        stacked.extend_from_slice(features);
        stacked.extend_from_slice(enrolment.data());
        let stacked = Matrix::from_vec(enrolment.rows() + 1, self.config.d_in, stacked)?;
        let (embeddings, enc_cache) = self.params.encoder.forward(&stacked)?;
        let target = embeddings.row(0);
        let enrol = enrolment_rows(&embeddings);
        let (z, pcache) = self.personalise_cached(target, &enrol)?;
        let (logits, cls_cache) = self.params.classifier.forward(&Matrix::row_vector(&z))?;
        let logits = logits.into_data();
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                encoder: enc_cache,
                embeddings,
                personalise: pcache,
                classifier: cls_cache,
            },
        ))
    }

    /// Class logits from raw features. `enrolment` holds one feature row per
    /// selected slot (zeros for imputed slots) and is empty for Base.
    pub fn logits(&self, features: &[f64], enrolment: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward_cached(features, enrolment)?.0)
    }

    /// Cross-entropy loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        features: &[f64],
        enrolment: &Matrix,
        label: usize,
    ) -> Result<(f64, Params)> {
        let (logits, cache) = self.forward_cached(features, enrolment)?;
        let (loss, g_logits) = cross_entropy(&logits, label)?;
        let mut grads = self.params.zeros_like();
        let g_z = self.params.classifier.backward(
            &cache.classifier,
            Matrix::row_vector(&g_logits),
            &mut grads.classifier,
        )?;
        let enrol = enrolment_rows(&cache.embeddings);
        let (g_target, g_enrol) = self.personalise_backward(
            cache.embeddings.row(0),
            &enrol,
            &cache.personalise,
            g_z.data(),
            &mut grads,
        )?;
        // Both branches flow into the one shared encoder.
        let mut g_emb = Vec::with_capacity(cache.embeddings.data().len());
        g_emb.extend_from_slice(&g_target);
        g_emb.extend_from_slice(g_enrol.data());
        let g_emb = Matrix::from_vec(cache.embeddings.rows(), self.config.d_emb, g_emb)?;
        self.params
            .encoder
            .backward(&cache.encoder, g_emb, &mut grads.encoder)?;
        Ok((loss, grads))
    }

    /// Logits for an utterance given its speaker's enrolment set.
    pub fn forward(
        &self,
        corpus: &Corpus,
        utterance: &Utterance,
        set: &EnrolmentSet,
    ) -> Result<Vec<f64>> {
        if set.speaker != utterance.speaker {
            return Err(Error::invalid(format!(
                "enrolment set of `{}` used for utterance `{}` of `{}`",
                set.speaker, utterance.id, utterance.speaker
            )));
        }
        let index = corpus.index();
        let enrol = enrolment_matrix(
            &index,
            set,
            self.variant(),
            corpus.neutral_class,
            corpus.dim,
        )?;
        self.logits(&utterance.features, &enrol)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = format!("{MODEL_MAGIC}\n[config]\n");
        out.push_str(&format!("variant={}\n", c.variant));
        out.push_str(&format!("d_in={}\n", c.d_in));
        out.push_str(&format!("d_emb={}\n", c.d_emb));
        out.push_str(&format!("encoder_hidden={}\n", join(&c.encoder_hidden)));
        out.push_str(&format!("heads={}\n", c.heads));
        out.push_str(&format!("use_projections={}\n", c.use_projections));
        out.push_str(&format!(
            "classifier_hidden={}\n",
            join(&c.classifier_hidden)
        ));
        out.push_str(&format!("classes={}\n", c.classes));
        out.push_str(&format!("seed={}\n", c.seed));
        out.push_str("[meta]\n");
        out.push_str(&format!(
            "best_epoch={}\n",
            self.best_epoch.map(|e| e.to_string()).unwrap_or_default()
        ));
        let dev: Vec<String> = self.dev_uar.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("dev_uar={}\n", dev.join(";")));
        out.push_str("[tensors]\n");
        for (name, m) in self.params.tensors() {
            out.push_str(&format!("tensor {name} {} {}\n", m.rows(), m.cols()));
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
                out.push_str(&row.join(";"));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&MODEL_MAGIC) {
            return Err(perr(1, format!("expected header `{MODEL_MAGIC}`")));
        }
        let mut kv: HashMap<&str, (usize, &str)> = HashMap::new();
        let mut i = 1;
        while i < lines.len() && lines[i] != "[tensors]" {
            let line = lines[i];
            if !(line.is_empty() || line.starts_with('[')) {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| perr(i + 1, format!("expected key=value, got `{line}`")))?;
                kv.insert(k, (i + 1, v));
            }
            i += 1;
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| perr(0, format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            let (l, v) = get(k)?;
            v.parse()
                .map_err(|_| perr(l, format!("bad integer for `{k}`")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let (l, v) = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| perr(l, format!("bad list for `{k}`")))
                })
                .collect()
        };
        let (vl, variant) = get("variant")?;
        let (pl, proj) = get("use_projections")?;
        let (sl, seed) = get("seed")?;
        let config = ModelConfig {
            variant: variant
                .parse()
                .map_err(|e: Error| perr(vl, e.to_string()))?,
            d_in: num("d_in")?,
            d_emb: num("d_emb")?,
            encoder_hidden: list("encoder_hidden")?,
            heads: num("heads")?,
            use_projections: proj
                .parse()
                .map_err(|_| perr(pl, "bad bool for `use_projections`".into()))?,
            classifier_hidden: list("classifier_hidden")?,
            classes: num("classes")?,
            seed: seed.parse().map_err(|_| perr(sl, "bad seed".into()))?,
        };
        let mut state = ModelState::new(config)?;
        if let Ok((l, v)) = get("best_epoch") {
            if !v.is_empty() {
                state.best_epoch = Some(v.parse().map_err(|_| perr(l, "bad best_epoch".into()))?);
            }
        }
        if let Ok((l, v)) = get("dev_uar") {
            if !v.is_empty() {
                state.dev_uar = v
                    .split(';')
                    .map(|s| s.parse().map_err(|_| perr(l, "bad dev_uar".into())))
                    .collect::<Result<_>>()?;
            }
        }

        i += 1;
        let expected: Vec<(String, usize, usize)> = state
            .params
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.rows(), m.cols()))
            .collect();
        let mut loaded = Vec::with_capacity(expected.len());
        for (name, rows, cols) in &expected {
            let header = lines
                .get(i)
                .ok_or_else(|| perr(i + 1, format!("missing tensor `{name}`")))?;
            let want = format!("tensor {name} {rows} {cols}");
            if *header != want {
                return Err(perr(i + 1, format!("expected `{want}`, got `{header}`")));
            }
            i += 1;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..*rows {
                let line = lines
                    .get(i)
                    .ok_or_else(|| perr(i + 1, "truncated tensor".into()))?;
                for s in line.split(';') {
                    let v: f64 = s
                        .parse()
                        .map_err(|_| perr(i + 1, format!("bad value `{s}`")))?;
                    if !v.is_finite() {
                        return Err(perr(i + 1, "non-finite weight".into()));
                    }
                    data.push(v);
                }
                i += 1;
            }
            loaded.push(Matrix::from_vec(*rows, *cols, data).map_err(|e| perr(i, e.to_string()))?);
        }
        if lines[i..].iter().any(|l| !l.is_empty()) {
            return Err(perr(i + 1, "trailing content after tensors".into()));
        }
        for (dst, src) in state.params.tensors_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(state)
    }
}

pub fn save_model(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, state.to_text())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    ModelState::parse(&text, path)
}

/// Feature rows of the slots a variant uses; imputed slots become zeros.
pub fn enrolment_matrix(
    index: &HashMap<&str, &Utterance>,
    set: &EnrolmentSet,
    variant: Variant,
    neutral_class: usize,
    dim: usize,
) -> Result<Matrix> {
    let slots = select_enrolment(set, variant, neutral_class);
    let mut data = Vec::with_capacity(slots.len() * dim);
    for slot in &slots {
        match slot {
            Slot::Imputed => data.extend(std::iter::repeat_n(0.0, dim)),
            Slot::Utterance(id) => {
                let u = index.get(id.as_str()).ok_or_else(|| {
                    Error::invalid(format!("enrolment references unknown utterance `{id}`"))
                })?;
                if u.speaker != set.speaker {
                    return Err(Error::invalid(format!(
                        "enrolment utterance `{id}` does not belong to `{}`",
                        set.speaker
                    )));
                }
                data.extend_from_slice(&u.features);
            }
        }
    }
    Matrix::from_vec(slots.len(), dim, data)
}

/// Utterances of a split that take part in training or evaluation.
///
/// Base ignores `enrolment` and always excludes the canonical enrolment
/// utterances, so its predictions do not depend on the enrolment file.
pub fn evaluation_pool<'a>(
    corpus: &'a Corpus,
    split: Split,
    variant: Variant,
    enrolment: &Enrolment,
    include_enrolled: bool,
) -> Vec<&'a Utterance> {
    let excluded: BTreeSet<String> = if include_enrolled {
        BTreeSet::new()
    } else if variant.uses_enrolment() {
        enrolment.enrolled.clone()
    } else {
        build_enrolment_sets(corpus, split).enrolled
    };
    corpus
        .split(split)
        .filter(|u| !excluded.contains(&u.id))
        .collect()
}

fn speaker_matrices(
    corpus: &Corpus,
    pool: &[&Utterance],
    enrolment: &Enrolment,
    variant: Variant,
) -> Result<HashMap<String, Matrix>> {
    let index = corpus.index();
    let mut out = HashMap::new();
    for u in pool {
        if out.contains_key(&u.speaker) {
            continue;
        }
        let m = if variant.uses_enrolment() {
            let set = enrolment.get(&u.speaker).ok_or_else(|| {
                Error::invalid(format!("no enrolment set for speaker `{}`", u.speaker))
            })?;
            if set.slots.len() != corpus.classes {
                return Err(Error::dim(
                    corpus.classes,
                    set.slots.len(),
                    format!("slots of `{}`", set.speaker),
                ));
            }
            enrolment_matrix(&index, set, variant, corpus.neutral_class, corpus.dim)?
        } else {
            Matrix::zeros(0, corpus.dim)
        };
        out.insert(u.speaker.clone(), m);
    }
    Ok(out)
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PredictOptions {
    pub exec: Exec,
    pub include_enrolled: bool,
}

pub fn predict(
    state: &ModelState,
    corpus: &Corpus,
    split: Split,
    enrolment: &Enrolment,
    opts: PredictOptions,
) -> Result<Vec<PredictionRecord>> {
    if corpus.dim != state.config.d_in {
        return Err(Error::dim(
            state.config.d_in,
            corpus.dim,
            "corpus feature dimension",
        ));
    }
    if corpus.classes != state.config.classes {
        return Err(Error::dim(
            state.config.classes,
            corpus.classes,
            "corpus class count",
        ));
    }
    let pool = evaluation_pool(
        corpus,
        split,
        state.variant(),
        enrolment,
        opts.include_enrolled,
    );
    let mats = speaker_matrices(corpus, &pool, enrolment, state.variant())?;
    opts.exec.try_map_indexed(pool.len(), |i| {
        let u = pool[i];
        let logits = state.logits(&u.features, &mats[&u.speaker])?;
        Ok(PredictionRecord {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            true_label: u.label,
            pred_label: argmax(&logits),
        })
    })
}

/// Trains end-to-end with Adam and keeps the weights of the epoch with the
/// best dev UAR (earliest on ties).
pub fn train(
    corpus: &Corpus,
    enrolment: &Enrolment,
    config: ModelConfig,
    hp: &Hparams,
) -> Result<(ModelState, TrainLog)> {
    train_with(corpus, enrolment, config, hp, Exec::Sequential)
}

/// As [`train`]; `exec` only affects the dev evaluation pass, which gives
/// identical results either way.
pub fn train_with(
    corpus: &Corpus,
    enrolment: &Enrolment,
    config: ModelConfig,
    hp: &Hparams,
    exec: Exec,
) -> Result<(ModelState, TrainLog)> {
    if hp.epochs == 0 || hp.batch == 0 {
        return Err(Error::invalid("epochs and batch size must be >= 1"));
    }
    if !(hp.lr > 0.0 && hp.lr.is_finite()) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if config.d_in != corpus.dim {
        return Err(Error::dim(corpus.dim, config.d_in, "model input dimension"));
    }
    if config.classes != corpus.classes {
        return Err(Error::dim(
            corpus.classes,
            config.classes,
            "model class count",
        ));
    }
    let variant = config.variant;
    let train_pool = evaluation_pool(
        corpus,
        Split::Train,
        variant,
        enrolment,
        hp.include_enrolled,
    );
    let dev_pool = evaluation_pool(corpus, Split::Dev, variant, enrolment, hp.include_enrolled);
    if train_pool.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    if dev_pool.is_empty() {
        return Err(Error::Empty("dev split".into()));
    }
    let train_mats = speaker_matrices(corpus, &train_pool, enrolment, variant)?;
    // Fail early rather than after the first epoch.
    speaker_matrices(corpus, &dev_pool, enrolment, variant)?;

    let mut state = ModelState::new(config)?;
    let mut adam = AdamState::new(state.params.len(), hp.lr);
    let mut flat = state.params.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_pool.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Params)> = None;
    let predict_opts = PredictOptions {
        exec,
        include_enrolled: hp.include_enrolled,
    };

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hp.batch) {
            let mut acc = state.params.zeros_like();
            for &i in batch {
                let u = train_pool[i];
                let (loss, g) =
                    state.loss_and_grad(&u.features, &train_mats[&u.speaker], u.label)?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch} on `{}`",
                        u.id
                    )));
                }
                loss_sum += loss;
                acc.add_assign(&g)?;
            }
            acc.scale(1.0 / batch.len() as f64);
            adam.step(&mut flat, &acc.to_flat())
                .map_err(|e| Error::Numerical(format!("epoch {epoch}: {e}")))?;
            state.params.set_flat(&flat)?;
        }
        let records = predict(&state, corpus, Split::Dev, enrolment, predict_opts)?;
        let dev_uar = uar(&records, corpus.classes)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_pool.len() as f64,
            dev_uar,
        });
        if best.as_ref().is_none_or(|(b, _)| dev_uar > *b) {
            best = Some((dev_uar, state.params.clone()));
            log.selected_epoch = epoch;
        }
    }
    let (_, params) = best.expect("at least one epoch");
    state.params = params;
    state.best_epoch = Some(log.selected_epoch);
    state.dev_uar = log.epochs.iter().map(|e| e.dev_uar).collect();
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;

    fn mini(variant: Variant, projections: bool, heads: usize) -> ModelState {
        ModelState::new(ModelConfig {
            variant,
            d_in: 4,
            d_emb: 4,
            encoder_hidden: vec![5],
            heads,
            use_projections: projections,
            classifier_hidden: vec![3],
            classes: 2,
            seed: 21,
        })
        .unwrap()
    }

    fn random_rows(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        )
        .unwrap()
    }

    fn check_model_grad(state: &ModelState, x: &[f64], enrol: &Matrix, label: usize) -> f64 {
        let mut probe = state.clone();
        let report = gradcheck(
            |flat| {
                probe.params.set_flat(flat)?;
                let (l, g) = probe.loss_and_grad(x, enrol, label)?;
                Ok((l, g.to_flat()))
            },
            &state.params.to_flat(),
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        report.max_rel_error
    }

    #[test]
    fn gradcheck_pers_a_miniature() {
        let s = mini(Variant::PersA, false, 1);
        let x = random_rows(1, 1, 4);
        check_model_grad(&s, x.data(), &random_rows(2, 2, 4), 1);
    }

    #[test]
    fn gradcheck_base() {
        let s = mini(Variant::Base, false, 1);
        check_model_grad(&s, random_rows(3, 1, 4).data(), &Matrix::zeros(0, 4), 0);
    }

    #[test]
    fn gradcheck_projections_two_heads() {
        let s = mini(Variant::PersA, true, 2);
        check_model_grad(&s, random_rows(4, 1, 4).data(), &random_rows(5, 3, 4), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(Variant::Base, 4, 1);
        assert!(ModelState::new(c.clone()).is_err());
        c.classes = 3;
        c.use_projections = true;
        c.d_emb = 6;
        c.heads = 4;
        assert!(ModelState::new(c.clone()).is_err());
        c.heads = 3;
        assert!(ModelState::new(c.clone()).is_ok());
        c.use_projections = false;
        assert!(ModelState::new(c).is_err());
    }

    #[test]
    fn identity_encoder_passes_features_through() {
        let mut c = ModelConfig::new(Variant::Base, 3, 2);
        c.d_emb = 3;
        c.encoder_hidden = vec![];
        let mut s = ModelState::new(c).unwrap();
        s.params.encoder.layers[0].w = Matrix::identity(3);
        let x = [0.25, -1.0, 3.5];
        assert_eq!(s.encode(&x).unwrap(), x.to_vec());
        assert!(s.encode(&[1.0]).is_err());
    }

    #[test]
    fn imputed_slot_embedding_is_speaker_independent() {
        let s = mini(Variant::PersA, false, 1);
        let zero = s.encode(&[0.0; 4]).unwrap();
        // zero-initialised biases propagate to a zero embedding
        assert!(zero.iter().all(|v| *v == 0.0));
        let mut s2 = s.clone();
        s2.params.encoder.layers[0].b =
            Matrix::from_vec(1, 5, vec![0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        let a = s2.encode(&[0.0; 4]).unwrap();
        assert_eq!(a, s2.encode(&[0.0; 4]).unwrap());
        assert!(a.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn personalise_cases() {
        let s = mini(Variant::PersA, false, 1);
        let et = [0.5, -0.5, 1.0, 2.0];
        assert_eq!(
            s.personalise(&et, &Matrix::zeros(0, 4)).unwrap(),
            et.to_vec()
        );
        let v = [1.0, 2.0, 3.0, 4.0];
        let out = s.personalise(&et, &Matrix::row_vector(&v)).unwrap();
        assert_eq!(out, vec![1.5, 1.5, 4.0, 6.0]);

        let et = [1.0, 0.0, 0.0, 0.0];
        let e = Matrix::from_rows(&[[0.0, 2.0, 0.0, 0.0], [0.0, 0.0, 0.0, -4.0]], 4).unwrap();
        let out = s.personalise(&et, &e).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 0.0, -2.0]);
        assert!(s.personalise(&et[..3], &e).is_err());
    }

    #[test]
    fn residual_with_zero_values_matches_base() {
        let pers = mini(Variant::PersA, false, 1);
        let mut base = pers.clone();
        base.config.variant = Variant::Base;
        let x = random_rows(9, 1, 4);
        // zero features with zero biases give zero enrolment embeddings
        let enrol = Matrix::zeros(3, 4);
        assert_eq!(
            pers.logits(x.data(), &enrol).unwrap(),
            base.logits(x.data(), &Matrix::zeros(0, 4)).unwrap()
        );
    }

    #[test]
    fn enrolment_permutation_leaves_logits_unchanged() {
        let s = mini(Variant::PersA, false, 1);
        let x = random_rows(10, 1, 4);
        let e = random_rows(11, 4, 4);
        let a = s.logits(x.data(), &e).unwrap();
        for perm in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
            let rows: Vec<&[f64]> = perm.iter().map(|&i| e.row(i)).collect();
            let p = Matrix::from_rows(&rows, 4).unwrap();
            let b = s.logits(x.data(), &p).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn shared_encoder_probe_moves_both_paths() {
        let s = mini(Variant::PersA, false, 1);
        let x = random_rows(12, 1, 4);
        let e = random_rows(13, 1, 4);
        let mut p = s.clone();
        let w = p.params.encoder.layers[0].w.get(0, 0);
        p.params.encoder.layers[0].w.set(0, 0, w + 0.1);
        assert_ne!(s.encode(x.data()).unwrap(), p.encode(x.data()).unwrap());
        assert_ne!(s.encode(e.row(0)).unwrap(), p.encode(e.row(0)).unwrap());
        // Exactly one encoder parameter set exists in the model.
        let names: Vec<String> = s.params.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names.iter().filter(|n| n.starts_with("encoder.")).count(),
            4
        );
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn model_file_round_trip() {
        for (proj, heads) in [(false, 1), (true, 2)] {
            let mut s = mini(Variant::PersE, proj, heads);
            s.best_epoch = Some(3);
            s.dev_uar = vec![0.25, 0.5, 0.75, 0.1];
            let text = s.to_text();
            assert!(text.starts_with("fairser-model v1\n"));
            let back = ModelState::parse(&text, Path::new("m")).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn model_file_rejects_corruption() {
        let s = mini(Variant::Base, false, 1);
        let text = s.to_text();
        assert!(ModelState::parse(&text.replace("d_in=4", "d_in=5"), Path::new("m")).is_err());
        assert!(
            ModelState::parse(&text.replacen("fairser-model", "other", 1), Path::new("m")).is_err()
        );
        let truncated: String = text
            .lines()
            .take(text.lines().count() - 1)
            .collect::<Vec<_>>()
            .join("\n");
        assert!(ModelState::parse(&truncated, Path::new("m")).is_err());
    }

    #[test]
    fn train_log_best_epoch_earliest_tie() {
        let log = TrainLog {
            epochs: [0.5, 0.7, 0.7, 0.6]
                .iter()
                .enumerate()
                .map(|(i, &d)| EpochLog {
                    epoch: i + 1,
                    train_loss: 1.0,
                    dev_uar: d,
                })
                .collect(),
            selected_epoch: 2,
        };
        assert_eq!(log.best_epoch(), Some(2));
        let csv = log.to_csv();
        assert_eq!(csv.lines().nth(2).unwrap(), "2,1,0.7,1");
    }
}
