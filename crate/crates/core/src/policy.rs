//! Small autoregressive token policies with exact log-probabilities and
//! exact parameter gradients.
//!
//! The reference architecture ([`ToyPolicy`]) embeds tokens, runs a single
//! gated recurrence over the sequence and maps the hidden state through an
//! affine softmax head. [`BagPolicy`] is a non-recurrent alternative that
//! scores the next token from the mean one-hot of everything seen so far.
//! Both implement [`Policy`], which is all the optimizer needs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub type TokenId = usize;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const MAX_VOCAB: usize = 256;
const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];
const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Analytic and numeric gradient components closer than this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

const CHECKPOINT_MAGIC: &str = "ENFLAB-POLICY";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownTokenId(TokenId),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered, distinct token symbols. Always contains the special tokens
/// (`<bos>`, `<eos>`, `<sep>`, the think/answer tags and letters A–D).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, PolicyError> {
        if tokens.len() > MAX_VOCAB {
            return Err(PolicyError::InvalidVocabulary(format!(
                "{} tokens exceeds the limit of {MAX_VOCAB}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(PolicyError::InvalidVocabulary(format!("bad symbol {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(PolicyError::InvalidVocabulary(format!("duplicate symbol {t:?}")));
            }
        }
        for s in Self::specials() {
            if !index.contains_key(s) {
                return Err(PolicyError::InvalidVocabulary(format!("missing special {s:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Specials followed by `extra` in order, skipping duplicates.
    pub fn with_specials<I, S>(extra: I) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = Self::specials().map(String::from).collect();
        for t in extra {
            let t = t.into();
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        Self::new(tokens)
    }

    fn specials() -> impl Iterator<Item = &'static str> {
        [BOS, EOS, SEP].into_iter().chain(TAGS).chain(LETTERS)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, symbol: &str) -> Result<TokenId, PolicyError> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| PolicyError::UnknownToken(symbol.to_string()))
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn bos(&self) -> TokenId {
        self.index[BOS]
    }

    pub fn eos(&self) -> TokenId {
        self.index[EOS]
    }

    pub fn sep(&self) -> TokenId {
        self.index[SEP]
    }

    fn is_tag(symbol: &str) -> bool {
        symbol.starts_with('<') && symbol.ends_with('>')
    }

    /// Encodes response text: tags are matched literally, everything else is
    /// split on whitespace. No `<eos>` is appended.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>, PolicyError> {
        let mut out = Vec::new();
        let mut rest = text;
        loop {
            rest = rest.trim_start();
            if rest.is_empty() {
                return Ok(out);
            }
            if let Some(tag) = TAGS.iter().find(|t| rest.starts_with(**t)) {
                out.push(self.index[*tag]);
                rest = &rest[tag.len()..];
                continue;
            }
            let end = rest
                .find(|c: char| c.is_whitespace() || c == '<')
                .filter(|e| *e > 0)
                .unwrap_or(rest.len());
            out.push(self.id(&rest[..end])?);
            rest = &rest[end..];
        }
    }

    /// Renders tokens up to (excluding) the first `<eos>`. Adjacent plain
    /// words are joined by a single space; tags are glued to neighbours.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            let Some(sym) = self.symbol(id) else { break };
            if sym == EOS {
                break;
            }
            let word = !Self::is_tag(sym);
            if word && prev_word {
                out.push(' ');
            }
            out.push_str(sym);
            prev_word = word;
        }
        out
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<(), PolicyError> {
        match ids.iter().find(|id| **id >= self.len()) {
            Some(id) => Err(PolicyError::UnknownTokenId(*id)),
            None => Ok(()),
        }
    }
}

/// A response drawn from a policy, with the log-probability of each token
/// under the (untempered) policy at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<TokenId>,
    pub logp: Vec<f64>,
}

/// Interface shared by the trainable architectures.
pub trait Policy: Clone + Send + Sync {
    /// Cached activations from a forward pass, consumed by [`Policy::backward`].
    type Trace;
    /// Incremental decoding state.
    type State: Clone;

    fn vocab(&self) -> &Vocabulary;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Log-probabilities of each response token given the prompt and the
    /// preceding response tokens.
    fn forward(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<(Vec<f64>, Self::Trace), PolicyError>;

    /// Accumulates `Σ_t coeffs[t] · ∇ log π(response_t | …)` into `grad`.
    fn backward(&self, trace: &Self::Trace, coeffs: &[f64], grad: &mut [f64]);

    fn start(&self, prompt: &[TokenId]) -> Result<Self::State, PolicyError>;
    fn push(&self, state: &mut Self::State, token: TokenId);
    /// Log-probabilities of the next token over the whole vocabulary.
    fn next_logprobs(&self, state: &Self::State) -> Vec<f64>;

    fn logprobs(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        Ok(self.forward(prompt, response)?.0)
    }

    /// Samples until `<eos>` (included) or `max_len` tokens. A temperature
    /// at or below 1e-6 decodes greedily.
    fn sample(&self, prompt: &[TokenId], max_len: usize, temperature: f64, seed: u64) -> Result<Sampled, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.start(prompt)?;
        let eos = self.vocab().eos();
        let mut out = Sampled {
            tokens: Vec::new(),
            logp: Vec::new(),
        };
        while out.tokens.len() < max_len {
            let lp = self.next_logprobs(&state);
            let tok = if temperature <= 1e-6 {
                argmax(&lp)
            } else {
                draw(&lp, temperature, rng.random::<f64>())
            };
            out.tokens.push(tok);
            out.logp.push(lp[tok]);
            if tok == eos {
                break;
            }
            self.push(&mut state, tok);
        }
        Ok(out)
    }

    fn greedy(&self, prompt: &[TokenId], max_len: usize) -> Result<Sampled, PolicyError> {
        self.sample(prompt, max_len, 0.0, 0)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn draw(logp: &[f64], temperature: f64, u: f64) -> usize {
    let scaled: Vec<f64> = logp.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameter offsets of the recurrent policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    v: usize,
    d: usize,
    emb: usize,
    wz: usize,
    uz: usize,
    bz: usize,
    wc: usize,
    uc: usize,
    bc: usize,
    wo: usize,
    bo: usize,
    total: usize,
}

impl Layout {
    fn new(v: usize, d: usize) -> Self {
        let emb = 0;
        let wz = emb + v * d;
        let uz = wz + d * d;
        let bz = uz + d * d;
        let wc = bz + d;
        let uc = wc + d * d;
        let bc = uc + d * d;
        let wo = bc + d;
        let bo = wo + v * d;
        Layout {
            v,
            d,
            emb,
            wz,
            uz,
            bz,
            wc,
            uc,
            bc,
            wo,
            bo,
            total: bo + v,
        }
    }
}

/// Token embedding → gated recurrence → affine softmax head.
///
/// ```text
/// z_t = σ(Wz x_t + Uz h_{t-1} + bz)
/// c_t = tanh(Wc x_t + Uc h_{t-1} + bc)
/// h_t = (1 − z_t) ⊙ h_{t-1} + z_t ⊙ c_t
/// logits_t = Wo h_t + bo        (predicts token t+1)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-step activations of a [`ToyPolicy`] forward pass.
#[derive(Debug, Clone)]
pub struct RecurrentTrace {
    seq: Vec<TokenId>,
    prompt_len: usize,
    /// hidden states h_0..h_{n-1}, flattened
    hs: Vec<f64>,
    zs: Vec<f64>,
    cs: Vec<f64>,
    /// log-softmax at each response position, flattened
    lsm: Vec<f64>,
}

impl ToyPolicy {
    /// All-zero parameters: every next-token distribution is uniform.
    pub fn uniform(vocab: Vocabulary, dim: usize) -> Self {
        let layout = Layout::new(vocab.len(), dim);
        ToyPolicy {
            vocab,
            layout,
            params: vec![0.0; layout.total],
        }
    }

    /// Gaussian initialization scaled by `1/sqrt(fan_in)`, biases zero.
    pub fn random(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let mut p = Self::uniform(vocab, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = p.layout;
        let mut fill = |range: std::ops::Range<usize>, std: f64, params: &mut [f64]| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in &mut params[range] {
                *x = normal.sample(&mut rng);
            }
        };
        let inv = 1.0 / (l.d as f64).sqrt();
        fill(l.emb..l.wz, 1.0, &mut p.params);
        fill(l.wz..l.bz, inv, &mut p.params);
        fill(l.wc..l.bc, inv, &mut p.params);
        fill(l.wo..l.bo, inv, &mut p.params);
        p
    }

    pub fn dim(&self) -> usize {
        self.layout.d
    }

    fn cell(&self, h: &[f64], tok: TokenId, z: &mut [f64], c: &mut [f64], out: &mut [f64]) {
        let l = &self.layout;
        let d = l.d;
        let p = &self.params;
        let x = &p[l.emb + tok * d..l.emb + (tok + 1) * d];
        for i in 0..d {
            let mut az = p[l.bz + i];
            let mut ac = p[l.bc + i];
            let wz = &p[l.wz + i * d..l.wz + (i + 1) * d];
            let uz = &p[l.uz + i * d..l.uz + (i + 1) * d];
            let wc = &p[l.wc + i * d..l.wc + (i + 1) * d];
            let uc = &p[l.uc + i * d..l.uc + (i + 1) * d];
            for j in 0..d {
                az += wz[j] * x[j] + uz[j] * h[j];
                ac += wc[j] * x[j] + uc[j] * h[j];
            }
            z[i] = sigmoid(az);
            c[i] = ac.tanh();
            out[i] = (1.0 - z[i]) * h[i] + z[i] * c[i];
        }
    }

    fn logits(&self, h: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        let d = l.d;
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.params[l.wo + k * d..l.wo + (k + 1) * d];
            *o = self.params[l.bo + k] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }

    /// Text dump: header, vocabulary, then every parameter as the hex of its
    /// IEEE-754 bits so reloading is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), PolicyError> {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}").unwrap();
        writeln!(s, "arch gated_recurrent").unwrap();
        writeln!(s, "dim {}", self.layout.d).unwrap();
        writeln!(s, "vocab {}", self.vocab.len()).unwrap();
        for t in self.vocab.tokens() {
            writeln!(s, "{t}").unwrap();
        }
        writeln!(s, "params {}", self.params.len()).unwrap();
        for x in &self.params {
            writeln!(s, "{:016x}", x.to_bits()).unwrap();
        }
        w.write_all(s.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String, PolicyError> {
            lines.next().ok_or_else(|| bad("truncated"))?.map_err(PolicyError::from)
        };
        let header = next()?;
        if header != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
            return Err(bad(&format!("unsupported header {header:?}")));
        }
        if next()? != "arch gated_recurrent" {
            return Err(bad("unsupported architecture"));
        }
        let field = |line: String, key: &str| -> Result<usize, PolicyError> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(&format!("expected `{key} <n>`")))
        };
        let dim = field(next()?, "dim")?;
        let n_vocab = field(next()?, "vocab")?;
        let tokens = (0..n_vocab).map(|_| next()).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocabulary::new(tokens)?;
        let n_params = field(next()?, "params")?;
        let mut policy = ToyPolicy::uniform(vocab, dim);
        if n_params != policy.params.len() {
            return Err(bad("parameter count does not match dim and vocabulary"));
        }
        for x in policy.params.iter_mut() {
            let line = next()?;
            let bits = u64::from_str_radix(line.trim(), 16).map_err(|_| bad("bad parameter"))?;
            *x = f64::from_bits(bits);
        }
        Ok(policy)
    }
}

impl Policy for ToyPolicy {
    type Trace = RecurrentTrace;
    type State = Vec<f64>;

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<(Vec<f64>, RecurrentTrace), PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::EmptyPrompt);
        }
        self.vocab.check(prompt)?;
        self.vocab.check(response)?;
        let d = self.layout.d;
        let v = self.layout.v;
        let seq: Vec<TokenId> = prompt.iter().chain(response).copied().collect();
        let n = seq.len();
        let steps = if response.is_empty() { 0 } else { n - 1 };
        let mut hs = vec![0.0; (steps + 1) * d];
        let mut zs = vec![0.0; steps * d];
        let mut cs = vec![0.0; steps * d];
        for j in 0..steps {
            let (prev, next) = hs.split_at_mut((j + 1) * d);
            self.cell(
                &prev[j * d..],
                seq[j],
                &mut zs[j * d..(j + 1) * d],
                &mut cs[j * d..(j + 1) * d],
                &mut next[..d],
            );
        }
        let mut lsm = vec![0.0; response.len() * v];
        let mut logits = vec![0.0; v];
        let mut out = Vec::with_capacity(response.len());
        for (t, &tok) in response.iter().enumerate() {
            let p = prompt.len() + t;
            self.logits(&hs[p * d..(p + 1) * d], &mut logits);
            let row = &mut lsm[t * v..(t + 1) * v];
            log_softmax_into(&logits, row);
            out.push(row[tok]);
        }
        Ok((
            out,
            RecurrentTrace {
                seq,
                prompt_len: prompt.len(),
                hs,
                zs,
                cs,
                lsm,
            },
        ))
    }

    fn backward(&self, tr: &RecurrentTrace, coeffs: &[f64], grad: &mut [f64]) {
        let l = self.layout;
        let (d, v) = (l.d, l.v);
        let n_resp = tr.seq.len() - tr.prompt_len;
        assert_eq!(coeffs.len(), n_resp, "one coefficient per response token");
        assert_eq!(grad.len(), l.total);
        if n_resp == 0 {
            return;
        }
        let steps = tr.seq.len() - 1;
        let p = &self.params;
        // gradient w.r.t. each hidden state from the output head
        let mut dh_out = vec![0.0; (steps + 1) * d];
        let mut dlogits = vec![0.0; v];
        for t in 0..n_resp {
            let c = coeffs[t];
            if c == 0.0 {
                continue;
            }
            let pos = tr.prompt_len + t;
            let tok = tr.seq[pos];
            let row = &tr.lsm[t * v..(t + 1) * v];
            for k in 0..v {
                dlogits[k] = c * (if k == tok { 1.0 } else { 0.0 } - row[k].exp());
            }
            let h = &tr.hs[pos * d..(pos + 1) * d];
            let dh = &mut dh_out[pos * d..(pos + 1) * d];
            for k in 0..v {
                let g = dlogits[k];
                grad[l.bo + k] += g;
                let w = &p[l.wo + k * d..l.wo + (k + 1) * d];
                let gw = &mut grad[l.wo + k * d..l.wo + (k + 1) * d];
                for i in 0..d {
                    gw[i] += g * h[i];
                    dh[i] += g * w[i];
                }
            }
        }

        let mut dh_next = vec![0.0; d];
        let mut daz = vec![0.0; d];
        let mut dac = vec![0.0; d];
        for j in (0..steps).rev() {
            // dh is dL/dh_{j+1}
            let dh: Vec<f64> = (0..d).map(|i| dh_next[i] + dh_out[(j + 1) * d + i]).collect();
            let hprev = &tr.hs[j * d..(j + 1) * d];
            let z = &tr.zs[j * d..(j + 1) * d];
            let c = &tr.cs[j * d..(j + 1) * d];
            for i in 0..d {
                let dz = dh[i] * (c[i] - hprev[i]);
                let dc = dh[i] * z[i];
                daz[i] = dz * z[i] * (1.0 - z[i]);
                dac[i] = dc * (1.0 - c[i] * c[i]);
                dh_next[i] = dh[i] * (1.0 - z[i]);
            }
            let tok = tr.seq[j];
            let x = &p[l.emb + tok * d..l.emb + (tok + 1) * d];
            let mut dx = vec![0.0; d];
            for i in 0..d {
                let (gz, gc) = (daz[i], dac[i]);
                grad[l.bz + i] += gz;
                grad[l.bc + i] += gc;
                for k in 0..d {
                    grad[l.wz + i * d + k] += gz * x[k];
                    grad[l.uz + i * d + k] += gz * hprev[k];
                    grad[l.wc + i * d + k] += gc * x[k];
                    grad[l.uc + i * d + k] += gc * hprev[k];
                    dx[k] += p[l.wz + i * d + k] * gz + p[l.wc + i * d + k] * gc;
                    dh_next[k] += p[l.uz + i * d + k] * gz + p[l.uc + i * d + k] * gc;
                }
            }
            let ge = &mut grad[l.emb + tok * d..l.emb + (tok + 1) * d];
            for k in 0..d {
                ge[k] += dx[k];
            }
        }
    }

    fn start(&self, prompt: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::EmptyPrompt);
        }
        self.vocab.check(prompt)?;
        let mut h = vec![0.0; self.layout.d];
        for &t in prompt {
            self.push(&mut h, t);
        }
        Ok(h)
    }

    fn push(&self, state: &mut Vec<f64>, token: TokenId) {
        let d = self.layout.d;
        let mut z = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut out = vec![0.0; d];
        self.cell(state, token, &mut z, &mut c, &mut out);
        *state = out;
    }

    fn next_logprobs(&self, state: &Vec<f64>) -> Vec<f64> {
        let mut logits = vec![0.0; self.layout.v];
        self.logits(state, &mut logits);
        let mut out = vec![0.0; logits.len()];
        log_softmax_into(&logits, &mut out);
        out
    }
}

/// `logits = W · mean_onehot(prefix) + b`: no recurrence, order-insensitive.
#[derive(Debug, Clone, PartialEq)]
pub struct BagPolicy {
    vocab: Vocabulary,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BagTrace {
    seq: Vec<TokenId>,
    prompt_len: usize,
    lsm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BagState {
    counts: Vec<f64>,
    n: f64,
}

impl BagPolicy {
    pub fn random(vocab: Vocabulary, seed: u64, std: f64) -> Self {
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut params = vec![0.0; v * v + v];
        for x in &mut params[..v * v] {
            *x = normal.sample(&mut rng);
        }
        BagPolicy { vocab, params }
    }

    fn logits(&self, state: &BagState, out: &mut [f64]) {
        let v = self.vocab.len();
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.params[k * v..(k + 1) * v];
            *o = self.params[v * v + k]
                + row.iter().zip(&state.counts).map(|(w, c)| w * c).sum::<f64>() / state.n;
        }
    }
}

impl Policy for BagPolicy {
    type Trace = BagTrace;
    type State = BagState;

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<(Vec<f64>, BagTrace), PolicyError> {
        let mut state = self.start(prompt)?;
        self.vocab.check(response)?;
        let v = self.vocab.len();
        let mut lsm = vec![0.0; response.len() * v];
        let mut logits = vec![0.0; v];
        let mut out = Vec::with_capacity(response.len());
        for (t, &tok) in response.iter().enumerate() {
            self.logits(&state, &mut logits);
            let row = &mut lsm[t * v..(t + 1) * v];
            log_softmax_into(&logits, row);
            out.push(row[tok]);
            self.push(&mut state, tok);
        }
        let seq = prompt.iter().chain(response).copied().collect();
        Ok((
            out,
            BagTrace {
                seq,
                prompt_len: prompt.len(),
                lsm,
            },
        ))
    }

    fn backward(&self, tr: &BagTrace, coeffs: &[f64], grad: &mut [f64]) {
        let v = self.vocab.len();
        let mut counts = vec![0.0; v];
        for &t in &tr.seq[..tr.prompt_len] {
            counts[t] += 1.0;
        }
        for (t, &c) in coeffs.iter().enumerate() {
            let pos = tr.prompt_len + t;
            let tok = tr.seq[pos];
            let n = pos as f64;
            let row = &tr.lsm[t * v..(t + 1) * v];
            for k in 0..v {
                let g = c * (if k == tok { 1.0 } else { 0.0 } - row[k].exp());
                grad[v * v + k] += g;
                for (j, cnt) in counts.iter().enumerate() {
                    if *cnt != 0.0 {
                        grad[k * v + j] += g * cnt / n;
                    }
                }
            }
            counts[tok] += 1.0;
        }
    }

    fn start(&self, prompt: &[TokenId]) -> Result<BagState, PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::EmptyPrompt);
        }
        self.vocab.check(prompt)?;
        let mut state = BagState {
            counts: vec![0.0; self.vocab.len()],
            n: 0.0,
        };
        for &t in prompt {
            self.push(&mut state, t);
        }
        Ok(state)
    }

    fn push(&self, state: &mut BagState, token: TokenId) {
        state.counts[token] += 1.0;
        state.n += 1.0;
    }

    fn next_logprobs(&self, state: &BagState) -> Vec<f64> {
        let mut logits = vec![0.0; self.vocab.len()];
        self.logits(state, &mut logits);
        let mut out = vec![0.0; logits.len()];
        log_softmax_into(&logits, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

/// Compares the analytic gradient of `objective` with central finite
/// differences on `n_trials` randomly chosen coordinates.
///
/// `objective` returns the scalar value and its full analytic gradient.
/// Relative error is `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn grad_check<P, F, E>(
    policy: &P,
    objective: F,
    n_trials: usize,
    fd_step: f64,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    P: Policy,
    F: Fn(&P) -> Result<(f64, Vec<f64>), E>,
{
    let (_, analytic) = objective(policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: 0,
    };
    let mut probe = policy.clone();
    for _ in 0..n_trials {
        let i = rng.random_range(0..policy.param_count());
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + fd_step;
        let up = objective(&probe)?.0;
        probe.params_mut()[i] = orig - fd_step;
        let down = objective(&probe)?.0;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * fd_step);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Mean per-token negative log-likelihood of `(prompt, target)` pairs and its gradient.
pub fn nll_objective<P: Policy>(
    policy: &P,
    data: &[(Vec<TokenId>, Vec<TokenId>)],
) -> Result<(f64, Vec<f64>), PolicyError> {
    let n_tokens: usize = data.iter().map(|(_, r)| r.len()).sum();
    let mut grad = vec![0.0; policy.param_count()];
    if n_tokens == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n_tokens as f64;
    let mut total = 0.0;
    for (prompt, target) in data {
        let (lp, trace) = policy.forward(prompt, target)?;
        total -= lp.iter().sum::<f64>();
        policy.backward(&trace, &vec![-scale; target.len()], &mut grad);
    }
    Ok((total * scale, grad))
}
