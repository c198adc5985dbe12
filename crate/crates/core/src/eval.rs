//! Metrics and comparative benchmarking: perplexity, forward-pass counters,
//! and attention-cache accounting for the token-level baseline versus the
//! sentence-level model.
//!
//! Counters are the primary signal and are closed-form over the corpus;
//! wall-clock rates come from replaying real forward passes and are
//! informational. Cache sizes are reported as element counts (multiply by 4
//! for f32 bytes).

use std::time::Instant;

use serde::Serialize;

use crate::baseline::{next_token_pair, BaselineModel};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::sllm::SllmModel;
use crate::svae::teacher_pair;
use crate::text::TokenSequence;

/// Streaming negative log-likelihood accumulator in f64.
#[derive(Default)]
pub struct NllAccum {
    total: f64,
    count: usize,
}

impl NllAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_row<T: Scalar>(&mut self, logits: &[T], target: usize) {
        self.total += crate::svae::row_nll(logits, target);
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean_nll(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyInput("empty logit stream".into()));
        }
        Ok(self.total / self.count as f64)
    }

    /// `exp(mean per-token negative log-likelihood)`.
    pub fn ppl(&self) -> Result<f64> {
        Ok(self.mean_nll()?.exp())
    }
}

/// Perplexity of aligned logit/target streams.
pub fn perplexity<T: Scalar>(rows: &[(&[T], u32)]) -> Result<f64> {
    let mut acc = NllAccum::new();
    for (logits, target) in rows {
        acc.push_row(logits, *target as usize);
    }
    acc.ppl()
}

/// Injectable time source so throughput tests stay deterministic.
pub trait Clock {
    fn now(&self) -> f64;
}

pub struct WallClock {
    start: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock {
            start: Instant::now(),
        }
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ThroughputStats {
    /// Forward passes through the main (token- or sentence-level) stack.
    pub backbone_forwards: u64,
    /// Word-decoder forward passes (zero for the baseline).
    pub decoder_forwards: u64,
    /// Word-level tokens covered.
    pub tokens: u64,
    pub wall_seconds: f64,
    pub tokens_per_second: f64,
}

/// Replay cost of emitting each paragraph token-by-token: one backbone
/// forward per token. Counters cover the whole corpus; wall clock times real
/// autoregressive passes after `warmup` paragraphs.
pub fn measure_baseline_throughput<T: Scalar, C: Clock>(
    model: &BaselineModel<T>,
    paragraphs: &[Vec<TokenSequence>],
    warmup: usize,
    clock: &C,
) -> Result<ThroughputStats> {
    if paragraphs.is_empty() {
        return Err(Error::EmptyInput("no benchmark paragraphs".into()));
    }
    let mut forwards = 0u64;
    let mut tokens = 0u64;
    for sentences in paragraphs {
        let t: u64 = sentences.iter().map(|s| s.len() as u64).sum();
        forwards += t;
        tokens += t;
    }

    let mut timed_tokens = 0u64;
    let mut start = clock.now();
    let mut wall = 0.0;
    for (i, sentences) in paragraphs.iter().enumerate() {
        if i == warmup.min(paragraphs.len().saturating_sub(1)) {
            start = clock.now();
        }
        let stream = crate::baseline::paragraph_stream(sentences);
        let (input, _) = next_token_pair(&stream);
        // autoregressive replay: forward over each growing prefix
        for l in 1..=stream.len() {
            let _ = model.logits_value(&input[..l])?;
        }
        if i >= warmup.min(paragraphs.len().saturating_sub(1)) {
            wall = clock.now() - start;
            timed_tokens += stream.len() as u64;
        }
    }
    let tokens_per_second = if wall > 0.0 {
        timed_tokens as f64 / wall
    } else {
        f64::INFINITY
    };
    Ok(ThroughputStats {
        backbone_forwards: forwards,
        decoder_forwards: 0,
        tokens,
        wall_seconds: wall,
        tokens_per_second,
    })
}

/// Replay cost of emitting each paragraph sentence-by-sentence: one backbone
/// forward per sentence plus one word-decoder forward per token.
pub fn measure_sllm_throughput<T: Scalar, C: Clock>(
    model: &SllmModel<T>,
    paragraphs: &[Vec<TokenSequence>],
    warmup: usize,
    clock: &C,
) -> Result<ThroughputStats> {
    if paragraphs.is_empty() {
        return Err(Error::EmptyInput("no benchmark paragraphs".into()));
    }
    let mut backbone = 0u64;
    let mut decoder = 0u64;
    let mut tokens = 0u64;
    for sentences in paragraphs {
        backbone += sentences.len() as u64;
        let t: u64 = sentences.iter().map(|s| s.len() as u64).sum();
        decoder += t;
        tokens += t;
    }

    let mut timed_tokens = 0u64;
    let mut start = clock.now();
    let mut wall = 0.0;
    for (i, sentences) in paragraphs.iter().enumerate() {
        if i == warmup.min(paragraphs.len().saturating_sub(1)) {
            start = clock.now();
        }
        let omegas: Vec<_> = sentences
            .iter()
            .map(|s| encode_with_graft(model, &s.ids))
            .collect::<Result<_>>()?;
        for k in 1..=omegas.len() {
            let hidden = model.backbone_hidden(&omegas[..k])?;
            if k < omegas.len() {
                // decode the next sentence word-by-word from h_k
                let mem = crate::svae::SentenceToken::new(crate::numerics::Tensor::new(
                    vec![hidden.last_dim()],
                    hidden.row(k - 1).to_vec(),
                ))?;
                let (input, _) = teacher_pair(&sentences[k]);
                for l in 1..=input.len() {
                    let _ = decoder_logits_with_graft(model, &input[..l], &mem)?;
                }
            }
        }
        if i >= warmup.min(paragraphs.len().saturating_sub(1)) {
            wall = clock.now() - start;
            timed_tokens += sentences.iter().map(|s| s.len() as u64).sum::<u64>();
        }
    }
    let tokens_per_second = if wall > 0.0 {
        timed_tokens as f64 / wall
    } else {
        f64::INFINITY
    };
    Ok(ThroughputStats {
        backbone_forwards: backbone,
        decoder_forwards: decoder,
        tokens,
        wall_seconds: wall,
        tokens_per_second,
    })
}

fn encode_with_graft<T: Scalar>(
    model: &SllmModel<T>,
    ids: &[u32],
) -> Result<crate::svae::SentenceToken<T>> {
    let mut tape = crate::numerics::Tape::new();
    let b = model.store.bind_frozen(&mut tape);
    let omega = model.layout.svae.encode(&mut tape, &b, &model.svae_config, ids);
    let d = model.svae_config.hidden_size;
    crate::svae::SentenceToken::new(tape.value(omega).reshaped(vec![d]))
}

fn decoder_logits_with_graft<T: Scalar>(
    model: &SllmModel<T>,
    input: &[u32],
    omega: &crate::svae::SentenceToken<T>,
) -> Result<crate::numerics::Tensor<T>> {
    let mut tape = crate::numerics::Tape::new();
    let b = model.store.bind_frozen(&mut tape);
    let om = tape.constant(omega.as_row());
    let logits = model
        .layout
        .svae
        .decoder_logits(&mut tape, &b, &model.svae_config, input, om);
    Ok(tape.value(logits).clone())
}

/// Closed-form attention-cache accounting for a context of `T` tokens in `n`
/// sentences: the cache holds key+value vectors per layer per position.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MemoryAccounting {
    pub context_tokens: u64,
    pub context_sentences: u64,
    /// Baseline cache: `T * 2 * layers * d` elements.
    pub baseline_kv_elements: u64,
    /// Sentence-level backbone cache: `n * 2 * layers * d` elements.
    pub backbone_kv_elements: u64,
    /// Worst-case transient word-decoder cache, freed per sentence:
    /// `(L_max + 1) * 2 * dec_layers * d` elements.
    pub decoder_transient_kv_elements: u64,
    pub baseline_per_token: f64,
    pub backbone_per_token: f64,
}

impl MemoryAccounting {
    /// Backbone-to-baseline cache ratio, exactly `n / T` when layer and
    /// hidden sizes match.
    pub fn ratio(&self) -> f64 {
        self.backbone_kv_elements as f64 / self.baseline_kv_elements as f64
    }
}

pub fn account_memory(
    layers: usize,
    hidden: usize,
    decoder_layers: usize,
    paragraphs: &[Vec<TokenSequence>],
) -> Result<MemoryAccounting> {
    let mut tokens = 0u64;
    let mut sentences = 0u64;
    let mut max_sentence_len = 0u64;
    for p in paragraphs {
        sentences += p.len() as u64;
        for s in p {
            tokens += s.len() as u64;
            max_sentence_len = max_sentence_len.max(s.len() as u64);
        }
    }
    if tokens == 0 {
        return Err(Error::EmptyInput("empty context".into()));
    }
    let per_pos = (2 * layers * hidden) as u64;
    let baseline = tokens * per_pos;
    let backbone = sentences * per_pos;
    let transient = (max_sentence_len + 1) * (2 * decoder_layers * hidden) as u64;
    Ok(MemoryAccounting {
        context_tokens: tokens,
        context_sentences: sentences,
        baseline_kv_elements: baseline,
        backbone_kv_elements: backbone,
        decoder_transient_kv_elements: transient,
        baseline_per_token: baseline as f64 / tokens as f64,
        backbone_per_token: backbone as f64 / tokens as f64,
    })
}

/// One model's evaluation summary.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub model_id: String,
    pub corpus_id: String,
    pub config_hash: String,
    pub ppl: f64,
    pub tokens_per_second: f64,
    pub forwards_per_token: f64,
    pub kv_elements_per_context_token: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.ppl < 1.0 {
            return Err(Error::Config(format!("ppl {} below 1", self.ppl)));
        }
        if self.forwards_per_token < 0.0 || self.kv_elements_per_context_token < 0.0 {
            return Err(Error::Config("negative counters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaRow {
    pub metric: String,
    pub baseline: f64,
    pub sllm: f64,
    pub delta_pct: f64,
}

/// Percentage deltas per metric, formatted like a benchmark table.
#[derive(Clone, Debug, Serialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

pub fn compare(baseline: &EvalReport, sllm: &EvalReport) -> Result<DeltaTable> {
    if baseline.corpus_id != sllm.corpus_id {
        return Err(Error::Config(format!(
            "corpus mismatch: {} vs {}",
            baseline.corpus_id, sllm.corpus_id
        )));
    }
    let row = |metric: &str, b: f64, s: f64| DeltaRow {
        metric: metric.to_string(),
        baseline: b,
        sllm: s,
        delta_pct: if b == 0.0 { 0.0 } else { (s - b) / b * 100.0 },
    };
    Ok(DeltaTable {
        rows: vec![
            row("ppl", baseline.ppl, sllm.ppl),
            row(
                "tokens_per_second",
                baseline.tokens_per_second,
                sllm.tokens_per_second,
            ),
            row(
                "forwards_per_token",
                baseline.forwards_per_token,
                sllm.forwards_per_token,
            ),
            row(
                "kv_elements_per_token",
                baseline.kv_elements_per_context_token,
                sllm.kv_elements_per_context_token,
            ),
        ],
    })
}

impl DeltaTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,baseline,sllm,delta_pct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:+.1}\n",
                r.metric, r.baseline, r.sllm, r.delta_pct
            ));
        }
        out
    }

    pub fn to_aligned_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>14} {:>14} {:>9}\n",
            "metric", "baseline", "sllm", "delta"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>14.4} {:>14.4} {:>+8.1}%\n",
                r.metric, r.baseline, r.sllm, r.delta_pct
            ));
        }
        out
    }
}
