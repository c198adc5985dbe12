//! Sentence-level language model: an embedding-free decoder-only backbone
//! over sentence vectors, a two-way termination head, a grafted sentence
//! autoencoder at both ends, and sentence-by-sentence generation.
//!
//! The backbone consumes the sequence of sentence vectors directly (no token
//! embedding table, no vocabulary projection). Its hidden state at the last
//! position either signals stop via the termination head or *is* the next
//! sentence vector, which the grafted decoder expands into words.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{derive_seed, TrainSettings, FOCAL_GAMMA};
use crate::error::{Error, Result};
use crate::metrics::MetricsLogger;
use crate::nn::{
    collect_grads, sinusoidal_pe, AttentionMask, BlockConfig, BoundParams, LinearRef, ParamStore,
    SelfBlockRef,
};
use crate::numerics::{argmax_slice, clip_grad_l2, lr_at, AdamW, Ema, Scalar, Tape, Tensor, Var};
use crate::svae::{
    focal_loss, nonfinite_diagnostics, row_nll, teacher_pair, SentenceToken, SvaeConfig, SvaeLayout,
    SvaeModel,
};
use crate::text::{TokenSequence, Vocabulary, MAX_PARAGRAPH_SENTENCES};

/// Continue/stop decision ids of the termination head.
pub const FLAG_CONTINUE: usize = 0;
pub const FLAG_STOP: usize = 1;

/// Parameter ids of a sentence-level model: backbone blocks, termination
/// head, and the grafted autoencoder.
pub struct SllmLayout {
    pub backbone_blocks: Vec<SelfBlockRef>,
    pub stop_head: LinearRef,
    pub svae: SvaeLayout,
}

/// Hardware-independent counters of one generation run.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct GenerationTrace {
    pub backbone_forwards: u64,
    pub decoder_steps: u64,
    pub tokens_out: u64,
    pub kv_elements_cached: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminationReason {
    StopFlag,
    SentenceCap,
}

pub struct GenerationResult {
    pub text: String,
    pub sentences: Vec<String>,
    /// Sentence vectors emitted (decoded sentences may be fewer when a vector
    /// decodes to an immediate `<eos>`).
    pub sentences_generated: usize,
    pub trace: GenerationTrace,
    pub reason: TerminationReason,
}

/// Outcome of the per-step stop decision.
pub enum NextSentence<T> {
    Stop,
    Token(SentenceToken<T>),
}

pub struct SllmModel<T> {
    pub backbone: BlockConfig,
    pub svae_config: SvaeConfig,
    pub store: ParamStore<T>,
    pub layout: SllmLayout,
    /// Store indices holding the grafted autoencoder parameters.
    pub svae_range: Range<usize>,
    pub freeze_svae: bool,
    pub max_paragraph_sentences: usize,
}

impl<T: Scalar> SllmModel<T> {
    /// Attach a pretrained sentence autoencoder to a fresh backbone and
    /// termination head. Hidden sizes must match.
    pub fn graft(svae: &SvaeModel<T>, backbone: BlockConfig, freeze: bool, seed: u64) -> Result<Self> {
        backbone.validate().map_err(Error::Config)?;
        if backbone.hidden_size != svae.config.hidden_size {
            return Err(Error::GraftDimensionMismatch {
                svae: svae.config.hidden_size,
                backbone: backbone.hidden_size,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sllm-init"));
        let mut store = ParamStore::new();
        let backbone_blocks = (0..backbone.num_layers)
            .map(|i| SelfBlockRef::init(&mut store, &format!("backbone.{i}"), &backbone, &mut rng))
            .collect();
        let stop_head = LinearRef::init(&mut store, "stop_head", backbone.hidden_size, 2, &mut rng);
        let svae_start = store.len();
        let svae_layout = SvaeLayout::init(&mut store, "svae.", &svae.config, &mut rng);
        let svae_range = svae_start..store.len();
        // copy grafted weights over the placeholder init, in store order
        for (offset, i) in svae_range.clone().enumerate() {
            debug_assert!(store.name_at(i).ends_with(svae.store.name_at(offset)));
            *store.value_at_mut(i) = svae.store.value_at(offset).clone();
        }
        Ok(SllmModel {
            backbone,
            svae_config: svae.config,
            store,
            layout: SllmLayout {
                backbone_blocks,
                stop_head,
                svae: svae_layout,
            },
            svae_range,
            freeze_svae: freeze,
            max_paragraph_sentences: MAX_PARAGRAPH_SENTENCES,
        })
    }

    /// Bind for training: frozen autoencoder parameters track no gradients.
    pub fn bind_for_training(&self, tape: &mut Tape<T>) -> BoundParams {
        let range = self.svae_range.clone();
        let freeze = self.freeze_svae;
        self.store
            .bind(tape, move |i| !(freeze && range.contains(&i)))
    }

    /// Store indices the optimizer may update.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.store.len())
            .filter(|i| !(self.freeze_svae && self.svae_range.contains(i)))
            .collect()
    }

    /// Backbone pass over stacked sentence vectors `[t, d]`: sentence-level
    /// positions added, causal mask applied. Row `t-1` is the next-sentence
    /// hidden state.
    pub fn backbone_forward(&self, tape: &mut Tape<T>, b: &BoundParams, omegas: &[Var]) -> Var {
        let t = omegas.len();
        assert!(
            t >= 1 && t <= self.max_paragraph_sentences,
            "backbone input length {t} outside 1..={}",
            self.max_paragraph_sentences
        );
        let stacked = tape.concat_rows(omegas);
        let pe = tape.constant(sinusoidal_pe(t, self.backbone.hidden_size));
        let mut x = tape.add(stacked, pe);
        let mask = AttentionMask::causal(t);
        for block in &self.layout.backbone_blocks {
            x = block.forward(tape, b, x, Some(&mask));
        }
        x
    }

    /// Termination-head logits `[t, 2]` for backbone hidden states.
    pub fn stop_flags(&self, tape: &mut Tape<T>, b: &BoundParams, hidden: Var) -> Var {
        self.layout.stop_head.forward(tape, b, hidden)
    }

    /// Stop/continue split for the final hidden row: stop wins only when its
    /// logit strictly exceeds continue's (ties continue); otherwise the hidden
    /// state itself is the next sentence vector.
    pub fn next_sentence(&self, hidden_row: &[T], stop_logits: &[T]) -> Result<NextSentence<T>> {
        assert_eq!(stop_logits.len(), 2, "termination head emits two logits");
        if argmax_slice(stop_logits) == FLAG_STOP {
            Ok(NextSentence::Stop)
        } else {
            Ok(NextSentence::Token(SentenceToken::new(Tensor::new(
                vec![hidden_row.len()],
                hidden_row.to_vec(),
            ))?))
        }
    }

    /// Hidden states for a list of sentence vectors, without gradients.
    pub fn backbone_hidden(&self, omegas: &[SentenceToken<T>]) -> Result<Tensor<T>> {
        if omegas.is_empty() {
            return Err(Error::EmptyInput("backbone needs at least one sentence".into()));
        }
        if omegas.len() > self.max_paragraph_sentences {
            return Err(Error::OverLength {
                len: omegas.len(),
                max: self.max_paragraph_sentences,
            });
        }
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let vars: Vec<Var> = omegas
            .iter()
            .map(|o| tape.constant(o.as_row()))
            .collect();
        let h = self.backbone_forward(&mut tape, &b, &vars);
        Ok(tape.value(h).clone())
    }

    fn stop_decision_value(&self, hidden: &Tensor<T>) -> Vec<[T; 2]> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let h = tape.constant(hidden.clone());
        let logits = self.stop_flags(&mut tape, &b, h);
        let v = tape.value(logits);
        (0..v.rows()).map(|r| [v.row(r)[0], v.row(r)[1]]).collect()
    }

    /// A view of the grafted autoencoder sharing this model's store, for
    /// encoding prompts and decoding generated vectors.
    fn svae_view(&self) -> SvaeView<'_, T> {
        SvaeView { model: self }
    }

    /// Sentence-by-sentence generation: segment and encode the prompt, then
    /// alternate backbone forward, stop check, and greedy word decoding until
    /// the stop flag fires or the sentence cap is reached.
    pub fn generate(
        &self,
        vocab: &Vocabulary,
        prompt: &str,
        max_sentences: usize,
    ) -> Result<GenerationResult> {
        let spans = crate::text::segment(prompt);
        if spans.is_empty() {
            return Err(Error::EmptyInput("empty prompt".into()));
        }
        let svae = self.svae_view();
        let mut omegas: Vec<SentenceToken<T>> = Vec::new();
        for span in &spans {
            match vocab.encode(span.text) {
                Ok(seq) => omegas.push(svae.encode(&seq.ids)?),
                Err(Error::EmptyTokenSequence) => continue, // whitespace-only span
                Err(e) => return Err(e),
            }
        }
        if omegas.is_empty() {
            return Err(Error::EmptyInput("prompt has no encodable sentence".into()));
        }

        let mut trace = GenerationTrace::default();
        let mut sentences: Vec<String> = Vec::new();
        let mut reason = TerminationReason::SentenceCap;
        while sentences.len() < max_sentences && omegas.len() <= self.max_paragraph_sentences {
            let hidden = self.backbone_hidden(&omegas)?;
            trace.backbone_forwards += 1;
            let flags = self.stop_decision_value(&hidden);
            let last = hidden.rows() - 1;
            match self.next_sentence(hidden.row(last), &flags[last])? {
                NextSentence::Stop => {
                    reason = TerminationReason::StopFlag;
                    break;
                }
                NextSentence::Token(omega) => {
                    let (ids, steps) =
                        svae.decode_greedy_traced(&omega, self.svae_config.max_sentence_tokens);
                    trace.decoder_steps += steps;
                    trace.tokens_out += ids.len() as u64;
                    if !ids.is_empty() {
                        sentences.push(vocab.decode(&ids)?);
                    }
                    omegas.push(omega);
                }
            }
            if omegas.len() > self.max_paragraph_sentences {
                break;
            }
        }
        trace.kv_elements_cached = (omegas.len().min(self.max_paragraph_sentences)
            * 2
            * self.backbone.num_layers
            * self.backbone.hidden_size) as u64;
        Ok(GenerationResult {
            text: sentences.join(" "),
            sentences,
            trace,
            reason,
        })
    }

    /// Teacher-forced paragraph loss: encode all `t` sentences, run the
    /// backbone over the first `t-1` vectors, reconstruct each following
    /// sentence from its hidden state, and score the termination head against
    /// labels `[0, .., 0, 1]`.
    pub fn paragraph_loss(
        &self,
        tape: &mut Tape<T>,
        b: &BoundParams,
        sentences: &[TokenSequence],
        stop_loss_weight: f64,
    ) -> Result<ParagraphLoss> {
        let t = sentences.len();
        if t < 2 {
            return Err(Error::EmptyInput(
                "paragraph loss needs at least two sentences".into(),
            ));
        }
        if t > self.max_paragraph_sentences {
            return Err(Error::OverLength {
                len: t,
                max: self.max_paragraph_sentences,
            });
        }
        let omegas: Vec<Var> = sentences
            .iter()
            .map(|s| {
                self.layout
                    .svae
                    .encode(tape, b, &self.svae_config, &s.ids)
            })
            .collect();
        let hidden = self.backbone_forward(tape, b, &omegas[..t - 1]);

        let mut recon_sum: Option<Var> = None;
        let mut tokens = 0usize;
        for k in 0..t - 1 {
            let memory = tape.slice_rows(hidden, k, 1);
            let (input, targets) = teacher_pair(&sentences[k + 1]);
            let logits =
                self.layout
                    .svae
                    .decoder_logits(tape, b, &self.svae_config, &input, memory);
            let (loss, n) = focal_loss(tape, logits, &targets, FOCAL_GAMMA);
            tokens += n;
            recon_sum = Some(match recon_sum {
                Some(acc) => tape.add(acc, loss),
                None => loss,
            });
        }
        let recon_mean = {
            let sum = recon_sum.expect("t >= 2");
            tape.scale(sum, 1.0 / tokens as f64)
        };

        let stop_logits = self.stop_flags(tape, b, hidden);
        let mut labels = vec![FLAG_CONTINUE as u32; t - 1];
        *labels.last_mut().unwrap() = FLAG_STOP as u32;
        let (stop_sum, positions) = focal_loss(tape, stop_logits, &labels, FOCAL_GAMMA);
        let stop_mean = tape.scale(stop_sum, 1.0 / positions as f64);

        let weighted = tape.scale(stop_mean, stop_loss_weight);
        let total = tape.add(recon_mean, weighted);
        Ok(ParagraphLoss {
            total,
            reconstruction: recon_mean,
            stop: stop_mean,
            token_count: tokens,
        })
    }

    /// Word-level mean NLL of teacher-forced next-sentence reconstruction,
    /// the quantity perplexity is computed from.
    pub fn mean_nll(&self, paragraphs: &[Vec<TokenSequence>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        let svae = self.svae_view();
        for sentences in paragraphs {
            if sentences.len() < 2 {
                continue;
            }
            let omegas: Vec<SentenceToken<T>> = sentences
                .iter()
                .map(|s| svae.encode(&s.ids))
                .collect::<Result<_>>()?;
            let hidden = self.backbone_hidden(&omegas[..sentences.len() - 1])?;
            for k in 0..sentences.len() - 1 {
                let memory =
                    SentenceToken::new(Tensor::new(vec![hidden.last_dim()], hidden.row(k).to_vec()))?;
                let (input, targets) = teacher_pair(&sentences[k + 1]);
                let logits = svae.decoder_logits_value(&input, &memory)?;
                for (row, &tgt) in targets.iter().enumerate() {
                    total += row_nll(logits.row(row), tgt as usize);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput("no scoreable paragraphs".into()));
        }
        Ok(total / count as f64)
    }

    /// Precision/recall of the termination head against teacher-forced labels.
    pub fn stop_metrics(&self, paragraphs: &[Vec<TokenSequence>]) -> Result<StopMetrics> {
        let svae = self.svae_view();
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        let mut scored = 0u64;
        for sentences in paragraphs {
            let t = sentences.len();
            if t < 2 {
                continue;
            }
            let omegas: Vec<SentenceToken<T>> = sentences
                .iter()
                .take(t - 1)
                .map(|s| svae.encode(&s.ids))
                .collect::<Result<_>>()?;
            let hidden = self.backbone_hidden(&omegas)?;
            let flags = self.stop_decision_value(&hidden);
            for (k, pair) in flags.iter().enumerate() {
                let predicted_stop = argmax_slice(pair) == FLAG_STOP;
                let label_stop = k == t - 2;
                match (predicted_stop, label_stop) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
                scored += 1;
            }
        }
        if scored == 0 {
            return Err(Error::EmptyInput("no scoreable paragraphs".into()));
        }
        Ok(StopMetrics {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        })
    }
}

/// Re-exposes the grafted autoencoder through the combined store.
struct SvaeView<'m, T> {
    model: &'m SllmModel<T>,
}

impl<T: Scalar> SvaeView<'_, T> {
    fn encode(&self, ids: &[u32]) -> Result<SentenceToken<T>> {
        if ids.is_empty() {
            return Err(Error::EmptyTokenSequence);
        }
        if ids.len() > self.model.svae_config.max_sentence_tokens {
            return Err(Error::OverLength {
                len: ids.len(),
                max: self.model.svae_config.max_sentence_tokens,
            });
        }
        let mut tape = Tape::new();
        let b = self.model.store.bind_frozen(&mut tape);
        let omega = self
            .model
            .layout
            .svae
            .encode(&mut tape, &b, &self.model.svae_config, ids);
        let d = self.model.svae_config.hidden_size;
        SentenceToken::new(tape.value(omega).reshaped(vec![d]))
    }

    fn decoder_logits_value(&self, input: &[u32], omega: &SentenceToken<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.model.store.bind_frozen(&mut tape);
        let om = tape.constant(omega.as_row());
        let logits =
            self.model
                .layout
                .svae
                .decoder_logits(&mut tape, &b, &self.model.svae_config, input, om);
        Ok(tape.value(logits).clone())
    }

    fn decode_greedy_traced(&self, omega: &SentenceToken<T>, max_len: usize) -> (Vec<u32>, u64) {
        let mut out: Vec<u32> = Vec::new();
        let mut steps = 0u64;
        while out.len() < max_len {
            let mut input = Vec::with_capacity(out.len() + 1);
            input.push(crate::text::BOS);
            input.extend_from_slice(&out);
            let logits = self
                .decoder_logits_value(&input, omega)
                .expect("decode prefix stays within cap");
            steps += 1;
            let next = argmax_slice(logits.row(logits.rows() - 1)) as u32;
            if next == crate::text::EOS {
                break;
            }
            out.push(next);
        }
        (out, steps)
    }
}

pub struct ParagraphLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub stop: Var,
    pub token_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StopMetrics {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl StopMetrics {
    pub fn precision(&self) -> f64 {
        if self.true_positives + self.false_positives == 0 {
            return 0.0;
        }
        self.true_positives as f64 / (self.true_positives + self.false_positives) as f64
    }

    pub fn recall(&self) -> f64 {
        if self.true_positives + self.false_negatives == 0 {
            return 0.0;
        }
        self.true_positives as f64 / (self.true_positives + self.false_negatives) as f64
    }
}

pub struct SllmTrainReport<T> {
    pub steps: u64,
    pub final_loss: f64,
    pub final_val_ppl: Option<f64>,
    pub skipped_single_sentence: usize,
    pub ema: Vec<Tensor<T>>,
}

/// Joint training over paragraphs. Single-sentence paragraphs are skipped and
/// counted. Metrics columns: `lr, loss, recon, stop, ppl`.
pub fn train_sllm<T: Scalar>(
    model: &mut SllmModel<T>,
    paragraphs: &[Vec<TokenSequence>],
    val: &[Vec<TokenSequence>],
    settings: &TrainSettings,
    stop_loss_weight: f64,
    seed: u64,
    mut logger: Option<&mut MetricsLogger>,
) -> Result<SllmTrainReport<T>> {
    let usable: Vec<&Vec<TokenSequence>> =
        paragraphs.iter().filter(|p| p.len() >= 2).collect();
    let skipped = paragraphs.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::EmptyInput(
            "no multi-sentence paragraphs to train on".into(),
        ));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sllm-data-order"));
    let trainable = model.trainable_indices();
    let shapes: Vec<&[usize]> = trainable
        .iter()
        .map(|&i| model.store.value_at(i).shape())
        .collect();
    let mut opt = AdamW::new(&shapes, settings.weight_decay);
    let mut ema = Ema::new(model.store.values().iter(), settings.ema_decay);

    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let (mut last_loss, mut last_ppl) = (f64::NAN, f64::NAN);

    for step in 1..=settings.schedule.total_steps {
        let mut grad_sum: Option<Vec<Tensor<T>>> = None;
        let (mut acc_loss, mut acc_recon, mut acc_stop) = (0.0, 0.0, 0.0);
        for _ in 0..settings.accum_steps {
            let mut tape = Tape::new();
            let bound = model.bind_for_training(&mut tape);
            let mut total: Option<Var> = None;
            let (mut recon_v, mut stop_v) = (0.0, 0.0);
            for _ in 0..settings.batch_size {
                if cursor == usable.len() {
                    cursor = 0;
                    order.shuffle(&mut rng);
                }
                let sentences = usable[order[cursor]];
                cursor += 1;
                let loss =
                    model.paragraph_loss(&mut tape, &bound, sentences, stop_loss_weight)?;
                recon_v += tape.value(loss.reconstruction).item().as_f64();
                stop_v += tape.value(loss.stop).item().as_f64();
                total = Some(match total {
                    Some(acc) => tape.add(acc, loss.total),
                    None => loss.total,
                });
            }
            let sum = total.expect("batch_size >= 1");
            let mean = tape.scale(sum, 1.0 / settings.batch_size as f64);
            let loss_val = tape.value(mean).item().as_f64();
            if !loss_val.is_finite() {
                return Err(nonfinite_diagnostics(&tape, step));
            }
            acc_loss += loss_val;
            acc_recon += recon_v / settings.batch_size as f64;
            acc_stop += stop_v / settings.batch_size as f64;
            tape.backward(mean)?;
            let all_grads = collect_grads(&tape, &bound, &model.store);
            let grads: Vec<Tensor<T>> =
                trainable.iter().map(|&i| all_grads[i].clone()).collect();
            grad_sum = Some(match grad_sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                    acc
                }
            });
        }
        let mut grads = grad_sum.unwrap();
        if settings.accum_steps > 1 {
            let inv = T::of(1.0 / settings.accum_steps as f64);
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
        }
        clip_grad_l2(&mut grads, settings.clip_norm);
        let lr = lr_at(step, &settings.schedule);
        {
            let params = model
                .store
                .values_mut()
                .enumerate()
                .filter(|(i, _)| trainable.binary_search(i).is_ok())
                .map(|(_, v)| v);
            opt.step(params, &grads, lr);
        }
        ema.update(model.store.values().iter());

        let inv_accum = 1.0 / settings.accum_steps as f64;
        last_loss = acc_loss * inv_accum;
        if !val.is_empty()
            && (step % settings.eval_every == 0 || step == settings.schedule.total_steps)
        {
            last_ppl = model.mean_nll(val)?.exp();
        }
        if step % settings.log_every == 0 || step == settings.schedule.total_steps {
            if let Some(log) = logger.as_deref_mut() {
                log.log(
                    step,
                    &[
                        lr,
                        last_loss,
                        acc_recon * inv_accum,
                        acc_stop * inv_accum,
                        last_ppl,
                    ],
                    start.elapsed().as_secs_f64(),
                )?;
            }
        }
    }

    Ok(SllmTrainReport {
        steps: settings.schedule.total_steps,
        final_loss: last_loss,
        final_val_ppl: if last_ppl.is_nan() { None } else { Some(last_ppl) },
        skipped_single_sentence: skipped,
        ema: ema.shadow().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svae_cfg() -> SvaeConfig {
        SvaeConfig {
            hidden_size: 16,
            num_heads: 2,
            ffn_mult: 2,
            num_layers: 1,
            vocab_size: 12,
            max_sentence_tokens: 8,
        }
    }

    fn backbone_cfg() -> BlockConfig {
        BlockConfig {
            hidden_size: 16,
            num_heads: 2,
            ffn_mult: 2,
            num_layers: 2,
        }
    }

    fn model() -> SllmModel<f64> {
        let svae = SvaeModel::new(svae_cfg(), 11).unwrap();
        SllmModel::graft(&svae, backbone_cfg(), false, 7).unwrap()
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence { ids: ids.to_vec() }
    }

    #[test]
    fn graft_rejects_dimension_mismatch() {
        let svae = SvaeModel::<f64>::new(svae_cfg(), 1).unwrap();
        let wide = BlockConfig {
            hidden_size: 32,
            ..backbone_cfg()
        };
        assert!(matches!(
            SllmModel::graft(&svae, wide, false, 0),
            Err(Error::GraftDimensionMismatch { svae: 16, backbone: 32 })
        ));
    }

    #[test]
    fn graft_copies_svae_parameters_bitwise() {
        let svae = SvaeModel::<f64>::new(svae_cfg(), 11).unwrap();
        let m = SllmModel::graft(&svae, backbone_cfg(), true, 7).unwrap();
        for (offset, i) in m.svae_range.clone().enumerate() {
            assert_eq!(
                m.store.value_at(i).data(),
                svae.store.value_at(offset).data()
            );
        }
    }

    #[test]
    fn backbone_is_causal_over_sentence_positions() {
        let m = model();
        let svae = SvaeModel::<f64>::new(svae_cfg(), 11).unwrap();
        let o1 = svae.encode_sentence(&seq(&[4, 5])).unwrap();
        let o2 = svae.encode_sentence(&seq(&[6])).unwrap();
        let o3 = svae.encode_sentence(&seq(&[7, 8, 9])).unwrap();
        let o3_alt = svae.encode_sentence(&seq(&[10, 11])).unwrap();

        let base = m
            .backbone_hidden(&[o1.clone(), o2.clone(), o3])
            .unwrap();
        let changed = m.backbone_hidden(&[o1, o2, o3_alt]).unwrap();
        for i in 0..2 {
            for (a, b) in base.row(i).iter().zip(changed.row(i)) {
                assert!((a - b).abs() < 1e-7, "sentence position {i} leaked");
            }
        }
    }

    #[test]
    fn stop_head_zero_weights_tie_continues() {
        let mut m = model();
        *m.store.get_mut(m.layout.stop_head.weight) =
            Tensor::zeros(m.store.get(m.layout.stop_head.weight).shape());
        *m.store.get_mut(m.layout.stop_head.bias) =
            Tensor::zeros(m.store.get(m.layout.stop_head.bias).shape());
        let hidden = Tensor::new(vec![1, 16], (0..16).map(|i| i as f64).collect());
        let flags = m.stop_decision_value(&hidden);
        assert_eq!(flags[0][0], flags[0][1]);
        match m.next_sentence(hidden.row(0), &flags[0]).unwrap() {
            NextSentence::Token(tok) => assert_eq!(tok.vector().data(), hidden.row(0)),
            NextSentence::Stop => panic!("tie must continue"),
        }
    }

    #[test]
    fn stop_bias_forces_stop_signal() {
        let m = model();
        let hidden = Tensor::new(vec![1, 16], vec![0.5; 16]);
        match m.next_sentence(hidden.row(0), &[0.1, 0.9]).unwrap() {
            NextSentence::Stop => {}
            _ => panic!("expected stop"),
        }
        // continue case returns the hidden row itself, bitwise
        match m.next_sentence(hidden.row(0), &[0.9, 0.1]).unwrap() {
            NextSentence::Token(tok) => assert_eq!(tok.vector().data(), hidden.row(0)),
            _ => panic!("expected continue"),
        }
    }

    #[test]
    fn forced_stop_generates_empty_continuation_in_one_forward() {
        let mut m = model();
        let bias = m.store.get_mut(m.layout.stop_head.bias);
        bias.data_mut()[FLAG_STOP] = 100.0;
        let vocab = crate::text::Vocabulary::from_tokens(
            ["the", "cat", "runs", ".", "a", "dog", "sits", "!"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let out = m.generate(&vocab, "the cat runs.", 8).unwrap();
        assert_eq!(out.text, "");
        assert_eq!(out.trace.backbone_forwards, 1);
        assert_eq!(out.reason, TerminationReason::StopFlag);
        assert_eq!(
            out.trace.kv_elements_cached,
            (1 * 2 * 2 * 16) as u64 // one prompt sentence, 2 layers, d=16
        );
    }

    #[test]
    fn generation_trace_counts_forwards_per_sentence() {
        let m = model();
        let vocab = crate::text::Vocabulary::from_tokens(
            ["the", "cat", "runs", ".", "a", "dog", "sits", "!"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let out = m.generate(&vocab, "the cat runs.", 3).unwrap();
        let generated = out.trace.backbone_forwards
            - u64::from(out.reason == TerminationReason::StopFlag);
        // every non-stop forward emitted one sentence vector
        assert_eq!(generated, 3.min(out.trace.backbone_forwards));
        assert!(out.trace.backbone_forwards <= 4);
    }

    #[test]
    fn paragraph_loss_rejects_single_sentence() {
        let m = model();
        let mut tape = Tape::new();
        let b = m.bind_for_training(&mut tape);
        let sentences = vec![seq(&[4, 5])];
        assert!(m
            .paragraph_loss(&mut tape, &b, &sentences, 1.0)
            .is_err());
    }

    #[test]
    fn zero_stop_weight_reduces_total_to_reconstruction() {
        let m = model();
        let mut tape = Tape::new();
        let b = m.bind_for_training(&mut tape);
        let sentences = vec![seq(&[4, 5]), seq(&[6, 7]), seq(&[8])];
        let loss = m.paragraph_loss(&mut tape, &b, &sentences, 0.0).unwrap();
        let total = tape.value(loss.total).item();
        let recon = tape.value(loss.reconstruction).item();
        assert!((total - recon).abs() < 1e-15);
    }

    #[test]
    fn frozen_svae_receives_no_gradients() {
        let svae = SvaeModel::<f64>::new(svae_cfg(), 11).unwrap();
        let m = SllmModel::graft(&svae, backbone_cfg(), true, 7).unwrap();
        let mut tape = Tape::new();
        let b = m.bind_for_training(&mut tape);
        let sentences = vec![seq(&[4, 5]), seq(&[6, 7])];
        let loss = m.paragraph_loss(&mut tape, &b, &sentences, 1.0).unwrap();
        tape.backward(loss.total).unwrap();
        for i in m.svae_range.clone() {
            assert!(
                tape.grad(b.vars()[i]).is_none(),
                "frozen parameter {i} got a gradient"
            );
        }
        // backbone parameters do get gradients
        assert!(tape.grad(b.vars()[0]).is_some());
    }

    #[test]
    fn frozen_training_keeps_svae_bits() {
        let svae = SvaeModel::<f64>::new(svae_cfg(), 11).unwrap();
        let mut m = SllmModel::graft(&svae, backbone_cfg(), true, 7).unwrap();
        let before: Vec<Vec<f64>> = m.svae_range.clone()
            .map(|i| m.store.value_at(i).data().to_vec())
            .collect();
        let paragraphs = vec![
            vec![seq(&[4, 5]), seq(&[6, 7])],
            vec![seq(&[8]), seq(&[9, 10]), seq(&[11])],
        ];
        let settings = TrainSettings {
            schedule: crate::numerics::ScheduleConfig {
                base_lr: 1e-3,
                warmup_steps: 1,
                total_steps: 3,
            },
            weight_decay: 0.01,
            clip_norm: 1.0,
            ema_decay: 0.999,
            batch_size: 2,
            accum_steps: 1,
            log_every: 10,
            eval_every: 10,
        };
        train_sllm(&mut m, &paragraphs, &[], &settings, 1.0, 3, None).unwrap();
        for (before, i) in before.iter().zip(m.svae_range.clone()) {
            assert_eq!(before, m.store.value_at(i).data(), "frozen param {i} moved");
        }

        // unfrozen: svae parameters move after one step
        let mut m2 = SllmModel::graft(&svae, backbone_cfg(), false, 7).unwrap();
        let probe = m2.svae_range.start;
        let before = m2.store.value_at(probe).data().to_vec();
        let mut one_step = settings;
        one_step.schedule.total_steps = 2;
        train_sllm(&mut m2, &paragraphs, &[], &one_step, 1.0, 3, None).unwrap();
        assert_ne!(before, m2.store.value_at(probe).data());
    }

    #[test]
    fn teacher_forced_losses_match_incremental_evaluation() {
        let m = model();
        let sentences = vec![seq(&[4, 5, 6]), seq(&[7, 8]), seq(&[9, 10, 11])];
        let t = sentences.len();

        // teacher-forced route
        let mut tape = Tape::new();
        let b = m.store.bind_frozen(&mut tape);
        let omegas: Vec<Var> = sentences
            .iter()
            .map(|s| m.layout.svae.encode(&mut tape, &b, &m.svae_config, &s.ids))
            .collect();
        let hidden = m.backbone_forward(&mut tape, &b, &omegas[..t - 1]);
        let mut forced = Vec::new();
        for k in 0..t - 1 {
            let mem = tape.slice_rows(hidden, k, 1);
            let (input, targets) = teacher_pair(&sentences[k + 1]);
            let logits =
                m.layout
                    .svae
                    .decoder_logits(&mut tape, &b, &m.svae_config, &input, mem);
            let (loss, n) = focal_loss(&mut tape, logits, &targets, FOCAL_GAMMA);
            forced.push(tape.value(loss).item() / n as f64);
        }

        // incremental route: one sentence at a time
        let svae = m.svae_view();
        for k in 0..t - 1 {
            let omegas: Vec<SentenceToken<f64>> = sentences[..k + 1]
                .iter()
                .map(|s| svae.encode(&s.ids))
                .collect::<Result<_>>()
                .unwrap();
            let hidden = m.backbone_hidden(&omegas).unwrap();
            let mem = SentenceToken::new(Tensor::new(
                vec![hidden.last_dim()],
                hidden.row(k).to_vec(),
            ))
            .unwrap();
            let (input, targets) = teacher_pair(&sentences[k + 1]);
            let logits = svae.decoder_logits_value(&input, &mem).unwrap();
            let mut tape2 = Tape::<f64>::new();
            let lv = tape2.constant(logits);
            let loss = tape2.focal_loss(lv, std::sync::Arc::new(targets.clone()), FOCAL_GAMMA);
            let incremental = tape2.value(loss).item() / targets.len() as f64;
            assert!(
                (forced[k] - incremental).abs() <= 1e-5,
                "position {k}: {} vs {incremental}",
                forced[k]
            );
        }
    }
}
