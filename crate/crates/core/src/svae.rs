//! Sentence autoencoder: encoder over word embeddings, feature fusion down to
//! one sentence vector, and a cross-attending decoder that reconstructs the
//! token sequence, trained with focal loss.
//!
//! Despite the family name there is no sampling and no KL term: the encoder
//! and decoder form a deterministic autoencoder.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, TrainSettings, FOCAL_GAMMA};
use crate::error::{Error, Result};
use crate::metrics::MetricsLogger;
use crate::nn::{
    collect_grads, sinusoidal_pe, AttentionMask, BlockConfig, BoundParams, CrossBlockRef,
    LayerNormRef, LinearRef, PId, ParamStore, SelfBlockRef,
};
use crate::numerics::{clip_grad_l2, lr_at, AdamW, Ema, Scalar, Tape, Tensor, Var};
use crate::text::{TokenSequence, BOS, EOS, MAX_SENTENCE_TOKENS};

/// Shape of a sentence autoencoder; encoder and decoder share the layer count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvaeConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub max_sentence_tokens: usize,
}

impl SvaeConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_mult: self.ffn_mult,
            num_layers: self.num_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate().map_err(Error::Config)?;
        if self.vocab_size <= 4 {
            return Err(Error::Config("vocab_size must exceed the specials".into()));
        }
        if self.max_sentence_tokens == 0 || self.max_sentence_tokens > MAX_SENTENCE_TOKENS {
            return Err(Error::Config(format!(
                "max_sentence_tokens must be in 1..={MAX_SENTENCE_TOKENS}"
            )));
        }
        Ok(())
    }
}

/// One fixed-width vector representing a whole sentence.
#[derive(Clone, Debug)]
pub struct SentenceToken<T> {
    vector: Tensor<T>,
}

impl<T: Scalar> SentenceToken<T> {
    pub fn new(vector: Tensor<T>) -> Result<Self> {
        if vector.shape().len() != 1 {
            return Err(Error::Config(format!(
                "sentence token must be rank 1, got {:?}",
                vector.shape()
            )));
        }
        if !vector.all_finite() {
            return Err(Error::NonFinite {
                context: "sentence token".into(),
            });
        }
        Ok(SentenceToken { vector })
    }

    pub fn vector(&self) -> &Tensor<T> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.numel()
    }

    /// View as a `[1, d]` matrix for attention memories and stacking.
    pub fn as_row(&self) -> Tensor<T> {
        self.vector.reshaped(vec![1, self.vector.numel()])
    }
}

/// Parameter ids for one sentence autoencoder inside a [`ParamStore`].
pub struct SvaeLayout {
    pub embed_enc: PId,
    pub enc_blocks: Vec<SelfBlockRef>,
    pub fuse_ln: LayerNormRef,
    pub embed_dec: PId,
    pub dec_blocks: Vec<CrossBlockRef>,
    pub out_proj: LinearRef,
}

impl SvaeLayout {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SvaeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.hidden_size;
        let block = cfg.block_config();
        let embed_enc = store.push(
            format!("{prefix}embed_enc"),
            Tensor::randn(&[cfg.vocab_size, d], 0.02, rng),
        );
        let enc_blocks = (0..cfg.num_layers)
            .map(|i| SelfBlockRef::init(store, &format!("{prefix}enc.{i}"), &block, rng))
            .collect();
        let fuse_ln = LayerNormRef::init(store, &format!("{prefix}fuse_ln"), d);
        let embed_dec = store.push(
            format!("{prefix}embed_dec"),
            Tensor::randn(&[cfg.vocab_size, d], 0.02, rng),
        );
        let dec_blocks = (0..cfg.num_layers)
            .map(|i| CrossBlockRef::init(store, &format!("{prefix}dec.{i}"), &block, rng))
            .collect();
        let out_proj = LinearRef::init(store, &format!("{prefix}out_proj"), d, cfg.vocab_size, rng);
        SvaeLayout {
            embed_enc,
            enc_blocks,
            fuse_ln,
            embed_dec,
            dec_blocks,
            out_proj,
        }
    }

    /// Embedding rows plus sinusoidal positions: `row i = table[ids[i]] + pe[i]`.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &BoundParams,
        table: PId,
        ids: &[u32],
        d: usize,
    ) -> Var {
        let e = tape.embed(b.var(table), Arc::new(ids.to_vec()));
        let pe = tape.constant(sinusoidal_pe(ids.len(), d));
        tape.add(e, pe)
    }

    /// Sum the `L` hidden rows and normalize: the feature-fusion step.
    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, b: &BoundParams, hidden: Var) -> Var {
        assert!(
            tape.value(hidden).rows() >= 1,
            "fuse: need at least one hidden row"
        );
        let summed = tape.sum_rows(hidden);
        let row = tape.reshape(summed, vec![1, tape.value(summed).numel()]);
        self.fuse_ln.forward(tape, b, row)
    }

    /// Encoder stack then fusion; returns the sentence vector as `[1, d]`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &BoundParams,
        cfg: &SvaeConfig,
        ids: &[u32],
    ) -> Var {
        assert!(
            !ids.is_empty() && ids.len() <= cfg.max_sentence_tokens,
            "encode: sentence length {} outside 1..={}",
            ids.len(),
            cfg.max_sentence_tokens
        );
        let mut x = self.embed(tape, b, self.embed_enc, ids, cfg.hidden_size);
        for block in &self.enc_blocks {
            x = block.forward(tape, b, x, None);
        }
        self.fuse(tape, b, x)
    }

    /// Causal decoder over a bos-prefixed input with cross-attention to the
    /// sentence vector; logits `[len, vocab]`, row `i` depends only on
    /// `input[0..=i]` and the memory.
    pub fn decoder_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &BoundParams,
        cfg: &SvaeConfig,
        input: &[u32],
        omega: Var,
    ) -> Var {
        assert_eq!(input.first(), Some(&BOS), "decoder input must start with bos");
        assert!(
            input.len() <= cfg.max_sentence_tokens + 1,
            "decoder input length {} over cap",
            input.len()
        );
        let mask = AttentionMask::causal(input.len());
        let mut x = self.embed(tape, b, self.embed_dec, input, cfg.hidden_size);
        for block in &self.dec_blocks {
            x = block.forward(tape, b, x, omega, &mask);
        }
        self.out_proj.forward(tape, b, x)
    }
}

/// Summed focal loss plus the token count for mean normalization.
pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[u32],
    gamma: f64,
) -> (Var, usize) {
    let loss = tape.focal_loss(logits, Arc::new(targets.to_vec()), gamma);
    (loss, targets.len())
}

/// A sentence autoencoder and its parameters.
pub struct SvaeModel<T> {
    pub config: SvaeConfig,
    pub store: ParamStore<T>,
    pub layout: SvaeLayout,
}

impl<T: Scalar> SvaeModel<T> {
    pub fn new(config: SvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "svae-init"));
        let mut store = ParamStore::new();
        let layout = SvaeLayout::init(&mut store, "", &config, &mut rng);
        Ok(SvaeModel {
            config,
            store,
            layout,
        })
    }

    fn check_len(&self, seq: &TokenSequence) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::EmptyTokenSequence);
        }
        if seq.len() > self.config.max_sentence_tokens {
            return Err(Error::OverLength {
                len: seq.len(),
                max: self.config.max_sentence_tokens,
            });
        }
        Ok(())
    }

    /// Compress one sentence into its sentence vector.
    pub fn encode_sentence(&self, seq: &TokenSequence) -> Result<SentenceToken<T>> {
        self.check_len(seq)?;
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let omega = self.layout.encode(&mut tape, &b, &self.config, &seq.ids);
        let d = self.config.hidden_size;
        SentenceToken::new(tape.value(omega).reshaped(vec![d]))
    }

    /// Teacher-forced decoder logits for a bos-prefixed input.
    pub fn decoder_logits_value(
        &self,
        input: &[u32],
        omega: &SentenceToken<T>,
    ) -> Result<Tensor<T>> {
        if input.first() != Some(&BOS) {
            return Err(Error::Config("decoder input must start with <bos>".into()));
        }
        if input.len() > self.config.max_sentence_tokens + 1 {
            return Err(Error::OverLength {
                len: input.len(),
                max: self.config.max_sentence_tokens + 1,
            });
        }
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let om = tape.constant(omega.as_row());
        let logits = self
            .layout
            .decoder_logits(&mut tape, &b, &self.config, input, om);
        Ok(tape.value(logits).clone())
    }

    /// Greedy iterative decode: grow a bos-prefixed prefix by the argmax
    /// token until `<eos>` or `max_len` tokens; returned ids exclude bos/eos.
    pub fn decode_greedy(&self, omega: &SentenceToken<T>, max_len: usize) -> Vec<u32> {
        self.decode_greedy_traced(omega, max_len).0
    }

    /// Greedy decode plus the number of decoder forward passes taken.
    pub fn decode_greedy_traced(
        &self,
        omega: &SentenceToken<T>,
        max_len: usize,
    ) -> (Vec<u32>, u64) {
        let mut out: Vec<u32> = Vec::new();
        let mut steps = 0u64;
        while out.len() < max_len {
            let mut input = Vec::with_capacity(out.len() + 1);
            input.push(BOS);
            input.extend_from_slice(&out);
            let logits = self
                .decoder_logits_value(&input, omega)
                .expect("decode prefix stays within cap");
            steps += 1;
            let last = logits.row(logits.rows() - 1);
            let next = crate::numerics::argmax_slice(last) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        (out, steps)
    }

    /// Encode then greedily decode; the round trip behind reconstruction
    /// accuracy measurements.
    pub fn reconstruct(&self, seq: &TokenSequence) -> Result<Vec<u32>> {
        let omega = self.encode_sentence(seq)?;
        Ok(self.decode_greedy(&omega, self.config.max_sentence_tokens))
    }

    /// Mean per-token negative log-likelihood of teacher-forced reconstruction
    /// over a sentence set (cross-entropy, independent of the focal exponent).
    pub fn mean_nll(&self, seqs: &[TokenSequence]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in seqs {
            self.check_len(seq)?;
            let omega = self.encode_sentence(seq)?;
            let (input, targets) = teacher_pair(seq);
            let logits = self.decoder_logits_value(&input, &omega)?;
            for (row, &t) in targets.iter().enumerate() {
                total += row_nll(logits.row(row), t as usize);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput("no sentences to evaluate".into()));
        }
        Ok(total / count as f64)
    }

    /// Fraction of sentences whose greedy reconstruction matches exactly.
    pub fn reconstruction_accuracy(&self, seqs: &[TokenSequence]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("no sentences".into()));
        }
        let mut hits = 0usize;
        for seq in seqs {
            if self.reconstruct(seq)? == seq.ids {
                hits += 1;
            }
        }
        Ok(hits as f64 / seqs.len() as f64)
    }
}

/// Negative log-likelihood of `target` under a softmax of `row`, in f64.
pub(crate) fn row_nll<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    lse - row[target].as_f64()
}

/// Training alignment: input `[bos, d_1..d_L]`, target `[d_1..d_L, eos]`.
pub fn teacher_pair(seq: &TokenSequence) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(seq.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&seq.ids);
    let mut targets = seq.ids.clone();
    targets.push(EOS);
    (input, targets)
}

/// Outcome of a training run.
pub struct TrainReport<T> {
    pub steps: u64,
    pub final_loss: f64,
    pub final_val_ppl: Option<f64>,
    /// EMA weights for evaluation; raw weights stay in the model.
    pub ema: Vec<Tensor<T>>,
}

/// Self-supervised training: reconstruct each sentence from its own vector.
/// Metrics columns: `lr, loss, loss_sum, ppl`.
pub fn train_svae<T: Scalar>(
    model: &mut SvaeModel<T>,
    train: &[TokenSequence],
    val: &[TokenSequence],
    settings: &TrainSettings,
    seed: u64,
    mut logger: Option<&mut MetricsLogger>,
) -> Result<TrainReport<T>> {
    if train.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "svae-data-order"));
    let shapes: Vec<&[usize]> = model.store.values().iter().map(|t| t.shape()).collect();
    let mut opt = AdamW::new(&shapes, settings.weight_decay);
    let mut ema = Ema::new(model.store.values().iter(), settings.ema_decay);

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut last_loss = f64::NAN;
    let mut last_ppl = f64::NAN;

    for step in 1..=settings.schedule.total_steps {
        let mut grad_sum: Option<Vec<Tensor<T>>> = None;
        let mut micro_losses = 0.0;
        let mut micro_sums = 0.0;
        for _ in 0..settings.accum_steps {
            let mut tape = Tape::new();
            let bound = model.store.bind_all(&mut tape);
            let mut total: Option<Var> = None;
            let mut tokens = 0usize;
            for _ in 0..settings.batch_size {
                if cursor == train.len() {
                    cursor = 0;
                    order.shuffle(&mut rng);
                }
                let seq = &train[order[cursor]];
                cursor += 1;
                let omega = model.layout.encode(&mut tape, &bound, &model.config, &seq.ids);
                let (input, targets) = teacher_pair(seq);
                let logits =
                    model
                        .layout
                        .decoder_logits(&mut tape, &bound, &model.config, &input, omega);
                let (loss, n) = focal_loss(&mut tape, logits, &targets, FOCAL_GAMMA);
                tokens += n;
                total = Some(match total {
                    Some(t) => tape.add(t, loss),
                    None => loss,
                });
            }
            let sum = total.expect("batch_size >= 1");
            let mean = tape.scale(sum, 1.0 / tokens as f64);
            let loss_val = tape.value(mean).item().as_f64();
            if !loss_val.is_finite() {
                return Err(nonfinite_diagnostics(&tape, step));
            }
            micro_losses += loss_val;
            micro_sums += tape.value(sum).item().as_f64();
            tape.backward(mean)?;
            let grads = collect_grads(&tape, &bound, &model.store);
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
        opt.step(model.store.values_mut(), &grads, lr);
        ema.update(model.store.values().iter());

        last_loss = micro_losses / settings.accum_steps as f64;
        let loss_sum = micro_sums / settings.accum_steps as f64;
        if !val.is_empty() && (step % settings.eval_every == 0 || step == settings.schedule.total_steps)
        {
            last_ppl = model.mean_nll(val)?.exp();
        }
        if step % settings.log_every == 0 || step == settings.schedule.total_steps {
            if let Some(log) = logger.as_deref_mut() {
                log.log(
                    step,
                    &[lr, last_loss, loss_sum, last_ppl],
                    start.elapsed().as_secs_f64(),
                )?;
            }
        }
    }

    Ok(TrainReport {
        steps: settings.schedule.total_steps,
        final_loss: last_loss,
        final_val_ppl: if last_ppl.is_nan() { None } else { Some(last_ppl) },
        ema: ema.shadow().to_vec(),
    })
}

pub(crate) fn nonfinite_diagnostics<T: Scalar>(tape: &Tape<T>, step: u64) -> Error {
    let where_ = tape
        .first_nonfinite()
        .map(|(i, op)| format!("{op} node {i}"))
        .unwrap_or_else(|| "loss reduction".into());
    Error::NonFinite {
        context: format!("training step {step}, first at {where_}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SvaeConfig {
        SvaeConfig {
            hidden_size: 16,
            num_heads: 2,
            ffn_mult: 2,
            num_layers: 1,
            vocab_size: 12,
            max_sentence_tokens: 8,
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence { ids: ids.to_vec() }
    }

    #[test]
    fn embed_rows_differ_by_position_encoding() {
        let model = SvaeModel::<f64>::new(tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        let b = model.store.bind_frozen(&mut tape);
        let e = model
            .layout
            .embed(&mut tape, &b, model.layout.embed_enc, &[5, 5], 16);
        let v = tape.value(e);
        let pe = sinusoidal_pe::<f64>(2, 16);
        for j in 0..16 {
            let diff = v.row(1)[j] - v.row(0)[j];
            let want = pe.row(1)[j] - pe.row(0)[j];
            assert!((diff - want).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let model = SvaeModel::<f32>::new(tiny_config(), 42).unwrap();
        let s = seq(&[4, 5, 6]);
        let a = model.encode_sentence(&s).unwrap();
        let b = model.encode_sentence(&s).unwrap();
        assert_eq!(a.vector().data(), b.vector().data());
    }

    #[test]
    fn encode_rejects_over_length_and_empty() {
        let model = SvaeModel::<f32>::new(tiny_config(), 0).unwrap();
        assert!(matches!(
            model.encode_sentence(&seq(&[4; 9])),
            Err(Error::OverLength { .. })
        ));
        assert!(matches!(
            model.encode_sentence(&seq(&[])),
            Err(Error::EmptyTokenSequence)
        ));
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let model = SvaeModel::<f64>::new(tiny_config(), 3).unwrap();
        let mut tape = Tape::new();
        let b = model.store.bind_frozen(&mut tape);
        let rows: Vec<f64> = (0..48).map(|i| (i as f64 * 0.31).sin()).collect();
        let permuted: Vec<f64> = rows[16..48]
            .iter()
            .chain(rows[..16].iter())
            .copied()
            .collect();
        let h = tape.constant(Tensor::new(vec![3, 16], rows));
        let hp = tape.constant(Tensor::new(vec![3, 16], permuted));
        let a = model.layout.fuse(&mut tape, &b, h);
        let c = model.layout.fuse(&mut tape, &b, hp);
        assert_eq!(tape.value(a).data(), tape.value(c).data());
    }

    #[test]
    fn fusion_is_scale_invariant_as_eps_vanishes() {
        // gamma = 1, beta = 0: normalizing 2H equals normalizing H in the
        // eps -> 0 limit of the fusion layer norm
        let mut tape = Tape::<f64>::new();
        let rows: Vec<f64> = (0..32).map(|i| (i as f64 * 0.17).cos()).collect();
        let doubled: Vec<f64> = rows.iter().map(|v| v * 2.0).collect();
        let gamma = tape.constant(Tensor::from_vec(vec![1.0; 16]));
        let beta = tape.constant(Tensor::from_vec(vec![0.0; 16]));
        let h = tape.constant(Tensor::new(vec![2, 16], rows));
        let h2 = tape.constant(Tensor::new(vec![2, 16], doubled));
        let s1 = tape.sum_rows(h);
        let s2 = tape.sum_rows(h2);
        let a = tape.layer_norm(s1, gamma, beta, 1e-12);
        let c = tape.layer_norm(s2, gamma, beta, 1e-12);
        for (x, y) in tape.value(a).data().iter().zip(tape.value(c).data()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn fuse_of_single_row_is_layer_norm() {
        let model = SvaeModel::<f64>::new(tiny_config(), 3).unwrap();
        let mut tape = Tape::new();
        let b = model.store.bind_frozen(&mut tape);
        let row: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 4.0).collect();
        let h = tape.constant(Tensor::new(vec![1, 16], row.clone()));
        let fused = model.layout.fuse(&mut tape, &b, h);
        let x = tape.constant(Tensor::new(vec![1, 16], row));
        let ln = model.layout.fuse_ln.forward(&mut tape, &b, x);
        assert_eq!(tape.value(fused).data(), tape.value(ln).data());
    }

    #[test]
    fn decoder_logits_are_causal() {
        let model = SvaeModel::<f64>::new(tiny_config(), 5).unwrap();
        let omega = model.encode_sentence(&seq(&[4, 5])).unwrap();
        let a = model
            .decoder_logits_value(&[BOS, 4, 5, 6], &omega)
            .unwrap();
        let b = model
            .decoder_logits_value(&[BOS, 4, 5, 7], &omega)
            .unwrap();
        // perturbing position 3 leaves rows 0..3 unchanged
        for row in 0..3 {
            for (x, y) in a.row(row).iter().zip(b.row(row)) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zeroed_cross_projection_ignores_omega() {
        let mut model = SvaeModel::<f64>::new(tiny_config(), 5).unwrap();
        for block in &model.layout.dec_blocks {
            let pid = block.cross_attn.output.weight;
            *model.store.get_mut(pid) = Tensor::zeros(model.store.get(pid).shape());
        }
        let zero = SentenceToken::new(Tensor::zeros(&[16])).unwrap();
        let random =
            SentenceToken::new(Tensor::new(vec![16], (0..16).map(|i| i as f64).collect()))
                .unwrap();
        let a = model.decoder_logits_value(&[BOS, 4], &zero).unwrap();
        let b = model.decoder_logits_value(&[BOS, 4], &random).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forced_eos_gives_empty_decode() {
        let mut model = SvaeModel::<f32>::new(tiny_config(), 5).unwrap();
        let bias = model.store.get_mut(model.layout.out_proj.bias);
        bias.data_mut()[EOS as usize] = 100.0;
        let omega = model.encode_sentence(&seq(&[4])).unwrap();
        let (ids, steps) = model.decode_greedy_traced(&omega, 8);
        assert!(ids.is_empty());
        assert_eq!(steps, 1);
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let model = SvaeModel::<f32>::new(tiny_config(), 9).unwrap();
        let omega = model.encode_sentence(&seq(&[4, 6, 8])).unwrap();
        assert_eq!(model.decode_greedy(&omega, 8), model.decode_greedy(&omega, 8));
    }

    #[test]
    fn teacher_forced_rows_match_incremental_decode() {
        let model = SvaeModel::<f64>::new(tiny_config(), 13).unwrap();
        let s = seq(&[4, 5, 6, 7]);
        let omega = model.encode_sentence(&s).unwrap();
        let (input, _) = teacher_pair(&s);
        let full = model.decoder_logits_value(&input, &omega).unwrap();
        for l in 1..=input.len() {
            let partial = model.decoder_logits_value(&input[..l], &omega).unwrap();
            let want = full.row(l - 1);
            let got = partial.row(l - 1);
            for (a, c) in want.iter().zip(got) {
                assert!((a - c).abs() < 1e-5, "prefix {l} diverged");
            }
        }
    }

    #[test]
    fn zero_lr_training_leaves_parameters_untouched() {
        let mut model = SvaeModel::<f32>::new(tiny_config(), 21).unwrap();
        let before: Vec<Vec<f32>> = model
            .store
            .values()
            .iter()
            .map(|t| t.data().to_vec())
            .collect();
        let data = vec![seq(&[4, 5]), seq(&[6, 7, 8])];
        let settings = TrainSettings {
            schedule: crate::numerics::ScheduleConfig {
                // zero lr throughout: warmup never ends
                base_lr: 1e-9,
                warmup_steps: 1000,
                total_steps: 3,
            },
            weight_decay: 0.0,
            clip_norm: 1.0,
            ema_decay: 0.999,
            batch_size: 2,
            accum_steps: 1,
            log_every: 10,
            eval_every: 10,
        };
        // base_lr * step/warmup is ~1e-12; with weight_decay 0 the update is
        // below f32 resolution only if lr is exactly 0, so use lr via scale 0
        let mut settings = settings;
        settings.schedule.base_lr = f64::MIN_POSITIVE;
        train_svae(&mut model, &data, &[], &settings, 7, None).unwrap();
        for (b, t) in before.iter().zip(model.store.values()) {
            for (x, y) in b.iter().zip(t.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
