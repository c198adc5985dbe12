//! Token-level decoder-only language model: embedding table, causal blocks,
//! vocabulary projection. The comparison point for the sentence-level model,
//! trained on the same corpus with the same budget.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, TrainSettings, FOCAL_GAMMA};
use crate::error::{Error, Result};
use crate::metrics::MetricsLogger;
use crate::nn::{
    collect_grads, sinusoidal_pe, AttentionMask, BlockConfig, BoundParams, LinearRef, PId,
    ParamStore, SelfBlockRef,
};
use crate::numerics::{argmax_slice, clip_grad_l2, lr_at, AdamW, Ema, Scalar, Tape, Tensor, Var};
use crate::svae::{focal_loss, nonfinite_diagnostics, row_nll};
use crate::text::{TokenSequence, BOS, EOS};

pub struct BaselineLayout {
    pub embed: PId,
    pub blocks: Vec<SelfBlockRef>,
    pub out_proj: LinearRef,
}

pub struct BaselineModel<T> {
    pub config: BlockConfig,
    pub vocab_size: usize,
    pub store: ParamStore<T>,
    pub layout: BaselineLayout,
}

impl<T: Scalar> BaselineModel<T> {
    pub fn new(config: BlockConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        if vocab_size <= 4 {
            return Err(Error::Config("vocab_size must exceed the specials".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "baseline-init"));
        let mut store = ParamStore::new();
        let embed = store.push(
            "embed",
            Tensor::randn(&[vocab_size, config.hidden_size], 0.02, &mut rng),
        );
        let blocks = (0..config.num_layers)
            .map(|i| SelfBlockRef::init(&mut store, &format!("block.{i}"), &config, &mut rng))
            .collect();
        let out_proj = LinearRef::init(
            &mut store,
            "out_proj",
            config.hidden_size,
            vocab_size,
            &mut rng,
        );
        Ok(BaselineModel {
            config,
            vocab_size,
            store,
            layout: BaselineLayout {
                embed,
                blocks,
                out_proj,
            },
        })
    }

    /// Causal logits `[len, vocab]` over a bos-prefixed token stream.
    pub fn logits(&self, tape: &mut Tape<T>, b: &BoundParams, input: &[u32]) -> Var {
        assert_eq!(input.first(), Some(&BOS), "baseline input must start with bos");
        let d = self.config.hidden_size;
        let e = tape.embed(b.var(self.layout.embed), std::sync::Arc::new(input.to_vec()));
        let pe = tape.constant(sinusoidal_pe(input.len(), d));
        let mut x = tape.add(e, pe);
        let mask = AttentionMask::causal(input.len());
        for block in &self.layout.blocks {
            x = block.forward(tape, b, x, Some(&mask));
        }
        self.layout.out_proj.forward(tape, b, x)
    }

    pub fn logits_value(&self, input: &[u32]) -> Result<Tensor<T>> {
        if input.first() != Some(&BOS) {
            return Err(Error::Config("input must start with <bos>".into()));
        }
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let l = self.logits(&mut tape, &b, input);
        Ok(tape.value(l).clone())
    }

    /// Mean per-token NLL over token streams (next-token prediction).
    pub fn mean_nll(&self, streams: &[Vec<u32>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for tokens in streams {
            if tokens.is_empty() {
                continue;
            }
            let (input, targets) = next_token_pair(tokens);
            let logits = self.logits_value(&input)?;
            for (row, &t) in targets.iter().enumerate() {
                total += row_nll(logits.row(row), t as usize);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput("no tokens to evaluate".into()));
        }
        Ok(total / count as f64)
    }

    /// Greedy token-by-token continuation; one backbone forward per emitted
    /// token. Returns the new tokens and the forward count.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> (Vec<u32>, u64) {
        let mut context: Vec<u32> = Vec::with_capacity(prompt.len() + max_new + 1);
        context.push(BOS);
        context.extend_from_slice(prompt);
        let mut out = Vec::new();
        let mut forwards = 0u64;
        while out.len() < max_new {
            let logits = self.logits_value(&context).expect("bos-prefixed context");
            forwards += 1;
            let next = argmax_slice(logits.row(logits.rows() - 1)) as u32;
            if next == EOS {
                break;
            }
            context.push(next);
            out.push(next);
        }
        (out, forwards)
    }
}

/// Flatten a paragraph's sentences into one token stream.
pub fn paragraph_stream(sentences: &[TokenSequence]) -> Vec<u32> {
    sentences.iter().flat_map(|s| s.ids.iter().copied()).collect()
}

/// Next-token alignment: input `[bos, w_1..w_T]`, target `[w_1..w_T, eos]`.
pub fn next_token_pair(tokens: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tokens);
    let mut targets = tokens.to_vec();
    targets.push(EOS);
    (input, targets)
}

pub struct BaselineTrainReport<T> {
    pub steps: u64,
    pub final_loss: f64,
    pub final_val_ppl: Option<f64>,
    pub ema: Vec<Tensor<T>>,
}

/// Next-token training over paragraph streams with the same focal objective
/// and optimizer recipe as the sentence-level model.
/// Metrics columns: `lr, loss, ppl`.
pub fn train_baseline<T: Scalar>(
    model: &mut BaselineModel<T>,
    streams: &[Vec<u32>],
    val: &[Vec<u32>],
    settings: &TrainSettings,
    seed: u64,
    mut logger: Option<&mut MetricsLogger>,
) -> Result<BaselineTrainReport<T>> {
    let usable: Vec<&Vec<u32>> = streams.iter().filter(|s| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::EmptyInput("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "baseline-data-order"));
    let shapes: Vec<&[usize]> = model.store.values().iter().map(|t| t.shape()).collect();
    let mut opt = AdamW::new(&shapes, settings.weight_decay);
    let mut ema = Ema::new(model.store.values().iter(), settings.ema_decay);

    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut last_loss = f64::NAN;
    let mut last_ppl = f64::NAN;

    for step in 1..=settings.schedule.total_steps {
        let mut tape = Tape::new();
        let bound = model.store.bind_all(&mut tape);
        let mut total: Option<Var> = None;
        let mut tokens = 0usize;
        for _ in 0..settings.batch_size {
            if cursor == usable.len() {
                cursor = 0;
                order.shuffle(&mut rng);
            }
            let stream = usable[order[cursor]];
            cursor += 1;
            let (input, targets) = next_token_pair(stream);
            let logits = model.logits(&mut tape, &bound, &input);
            let (loss, n) = focal_loss(&mut tape, logits, &targets, FOCAL_GAMMA);
            tokens += n;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss),
                None => loss,
            });
        }
        let sum = total.expect("batch_size >= 1");
        let mean = tape.scale(sum, 1.0 / tokens as f64);
        let loss_val = tape.value(mean).item().as_f64();
        if !loss_val.is_finite() {
            return Err(nonfinite_diagnostics(&tape, step));
        }
        tape.backward(mean)?;
        let mut grads = collect_grads(&tape, &bound, &model.store);
        clip_grad_l2(&mut grads, settings.clip_norm);
        let lr = lr_at(step, &settings.schedule);
        opt.step(model.store.values_mut(), &grads, lr);
        ema.update(model.store.values().iter());

        last_loss = loss_val;
        if !val.is_empty()
            && (step % settings.eval_every == 0 || step == settings.schedule.total_steps)
        {
            last_ppl = model.mean_nll(val)?.exp();
        }
        if step % settings.log_every == 0 || step == settings.schedule.total_steps {
            if let Some(log) = logger.as_deref_mut() {
                log.log(
                    step,
                    &[lr, last_loss, last_ppl],
                    start.elapsed().as_secs_f64(),
                )?;
            }
        }
    }

    Ok(BaselineTrainReport {
        steps: settings.schedule.total_steps,
        final_loss: last_loss,
        final_val_ppl: if last_ppl.is_nan() { None } else { Some(last_ppl) },
        ema: ema.shadow().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BlockConfig {
        BlockConfig {
            hidden_size: 16,
            num_heads: 2,
            ffn_mult: 2,
            num_layers: 1,
        }
    }

    #[test]
    fn logits_require_bos() {
        let m = BaselineModel::<f64>::new(cfg(), 10, 1).unwrap();
        assert!(m.logits_value(&[4, 5]).is_err());
        assert!(m.logits_value(&[BOS, 4, 5]).is_ok());
    }

    #[test]
    fn one_forward_per_generated_token() {
        let mut m = BaselineModel::<f32>::new(cfg(), 10, 1).unwrap();
        // push eos far down so the loop runs to the cap
        let bias = m.store.get_mut(m.layout.out_proj.bias);
        bias.data_mut()[EOS as usize] = -100.0;
        let (out, forwards) = m.generate_greedy(&[4], 5);
        assert_eq!(out.len(), 5);
        assert_eq!(forwards, 5);
    }

    #[test]
    fn forced_eos_stops_immediately() {
        let mut m = BaselineModel::<f32>::new(cfg(), 10, 1).unwrap();
        let bias = m.store.get_mut(m.layout.out_proj.bias);
        bias.data_mut()[EOS as usize] = 100.0;
        let (out, forwards) = m.generate_greedy(&[4], 5);
        assert!(out.is_empty());
        assert_eq!(forwards, 1);
    }

    #[test]
    fn paragraph_stream_flattens_in_order() {
        let s = vec![
            TokenSequence { ids: vec![4, 5] },
            TokenSequence { ids: vec![6] },
        ];
        assert_eq!(paragraph_stream(&s), vec![4, 5, 6]);
    }
}
