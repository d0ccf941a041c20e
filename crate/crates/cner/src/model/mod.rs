//! Miniature transformer encoder with a per-token classifier over an
//! expandable BIO tag space. Forward passes expose per-layer attention
//! scores so they can be distilled.

mod io;

pub use io::{load_checkpoint, save_checkpoint};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::OUTSIDE;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Which attention tensor the forward pass records for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Scaled dot-product logits. Keeps all pooled losses informative.
    #[default]
    PreSoftmax,
    /// Row-stochastic attention maps. Fully pooled losses degenerate to zero.
    PostSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub attention_mode: AttentionMode,
}

impl TaggerConfig {
    /// Desk-scale defaults: big enough that pooled losses over heads and
    /// sequence positions are non-degenerate, small enough for minutes-long
    /// runs.
    pub fn desk_scale(vocab_size: usize, seed: u64) -> Self {
        TaggerConfig {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_len: 32,
            seed,
            attention_mode: AttentionMode::PreSoftmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_len,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Contract(
                "all tagger config counts must be at least 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-layer attention tensors of shape `[n_heads, n, n]`, captured during a
/// forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub scores: Vec<Tensor>,
    pub mode: AttentionMode,
}

/// Per-token distributions over the tag space. `log_probs` is the exact
/// elementwise log of `probs`.
#[derive(Debug, Clone)]
pub struct PredictionDistribution {
    pub probs: Tensor,
    pub log_probs: Tensor,
}

impl PredictionDistribution {
    pub fn num_tokens(&self) -> usize {
        self.probs.shape[0]
    }

    pub fn num_tags(&self) -> usize {
        self.probs.shape[1]
    }

    pub fn prob_row(&self, token: usize) -> &[f64] {
        let c = self.num_tags();
        &self.probs.data[token * c..(token + 1) * c]
    }

    pub fn argmax_tag(&self, token: usize) -> usize {
        let row = self.prob_row(token);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Weight leaves a model registered on a tape, in checkpoint order.
#[derive(Debug, Clone)]
pub struct RegisteredParams {
    pub ids: IndexMap<String, TensorId>,
}

impl RegisteredParams {
    fn get(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    pub fn named(&self) -> Vec<(String, TensorId)> {
        self.ids.iter().map(|(n, id)| (n.clone(), *id)).collect()
    }
}

/// Handles into a training tape for one sentence's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardHandles {
    pub logits: TensorId,
    pub log_probs: TensorId,
    /// One `[n_heads, n, n]` tensor per layer, in the configured mode.
    pub trace: Vec<TensorId>,
}

/// Named, shaped weights of a tagger at one continual step.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: TaggerConfig,
    pub named_weights: IndexMap<String, Tensor>,
    pub tag_space: Vec<String>,
    pub step_index: usize,
}

impl ModelCheckpoint {
    /// Fresh seeded model over the given tag space (`tag_space[0]` must be
    /// "O"). Matrices are N(0, 0.02), biases zero, layer-norm scales one.
    pub fn new(config: TaggerConfig, tag_space: Vec<String>) -> Result<Self> {
        config.validate()?;
        if tag_space.first().map(String::as_str) != Some(OUTSIDE) {
            return Err(Error::Checkpoint(format!(
                "tag space must start with {OUTSIDE}, got {:?}",
                tag_space.first()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut weights = IndexMap::new();
        let insert_gauss = |weights: &mut IndexMap<String, Tensor>,
                                rng: &mut ChaCha8Rng,
                                name: String,
                                shape: Vec<usize>| {
            let t = gaussian_tensor(rng, shape).with_grad();
            weights.insert(name, t);
        };
        let insert_const = |weights: &mut IndexMap<String, Tensor>,
                            name: String,
                            shape: Vec<usize>,
                            value: f64| {
            let numel = shape.iter().product();
            let t = Tensor {
                shape,
                data: vec![value; numel],
                requires_grad: true,
                grad: None,
            };
            weights.insert(name, t);
        };

        insert_gauss(
            &mut weights,
            &mut rng,
            "embed.token".into(),
            vec![config.vocab_size, d],
        );
        insert_gauss(
            &mut weights,
            &mut rng,
            "embed.position".into(),
            vec![config.max_len, d],
        );
        for layer in 0..config.n_layers {
            for proj in ["w_q", "w_k", "w_v", "w_o"] {
                insert_gauss(
                    &mut weights,
                    &mut rng,
                    format!("layer{layer}.attn.{proj}"),
                    vec![d, d],
                );
            }
            for bias in ["b_q", "b_k", "b_v", "b_o"] {
                insert_const(
                    &mut weights,
                    format!("layer{layer}.attn.{bias}"),
                    vec![d],
                    0.0,
                );
            }
            insert_const(&mut weights, format!("layer{layer}.norm1.gamma"), vec![d], 1.0);
            insert_const(&mut weights, format!("layer{layer}.norm1.beta"), vec![d], 0.0);
            insert_gauss(
                &mut weights,
                &mut rng,
                format!("layer{layer}.ffn.w_1"),
                vec![d, config.d_ff],
            );
            insert_const(&mut weights, format!("layer{layer}.ffn.b_1"), vec![config.d_ff], 0.0);
            insert_gauss(
                &mut weights,
                &mut rng,
                format!("layer{layer}.ffn.w_2"),
                vec![config.d_ff, d],
            );
            insert_const(&mut weights, format!("layer{layer}.ffn.b_2"), vec![d], 0.0);
            insert_const(&mut weights, format!("layer{layer}.norm2.gamma"), vec![d], 1.0);
            insert_const(&mut weights, format!("layer{layer}.norm2.beta"), vec![d], 0.0);
        }
        // one classifier row per tag
        insert_gauss(
            &mut weights,
            &mut rng,
            "classifier.weight".into(),
            vec![tag_space.len(), d],
        );
        insert_const(&mut weights, "classifier.bias".into(), vec![tag_space.len()], 0.0);

        Ok(ModelCheckpoint {
            config,
            named_weights: weights,
            tag_space,
            step_index: 0,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.tag_space.len()
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.tag_space.iter().position(|t| t == tag)
    }

    /// Total number of weight scalars.
    pub fn num_parameters(&self) -> usize {
        self.named_weights.values().map(Tensor::numel).sum()
    }

    /// Inserts every weight as a tape leaf, in checkpoint order.
    pub fn register_on_tape(&self, tape: &mut Tape) -> RegisteredParams {
        let ids = self
            .named_weights
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect();
        RegisteredParams { ids }
    }

    /// Builds the forward graph for one sentence on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &RegisteredParams,
        token_ids: &[usize],
    ) -> Result<ForwardHandles> {
        let n = token_ids.len();
        if n == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                n, self.config.max_len
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {} out of vocabulary (size {})",
                bad, self.config.vocab_size
            )));
        }

        let tok = tape.gather_rows(params.get("embed.token"), token_ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(params.get("embed.position"), &positions)?;
        let mut x = tape.add(tok, pos)?;

        let heads = self.config.n_heads;
        let d_head = self.config.d_model / heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut trace = Vec::with_capacity(self.config.n_layers);

        for layer in 0..self.config.n_layers {
            let p = |suffix: &str| params.get(&format!("layer{layer}.{suffix}"));
            let q = {
                let mm = tape.matmul(x, p("attn.w_q"))?;
                tape.add_row_vec(mm, p("attn.b_q"))?
            };
            let k = {
                let mm = tape.matmul(x, p("attn.w_k"))?;
                tape.add_row_vec(mm, p("attn.b_k"))?
            };
            let v = {
                let mm = tape.matmul(x, p("attn.w_v"))?;
                tape.add_row_vec(mm, p("attn.b_v"))?
            };

            let mut head_scores = Vec::with_capacity(heads);
            let mut head_probs = Vec::with_capacity(heads);
            let mut head_ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let (from, to) = (h * d_head, (h + 1) * d_head);
                let qh = tape.slice_cols(q, from, to)?;
                let kh = tape.slice_cols(k, from, to)?;
                let vh = tape.slice_cols(v, from, to)?;
                let kht = tape.transpose(kh)?;
                let raw = tape.matmul(qh, kht)?;
                let scores = tape.scale(raw, scale);
                let probs = tape.softmax(scores, 1)?;
                let ctx = tape.matmul(probs, vh)?;
                head_scores.push(scores);
                head_probs.push(probs);
                head_ctx.push(ctx);
            }
            trace.push(match self.config.attention_mode {
                AttentionMode::PreSoftmax => tape.stack_first(&head_scores)?,
                AttentionMode::PostSoftmax => tape.stack_first(&head_probs)?,
            });

            let ctx = tape.concat_cols(&head_ctx)?;
            let attn = {
                let mm = tape.matmul(ctx, p("attn.w_o"))?;
                tape.add_row_vec(mm, p("attn.b_o"))?
            };
            let res1 = tape.add(x, attn)?;
            x = tape.layer_norm(res1, p("norm1.gamma"), p("norm1.beta"), LN_EPS)?;

            let hidden = {
                let mm = tape.matmul(x, p("ffn.w_1"))?;
                let lin = tape.add_row_vec(mm, p("ffn.b_1"))?;
                tape.gelu(lin)
            };
            let ff = {
                let mm = tape.matmul(hidden, p("ffn.w_2"))?;
                tape.add_row_vec(mm, p("ffn.b_2"))?
            };
            let res2 = tape.add(x, ff)?;
            x = tape.layer_norm(res2, p("norm2.gamma"), p("norm2.beta"), LN_EPS)?;
        }

        let wc_t = tape.transpose(params.get("classifier.weight"))?;
        let logits = {
            let mm = tape.matmul(x, wc_t)?;
            tape.add_row_vec(mm, params.get("classifier.bias"))?
        };
        let log_probs = tape.log_softmax(logits, 1)?;
        Ok(ForwardHandles {
            logits,
            log_probs,
            trace,
        })
    }

    /// Inference: per-token distributions plus the attention trace.
    pub fn forward(
        &self,
        token_ids: &[usize],
    ) -> Result<(PredictionDistribution, AttentionTrace)> {
        let mut tape = Tape::new();
        let params = self.register_on_tape(&mut tape);
        let handles = self.forward_on_tape(&mut tape, &params, token_ids)?;
        let log_probs = tape.value(handles.log_probs).clone();
        let probs = Tensor {
            shape: log_probs.shape.clone(),
            data: log_probs.data.iter().map(|lp| lp.exp()).collect(),
            requires_grad: false,
            grad: None,
        };
        let scores = handles
            .trace
            .iter()
            .map(|&id| {
                let mut t = tape.value(id).clone();
                t.requires_grad = false;
                t.grad = None;
                t
            })
            .collect();
        Ok((
            PredictionDistribution {
                probs,
                log_probs: Tensor {
                    requires_grad: false,
                    grad: None,
                    ..log_probs
                },
            },
            AttentionTrace {
                scores,
                mode: self.config.attention_mode,
            },
        ))
    }

    /// Raw classifier logits for a sentence (test and debugging aid).
    pub fn logits(&self, token_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register_on_tape(&mut tape);
        let handles = self.forward_on_tape(&mut tape, &params, token_ids)?;
        Ok(tape.value(handles.logits).clone())
    }

    /// Argmax tag strings per token.
    pub fn predict_tags(&self, token_ids: &[usize]) -> Result<Vec<String>> {
        let (dist, _) = self.forward(token_ids)?;
        Ok((0..dist.num_tokens())
            .map(|i| self.tag_space[dist.argmax_tag(i)].clone())
            .collect())
    }

    /// Grows the classifier by one row per new tag. Existing rows are copied
    /// bit-exactly; new rows are seeded Gaussian, new bias entries zero.
    pub fn expand_head(&self, new_tags: &[String]) -> Result<ModelCheckpoint> {
        for tag in new_tags {
            if self.tag_space.contains(tag) {
                return Err(Error::Schedule(format!(
                    "tag {tag} already present in the tag space"
                )));
            }
        }
        let mut expanded = self.clone();
        if new_tags.is_empty() {
            return Ok(expanded);
        }
        let d = self.config.d_model;
        let old_count = self.tag_space.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            0x9e3779b97f4a7c15 ^ old_count as u64,
        ));

        let weight = expanded
            .named_weights
            .get_mut("classifier.weight")
            .expect("classifier.weight always present");
        let fresh = gaussian_tensor(&mut rng, vec![new_tags.len(), d]);
        weight.data.extend_from_slice(&fresh.data);
        weight.shape[0] += new_tags.len();

        let bias = expanded
            .named_weights
            .get_mut("classifier.bias")
            .expect("classifier.bias always present");
        bias.data.extend(std::iter::repeat(0.0).take(new_tags.len()));
        bias.shape[0] += new_tags.len();

        expanded.tag_space.extend(new_tags.iter().cloned());
        Ok(expanded)
    }

    /// Deep copy with gradients disabled on every weight.
    pub fn clone_frozen(&self) -> ModelCheckpoint {
        let mut frozen = self.clone();
        for tensor in frozen.named_weights.values_mut() {
            tensor.requires_grad = false;
            tensor.grad = None;
        }
        frozen
    }
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let numel = shape.iter().product();
    Tensor {
        shape,
        data: (0..numel).map(|_| normal.sample(rng)).collect(),
        requires_grad: false,
        grad: None,
    }
}

/// splitmix64-style seed derivation for independent RNG streams.
pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelCheckpoint {
        let config = TaggerConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 12,
            seed: 7,
            attention_mode: AttentionMode::PreSoftmax,
        };
        let tags = vec!["O".into(), "B-A".into(), "I-A".into()];
        ModelCheckpoint::new(config, tags).unwrap()
    }

    #[test]
    fn config_requires_divisible_heads() {
        let mut config = TaggerConfig::desk_scale(10, 0);
        config.n_heads = 5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn zeroed_classifier_gives_uniform_distribution() {
        let mut model = tiny_model();
        for name in ["classifier.weight", "classifier.bias"] {
            let w = model.named_weights.get_mut(name).unwrap();
            w.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (dist, _) = model.forward(&[1, 2, 3]).unwrap();
        let c = dist.num_tags() as f64;
        for v in &dist.probs.data {
            assert!((v - 1.0 / c).abs() < 1e-12);
        }
    }

    #[test]
    fn post_softmax_trace_rows_are_stochastic() {
        let mut model = tiny_model();
        model.config.attention_mode = AttentionMode::PostSoftmax;
        let (_, trace) = model.forward(&[0, 4, 2, 9, 1, 5]).unwrap();
        assert_eq!(trace.scores.len(), 2);
        for layer in &trace.scores {
            assert_eq!(layer.shape, vec![2, 6, 6]);
            for row in layer.data.chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model();
        let (a, ta) = model.forward(&[3, 1, 4]).unwrap();
        let (b, tb) = model.forward(&[3, 1, 4]).unwrap();
        assert_eq!(a.probs.data, b.probs.data);
        assert_eq!(ta.scores[0].data, tb.scores[0].data);
    }

    #[test]
    fn log_probs_are_exact_log_of_probs() {
        let model = tiny_model();
        let (dist, _) = model.forward(&[1, 2]).unwrap();
        for (p, lp) in dist.probs.data.iter().zip(&dist.log_probs.data) {
            assert_eq!(*p, lp.exp());
        }
        for row in dist.probs.data.chunks(dist.num_tags()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_vocab_is_an_input_error() {
        let model = tiny_model();
        assert!(matches!(model.forward(&[99]), Err(Error::Input(_))));
    }

    #[test]
    fn too_long_sequence_is_an_input_error() {
        let model = tiny_model();
        let ids = vec![1usize; 13];
        assert!(matches!(model.forward(&ids), Err(Error::Input(_))));
    }

    #[test]
    fn expand_by_zero_tags_changes_nothing() {
        let model = tiny_model();
        let expanded = model.expand_head(&[]).unwrap();
        assert_eq!(expanded.tag_space, model.tag_space);
        assert_eq!(
            expanded.named_weights["classifier.weight"].data,
            model.named_weights["classifier.weight"].data
        );
    }

    #[test]
    fn expand_copies_old_rows_bit_exactly() {
        let model = tiny_model();
        let expanded = model
            .expand_head(&["B-B".to_string(), "I-B".to_string()])
            .unwrap();
        assert_eq!(expanded.tag_space.len(), 5);
        let old_w = &model.named_weights["classifier.weight"];
        let new_w = &expanded.named_weights["classifier.weight"];
        assert_eq!(new_w.shape, vec![5, 8]);
        assert_eq!(&new_w.data[..old_w.data.len()], &old_w.data[..]);
    }

    #[test]
    fn expand_rejects_duplicate_tags() {
        let model = tiny_model();
        assert!(matches!(
            model.expand_head(&["B-A".to_string()]),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn old_logits_unchanged_after_expansion() {
        let model = tiny_model();
        let expanded = model
            .expand_head(&["B-B".to_string(), "I-B".to_string()])
            .unwrap();
        let ids = [5, 2, 8, 1];
        let before = model.logits(&ids).unwrap();
        let after = expanded.logits(&ids).unwrap();
        let old_c = model.num_tags();
        let new_c = expanded.num_tags();
        for i in 0..ids.len() {
            for e in 0..old_c {
                assert_eq!(before.data[i * old_c + e], after.data[i * new_c + e]);
            }
        }
    }

    #[test]
    fn frozen_clone_matches_and_receives_no_grads() {
        let model = tiny_model();
        let frozen = model.clone_frozen();
        let (a, _) = model.forward(&[1, 2, 3]).unwrap();
        let (b, _) = frozen.forward(&[1, 2, 3]).unwrap();
        assert_eq!(a.probs.data, b.probs.data);

        let mut tape = Tape::new();
        let params = frozen.register_on_tape(&mut tape);
        let handles = frozen.forward_on_tape(&mut tape, &params, &[1, 2]).unwrap();
        let loss = tape.sum_all(handles.log_probs);
        tape.backward(loss).unwrap();
        for (_, id) in params.named() {
            assert!(tape.grad(id).is_none());
        }
    }

    #[test]
    fn attention_core_is_permutation_equivariant() {
        // swap two tokens and the corresponding position-embedding rows:
        // per-token outputs must swap as well
        let model = tiny_model();
        let ids = [3, 7, 1, 9];
        let (base, _) = model.forward(&ids).unwrap();

        let mut permuted_model = model.clone();
        let pos = permuted_model
            .named_weights
            .get_mut("embed.position")
            .unwrap();
        let d = 8;
        for j in 0..d {
            pos.data.swap(j, d + j); // swap rows 0 and 1
        }
        let perm_ids = [7, 3, 1, 9];
        let (perm, _) = permuted_model.forward(&perm_ids).unwrap();

        let c = base.num_tags();
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
        };
        assert!(close(base.prob_row(0), &perm.probs.data[c..2 * c]));
        assert!(close(base.prob_row(1), &perm.probs.data[..c]));
        assert!(close(base.prob_row(2), perm.prob_row(2)));
        assert!(close(base.prob_row(3), perm.prob_row(3)));
    }
}
