//! Sequence classification model: feature embedding with sinusoidal
//! positional encodings, a stack of pre-norm attention blocks (baseline or
//! AGF), mean pooling over tokens, and a linear head.
//!
//! Host-side parameter values live in a [`ParamStore`]; each training step
//! binds them onto a fresh tape, runs forward/backward, and reads the
//! gradients back out by store index.

use crate::attention::{AgfParams, AttentionParams, BlockParams, VanillaParams};
use crate::poly::BasisSpec;
use crate::prng::Prng;
use crate::tensor::{Tape, TensorId, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Vanilla,
    Agf,
}

/// A named host-side parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        self.push(name, shape, value, true)
    }

    pub fn add_frozen(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> ParamId {
        self.push(name, shape, value, false)
    }

    fn push(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone)]
struct AgfHeadIds {
    w_u: ParamId,
    w_sigma: ParamId,
    w_v: ParamId,
    w_val: ParamId,
}

#[derive(Debug, Clone)]
enum AttentionIds {
    Vanilla(Vec<[ParamId; 3]>),
    Agf {
        heads: Vec<AgfHeadIds>,
        theta: ParamId,
    },
}

#[derive(Debug, Clone)]
struct BlockIds {
    attention: AttentionIds,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub features: usize,
    pub classes: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub basis: BasisSpec,
    pub variant: AttentionVariant,
    /// Keep theta fixed at [1, 0, ..., 0): the unfiltered U V^T ablation.
    pub freeze_theta: bool,
}

/// Classifier with host-side parameters. Bind onto a tape per step.
#[derive(Debug, Clone)]
pub struct SequenceClassifier {
    pub config: ModelConfig,
    pub store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<BlockIds>,
    final_ln_gamma: ParamId,
    final_ln_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Tape bindings for one forward/backward pass; indexed like the store.
pub struct BoundModel<'m> {
    model: &'m SequenceClassifier,
    pub tensor_ids: Vec<TensorId>,
    pub blocks: Vec<BlockParams>,
}

/// Per-sequence forward outputs.
pub struct SequenceOutput {
    /// 1 x classes logits.
    pub logits: TensorId,
    /// Summed orthogonality penalty across layers.
    pub ortho: TensorId,
    /// Output of every block, each n x d.
    pub layer_outputs: Vec<TensorId>,
}

/// Standard sinusoidal positional encodings, n x d row-major.
pub fn positional_encoding(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10_000_f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * rate;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl SequenceClassifier {
    pub fn new(config: ModelConfig, rng: &mut Prng) -> Self {
        assert!(
            config.heads > 0 && config.d % config.heads == 0,
            "model dim {} must divide into {} heads",
            config.d,
            config.heads
        );
        let d = config.d;
        let dh = d / config.heads;
        let mut store = ParamStore::default();

        let matrix =
            |store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut Prng| {
                let std = 1.0 / (rows as f64).sqrt();
                let value: Vec<f64> = (0..rows * cols)
                    .map(|_| rng.normal_scaled(0.0, std))
                    .collect();
                store.add(name, vec![rows, cols], value)
            };

        let embed_w = matrix(&mut store, "embed.w".to_string(), config.features, d, rng);
        let embed_b = store.add("embed.b", vec![1, d], vec![0.0; d]);

        let mut blocks = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let attention = match config.variant {
                AttentionVariant::Vanilla => AttentionIds::Vanilla(
                    (0..config.heads)
                        .map(|h| {
                            [
                                matrix(&mut store, format!("block{layer}.h{h}.w_qry"), dh, dh, rng),
                                matrix(&mut store, format!("block{layer}.h{h}.w_key"), dh, dh, rng),
                                matrix(&mut store, format!("block{layer}.h{h}.w_val"), dh, dh, rng),
                            ]
                        })
                        .collect(),
                ),
                AttentionVariant::Agf => {
                    let heads = (0..config.heads)
                        .map(|h| AgfHeadIds {
                            w_u: matrix(&mut store, format!("block{layer}.h{h}.w_u"), dh, dh, rng),
                            w_sigma: matrix(
                                &mut store,
                                format!("block{layer}.h{h}.w_sigma"),
                                dh,
                                dh,
                                rng,
                            ),
                            w_v: matrix(&mut store, format!("block{layer}.h{h}.w_v"), dh, dh, rng),
                            w_val: matrix(
                                &mut store,
                                format!("block{layer}.h{h}.w_val"),
                                dh,
                                dh,
                                rng,
                            ),
                        })
                        .collect();
                    // Start as the pure T_0 pass-through filter; shared across heads.
                    let klen = config.basis.coeff_len();
                    let mut theta0 = vec![0.0; klen];
                    theta0[0] = 1.0;
                    let theta = if config.freeze_theta {
                        store.add_frozen(format!("block{layer}.theta"), vec![1, klen], theta0)
                    } else {
                        store.add(format!("block{layer}.theta"), vec![1, klen], theta0)
                    };
                    AttentionIds::Agf { heads, theta }
                }
            };
            blocks.push(BlockIds {
                attention,
                ffn_w1: matrix(&mut store, format!("block{layer}.ffn.w1"), d, 4 * d, rng),
                ffn_b1: store.add(
                    format!("block{layer}.ffn.b1"),
                    vec![1, 4 * d],
                    vec![0.0; 4 * d],
                ),
                ffn_w2: matrix(&mut store, format!("block{layer}.ffn.w2"), 4 * d, d, rng),
                ffn_b2: store.add(format!("block{layer}.ffn.b2"), vec![1, d], vec![0.0; d]),
                ln1_gamma: store.add(format!("block{layer}.ln1.gamma"), vec![1, d], vec![1.0; d]),
                ln1_beta: store.add(format!("block{layer}.ln1.beta"), vec![1, d], vec![0.0; d]),
                ln2_gamma: store.add(format!("block{layer}.ln2.gamma"), vec![1, d], vec![1.0; d]),
                ln2_beta: store.add(format!("block{layer}.ln2.beta"), vec![1, d], vec![0.0; d]),
            });
        }

        let final_ln_gamma = store.add("final_ln.gamma", vec![1, d], vec![1.0; d]);
        let final_ln_beta = store.add("final_ln.beta", vec![1, d], vec![0.0; d]);
        let head_w = matrix(&mut store, "head.w".to_string(), d, config.classes, rng);
        let head_b = store.add("head.b", vec![1, config.classes], vec![0.0; config.classes]);

        SequenceClassifier {
            config,
            store,
            embed_w,
            embed_b,
            blocks,
            final_ln_gamma,
            final_ln_beta,
            head_w,
            head_b,
        }
    }

    /// Register every parameter on the tape, in store order.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> TensorResult<BoundModel<'m>> {
        let mut tensor_ids = Vec::with_capacity(self.store.len());
        for param in self.store.iter() {
            let id = if param.trainable {
                tape.param(param.shape.clone(), param.value.clone())?
            } else {
                tape.constant(param.shape.clone(), param.value.clone())?
            };
            tensor_ids.push(id);
        }
        let lookup = |pid: ParamId| tensor_ids[pid.0];
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockParams {
                attention: match &b.attention {
                    AttentionIds::Vanilla(heads) => AttentionParams::Vanilla(
                        heads
                            .iter()
                            .map(|[q, k, v]| VanillaParams {
                                w_qry: lookup(*q),
                                w_key: lookup(*k),
                                w_val: lookup(*v),
                            })
                            .collect(),
                    ),
                    AttentionIds::Agf { heads, theta } => AttentionParams::Agf(
                        heads
                            .iter()
                            .map(|h| AgfParams {
                                w_u: lookup(h.w_u),
                                w_sigma: lookup(h.w_sigma),
                                w_v: lookup(h.w_v),
                                w_val: lookup(h.w_val),
                                theta: lookup(*theta),
                                basis: self.config.basis,
                            })
                            .collect(),
                    ),
                },
                ffn_w1: lookup(b.ffn_w1),
                ffn_b1: lookup(b.ffn_b1),
                ffn_w2: lookup(b.ffn_w2),
                ffn_b2: lookup(b.ffn_b2),
                ln1_gamma: lookup(b.ln1_gamma),
                ln1_beta: lookup(b.ln1_beta),
                ln2_gamma: lookup(b.ln2_gamma),
                ln2_beta: lookup(b.ln2_beta),
            })
            .collect();
        Ok(BoundModel {
            model: self,
            tensor_ids,
            blocks,
        })
    }
}

impl BoundModel<'_> {
    fn id(&self, pid: ParamId) -> TensorId {
        self.tensor_ids[pid.0]
    }

    /// Forward one sequence of shape n x features (row-major values).
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        seq: &[f64],
        seq_len: usize,
    ) -> TensorResult<SequenceOutput> {
        let m = self.model;
        let features = m.config.features;
        let d = m.config.d;
        let x_in = tape.input(vec![seq_len, features], seq.to_vec())?;
        let projected = tape.matmul(x_in, self.id(m.embed_w))?;
        let biased = tape.add_row(projected, self.id(m.embed_b))?;
        let pe = tape.constant(vec![seq_len, d], positional_encoding(seq_len, d))?;
        let mut x = tape.add(biased, pe)?;

        let mut ortho = tape.scalar_const(0.0)?;
        let mut layer_outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, o) = crate::attention::block_forward(tape, x, block)?;
            ortho = tape.add(ortho, o)?;
            layer_outputs.push(next);
            x = next;
        }

        let normed = tape.layer_norm(x, self.id(m.final_ln_gamma), self.id(m.final_ln_beta))?;
        let pooled = tape.mean_rows(normed)?;
        let scores = tape.matmul(pooled, self.id(m.head_w))?;
        let logits = tape.add_row(scores, self.id(m.head_b))?;
        Ok(SequenceOutput {
            logits,
            ortho,
            layer_outputs,
        })
    }

    /// Gradient of each store parameter after `backward`, zeros where no
    /// gradient flowed. Order matches the store.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.model
            .store
            .iter()
            .zip(self.tensor_ids.iter())
            .map(|(param, &tid)| match tape.grad(tid) {
                Some(g) => g.to_vec(),
                None => vec![0.0; param.value.len()],
            })
            .collect()
    }
}
