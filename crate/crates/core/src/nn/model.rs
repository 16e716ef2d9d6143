use alloc::vec::Vec;

use rand::Rng as _;

use super::params::{BlockIds, GroupFilter, Layout, LinearIds, ModelParams};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::rng::Rng;

/// How the classifier head runs.
pub enum HeadMode<'r> {
    /// Running batch-norm statistics, no dropout.
    Eval,
    /// Batch statistics (returned in `stats`), no dropout.
    Calibrate { stats: Vec<BatchStats> },
    /// Batch statistics (returned in `stats`) and dropout drawn from `rng`.
    Train { rng: &'r mut Rng, stats: Vec<BatchStats> },
}

/// A network bound to a tape: every parameter tensor is registered once as a
/// leaf, trainable or frozen according to the filter.
pub struct Net<'p> {
    params: &'p ModelParams,
    layout: Layout,
    vars: Vec<Var>,
}

impl<'p> Net<'p> {
    pub fn bind(tape: &mut Tape<'p>, params: &'p ModelParams, trainable: GroupFilter) -> Self {
        let vars = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable.contains(t.group) { tape.param(i, &t.value) } else { tape.frozen(&t.value) })
            .collect();
        Self { params, layout: params.layout(), vars }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    fn lin(&self, tape: &mut Tape<'p>, x: Var, ids: LinearIds) -> Var {
        tape.linear(x, self.vars[ids.w], self.vars[ids.b])
    }

    /// Token embedding of `tokens` patches stacked as `(tokens * k) x 3` rows
    /// of local coordinates. Two point-wise MLP stages, each followed by a
    /// max-pool over the patch; the second stage sees every point's features
    /// concatenated with the first-stage patch feature.
    pub fn embed_tokens(&self, tape: &mut Tape<'p>, patches: Var, k: usize) -> Var {
        let [l1, l2, l3, l4] = self.layout.embed;
        let rows = tape.value(patches).rows;
        let h = self.lin(tape, patches, l1);
        let h = tape.relu(h);
        let f = self.lin(tape, h, l2);
        let g = tape.seg_max(f, k);
        let spread: Vec<usize> = (0..rows).map(|r| r / k).collect();
        let g = tape.gather(g, spread);
        let h = tape.concat_cols(f, g);
        let h = self.lin(tape, h, l3);
        let h = tape.relu(h);
        let h = self.lin(tape, h, l4);
        tape.seg_max(h, k)
    }

    fn pos_mlp(&self, tape: &mut Tape<'p>, centers: Var, ids: [LinearIds; 2]) -> Var {
        let h = self.lin(tape, centers, ids[0]);
        let h = tape.gelu(h);
        self.lin(tape, h, ids[1])
    }

    /// Encoder positional embedding of token centers (`n x 3`).
    pub fn encoder_pos(&self, tape: &mut Tape<'p>, centers: Var) -> Var {
        self.pos_mlp(tape, centers, self.layout.enc_pos)
    }

    /// Decoder positional embedding of token centers (`n x 3`).
    pub fn decoder_pos(&self, tape: &mut Tape<'p>, centers: Var) -> Var {
        self.pos_mlp(tape, centers, self.layout.dec_pos)
    }

    fn block(&self, tape: &mut Tape<'p>, x: Var, pos: Var, b: &BlockIds, seq: usize) -> Var {
        let heads = self.params.config.num_heads;
        let x = tape.add(x, pos);
        let h = tape.layer_norm(x, self.vars[b.ln1.0], self.vars[b.ln1.1]);
        let qkv = self.lin(tape, h, b.qkv);
        let a = tape.attention(qkv, seq, heads);
        let a = self.lin(tape, a, b.proj);
        let x = tape.add(x, a);
        let h = tape.layer_norm(x, self.vars[b.ln2.0], self.vars[b.ln2.1]);
        let h = self.lin(tape, h, b.fc1);
        let h = tape.gelu(h);
        let h = self.lin(tape, h, b.fc2);
        tape.add(x, h)
    }

    /// Encoder over sequences of `seq` visible tokens stacked row-wise. The
    /// positional embedding is added at the input of every block and the
    /// output is layer-normalized. An empty stack is the identity.
    pub fn encode(&self, tape: &mut Tape<'p>, tokens: Var, pos: Var, seq: usize) -> Var {
        if self.layout.enc_blocks.is_empty() {
            return tokens;
        }
        let mut x = tokens;
        for b in &self.layout.enc_blocks {
            x = self.block(tape, x, pos, b, seq);
        }
        let (g, bt) = self.layout.enc_norm;
        tape.layer_norm(x, self.vars[g], self.vars[bt])
    }

    /// Reconstruct the masked tokens of `samples` sequences.
    ///
    /// `latents` and `vis_pos` hold `samples * visible` rows, `mask_pos` holds
    /// `samples * masked` rows (decoder positional embeddings of the masked
    /// centers). Every sequence is the visible latents followed by the shared
    /// mask token at each masked position. Returns `(samples * masked * k) x 3`
    /// predicted local coordinates.
    pub fn decode_reconstruct(
        &self,
        tape: &mut Tape<'p>,
        latents: Var,
        vis_pos: Var,
        mask_pos: Var,
        samples: usize,
        visible: usize,
        masked: usize,
    ) -> Var {
        let seq = visible + masked;
        let tokens = tape.gather(self.vars[self.layout.mask_token], alloc::vec![0; samples * masked]);
        let order: Vec<usize> = (0..samples)
            .flat_map(|s| (s * visible..(s + 1) * visible).chain(samples * visible + s * masked..samples * visible + (s + 1) * masked))
            .collect();
        let x = tape.concat_rows(latents, tokens);
        let mut x = tape.gather(x, order.clone());
        let p = tape.concat_rows(vis_pos, mask_pos);
        let pos = tape.gather(p, order);
        for b in &self.layout.dec_blocks {
            x = self.block(tape, x, pos, b, seq);
        }
        let masked_rows: Vec<usize> = (0..samples).flat_map(|s| s * seq + visible..(s + 1) * seq).collect();
        let x = tape.gather(x, masked_rows);
        let (g, bt) = self.layout.dec_norm;
        let x = tape.layer_norm(x, self.vars[g], self.vars[bt]);
        let y = self.lin(tape, x, self.layout.pred);
        let k = self.params.config.group_size;
        tape.reshape(y, samples * masked * k, 3)
    }

    /// Classifier logits for sequences of `seq` latents: concatenated max- and
    /// mean-pooling followed by three fully connected layers with batch norm,
    /// ReLU and dropout between them.
    pub fn classify(&self, tape: &mut Tape<'p>, latents: Var, seq: usize, mode: &mut HeadMode<'_>) -> Var {
        let pooled = self.pool(tape, latents, seq);
        self.head(tape, pooled, mode)
    }

    /// Concatenated max- and mean-pooling of each sequence.
    pub fn pool(&self, tape: &mut Tape<'p>, latents: Var, seq: usize) -> Var {
        let mx = tape.seg_max(latents, seq);
        let mn = tape.seg_mean(latents, seq);
        tape.concat_cols(mx, mn)
    }

    /// Classifier head on pooled features.
    pub fn head(&self, tape: &mut Tape<'p>, pooled: Var, mode: &mut HeadMode<'_>) -> Var {
        let mut x = pooled;
        let p_drop = self.params.config.dropout;
        for layer in 0..2 {
            x = self.lin(tape, x, self.layout.cls[layer]);
            let (g, b) = self.layout.cls_bn[layer];
            x = match mode {
                HeadMode::Eval => {
                    let rs = &self.params.bn_running[layer];
                    tape.batch_norm_eval(x, self.vars[g], self.vars[b], &rs.mean, &rs.var)
                }
                HeadMode::Train { stats, .. } | HeadMode::Calibrate { stats } => {
                    let (y, s) = tape.batch_norm_train(x, self.vars[g], self.vars[b]);
                    stats.push(s);
                    y
                }
            };
            x = tape.relu(x);
            if let HeadMode::Train { rng, .. } = mode {
                if p_drop > 0.0 {
                    let n = tape.value(x).len();
                    let scale = 1.0 / (1.0 - p_drop);
                    let keep = (0..n).map(|_| if rng.random::<f64>() < p_drop { 0.0 } else { scale }).collect();
                    x = tape.dropout(x, keep);
                }
            }
        }
        self.lin(tape, x, self.layout.cls[2])
    }
}
