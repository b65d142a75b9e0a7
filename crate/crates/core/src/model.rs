//! Trainable state shared by both stages, and the optimizer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FeatureSource, ModelConfig, OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::gnn::{forward_all, GraphIndex, LayerStack, StackShape};
use crate::linalg::Matrix;
use crate::scoring::{RelationEmbeddings, ScoreFnSpec};
use crate::text::{build_feature_table, xavier_uniform, MlpParams, RawTexts, TextParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Text representation learning.
    Text = 1,
    /// Graph reasoning.
    Graph = 2,
}

impl Stage {
    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Stage::Text),
            2 => Ok(Stage::Graph),
            other => Err(Error::Checkpoint(format!("unknown stage tag {other}"))),
        }
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Stream ids carved out of the run seed.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_STAGE1: u64 = 1;
pub(crate) const STREAM_STAGE2: u64 = 2;
pub(crate) const STREAM_GRAPH_INIT: u64 = 3;

pub(crate) fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Matrix,
    pub v: Matrix,
}

/// Adam or plain SGD, with per-parameter moment slots keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Starts a new step; bias correction uses the incremented count.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let slot = self.slots.entry(name.to_owned()).or_insert_with(|| AdamSlot {
                    m: Matrix::zeros(param.rows(), param.cols()),
                    v: Matrix::zeros(param.rows(), param.cols()),
                });
                let iter = param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(slot.m.data_mut().iter_mut().zip(slot.v.data_mut()));
                for ((p, &g), (m, v)) in iter {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub stage: Stage,
    /// Completed epochs of the current stage.
    pub epoch: u64,
    pub text: TextParams,
    /// Entity feature table fed to the graph stack (N x d).
    pub features: Matrix,
    pub relations: RelationEmbeddings,
    pub stack: Option<LayerStack>,
    pub rng: RngState,
    pub optimizer: Optimizer,
}

impl ModelState {
    /// Fresh stage-1 state: Xavier reductions, random fallback row,
    /// uniform relations, features materialized from the initial reduction.
    pub fn init_stage1(config: &ModelConfig, raw: &RawTexts, num_relations: usize) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let raw_dim = raw.rows.cols();
        if raw_dim != config.text.raw_dim {
            return Err(Error::dim(format!(
                "encoded texts have width {raw_dim}, config says {}",
                config.text.raw_dim
            )));
        }
        let mut rng = seeded_stream(config.seed, STREAM_INIT);
        let head = MlpParams::xavier(d, raw_dim, &mut rng);
        let tail = config
            .separate_head_tail_mlp
            .then(|| MlpParams::xavier(d, raw_dim, &mut rng));
        let fallback = xavier_uniform(1, d, &mut rng);
        let relations = RelationEmbeddings::uniform(num_relations, d, &mut rng);
        let text = TextParams { head, tail, fallback };
        let features = build_feature_table(raw, &text)?;
        Ok(ModelState {
            config: config.clone(),
            stage: Stage::Text,
            epoch: 0,
            text,
            features,
            relations,
            stack: None,
            rng: RngState::capture(&seeded_stream(config.seed, STREAM_STAGE1)),
            optimizer: Optimizer::new(config.optimizer.clone()),
        })
    }

    /// Stage-2 starting point. With text features the relation vectors and
    /// feature table come from `stage1`; with random features both are
    /// freshly drawn and `stage1` only contributes its (unused) text params.
    pub fn init_stage2(config: &ModelConfig, stage1: Option<&ModelState>, num_entities: usize, num_relations: usize) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = seeded_stream(config.seed, STREAM_GRAPH_INIT);
        let shape = StackShape {
            kind: config.gnn.variant,
            dim: d,
            depth: config.gnn.depth,
            heads: config.gnn.heads,
            num_relations,
            leaky_slope: config.gnn.leaky_slope,
        };
        let (text, features, relations) = match (config.stage2.features, stage1) {
            (FeatureSource::Text, Some(s1)) => {
                if s1.config.dim != d || s1.features.cols() != d {
                    return Err(Error::dim(format!(
                        "stage-1 checkpoint has width {}, config wants {d}",
                        s1.features.cols()
                    )));
                }
                if s1.features.rows() != num_entities || s1.relations.forward.rows() != num_relations {
                    return Err(Error::dim("stage-1 checkpoint vocabulary does not match the graph"));
                }
                if s1.text.head.in_dim() != config.text.raw_dim
                    || s1.text.tail.is_some() != config.separate_head_tail_mlp
                {
                    return Err(Error::Config(
                        "stage-1 checkpoint text encoder or head/tail layout differs from the config".into(),
                    ));
                }
                (s1.text.clone(), s1.features.clone(), s1.relations.clone())
            }
            (FeatureSource::Text, None) => {
                return Err(Error::Config("text features need a stage-1 checkpoint".into()));
            }
            (FeatureSource::Random, _) => {
                let bound = 6.0 / (d as f64).sqrt();
                let data = (0..num_entities * d)
                    .map(|_| rand::Rng::gen_range(&mut rng, -bound..=bound))
                    .collect();
                let features = Matrix::from_vec(num_entities, d, data)?;
                let relations = RelationEmbeddings::uniform(num_relations, d, &mut rng);
                // random features never read the text side; keep it zero-shaped per the config
                let text = TextParams {
                    head: MlpParams::zeros(d, config.text.raw_dim),
                    tail: config.separate_head_tail_mlp.then(|| MlpParams::zeros(d, config.text.raw_dim)),
                    fallback: Matrix::zeros(1, d),
                };
                (text, features, relations)
            }
        };
        let stack = LayerStack::init(&shape, config.gnn.zero_init, &mut rng)?;
        Ok(ModelState {
            config: config.clone(),
            stage: Stage::Graph,
            epoch: 0,
            text,
            features,
            relations,
            stack,
            rng: RngState::capture(&seeded_stream(config.seed, STREAM_STAGE2)),
            optimizer: Optimizer::new(config.optimizer.clone()),
        })
    }

    pub fn num_entities(&self) -> usize {
        self.features.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.forward.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Score function used to rank with this state.
    pub fn score_spec(&self) -> ScoreFnSpec {
        match self.stage {
            Stage::Text => ScoreFnSpec::transe(self.config.score.p_norm),
            Stage::Graph => self.config.score,
        }
    }

    /// Features after the stack and residual, using `graph` for messages.
    pub fn final_embeddings(&self, graph: &GraphIndex) -> Result<Matrix> {
        forward_all(self.stack.as_ref(), &self.features, graph)
    }

    pub fn scoring_model(&self, graph: &GraphIndex) -> Result<ScoringModel> {
        Ok(ScoringModel {
            entities: self.final_embeddings(graph)?,
            relations: self.relations.clone(),
            spec: self.score_spec(),
        })
    }

    /// All parameter tables in checkpoint order.
    pub fn param_slots(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("text.head.w".into(), &self.text.head.w),
            ("text.head.b".into(), &self.text.head.b),
        ];
        if let Some(t) = &self.text.tail {
            out.push(("text.tail.w".into(), &t.w));
            out.push(("text.tail.b".into(), &t.b));
        }
        out.push(("text.fallback".into(), &self.text.fallback));
        out.push(("features".into(), &self.features));
        out.push(("rel.forward".into(), &self.relations.forward));
        out.push(("rel.inverse".into(), &self.relations.inverse));
        if let Some(stack) = &self.stack {
            out.extend(stack.params());
        }
        out
    }

    /// Mutable view of [`ModelState::param_slots`], same order.
    pub fn param_slots_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let names: Vec<String> = self.param_slots().into_iter().map(|(n, _)| n).collect();
        let mut refs: Vec<&mut Matrix> = vec![&mut self.text.head.w, &mut self.text.head.b];
        if let Some(t) = &mut self.text.tail {
            refs.push(&mut t.w);
            refs.push(&mut t.b);
        }
        refs.push(&mut self.text.fallback);
        refs.push(&mut self.features);
        refs.push(&mut self.relations.forward);
        refs.push(&mut self.relations.inverse);
        if let Some(stack) = &mut self.stack {
            refs.extend(stack.params_mut());
        }
        names.into_iter().zip(refs).collect()
    }
}

/// Final entity vectors, relation vectors and the score that ranks them.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringModel {
    pub entities: Matrix,
    pub relations: RelationEmbeddings,
    pub spec: ScoreFnSpec,
}

impl ScoringModel {
    #[inline]
    pub fn score(&self, head: usize, relation: usize, tail: usize) -> f64 {
        self.spec.score(
            self.entities.row(head),
            self.relations.forward.row(relation),
            self.relations.inverse.row(relation),
            self.entities.row(tail),
        )
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.forward.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_state_round_trips() {
        use rand::RngCore;
        let mut rng = seeded_stream(42, 3);
        for _ in 0..7 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut p = Matrix::row_vector(&[1.0, -1.0]);
        opt.begin_step();
        opt.update("p", &mut p, &Matrix::row_vector(&[0.5, -2.0]), 0.1);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }
}
