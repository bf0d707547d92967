//! The full captioner: input projections, multi-branch encoder and decoder.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caption_encoder::DenseCaptionEncoder;
use crate::config::{BranchId, ModelConfig};
use crate::data::Sample;
use crate::decoder::{beam_search, CaptionState, DecodeOptions, Decoder, StepScorer};
use crate::error::{GevstError, Result};
use crate::fusion::Modality;
use crate::geometry::{normalized_matrix, GeometryEmbedding};
use crate::gesa::{BranchOutputs, MultiBranchEncoder};
use crate::nn::Linear;
use crate::params::{Graph, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{Vocabulary, BOS, EOS};

/// A sample converted to model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: u64,
    /// `[N_v × F]`
    pub region_feats: Tensor,
    /// `[N_v × 4]` normalized boxes.
    pub region_geometry: Tensor,
    pub dense_tokens: Vec<Vec<usize>>,
    /// `[N_s × 4]`
    pub caption_geometry: Tensor,
    /// `BOS … EOS` per reference caption.
    pub targets: Vec<Vec<usize>>,
    pub references: Vec<Vec<usize>>,
}

impl PreparedSample {
    pub fn new(sample: &Sample, vocab: &Vocabulary) -> Result<Self> {
        sample.validate()?;
        let width = sample.regions[0].feat.len();
        let feats = sample
            .regions
            .iter()
            .flat_map(|r| r.feat.iter().map(|&v| f64::from(v)))
            .collect();
        let targets: Vec<Vec<usize>> = sample
            .gt_captions
            .iter()
            .map(|c| vocab.encode_caption(c))
            .collect();
        Ok(PreparedSample {
            id: sample.id,
            region_feats: Tensor::new(vec![sample.regions.len(), width], feats)?,
            region_geometry: normalized_matrix(&sample.region_boxes()?)?,
            dense_tokens: sample
                .dense_captions
                .iter()
                .map(|c| vocab.tokenize(&c.text))
                .collect(),
            caption_geometry: normalized_matrix(&sample.caption_boxes()?)?,
            references: sample
                .gt_captions
                .iter()
                .map(|c| vocab.tokenize(c))
                .collect(),
            targets,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.region_feats.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Gevst {
    pub config: ModelConfig,
    pub input_proj: Linear,
    pub visual_geometry: GeometryEmbedding,
    pub semantic_geometry: GeometryEmbedding,
    pub caption_encoder: DenseCaptionEncoder,
    pub encoder: MultiBranchEncoder,
    pub decoder: Decoder,
}

impl Gevst {
    /// Fresh parameters drawn from `seed`; parameter names and order depend
    /// only on the configuration and vocabulary size.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<(Gevst, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Self::with_store(
            config,
            vocab_size,
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        Ok((model, store))
    }

    /// Builds the parameter layout into `store`, drawing initial values
    /// from `rng`. Accepts any layer count, unlike the validated constructor.
    pub fn with_store(
        config: &ModelConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Gevst> {
        let d = config.d_model;
        let branches = config.active_branches();
        Ok(Gevst {
            config: config.clone(),
            input_proj: Linear::new(store, rng, "in.proj", config.region_feat_dim, d, true),
            visual_geometry: GeometryEmbedding::new(store, rng, "geo.v", d),
            semantic_geometry: GeometryEmbedding::new(store, rng, "geo.s", d),
            caption_encoder: DenseCaptionEncoder::new(
                store,
                rng,
                vocab_size,
                config.dc_width,
                config.dc_heads,
                config.dc_layers,
                d,
            )?,
            encoder: MultiBranchEncoder::new(store, rng, config)?,
            decoder: Decoder::new(
                store,
                rng,
                vocab_size,
                d,
                config.heads,
                config.layers,
                &branches,
                config.modulation,
                config.max_len,
            )?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }

    pub fn encode<'t>(&self, g: &Graph<'t>, s: &PreparedSample) -> Result<BranchOutputs<'t>> {
        if s.region_feats.last_dim() != self.config.region_feat_dim {
            return Err(GevstError::Dimension(format!(
                "region features have width {}, model expects {}",
                s.region_feats.last_dim(),
                self.config.region_feat_dim
            )));
        }
        let visual = Modality {
            content: self
                .input_proj
                .forward(g, g.constant(s.region_feats.clone()))?,
            geometry: self
                .visual_geometry
                .forward(g, g.constant(s.region_geometry.clone()))?,
        };
        let semantic = Modality {
            content: self.caption_encoder.encode_all(g, &s.dense_tokens)?,
            geometry: self
                .semantic_geometry
                .forward(g, g.constant(s.caption_geometry.clone()))?,
        };
        self.encoder.encode(g, visual, semantic)
    }

    /// Teacher-forced logits `[T × V]` for `tokens` (starting with BOS).
    pub fn logits<'t>(
        &self,
        g: &Graph<'t>,
        s: &PreparedSample,
        tokens: &[usize],
    ) -> Result<Var<'t>> {
        let enc = self.encode(g, s)?;
        self.decoder.forward(g, tokens, &enc.outputs)
    }

    /// Branch outputs as plain tensors, for decoding.
    pub fn encode_frozen(&self, store: &ParamStore, s: &PreparedSample) -> Result<EncodedSample> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, store);
        let enc = self.encode(&g, s)?;
        Ok(EncodedSample {
            branches: enc.outputs.iter().map(|(b, v)| (*b, v.value())).collect(),
        })
    }

    pub fn scorer<'a>(
        &'a self,
        store: &'a ParamStore,
        encoded: &'a EncodedSample,
    ) -> ModelScorer<'a> {
        ModelScorer {
            model: self,
            store,
            encoded,
        }
    }

    /// Beam search over fixed parameters; `beam = 1` is greedy.
    pub fn caption(
        &self,
        store: &ParamStore,
        s: &PreparedSample,
        beam: usize,
    ) -> Result<CaptionState> {
        let enc = self.encode_frozen(store, s)?;
        beam_search(&self.scorer(store, &enc), beam, self.decode_options())
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            bos: BOS,
            eos: EOS,
            max_len: self.config.max_len,
        }
    }
}

/// Encoder outputs of one sample, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub branches: Vec<(BranchId, Arc<Tensor>)>,
}

impl EncodedSample {
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<(BranchId, Var<'t>)> {
        self.branches
            .iter()
            .map(|(b, t)| (*b, tape.shared(Arc::clone(t), false)))
            .collect()
    }
}

/// Next-token distributions of the decoder over fixed encoder outputs.
pub struct ModelScorer<'a> {
    model: &'a Gevst,
    store: &'a ParamStore,
    encoded: &'a EncodedSample,
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, self.store);
        let branches = self.encoded.bind(&tape);
        let logits = self.model.decoder.forward(&g, prefix, &branches)?;
        let t = prefix.len();
        let last = logits.slice(0, t - 1, 1)?.log_softmax();
        Ok(last.value().data().to_vec())
    }
}
