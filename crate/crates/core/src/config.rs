//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{GevstError, Result};

/// The four parallel encoder branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchId {
    /// Pure semantic.
    SS,
    /// Visual fused into semantic.
    SV,
    /// Semantic fused into visual.
    VS,
    /// Pure visual.
    VV,
}

impl BranchId {
    pub const ALL: [BranchId; 4] = [BranchId::SS, BranchId::SV, BranchId::VS, BranchId::VV];

    pub fn name(self) -> &'static str {
        match self {
            BranchId::SS => "SS",
            BranchId::SV => "SV",
            BranchId::VS => "VS",
            BranchId::VV => "VV",
        }
    }

    /// Visual-side branches run over regions, the others over dense captions.
    pub fn is_visual(self) -> bool {
        matches!(self, BranchId::VS | BranchId::VV)
    }

    /// Whether the branch consumes fused rather than pure content.
    pub fn is_fused(self) -> bool {
        matches!(self, BranchId::VS | BranchId::SV)
    }

    pub fn parse(s: &str) -> Result<BranchId> {
        match s.to_ascii_uppercase().as_str() {
            "SS" => Ok(BranchId::SS),
            "SV" => Ok(BranchId::SV),
            "VS" => Ok(BranchId::VS),
            "VV" => Ok(BranchId::VV),
            other => Err(GevstError::Config(format!("unknown branch `{other}`"))),
        }
    }
}

/// Which attention maps a fusion cell uses to align the two modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionBase {
    /// Content attention only.
    C,
    /// Geometry attention only.
    G,
    /// Both, summed.
    CG,
}

impl FusionBase {
    pub fn uses_content(self) -> bool {
        matches!(self, FusionBase::C | FusionBase::CG)
    }

    pub fn uses_geometry(self) -> bool {
        matches!(self, FusionBase::G | FusionBase::CG)
    }
}

/// Which self-attention maps a GESA layer mixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GesaVariant {
    Con,
    ConIntra,
    ConIntraInter,
}

impl GesaVariant {
    /// Enabled flags for the content, intra-geometry and inter-geometry maps.
    pub fn enabled(self) -> [bool; 3] {
        match self {
            GesaVariant::Con => [true, false, false],
            GesaVariant::ConIntra => [true, true, false],
            GesaVariant::ConIntraInter => [true, true, true],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GesaVariant::Con => "Con",
            GesaVariant::ConIntra => "+Intra",
            GesaVariant::ConIntraInter => "+Inter",
        }
    }
}

/// Gate nonlinearity of the branch-modulated cross attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    /// Independent logistic gates per branch.
    Sigmoid,
    /// Gates normalized across branches with a softmax.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Common width of every feature in the model.
    pub d_model: usize,
    pub heads: usize,
    pub expansion_rate: usize,
    pub fusion_cells: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    pub region_feat_dim: usize,
    pub dc_width: usize,
    pub dc_heads: usize,
    pub dc_layers: usize,
    pub fusion_base: FusionBase,
    pub gesa_variant: GesaVariant,
    pub branches: Vec<BranchId>,
    pub renorm_fused_attention: bool,
    pub modulation: Modulation,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 8,
            expansion_rate: 5,
            fusion_cells: 2,
            layers: 3,
            region_feat_dim: 32,
            dc_width: 64,
            dc_heads: 4,
            dc_layers: 3,
            fusion_base: FusionBase::CG,
            gesa_variant: GesaVariant::ConIntraInter,
            branches: BranchId::ALL.to_vec(),
            renorm_fused_attention: false,
            modulation: Modulation::Sigmoid,
            max_len: 20,
        }
    }
}

impl ModelConfig {
    /// Widths reported for the full-size model.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 512,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GevstError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.dc_width == 0 || self.dc_heads == 0 || self.dc_width % self.dc_heads != 0 {
            return fail(format!(
                "dc_width {} must be divisible by dc_heads {}",
                self.dc_width, self.dc_heads
            ));
        }
        if !(1..=3).contains(&self.fusion_cells) {
            return fail(format!(
                "fusion_cells must be in 1..=3, got {}",
                self.fusion_cells
            ));
        }
        if !(2..=5).contains(&self.layers) {
            return fail(format!("layers must be in 2..=5, got {}", self.layers));
        }
        if self.expansion_rate == 0 {
            return fail("expansion_rate must be positive".into());
        }
        if self.dc_layers == 0 || self.region_feat_dim == 0 {
            return fail("dc_layers and region_feat_dim must be positive".into());
        }
        if self.branches.is_empty() {
            return fail("at least one encoder branch must be active".into());
        }
        let mut seen = self.branches.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.branches.len() {
            return fail(format!("duplicate branches in {:?}", self.branches));
        }
        if self.max_len < 1 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }

    /// Active branches in canonical SS, SV, VS, VV order.
    pub fn active_branches(&self) -> Vec<BranchId> {
        let mut b = self.branches.clone();
        b.sort();
        b
    }
}

/// Which ground-truth captions serve as teacher-forcing targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum XeTargets {
    /// Only the first caption of each sample.
    Primary,
    /// Every caption, each as its own example.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub xe_epochs: usize,
    pub scst_epochs: usize,
    pub beam: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    /// Constant learning rate of the policy-gradient phase.
    pub scst_lr: f64,
    pub scst_samples: usize,
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub min_count: usize,
    pub xe_targets: XeTargets,
    /// Stop cross-entropy training once the epoch loss drops below this.
    pub early_stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: 7,
            batch_size: 8,
            warmup_epochs: 4,
            xe_epochs: 18,
            scst_epochs: 30,
            beam: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            lr_scale: 0.2,
            scst_lr: 2e-5,
            scst_samples: 1,
            clip_norm: 5.0,
            val_fraction: 0.1,
            min_count: 5,
            xe_targets: XeTargets::Primary,
            early_stop_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(GevstError::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.warmup_epochs == 0 {
            return fail("warmup_epochs must be positive");
        }
        if self.beam == 0 {
            return fail("beam must be positive");
        }
        if self.scst_samples == 0 {
            return fail("scst_samples must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must be in [0, 1)");
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s)
            .map_err(|e| GevstError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
