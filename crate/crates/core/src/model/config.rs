use serde::{Deserialize, Serialize};

use crate::losses::LossKind;

/// Unscaled stem width of the thin ResNet.
pub const STEM_WIDTH: usize = 64;
/// Unscaled `(bottleneck width, output width, blocks)` per residual stage.
pub const STAGES: [(usize, usize, usize); 4] = [(48, 96, 2), (96, 128, 3), (128, 256, 3), (256, 512, 3)];
/// Unscaled channel count of the frame-level descriptors.
pub const FRAME_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    /// Multiplies every channel width; `1.0` is the full thin ResNet-34.
    pub width_multiplier: f64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self { width_multiplier: 1.0 }
    }
}

impl TrunkConfig {
    pub fn with_multiplier(width_multiplier: f64) -> Self {
        Self { width_multiplier }
    }

    pub fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(STEM_WIDTH)
    }

    /// `(bottleneck width, output width, blocks)` after scaling.
    pub fn stages(&self) -> Vec<(usize, usize, usize)> {
        STAGES
            .iter()
            .map(|&(mid, out, blocks)| (self.scaled(mid), self.scaled(out), blocks))
            .collect()
    }

    /// Channels of each frame-level descriptor (`D`).
    pub fn frame_dim(&self) -> usize {
        self.scaled(FRAME_DIM)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(format!("width multiplier must be positive, got {}", self.width_multiplier));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Temporal average pooling.
    Tap,
    NetVlad,
    GhostVlad,
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tap" => Ok(Self::Tap),
            "netvlad" => Ok(Self::NetVlad),
            "ghostvlad" => Ok(Self::GhostVlad),
            other => Err(format!("unknown head '{other}' (tap|netvlad|ghostvlad)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Real clusters `K`.
    pub clusters: usize,
    /// Ghost clusters `G`; only used by [`HeadKind::GhostVlad`].
    pub ghost_clusters: usize,
    /// L2-normalize each cluster row before flattening.
    pub intra_normalize: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::GhostVlad,
            clusters: 8,
            ghost_clusters: 2,
            intra_normalize: true,
        }
    }
}

impl HeadConfig {
    pub fn effective_ghosts(&self) -> usize {
        match self.kind {
            HeadKind::GhostVlad => self.ghost_clusters,
            _ => 0,
        }
    }

    /// Length of the aggregated vector fed to the FC layer.
    pub fn output_dim(&self, frame_dim: usize) -> usize {
        match self.kind {
            HeadKind::Tap => frame_dim,
            HeadKind::NetVlad | HeadKind::GhostVlad => self.clusters * frame_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub head: HeadConfig,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            head: HeadConfig::default(),
            embed_dim: 512,
            num_classes: 2,
            loss: LossKind::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.trunk.validate()?;
        if self.embed_dim == 0 {
            return Err("embed_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return Err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        match self.head.kind {
            HeadKind::Tap => {}
            HeadKind::NetVlad | HeadKind::GhostVlad if self.head.clusters == 0 => {
                return Err("VLAD heads need at least one real cluster".into())
            }
            HeadKind::GhostVlad if self.head.ghost_clusters == 0 => {
                return Err("ghostvlad needs at least one ghost cluster".into())
            }
            _ => {}
        }
        self.loss.validate()
    }
}
