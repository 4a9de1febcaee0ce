use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ConditioningBundle;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DEFAULT_DROP_RATE: f64 = 0.1;

/// How the two conditioning modalities are dropped during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// One draw replaces both contexts.
    #[default]
    Joint,
    /// One draw per modality.
    Independent,
}

/// Which contexts a training example replaces by the null tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropDecision {
    pub img: bool,
    pub txt: bool,
}

impl DropDecision {
    pub fn any(self) -> bool {
        self.img || self.txt
    }
}

pub fn draw_dropout(p: f64, mode: DropMode, rng: &mut impl Rng) -> Result<DropDecision> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("drop rate {p} outside [0, 1)")));
    }
    Ok(match mode {
        DropMode::Joint => {
            let d = rng.random::<f64>() < p;
            DropDecision { img: d, txt: d }
        }
        DropMode::Independent => DropDecision { img: rng.random::<f64>() < p, txt: rng.random::<f64>() < p },
    })
}

/// Replaces dropped contexts by the single-row null tokens.
pub fn cfg_dropout(
    bundle: &ConditioningBundle,
    null_img: &Tensor,
    null_txt: &Tensor,
    p: f64,
    mode: DropMode,
    rng: &mut impl Rng,
) -> Result<(ConditioningBundle, DropDecision)> {
    let d = draw_dropout(p, mode, rng)?;
    if !d.any() {
        return Ok((bundle.clone(), d));
    }
    let img = if d.img { null_img.clone() } else { bundle.c_img().clone() };
    let txt = if d.txt { null_txt.clone() } else { bundle.c_txt().clone() };
    Ok((ConditioningBundle::new(img, txt)?, d))
}
