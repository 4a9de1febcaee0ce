use crate::error::{shape_err, Error, Result};
use crate::numcore::Tensor;

/// Image and text context for one sample, with the pooled text vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    c_img: Tensor,
    c_txt: Tensor,
    g: Vec<f64>,
}

fn mean_pool(c: &Tensor) -> Vec<f64> {
    let (l, d) = (c.shape()[0], c.shape()[1]);
    let mut g = vec![0.0; d];
    for r in 0..l {
        g.iter_mut().zip(c.row(r)).for_each(|(a, b)| *a += b);
    }
    g.iter_mut().for_each(|v| *v /= l as f64);
    g
}

impl ConditioningBundle {
    pub fn new(c_img: Tensor, c_txt: Tensor) -> Result<Self> {
        if c_img.rank() != 2 || c_txt.rank() != 2 || c_img.shape()[1] != c_txt.shape()[1] {
            return Err(shape_err!("image context {:?} and text context {:?}", c_img.shape(), c_txt.shape()));
        }
        if c_img.shape()[0] == 0 || c_txt.shape()[0] == 0 {
            return Err(Error::Empty("conditioning contexts need at least one token".into()));
        }
        let g = mean_pool(&c_txt);
        Ok(Self { c_img, c_txt, g })
    }

    pub fn c_img(&self) -> &Tensor {
        &self.c_img
    }

    pub fn c_txt(&self) -> &Tensor {
        &self.c_txt
    }

    /// Mean of the text tokens.
    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn dim(&self) -> usize {
        self.c_img.shape()[1]
    }

    /// Replaces the text context and recomputes `g`.
    pub fn with_text(&self, c_txt: Tensor) -> Result<Self> {
        Self::new(self.c_img.clone(), c_txt)
    }
}
