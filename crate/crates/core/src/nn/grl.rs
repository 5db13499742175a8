use candle_core::{Result, Tensor};

/// Identity in the forward pass; multiplies gradients by `-scale` on the
/// way back.
///
/// Built from `detach`: `x_d - scale * (x - x_d)` evaluates to exactly `x`
/// because `x - x_d` is exactly zero, while its derivative is `-scale`.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    pub scale: f64,
    pub enabled: bool,
}

impl GradientReversal {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            enabled: true,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if !self.enabled {
            return Ok(x.clone());
        }
        let frozen = x.detach();
        let delta = (x - &frozen)?;
        frozen - (delta * self.scale)?
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn forward_is_exact_identity_and_gradient_is_flipped() {
        let x = Var::new(&[1.5f64, -2.25, 0.0, 1e-30], &Device::Cpu).unwrap();
        let grl = GradientReversal::new(0.7);
        let y = grl.forward(x.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), x.to_vec1::<f64>().unwrap());
        let loss = (y.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let g = loss.backward().unwrap();
        let gx = g.get(&x).unwrap().to_vec1::<f64>().unwrap();
        for (g, v) in gx.iter().zip(x.to_vec1::<f64>().unwrap()) {
            assert!((g + 0.7 * v).abs() < 1e-15);
        }
    }
}
