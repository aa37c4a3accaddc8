use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::conv::{Activation, ConvSpec};

/// Expand (1x1) -> depthwise (3x3) -> project (1x1), with a skip connection
/// when the shape is preserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvertedResidualSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl InvertedResidualSpec {
    pub fn new(in_channels: usize, out_channels: usize, expansion: usize, stride: usize) -> Self {
        InvertedResidualSpec {
            in_channels,
            out_channels,
            expansion,
            stride,
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.expansion == 0 {
            return Err(Error::Config(format!("empty inverted residual {self:?}")));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::Config(format!("inverted residual stride {}", self.stride)));
        }
        Ok(())
    }

    /// The three convolutions in order, named by role.
    pub fn convs(&self) -> [(&'static str, ConvSpec); 3] {
        let hidden = self.hidden_channels();
        [
            ("expand", ConvSpec::new(self.in_channels, hidden, 1).with_activation(Activation::Relu6)),
            (
                "dw",
                ConvSpec::depthwise(hidden, 3)
                    .with_stride(self.stride)
                    .with_activation(Activation::Relu6),
            ),
            ("project", ConvSpec::new(hidden, self.out_channels, 1)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_width_and_skip_rule() {
        let s = InvertedResidualSpec::new(8, 8, 6, 1);
        assert_eq!(s.convs()[0].1.out_channels, 48);
        assert!(s.convs()[1].1.is_depthwise());
        assert!(s.has_skip());
        assert!(!InvertedResidualSpec::new(8, 8, 6, 2).has_skip());
        assert!(!InvertedResidualSpec::new(8, 16, 6, 1).has_skip());
    }
}
