//! Trainable-parameter accounting.

use serde::{Deserialize, Serialize};

use super::config::{Architecture, ModelConfig};
use super::layers::{Parametric, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterAudit {
    pub total: usize,
    /// Both dense layers (encoder `L → K` and decoder `K → L`, with biases).
    pub fc_params: usize,
    pub non_fc_params: usize,
    pub layers: Vec<LayerCount>,
}

/// `2·L·K + K + L`: weights and biases of the two dense layers.
pub fn closed_form_fc(config: &ModelConfig) -> usize {
    let (l, k) = (config.flattened_length(), config.codeword_length());
    2 * l * k + k + l
}

/// Reference trainable-parameter totals on the 32×32 grid, for CR 16, 32 and 64.
pub fn reference_total(architecture: Architecture, compression_ratio: usize) -> Option<usize> {
    let totals = match architecture {
        Architecture::ExtendNlNet => [543_456, 281_248, 150_144],
        Architecture::CsiNet => [530_656, 268_448, 137_344],
    };
    let index = [16, 32, 64].iter().position(|&cr| cr == compression_ratio)?;
    Some(totals[index])
}

/// Reference non-FC count: reference total minus the closed-form dense count.
pub fn reference_non_fc(config: &ModelConfig) -> Option<usize> {
    if (config.height, config.width) != (32, 32) {
        return None;
    }
    reference_total(config.architecture, config.compression_ratio).map(|t| t - closed_form_fc(config))
}

fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(layer, _)| layer)
}

/// Counts every trainable scalar, grouped by layer in visiting order.
pub fn count_parameters<F: Scalar, M: Parametric<F> + ?Sized>(model: &M) -> ParameterAudit {
    let mut layers: Vec<LayerCount> = Vec::new();
    model.visit("", &mut |name, p| {
        if !p.trainable {
            return;
        }
        let layer = layer_of(name);
        match layers.last_mut() {
            Some(last) if last.layer == layer => last.params += p.len(),
            _ => layers.push(LayerCount { layer: layer.to_string(), params: p.len() }),
        }
    });
    let total = layers.iter().map(|l| l.params).sum();
    let fc_params = layers
        .iter()
        .filter(|l| l.layer.ends_with("dense"))
        .map(|l| l.params)
        .sum();
    ParameterAudit {
        total,
        fc_params,
        non_fc_params: total - fc_params,
        layers,
    }
}

impl ParameterAudit {
    /// Sum of the per-layer counts whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> usize {
        self.layers
            .iter()
            .filter(|l| l.layer.starts_with(prefix))
            .map(|l| l.params)
            .sum()
    }

    pub fn table(&self) -> String {
        let width = self.layers.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&format!("{:<width$}  {:>9}\n", l.layer, l.params));
        }
        out.push_str(&format!("{:<width$}  {:>9}\n", "fc", self.fc_params));
        out.push_str(&format!("{:<width$}  {:>9}\n", "non-fc", self.non_fc_params));
        out.push_str(&format!("{:<width$}  {:>9}\n", "total", self.total));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::Param;
    use crate::model::{Autoencoder, ModelConfig};

    struct Empty;

    impl Parametric<f32> for Empty {
        fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<f32>)) {}
        fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<f32>)) {}
    }

    #[test]
    fn empty_model_counts_zero() {
        let audit = count_parameters(&Empty);
        assert_eq!((audit.total, audit.fc_params, audit.non_fc_params), (0, 0, 0));
        assert!(audit.layers.is_empty());
    }

    #[test]
    fn fc_count_matches_closed_form() {
        for cfg in [ModelConfig::extend_nlnet(16), ModelConfig::csinet(64)] {
            let model = Autoencoder::<f32>::new(cfg.clone(), 0).unwrap();
            let audit = count_parameters(&model);
            assert_eq!(audit.fc_params, closed_form_fc(&cfg));
            assert_eq!(audit.total, audit.fc_params + audit.non_fc_params);
        }
        assert_eq!(closed_form_fc(&ModelConfig::extend_nlnet(16)), 526_464);
    }

    #[test]
    fn reference_non_fc_is_constant_across_ratios() {
        for (arch, target) in [(Architecture::ExtendNlNet, 16_992), (Architecture::CsiNet, 4_192)] {
            for cr in [16, 32, 64] {
                assert_eq!(reference_non_fc(&ModelConfig::new(arch, cr)), Some(target));
            }
        }
        assert_eq!(reference_non_fc(&ModelConfig::csinet(8)), None);
        assert_eq!(reference_non_fc(&ModelConfig::csinet(16).with_spatial(8, 8)), None);
    }

    #[test]
    fn running_statistics_are_not_counted() {
        let model = Autoencoder::<f32>::new(ModelConfig::csinet(16), 0).unwrap();
        let audit = count_parameters(&model);
        assert_eq!(audit.subtotal("encoder.bn"), 4);
    }
}
