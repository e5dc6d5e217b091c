//! Ready-made configurations for tests, benchmarks and the experiments.

use super::config::{ComposerConfig, ControllerConfig, Glimpse, MetalayerSpec, ModuleSpec};

/// A small all-activation model: identity stem, `sizes[i]` modules in
/// metalayer `i`, each an MLP with one hidden layer of `width` units. Inner
/// metalayers output `width` features; the last outputs class scores.
pub fn tiny(
    input_dim: usize,
    num_classes: usize,
    sizes: &[usize],
    width: usize,
    controller_hidden: usize,
    gamma_inputs: usize,
    init_seed: u64,
) -> ComposerConfig {
    let metalayers = sizes
        .iter()
        .enumerate()
        .map(|(i, &m)| MetalayerSpec {
            modules: (0..m)
                .map(|_| ModuleSpec {
                    glimpse: Glimpse::Activations,
                    hidden: vec![width],
                    output: if i + 1 == sizes.len() {
                        num_classes
                    } else {
                        width
                    },
                })
                .collect(),
        })
        .collect();
    ComposerConfig {
        input_rows: 1,
        input_cols: input_dim,
        num_classes,
        stem: vec![],
        init_seed,
        metalayers,
        controller: ControllerConfig {
            hidden: controller_hidden,
            pool: None,
            gamma_inputs,
            gamma_scale: 1.0,
        },
    }
}

/// Wide-MNIST trade-off model: one metalayer holding a small module that
/// sees only the left 28×28 half and a large module that sees the full
/// 28×56 canvas. The controller reads a 4×4 average-pooled image and two
/// preference inputs (glimpse, then entropy).
pub fn wide_mnist(
    small_hidden: usize,
    large_hidden: usize,
    controller_hidden: usize,
    init_seed: u64,
) -> ComposerConfig {
    ComposerConfig {
        input_rows: 28,
        input_cols: 56,
        num_classes: 20,
        stem: vec![],
        init_seed,
        metalayers: vec![MetalayerSpec {
            modules: vec![
                ModuleSpec {
                    glimpse: Glimpse::Region {
                        row0: 0,
                        col0: 0,
                        rows: 28,
                        cols: 28,
                    },
                    hidden: vec![small_hidden],
                    output: 20,
                },
                ModuleSpec {
                    glimpse: Glimpse::Full,
                    hidden: vec![large_hidden],
                    output: 20,
                },
            ],
        }],
        controller: ControllerConfig {
            hidden: controller_hidden,
            pool: Some([4, 4]),
            gamma_inputs: 2,
            gamma_scale: 1.0,
        },
    }
}

/// Entropy ablation model: one metalayer of `modules` identical MLPs over
/// the full 28×28 image, one preference input (entropy).
pub fn mnist_equal_modules(
    modules: usize,
    hidden: usize,
    controller_hidden: usize,
    init_seed: u64,
) -> ComposerConfig {
    ComposerConfig {
        input_rows: 28,
        input_cols: 28,
        num_classes: 10,
        stem: vec![],
        init_seed,
        metalayers: vec![MetalayerSpec {
            modules: (0..modules)
                .map(|_| ModuleSpec {
                    glimpse: Glimpse::Full,
                    hidden: vec![hidden],
                    output: 10,
                })
                .collect(),
        }],
        controller: ControllerConfig {
            hidden: controller_hidden,
            pool: Some([4, 4]),
            gamma_inputs: 1,
            gamma_scale: 1.0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        tiny(4, 3, &[2], 5, 4, 1, 0).validate().unwrap();
        tiny(4, 3, &[2, 3], 5, 4, 0, 0).validate().unwrap();
        let w = wide_mnist(16, 64, 32, 0);
        w.validate().unwrap();
        assert_eq!(w.beta_table(), vec![vec![12_900, 101_716]]);
        assert!(w.beta_table()[0][1] >= 3 * w.beta_table()[0][0]);
        let a = mnist_equal_modules(4, 32, 32, 0);
        a.validate().unwrap();
        assert_eq!(a.beta_table()[0], vec![25_450; 4]);
    }
}
