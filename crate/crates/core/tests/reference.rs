//! Frozen values from an independent PyTorch implementation of the same
//! network, loaded with identical initial parameters and inputs (width
//! divisor 16, two 32×32 synthetic pairs, seed 0, float64).

mod common;

use candle_core::DType;
use hcgmnet::config::TrainConfig;
use hcgmnet::data::{collate, Batch};
use hcgmnet::losses::total_loss;
use hcgmnet::model::HcgmNet;
use hcgmnet::optim::AdamW;
use hcgmnet::trainer::train_step;

/// Per step: ce_coarse, dice_coarse, ce_final, dice_final, total.
const LOSSES: [[f64; 5]; 3] = [
    [
        0.5684195057827665,
        0.8912573413731091,
        0.9904780135287943,
        0.8965384412018934,
        3.346693301886563,
    ],
    [
        0.5437633965157098,
        0.8714096300501543,
        0.9761812564039187,
        0.8887031895196643,
        3.280057472489447,
    ],
    [
        0.5238346691494375,
        0.8557770055266217,
        0.960740299754428,
        0.8817487687854716,
        3.2221007432159587,
    ],
];

/// L2 norm of the step-0 gradient of selected parameters.
const GRAD_NORMS: [(&str, f64); 10] = [
    ("backbone.block1.conv0.weight", 0.9317510506490909),
    ("backbone.block5.conv40.weight", 0.1782186855930692),
    ("fusion.level5.conv.weight", 0.1687215846029573),
    ("fusion.aggregate.conv.weight", 0.2496745736370615),
    ("fusion.coarse_head.weight", 0.8448983210869134),
    ("cgm3.q.weight", 0.0),
    ("cgm3.q.bias", 0.0),
    ("cgm5.o.weight", 0.005441076908639425),
    ("cgm5.o.bias", 0.007023625094971466),
    ("decoder.final_head.weight", 0.6720862807371378),
];

fn setup() -> (TrainConfig, HcgmNet, hcgmnet::nn::ParamStore, Batch) {
    let cfg = TrainConfig {
        pretrained: false,
        width_divisor: 16,
        ..TrainConfig::default()
    };
    let batch = collate(&common::synthetic_samples(2, 32, 7), DType::F64).unwrap();
    let (net, params) = HcgmNet::build(&cfg.model_config(), cfg.seed, DType::F64).unwrap();
    (cfg, net, params, batch)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-12)
}

#[test]
fn step0_gradients_match_reference() {
    let (_, net, params, batch) = setup();
    let out = net.forward(&batch.image_a, &batch.image_b, true).unwrap();
    let loss = total_loss(&out.coarse, &out.final_map, &batch.target).unwrap();
    let grads = loss.total.backward().unwrap();
    for (name, expected) in GRAD_NORMS {
        let var = params
            .trainable()
            .find(|(n, _)| n.as_str() == name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
            .1;
        let norm = match grads.get(var) {
            Some(g) => g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt(),
            None => 0.0,
        };
        assert!(close(norm, expected, 1e-9), "{name}: {norm} vs {expected}");
    }
}

#[test]
fn first_steps_match_reference() {
    let (cfg, net, params, batch) = setup();
    let mut opt = AdamW::new(cfg.optimizer());
    for (step, expected) in LOSSES.iter().enumerate() {
        let l = train_step(&net, &params, &mut opt, &batch, step, |_| Ok(())).unwrap();
        let got = [l.ce_coarse, l.dice_coarse, l.ce_final, l.dice_final, l.total];
        for (g, e) in got.iter().zip(expected) {
            assert!(close(*g, *e, 1e-10), "step {step}: {got:?} vs {expected:?}");
        }
    }
}
