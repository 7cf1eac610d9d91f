mod common;

use common::{frozen_contract, normalization_params, synthetic};
use vcenet_core::backbone::{BackboneConfig, BACKBONE_PREFIX};
use vcenet_core::episode::{build_fold_spec, EpisodeSampler, Split};
use vcenet_core::loss::LossKind;
use vcenet_core::model::{ModelConfig, VceNet};
use vcenet_core::optim::{OptimConfig, Optimizer};
use vcenet_core::train::{episode_gradients, train_step};
use vcenet_core::Error;

#[test]
fn backbone_stays_bit_identical_while_the_rest_learns() {
    let report = frozen_contract(25);
    assert!(report.backbone_tensors > 0);
    assert!(report.backbone_moved.is_empty(), "{:?}", report.backbone_moved);
    assert!(report.trainable_unchanged.is_empty(), "{:?}", report.trainable_unchanged);
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let data = synthetic(8, 48, 2);
    let (net, store) = VceNet::new::<f64>(&ModelConfig::tiny(8)).unwrap();
    let fold = build_fold_spec(0, 4, 2).unwrap();
    let mut sampler = EpisodeSampler::for_fold(&data, &fold, Split::Train, 0).unwrap();
    let mut live = std::collections::BTreeSet::new();
    for _ in 0..4 {
        let ep = sampler.next_episode().unwrap();
        let (_, grads) = episode_gradients(&net, &store, &ep, LossKind::BalancedBce).unwrap();
        for (id, g) in grads {
            if g.data().iter().any(|v| *v != 0.0) {
                live.insert(store.get(id).name.clone());
            }
        }
    }
    let dead: Vec<_> = store.iter().filter(|(_, p)| p.trainable && !live.contains(&p.name)).map(|(_, p)| &p.name).collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
    assert!(live.iter().all(|n| !n.starts_with(BACKBONE_PREFIX)));
}

#[test]
fn non_finite_parameters_abort_the_step_with_episode_ids() {
    let data = synthetic(8, 48, 3);
    let (net, mut store) = VceNet::new::<f32>(&ModelConfig::tiny(8)).unwrap();
    let head = store.id("ccm.head.weight").unwrap();
    store.value_mut(head).data_mut()[0] = f32::NAN;
    let before = store.clone();
    let fold = build_fold_spec(0, 4, 2).unwrap();
    let mut sampler = EpisodeSampler::for_fold(&data, &fold, Split::Train, 5).unwrap();
    let batch = vec![sampler.next_episode().unwrap(), sampler.next_episode().unwrap()];
    let mut opt = Optimizer::new(OptimConfig::default());
    let err = train_step(&net, &mut store, &mut opt, &batch, LossKind::BalancedBce, 1e-3, 17).unwrap_err();
    match err {
        Error::NonFiniteLoss { iteration, episodes } => {
            assert_eq!(iteration, 17);
            assert_eq!(episodes.len(), 2);
            assert!(episodes[0].starts_with(&batch[0].image_id));
        }
        other => panic!("unexpected {other}"),
    }
    // nothing was updated
    for ((_, a), (_, b)) in store.iter().zip(before.iter()) {
        assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn normalization_lives_only_in_the_frozen_backbone() {
    let (_, tiny) = VceNet::new::<f32>(&ModelConfig::tiny(16)).unwrap();
    let mut resnet_cfg = ModelConfig::tiny(2048);
    resnet_cfg.backbone = BackboneConfig::resnet50(None);
    let (_, resnet) = VceNet::new::<f32>(&resnet_cfg).unwrap();
    for store in [&tiny, &resnet] {
        let outside = normalization_params(
            store.iter().map(|(_, p)| p.name.as_str()).filter(|n| !n.starts_with(BACKBONE_PREFIX)),
        );
        assert!(outside.is_empty(), "{outside:?}");
    }
    // the detector does see the frozen statistics inside the ResNet
    let names: Vec<&str> = resnet.iter().map(|(_, p)| p.name.as_str()).collect();
    assert!(!normalization_params(names).is_empty());
    assert!(resnet.iter().filter(|(_, p)| p.name.contains("running_")).all(|(_, p)| !p.trainable));
}
