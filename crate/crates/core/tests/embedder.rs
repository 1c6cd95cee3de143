use embinvert_core::embedder::{EmbedderConfig, EmbedderNet, DEFAULT_SEED};
use embinvert_core::numcore::relu;
use embinvert_core::synth::smooth_image;
use embinvert_core::{Rng, Tensor};

#[test]
fn default_embedding_is_frozen() {
    let e = EmbedderNet::new(EmbedderConfig::default()).unwrap();
    assert_eq!(e.config().seed, DEFAULT_SEED);
    let img = smooth_image(&mut Rng::new(1), [32, 32, 3]).unwrap();
    let got = e.embed_raw(&img).unwrap();
    let want = [0.1577808617450662, -0.41530864028834885, 0.25406730880831774, 0.03173119360440555];
    for (g, w) in got.values().data().iter().zip(want) {
        assert!((g - w).abs() < 1e-13, "{g} vs {w}");
    }
    let centered = EmbedderNet::new(EmbedderConfig { centered: true, ..Default::default() }).unwrap();
    let c = centered.embed_raw(&img).unwrap();
    assert!((c.values().data()[0] - -0.029253403784583788).abs() < 1e-13);
}

#[test]
fn zero_image_passes_only_biases_through_the_first_layer() {
    let e = EmbedderNet::with_seed(9);
    let zero = Tensor::zeros(&[32, 32, 3]);
    let first = &e.network().layers()[0];
    let (_, bias) = first.params().unwrap();
    let out = relu(&first.forward(&zero).unwrap());
    let (h, w, c) = out.hwc().unwrap();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                assert_eq!(out.at(y, x, ch), bias.data()[ch].max(0.0));
            }
        }
    }
    assert!(e.embed_raw(&zero).unwrap().values().data().iter().all(|v| v.is_finite()));
}

fn mean_pairwise_cosine(e: &EmbedderNet, n: u64) -> f64 {
    let embs: Vec<Tensor> = (0..n)
        .map(|i| {
            let img = smooth_image(&mut Rng::derived(77, i), e.input_dims()).unwrap();
            e.embed(&img, &[]).unwrap().normalized.values().clone()
        })
        .collect();
    let mut sum = 0.0;
    for i in 0..embs.len() {
        for j in 0..i {
            sum += embs[i].dot(&embs[j]).unwrap();
        }
    }
    sum / (embs.len() * (embs.len() - 1) / 2) as f64
}

#[test]
fn distinct_images_are_discriminated() {
    let raw = mean_pairwise_cosine(&EmbedderNet::new(EmbedderConfig::default()).unwrap(), 100);
    assert!(raw < 0.99, "mean pairwise cosine {raw}");
    let centered =
        mean_pairwise_cosine(&EmbedderNet::new(EmbedderConfig { centered: true, ..Default::default() }).unwrap(), 100);
    assert!(centered.abs() < 0.1, "centered mean pairwise cosine {centered}");
}

#[test]
fn zero_image_matches_layer_by_layer_composition() {
    let e = EmbedderNet::with_seed(10);
    let mut x = Tensor::zeros(&[32, 32, 3]);
    for layer in e.network().layers() {
        x = layer.forward(&x).unwrap();
    }
    assert_eq!(e.embed_raw(&Tensor::zeros(&[32, 32, 3])).unwrap().values(), &x);
}

#[test]
fn activation_stats_match_two_pass_loop() {
    let e = EmbedderNet::with_seed(11);
    let images: Vec<_> = (0..10).map(|i| smooth_image(&mut Rng::derived(5, i), e.input_dims()).unwrap()).collect();
    for layer in 1..=4 {
        let (mean, std) = e.activation_stats(&images, layer).unwrap();
        let acts: Vec<Tensor> =
            images.iter().map(|im| e.embed(im, &[layer]).unwrap().activations[&layer].clone()).collect();
        for k in 0..mean.len() {
            let m = acts.iter().map(|a| a.data()[k]).sum::<f64>() / 10.0;
            let var = acts.iter().map(|a| (a.data()[k] - m).powi(2)).sum::<f64>() / 10.0;
            assert!((mean.data()[k] - m).abs() < 1e-12);
            assert!((std.data()[k] - var.sqrt()).abs() < 1e-9, "layer {layer} node {k}");
        }
    }
}

#[test]
fn normalized_output_has_unit_norm_and_shares_direction() {
    let e = EmbedderNet::with_seed(4);
    let img = smooth_image(&mut Rng::new(2), e.input_dims()).unwrap();
    let out = e.embed(&img, &[1, 3]).unwrap();
    assert!((out.normalized.values().norm() - 1.0).abs() < 1e-14);
    let raw = out.unnormalized.values();
    assert!((out.normalized.values().dot(raw).unwrap() - raw.norm()).abs() < 1e-12);
    assert_eq!(out.activations.keys().copied().collect::<Vec<_>>(), [1, 3]);
    assert_eq!(out.activations[&1].dims(), e.activation_dims(1).unwrap().as_slice());
}
