use super::*;
use crate::config::Config;
use crate::textproc::{vocab::PAD, TokenSequence};

fn tiny_config() -> ModelConfig {
    let mut c = Config::desk().model;
    c.width_v = 16;
    c.width_t = 16;
    c.latent_dim = 8;
    c.heads = 2;
    c.max_len = 8;
    c.vocab_size = 20;
    c.init_std = 0.2;
    c
}

fn seq(words: &[usize], max_len: usize, leading: Leading) -> TokenSequence {
    let mut ids = vec![leading.id()];
    ids.extend_from_slice(words);
    let len = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence { ids, len, pad_mask: (0..max_len).map(|i| i >= len).collect(), attribute_spans: vec![] }
}

fn image(c: &ModelConfig, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layers::trunc_normal::<f32, _>(&mut rng, c.image_size * c.image_size * c.channels, 0.5)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn patch_count_follows_formula() {
    let c = tiny_config();
    let m = CadaModel::<f32>::new(&c, 0).unwrap();
    let img = image(&c, 1);
    let e = m.encode_images(&[&img]).unwrap();
    assert_eq!(e.tokens.shape(), [1, 17, 16]);

    let mut big = tiny_config();
    big.image_size = 224;
    big.patch = 16;
    big.image_layers = 1;
    let m = CadaModel::<f32>::new(&big, 0).unwrap();
    assert_eq!(m.num_patches(), 196);
    let img = image(&big, 1);
    assert_eq!(m.encode_images(&[&img]).unwrap().tokens.shape(), [1, 197, 16]);

    big.patch = 15;
    assert!(matches!(CadaModel::<f32>::new(&big, 0), Err(CadaError::Config(_))));
}

#[test]
fn encoders_are_deterministic() {
    let c = tiny_config();
    let m = CadaModel::<f32>::new(&c, 3).unwrap();
    let img = image(&c, 1);
    let e = m.encode_images(&[&img, &img]).unwrap().tokens.to_vec();
    let half = e.len() / 2;
    assert_eq!(e[..half], e[half..]);
    let t = seq(&[5, 6, 7], 8, Leading::Cls);
    let a = m.encode_texts(&[&t]).unwrap().tokens.to_vec();
    let b = m.encode_texts(&[&t]).unwrap().tokens.to_vec();
    assert_eq!(a, b);
}

#[test]
fn text_encoder_masks_padding() {
    let c = tiny_config();
    let m = CadaModel::<f64>::new(&c, 5).unwrap();
    let t = seq(&[5, 6, 7], 8, Leading::Cls);
    let mut garbage = t.clone();
    for (i, id) in garbage.ids.iter_mut().enumerate().skip(t.len) {
        *id = 5 + i;
    }
    let a = m.encode_texts(&[&t]).unwrap();
    let b = m.encode_texts(&[&garbage]).unwrap();
    assert_eq!(a.tokens.shape(), [1, 8, 16]);
    let d = 16;
    assert!(max_abs_diff(&a.tokens.to_vec()[..t.len * d], &b.tokens.to_vec()[..t.len * d]) < 1e-6);

    let wrong = seq(&[5], 8, Leading::Enc);
    assert!(matches!(m.encode_texts(&[&wrong]), Err(CadaError::Validation(_))));
}

#[test]
fn class_token_reacts_to_every_real_token() {
    let c = tiny_config();
    for seed in 0..3 {
        let m = CadaModel::<f64>::new(&c, seed).unwrap();
        let base = seq(&[5, 6, 7, 8], 8, Leading::Cls);
        let cls0 = m.encode_texts(&[&base]).unwrap().cls().unwrap().to_vec();
        for pos in 1..base.len {
            let mut t = base.clone();
            t.ids[pos] = 12;
            let cls = m.encode_texts(&[&t]).unwrap().cls().unwrap().to_vec();
            assert!(max_abs_diff(&cls0, &cls) > 1e-9, "seed {seed} position {pos}");
        }
    }
}

#[test]
fn projection_with_identity_weights_truncates() {
    let mut c = tiny_config();
    c.latent_dim = 4;
    let m = CadaModel::<f64>::new(&c, 0).unwrap();
    let eye = |d_in: usize, d_out: usize| {
        let mut v = vec![0.0; d_in * d_out];
        for i in 0..d_out.min(d_in) {
            v[i * d_out + i] = 1.0;
        }
        v
    };
    m.w_v.w.tensor.update_data(|w| w.copy_from_slice(&eye(16, 4)));
    let v_cls = Tensor::new((0..16).map(|i| i as f64).collect(), &[1, 16]).unwrap();
    let t_cls = Tensor::new(vec![1.0; 16], &[1, 16]).unwrap();
    let (v, t) = m.project_global(&v_cls, &t_cls).unwrap();
    assert_eq!(v.to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(t.shape(), [1, 4]);
    assert_eq!(Config::paper().model.latent_dim, 256);
}

#[test]
fn zero_cross_attention_reduces_decoder_to_text_encoder() {
    let c = tiny_config();
    let m = CadaModel::<f64>::new(&c, 9).unwrap();
    for l in &m.decoder_layers {
        l.cross.o.w.tensor.update_data(|w| w.fill(0.0));
        l.cross.o.b.as_ref().unwrap().tensor.update_data(|w| w.fill(0.0));
    }
    let t = seq(&[5, 6, 7], 8, Leading::Enc);
    let img = image(&c, 4);
    let enc = m.encode_images(&[&img]).unwrap();
    let dec = m.decode(&[&t], &enc, &[0]).unwrap().tokens.to_vec();
    let txt = m.text_stack(&[&t]).unwrap().tokens.to_vec();
    assert!(max_abs_diff(&dec, &txt) < 1e-5);
}

#[test]
fn decoder_depends_on_the_image() {
    let c = tiny_config();
    let m = CadaModel::<f64>::new(&c, 2).unwrap();
    let t = seq(&[5, 6], 8, Leading::Enc);
    let (a, b) = (image(&c, 1), image(&c, 2));
    let enc = m.encode_images(&[&a, &b]).unwrap();
    let out = m.decode(&[&t, &t], &enc, &[0, 1]).unwrap();
    assert_eq!(out.tokens.shape(), [2, 8, 16]);
    let h = out.enc().unwrap().to_vec();
    assert!(max_abs_diff(&h[..16], &h[16..]) > 1e-9);
    let cls = seq(&[5, 6], 8, Leading::Cls);
    assert!(matches!(m.decode(&[&cls], &enc, &[0]), Err(CadaError::Validation(_))));
}

#[test]
fn decoder_gather_matches_separate_calls() {
    let c = tiny_config();
    let m = CadaModel::<f64>::new(&c, 2).unwrap();
    let t = seq(&[5, 6, 9], 8, Leading::Enc);
    let (a, b) = (image(&c, 1), image(&c, 2));
    let both = m.encode_images(&[&a, &b]).unwrap();
    let only_b = m.encode_images(&[&b]).unwrap();
    let x = m.decode(&[&t, &t], &both, &[1, 1]).unwrap().tokens.to_vec();
    let y = m.decode(&[&t], &only_b, &[0]).unwrap().tokens.to_vec();
    assert!(max_abs_diff(&x[..y.len()], &y) < 1e-12);
}

#[test]
fn sharing_holds_and_negative_control_fails() {
    let c = tiny_config();
    let mut m = CadaModel::<f32>::new(&c, 0).unwrap();
    let r = m.verify_sharing();
    assert!(r.passed(), "{:?}", r.violations);
    assert!(r.shared_checked > 0 && r.exclusive_checked > 0);

    // a write through the text encoder is visible through the decoder
    m.text_layers[1].ffn.fc1.w.tensor.update_data(|w| w[0] = 42.0);
    assert_eq!(m.decoder_layers[1].shared.ffn.fc1.w.tensor.data()[0], 42.0);

    m.unshare_decoder_layer(1).unwrap();
    let r = m.verify_sharing();
    assert!(!r.passed());
    assert!(r.violations.iter().all(|v| v.contains("decoder.layers.1")));
    let err = m.check_sharing().unwrap_err().to_string();
    assert!(err.contains("decoder.layers.1.attn.q.w"), "{err}");
}

#[test]
fn checkpoint_round_trip_keeps_sharing() {
    let c = tiny_config();
    let a = CadaModel::<f32>::new(&c, 1).unwrap();
    let b = CadaModel::<f32>::new(&c, 2).unwrap();
    let ck = Checkpoint::from_bytes(&a.to_checkpoint("h", "cfg", 7).to_bytes()).unwrap();
    assert!(!ck.aliases.is_empty());
    b.load_weights(&ck).unwrap();
    for (p, q) in a.parameters().iter().zip(b.parameters()) {
        assert_eq!(p.name, q.name);
        assert_eq!(*p.tensor.data(), *q.tensor.data());
    }
    assert!(b.verify_sharing().passed());

    let mut other = c.clone();
    other.width_t = 8;
    other.heads = 2;
    assert!(CadaModel::<f32>::new(&other, 0).unwrap().load_weights(&ck).is_err());
}
