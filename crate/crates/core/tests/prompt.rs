mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use common::*;
use proptest::prelude::*;
use stp4d::nn::{AttentionConfig, Graph, Init, ParameterStore};
use stp4d::prompt::*;
use stp4d::{Error, Tensor};

fn encoder(dim: usize) -> TextEncoder {
    TextEncoder::new(PromptConfig::default(), dim)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn toy_encoder_is_deterministic_and_unit() {
    let a = encoder(64).encode("a red cube").unwrap();
    let b = encoder(64).encode("a red cube").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.source, EmbeddingSource::Toy);
    assert!((norm(&a.values) - 1.0).abs() < 1e-6);
}

#[test]
fn toy_encoder_separates_prompts_and_word_order() {
    let e = encoder(64);
    let red = e.encode("a red cube").unwrap();
    let blue = e.encode("a blue cube").unwrap();
    assert!(red.cosine(&blue) < 1.0);
    let swapped = e.encode("cube red a").unwrap();
    assert!(red.cosine(&swapped) < 1.0 - 1e-6);
}

#[test]
fn json_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..768).map(|i| ((i * 37 % 101) as f64 - 50.0) / 1024.0 + 1e-13 * i as f64).collect();
    let path = dir.path().join("e.json");
    write_embedding_json(&path, &values).unwrap();
    assert_eq!(read_embedding(&path).unwrap(), values);
}

#[test]
fn binary_file_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..768).map(|i| (i as f64 - 384.0) / 256.0).collect();
    let path = dir.path().join("e.emb");
    write_embedding_binary(&path, &values).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"STP4DEMB");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 768);
    assert_eq!(bytes.len(), 12 + 768 * 4);
    assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), -1.5);
    assert_eq!(read_embedding(&path).unwrap(), values);
    std::fs::write(&path, &bytes[..100]).unwrap();
    assert!(matches!(read_embedding(&path), Err(Error::Encoder(_))));
}

#[test]
fn file_backend_looks_up_by_key() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..16).map(|i| i as f64 + 1.0).collect();
    write_embedding_json(&dir.path().join(format!("{}.json", embedding_key("a green ball"))), &values).unwrap();
    let cfg = PromptConfig { backend: EncoderBackend::File, embedding_dir: Some(dir.path().to_path_buf()), ..PromptConfig::default() };
    let e = TextEncoder::new(cfg.clone(), 16).encode("a green ball").unwrap();
    assert_eq!(e.source, EmbeddingSource::File);
    let n = norm(&values);
    assert!(max_diff(&e.values, &values.iter().map(|v| v / n).collect::<Vec<_>>()) < 1e-15);
    assert!(matches!(TextEncoder::new(cfg.clone(), 16).encode("missing"), Err(Error::Encoder(_))));
    assert!(matches!(TextEncoder::new(cfg, 8).encode("a green ball"), Err(Error::Encoder(_))));
}

/// Answers one HTTP request with `body` and returns the request body it saw.
fn serve_once(listener: TcpListener, body: String) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
        }
        let mut req = vec![0u8; length];
        reader.read_exact(&mut req).unwrap();
        write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len())
            .unwrap();
        String::from_utf8(req).unwrap()
    })
}

#[test]
fn service_backend_posts_text_and_reads_an_array() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/embed", listener.local_addr().unwrap());
    let server = serve_once(listener, "[3.0, 4.0, 0.0]".into());
    let cfg = PromptConfig { backend: EncoderBackend::Service, service_url: Some(url), timeout_ms: 5000, ..PromptConfig::default() };
    let e = TextEncoder::new(cfg, 3).encode("a spinning top").unwrap();
    assert_eq!(e.source, EmbeddingSource::Service);
    assert!(max_diff(&e.values, &[0.6, 0.8, 0.0]) < 1e-15);
    let req: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
    assert_eq!(req["text"], "a spinning top");
}

#[test]
fn unreachable_service_is_an_encoder_error() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let cfg = PromptConfig {
        backend: EncoderBackend::Service,
        service_url: Some(format!("http://{addr}/embed")),
        timeout_ms: 2000,
        ..PromptConfig::default()
    };
    assert!(matches!(TextEncoder::new(cfg, 4).encode("x"), Err(Error::Encoder(_))));
}

fn conditioner(d: usize, heads: usize, restricted: bool, seed: u64) -> (ParameterStore, PromptConditioner) {
    let mut store = ParameterStore::new();
    let c = PromptConditioner::new(&mut store, &mut Init::new(seed), "tpe", AttentionConfig::new(d, heads).unwrap(), restricted).unwrap();
    (store, c)
}

fn unit(d: usize, seed: u64) -> Vec<f64> {
    let v = rand_tensor(&[d], seed, 1.0).data().to_vec();
    let n = norm(&v);
    v.iter().map(|x| x / n).collect()
}

#[test]
fn time_varying_single_row_shape() {
    let (store, c) = conditioner(8, 2, true, 0);
    let g = Graph::inference();
    let p = store.bind(&g);
    assert_eq!(c.time_varying(&g, &p, &unit(8, 1), 1).unwrap().shape(), &[1, 8]);
    assert!(matches!(c.time_varying(&g, &p, &unit(8, 1), 0), Err(Error::Config(_))));
}

#[test]
fn zero_final_layer_gives_equal_rows() {
    let (mut store, c) = conditioner(8, 2, true, 0);
    let last = c.mlp.layers.last().unwrap();
    store.set(&last.weight, Tensor::zeros([8, 8])).unwrap();
    store.set(&last.bias, rand_tensor(&[8], 4, 1.0)).unwrap();
    let g = Graph::inference();
    let p = store.bind(&g);
    let e = c.time_varying(&g, &p, &unit(8, 1), 4).unwrap();
    for row in e.value().data().chunks(8) {
        assert_eq!(row, store.get(&last.bias).unwrap().data());
    }
}

#[test]
fn time_varying_matches_forward_oracle() {
    let (mut store, c) = conditioner(8, 2, true, 3);
    randomize(&mut store, 5, 0.5);
    let e = unit(8, 2);
    let g = Graph::inference();
    let p = store.bind(&g);
    let got = c.time_varying(&g, &p, &e, 3).unwrap().value().clone();
    let (l0, l1) = (&c.mlp.layers[0], &c.mlp.layers[1]);
    for t in 0..3 {
        let mut x = e.clone();
        x.extend_from_slice(&fourier_time(t as f64 / 3.0));
        let h: Vec<f64> = affine(&x, store.get(&l0.weight).unwrap(), store.get(&l0.bias).unwrap()).into_iter().map(gelu).collect();
        let y = affine(&h, store.get(&l1.weight).unwrap(), store.get(&l1.bias).unwrap());
        assert!(max_diff(&got.data()[t * 8..(t + 1) * 8], &y) < 1e-12);
    }
    assert!(max_diff(&got.data()[..8], &got.data()[8..16]) > 1e-6);
}

#[test]
fn single_prompt_row_broadcasts_its_projection() {
    let (mut store, c) = conditioner(4, 2, true, 1);
    randomize(&mut store, 9, 0.5);
    let g = Graph::inference();
    let p = store.bind(&g);
    let tokens = rand_tensor(&[3, 4], 2, 1.0);
    let e = rand_tensor(&[1, 4], 3, 1.0);
    let out = c.inject(&p, &g.constant(tokens.clone()), &g.constant(e.clone())).unwrap();
    let v = affine(e.data(), store.get(&c.attn.v.weight).unwrap(), store.get(&c.attn.v.bias).unwrap());
    let proj = affine(&v, store.get(&c.attn.out.weight).unwrap(), store.get(&c.attn.out.bias).unwrap());
    let want: Vec<f64> = tokens.data().iter().enumerate().map(|(i, x)| x + proj[i % 4]).collect();
    assert!(max_diff(out.value().data(), &want) < 1e-12);
}

#[test]
fn null_conditioning_leaves_tokens_unchanged() {
    let (store, c) = conditioner(4, 2, true, 1);
    let g = Graph::inference();
    let p = store.bind(&g);
    let tokens = rand_tensor(&[4, 4], 2, 1.0);
    let out = c.inject(&p, &g.constant(tokens.clone()), &g.constant(Tensor::zeros([2, 4]))).unwrap();
    assert_eq!(out.value(), &tokens);
}

/// Identity projections, one head: `g_i + Σ_j softmax(g_i·e_j / √d)_j e_j`.
fn attention_oracle(tokens: &Tensor, e: &Tensor, keys: &[std::ops::Range<usize>]) -> Vec<f64> {
    let d = tokens.last_dim();
    let mut out = tokens.data().to_vec();
    for (i, range) in keys.iter().enumerate() {
        let q = &tokens.data()[i * d..(i + 1) * d];
        let scores: Vec<f64> = range.clone().map(|j| (0..d).map(|k| q[k] * e.data()[j * d + k]).sum::<f64>() / (d as f64).sqrt()).collect();
        let w = softmax(&scores);
        for (wj, j) in w.iter().zip(range.clone()) {
            for k in 0..d {
                out[i * d + k] += wj * e.data()[j * d + k];
            }
        }
    }
    out
}

fn identity_attention(store: &mut ParameterStore, c: &PromptConditioner, d: usize) {
    for l in [&c.attn.q, &c.attn.k, &c.attn.v, &c.attn.out] {
        store.set(&l.weight, Tensor::eye(d)).unwrap();
    }
}

#[test]
fn two_frames_match_hand_attention() {
    let tokens = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let e = Tensor::new([2, 2], vec![0.5, -1.0, 2.0, 1.0]).unwrap();
    for restricted in [true, false] {
        let (mut store, c) = conditioner(2, 1, restricted, 0);
        identity_attention(&mut store, &c, 2);
        let g = Graph::inference();
        let p = store.bind(&g);
        let out = c.inject(&p, &g.constant(tokens.clone()), &g.constant(e.clone())).unwrap();
        let keys = if restricted { vec![0..1, 1..2] } else { vec![0..2, 0..2] };
        let want = attention_oracle(&tokens, &e, &keys);
        assert!(max_diff(out.value().data(), &want) < 1e-12, "restricted={restricted}");
    }
    // Frame-restricted: each token gets exactly its own prompt row.
    let (mut store, c) = conditioner(2, 1, true, 0);
    identity_attention(&mut store, &c, 2);
    let g = Graph::inference();
    let p = store.bind(&g);
    let out = c.inject(&p, &g.constant(tokens.clone()), &g.constant(e.clone())).unwrap();
    assert_eq!(out.value().data(), &[1.5, -1.0, 2.0, 3.0]);
    // Unrestricted, first token: scores (0.5, 2) / √2.
    let (mut store, c) = conditioner(2, 1, false, 0);
    identity_attention(&mut store, &c, 2);
    let p = store.bind(&g);
    let out = c.inject(&p, &g.constant(tokens), &g.constant(e)).unwrap();
    let w1 = 1.0 / (1.0 + (1.5 / 2f64.sqrt()).exp());
    let want0 = [1.0 + w1 * 0.5 + (1.0 - w1) * 2.0, -w1 + (1.0 - w1)];
    assert!(max_diff(&out.value().data()[..2], &want0) < 1e-12);
}

#[test]
fn layout_mismatch_is_a_dimension_error() {
    let (store, c) = conditioner(4, 2, true, 0);
    let g = Graph::inference();
    let p = store.bind(&g);
    let r = c.inject(&p, &g.constant(Tensor::zeros([5, 4])), &g.constant(Tensor::zeros([2, 4])));
    assert!(matches!(r, Err(Error::Dimension(_))));
    let r = c.inject(&p, &g.constant(Tensor::zeros([4, 4])), &g.constant(Tensor::zeros([2, 8])));
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn prompt_gradients_match_finite_differences() {
    let (mut store, c) = conditioner(4, 2, true, 0);
    randomize(&mut store, 17, 0.5);
    let e = unit(4, 3);
    let tokens = rand_tensor(&[4, 4], 6, 1.0);
    let weights = rand_tensor(&[4, 4], 7, 1.0);
    check(
        &store,
        |g, p| {
            let et = c.time_varying(g, p, &e, 2)?;
            Ok(c.inject(p, &g.constant(tokens.clone()), &et)?.mul(&g.constant(weights.clone()))?.sum())
        },
        1e-3,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_is_preserved_and_other_frames_do_not_leak(seed in 0u64..10_000, t_a in 2usize..4, groups in 1usize..4, changed in 0usize..4) {
        let changed = changed % t_a;
        let (mut store, c) = conditioner(4, 2, true, seed);
        randomize(&mut store, seed, 0.7);
        let g = Graph::inference();
        let p = store.bind(&g);
        let tokens = rand_tensor(&[t_a * groups, 4], seed + 1, 1.0);
        let e = rand_tensor(&[t_a, 4], seed + 2, 1.0);
        let mut e2 = e.clone();
        for k in 0..4 {
            e2.data_mut()[changed * 4 + k] += 1.0 + k as f64;
        }
        let a = c.inject(&p, &g.constant(tokens.clone()), &g.constant(e)).unwrap();
        let b = c.inject(&p, &g.constant(tokens.clone()), &g.constant(e2)).unwrap();
        prop_assert_eq!(a.shape(), tokens.shape());
        for t in 0..t_a {
            let rows = t * groups * 4..(t + 1) * groups * 4;
            let same = a.value().data()[rows.clone()] == b.value().data()[rows];
            prop_assert_eq!(same, t != changed);
        }
    }

    #[test]
    fn toy_embeddings_are_pure_and_unit(words in proptest::collection::vec("[a-z]{1,6}", 1..6), seed in 0u64..100) {
        let text = words.join(" ");
        let cfg = PromptConfig { seed, ..PromptConfig::default() };
        let a = TextEncoder::new(cfg.clone(), 32).encode(&text).unwrap();
        let b = TextEncoder::new(cfg, 32).encode(&text).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((norm(&a.values) - 1.0).abs() < 1e-6);
    }
}
