mod common;

use std::io::{Read, Write};
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use deltakd::error::Error;
use deltakd::lm::{LanguageModel, LogitSource};
use deltakd::numerics::{log_softmax_into, total_variation};
use deltakd::wire::fp16::{f16_bits_to_f64, fp16_decode, fp16_encode};
use deltakd::wire::frame::{
    decode_frame, encode_frame, read_frame, try_decode, write_frame, Frame, LogitRequest,
    Message, ModelInfo, ProtocolError, HEADER_LEN, ROLE_TEACHER_FT, ROLE_TEACHER_RAW,
};
use deltakd::wire::{spawn_server, Endpoint, LogitClient, RemoteTeacher, ServedModels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn golden_frames_are_byte_exact() {
    for (name, frame) in common::golden() {
        let bytes = common::fixture(name);
        assert_eq!(encode_frame(&frame).unwrap(), bytes, "{name}");
        assert_eq!(decode_frame(&bytes).unwrap(), frame, "{name}");
    }
}

#[test]
fn malformed_frames() {
    let good = common::fixture("logit_request.bin");
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_frame(&bad), Err(ProtocolError::BadMagic(_))));
    let mut bad = good.clone();
    bad[4] = 99;
    assert!(matches!(decode_frame(&bad), Err(ProtocolError::UnknownMsgType(99))));
    // truncated: nothing consumed, the full frame decodes once it arrives
    let short = &good[..good.len() - 3];
    assert!(matches!(try_decode(short), Err(ProtocolError::Truncated { .. })));
    let mut stream = good.clone();
    stream.extend_from_slice(&good);
    let (f1, used) = try_decode(&stream).unwrap();
    let (f2, _) = try_decode(&stream[used..]).unwrap();
    assert_eq!(f1, f2);
    // payload length disagreeing with the declared shape
    let mut bad = good.clone();
    bad.truncate(bad.len() - 4);
    let len = (bad.len() - HEADER_LEN) as u32;
    bad[13..17].copy_from_slice(&len.to_le_bytes());
    assert!(decode_frame(&bad).is_err());
}

#[test]
fn codec_fuzz_never_panics() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let seeds: Vec<Vec<u8>> = common::golden().iter().map(|(n, _)| common::fixture(n)).collect();
    for i in 0..20_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let len = rng.random_range(0..64);
            (0..len).map(|_| rng.random()).collect()
        } else {
            // mutate a valid frame so the header often parses
            let mut b = seeds[i % seeds.len()].clone();
            for _ in 0..rng.random_range(1..4) {
                let k = rng.random_range(0..b.len());
                b[k] = rng.random();
            }
            b
        };
        if let Ok((frame, used)) = try_decode(&bytes) {
            assert!(used <= bytes.len());
            let _ = encode_frame(&frame);
        }
        let _ = decode_frame(&bytes);
    }
}

#[test]
fn fp16_matches_soft_float_oracle() {
    let oracle = common::HalfOracle::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20_000 {
        let x: f64 = rng.random_range(-100.0..100.0);
        let y = fp16_decode(fp16_encode(x));
        assert_eq!(y, oracle.round(x), "x = {x}");
        assert!((y - x).abs() <= 2f64.powi(-11) * x.abs().max(2f64.powi(-14)));
    }
    // exhaustive halfway points between neighbouring normal halves
    for bits in 0x0400u16..0x7BFF {
        let mid = (f16_bits_to_f64(bits) + f16_bits_to_f64(bits + 1)) / 2.0;
        assert_eq!(fp16_decode(fp16_encode(mid)), oracle.round(mid));
    }
}

#[test]
fn fp16_softmax_error_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = 64;
    let (mut a, mut b) = (vec![0.0; v], vec![0.0; v]);
    for _ in 0..1000 {
        let z: Vec<f64> = (0..v).map(|_| rng.random_range(-30.0..30.0)).collect();
        let zr: Vec<f64> = z.iter().map(|&x| fp16_decode(fp16_encode(x))).collect();
        log_softmax_into(&z, 1.0, &mut a);
        log_softmax_into(&zr, 1.0, &mut b);
        let pa: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        let pb: Vec<f64> = b.iter().map(|x| x.exp()).collect();
        assert!(total_variation(&pa, &pb) <= 1e-2);
    }
}

fn models() -> (LanguageModel, LanguageModel) {
    (common::small_transformer(12, 1), common::small_transformer(12, 2))
}

fn served(max_batch: u16) -> ServedModels {
    let (raw, ft) = models();
    ServedModels::new(Some(raw), Some(ft), max_batch).unwrap()
}

fn sock_path(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("dkd-test-{}-{name}.sock", std::process::id()))
}

fn assert_close(remote: &[f64], local: &[f64]) {
    for (r, l) in remote.iter().zip(local) {
        assert!((r - l).abs() <= 2f64.powi(-11) * l.abs().max(2f64.powi(-14)), "{r} vs {l}");
    }
}

#[test]
fn pipelined_requests_are_not_cross_wired() {
    let server = spawn_server(served(8), &"127.0.0.1:0".parse().unwrap(), None).unwrap();
    let client = Arc::new(LogitClient::new(server.endpoint().clone()));
    let (raw, ft) = models();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pending = Vec::new();
    for i in 0..16 {
        let role = if i % 2 == 0 { ROLE_TEACHER_RAW } else { ROLE_TEACHER_FT };
        let len = rng.random_range(1..=16);
        let batch = rng.random_range(1..=4);
        let tokens: Vec<u32> = (0..len * batch).map(|_| rng.random_range(0..12)).collect();
        let req = LogitRequest { role, batch: batch as u16, seq_len: len as u16, tokens: tokens.clone() };
        pending.push((role, len, tokens, client.submit(Message::LogitRequest(req)).unwrap()));
    }
    let ids: std::collections::HashSet<u64> = pending.iter().map(|p| p.3.request_id()).collect();
    assert_eq!(ids.len(), 16);
    for (role, len, tokens, p) in pending.into_iter().rev() {
        let Message::LogitResponse(resp) = p.wait().unwrap() else { panic!("wrong reply") };
        let model = if role == ROLE_TEACHER_RAW { &raw } else { &ft };
        for (b, seq) in tokens.chunks(len).enumerate() {
            let local = model.forward(seq).unwrap();
            for t in 0..len {
                assert_close(&resp.row(b, t), local.row(0, t));
            }
        }
    }
    assert_eq!(server.stats().requests.load(std::sync::atomic::Ordering::Relaxed), 16);
    server.shutdown();
}

#[test]
fn raw_stream_ids_errors_and_recovery() {
    let path = sock_path("raw");
    let server = spawn_server(served(2), &Endpoint::Unix(path.clone()), None).unwrap();
    let mut s = UnixStream::connect(&path).unwrap();
    let req = |role: u8, batch: u16| {
        Message::LogitRequest(LogitRequest { role, batch, seq_len: 1, tokens: vec![3; batch as usize] })
    };
    write_frame(&mut s, &Frame::new(7, req(ROLE_TEACHER_FT, 1))).unwrap();
    write_frame(&mut s, &Frame::new(8, req(ROLE_TEACHER_RAW, 1))).unwrap();
    write_frame(&mut s, &Frame::new(9, req(5, 1))).unwrap();
    write_frame(&mut s, &Frame::new(10, req(ROLE_TEACHER_FT, 3))).unwrap();
    // valid header, payload too short for its declared shape
    let mut broken = encode_frame(&Frame::new(11, req(ROLE_TEACHER_FT, 1))).unwrap();
    broken.truncate(broken.len() - 2);
    let len = (broken.len() - HEADER_LEN) as u32;
    broken[13..17].copy_from_slice(&len.to_le_bytes());
    s.write_all(&broken).unwrap();
    write_frame(&mut s, &Frame::new(12, Message::ModelInfoRequest)).unwrap();

    let mut got = std::collections::HashMap::new();
    for _ in 0..6 {
        let f = read_frame(&mut s).unwrap();
        got.insert(f.request_id, f.message);
    }
    assert!(matches!(got[&7], Message::LogitResponse(_)));
    assert!(matches!(got[&8], Message::LogitResponse(_)));
    assert!(matches!(&got[&9], Message::Error(m) if m.contains("unknown role")));
    assert!(matches!(&got[&10], Message::Error(m) if m.contains("max_batch")));
    assert!(matches!(&got[&11], Message::Error(_)));
    assert_eq!(got[&12], Message::ModelInfoResponse(ModelInfo { vocab: 12, context_limit: 16, max_batch: 2, role_mask: 3 }));

    // a broken header ends the connection after an error frame
    s.write_all(b"XXXX-garbage-garbage").unwrap();
    let f = read_frame(&mut s).unwrap();
    assert!(matches!(f.message, Message::Error(_)));
    let mut rest = Vec::new();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    assert_eq!(s.read_to_end(&mut rest).unwrap(), 0);
    server.shutdown();
    assert!(!path.exists());
}

#[test]
fn remote_teacher_matches_local_forward_in_batches() {
    let server = spawn_server(served(3), &"127.0.0.1:0".parse().unwrap(), None).unwrap();
    let client = Arc::new(LogitClient::new(server.endpoint().clone()));
    let remote = RemoteTeacher::connect(client.clone(), ROLE_TEACHER_FT).unwrap();
    let (_, ft) = models();
    let seqs: Vec<Vec<u32>> = (0..7).map(|i| (0..(i % 5 + 1)).map(|t| ((i + t) % 12) as u32).collect()).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let got = remote.batch_logits(&refs).unwrap();
    let want = ft.forward_batch(&refs).unwrap();
    assert_eq!(got.offsets, want.offsets);
    assert_close(&got.data, &want.data);
    assert!(remote.batch_logits(&[&[1; 17]]).is_err());
    server.shutdown();
}

#[test]
fn role_availability() {
    let (raw, _) = models();
    let server = spawn_server(
        ServedModels::new(Some(raw), None, 4).unwrap(),
        &"127.0.0.1:0".parse().unwrap(),
        None,
    )
    .unwrap();
    let client = Arc::new(LogitClient::new(server.endpoint().clone()));
    assert_eq!(client.model_info().unwrap().role_mask, 1);
    assert!(RemoteTeacher::connect(client.clone(), ROLE_TEACHER_FT).is_err());
    let err = client
        .logits(LogitRequest { role: ROLE_TEACHER_FT, batch: 1, seq_len: 1, tokens: vec![0] })
        .unwrap_err();
    assert!(matches!(err, Error::Remote { .. }), "{err}");
}

#[test]
fn server_down_is_a_transport_error_without_hanging() {
    let ep: Endpoint = "127.0.0.1:1".parse().unwrap();
    let client = LogitClient::with_options(ep, Duration::from_millis(500), 1);
    let t = Instant::now();
    let err = client.model_info().unwrap_err();
    assert!(err.is_retryable(), "{err}");
    assert!(t.elapsed() < Duration::from_secs(10));
}

#[test]
fn silent_server_times_out() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let ep: Endpoint = listener.local_addr().unwrap().to_string().parse().unwrap();
    let hold = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_millis(800));
        drop(s);
    });
    let client = LogitClient::with_options(ep, Duration::from_millis(200), 0);
    let err = client.model_info().unwrap_err();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
    assert_eq!(err.class(), "transport");
    hold.join().unwrap();
}

#[test]
fn client_reconnects_after_server_restart() {
    let path = sock_path("restart");
    let ep = Endpoint::Unix(path.clone());
    let server = spawn_server(served(4), &ep, None).unwrap();
    let client = LogitClient::with_options(ep.clone(), Duration::from_secs(5), 5);
    client.model_info().unwrap();
    server.shutdown();
    let server = spawn_server(served(4), &ep, None).unwrap();
    assert_eq!(client.model_info().unwrap().vocab, 12);
    server.shutdown();
}
