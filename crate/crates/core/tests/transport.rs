//! Split inference over loopback TCP.

use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use isplit::bottleneck::{assemble, Bottleneck};
use isplit::data::{synth_dataset, Profile};
use isplit::model::{build_model, Architecture, Model};
use isplit::runtime::{serve_tail, ClientError, ErrorCode, MsgType, ServerConfig, TailClient, WireFrame};
use isplit::tensor::Tensor;

mod common;
use common::wire::*;

fn micro() -> Model<f32> {
    build_model(&Architecture::preset("vgg-micro").unwrap(), &[1, 16, 16], 8, 11).unwrap()
}

fn images(n: usize) -> Vec<Tensor<f32>> {
    synth_dataset(4, n.div_ceil(4), 16, Profile::Mixed, 2).unwrap().images.into_iter().take(n).collect()
}

#[test]
fn identity_split_over_loopback_is_bitwise_local() {
    let model = micro();
    for target in [2, 5, 12] {
        let plan = assemble(&model, &Bottleneck::Identity { target_layer: target }).unwrap();
        let server = serve_tail("127.0.0.1:0", plan.tail.clone(), ServerConfig::default()).unwrap();
        let mut client = TailClient::connect(server.local_addr(), TIMEOUT).unwrap();
        for x in images(100) {
            let remote = client.infer(&plan.head, &x).unwrap();
            assert_eq!(remote.logits.to_bits(), model.forward(&x).unwrap().to_bits(), "target {target}");
            assert!(remote.timing.total_ms >= remote.timing.head_ms + remote.timing.transfer_ms);
        }
        server.shutdown();
    }
}

#[test]
fn thousand_ping_round_trips_are_byte_exact() {
    let server = serve_tail("127.0.0.1:0", micro().slice(5..16).unwrap(), ServerConfig::default()).unwrap();
    let mut stream = connect(server.local_addr());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in 0..1000 {
        let bytes = random_frame(&mut rng, id).encode();
        assert_eq!(exchange(&mut stream, &bytes), bytes, "frame {id}");
    }
    assert_eq!(server.served(), 1000);
    server.shutdown();
}

#[test]
fn corrupted_frames_get_error_frames_and_the_server_survives() {
    let model = micro();
    let plan = assemble(&model, &Bottleneck::Identity { target_layer: 5 }).unwrap();
    let server = serve_tail("127.0.0.1:0", plan.tail.clone(), ServerConfig::default()).unwrap();
    let mut stream = connect(server.local_addr());
    let x = &images(1)[0];
    let split = plan.head.forward(x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in 0..100u64 {
        let good = WireFrame::with_tensor(MsgType::InferRequest, id, &split).encode();
        let bad = corrupt(&mut rng, good);
        let reply = WireFrame::decode(&exchange(&mut stream, &bad)).unwrap();
        assert_eq!(reply.msg_type, MsgType::Error, "corruption {id}");
        assert!(reply.error_code().is_some());
    }
    // same connection still answers a well-formed request
    let good = WireFrame::with_tensor(MsgType::InferRequest, 500, &split).encode();
    let reply = WireFrame::decode(&exchange(&mut stream, &good)).unwrap();
    assert_eq!(reply.msg_type, MsgType::InferResponse);
    assert_eq!(reply.request_id, 500);
    assert_eq!(reply.tensor::<f32>().unwrap().to_bits(), model.forward(x).unwrap().to_bits());
    server.shutdown();
}

#[test]
fn hundred_sequential_requests_keep_their_ids() {
    let model = micro();
    let plan = assemble(&model, &Bottleneck::Identity { target_layer: 8 }).unwrap();
    let server = serve_tail("127.0.0.1:0", plan.tail.clone(), ServerConfig::default()).unwrap();
    let mut stream = connect(server.local_addr());
    for (i, x) in images(100).iter().enumerate() {
        let id = 1000 + i as u64;
        let req = WireFrame::with_tensor(MsgType::InferRequest, id, &plan.head.forward(x).unwrap());
        let reply = WireFrame::decode(&exchange(&mut stream, &req.encode())).unwrap();
        assert_eq!((reply.msg_type, reply.request_id), (MsgType::InferResponse, id));
    }
    server.shutdown();
}

#[test]
fn wrong_shape_is_an_error_and_the_connection_stays_open() {
    let model = micro();
    let plan = assemble(&model, &Bottleneck::Identity { target_layer: 5 }).unwrap();
    let server = serve_tail("127.0.0.1:0", plan.tail.clone(), ServerConfig::default()).unwrap();
    let mut client = TailClient::connect(server.local_addr(), TIMEOUT).unwrap();
    let err = client.request(&Tensor::zeros(&[3, 3])).unwrap_err();
    assert!(matches!(err, ClientError::Server { code: Some(ErrorCode::ShapeMismatch) }), "{err}");
    let err = client.request(&Tensor::zeros(&[1])).unwrap_err();
    assert!(matches!(err, ClientError::Server { code: Some(ErrorCode::ShapeMismatch) }), "{err}");
    let x = &images(1)[0];
    let out = client.infer(&plan.head, x).unwrap();
    assert_eq!(out.logits.to_bits(), model.forward(x).unwrap().to_bits());
    server.shutdown();
}

#[test]
fn interleaved_clients_get_their_own_answers() {
    let model = micro();
    let plan = assemble(&model, &Bottleneck::Identity { target_layer: 3 }).unwrap();
    let server = serve_tail("127.0.0.1:0", plan.tail.clone(), ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let all = images(40);
    thread::scope(|s| {
        for chunk in all.chunks(10) {
            let (head, model) = (&plan.head, &model);
            s.spawn(move || {
                let mut client = TailClient::connect(addr, TIMEOUT).unwrap();
                for x in chunk {
                    let out = client.infer(head, x).unwrap();
                    assert_eq!(out.logits.to_bits(), model.forward(x).unwrap().to_bits());
                }
            });
        }
    });
    assert_eq!(server.served(), 80);
    server.shutdown();
}

#[test]
fn unreachable_server_fails_within_the_timeout() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let timeout = Duration::from_millis(500);
    let start = Instant::now();
    let err = TailClient::connect(addr, timeout).err().expect("nothing listens there");
    assert!(start.elapsed() <= timeout + Duration::from_millis(250));
    assert!(matches!(err, ClientError::Refused { .. } | ClientError::Timeout(_)), "{err}");
}

#[test]
fn silent_server_times_out() {
    // accepts but never answers
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hold = thread::spawn(move || listener.accept().map(|(s, _)| s));
    let timeout = Duration::from_millis(300);
    let mut client = TailClient::connect(addr, timeout).unwrap();
    let start = Instant::now();
    let err = client.ping(&Tensor::zeros(&[2])).unwrap_err();
    assert!(matches!(err, ClientError::Timeout(_)), "{err}");
    assert!(start.elapsed() < timeout * 4);
    drop(hold.join());
}

#[test]
fn connections_over_the_limit_are_told_busy() {
    let config = ServerConfig {
        max_connections: 1,
        ..ServerConfig::default()
    };
    let server = serve_tail("127.0.0.1:0", micro().slice(5..16).unwrap(), config).unwrap();
    let mut first = TailClient::connect(server.local_addr(), TIMEOUT).unwrap();
    first.ping(&Tensor::zeros(&[1])).unwrap();
    let mut second = TailClient::connect(server.local_addr(), TIMEOUT).unwrap();
    let err = second.ping(&Tensor::zeros(&[1])).unwrap_err();
    assert!(matches!(err, ClientError::Server { code: Some(ErrorCode::Busy) }), "{err}");
    // the admitted connection is unaffected
    first.ping(&Tensor::zeros(&[1])).unwrap();
    drop(first);
    // its slot frees once the server notices the close
    let deadline = Instant::now() + TIMEOUT;
    loop {
        let mut again = TailClient::connect(server.local_addr(), TIMEOUT).unwrap();
        match again.ping(&Tensor::zeros(&[1])) {
            Ok(_) => break,
            Err(ClientError::Server { code: Some(ErrorCode::Busy) }) if Instant::now() < deadline => {
                thread::sleep(Duration::from_millis(20))
            }
            Err(e) => panic!("{e}"),
        }
    }
    server.shutdown();
}
