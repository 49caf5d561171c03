use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use tinyreptile::meta::{
    evaluate_client, reptile_serial_round, tinyreptile_round, AlgoConfig, ClientHandle, FinetuneMode, Role,
};
use tinyreptile::nn::{init_weights, ModelConfig};
use tinyreptile::protocol::*;
use tinyreptile::tasks::{TaskFamily, SineRanges};

fn model() -> Arc<ModelConfig> {
    Arc::new(ModelConfig::sine())
}

fn family() -> Arc<TaskFamily> {
    Arc::new(TaskFamily::Sine(SineRanges::default()))
}

fn trainer(id: u64) -> ClientHandle {
    let f = family();
    let task = f.sample_task(id).unwrap();
    ClientHandle::sensor(id, Role::Training, f, task, 32, 1000 + id)
}

fn tester(id: u64) -> ClientHandle {
    let f = family();
    let task = f.sample_task(id).unwrap();
    let split = f.realize(&task, 8, 32, 77 + id).unwrap();
    ClientHandle::fixed(id, Role::Testing, split, 5000 + id)
}

/// Runs `client` on a thread against an in-process session.
fn connect(
    client: ClientHandle,
    cfg: ClientConfig,
    timeout: Duration,
) -> (
    Result<ServerSession<ChannelStream>, SessionError>,
    thread::JoinHandle<Result<ClientStats, ClientError>>,
) {
    let (server_end, client_end) = channel_pair();
    let m = model();
    let h = thread::spawn(move || client_loop(client_end, &client, &m, &cfg));
    (ServerSession::accept(server_end, timeout), h)
}

#[test]
fn wire_round_matches_direct_tinyreptile() {
    let phi = init_weights(&model(), 3);
    let cfg = AlgoConfig::default().with_alpha(0.7);
    let client = trainer(4);
    let direct = tinyreptile_round(&phi, &client, 12, &cfg).unwrap();

    let (session, h) = connect(client, ClientConfig::streaming(cfg.beta as f32), DEFAULT_TIMEOUT);
    let mut session = session.unwrap();
    assert_eq!(session.phase(), Phase::Idle);
    assert_eq!(session.client_id(), 4);
    let RoundOutcome::Completed { weights, local_loss } = session.serve_round(&phi, 12, cfg.alpha).unwrap() else {
        panic!("round aborted")
    };
    assert_eq!(weights, direct);
    assert!(local_loss.is_finite());
    let (sent, received) = session.close();
    let stats = h.join().unwrap().unwrap();
    assert_eq!(stats.end, ClientEnd::Bye);
    assert_eq!(stats.rounds_trained, 1);
    assert_eq!(stats.resident_high_water, 1);

    let expected = training_session_bytes(1153);
    assert_eq!((sent, received), (expected.down, expected.up));
    assert_eq!((stats.bytes_received, stats.bytes_sent), (expected.down, expected.up));
    assert_eq!(weights_down_len(1153), 12 + 8 + 4 + 1153 * 4);
}

#[test]
fn wire_round_matches_direct_serial_reptile() {
    let phi = init_weights(&model(), 8);
    let cfg = AlgoConfig::default().with_alpha(0.5);
    let client = trainer(9);
    let direct = reptile_serial_round(&phi, &client, 3, &cfg).unwrap();
    let (session, h) = connect(client, ClientConfig::batched(cfg.beta as f32, cfg.epochs), DEFAULT_TIMEOUT);
    let mut session = session.unwrap();
    let outcome = session.serve_round(&phi, 3, cfg.alpha).unwrap();
    session.close();
    let stats = h.join().unwrap().unwrap();
    assert!(matches!(outcome, RoundOutcome::Completed { ref weights, .. } if *weights == direct));
    assert_eq!(stats.resident_high_water, 32);
}

#[test]
fn several_rounds_in_one_session() {
    let mut phi = init_weights(&model(), 1);
    let (session, h) = connect(trainer(2), ClientConfig::streaming(0.01), DEFAULT_TIMEOUT);
    let mut session = session.unwrap();
    for r in 0..3 {
        match session.serve_round(&phi, r, 1.0).unwrap() {
            RoundOutcome::Completed { weights, .. } => phi = weights,
            RoundOutcome::Aborted(reason) => panic!("aborted: {reason:?}"),
        }
    }
    // Round ids must increase.
    assert!(matches!(session.serve_round(&phi, 1, 1.0), Err(SessionError::WrongPhase(_))));
    session.close();
    assert_eq!(h.join().unwrap().unwrap().rounds_trained, 3);
}

fn aborted_with(fault: Fault, timeout: Duration) -> (AbortReason, Phase) {
    let phi = init_weights(&model(), 5);
    let cfg = ClientConfig {
        fault: Some(fault),
        ..ClientConfig::streaming(0.01)
    };
    let (session, h) = connect(trainer(1), cfg, timeout);
    let mut session = session.unwrap();
    let outcome = session.serve_round(&phi, 7, 1.0).unwrap();
    let phase = session.phase();
    drop(session);
    let _ = h.join().unwrap();
    match outcome {
        RoundOutcome::Aborted(r) => (r, phase),
        RoundOutcome::Completed { .. } => panic!("round completed despite {fault:?}"),
    }
}

#[test]
fn stale_round_id_is_a_protocol_violation() {
    let (reason, phase) = aborted_with(Fault::StaleRoundId, DEFAULT_TIMEOUT);
    assert_eq!(reason, AbortReason::ProtocolViolation);
    assert_eq!(phase, Phase::Closed);
}

#[test]
fn disconnect_mid_round_aborts() {
    let (reason, _) = aborted_with(Fault::DisconnectAfterWeights, DEFAULT_TIMEOUT);
    assert_eq!(reason, AbortReason::Disconnect);
}

#[test]
fn silent_client_times_out() {
    let (reason, _) = aborted_with(Fault::Stall(Duration::from_millis(400)), Duration::from_millis(50));
    assert_eq!(reason, AbortReason::Timeout);
}

#[test]
fn corrupted_reply_is_malformed() {
    let (reason, _) = aborted_with(Fault::CorruptReply, DEFAULT_TIMEOUT);
    assert_eq!(reason, AbortReason::Malformed);
}

#[test]
fn version_mismatch_rejected_at_handshake() {
    let cfg = ClientConfig {
        fault: Some(Fault::Version(2)),
        ..ClientConfig::streaming(0.01)
    };
    let (session, h) = connect(trainer(1), cfg, DEFAULT_TIMEOUT);
    assert!(matches!(session, Err(SessionError::Handshake(AbortReason::VersionMismatch))));
    let stats = h.join().unwrap().unwrap();
    assert_eq!(stats.end, ClientEnd::Aborted(AbortReason::VersionMismatch));
}

#[test]
fn dropout_draw_closes_the_connection() {
    let client = trainer(3).with_dropout(1.0);
    let phi = init_weights(&model(), 1);
    let (session, h) = connect(client, ClientConfig::streaming(0.01), DEFAULT_TIMEOUT);
    let mut session = session.unwrap();
    assert_eq!(
        session.serve_round(&phi, 0, 1.0).unwrap(),
        RoundOutcome::Aborted(AbortReason::Disconnect)
    );
    let (sent, received) = session.close();
    assert_eq!(h.join().unwrap().unwrap().end, ClientEnd::DroppedOut);
    let expected = dropped_session_bytes(1153);
    assert_eq!((sent, received), (expected.down, expected.up));
}

#[test]
fn role_is_enforced() {
    let phi = init_weights(&model(), 1);
    let (session, h) = connect(tester(1), ClientConfig::streaming(0.01), DEFAULT_TIMEOUT);
    let mut session = session.unwrap();
    assert!(matches!(
        session.serve_round(&phi, 0, 1.0),
        Err(SessionError::WrongRole { .. })
    ));
    session.close();
    h.join().unwrap().unwrap();
}

#[test]
fn wire_evaluation_matches_direct() {
    let phi = init_weights(&model(), 2);
    let client = tester(6);
    for mode in [FinetuneMode::Streaming, FinetuneMode::Batched] {
        let direct = evaluate_client(&phi, &client, 8, 0.01, mode).unwrap();
        let cfg = ClientConfig {
            eval_mode: mode,
            ..ClientConfig::streaming(0.01)
        };
        let (session, h) = connect(client.clone(), cfg, DEFAULT_TIMEOUT);
        let mut session = session.unwrap();
        let outcome = session.serve_eval(&phi, 0, 8).unwrap();
        let (sent, received) = session.close();
        assert_eq!(
            outcome,
            EvalOutcome::Completed {
                query_loss: direct.loss,
                query_accuracy: None
            }
        );
        assert_eq!(h.join().unwrap().unwrap().evaluations, 1);
        let expected = eval_session_bytes(1153, false);
        assert_eq!((sent, received), (expected.down, expected.up));
    }
}

#[test]
fn tcp_round_matches_in_process_and_rejects_second_client() {
    let server = TcpServer::bind("127.0.0.1:0", Duration::from_secs(5)).unwrap();
    let addr = server.local_addr();
    let phi = init_weights(&model(), 11);
    let cfg = AlgoConfig::default();
    let client = trainer(21);
    let direct = tinyreptile_round(&phi, &client, 0, &cfg).unwrap();

    let first = {
        let client = client.clone();
        thread::spawn(move || {
            let stream = TcpStream::connect(addr).unwrap();
            client_loop(stream, &client, &model(), &ClientConfig::streaming(0.01))
        })
    };
    let mut session = server.accept().unwrap();

    // The slot is taken: a second client is turned away.
    let second = TcpStream::connect(addr).unwrap();
    let busy = client_loop(second, &trainer(22), &model(), &ClientConfig::streaming(0.01)).unwrap();
    assert_eq!(busy.end, ClientEnd::Aborted(AbortReason::Busy));

    let outcome = session.serve_round(&phi, 0, cfg.alpha).unwrap();
    session.close();
    assert_eq!(first.join().unwrap().unwrap().end, ClientEnd::Bye);
    assert!(matches!(outcome, RoundOutcome::Completed { ref weights, .. } if *weights == direct));

    // Once the session is gone the next client is served.
    let third = thread::spawn(move || {
        let stream = TcpStream::connect(addr).unwrap();
        client_loop(stream, &trainer(23), &model(), &ClientConfig::streaming(0.01))
    });
    let session = server.accept().unwrap();
    assert_eq!(session.client_id(), 23);
    session.close();
    assert_eq!(third.join().unwrap().unwrap().end, ClientEnd::Bye);
}

fn arb_reason() -> impl Strategy<Value = AbortReason> {
    any::<u8>().prop_map(AbortReason::from_code)
}

fn arb_weights() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e6f32..1e6, 0..64)
}

prop_compose! {
    fn arb_message()(
        kind in 0u8..7,
        id in any::<u64>(),
        k in any::<u32>(),
        weights in arb_weights(),
        x in -1e9f64..1e9,
        acc in prop::option::of(0.0f64..=1.0),
        reason in arb_reason(),
        training in any::<bool>(),
        version in any::<u8>(),
    ) -> Message {
        match kind {
            0 => Message::Hello {
                client_id: id,
                role: if training { Role::Training } else { Role::Testing },
                protocol_version: version,
            },
            1 => Message::WeightsDown { round_id: id, weights },
            2 => Message::WeightsUp { round_id: id, weights, local_loss: x },
            3 => Message::EvalRequest { round_id: id, k, weights },
            4 => Message::EvalReport { round_id: id, query_loss: x, query_accuracy: acc },
            5 => Message::Abort { round_id: id, reason },
            _ => Message::Bye,
        }
    }
}

proptest! {
    #[test]
    fn codec_round_trip(m in arb_message()) {
        prop_assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn single_bit_flip_is_detected(m in arb_message(), bit in any::<prop::sample::Index>()) {
        let mut frame = encode(&m);
        let i = bit.index(frame.len() * 8);
        frame[i / 8] ^= 1 << (i % 8);
        prop_assert!(decode(&frame).is_err());
    }

    #[test]
    fn truncation_is_rejected(m in arb_message(), cut in any::<prop::sample::Index>()) {
        let frame = encode(&m);
        let n = cut.index(frame.len());
        prop_assert!(decode(&frame[..n]).is_err());
    }
}
