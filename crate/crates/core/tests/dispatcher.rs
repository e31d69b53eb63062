mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{spawn_workers, strip_wall, tiny_plan};
use nfcs::dispatcher::*;
use nfcs::orchestrator::search::Evaluator;
use nfcs::orchestrator::*;
use nfcs::search_space::{action_space, sample_tokens, Stage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn jobs(plan: &SearchPlan, n: u64) -> Vec<EvalJob> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    (0..n)
        .map(|id| EvalJob {
            id,
            stage: StageKind::Fpn,
            tokens: sample_tokens(&action_space(Stage::FpnOnly), &mut rng),
            seed: nfcs::orchestrator::search::job_seed(plan, id),
        })
        .collect()
}

fn fast_config() -> CoordinatorConfig {
    CoordinatorConfig {
        idle_abort: Duration::from_secs(60),
        ..Default::default()
    }
}

#[test]
fn one_worker_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(10);
    plan.proxy.iterations = 4;
    let (cache, _) = FeatureCache::prepare(&plan, dir.path()).unwrap();
    let js = jobs(&plan, 20);
    let local = LocalEvaluator::new(plan.clone(), Arc::new(cache), 1).evaluate(&js, None).unwrap();

    let mut coord = Coordinator::bind("127.0.0.1:0", &plan, fast_config()).unwrap();
    let handles = spawn_workers(coord.local_addr(), &plan, dir.path(), &[WorkerOptions::default()]);
    coord.wait_for_workers(1, Duration::from_secs(60)).unwrap();
    let remote = coord.evaluate(&js, None).unwrap();
    assert_eq!(strip_wall(remote), strip_wall(local));
    assert_eq!(coord.reassigned, 0);
    drop(coord);
    assert_eq!(handles.into_iter().map(|h| h.join().unwrap().unwrap()).sum::<usize>(), 20);
}

#[test]
fn vanished_worker_loses_no_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(11);
    plan.proxy.iterations = 4;
    let (cache, _) = FeatureCache::prepare(&plan, dir.path()).unwrap();
    let js = jobs(&plan, 12);
    let local = LocalEvaluator::new(plan.clone(), Arc::new(cache), 1).evaluate(&js, None).unwrap();

    let mut coord = Coordinator::bind("127.0.0.1:0", &plan, fast_config()).unwrap();
    let opts = [
        WorkerOptions::default(),
        WorkerOptions {
            vanish_after: Some(2),
            ..Default::default()
        },
    ];
    let handles = spawn_workers(coord.local_addr(), &plan, dir.path(), &opts);
    coord.wait_for_workers(2, Duration::from_secs(60)).unwrap();
    let remote = coord.evaluate(&js, None).unwrap();
    assert_eq!(strip_wall(remote), strip_wall(local));
    assert!(coord.reassigned >= 1);
    assert_eq!(coord.worker_count(), 1);
    drop(coord);
    let answered: Vec<usize> = handles.into_iter().map(|h| h.join().unwrap().unwrap()).collect();
    assert_eq!(answered[1], 1);
    assert_eq!(answered.iter().sum::<usize>(), 12);
}

#[test]
fn worker_of_another_plan_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(12);
    let other = tiny_plan(13);
    FeatureCache::prepare(&other, dir.path()).unwrap();
    let coord = Coordinator::bind("127.0.0.1:0", &plan, fast_config()).unwrap();
    let h = spawn_workers(coord.local_addr(), &other, dir.path(), &[WorkerOptions::default()]);
    let err = h.into_iter().next().unwrap().join().unwrap().unwrap_err();
    assert!(matches!(err, nfcs::Error::Protocol(m) if m.contains("plan hash")));
}

#[test]
fn worker_without_cache_reports_missing_cache() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(14);
    let err = run_worker("127.0.0.1:9", &plan, dir.path(), "w", &WorkerOptions::default()).unwrap_err();
    assert!(matches!(err, nfcs::Error::MissingCache(_)));
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn bad_hello_gets_a_reject() {
    let plan = tiny_plan(15);
    let coord = Coordinator::bind("127.0.0.1:0", &plan, fast_config()).unwrap();
    let mut s = std::net::TcpStream::connect(coord.local_addr()).unwrap();
    write_frame(
        &mut s,
        &Message::Hello {
            protocol: "NFCS-RPC/0".into(),
            plan_hash: plan.hash(),
            worker: "old".into(),
        },
    )
    .unwrap();
    assert!(matches!(read_frame(&mut s).unwrap(), Message::Reject { reason } if reason.contains("protocol")));
}

fn message() -> impl Strategy<Value = Message> {
    let request = (any::<u64>(), prop::collection::vec(0usize..9, 0..42), any::<u64>(), "[0-9a-f]{0,64}").prop_map(
        |(job_id, tokens, seed, hash)| EvalRequest {
            job_id,
            stage: StageKind::Head,
            tokens,
            seed,
            plan_hash: hash.clone(),
            cache_key: hash,
            pyramid: None,
        },
    );
    let result = (any::<u64>(), prop::option::of(-1e6f64..0.0), prop::option::of(0.0f64..1.0), "\\PC{0,20}").prop_map(
        |(job_id, reward, ap, worker)| EvalResult {
            job_id,
            reward,
            terms: None,
            ap,
            wall_ms: 1.5,
            worker,
            status: EvalStatus::Ok,
        },
    );
    prop_oneof![
        Just(Message::Welcome),
        Just(Message::Shutdown),
        "\\PC{0,40}".prop_map(|reason| Message::Reject { reason }),
        ("\\PC{0,12}", "[0-9a-f]{64}", "\\PC{0,12}").prop_map(|(protocol, plan_hash, worker)| Message::Hello {
            protocol,
            plan_hash,
            worker
        }),
        request.prop_map(Message::Job),
        result.prop_map(Message::Result),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn frames_round_trip(msgs in prop::collection::vec(message(), 1..6)) {
        let mut wire = Vec::new();
        for m in &msgs {
            wire.extend(encode_frame(m).unwrap());
        }
        let mut at = 0;
        for m in &msgs {
            let (got, used) = decode_frame(&wire[at..]).unwrap();
            prop_assert_eq!(&got, m);
            at += used;
        }
        prop_assert_eq!(at, wire.len());
        let mut r = std::io::Cursor::new(&wire);
        for m in &msgs {
            prop_assert_eq!(&read_frame(&mut r).unwrap(), m);
        }
    }

    /// Arbitrary or truncated bytes never panic and never decode past the
    /// end of the buffer.
    #[test]
    fn garbage_is_a_protocol_error(bytes in prop::collection::vec(any::<u8>(), 0..64), msg in message(), cut in 0usize..1000) {
        if let Ok((_, used)) = decode_frame(&bytes) {
            prop_assert!(used <= bytes.len());
        }
        let wire = encode_frame(&msg).unwrap();
        let cut = cut % wire.len();
        prop_assert!(matches!(decode_frame(&wire[..cut]), Err(nfcs::Error::Protocol(_))));
    }
}
