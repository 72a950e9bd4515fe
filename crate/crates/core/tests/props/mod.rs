//! Randomised invariants shared by the `properties` and `acceptance` targets.
//! Each property runs 1000 cases.

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use proptest::sample::Index;
use ssiot_core::bench::{AppSpec, World};
use ssiot_core::clock::{Millis, VirtualClock};
use ssiot_core::envelope::{
    generate_app_keypair, generate_data_key, kms_unwrap, open_data, open_result, seal_data, seal_result,
    wrap_data_key, AppId, AppKeyPair, EnvelopeError, KmsKeyPair,
};
use ssiot_core::faas_sim::{PlatformConfig, TraceChannel};
use ssiot_core::hub::{
    DeviceClass, DeviceSpec, HubConfig, HubLogEvent, OffloadPolicy, PolicyKind, ResourceMonitor, TargetKind,
    TerminalState,
};
use ssiot_core::kms::{Decision, Kms, KmsConfig, KmsError};
use ssiot_core::rules::{parse_rules, Atom, CmpOp, Condition, Rule, RuleSet, Statement, Trigger};

fn config() -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(1000)
    }
}

fn app(name: &str) -> AppKeyPair {
    generate_app_keypair(&AppId::new(name).unwrap()).unwrap()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, Copy)]
enum SealedField {
    Ciphertext,
    Nonce,
    Tag,
}

#[derive(Debug, Clone, Copy)]
enum WrappedField {
    Ciphertext,
    Signature,
}

proptest! {
    #![proptest_config(config())]

    fn envelope_roundtrip(payload in proptest::collection::vec(any::<u8>(), 0..2048)) {
        let a = app("rt");
        let kms = KmsKeyPair::generate().unwrap();
        let key = generate_data_key().unwrap();
        let sealed = seal_data(&payload, &a.public, &key).unwrap();
        let wrapped = wrap_data_key(&key, &a, kms.public()).unwrap();
        let released = kms_unwrap(&wrapped, &kms, &a.material()).unwrap();
        prop_assert_eq!(&released, &key);
        prop_assert_eq!(open_data(&sealed, &released, &a.private).unwrap(), payload);
    }

    fn both_keys_are_required(payload in proptest::collection::vec(any::<u8>(), 1..512)) {
        let a = app("gate");
        let other = app("other");
        let kms = KmsKeyPair::generate().unwrap();
        let other_kms = KmsKeyPair::generate().unwrap();
        let key = generate_data_key().unwrap();
        let sealed = seal_data(&payload, &a.public, &key).unwrap();

        let wrong_key = generate_data_key().unwrap();
        prop_assert_eq!(open_data(&sealed, &wrong_key, &a.private), Err(EnvelopeError::Authentication));
        prop_assert_eq!(open_data(&sealed, &key, &other.private), Err(EnvelopeError::InnerDecryptFailed));

        let wrapped = wrap_data_key(&key, &a, kms.public()).unwrap();
        prop_assert_eq!(kms_unwrap(&wrapped, &other_kms, &a.material()), Err(EnvelopeError::OuterDecryptFailed));
        prop_assert_eq!(kms_unwrap(&wrapped, &kms, &other.material()), Err(EnvelopeError::SignatureInvalid));
    }

    fn sealed_data_is_tamper_evident(
        payload in proptest::collection::vec(any::<u8>(), 1..512),
        field in prop_oneof![Just(SealedField::Ciphertext), Just(SealedField::Nonce), Just(SealedField::Tag)],
        at in any::<Index>(),
        bit in 0u8..8,
    ) {
        let a = app("tamper");
        let key = generate_data_key().unwrap();
        let mut sealed = seal_data(&payload, &a.public, &key).unwrap();
        let bytes = match field {
            SealedField::Ciphertext => &mut sealed.ciphertext,
            SealedField::Nonce => &mut sealed.nonce,
            SealedField::Tag => &mut sealed.auth_tag,
        };
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert_eq!(open_data(&sealed, &key, &a.private), Err(EnvelopeError::Authentication));
    }

    fn wrapped_key_is_tamper_evident(
        field in prop_oneof![Just(WrappedField::Ciphertext), Just(WrappedField::Signature)],
        at in any::<Index>(),
        bit in 0u8..8,
    ) {
        let a = app("tamper");
        let kms = KmsKeyPair::generate().unwrap();
        let key = generate_data_key().unwrap();
        let mut wrapped = wrap_data_key(&key, &a, kms.public()).unwrap();
        let bytes = match field {
            WrappedField::Ciphertext => &mut wrapped.ciphertext,
            WrappedField::Signature => &mut wrapped.signature,
        };
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let expected = match field {
            WrappedField::Ciphertext => EnvelopeError::OuterDecryptFailed,
            WrappedField::Signature => EnvelopeError::SignatureInvalid,
        };
        prop_assert_eq!(kms_unwrap(&wrapped, &kms, &a.material()), Err(expected));
    }

    fn results_open_only_under_their_own_key(result in proptest::collection::vec(any::<u8>(), 0..1024)) {
        let a = app("confine");
        let key = generate_data_key().unwrap();
        let other = generate_data_key().unwrap();
        let sealed = seal_result(&result, &key).unwrap();
        prop_assert_eq!(open_result(&sealed, &key).unwrap(), result);
        prop_assert!(open_result(&sealed, &other).is_err());
        // A sealed result is not a valid request envelope and vice versa.
        prop_assert!(open_data(&sealed, &key, &a.private).is_err());
        let data = seal_data(b"frame", &a.public, &key).unwrap();
        prop_assert!(open_result(&data, &key).is_err());
    }
}

#[derive(Debug, Clone)]
enum KmsOp {
    Register(usize),
    Revoke(usize),
    /// Decrypt under app `as_app` a blob wrapped by app `by`, optionally for
    /// a different KMS.
    Decrypt { as_app: usize, by: usize, foreign_kms: bool },
}

fn kms_op() -> impl Strategy<Value = KmsOp> {
    prop_oneof![
        1 => (0usize..3).prop_map(KmsOp::Register),
        1 => (0usize..3).prop_map(KmsOp::Revoke),
        4 => (0usize..3, 0usize..3, proptest::bool::weighted(0.15))
            .prop_map(|(as_app, by, foreign_kms)| KmsOp::Decrypt { as_app, by, foreign_kms }),
    ]
}

#[derive(Clone, Copy, PartialEq)]
enum Reg {
    Never,
    Active,
    Revoked,
}

proptest! {
    #![proptest_config(config())]

    fn kms_audits_every_decrypt_exactly_once(ops in proptest::collection::vec(kms_op(), 1..24)) {
        let kms = Kms::in_memory(KmsConfig::default(), Arc::new(VirtualClock::new(0))).unwrap();
        let foreign = KmsKeyPair::generate().unwrap();
        let apps: Vec<AppKeyPair> = (0..3).map(|i| app(&format!("app-{i}"))).collect();
        let key = generate_data_key().unwrap();
        let mut model = [Reg::Never; 3];

        for (n, op) in ops.iter().enumerate() {
            let before = kms.audit_len();
            match *op {
                KmsOp::Register(i) => {
                    let r = kms.register_app(&apps[i].app_id, &apps[i].material());
                    prop_assert_eq!(r.is_ok(), model[i] != Reg::Active);
                    model[i] = Reg::Active;
                    prop_assert_eq!(kms.audit_len(), before);
                }
                KmsOp::Revoke(i) => {
                    let r = kms.revoke_app(&apps[i].app_id);
                    prop_assert_eq!(r.is_ok(), model[i] == Reg::Active);
                    if model[i] == Reg::Active {
                        model[i] = Reg::Revoked;
                    }
                    prop_assert_eq!(kms.audit_len(), before);
                }
                KmsOp::Decrypt { as_app, by, foreign_kms } => {
                    let target = if foreign_kms { foreign.public().clone() } else { kms.get_public_key() };
                    let wrapped = wrap_data_key(&key, &apps[by], &target).unwrap();
                    let request_id = format!("req-{n}");
                    let got = kms.decrypt_data_key(&apps[as_app].app_id, &request_id, &wrapped);
                    let expected = match model[as_app] {
                        Reg::Never => Decision::DeniedUnregistered,
                        Reg::Revoked => Decision::DeniedRevoked,
                        Reg::Active if foreign_kms => Decision::DeniedCryptoError,
                        Reg::Active if by != as_app => Decision::DeniedBadSignature,
                        Reg::Active => Decision::Granted,
                    };
                    match got {
                        Ok(k) => {
                            prop_assert_eq!(expected, Decision::Granted);
                            prop_assert_eq!(&k, &key);
                        }
                        Err(KmsError::Denied { decision, .. }) => prop_assert_eq!(decision, expected),
                        Err(e) => prop_assert!(false, "unexpected error {e}"),
                    }
                    prop_assert_eq!(kms.audit_len(), before + 1);
                    let last = kms.query_audit(&Default::default()).unwrap().pop().unwrap();
                    prop_assert_eq!(last.decision, expected);
                    prop_assert_eq!(last.app_id.as_str(), apps[as_app].app_id.as_str());
                    prop_assert_eq!(last.request_id, request_id);
                }
            }
        }
        let audit = kms.query_audit(&Default::default()).unwrap();
        prop_assert!(audit.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    fn revoked_apps_are_always_denied(decrypts_before in 0usize..4, decrypts_after in 1usize..4) {
        let kms = Kms::in_memory(KmsConfig::default(), Arc::new(VirtualClock::new(0))).unwrap();
        let a = app("revokee");
        kms.register_app(&a.app_id, &a.material()).unwrap();
        let key = generate_data_key().unwrap();
        let wrapped = wrap_data_key(&key, &a, &kms.get_public_key()).unwrap();
        for i in 0..decrypts_before {
            let granted = kms.decrypt_data_key(&a.app_id, &format!("b{i}"), &wrapped).is_ok();
            prop_assert!(granted);
        }
        kms.revoke_app(&a.app_id).unwrap();
        for i in 0..decrypts_after {
            let r = kms.decrypt_data_key(&a.app_id, &format!("a{}", i), &wrapped);
            prop_assert!(
                matches!(r, Err(KmsError::Denied { decision: Decision::DeniedRevoked, .. })),
                "{:?}",
                r
            );
        }
        prop_assert_eq!(kms.audit_len(), decrypts_before + decrypts_after);
    }
}

const PROFILES: [&str; 3] = ["MobileNet", "DenseNet", "Darknet"];

fn policy() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![
        Just(PolicyKind::LatencyMin),
        Just(PolicyKind::Balanced),
        Just(PolicyKind::LocalOnly),
        Just(PolicyKind::RemoteOnly),
    ]
}

/// (arrival offset from the previous request, profile index).
fn arrivals() -> impl Strategy<Value = Vec<(Millis, usize)>> {
    proptest::collection::vec((prop_oneof![Just(0u64), 0u64..5_000, 0u64..3_600_000], 0usize..3), 1..10)
}

struct Run {
    log: Vec<HubLogEvent>,
    submitted: Vec<String>,
    outcomes: BTreeMap<String, (TargetKind, TerminalState)>,
    completed_events: BTreeMap<String, usize>,
    audit_len: usize,
    slots_in_use: usize,
}

fn run_hub(kind: PolicyKind, max_local: Option<usize>, reject: bool, seed: u64, trace: &[(Millis, usize)]) -> Run {
    let w = World::new(PlatformConfig::default(), 206).unwrap();
    let mut hub = w
        .hub(HubConfig {
            policy: OffloadPolicy::new(kind),
            max_local,
            reject_when_full: reject,
            seed,
            ..HubConfig::default()
        })
        .unwrap();
    let ids: Vec<AppId> = PROFILES
        .iter()
        .map(|p| {
            let b = w.provision(&AppSpec::new(&p.to_lowercase(), p)).unwrap();
            let id = b.app_id().clone();
            hub.add_app(b);
            id
        })
        .collect();
    let mut t = 0;
    let mut submitted = Vec::new();
    for (i, &(gap, p)) in trace.iter().enumerate() {
        t += gap;
        let payload = vec![i as u8; 128];
        submitted.push(hub.submit(&ids[p], payload, t).unwrap().request_id);
    }
    hub.drain().unwrap();
    let mut completed_events = BTreeMap::new();
    for e in hub.log() {
        if let HubLogEvent::Completed(o) = e {
            *completed_events.entry(o.request_id.clone()).or_default() += 1;
        }
    }
    Run {
        log: hub.log().to_vec(),
        submitted,
        outcomes: hub.outcomes().map(|o| (o.request_id.clone(), (o.target, o.terminal))).collect(),
        completed_events,
        audit_len: w.kms.audit_len(),
        slots_in_use: hub.monitor().snapshot().in_use_slots,
    }
}

proptest! {
    #![proptest_config(config())]

    fn every_request_terminates_exactly_once(
        kind in policy(),
        max_local in proptest::option::of(1usize..5),
        reject in any::<bool>(),
        trace in arrivals(),
    ) {
        let r = run_hub(kind, max_local, reject, 0, &trace);
        prop_assert_eq!(r.outcomes.len(), r.submitted.len());
        for id in &r.submitted {
            prop_assert!(r.outcomes.contains_key(id), "{} has no outcome", id);
            prop_assert_eq!(r.completed_events.get(id), Some(&1));
        }
        prop_assert_eq!(r.slots_in_use, 0);
        // Every admitted request asks the KMS for its key once.
        let admitted = r.outcomes.values().filter(|(t, _)| *t != TargetKind::Rejected).count();
        prop_assert_eq!(r.audit_len, admitted);
    }

    fn same_seed_same_hub_log(kind in policy(), seed in any::<u64>(), trace in arrivals()) {
        let a = run_hub(kind, Some(4), false, seed, &trace);
        let b = run_hub(kind, Some(4), false, seed, &trace);
        prop_assert_eq!(a.log, b.log);
    }

    fn plaintext_never_reaches_the_platform_operator(
        payload in proptest::collection::vec(any::<u8>(), 24..600),
        invocations in 1usize..4,
    ) {
        let w = World::new(PlatformConfig { capture_trace: true, ..PlatformConfig::default() }, 206).unwrap();
        let mut hub = w
            .hub(HubConfig { policy: OffloadPolicy::new(PolicyKind::RemoteOnly), ..HubConfig::default() })
            .unwrap();
        let b = w.provision(&AppSpec::new("cam", "MobileNet")).unwrap();
        let private = b.app.private.to_bytes();
        let id = b.app_id().clone();
        hub.add_app(b);
        for i in 0..invocations {
            hub.submit(&id, payload.clone(), i as u64 * 1_000).unwrap();
        }
        hub.drain().unwrap();
        let trace = w.platform.call(|p| p.trace().to_vec()).unwrap();
        let inbound = trace.iter().filter(|e| e.channel == TraceChannel::Inbound).count();
        prop_assert_eq!(inbound, invocations);
        for entry in &trace {
            prop_assert!(!contains(&entry.bytes, &payload), "payload on {:?}", entry.channel);
            prop_assert!(!contains(&entry.bytes, &private[..32]), "key on {:?}", entry.channel);
        }
    }

    fn monitor_never_overcommits(
        class in prop_oneof![Just(DeviceClass::JetsonNano), Just(DeviceClass::RPi)],
        max_local in proptest::option::of(1usize..6),
        ops in proptest::collection::vec((any::<bool>(), 0.1f64..2.5), 1..40),
    ) {
        let device = DeviceSpec::defaults(class);
        let monitor = ResourceMonitor::new(device, max_local);
        let total = monitor.snapshot();
        let mut held = Vec::new();
        for (reserve, mem) in ops {
            if reserve || held.is_empty() {
                let fits = monitor.can_fit(mem);
                let r = monitor.try_reserve(mem);
                prop_assert_eq!(fits, r.is_some());
                held.extend(r);
            } else {
                monitor.release(held.swap_remove(0));
            }
            let s = monitor.snapshot();
            prop_assert!(s.in_use_slots <= s.total_slots);
            prop_assert!(s.in_use_mem_gb <= s.total_mem_gb + 1e-9);
            prop_assert_eq!(s.in_use_slots, held.len());
            let mut slots: Vec<usize> = held.iter().map(|r| r.slot).collect();
            slots.sort_unstable();
            slots.dedup();
            prop_assert_eq!(slots.len(), held.len());
        }
        for r in held.drain(..) {
            monitor.release(r);
        }
        let s = monitor.snapshot();
        prop_assert_eq!((s.in_use_slots, s.in_use_mem_gb.abs() < 1e-9), (0, true));
        prop_assert_eq!(s.total_slots, total.total_slots);
    }
}

fn item_id() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,8}".prop_map(|s| format!("item_{s}"))
}

fn text(min: usize) -> impl Strategy<Value = String> {
    proptest::string::string_regex(&format!("[a-zA-Z0-9 _.,:!?'\"\\\\é-]{{{min},16}}")).unwrap()
}

fn atom() -> impl Strategy<Value = Atom> {
    prop_oneof![
        text(0).prop_map(|value| Atom::LabelEq { value }),
        (
            prop_oneof![Just(CmpOp::Gt), Just(CmpOp::Ge), Just(CmpOp::Lt), Just(CmpOp::Le)],
            0u32..=1000,
        )
            .prop_map(|(op, v)| Atom::Score {
                op,
                value: f64::from(v) / 1000.0,
            }),
    ]
}

fn statement() -> impl Strategy<Value = Statement> {
    let leaf = prop_oneof![
        (item_id(), text(1)).prop_map(|(item_id, command)| Statement::SendCommand { item_id, command }),
        text(0).prop_map(|text| Statement::SendNotification { text }),
    ];
    leaf.prop_recursive(3, 12, 4, |inner| {
        (proptest::collection::vec(atom(), 1..4), proptest::collection::vec(inner, 0..4)).prop_map(
            |(atoms, then_body)| Statement::If {
                condition: Condition { atoms },
                then_body,
            },
        )
    })
}

fn trigger() -> impl Strategy<Value = Trigger> {
    prop_oneof![
        (text(1), text(0), text(0)).prop_map(|(thing_id, from_state, to_state)| Trigger::ThingChanged {
            thing_id,
            from_state,
            to_state,
        }),
        text(1).prop_map(|item_id| Trigger::ItemUpdated { item_id }),
    ]
}

fn rule_set() -> impl Strategy<Value = RuleSet> {
    proptest::collection::vec((trigger(), proptest::collection::vec(statement(), 0..5)), 0..4).prop_map(|rules| {
        RuleSet {
            rules: rules
                .into_iter()
                .enumerate()
                .map(|(i, (trigger, body))| Rule {
                    name: format!("rule {i}"),
                    trigger,
                    body,
                })
                .collect(),
        }
    })
}

proptest! {
    #![proptest_config(config())]

    fn rules_print_then_parse_is_identity(rs in rule_set()) {
        let printed = rs.to_string();
        let back = parse_rules(&printed).map_err(|e| TestCaseError::fail(format!("{e}\n{printed}")))?;
        prop_assert_eq!(&back, &rs);
        prop_assert_eq!(back.to_string(), printed);
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("envelope_roundtrip", envelope_roundtrip),
    ("both_keys_are_required", both_keys_are_required),
    ("sealed_data_is_tamper_evident", sealed_data_is_tamper_evident),
    ("wrapped_key_is_tamper_evident", wrapped_key_is_tamper_evident),
    ("results_open_only_under_their_own_key", results_open_only_under_their_own_key),
    ("kms_audits_every_decrypt_exactly_once", kms_audits_every_decrypt_exactly_once),
    ("revoked_apps_are_always_denied", revoked_apps_are_always_denied),
    ("every_request_terminates_exactly_once", every_request_terminates_exactly_once),
    ("same_seed_same_hub_log", same_seed_same_hub_log),
    ("plaintext_never_reaches_the_platform_operator", plaintext_never_reaches_the_platform_operator),
    ("monitor_never_overcommits", monitor_never_overcommits),
    ("rules_print_then_parse_is_identity", rules_print_then_parse_is_identity),
];
