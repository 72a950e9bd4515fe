mod props;

macro_rules! run {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                let (_, f) = props::ALL.iter().find(|(n, _)| *n == stringify!($name)).expect("registered");
                f();
            }
        )*
    };
}

run!(
    envelope_roundtrip,
    both_keys_are_required,
    sealed_data_is_tamper_evident,
    wrapped_key_is_tamper_evident,
    results_open_only_under_their_own_key,
    kms_audits_every_decrypt_exactly_once,
    revoked_apps_are_always_denied,
    every_request_terminates_exactly_once,
    same_seed_same_hub_log,
    plaintext_never_reaches_the_platform_operator,
    monitor_never_overcommits,
    rules_print_then_parse_is_identity,
);

#[test]
fn registry_lists_every_property() {
    assert_eq!(props::ALL.len(), 12);
}
