//! The bundled protocol specifications and scenario suite, embedded from
//! `catalog/v1/`. Specs cover the four OAuth 2.0 execution paths
//! (authorization code and implicit mode, each with and without the state
//! parameter) at three providers, SAML 2.0 SP-initiated SSO, and a few
//! auxiliary protocols used by individual scenarios.

use crate::scenario::{parse_scenario, Scenario, ScenarioError};
use crate::spec::{parse_spec, ProtocolSpec, SpecError};

macro_rules! spec_entry {
    ($name:literal) => {
        ($name, include_str!(concat!("../catalog/v1/specs/", $name)))
    };
}

macro_rules! scenario_entry {
    ($name:literal) => {
        ($name, include_str!(concat!("../catalog/v1/scenarios/", $name)))
    };
}

/// `(file name, xml)` for every bundled specification, in catalog order.
/// Within one provider the more specific path (with state) precedes the one
/// without, so composition dispatches state-carrying logins correctly.
pub const BUILTIN_SPECS: &[(&str, &str)] = &[
    spec_entry!("google-authcode-state.xml"),
    spec_entry!("google-authcode.xml"),
    spec_entry!("google-implicit-state.xml"),
    spec_entry!("google-implicit.xml"),
    spec_entry!("facebook-authcode-state.xml"),
    spec_entry!("facebook-authcode.xml"),
    spec_entry!("facebook-implicit-state.xml"),
    spec_entry!("facebook-implicit.xml"),
    spec_entry!("vk-authcode-state.xml"),
    spec_entry!("vk-authcode.xml"),
    spec_entry!("vk-implicit-state.xml"),
    spec_entry!("vk-implicit.xml"),
    spec_entry!("saml-sp-sso.xml"),
    spec_entry!("gigya-code-relay.xml"),
    spec_entry!("evilidp-authcode.xml"),
    spec_entry!("google-authcode-login.xml"),
];

pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    scenario_entry!("benign-google-authcode.scenario"),
    scenario_entry!("benign-google-authcode-state.scenario"),
    scenario_entry!("benign-google-implicit.scenario"),
    scenario_entry!("benign-google-implicit-state.scenario"),
    scenario_entry!("benign-facebook-authcode.scenario"),
    scenario_entry!("benign-facebook-authcode-state.scenario"),
    scenario_entry!("benign-facebook-implicit.scenario"),
    scenario_entry!("benign-facebook-implicit-state.scenario"),
    scenario_entry!("benign-vk-authcode.scenario"),
    scenario_entry!("benign-vk-authcode-state.scenario"),
    scenario_entry!("benign-vk-implicit.scenario"),
    scenario_entry!("benign-vk-implicit-state.scenario"),
    scenario_entry!("benign-saml-sp-sso.scenario"),
    scenario_entry!("attack-session-swapping.scenario"),
    scenario_entry!("attack-social-login-csrf.scenario"),
    scenario_entry!("attack-idp-mixup-web.scenario"),
    scenario_entry!("attack-authcode-redirection.scenario"),
    scenario_entry!("attack-token-redirection.scenario"),
    scenario_entry!("attack-307-redirect.scenario"),
    scenario_entry!("attack-state-leak.scenario"),
    scenario_entry!("attack-cross-social-network.scenario"),
    scenario_entry!("attack-naive-rp-session-integrity.scenario"),
    scenario_entry!("attack-saml-relaystate-tamper.scenario"),
    scenario_entry!("attack-saml-login-csrf.scenario"),
    scenario_entry!("compat-gigya-without.scenario"),
    scenario_entry!("compat-gigya-with.scenario"),
];

/// XML text of a bundled spec by file name.
pub fn builtin_spec_xml(file_name: &str) -> Option<&'static str> {
    BUILTIN_SPECS
        .iter()
        .find(|(n, _)| *n == file_name)
        .map(|(_, xml)| *xml)
}

/// Parse every bundled spec, in catalog order.
pub fn builtin_specs() -> Result<Vec<ProtocolSpec>, SpecError> {
    BUILTIN_SPECS.iter().map(|(_, xml)| parse_spec(xml)).collect()
}

/// Parse every bundled scenario, in catalog order.
pub fn builtin_scenarios() -> Result<Vec<Scenario>, ScenarioError> {
    BUILTIN_SCENARIOS
        .iter()
        .map(|(_, text)| parse_scenario(text))
        .collect()
}

/// Spec resolver over the bundled catalog, for [`crate::scenario::run_scenario`].
pub fn builtin_resolver(name: &str) -> Option<String> {
    builtin_spec_xml(name).map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{has_errors, validate_spec};

    #[test]
    fn all_bundled_specs_parse_and_validate_cleanly() {
        for (name, xml) in BUILTIN_SPECS {
            let spec = parse_spec(xml).unwrap_or_else(|e| panic!("{name}: {e}"));
            let diags = validate_spec(&spec);
            assert!(!has_errors(&diags), "{name}: {diags:?}");
            assert_eq!(
                format!("{}.xml", spec.name),
                *name,
                "spec name attribute must match its file name"
            );
        }
    }

    #[test]
    fn catalog_covers_the_advertised_paths() {
        let specs = builtin_specs().unwrap();
        assert!(specs.len() >= 13, "4 OAuth paths x 3 providers + SAML");
        for provider in ["google", "facebook", "vk"] {
            for variant in ["authcode", "authcode-state", "implicit", "implicit-state"] {
                let name = format!("{provider}-{variant}");
                assert!(specs.iter().any(|s| s.name == name), "missing {name}");
            }
        }
        assert!(specs.iter().any(|s| s.name == "saml-sp-sso"));
    }

    #[test]
    fn all_bundled_scenarios_parse() {
        let scenarios = builtin_scenarios().unwrap();
        let benign = scenarios.iter().filter(|s| s.kind == "benign").count();
        let attack = scenarios.iter().filter(|s| s.kind == "attack").count();
        let compat = scenarios.iter().filter(|s| s.kind == "compat").count();
        assert_eq!((benign, attack, compat), (13, 11, 2));
    }

    #[test]
    fn scenario_spec_references_resolve() {
        for sc in builtin_scenarios().unwrap() {
            for spec in &sc.specs {
                assert!(
                    builtin_spec_xml(spec).is_some(),
                    "{}: unknown spec `{spec}`",
                    sc.name
                );
            }
        }
    }

    #[test]
    fn saml_integrity_targets_relaystate_across_steps() {
        let spec = parse_spec(builtin_spec_xml("saml-sp-sso.xml").unwrap()).unwrap();
        assert_eq!(spec.integrity_policies.len(), 1);
        let policy = &spec.integrity_policies[0];
        assert_eq!(policy.target, "relay_state_2");
        match &policy.matches {
            crate::spec::MatchesPattern::Equality(t) => {
                assert_eq!(t.as_single_ref(), Some("relay_state_1"))
            }
            other => panic!("expected equality template, got {other:?}"),
        }
    }
}
