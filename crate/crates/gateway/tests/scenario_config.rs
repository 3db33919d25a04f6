mod common;

use dynaswap_gateway::fixture;
use dynaswap_gateway::scenario::{run_suite, ScenarioConfigError, Suite};

const HEADER: &str = "name = \"t\"\n[fixture]\nseed = 1\npatients = 2\n";

fn parse(steps: &str) -> Result<Suite, ScenarioConfigError> {
    Suite::parse(&format!("{HEADER}{steps}"))
}

#[test]
fn empty_suite_gives_an_empty_passing_report() {
    let suite = parse("").unwrap();
    let (_dir, mut gw, summary) = common::seeded(suite.fixture.patients);
    let report = run_suite(&mut gw, &suite, &summary.markers).unwrap();
    assert!(report.steps.is_empty());
    assert_eq!(report.totals.steps, 0);
    assert!(report.all_passed());
}

#[test]
fn unknown_fields_and_actions_are_parse_errors() {
    assert!(matches!(
        Suite::parse("name = \"t\"\nbogus = 1\n[fixture]\nseed = 1\npatients = 1\n"),
        Err(ScenarioConfigError::Parse(_))
    ));
    let step = r#"
[[steps]]
id = "a"
kind = "access_data"
actor = "dr_adams"
expected = "allow"
cvss = "CVSS:3.0/AV:N/AC:L/PR:L/UI:N/S:U/C:H/I:N/A:N"
description = "x"
inputs = { action = "teleport" }
"#;
    assert!(matches!(parse(step), Err(ScenarioConfigError::Parse(_))));
}

#[test]
fn semantic_errors_are_invalid() {
    let step = |id: &str, expected: &str, extra: &str, inputs: &str| {
        format!(
            "[[steps]]\nid = \"{id}\"\nkind = \"access_data\"\nactor = \"{}\"\nexpected = \"{expected}\"\n{extra}cvss = \"CVSS:3.0/AV:N/AC:L/PR:L/UI:N/S:U/C:H/I:N/A:N\"\ndescription = \"x\"\ninputs = {inputs}\n",
            fixture::PHYSICIANS[0]
        )
    };
    let whoami = "{ action = \"whoami\" }";
    let cases = [
        format!(
            "{}{}",
            step("a", "allow", "", whoami),
            step("a", "allow", "", whoami)
        ),
        step("b", "allow", "expect_error = \"unauthorized\"\n", whoami),
        step(
            "c",
            "allow",
            "",
            "{ action = \"report\", cohort = \"never\", dimension = \"age_gender\" }",
        ),
    ];
    for case in cases {
        let got = parse(&case);
        assert!(
            matches!(got, Err(ScenarioConfigError::Invalid(_))),
            "{case}: {got:?}"
        );
    }
}

#[test]
fn missing_suite_file_is_a_read_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        Suite::load(&dir.path().join("none.toml")),
        Err(ScenarioConfigError::Read { .. })
    ));
}
