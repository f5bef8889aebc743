#[path = "support/ledger_oracle.rs"]
mod ledger_oracle;

#[test]
fn fuzzed_commands_match_the_set_model() {
    for seed in [1u64, 2, 3] {
        let report = ledger_oracle::run(seed, 1500);
        assert!(report.mismatches.is_empty(), "{:#?}", &report.mismatches[..report.mismatches.len().min(5)]);
        assert!(report.final_sets_equal);
        assert!(report.accepted > 300, "too few accepted commands: {}", report.accepted);
        assert!(report.accepted < report.commands);
    }
}
