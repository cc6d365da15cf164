#![no_main]

use fxdist_cli::config::{ObjectivesSpec, ScenarioConfig};
use libfuzzer_sys::fuzz_target;

fn small(o: &ObjectivesSpec) -> bool {
    match o {
        ObjectivesSpec::ShiftedQuarticRange { n_agents, dim } => *n_agents <= 64 && *dim <= 8,
        ObjectivesSpec::Svm { n_agents, m, csv, .. } => *n_agents <= 16 && *m <= 64 && csv.is_none(),
        _ => true,
    }
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ScenarioConfig::from_json(text) else { return };
    let Ok(resolved) = cfg.resolve() else { return };
    if small(&resolved.objectives) {
        if let Ok(s) = resolved.scenario(None) {
            let _ = fxdist::sim::validate(&s);
        }
    }
});
