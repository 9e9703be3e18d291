use std::path::Path;
use std::process::Command;

#[test]
fn header_declares_the_exported_symbols() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/loco_admm.h")).unwrap();
    for symbol in [
        "loco_last_error",
        "loco_version",
        "loco_scenario_builtin",
        "loco_scenario_from_toml",
        "loco_scenario_robots",
        "loco_scenario_free",
        "loco_simulation_new",
        "loco_simulation_step",
        "loco_simulation_run",
        "loco_simulation_state",
        "loco_simulation_metrics",
        "loco_simulation_write_trace",
        "loco_simulation_free",
        "LOCO_STATUS_OK",
        "LOCO_PLANNER_CENTRALIZED",
        "typedef struct LocoSimulation LocoSimulation;",
    ] {
        assert!(header.contains(symbol), "missing {symbol}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/loco_admm.h");
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status() else {
        eprintln!("no C compiler available, skipping");
        return;
    };
    assert!(status.success());
}
