use std::path::Path;

use rollsplat::config::RunConfig;
use rollsplat::scenarios::{glass_pane, seam_log, shutter_log, two_box_log};

#[test]
fn sample_configs_match_scenarios() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, mut want) in [
        ("two_box", two_box_log()),
        ("seam", seam_log()),
        ("glass", glass_pane()),
        ("shutter", shutter_log()),
    ] {
        want.out_dir = Some(format!("../out/{name}").into());
        let got = RunConfig::load(&dir.join(format!("{name}.json"))).unwrap();
        assert_eq!(got.to_json().unwrap(), want.to_json().unwrap(), "configs/{name}.json is stale");
        got.build_world().unwrap();
        got.fit_config().unwrap();
    }
}
