mod common;

use fedspar::config::{ChannelConfig, ConfigError, ExperimentConfig, Scheme};
use fedspar_core::fl::{QChoice, Uplink};

#[test]
fn presets_validate_and_round_trip() {
    for p in common::presets() {
        let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again, "{}", p.display());
    }
}

#[test]
fn mnist_presets_match_the_setup() {
    for (name, c) in [("mnist-c0.1", 0.1), ("mnist-c0.2", 0.2), ("mnist-c0.4", 0.4)] {
        let cfg = ExperimentConfig::load(&common::preset(name)).unwrap();
        assert_eq!(cfg.channel, ChannelConfig::Homogeneous { bits_per_entry: c });
        let f = &cfg.federation;
        assert_eq!((f.devices, f.participants, f.rounds, f.local_epochs, f.batch_size), (50, 20, 100, 1, Some(10)));
        let fl = cfg.fl_config();
        assert_eq!(fl.uplink, Uplink::FedSpar { l: 1, q_max: 16, choice: QChoice::Optimized });
    }
    let v = ExperimentConfig::load(&common::preset("mnist-vanilla")).unwrap();
    assert_eq!(v.codec.scheme, Scheme::Vanilla);
}

fn base() -> String {
    std::fs::read_to_string(common::preset("linreg")).unwrap()
}

#[test]
fn field_level_errors() {
    let cases = [
        ("participants = 8", "participants = 0", "federation.participants"),
        ("kappa = 1.0", "kappa = 2.0", "federation.kappa"),
        ("bits_per_entry = 1.0", "bits_per_entry = -1.0", "channel.bits_per_entry"),
        ("q_max = 16", "q_max = 16\nfixed_q = 17", "codec.fixed_q"),
        ("subvectors = 1", "subvectors = 0", "codec.subvectors"),
        (
            "optimizer = { kind = \"gd\", lr = 0.1 }",
            "optimizer = { kind = \"adam\", lr = 0.1 }",
            "federation.track_shadow",
        ),
    ];
    for (from, to, field) in cases {
        let text = base().replace(from, to);
        match ExperimentConfig::from_toml(&text) {
            Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{to}: {other:?}"),
        }
    }
}

#[test]
fn schema_and_syntax_errors() {
    assert!(matches!(
        ExperimentConfig::from_toml(&base().replace("schema_version = 1", "schema_version = 2")),
        Err(ConfigError::Schema(2))
    ));
    assert!(matches!(
        ExperimentConfig::from_toml(&base().replace("schema_version = 1\n", "")),
        Err(ConfigError::Invalid { field: "schema_version", .. })
    ));
    assert!(matches!(
        ExperimentConfig::from_toml(&base().replace("ridge = 0.01", "ridge = 0.01\nbogus = 3")),
        Err(ConfigError::Parse(_))
    ));
}
