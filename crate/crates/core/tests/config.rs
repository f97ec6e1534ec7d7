use std::path::Path;

use dishforge::config::{ConfigError, PipelineConfig, DEFAULT_CONFIG_FILE, ROLES};
use tempfile::TempDir;

fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
    PipelineConfig::from_toml(text, Path::new("test.toml"))
}

#[test]
fn remote_endpoints_fill_every_role() {
    let cfg = parse(
        r#"
        mock = false
        seed = 11

        [providers.default]
        base_url = "http://models.internal:9000/"

        [providers.embed]
        base_url = "http://embedder:7000"
        dims = 512
        timeout = 5.0
        "#,
    )
    .unwrap();
    assert_eq!(cfg.seed, 11);
    let default = cfg.endpoint("chat").unwrap();
    assert_eq!(default.name, "default");
    assert_eq!(default.base_url, "http://models.internal:9000");
    let embed = cfg.endpoint("embed").unwrap();
    assert_eq!((embed.dims, embed.timeout), (512, 5.0));
    for role in ROLES {
        assert!(cfg.endpoint(role).is_some(), "{role}");
    }
}

#[test]
fn remote_mode_needs_endpoints() {
    let err = parse("mock = false").unwrap_err();
    assert!(matches!(err, ConfigError::Invalid(ref m) if m.contains("chat")), "{err}");
}

#[test]
fn rejects_bad_values() {
    let cases = [
        "[curation]\nthreshold = 1.2",
        "[schedule]\ndish_ratio = 0.0",
        "[schedule]\nstages = [1, 6]",
        "[editset]\nrho_grid = [0.5, 1.5]",
        "[editset]\nsource_fraction = 1.0",
        "concurrency = 0",
        "[providers.speech]\nbase_url = \"http://x\"",
        "[providers.default]\nbase_url = \"ftp://x\"",
        "[providers.default]\nbase_url = \"http://x\"\ntimeout = 0.0",
    ];
    for text in cases {
        assert!(
            matches!(parse(text), Err(ConfigError::Invalid(_))),
            "accepted {text:?}"
        );
    }
    assert!(matches!(parse("seed = \"x\""), Err(ConfigError::Parse { .. })));
}

#[test]
fn toml_round_trip() {
    let mut cfg = PipelineConfig {
        seed: 99,
        ..PipelineConfig::default()
    };
    cfg.curation.threshold = 0.5;
    cfg.editset.settings.rho_grid = vec![0.1, 0.3];
    let back = parse(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn workspace_file_is_picked_up() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join(DEFAULT_CONFIG_FILE), "seed = 5\n").unwrap();
    let explicit = dir.path().join("other.toml");
    std::fs::write(&explicit, "seed = 6\n").unwrap();
    assert_eq!(PipelineConfig::resolve(Some(&explicit), dir.path()).unwrap().seed, 6);
    if std::env::var_os("DISHFORGE_CONFIG").is_none() {
        assert_eq!(PipelineConfig::resolve(None, dir.path()).unwrap().seed, 5);
    }
    let missing = dir.path().join("absent.toml");
    assert!(matches!(
        PipelineConfig::resolve(Some(&missing), dir.path()),
        Err(ConfigError::Io { .. })
    ));
}

#[test]
fn section_hashes_track_their_sections() {
    let base = PipelineConfig::default();
    let mut tuned = base.clone();
    tuned.curation.threshold = 0.6;
    assert_ne!(base.section_hash("curate"), tuned.section_hash("curate"));
    for stage in ["recaption", "library", "schedule", "editset", "eval"] {
        assert_eq!(base.section_hash(stage), tuned.section_hash(stage), "{stage}");
    }
    let mut reseeded = base.clone();
    reseeded.seed += 1;
    for stage in ["curate", "recaption", "library", "schedule", "editset", "eval"] {
        assert_ne!(base.section_hash(stage), reseeded.section_hash(stage), "{stage}");
    }
    let mut sequential = base.clone();
    sequential.parallel = false;
    assert_eq!(base.section_hash("curate"), sequential.section_hash("curate"));
}
