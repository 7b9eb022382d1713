use mabsa::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, VERSION};
use mabsa::config::RunConfig;
use mabsa::diagnostics::{tiny_corpus, tiny_model_config};
use mabsa::mcl::FeatureSource;
use mabsa::trainer::{evaluate, train, Model};
use mabsa::Error;

fn tiny_run() -> RunConfig {
    let m = tiny_model_config(FeatureSource::Encoder);
    let mut cfg = RunConfig {
        text: m.text,
        image: m.image,
        paf: m.paf,
        mcl: m.mcl,
        ama: m.ama,
        ..RunConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 3;
    cfg.train.seed = 5;
    cfg
}

fn trained(cfg: &RunConfig) -> Model {
    let data = tiny_corpus(&cfg.model(), 6, 1).unwrap();
    let model = Model::new(&cfg.model(), cfg.train.switches(), cfg.train.seed).unwrap();
    train(model, &cfg.train, &data, None, None).unwrap().0
}

#[test]
fn save_load_save_is_byte_identical() {
    let cfg = tiny_run();
    let model = trained(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&a, &model, &cfg).unwrap();
    let (loaded, loaded_cfg) = load_checkpoint(&a).unwrap();
    assert_eq!(loaded_cfg, cfg);
    save_checkpoint(&b, &loaded, &loaded_cfg).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.ama.pi, model.ama.pi);
    assert_eq!(loaded.ama.initial_losses, model.ama.initial_losses);
    assert!(model.ama.initial_losses.is_some());
}

#[test]
fn evaluation_survives_persistence_at_stored_precision() {
    let cfg = tiny_run();
    let mut model = trained(&cfg);
    model.params.round_to_f32();
    let dev = tiny_corpus(&cfg.model(), 10, 2).unwrap();
    let before = evaluate(&model, &dev).unwrap();
    let (loaded, _) = decode_checkpoint(&encode_checkpoint(&model, &cfg)).unwrap();
    for id in model.params.ids() {
        assert_eq!(
            model.params.get(id).data(),
            loaded.params.get(id).data(),
            "{}",
            model.params.name(id)
        );
    }
    assert_eq!(evaluate(&loaded, &dev).unwrap(), before);
    assert_eq!(evaluate(&loaded, &dev).unwrap(), before);
}

#[test]
fn header_layout() {
    let cfg = tiny_run();
    let model = Model::new(&cfg.model(), cfg.train.switches(), 0).unwrap();
    let bytes = encode_checkpoint(&model, &cfg);
    assert_eq!(&bytes[..4], b"CLMP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    assert_eq!(
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
        model.params.len()
    );
    let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(
        std::str::from_utf8(&bytes[16..16 + name_len]).unwrap(),
        model.params.name(model.params.ids().next().unwrap())
    );
}

#[test]
fn corrupt_files_are_rejected_with_a_reason() {
    let cfg = tiny_run();
    let model = Model::new(&cfg.model(), cfg.train.switches(), 0).unwrap();
    let bytes = encode_checkpoint(&model, &cfg);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = decode_checkpoint(&bad).unwrap_err();
    assert!(err.to_string().contains("not a CLMP checkpoint"), "{err}");

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = decode_checkpoint(&bad).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    for cut in [6, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
        assert!(err.to_string().contains("offset"), "{err}");
    }

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
}

#[test]
fn config_shape_mismatch_names_the_parameter() {
    let cfg = tiny_run();
    let model = Model::new(&cfg.model(), cfg.train.switches(), 0).unwrap();
    let mut other = cfg.clone();
    other.text.vocab_size += 1;
    let err = decode_checkpoint(&encode_checkpoint(&model, &other)).unwrap_err();
    assert!(err.to_string().contains("text.token_embedding"), "{err}");
}

#[test]
fn missing_file_reports_its_path() {
    let err = load_checkpoint("/nonexistent/m.ckpt").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/m.ckpt"));
}

// ---- config -------------------------------------------------------------

#[test]
fn empty_config_takes_code_defaults() {
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    let partial = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
    assert_eq!(partial.train.epochs, 3);
    assert_eq!(partial.text, RunConfig::default().text);
}

#[test]
fn config_round_trips_through_json() {
    let cfg = tiny_run();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    for bad in [
        r#"{"trian": {}}"#,
        r#"{"train": {"learning_rate": 0.1}}"#,
        r#"{"train": {"ablation": ["no_crf"]}}"#,
        r#"{"text": {"d_model": 30, "n_heads": 4}}"#,
        r#"{"image": {"d_model": 32, "n_heads": 4}}"#,
        r#"{"paf": {"l_max": 4}}"#,
        r#"{"ama": {"alpha": 2.0}}"#,
        r#"{"mcl": {"tau_gcl": 0.0}}"#,
        r#"{"train": {"batch_size": 0}}"#,
        "not json",
    ] {
        assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn shipped_configs_validate() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = RunConfig::load(root.join("desk.json")).unwrap();
    assert_eq!(desk, RunConfig::default());
    let paper = RunConfig::load(root.join("paper.json")).unwrap();
    assert_eq!(paper.text.d_model, 768);
    assert_eq!(paper.image.d_model, 768);
    assert_eq!(paper.text.n_heads, 12);
    assert_eq!(paper.paf.n_heads, 12);
    assert_eq!(paper.image.patch_size, 16);
    assert_eq!(paper.train.epochs, 50);
    assert_eq!(paper.train.batch_size, 32);
    assert_eq!(paper.train.lr, 2e-5);
    assert_eq!(paper.train.weight_decay, 0.01);
    assert_eq!(paper.text.dropout_p, 0.5);
}
