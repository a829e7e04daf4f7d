use std::path::Path;

use distillkit::config::RunConfig;
use distillkit::data::generate_corpus;
use distillkit::distill::{decode_stats, encode_stats, load_stats, save_stats, TeacherStats};
use distillkit::pipeline::{DataMix, StageKind};
use distillkit::{Error, Tensor};

#[test]
fn empty_document_gives_defaults() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.teachers.len(), 2);
    assert_eq!(cfg.pyramid, vec![32, 48, 64]);
    assert_eq!(cfg.eval.k, 10);
    assert!((cfg.eval.pck_threshold - 0.1).abs() < 1e-12);
    assert!((cfg.datamix.homogeneous_prob - 0.1).abs() < 1e-12);
    assert!((cfg.loss.cos_weight - 0.9).abs() < 1e-6);
    assert!((cfg.loss.smooth_l1_weight - 0.1).abs() < 1e-6);
}

#[test]
fn serialization_round_trips_and_hash_is_stable() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml().unwrap();
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, back);
    let h = cfg.hash().unwrap();
    assert_eq!(h.len(), 16);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(h, back.hash().unwrap());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(h, other.hash().unwrap());
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["sed = 1\n", "[stage2]\nbatch_size = 4\ntotal_steps = 1\nbase_lr = 0.1\nweight_decay = 0.0\nwarmup_fraction = 0.0\nlr = 1\n", "[eval]\nkk = 3\n", "[loss]\nalpha = 0.5\n"] {
        match RunConfig::from_toml(text) {
            Err(Error::Config(msg)) => assert!(msg.contains("unknown field"), "{msg}"),
            other => panic!("{text:?} accepted: {other:?}"),
        }
    }
}

#[test]
fn invalid_values_are_rejected() {
    let cases = [
        "[student]\nimage_size = 32\npatch_size = 8\ndim = 30\ndepth = 1\nheads = 4\nnum_registers = 0\nmlp_ratio = 4.0\n",
        "pyramid = [32, 50]\n",
        "[datamix]\ncurated_fraction = 1.5\n",
        "teachers = []\n",
        "[[teachers]]\nname = \"a\"\n[teachers.encoder]\nimage_size = 32\npatch_size = 8\ndim = 16\ndepth = 1\nheads = 2\nnum_registers = 0\nmlp_ratio = 2.0\n\
         [[teachers]]\nname = \"a\"\n[teachers.encoder]\nimage_size = 32\npatch_size = 8\ndim = 16\ndepth = 1\nheads = 2\nnum_registers = 0\nmlp_ratio = 2.0\n",
        "[[teachers]]\nname = \"../x\"\n[teachers.encoder]\nimage_size = 32\npatch_size = 8\ndim = 16\ndepth = 1\nheads = 2\nnum_registers = 0\nmlp_ratio = 2.0\n",
    ];
    for text in cases {
        assert!(RunConfig::from_toml(text).is_err(), "{text:?} accepted");
    }
}

#[test]
fn stage_configs_follow_the_recipe() {
    let cfg = RunConfig::default();
    let s1 = cfg.stage_config(StageKind::Stage1).unwrap();
    assert_eq!(s1.student, cfg.proxy);
    assert_eq!(s1.resolutions, vec![cfg.proxy.image_size]);
    let s2 = cfg.stage_config(StageKind::Stage2).unwrap();
    assert_eq!(s2.student, cfg.student);
    assert_eq!(s2.resolutions, vec![cfg.student.image_size]);
    let s3 = cfg.stage_config(StageKind::Stage3).unwrap();
    assert_eq!(s3.student, cfg.student);
    assert_eq!(s3.resolutions, cfg.pyramid);
    assert_eq!(s3.total_steps, cfg.stage3.total_steps);
    assert!((s3.base_lr - cfg.stage3.base_lr).abs() < 1e-15);
    let only = cfg.stage_config(StageKind::Stage2Only).unwrap();
    assert_eq!(only.total_steps, cfg.stage2.total_steps);
    assert_eq!(only.resolutions, vec![cfg.student.image_size]);
    let skip = cfg.stage_config(StageKind::Stage1Plus3).unwrap();
    assert_eq!(skip.resolutions, cfg.pyramid);
    assert_eq!(skip.total_steps, cfg.stage2.total_steps);

    let mut custom = cfg.clone();
    custom.stage3.resolutions = Some(vec![32, 64]);
    custom.seed = 9;
    assert_eq!(custom.stage_config(StageKind::Stage3).unwrap().resolutions, vec![32, 64]);
    assert_eq!(custom.stage_config(StageKind::Stage1Plus3).unwrap().resolutions, cfg.pyramid);
    assert_eq!(custom.stage_config(StageKind::Stage2).unwrap().seed, 9);
}

#[test]
fn registry_holds_whole_corpus_and_class_prefixes() {
    let mut cfg = RunConfig::default();
    cfg.data.images_per_class = 8;
    cfg.datamix.curated_fraction = 0.25;
    let samples = generate_corpus(&cfg.data).unwrap();
    let registry = cfg.registry(&samples).unwrap();
    let mix = DataMix::default();
    assert_eq!(registry.get(&mix.heterogeneous).unwrap().len(), samples.len());
    let curated = registry.get(&mix.homogeneous).unwrap();
    assert_eq!(curated.len(), 2 * cfg.data.num_classes);
    let expected: Vec<&Tensor> =
        samples.iter().enumerate().filter(|(i, _)| i % 8 < 2).map(|(_, s)| &s.image).collect();
    assert_eq!(curated.iter().collect::<Vec<_>>(), expected);
}

#[test]
fn artifact_paths() {
    let mut cfg = RunConfig::default();
    let out = Path::new("/tmp/o");
    assert_eq!(cfg.teacher_checkpoint(&cfg.teachers[0], out), out.join("teachers/global.ckpt"));
    assert_eq!(cfg.teacher_stats_path("dense", out), out.join("teachers/dense.stats"));
    cfg.teachers[0].checkpoint = Some("/elsewhere/t.ckpt".into());
    assert_eq!(cfg.teacher_checkpoint(&cfg.teachers[0], out), Path::new("/elsewhere/t.ckpt"));
}

fn sample_stats() -> TeacherStats {
    let v = |k: f32| Tensor::from_fn(vec![5], |i| k + i as f32 * 0.25);
    TeacherStats { class_mean: v(-1.0), class_std: v(0.5), patch_mean: v(2.0), patch_std: v(1.5), sample_count: 37 }
}

#[test]
fn stats_round_trip_bit_exact() {
    let stats = sample_stats();
    let bytes = encode_stats(&stats);
    assert_eq!(&bytes[..8], b"DSTLSTAT");
    assert_eq!(bytes.len(), 8 + 12 + 4 * 5 * 4);
    assert_eq!(decode_stats(&bytes).unwrap(), stats);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.stats");
    save_stats(&path, &stats).unwrap();
    assert_eq!(load_stats(&path).unwrap(), stats);
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn stats_decoding_errors() {
    let bytes = encode_stats(&sample_stats());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_stats(&bad_magic), Err(Error::Format(_))));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(matches!(decode_stats(&bad_version), Err(Error::Version { found: 9, expected: 1 })));
    for cut in [4, 12, 20, bytes.len() - 1] {
        assert!(matches!(decode_stats(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode_stats(&trailing), Err(Error::Format(_))));
    assert!(matches!(load_stats(Path::new("/nonexistent/x.stats")), Err(Error::Io(_))));
}
