use styledg::data::{
    default_domain_specs, generate_dataset, load_manifest, save_manifest, stats_report,
    write_stats, GeneratorConfig, ImageSet,
};

fn small_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        image_size: 24,
        per_domain_count: 15,
        seed,
        ..Default::default()
    }
}

#[test]
fn manifest_survives_a_save_load_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small_config(3), dir.path()).unwrap();
    assert_eq!(manifest.len(), 45);
    assert_eq!(manifest.domains(), vec![0, 1, 2]);
    let path = dir.path().join("manifest.jsonl");
    save_manifest(&manifest, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, manifest);
    for r in &back.records {
        assert!(dir.path().join(&r.path).is_file(), "missing {}", r.path);
        assert_eq!(r.labels.len(), 5);
    }
    let set = ImageSet::load(&back, dir.path(), 20).unwrap();
    assert_eq!(set.len(), 45);
    assert_eq!(set.num_classes().unwrap(), 5);
    assert_eq!(set.filter_domains(&[0, 2]).len(), 30);
}

#[test]
fn generation_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(&small_config(9), a.path()).unwrap();
    let mb = generate_dataset(&small_config(9), b.path()).unwrap();
    assert_eq!(ma, mb);
    for r in ma.records.iter().take(10) {
        let x = std::fs::read(a.path().join(&r.path)).unwrap();
        let y = std::fs::read(b.path().join(&r.path)).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn stats_report_separates_domains() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(5);
    cfg.per_domain_count = 40;
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    let report = stats_report(&manifest, dir.path()).unwrap();
    assert_eq!(report.rows.len(), 120);
    let s = &report.summary;
    assert_eq!(s.domains.len(), 3);
    assert_eq!(s.pairwise.len(), 3);
    assert!(s.min_pairwise_distance > s.mean_within_spread);
    assert!(s.nearest_centroid_accuracy > 0.8);

    let out = dir.path().join("stats");
    write_stats(&report, &out).unwrap();
    assert!(std::fs::read_dir(&out).unwrap().count() >= 2);
}

#[test]
fn domain_counts_follow_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mut domains = default_domain_specs();
    domains[0].count = Some(4);
    domains[1].count = Some(0);
    let cfg = GeneratorConfig {
        domains,
        ..small_config(1)
    };
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(m.filter_domains(&[0]).len(), 4);
    assert_eq!(m.filter_domains(&[1]).len(), 0);
    assert_eq!(m.filter_domains(&[2]).len(), 15);
}
