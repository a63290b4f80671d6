use std::collections::HashMap;

use protoconcepts::config::Config;
use protoconcepts::data::{
    attach_masks, load_directory_dataset, load_samples, write_dataset, Sample,
};
use protoconcepts::explain::{
    build_galleries, local_explanation, render_report, scan_members, summarize_scan,
    verify_galleries, Report,
};
use protoconcepts::geometry::{is_member, respond};
use protoconcepts::model::checkpoint;
use protoconcepts::training::{run_pipeline, LabeledTensors};

const TINY: &str = r#"
[model]
backbone_channels = [4, 6]
input_size = [16, 16]
prototype_dim = 4
prototypes_per_class = 2
radius_init = 0.3
[losses]
k = 2
[schedule]
batch_size = 4
[schedule.warmup]
epochs = 1
lr_addon = 3e-3
lr_centers = 3e-3
lr_radii = 5e-5
[schedule.joint]
epochs = 2
lr_backbone = 1e-3
lr_addon = 3e-3
lr_centers = 3e-3
lr_last_layer = 1e-4
[schedule.finetune]
epochs = 2
lr_last_layer = 1e-3
l1 = 1e-4
[data.synthetic]
image_size = 16
train_per_class = 4
test_per_class = 2
"#;

#[test]
fn trained_model_explains_itself() {
    let cfg = Config::from_toml(TINY, &[]).unwrap();
    let data = cfg.load_dataset().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (net, report) = run_pipeline(&cfg, &data, tmp.path(), false).unwrap();
    assert_eq!(report.total_prototypes, 8);

    let train = LabeledTensors::from_samples(&data.train);
    let scan = scan_members(&net, &train).unwrap();
    let galleries = build_galleries(&net, &scan, 3).unwrap();
    verify_galleries(&net, &galleries, &train).unwrap();

    let grid = net.grid_size();
    for g in &galleries {
        assert!(g.members.len() <= 3);
        if !net.evidence.mask[g.prototype] {
            assert!(g.members.is_empty());
        }
        // every member reports the same plateau value
        for m in &scan[g.prototype] {
            assert_eq!(
                m.similarity.to_bits(),
                scan[g.prototype][0].similarity.to_bits()
            );
            assert!(
                m.bbox.x1 as usize <= net.input_size.1 && m.bbox.y1 as usize <= net.input_size.0
            );
            assert!(m.bbox.width() > 0 && m.bbox.height() > 0);
            assert!(m.row < grid.0 && m.col < grid.1);
        }
    }
    let summary = summarize_scan(&net, &scan, &data.train);
    assert_eq!(summary.surviving, net.evidence.surviving());

    // member scan agrees with a direct membership test
    let ids: HashMap<&str, usize> = train
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    for (j, members) in scan.iter().enumerate() {
        for m in members {
            let latent = net
                .latent(&train.inputs[ids[m.image_id.as_str()]], "")
                .unwrap();
            assert!(is_member(
                latent.patch(m.row, m.col),
                &net.balls[j],
                &net.geometry_config
            )
            .unwrap());
            let r = net.balls[j].effective_radius(&net.geometry_config);
            assert_eq!(
                m.similarity,
                respond(net.geometry, r, r, net.geometry_config.epsilon).similarity
            );
        }
    }

    let test = LabeledTensors::from_samples(&data.test);
    for (x, id) in test.inputs.iter().zip(&test.ids) {
        let all = local_explanation(&net, x, id, &galleries, usize::MAX).unwrap();
        let logit = all.class_totals[all.predicted];
        let sum: f64 = all.rows.iter().map(|r| r.contribution).sum();
        assert!((sum - logit).abs() < 1e-5);
        assert_eq!(all.class_totals, net.forward_one(x, id).unwrap().logits);

        let top = local_explanation(&net, x, id, &galleries, 3).unwrap();
        assert_eq!(top.rows.len(), 3.min(net.evidence.surviving()));
        assert!(top
            .rows
            .windows(2)
            .all(|w| w[0].contribution >= w[1].contribution));
    }

    let images: HashMap<&str, &_> = data
        .train
        .iter()
        .map(|s| (s.id.as_str(), &s.image))
        .collect();
    let out = tmp.path().join("report");
    render_report(Report::Galleries(&galleries), &data.classes, &images, &out).unwrap();
    let html = std::fs::read_to_string(out.join("index.html")).unwrap();
    assert_eq!(html.matches("<section").count(), net.num_prototypes());

    let loaded = checkpoint::load(&tmp.path().join("finetune.ckpt")).unwrap();
    for x in &test.inputs {
        let a = net.forward_one(x, "").unwrap();
        let b = loaded.forward_one(x, "").unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.similarities, b.similarities);
    }
}

#[test]
fn synthetic_tree_loads_as_directory_dataset() {
    let cfg = Config::from_toml(TINY, &[]).unwrap();
    let data = cfg.load_dataset().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&data, tmp.path()).unwrap();

    let manifest = load_directory_dataset(tmp.path(), (16, 16), None).unwrap();
    assert_eq!(manifest.classes, data.classes);
    let mut loaded = load_samples(&manifest).unwrap();
    assert_eq!(
        attach_masks(&mut loaded, tmp.path()).unwrap(),
        data.train.len() + data.test.len()
    );
    let key = |s: &Sample| {
        (
            s.id.clone(),
            s.label,
            s.image.clone(),
            s.concept_mask.clone(),
        )
    };
    let mut a: Vec<_> = data.train.iter().map(key).collect();
    let mut b: Vec<_> = loaded.train.iter().map(key).collect();
    a.sort_by(|x, y| x.0.cmp(&y.0));
    b.sort_by(|x, y| x.0.cmp(&y.0));
    assert_eq!(a, b);
}
