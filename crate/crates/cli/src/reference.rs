//! Documented default configuration printed by `config-reference`.

use distillkit::config::RunConfig;
use distillkit::Error;

const SECTION_DOCS: &[(&str, &str)] = &[
    ("data", "Synthetic training corpus: procedurally drawn shapes on textured backgrounds."),
    ("eval_data", "Labeled corpus written by `init` for `eval` and `visualize`."),
    ("datamix", "Batch sources: the whole corpus (heterogeneous) and a curated subset (homogeneous)."),
    ("teachers", "Frozen teacher encoder. Repeat the table for every teacher; name and encoder are required.\n\
      Optional: checkpoint = \"path\" (default <out-dir>/teachers/<name>.ckpt)."),
    ("teachers.encoder", "Teacher architecture; must match its checkpoint."),
    ("proxy", "Proxy encoder trained in stage 1 and used as the teacher of stages 2 and 3."),
    ("student", "Student encoder trained in stages 2 and 3."),
    ("stage1", "Multi-teacher distillation into the proxy.\n\
      When the table is given, batch_size, total_steps, base_lr, weight_decay and warmup_fraction are required.\n\
      Optional: resolutions = [..] (default: the proxy's image size), adapter_hidden = n (default 4 * max(student dim, teacher dim))."),
    ("stage2", "Proxy to student at a fixed resolution. Also used by stage2-only and stage1+3.\n\
      Optional: resolutions, adapter_hidden as for stage1."),
    ("stage3", "Multi-resolution fine-tuning from the stage 2 checkpoint.\n\
      Optional: resolutions (default: pyramid), adapter_hidden."),
    ("loss", "Patch loss = cos_weight * cosine distance + smooth_l1_weight * smooth L1; the class loss is the cosine term."),
    ("augment", "Student-view augmentation."),
    ("adam", "AdamW moment parameters, shared by all stages."),
    ("eval", "Evaluation protocols: knn, zeroshot, probe, pck, pca.\n\
      Optional: resolution = n (default: the encoder's image size), zeroshot_head = \"name\" (default: the first head)."),
    ("eval.seg_probe", "Linear probe on patch features predicting per-patch class labels."),
    ("eval.depth_probe", "Linear probe on patch features predicting per-patch depth."),
    ("visualize", "PCA-to-RGB renderings of patch tokens."),
];

const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "Master seed for weights, batches, augmentation, scales and probes."),
    ("pyramid", "Resolution pyramid for stage 3 and stage1+3; every size a multiple of the patch size."),
    ("data.num_classes", "Number of shape classes."),
    ("data.images_per_class", "Images generated per class."),
    ("data.image_size", "Side of the generated square images in pixels."),
    ("data.object_scale", "Object size range as a fraction of the image side."),
    ("data.texture_freq", "Background texture frequency range."),
    ("data.texture_amplitude", "Background texture amplitude."),
    ("data.seed", "Corpus generation seed."),
    ("eval_data.num_classes", "Number of shape classes."),
    ("eval_data.images_per_class", "Images generated per class."),
    ("eval_data.image_size", "Side of the generated square images in pixels."),
    ("eval_data.object_scale", "Object size range as a fraction of the image side."),
    ("eval_data.texture_freq", "Background texture frequency range."),
    ("eval_data.texture_amplitude", "Background texture amplitude."),
    ("eval_data.seed", "Corpus generation seed; keep it distinct from data.seed."),
    ("datamix.homogeneous_prob", "Probability that a batch is drawn entirely from the curated set."),
    ("datamix.curated_fraction", "Leading fraction of every class forming the curated set."),
    ("teachers.name", "Unique name; also names the adapter heads and statistics files."),
    ("teachers.init_seed", "Seed `init` uses to create the toy teacher weights."),
    ("teachers.gamma", "Weight of this teacher's patch loss."),
    ("encoder.image_size", "Native input side in pixels."),
    ("encoder.patch_size", "Patch side in pixels."),
    ("encoder.dim", "Token width."),
    ("encoder.depth", "Number of transformer blocks."),
    ("encoder.heads", "Attention heads; must divide dim."),
    ("encoder.num_registers", "Register tokens appended after the class token."),
    ("encoder.mlp_ratio", "MLP hidden width as a multiple of dim."),
    ("stage.batch_size", "Images per step."),
    ("stage.total_steps", "Optimizer steps."),
    ("stage.base_lr", "Peak learning rate of the cosine schedule."),
    ("stage.weight_decay", "Decoupled weight decay on matrices."),
    ("stage.warmup_fraction", "Fraction of steps spent in linear warmup."),
    ("stage.calibration_images", "Images used to estimate teacher feature statistics."),
    ("stage.checkpoint_every", "Steps between resumable checkpoints."),
    ("loss.cos_weight", "Weight of the cosine term of the patch loss."),
    ("loss.smooth_l1_weight", "Weight of the smooth L1 term of the patch loss."),
    ("loss.smooth_l1_beta", "Transition point of the smooth L1 loss."),
    ("loss.cos_eps", "Norm floor inside the cosine similarity."),
    ("augment.enabled", "Apply augmentation to student views."),
    ("augment.crop_scale", "Area range of the random resized crop."),
    ("augment.hflip_prob", "Horizontal flip probability."),
    ("augment.jitter_prob", "Color jitter probability."),
    ("augment.jitter_strength", "Brightness, contrast and saturation jitter amplitude."),
    ("augment.blur_prob", "Gaussian blur probability."),
    ("augment.blur_sigma", "Blur sigma range in pixels."),
    ("augment.solarize_prob", "Solarization probability."),
    ("augment.solarize_threshold", "Solarization threshold in [0, 1]."),
    ("adam.beta1", "First moment decay."),
    ("adam.beta2", "Second moment decay."),
    ("adam.eps", "Denominator floor."),
    ("eval.k", "Neighbors in the KNN vote."),
    ("eval.pck_threshold", "PCK radius as a fraction of the larger target bounding-box side."),
    ("eval.pck_pairs_per_class", "Maximum image pairs per class for PCK."),
    ("eval.holdout_every", "Every n-th corpus image is held out for testing."),
    ("probe.lr", "Probe learning rate."),
    ("probe.weight_decay", "Probe weight decay."),
    ("probe.steps", "Probe optimizer steps."),
    ("probe.batch_size", "Probe minibatch size."),
    ("visualize.images", "Number of corpus images rendered."),
    ("visualize.resolutions", "Resolutions rendered without --multi-res; the encoder's image size when empty."),
];

const FULL_SCALE: &str = "\
# Full-scale recipe values, for reference (not reachable on toy data):
#   stage2: lr 2e-5, weight decay 1e-4, 390k iterations, batch 8192, resolution 256
#   stage3: lr 1e-5, 100k iterations, batch 4096, pyramid [256, 384, 512]
#   adapter_hidden 1536 (small students) or 3072 (large students)
#   loss: cos_weight 0.9, smooth_l1_weight 0.1; datamix.homogeneous_prob 0.1
#   eval: k 10, pck_threshold 0.1
#   seg probe lr 1e-3, weight decay 1e-3; depth probe lr 3e-4, weight decay 1e-3
";

/// Maps a table path to the key used in `KEY_DOCS`.
fn doc_scope(section: &str) -> &str {
    match section {
        "stage1" | "stage2" | "stage3" => "stage",
        "teachers.encoder" | "proxy" | "student" => "encoder",
        "eval.seg_probe" | "eval.depth_probe" => "probe",
        other => other,
    }
}

fn key_doc(section: &str, key: &str) -> Option<&'static str> {
    let full = if section.is_empty() { key.to_string() } else { format!("{}.{key}", doc_scope(section)) };
    KEY_DOCS.iter().find(|(k, _)| *k == full).map(|(_, d)| *d)
}

fn comment(out: &mut String, text: &str) {
    for line in text.lines() {
        out.push_str("# ");
        out.push_str(line.trim_start());
        out.push('\n');
    }
}

pub fn annotate(toml_text: &str) -> Result<String, Error> {
    let mut out = String::from("# distillkit run configuration. Omitted tables take the values shown;\n\
     # the stage and teacher tables list their required keys.\n\n");
    let mut section = String::new();
    for line in toml_text.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")).or_else(|| {
            trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']'))
        }) {
            section = name.to_string();
            let doc = SECTION_DOCS.iter().find(|(s, _)| *s == name).map(|(_, d)| *d);
            match doc {
                Some(d) => comment(&mut out, d),
                None => return Err(Error::Config(format!("undocumented section [{name}]"))),
            }
        } else if let Some((key, _)) = trimmed.split_once(" = ") {
            match key_doc(&section, key) {
                Some(d) => comment(&mut out, d),
                None => return Err(Error::Config(format!("undocumented key {section}.{key}"))),
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out.push('\n');
    out.push_str(FULL_SCALE);
    Ok(out)
}

pub fn config_reference() -> Result<String, Error> {
    annotate(&RunConfig::default().to_toml()?)
}
