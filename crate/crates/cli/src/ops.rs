//! Command bodies. Every function takes already-merged configuration and
//! returns the crate-wide `Result`; exit-code mapping lives in main.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use meshgen_core::error::{Error, Result};
use meshgen_core::eval as ev;
use meshgen_core::mesh::{dequantize, normalize, quantize, triangulate, QuantizedMesh, RawMesh};
use meshgen_core::model::checkpoint;
use meshgen_core::model::cond::{encode_cond, CondInputs};
use meshgen_core::model::decode::{generate, HaltReason};
use meshgen_core::model::train::{run_training, TrainExample};
use meshgen_core::model::{init_model, ParameterSet};
use meshgen_core::mtok::{load_mtok, save_mtok};
use meshgen_core::obj::{load_mesh, write_obj};
use meshgen_core::order_fsm::{invalid_fraction, validate_sequence};
use meshgen_core::pointcloud::{
    augment, fps, load_ply, sample_surface, save_ply, visibility_filter,
};
use meshgen_core::procgen::gen_procedural;
use meshgen_core::sequencer::{decode as decode_tokens, encode as encode_mesh, Token, TokenSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{write_resolved, RunConfig};

/// OBJ -> canonical token stream: triangulate, normalize to the unit box,
/// snap to the grid, emit framed tokens.
pub fn prepare_sequence(mesh: &RawMesh, quant_level: u32) -> Result<(RawMesh, QuantizedMesh, TokenSequence)> {
    let (tri, _) = triangulate(mesh);
    let normed = normalize(&tri)?;
    let (qm, _) = quantize(&normed, quant_level)?;
    let seq = encode_mesh(&qm)?;
    Ok((normed, qm, seq))
}

pub fn cmd_encode(input: &Path, output: &Path, quant_level: u32) -> Result<()> {
    let mesh = load_mesh(input)?;
    let (_, _, seq) = prepare_sequence(&mesh, quant_level)?;
    save_mtok(output, &seq)?;
    println!(
        "encoded {} -> {} ({} tokens, {} faces)",
        input.display(),
        output.display(),
        seq.tokens.len(),
        seq.face_count()?
    );
    Ok(())
}

pub fn cmd_decode(input: &Path, output: &Path) -> Result<()> {
    let seq = load_mtok(input)?;
    let qm = decode_tokens(&seq)?;
    let mesh = dequantize(&qm);
    write_obj(output, &mesh)?;
    println!(
        "decoded {} -> {} ({} vertices, {} faces)",
        input.display(),
        output.display(),
        mesh.vertices.len(),
        mesh.faces.len()
    );
    Ok(())
}

pub fn cmd_validate(inputs: &[PathBuf]) -> Result<()> {
    for path in inputs {
        let seq = load_mtok(path)?;
        let faces = validate_sequence(&seq)?;
        println!("{} ok faces={faces}", path.display());
    }
    Ok(())
}

pub fn cmd_stats(inputs: &[PathBuf], quant_levels: &[u32], output: Option<&Path>) -> Result<()> {
    let meshes = collect_meshes(inputs)?;
    if meshes.is_empty() {
        return Err(Error::Config("no input meshes".into()));
    }
    let mut csv = String::from("quant_level,meshes,positions,mean_invalid_fraction");
    for k in 0..9 {
        csv.push_str(&format!(",slot{k}"));
    }
    csv.push('\n');
    for &q in quant_levels {
        let mut seqs = Vec::with_capacity(meshes.len());
        for (_, mesh) in &meshes {
            let (_, _, seq) = prepare_sequence(mesh, q)?;
            seqs.push(seq);
        }
        let stats = invalid_fraction(&seqs, q)?;
        csv.push_str(&format!(
            "{q},{},{},{:.6}",
            seqs.len(),
            stats.positions,
            stats.mean
        ));
        for s in stats.per_slot {
            csv.push_str(&format!(",{s:.6}"));
        }
        csv.push('\n');
    }
    emit(output, &csv)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample_points(
    input: &Path,
    output: &Path,
    count: usize,
    seed: u64,
    visibility: bool,
    fps_k: Option<usize>,
    noise_pos: f64,
    noise_normal: f64,
    p_zero_normals: f64,
) -> Result<()> {
    let mesh = load_mesh(input)?;
    let (tri, _) = triangulate(&mesh);
    let normed = normalize(&tri)?;
    let mut cloud = sample_surface(&normed, count, seed)?;
    if visibility {
        cloud = visibility_filter(&cloud, &normed, 1e-4);
        if cloud.is_empty() {
            return Err(Error::InvalidMesh(
                "visibility filter removed every sample".into(),
            ));
        }
    }
    if let Some(k) = fps_k {
        cloud = fps(&cloud, k, seed)?;
    }
    if noise_pos > 0.0 || noise_normal > 0.0 || p_zero_normals > 0.0 {
        cloud = augment(&cloud, noise_pos, noise_normal, p_zero_normals, seed ^ 0xa5a5);
    }
    save_ply(output, &cloud)?;
    println!("sampled {} points -> {}", cloud.len(), output.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub faces: usize,
    pub quad_ratio: f64,
}

pub fn cmd_gen_dataset(
    output_dir: &Path,
    cfg: &RunConfig,
    flags: &BTreeMap<String, String>,
) -> Result<()> {
    let spec = cfg.gen_spec()?;
    fs::create_dir_all(output_dir)?;
    let mut manifest = Vec::with_capacity(cfg.data.count);
    for i in 0..cfg.data.count {
        let seed = cfg.data.seed.wrapping_add(i as u64);
        let raw = gen_procedural(seed, &spec);
        let normed = normalize(&raw)?;
        let file = format!("mesh_{i:05}.obj");
        write_obj(&output_dir.join(&file), &normed)?;
        manifest.push(ManifestEntry {
            file,
            seed,
            faces: normed.faces.len(),
            quad_ratio: raw.quad_ratio,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
    fs::write(output_dir.join("manifest.json"), json)?;
    write_resolved(output_dir, "gen-dataset", flags, cfg)?;
    println!(
        "wrote {} meshes and manifest.json to {}",
        manifest.len(),
        output_dir.display()
    );
    Ok(())
}

/// One dataset item prepared for training or evaluation.
pub struct CorpusItem {
    pub path: PathBuf,
    pub mesh: RawMesh,
    pub quantized: QuantizedMesh,
    pub seq: TokenSequence,
    pub quad_ratio: f64,
}

/// Reads a dataset directory: `manifest.json` order when present,
/// lexicographic `*.obj` order otherwise.
pub fn load_corpus(dir: &Path, quant_level: u32) -> Result<Vec<CorpusItem>> {
    let manifest_path = dir.join("manifest.json");
    let entries: Vec<(PathBuf, f64)> = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
        manifest
            .into_iter()
            .map(|m| (dir.join(m.file), m.quad_ratio))
            .collect()
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "obj"))
            .collect();
        files.sort();
        files.into_iter().map(|p| (p, 0.0)).collect()
    };
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no .obj files under {}",
            dir.display()
        )));
    }
    let mut corpus = Vec::with_capacity(entries.len());
    for (path, quad_ratio) in entries {
        let mesh = load_mesh(&path)?;
        let (normed, qm, seq) = prepare_sequence(&mesh, quant_level)?;
        corpus.push(CorpusItem {
            path,
            mesh: normed,
            quantized: qm,
            seq,
            quad_ratio,
        });
    }
    Ok(corpus)
}

fn cond_inputs_for(item: &CorpusItem, cfg: &RunConfig, index: usize) -> Result<CondInputs> {
    let seed = cfg.data.seed.wrapping_add(index as u64).wrapping_mul(0x9e3779b9);
    let mut cloud = sample_surface(&item.mesh, cfg.data.points, seed)?;
    if cfg.data.noise_pos > 0.0 || cfg.data.noise_normal > 0.0 || cfg.data.p_zero_normals > 0.0 {
        cloud = augment(
            &cloud,
            cfg.data.noise_pos,
            cfg.data.noise_normal,
            cfg.data.p_zero_normals,
            seed ^ 0x517c,
        );
    }
    CondInputs::from_cloud(
        &cloud,
        item.quantized.faces.len() as u64,
        item.quad_ratio,
    )
}

pub fn cmd_train(
    data_dir: &Path,
    output_dir: &Path,
    cfg: &RunConfig,
    flags: &BTreeMap<String, String>,
) -> Result<()> {
    let model_cfg = cfg.model_config()?;
    let tc = cfg.train_config()?;
    let corpus = load_corpus(data_dir, cfg.data.quant_level)?;
    let conditioned = model_cfg.cond.is_some();
    let mut examples = Vec::with_capacity(corpus.len());
    for (i, item) in corpus.iter().enumerate() {
        examples.push(TrainExample {
            tokens: item.seq.tokens.clone(),
            cond: if conditioned {
                Some(cond_inputs_for(item, cfg, i)?)
            } else {
                None
            },
        });
    }
    let mut model = init_model(&model_cfg, cfg.model.seed);
    println!(
        "training {} params on {} sequences for {} steps",
        model.num_params(),
        examples.len(),
        tc.steps
    );
    let report_every = (tc.steps / 20).max(1);
    let metrics = run_training(&mut model, &examples, &tc, |m| {
        if m.step % report_every == 0 || m.step + 1 == tc.steps {
            println!(
                "step {:>6}  loss {:.4}  ppl {:.3}  lr {:.3e}  gnorm {:.3}  tok/s {:.0}",
                m.step,
                m.loss,
                m.ppl,
                m.lr,
                m.grad_norm,
                m.tokens as f64 / m.seconds
            );
        }
    })?;
    fs::create_dir_all(output_dir)?;
    checkpoint::save(&output_dir.join("model.ckpt"), &model)?;
    checkpoint::write_metrics_csv(&output_dir.join("metrics.csv"), &metrics)?;
    write_resolved(output_dir, "train", flags, cfg)?;
    println!(
        "saved checkpoint and metrics to {} (final loss {:.4})",
        output_dir.display(),
        metrics.last().map_or(f64::NAN, |m| m.loss)
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct HaltRecord {
    halt: &'static str,
    faces: u64,
    steps: usize,
    tokens: usize,
}

pub fn cmd_generate(
    ckpt: &Path,
    output: &Path,
    points: Option<&Path>,
    cfg: &RunConfig,
    flags: &BTreeMap<String, String>,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    if cfg.sampling.faces == 0 {
        return Err(Error::Config("faces must be positive".into()));
    }
    let bundle = match (&model.cfg.cond, points) {
        (Some(_), Some(ply)) => {
            let cloud = load_ply(ply)?;
            let inputs = CondInputs::from_cloud(&cloud, cfg.sampling.faces, cfg.sampling.quad_ratio)?;
            Some(encode_cond(&model, &inputs)?.0)
        }
        (Some(_), None) => {
            return Err(Error::Config(
                "this checkpoint is conditioned: pass --points <file.ply>".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Config(
                "this checkpoint is unconditioned: drop --points".into(),
            ))
        }
        (None, None) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampling.seed);
    let out = generate(
        &model,
        bundle.as_ref(),
        cfg.sampling.faces * 2,
        cfg.sampling.temperature,
        &mut rng,
    )?;
    let seq = TokenSequence {
        vocab: model.cfg.vocab(),
        tokens: out.tokens.clone(),
    };
    let qm = decode_tokens(&seq)?;
    let mesh = dequantize(&qm);
    write_obj(output, &mesh)?;
    let halt = match out.halt {
        HaltReason::Natural => "natural",
        HaltReason::FaceLimit => "face_limit",
    };
    let record = HaltRecord {
        halt,
        faces: out.faces,
        steps: out.steps,
        tokens: out.tokens.len(),
    };
    let sidecar = output.with_extension("halt.json");
    fs::write(
        &sidecar,
        serde_json::to_string_pretty(&record)
            .map_err(|e| Error::Config(format!("halt record: {e}")))?,
    )?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        write_resolved(dir, "generate", flags, cfg)?;
    }
    println!(
        "halt={halt} faces={} steps={} tokens={} -> {}",
        out.faces,
        out.steps,
        out.tokens.len(),
        output.display()
    );
    Ok(())
}

fn model_bundle(model: &ParameterSet, item: &CorpusItem, cfg: &RunConfig, i: usize) -> Result<Option<ndarray::Array2<f64>>> {
    if model.cfg.cond.is_none() {
        return Ok(None);
    }
    let inputs = cond_inputs_for(item, cfg, i)?;
    Ok(Some(encode_cond(model, &inputs)?.0))
}

pub fn cmd_eval_ppl(
    ckpt: &Path,
    data_dir: &Path,
    output_dir: &Path,
    cfg: &RunConfig,
    flags: &BTreeMap<String, String>,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let corpus = load_corpus(data_dir, model.cfg.quant_level)?;
    let mut losses = Vec::with_capacity(corpus.len());
    for (i, item) in corpus.iter().enumerate() {
        let bundle = model_bundle(&model, item, cfg, i)?;
        losses.push(ev::coordinate_losses(&model, &item.seq, bundle.as_ref())?);
    }
    let profile = ev::ppl_profile(&losses);
    let mut csv = String::from("slot,mean_loss,ppl\n");
    for (k, l) in profile.iter().enumerate() {
        csv.push_str(&format!("{k},{l:.6},{:.6}\n", l.exp()));
    }
    fs::create_dir_all(output_dir)?;
    fs::write(output_dir.join("ppl_profile.csv"), &csv)?;
    write_resolved(output_dir, "eval", flags, cfg)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_eval_chamfer(
    ckpt: &Path,
    data_dir: &Path,
    output_dir: &Path,
    limit: usize,
    cfg: &RunConfig,
    flags: &BTreeMap<String, String>,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    if model.cfg.cond.is_none() {
        return Err(Error::Config(
            "chamfer reconstruction needs a conditioned checkpoint".into(),
        ));
    }
    let corpus = load_corpus(data_dir, model.cfg.quant_level)?;
    let n = corpus.len().min(limit.max(1));
    let mut csv = String::from("file,chamfer,floor,ratio,halt\n");
    let mut within = 0usize;
    for (i, item) in corpus.iter().take(n).enumerate() {
        let bundle = model_bundle(&model, item, cfg, i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed.wrapping_add(i as u64));
        let out = generate(
            &model,
            bundle.as_ref(),
            (item.quantized.faces.len() as u64).max(1) * 2,
            0.0,
            &mut rng,
        )?;
        let seq = TokenSequence {
            vocab: model.cfg.vocab(),
            tokens: out.tokens.clone(),
        };
        let gen_mesh = dequantize(&decode_tokens(&seq)?);
        let gt = sample_surface(&item.mesh, cfg.eval.samples, cfg.eval.seed ^ 0x11)?;
        let gen_cloud = sample_surface(&gen_mesh, cfg.eval.samples, cfg.eval.seed ^ 0x22)?;
        let d = ev::chamfer(&gt.positions, &gen_cloud.positions)?;
        let floor = ev::quantization_floor(
            &item.mesh,
            model.cfg.quant_level,
            cfg.eval.samples,
            cfg.eval.seed ^ 0x33,
        )?;
        if d <= 3.0 * floor {
            within += 1;
        }
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.3},{}\n",
            item.path.file_name().unwrap_or_default().to_string_lossy(),
            d,
            floor,
            d / floor,
            match out.halt {
                HaltReason::Natural => "natural",
                HaltReason::FaceLimit => "face_limit",
            }
        ));
    }
    fs::create_dir_all(output_dir)?;
    fs::write(output_dir.join("chamfer.csv"), &csv)?;
    write_resolved(output_dir, "eval", flags, cfg)?;
    println!(
        "{within}/{n} reconstructions within 3x the quantization floor (details in chamfer.csv)"
    );
    Ok(())
}

pub fn cmd_eval_swa(
    ckpt: &Path,
    data_dir: &Path,
    output_dir: &Path,
    cfg: &RunConfig,
    flags: &BTreeMap<String, String>,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let corpus = load_corpus(data_dir, model.cfg.quant_level)?;
    let t = cfg.eval.eval_length;
    if t == 0 || t % 9 != 0 {
        return Err(Error::Config("eval_length must be a positive multiple of 9".into()));
    }
    let mut seqs: Vec<(Vec<Token>, Option<ndarray::Array2<f64>>)> = Vec::new();
    for (i, item) in corpus.iter().enumerate() {
        if item.seq.tokens.len() >= t {
            seqs.push((item.seq.tokens[..t].to_vec(), model_bundle(&model, item, cfg, i)?));
        }
    }
    if seqs.is_empty() {
        return Err(Error::Config(format!(
            "no dataset sequence reaches eval_length {t}"
        )));
    }
    let wide = if cfg.eval.unlimited_window > 0 {
        cfg.eval.unlimited_window
    } else {
        t.next_multiple_of(9)
    };
    let curves = ev::swa_extrapolation(&model, &seqs, wide)?;
    fs::create_dir_all(output_dir)?;
    fs::write(output_dir.join("swa.csv"), curves.csv())?;
    write_resolved(output_dir, "eval", flags, cfg)?;
    let w = curves.window;
    println!(
        "sequences={} window={} swa_near={:.4} swa_far={:.4} unlimited_far={:.4}",
        seqs.len(),
        w,
        curves.mean_loss(&curves.swa_loss, 1, w),
        curves.mean_loss(&curves.swa_loss, w, t),
        curves.mean_loss(&curves.unlimited_loss, w, t),
    );
    Ok(())
}

pub fn cmd_cost_model(
    seq_len: usize,
    window: usize,
    channels: usize,
    ffn_hidden: usize,
    configs: &str,
    output: Option<&Path>,
) -> Result<()> {
    if seq_len == 0 {
        return Err(Error::Config("seq-len must be positive".into()));
    }
    let w = if window == 0 { seq_len } else { window };
    let mut reports = Vec::new();
    for part in configs.split(';').filter(|s| !s.is_empty()) {
        let (label, depths) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad config entry {part:?}, want label=d0,d1,d2")))?;
        let d: Vec<usize> = depths
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad depths in {part:?}: {e}")))?;
        if d.len() != 3 {
            return Err(Error::Config(format!("{part:?} needs exactly three depths")));
        }
        reports.push(ev::cost_model(label, (d[0], d[1], d[2]), channels, ffn_hidden, seq_len, w));
    }
    print!("{}", ev::cost_table(&reports));
    if let Some(path) = output {
        fs::write(path, ev::cost_csv(&reports))?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    ckpt: Option<&Path>,
    rolling: bool,
    lengths: Option<&str>,
    probe: usize,
    threads: usize,
    output: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let model = match ckpt {
        Some(p) => checkpoint::load(p)?,
        None => init_model(&cfg.model_config()?, cfg.model.seed),
    };
    let w = model.cfg.window;
    let lengths: Vec<usize> = match lengths {
        Some(text) => text
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad lengths: {e}")))?,
        None if rolling => (1..=8).map(|k| k * w).collect(),
        None => vec![w, 2 * w, 4 * w],
    };
    // A conditioned model still benches: timing only needs a bundle of
    // the right shape, not a meaningful cloud.
    let bundle = model
        .cfg
        .cond
        .as_ref()
        .map(|cc| ndarray::Array2::<f64>::zeros((cc.latents + 2, model.cfg.channels)));
    let points = if rolling {
        ev::throughput_rolling(&model, bundle.as_ref(), &lengths, probe)?
    } else {
        ev::throughput_recompute(&model, bundle.as_ref(), &lengths, probe)?
    };
    let csv = ev::throughput_csv(&points, if rolling { "rolling" } else { "recompute" }, threads);
    emit(output, &csv)
}

fn collect_meshes(inputs: &[PathBuf]) -> Result<Vec<(PathBuf, RawMesh)>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "obj"))
                .collect();
            files.sort();
            for f in files {
                let mesh = load_mesh(&f)?;
                out.push((f, mesh));
            }
        } else {
            let mesh = load_mesh(input)?;
            out.push((input.clone(), mesh));
        }
    }
    Ok(out)
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => {
            fs::write(path, text)?;
            println!("written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
